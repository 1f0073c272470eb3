//! Label evaluation against manual ground truth: exact-key matching,
//! per-task confusion matrices and accuracy, and the CSV report renderer.
//!
//! Matrices carry raw counts internally; row-normalized percentages are
//! produced only at render time, together with explicit denominators.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    AnalysisFile, DepthLabel, IntensityLabel, LabelSet, XDirLabel, YDirLabel,
};
use crate::error::{Error, Result};

/// One manually annotated obstacle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthEntry {
    pub frame_index: usize,
    pub object_id: u32,
    pub depth: DepthLabel,
    pub x_dir: XDirLabel,
    pub y_dir: YDirLabel,
    pub intensity: IntensityLabel,
}

impl GroundTruthEntry {
    pub fn labels(&self) -> LabelSet {
        LabelSet {
            depth: self.depth,
            x_dir: self.x_dir,
            y_dir: self.y_dir,
            intensity: self.intensity,
        }
    }
}

/// The `groundtruth.json` document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub entries: Vec<GroundTruthEntry>,
}

impl GroundTruthFile {
    pub fn validate(&self) -> Result<()> {
        let mut keys = std::collections::HashSet::new();
        for entry in &self.entries {
            let key = (entry.frame_index, entry.object_id);
            if !keys.insert(key) {
                return Err(Error::Schema(format!(
                    "duplicate ground truth key (frame {}, object {})",
                    key.0, key.1
                )));
            }
            if entry.depth == DepthLabel::Unknown {
                return Err(Error::Schema(format!(
                    "frame {}, object {}: ground truth depth may not be `unknown`",
                    entry.frame_index, entry.object_id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GroundTruthFile> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GroundTruthFile::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<GroundTruthFile> {
        let file: GroundTruthFile =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }
}

/// One prediction joined with its annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedPair {
    pub frame_index: usize,
    pub object_id: u32,
    pub predicted: LabelSet,
    pub actual: LabelSet,
}

/// Result of the exact `(frame_index, object_id)` join.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_predictions: Vec<(usize, u32)>,
    pub unmatched_ground_truth: Vec<(usize, u32)>,
}

/// Joins predictions and ground truth on `(frame_index, object_id)`.
/// Unmatched entries on either side are reported and excluded from all
/// downstream counts. Duplicate keys on either side are rejected.
pub fn match_objects(
    predictions: &AnalysisFile,
    ground_truth: &GroundTruthFile,
) -> Result<MatchResult> {
    let mut pred: BTreeMap<(usize, u32), LabelSet> = BTreeMap::new();
    for frame in &predictions.frames {
        for object in &frame.objects {
            let key = (frame.frame_index, object.object_id);
            if pred.insert(key, object.labels).is_some() {
                return Err(Error::Input(format!(
                    "duplicate prediction key (frame {}, object {})",
                    key.0, key.1
                )));
            }
        }
    }
    let mut truth: BTreeMap<(usize, u32), LabelSet> = BTreeMap::new();
    for entry in &ground_truth.entries {
        let key = (entry.frame_index, entry.object_id);
        if truth.insert(key, entry.labels()).is_some() {
            return Err(Error::Input(format!(
                "duplicate ground truth key (frame {}, object {})",
                key.0, key.1
            )));
        }
    }

    let mut result = MatchResult::default();
    for (key, predicted) in &pred {
        match truth.get(key) {
            Some(actual) => result.pairs.push(MatchedPair {
                frame_index: key.0,
                object_id: key.1,
                predicted: *predicted,
                actual: *actual,
            }),
            None => result.unmatched_predictions.push(*key),
        }
    }
    for key in truth.keys() {
        if !pred.contains_key(key) {
            result.unmatched_ground_truth.push(*key);
        }
    }
    Ok(result)
}

/// The four labeling tasks under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Depth,
    XDir,
    YDir,
    Intensity,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Depth, Task::XDir, Task::YDir, Task::Intensity];

    pub fn name(self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::XDir => "x_dir",
            Task::YDir => "y_dir",
            Task::Intensity => "intensity",
        }
    }

    /// Ground-truth label axis. Depth ground truth may not be `unknown`.
    fn row_labels(self) -> Vec<&'static str> {
        match self {
            Task::Depth => vec!["very_close", "close", "far", "very_far"],
            Task::XDir => vec!["left_to_right", "right_to_left", "stable_direction"],
            Task::YDir => vec!["approaching", "moving_away", "stable_distance"],
            Task::Intensity => {
                vec!["stopped", "slow", "average_speed", "fast", "very_fast"]
            }
        }
    }

    /// Predicted label axis; depth gains a dedicated `unknown` column.
    fn col_labels(self) -> Vec<&'static str> {
        let mut cols = self.row_labels();
        if self == Task::Depth {
            cols.push("unknown");
        }
        cols
    }

    fn row_of(self, labels: &LabelSet) -> Option<usize> {
        let name = self.label_name(labels);
        self.row_labels().iter().position(|&l| l == name)
    }

    fn col_of(self, labels: &LabelSet) -> Option<usize> {
        let name = self.label_name(labels);
        self.col_labels().iter().position(|&l| l == name)
    }

    fn label_name(self, labels: &LabelSet) -> &'static str {
        match self {
            Task::Depth => labels.depth.as_str(),
            Task::XDir => labels.x_dir.as_str(),
            Task::YDir => labels.y_dir.as_str(),
            Task::Intensity => labels.intensity.as_str(),
        }
    }
}

/// Counts of (ground truth row, predicted column) for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub task: Task,
    pub row_labels: Vec<&'static str>,
    pub col_labels: Vec<&'static str>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| row[i])
            .sum()
    }
}

/// Tallies matched pairs into a confusion matrix for one task.
pub fn build_confusion(pairs: &[MatchedPair], task: Task) -> ConfusionMatrix {
    let row_labels = task.row_labels();
    let col_labels = task.col_labels();
    let mut counts = vec![vec![0u64; col_labels.len()]; row_labels.len()];
    for pair in pairs {
        let row = task.row_of(&pair.actual);
        let col = task.col_of(&pair.predicted);
        if let (Some(r), Some(c)) = (row, col) {
            counts[r][c] += 1;
        }
        // Ground truth `unknown` depth has no row; validated upstream.
        debug_assert!(row.is_some(), "unexpected ground truth label");
    }
    ConfusionMatrix {
        task,
        row_labels,
        col_labels,
        counts,
    }
}

/// Overall accuracy: trace over total.
pub fn accuracy(matrix: &ConfusionMatrix) -> Result<f64> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::Input(format!(
            "empty confusion matrix for task {}",
            matrix.task.name()
        )));
    }
    Ok(matrix.trace() as f64 / total as f64)
}

/// Accuracy with explicit numerator and denominator, reported because the
/// per-task denominators are part of the output contract.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskAccuracy {
    pub task: Task,
    pub fraction: f64,
    pub correct: u64,
    pub total: u64,
}

pub fn accuracy_summary(matrices: &[ConfusionMatrix]) -> Result<Vec<TaskAccuracy>> {
    matrices
        .iter()
        .map(|m| {
            Ok(TaskAccuracy {
                task: m.task,
                fraction: accuracy(m)?,
                correct: m.trace(),
                total: m.total(),
            })
        })
        .collect()
}

/// Formats a fraction as a percentage with two decimals (`0.8175` ->
/// `"81.75"`).
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

fn matrix_csv(matrix: &ConfusionMatrix) -> String {
    let mut out = String::new();
    out.push_str("gt_label,kind");
    for col in &matrix.col_labels {
        out.push(',');
        out.push_str(col);
    }
    out.push('\n');
    for (r, row_label) in matrix.row_labels.iter().enumerate() {
        let row = &matrix.counts[r];
        let row_total: u64 = row.iter().sum();
        out.push_str(row_label);
        out.push_str(",count");
        for &c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        out.push_str(row_label);
        out.push_str(",percent");
        for &c in row {
            let pct = if row_total == 0 {
                0.0
            } else {
                c as f64 / row_total as f64
            };
            out.push_str(&format!(",{}", format_percent(pct)));
        }
        out.push('\n');
    }
    out
}

fn summary_csv(accuracies: &[TaskAccuracy]) -> String {
    let mut out = String::from("task,accuracy_percent,correct,total\n");
    for acc in accuracies {
        out.push_str(&format!(
            "{},{},{},{}\n",
            acc.task.name(),
            format_percent(acc.fraction),
            acc.correct,
            acc.total
        ));
    }
    out
}

/// Writes one CSV per matrix (raw counts and row-normalized percentages)
/// plus the accuracy summary CSV. Returns the written paths.
pub fn render_report(
    matrices: &[ConfusionMatrix],
    accuracies: &[TaskAccuracy],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for matrix in matrices {
        let path = out_dir.join(format!("confusion_{}.csv", matrix.task.name()));
        std::fs::write(&path, matrix_csv(matrix)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = out_dir.join("accuracy_summary.csv");
    std::fs::write(&path, summary_csv(accuracies)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(
        depth: DepthLabel,
        x_dir: XDirLabel,
        y_dir: YDirLabel,
        intensity: IntensityLabel,
    ) -> LabelSet {
        LabelSet {
            depth,
            x_dir,
            y_dir,
            intensity,
        }
    }

    fn default_labels() -> LabelSet {
        labels(
            DepthLabel::Close,
            XDirLabel::StableDirection,
            YDirLabel::StableDistance,
            IntensityLabel::Stopped,
        )
    }

    fn pair(frame: usize, id: u32, predicted: LabelSet, actual: LabelSet) -> MatchedPair {
        MatchedPair {
            frame_index: frame,
            object_id: id,
            predicted,
            actual,
        }
    }

    fn gt_entry(frame: usize, id: u32) -> GroundTruthEntry {
        GroundTruthEntry {
            frame_index: frame,
            object_id: id,
            depth: DepthLabel::Close,
            x_dir: XDirLabel::StableDirection,
            y_dir: YDirLabel::StableDistance,
            intensity: IntensityLabel::Stopped,
        }
    }

    fn analysis_with_keys(keys: &[(usize, u32)]) -> AnalysisFile {
        let mut frames: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for &(f, o) in keys {
            frames.entry(f).or_default().push(o);
        }
        AnalysisFile {
            frames: frames
                .into_iter()
                .map(|(frame_index, ids)| crate::analysis::AnalysisFrame {
                    frame_index,
                    objects: ids
                        .into_iter()
                        .map(|object_id| crate::analysis::AnalyzedObject {
                            object_id,
                            class_name: "car".into(),
                            score: 1.0,
                            pixel_count: 4,
                            valid_disparity_count: 4,
                            mean_disparity: Some(10.0),
                            mean_flow_x: 0.0,
                            mean_flow_y: 0.0,
                            movement_intensity: 0.0,
                            has_flow: true,
                            labels: default_labels(),
                            size: [2, 2],
                            rle: vec![0, 4],
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn identical_key_sets_match_fully() {
        let keys = [(0usize, 1u32), (0, 2), (1, 1)];
        let pred = analysis_with_keys(&keys);
        let gt = GroundTruthFile {
            entries: keys.iter().map(|&(f, o)| gt_entry(f, o)).collect(),
        };
        let result = match_objects(&pred, &gt).unwrap();
        assert_eq!(result.pairs.len(), 3);
        assert!(result.unmatched_predictions.is_empty());
        assert!(result.unmatched_ground_truth.is_empty());
    }

    #[test]
    fn disjoint_key_sets_match_nothing() {
        let pred = analysis_with_keys(&[(0, 1), (0, 2)]);
        let gt = GroundTruthFile {
            entries: vec![gt_entry(5, 1), gt_entry(5, 2)],
        };
        let result = match_objects(&pred, &gt).unwrap();
        assert!(result.pairs.is_empty());
        assert_eq!(result.unmatched_predictions.len(), 2);
        assert_eq!(result.unmatched_ground_truth.len(), 2);
    }

    #[test]
    fn partial_overlap_counts_out() {
        let pred = analysis_with_keys(&[(0, 1), (0, 2), (1, 1), (1, 2), (2, 1)]);
        let gt = GroundTruthFile {
            entries: vec![gt_entry(0, 1), gt_entry(0, 2), gt_entry(1, 1), gt_entry(9, 9)],
        };
        let result = match_objects(&pred, &gt).unwrap();
        assert_eq!(result.pairs.len(), 3);
        assert_eq!(result.unmatched_predictions.len(), 2);
        assert_eq!(result.unmatched_ground_truth.len(), 1);
    }

    #[test]
    fn duplicate_ground_truth_keys_rejected() {
        let gt = GroundTruthFile {
            entries: vec![gt_entry(0, 1), gt_entry(0, 1)],
        };
        assert!(gt.validate().is_err());
    }

    #[test]
    fn ground_truth_unknown_depth_rejected() {
        let mut entry = gt_entry(0, 1);
        entry.depth = DepthLabel::Unknown;
        let gt = GroundTruthFile {
            entries: vec![entry],
        };
        let err = gt.validate().unwrap_err();
        assert!(err.to_string().contains("unknown"));
    }

    #[test]
    fn all_agreement_is_diagonal() {
        let l = default_labels();
        let pairs = vec![pair(0, 1, l, l), pair(0, 2, l, l), pair(1, 1, l, l)];
        let m = build_confusion(&pairs, Task::Depth);
        assert_eq!(m.trace(), 3);
        assert_eq!(m.total(), 3);
        assert_eq!(accuracy(&m).unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_matrix() {
        let close = |p| {
            labels(
                p,
                XDirLabel::StableDirection,
                YDirLabel::StableDistance,
                IntensityLabel::Stopped,
            )
        };
        let pairs = vec![
            pair(0, 1, close(DepthLabel::Close), close(DepthLabel::Close)),
            pair(0, 2, close(DepthLabel::Far), close(DepthLabel::Close)),
            pair(0, 3, close(DepthLabel::Far), close(DepthLabel::Far)),
        ];
        let m = build_confusion(&pairs, Task::Depth);
        let row = |name: &str| m.row_labels.iter().position(|&l| l == name).unwrap();
        let col = |name: &str| m.col_labels.iter().position(|&l| l == name).unwrap();
        assert_eq!(m.counts[row("close")][col("close")], 1);
        assert_eq!(m.counts[row("close")][col("far")], 1);
        assert_eq!(m.counts[row("far")][col("far")], 1);
        assert_eq!(m.total(), 3);
    }

    #[test]
    fn random_pairs_match_brute_force_tally() {
        // Pseudo-random label streams, tallied independently.
        let depths = [
            DepthLabel::VeryClose,
            DepthLabel::Close,
            DepthLabel::Far,
            DepthLabel::VeryFar,
        ];
        let mut state = 9u64;
        let mut next = move |n: usize| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as usize) % n
        };
        let mut pairs = Vec::new();
        for i in 0..500 {
            let actual = close_labels(depths[next(4)]);
            // Predictions may also be `unknown`, which gets its own column.
            let p = next(5);
            let predicted = close_labels(if p == 4 {
                DepthLabel::Unknown
            } else {
                depths[p]
            });
            pairs.push(pair(i, 0, predicted, actual));
        }
        fn close_labels(d: DepthLabel) -> LabelSet {
            LabelSet {
                depth: d,
                x_dir: XDirLabel::StableDirection,
                y_dir: YDirLabel::StableDistance,
                intensity: IntensityLabel::Stopped,
            }
        }
        let m = build_confusion(&pairs, Task::Depth);
        for (r, &row_label) in m.row_labels.iter().enumerate() {
            for (c, &col_label) in m.col_labels.iter().enumerate() {
                let expected = pairs
                    .iter()
                    .filter(|p| {
                        p.actual.depth.as_str() == row_label
                            && p.predicted.depth.as_str() == col_label
                    })
                    .count() as u64;
                assert_eq!(m.counts[r][c], expected, "{row_label} x {col_label}");
            }
        }
        assert_eq!(m.total(), 500);
    }

    #[test]
    fn predicted_unknown_lands_in_dedicated_column() {
        let actual = default_labels();
        let mut predicted = default_labels();
        predicted.depth = DepthLabel::Unknown;
        let m = build_confusion(&[pair(0, 1, predicted, actual)], Task::Depth);
        let unknown_col = m.col_labels.iter().position(|&l| l == "unknown").unwrap();
        let close_row = m.row_labels.iter().position(|&l| l == "close").unwrap();
        assert_eq!(m.counts[close_row][unknown_col], 1);
        assert_eq!(m.trace(), 0);
    }

    #[test]
    fn accuracy_of_known_counts() {
        let m = ConfusionMatrix {
            task: Task::XDir,
            row_labels: vec!["a", "b"],
            col_labels: vec!["a", "b"],
            counts: vec![vec![3, 1], vec![0, 4]],
        };
        let acc = accuracy(&m).unwrap();
        assert_eq!(acc, 7.0 / 8.0);
        assert_eq!(format_percent(acc), "87.50");
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let m = ConfusionMatrix {
            task: Task::XDir,
            row_labels: vec!["a"],
            col_labels: vec!["a"],
            counts: vec![vec![0]],
        };
        assert!(accuracy(&m).is_err());
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.8175), "81.75");
        assert_eq!(format_percent(1.0 / 3.0), "33.33");
        assert_eq!(format_percent(1.0), "100.00");
        assert_eq!(format_percent(0.875), "87.50");
    }

    #[test]
    fn depth_row_profile_reproduces_published_percentages() {
        // Rows rebuilt from known row counts; the rendered percentages must
        // round to the same two-decimal strings.
        let m = ConfusionMatrix {
            task: Task::Depth,
            row_labels: vec!["very_close", "close", "far", "very_far"],
            col_labels: vec!["very_close", "close", "far", "very_far", "unknown"],
            counts: vec![
                vec![75, 18, 10, 0, 0],
                vec![1, 86, 6, 7, 0],
                vec![0, 0, 67, 33, 0],
                vec![0, 0, 0, 50, 0],
            ],
        };
        let csv = matrix_csv(&m);
        assert!(csv.contains("very_close,percent,72.82,17.48,9.71,0.00,0.00"), "{csv}");
        assert!(csv.contains("close,percent,1.00,86.00,6.00,7.00,0.00"), "{csv}");
        assert!(csv.contains("far,percent,0.00,0.00,67.00,33.00,0.00"), "{csv}");
        assert!(csv.contains("very_far,percent,0.00,0.00,0.00,100.00,0.00"), "{csv}");
    }

    #[test]
    fn percent_rows_sum_to_one_hundred() {
        let m = ConfusionMatrix {
            task: Task::YDir,
            row_labels: vec!["a", "b", "c"],
            col_labels: vec!["a", "b", "c"],
            counts: vec![vec![1, 1, 1], vec![5, 2, 0], vec![0, 0, 9]],
        };
        let csv = matrix_csv(&m);
        for line in csv.lines().filter(|l| l.contains(",percent,")) {
            let sum: f64 = line
                .split(',')
                .skip(2)
                .map(|v| v.parse::<f64>().unwrap())
                .sum();
            assert!((sum - 100.0).abs() <= 0.02, "row `{line}` sums to {sum}");
        }
    }

    #[test]
    fn evaluation_is_order_invariant() {
        let l1 = default_labels();
        let mut l2 = default_labels();
        l2.depth = DepthLabel::Far;
        let a = vec![pair(0, 1, l1, l1), pair(0, 2, l2, l1), pair(1, 1, l2, l2)];
        let mut b = a.clone();
        b.reverse();
        let ma = build_confusion(&a, Task::Depth);
        let mb = build_confusion(&b, Task::Depth);
        assert_eq!(ma, mb);
    }

    #[test]
    fn report_files_render() {
        let dir = tempfile::tempdir().unwrap();
        let l = default_labels();
        let pairs = vec![pair(0, 1, l, l), pair(0, 2, l, l)];
        let matrices: Vec<ConfusionMatrix> = Task::ALL
            .iter()
            .map(|&t| build_confusion(&pairs, t))
            .collect();
        let accuracies = accuracy_summary(&matrices).unwrap();
        let written = render_report(&matrices, &accuracies, dir.path()).unwrap();
        assert_eq!(written.len(), 5);
        let summary =
            std::fs::read_to_string(dir.path().join("accuracy_summary.csv")).unwrap();
        assert!(summary.contains("depth,100.00,2,2"), "{summary}");
        let depth_csv =
            std::fs::read_to_string(dir.path().join("confusion_depth.csv")).unwrap();
        assert!(depth_csv.contains("close,percent,0.00,100.00,0.00,0.00,0.00"), "{depth_csv}");
        assert!(!depth_csv.contains('\r'), "CSV must use LF line endings");
    }
}
