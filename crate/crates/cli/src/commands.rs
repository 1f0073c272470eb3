//! Subcommand implementations. All data outputs go to files; diagnostics go
//! to standard error through the logger.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use obstacle_core::analysis::{analyze_frame, AnalysisFile};
use obstacle_core::config::{config_to_text, load_config, AnalysisConfig};
use obstacle_core::disparity::{compute_disparity, save_disparity_png};
use obstacle_core::error::{Error, Result};
use obstacle_core::eval::{
    accuracy_summary, build_confusion, match_objects, render_report, GroundTruthFile, Task,
};
use obstacle_core::flow::{compute_flow, write_flo, FlowParams};
use obstacle_core::image::{load_image, save_image, StereoPair};
use obstacle_core::mask::parse_detections;
use obstacle_core::synth::{render_scene, SceneScript};

use crate::overlay::{disparity_preview, flow_preview, overlay_object, Canvas};

fn config_or_default(path: &Option<PathBuf>) -> Result<AnalysisConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(AnalysisConfig::default()),
    }
}

pub fn disparity(
    left: &Path,
    right: &Path,
    config: &Option<PathBuf>,
    out: &Path,
    preview: &Option<PathBuf>,
) -> Result<()> {
    let cfg = config_or_default(config)?;
    let pair = StereoPair::new(load_image(left)?, load_image(right)?, 0)?;
    let map = compute_disparity(&pair, &cfg)?;
    log::info!(
        "disparity: {} of {} pixels valid",
        map.valid_count(),
        map.width() * map.height()
    );
    save_disparity_png(&map, out)?;
    if let Some(preview_path) = preview {
        disparity_preview(&map).save_png(preview_path)?;
    }
    Ok(())
}

pub fn flow(
    prev: &Path,
    next: &Path,
    config: &Option<PathBuf>,
    out: &Path,
    preview: &Option<PathBuf>,
) -> Result<()> {
    let cfg = config_or_default(config)?;
    let prev_img = load_image(prev)?;
    let next_img = load_image(next)?;
    let field = compute_flow(&prev_img, &next_img, &FlowParams::from_config(&cfg))?;
    write_flo(&field, out)?;
    if let Some(preview_path) = preview {
        flow_preview(&prev_img, &field).save_png(preview_path)?;
    }
    Ok(())
}

/// One `NNNNNN_left.png` / `NNNNNN_right.png` pair on disk.
struct FrameEntry {
    index: usize,
    left: PathBuf,
    right: PathBuf,
}

/// Parses a 6-digit zero-padded frame index out of `NNNNNN<suffix>`.
fn frame_index_of(name: &str, suffix: &str) -> Option<usize> {
    let stem = name.strip_suffix(suffix)?;
    if stem.len() != 6 || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    stem.parse().ok()
}

fn scan_stereo_frames(dir: &Path) -> Result<Vec<FrameEntry>> {
    let mut entries = Vec::new();
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for item in listing {
        let item = item.map_err(|e| Error::io(dir, e))?;
        let name = item.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(index) = frame_index_of(name, "_left.png") {
            let right = dir.join(format!("{index:06}_right.png"));
            if !right.is_file() {
                return Err(Error::Input(format!(
                    "frame {index:06} has a left image but no {}",
                    right.display()
                )));
            }
            entries.push(FrameEntry {
                index,
                left: item.path(),
                right,
            });
        }
    }
    entries.sort_by_key(|e| e.index);
    if entries.is_empty() {
        return Err(Error::Input(format!(
            "no frames matching NNNNNN_left.png found in {}",
            dir.display()
        )));
    }
    for pair in entries.windows(2) {
        if pair[1].index != pair[0].index + 1 {
            return Err(Error::Input(format!(
                "gap in frame numbering: {:06} follows {:06}",
                pair[1].index, pair[0].index
            )));
        }
    }
    Ok(entries)
}

pub fn analyze(
    frames_dir: &Path,
    detections_path: &Path,
    config: &Option<PathBuf>,
    out: &Path,
    jobs: Option<usize>,
) -> Result<()> {
    let cfg = config_or_default(config)?;
    let frames = scan_stereo_frames(frames_dir)?;
    let first_index = frames[0].index;
    let detections = parse_detections(detections_path)?;
    let known: HashSet<usize> = frames.iter().map(|f| f.index).collect();
    for det_frame in &detections.frames {
        if !known.contains(&det_frame.frame_index) {
            return Err(Error::Input(format!(
                "detections reference frame {} but {} has no such frame",
                det_frame.frame_index,
                frames_dir.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Internal(format!("cannot build worker pool: {e}")))?;

    // Frames are independent given the previous left image, so the pool
    // schedule cannot change any result.
    let results = pool.install(|| {
        frames
            .par_iter()
            .map(|entry| {
                let pair = StereoPair::new(
                    load_image(&entry.left)?,
                    load_image(&entry.right)?,
                    entry.index,
                )?;
                let prev_left = if entry.index > first_index {
                    Some(load_image(
                        frames_dir.join(format!("{:06}_left.png", entry.index - 1)),
                    )?)
                } else {
                    None
                };
                let dets = detections
                    .frame(entry.index)
                    .map(|f| f.detections.as_slice())
                    .unwrap_or(&[]);
                let analysis = analyze_frame(prev_left.as_ref(), &pair, dets, &cfg)?;
                save_disparity_png(
                    &analysis.disparity,
                    out.join(format!("{:06}_disparity.png", entry.index)),
                )?;
                if let Some(field) = &analysis.flow {
                    write_flo(field, out.join(format!("{:06}_flow.flo", entry.index)))?;
                }
                Ok(analysis)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let file = AnalysisFile::from_results(&detections, &results)?;
    let path = out.join("analysis.json");
    std::fs::write(&path, file.to_json()?).map_err(|e| Error::io(&path, e))?;
    log::info!("analysis written to {}", path.display());
    Ok(())
}

pub fn evaluate(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let predictions = AnalysisFile::load(pred)?;
    let ground_truth = GroundTruthFile::load(gt)?;
    let matched = match_objects(&predictions, &ground_truth)?;
    if !matched.unmatched_predictions.is_empty() {
        log::warn!(
            "{} predictions have no ground truth and were excluded",
            matched.unmatched_predictions.len()
        );
    }
    if !matched.unmatched_ground_truth.is_empty() {
        log::warn!(
            "{} ground truth entries have no prediction and were excluded",
            matched.unmatched_ground_truth.len()
        );
    }
    let matrices: Vec<_> = Task::ALL
        .iter()
        .map(|&task| build_confusion(&matched.pairs, task))
        .collect();
    let accuracies = accuracy_summary(&matrices)?;
    for acc in &accuracies {
        log::info!(
            "{}: {}% ({}/{})",
            acc.task.name(),
            obstacle_core::eval::format_percent(acc.fraction),
            acc.correct,
            acc.total
        );
    }
    render_report(&matrices, &accuracies, out)?;
    Ok(())
}

pub fn render(frames_dir: &Path, analysis_path: &Path, out: &Path) -> Result<()> {
    let analysis = AnalysisFile::load(analysis_path)?;
    let by_index: std::collections::HashMap<usize, &obstacle_core::analysis::AnalysisFrame> =
        analysis.frames.iter().map(|f| (f.frame_index, f)).collect();

    let listing = std::fs::read_dir(frames_dir).map_err(|e| Error::io(frames_dir, e))?;
    let mut lefts: Vec<(usize, PathBuf)> = Vec::new();
    for item in listing {
        let item = item.map_err(|e| Error::io(frames_dir, e))?;
        let name = item.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(index) = frame_index_of(name, "_left.png") {
            lefts.push((index, item.path()));
        }
    }
    lefts.sort_by_key(|(i, _)| *i);
    if lefts.is_empty() {
        return Err(Error::Input(format!(
            "no frames matching NNNNNN_left.png found in {}",
            frames_dir.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    for (index, left_path) in lefts {
        let base = load_image(&left_path)?;
        let mut canvas = Canvas::from_luminance(&base);
        match by_index.get(&index) {
            Some(frame) => {
                for object in &frame.objects {
                    overlay_object(&mut canvas, object)?;
                }
            }
            None => log::warn!("frame {index:06} has no analysis entry; emitting bare frame"),
        }
        canvas.save_png(out.join(format!("{index:06}_overlay.png")))?;
    }
    Ok(())
}

pub fn synth(script_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let script = SceneScript::load(script_path)?;
    let outputs = render_scene(&script, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for pair in &outputs.frames {
        save_image(
            &pair.left,
            out.join(format!("{:06}_left.png", pair.frame_index)),
        )?;
        save_image(
            &pair.right,
            out.join(format!("{:06}_right.png", pair.frame_index)),
        )?;
    }
    let det_path = out.join("detections.json");
    std::fs::write(&det_path, outputs.detections.to_json()?)
        .map_err(|e| Error::io(&det_path, e))?;
    let gt_path = out.join("groundtruth.json");
    std::fs::write(&gt_path, outputs.truth.to_json()?).map_err(|e| Error::io(&gt_path, e))?;
    // The config the scene's truth labels assume, for the analyze step.
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, config_to_text(&outputs.config))
        .map_err(|e| Error::io(&cfg_path, e))?;
    log::info!(
        "scene with {} frames and {} actors written to {}",
        outputs.frames.len(),
        script.actors.len(),
        out.display()
    );
    Ok(())
}
