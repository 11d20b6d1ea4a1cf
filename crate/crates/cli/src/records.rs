//! Raw score records and the offline fusion arithmetic over them. The eval
//! command produces records and fuses them in-process; the fuse command
//! re-fuses a dumped file — both go through [`fusion_report`], so the
//! numbers agree exactly.

use std::collections::BTreeMap;

use fstcn::fusion::{fuse_average, fuse_clips, fuse_crops};
use fstcn::Tensor;
use serde::{Deserialize, Serialize};

/// Scores of one forward pass: one record per (path, sequence, clip start,
/// crop variant).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpRecord {
    pub path: String,
    pub seq: usize,
    pub label: usize,
    pub start: usize,
    pub crop_x: usize,
    pub crop_y: usize,
    pub flip: bool,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Accuracy {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathReport {
    pub path: String,
    pub sci: Accuracy,
    pub average: Accuracy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionReport {
    pub paths: Vec<PathReport>,
}

/// Fuse records per sequence under both schemes (SCI-weighted crops with
/// max over clips, and plain averaging) and score them against the labels.
pub fn fusion_report(records: &[DumpRecord]) -> Result<FusionReport, String> {
    if records.is_empty() {
        return Err("no score records".into());
    }
    let n_classes = records[0].scores.len();
    if n_classes < 2 {
        return Err("score vectors must have at least 2 classes".into());
    }
    // stable path order: first appearance
    let mut path_order: Vec<&str> = Vec::new();
    for r in records {
        if r.scores.len() != n_classes {
            return Err(format!("inconsistent score lengths: {} vs {n_classes}", r.scores.len()));
        }
        if !path_order.contains(&r.path.as_str()) {
            path_order.push(&r.path);
        }
    }

    let mut paths = Vec::new();
    for path in path_order {
        // (seq -> start -> crop scores), BTreeMap for deterministic order
        let mut by_seq: BTreeMap<usize, (usize, BTreeMap<usize, Vec<Tensor>>)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.path == path) {
            let entry = by_seq.entry(r.seq).or_insert_with(|| (r.label, BTreeMap::new()));
            if entry.0 != r.label {
                return Err(format!("sequence {} has conflicting labels", r.seq));
            }
            let scores = Tensor::new(vec![n_classes], r.scores.clone()).map_err(|e| e.to_string())?;
            entry.1.entry(r.start).or_default().push(scores);
        }
        let mut sci_hits = vec![(0usize, 0usize); n_classes]; // (correct, total)
        let mut avg_hits = vec![(0usize, 0usize); n_classes];
        for (_, (label, clips)) in &by_seq {
            if *label >= n_classes {
                return Err(format!("label {label} out of range for {n_classes} classes"));
            }
            let mut sci_per_clip = Vec::new();
            let mut avg_per_clip = Vec::new();
            for crop_scores in clips.values() {
                sci_per_clip.push(fuse_crops(crop_scores).map_err(|e| e.to_string())?);
                avg_per_clip.push(fuse_average(crop_scores).map_err(|e| e.to_string())?);
            }
            let sci_final = fuse_clips(&sci_per_clip).map_err(|e| e.to_string())?;
            let avg_final = fuse_average(&avg_per_clip).map_err(|e| e.to_string())?;
            sci_hits[*label].1 += 1;
            avg_hits[*label].1 += 1;
            if sci_final.argmax() == *label {
                sci_hits[*label].0 += 1;
            }
            if avg_final.argmax() == *label {
                avg_hits[*label].0 += 1;
            }
        }
        paths.push(PathReport {
            path: path.to_string(),
            sci: accuracy(&sci_hits),
            average: accuracy(&avg_hits),
        });
    }
    Ok(FusionReport { paths })
}

fn accuracy(hits: &[(usize, usize)]) -> Accuracy {
    let per_class: Vec<f64> = hits
        .iter()
        .map(|&(c, t)| if t > 0 { c as f64 / t as f64 } else { 0.0 })
        .collect();
    let correct: usize = hits.iter().map(|h| h.0).sum();
    let total: usize = hits.iter().map(|h| h.1).sum();
    let mean = if total > 0 { correct as f64 / total as f64 } else { 0.0 };
    Accuracy { per_class, mean }
}
