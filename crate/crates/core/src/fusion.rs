//! Score fusion across crops and clips.
//!
//! Per-crop class scores are combined with weights given by the sparsity
//! concentration index (SCI), so confident crops dominate; per-clip fused
//! scores are then combined by entrywise maximum over the clips of a
//! sequence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{sample_clip_pair, ClipSpec, VideoSequence};
use crate::error::{FstcnError, Result};
use crate::net::{Network, PathMode};
use crate::tensor::Tensor;
use crate::trainer::even_starts;

/// Sparsity concentration index of a non-negative score vector:
/// `SCI(p) = (N * max_j p_j / sum_j p_j - 1) / (N - 1)`.
///
/// 0 for the uniform vector, 1 for a one-hot vector, and invariant to
/// positive rescaling of `p`.
pub fn sci(p: &Tensor) -> Result<f64> {
    if p.rank() != 1 || p.len() < 2 {
        return Err(FstcnError::shape("sci", "[n >= 2]", format!("{:?}", p.shape())));
    }
    if p.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(FstcnError::Invalid("sci requires finite non-negative scores".into()));
    }
    let total = p.sum();
    if total <= 0.0 {
        return Err(FstcnError::Invalid("sci requires a positive score sum".into()));
    }
    let n = p.len() as f64;
    let max = p.data().iter().cloned().fold(0.0f64, f64::max);
    Ok((n * max / total - 1.0) / (n - 1.0))
}

fn check_uniform(scores: &[Tensor], what: &str) -> Result<usize> {
    if scores.is_empty() {
        return Err(FstcnError::Invalid(format!("{what} of zero score vectors")));
    }
    let n = scores[0].len();
    for s in scores {
        if s.rank() != 1 || s.len() != n {
            return Err(FstcnError::shape(what, format!("[{n}]"), format!("{:?}", s.shape())));
        }
    }
    Ok(n)
}

/// SCI-weighted fusion over crops: `s = sum_i SCI(p_i) p_i / sum_i SCI(p_i)`.
/// Falls back to the plain average when every weight is zero (all crops
/// uniform), where the weighted form is undefined.
pub fn fuse_crops(scores: &[Tensor]) -> Result<Tensor> {
    let n = check_uniform(scores, "fuse_crops")?;
    let weights: Vec<f64> = scores.iter().map(sci).collect::<Result<_>>()?;
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return fuse_average(scores);
    }
    let mut out = Tensor::zeros(&[n]);
    for (w, s) in weights.iter().zip(scores) {
        out = out.add(&s.scale(w / total))?;
    }
    Ok(out)
}

/// Entrywise maximum over clip scores.
pub fn fuse_clips(scores: &[Tensor]) -> Result<Tensor> {
    let n = check_uniform(scores, "fuse_clips")?;
    let mut out = Tensor::full(&[n], f64::NEG_INFINITY);
    for s in scores {
        out = out.zip_map(s, f64::max)?;
    }
    Ok(out)
}

/// Plain mean of score vectors (the baseline fusion).
pub fn fuse_average(scores: &[Tensor]) -> Result<Tensor> {
    let n = check_uniform(scores, "fuse_average")?;
    let mut out = Tensor::zeros(&[n]);
    for s in scores {
        out = out.add(s)?;
    }
    Ok(out.scale(1.0 / scores.len() as f64))
}

/// One spatial test-time augmentation: a crop origin plus optional mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropVariant {
    pub crop: (usize, usize),
    pub flip: bool,
}

/// The 3x3 grid of crop origins (corners, edge midpoints, centre), each with
/// and without mirroring: up to 18 variants, fewer when origins coincide.
pub fn crop_variants(mx: usize, my: usize, l_x: usize, l_y: usize) -> Result<Vec<CropVariant>> {
    if l_x > mx || l_y > my {
        return Err(FstcnError::Invalid(format!(
            "crop {l_x}x{l_y} exceeds frame {mx}x{my}"
        )));
    }
    let axis = |m: usize, l: usize| -> Vec<usize> {
        let mut v = vec![0, (m - l) / 2, m - l];
        v.dedup();
        v
    };
    let xs = axis(mx, l_x);
    let ys = axis(my, l_y);
    let mut variants = Vec::new();
    for &cx in &xs {
        for &cy in &ys {
            for flip in [false, true] {
                variants.push(CropVariant { crop: (cx, cy), flip });
            }
        }
    }
    Ok(variants)
}

/// How crop scores are combined within a clip and clips within a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    /// SCI-weighted crops, entrywise max over clips.
    SciMax,
    /// Plain averaging of everything.
    Average,
}

/// Raw scores of one forward pass, for score dumps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub start: usize,
    pub crop_x: usize,
    pub crop_y: usize,
    pub flip: bool,
    pub scores: Vec<f64>,
}

/// Full test-time inference on one sequence: `clips_per_seq` evenly spaced
/// clips, all crop variants per clip, fused per `method`. Returns the fused
/// score vector (normalized to sum 1) and every raw per-crop score.
pub fn infer_sequence(
    net: &Network,
    seq: &VideoSequence,
    spec: &ClipSpec,
    path: PathMode,
    method: FusionMethod,
) -> Result<(Tensor, Vec<ScoreRecord>)> {
    let (mx, my, mt, _) = seq.extents();
    let variants = crop_variants(mx, my, spec.l_x, spec.l_y)?;
    let starts = even_starts(spec.max_start(mt)?, spec.clips_per_seq);

    let jobs: Vec<(usize, CropVariant)> = starts
        .iter()
        .flat_map(|&s| variants.iter().map(move |&v| (s, v)))
        .collect();
    let scored: Vec<Result<ScoreRecord>> = jobs
        .par_iter()
        .map(|&(start, v)| {
            let pair = sample_clip_pair(seq, spec, start, v.crop, v.flip)?;
            let scores = net.infer(&pair, path)?;
            Ok(ScoreRecord {
                start,
                crop_x: v.crop.0,
                crop_y: v.crop.1,
                flip: v.flip,
                scores: scores.data().to_vec(),
            })
        })
        .collect();
    let records: Vec<ScoreRecord> = scored.into_iter().collect::<Result<_>>()?;

    let per_clip: Vec<Tensor> = starts
        .iter()
        .map(|&start| {
            let crop_scores: Vec<Tensor> = records
                .iter()
                .filter(|r| r.start == start)
                .map(|r| Tensor::new(vec![r.scores.len()], r.scores.clone()))
                .collect::<Result<_>>()?;
            match method {
                FusionMethod::SciMax => fuse_crops(&crop_scores),
                FusionMethod::Average => fuse_average(&crop_scores),
            }
        })
        .collect::<Result<_>>()?;
    let fused = match method {
        FusionMethod::SciMax => fuse_clips(&per_clip)?,
        FusionMethod::Average => fuse_average(&per_clip)?,
    };
    let total = fused.sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(FstcnError::NonFinite("fused sequence scores".into()));
    }
    Ok((fused.scale(1.0 / total), records))
}

/// Accuracy of [`infer_sequence`] over a labelled set.
pub fn evaluate_fused(
    net: &Network,
    test_set: &[VideoSequence],
    spec: &ClipSpec,
    path: PathMode,
    method: FusionMethod,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(FstcnError::Invalid("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for seq in test_set {
        let label = seq
            .label
            .ok_or_else(|| FstcnError::Invalid("evaluation sequence without a label".into()))?;
        let (scores, _) = infer_sequence(net, seq, spec, path, method)?;
        if scores.argmax() == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sci_uniform_is_zero_and_onehot_is_one() {
        assert_eq!(sci(&t(&[0.25, 0.25, 0.25, 0.25])).unwrap(), 0.0);
        assert_eq!(sci(&t(&[0.0, 1.0, 0.0])).unwrap(), 1.0);
        // hand-evaluated: N=2, max=0.75 -> (2*0.75 - 1)/1 = 0.5
        assert!((sci(&t(&[0.75, 0.25])).unwrap() - 0.5).abs() < 1e-15);
        // N=4, max=0.4, sum=1 -> (1.6-1)/3 = 0.2
        assert!((sci(&t(&[0.4, 0.3, 0.2, 0.1])).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sci_rejects_bad_inputs() {
        assert!(sci(&t(&[1.0])).is_err());
        assert!(sci(&t(&[0.5, -0.1])).is_err());
        assert!(sci(&t(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn fuse_crops_weights_by_confidence() {
        // confident crop [0.9, 0.1] (SCI 0.8), uniform crop (SCI 0): the
        // uniform one contributes nothing, so the output is the confident one
        let fused = fuse_crops(&[t(&[0.9, 0.1]), t(&[0.5, 0.5])]).unwrap();
        assert!((fused.data()[0] - 0.9).abs() < 1e-12);
        assert!((fused.data()[1] - 0.1).abs() < 1e-12);

        // two crops, SCI 0.8 and 0.2: weights 0.8/1.0 and 0.2/1.0
        let a = t(&[0.9, 0.1]);
        let b = t(&[0.6, 0.4]); // SCI = (2*0.6-1)/1 = 0.2
        let fused = fuse_crops(&[a.clone(), b.clone()]).unwrap();
        let expected = a.scale(0.8).add(&b.scale(0.2)).unwrap();
        assert!(fused.sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn fuse_crops_all_uniform_falls_back_to_average() {
        let fused = fuse_crops(&[t(&[0.5, 0.5]), t(&[0.5, 0.5])]).unwrap();
        assert_eq!(fused.data(), &[0.5, 0.5]);
    }

    #[test]
    fn fuse_clips_is_entrywise_max() {
        let fused = fuse_clips(&[t(&[0.1, 0.7, 0.2]), t(&[0.5, 0.3, 0.2])]).unwrap();
        assert_eq!(fused.data(), &[0.5, 0.7, 0.2]);
    }

    #[test]
    fn fusion_rejects_mismatched_lengths() {
        assert!(fuse_crops(&[t(&[0.5, 0.5]), t(&[0.3, 0.3, 0.4])]).is_err());
        assert!(fuse_clips(&[]).is_err());
    }

    #[test]
    fn crop_variant_grid() {
        let v = crop_variants(40, 40, 32, 32).unwrap();
        assert_eq!(v.len(), 18); // 3x3 origins x flip
        let origins: std::collections::BTreeSet<_> = v.iter().map(|c| c.crop).collect();
        assert_eq!(origins.len(), 9);
        assert!(origins.contains(&(0, 0)));
        assert!(origins.contains(&(4, 4)));
        assert!(origins.contains(&(8, 8)));
        // degenerate frame: single origin, flip only
        let v = crop_variants(32, 32, 32, 32).unwrap();
        assert_eq!(v.len(), 2);
        assert!(crop_variants(10, 10, 12, 12).is_err());
    }

    proptest! {
        // SCI lies in [0, 1] and is scale invariant
        #[test]
        fn sci_range_and_scale_invariance(
            raw in proptest::collection::vec(0.0f64..1.0, 2..8),
            scale in 0.1f64..10.0,
        ) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let p = t(&raw);
            let s = sci(&p).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            let s2 = sci(&p.scale(scale)).unwrap();
            prop_assert!((s - s2).abs() < 1e-9);
        }

        // crop fusion of identical vectors is the vector itself
        #[test]
        fn fusing_identical_crops_is_identity(
            raw in proptest::collection::vec(0.01f64..1.0, 2..6),
            copies in 1usize..5,
        ) {
            let p = t(&raw);
            let fused = fuse_crops(&vec![p.clone(); copies]).unwrap();
            prop_assert!(fused.sub(&p).unwrap().max_abs() < 1e-9);
            let fused = fuse_clips(&vec![p.clone(); copies]).unwrap();
            prop_assert!(fused.sub(&p).unwrap().max_abs() < 1e-12);
        }
    }
}
