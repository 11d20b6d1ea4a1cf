//! Synthetic action dataset: a textured sprite moving over a cluttered
//! static background. Classes differ only in motion, and all classes share
//! the same appearance distribution, so a purely spatial classifier cannot
//! reach ceiling while the temporal path can.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{write_sequence, VideoSequence, MANIFEST_NAME};
use crate::error::{FstcnError, Result};
use crate::subseed;
use crate::tensor::Tensor;

/// One motion class: a per-frame velocity, optionally oscillating (the
/// sprite reverses direction every `period` frames).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionClass {
    pub name: String,
    pub dx: f64,
    pub dy: f64,
    #[serde(default)]
    pub oscillate: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: Vec<MotionClass>,
    pub seqs_per_class: usize,
    pub frame_x: usize,
    pub frame_y: usize,
    pub frames: usize,
    pub channels: usize,
    pub sprite_size: usize,
    pub noise: f64,
    /// Fraction of sequences per class assigned to the train split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: default_motion_classes(),
            seqs_per_class: 30,
            frame_x: 40,
            frame_y: 40,
            frames: 40,
            channels: 1,
            sprite_size: 12,
            noise: 0.02,
            train_fraction: 0.8,
            seed: 7,
        }
    }
}

/// Four classes spanning two motion axes and two speeds. Classes are
/// defined by axis and speed rather than direction so the mirror-flip
/// augmentation used at training time maps each class onto itself, and
/// every class shares an identical static appearance distribution.
pub fn default_motion_classes() -> Vec<MotionClass> {
    [
        ("vertical-slow", 2.0, 0.0),
        ("vertical-fast", 4.0, 0.0),
        ("horizontal-slow", 0.0, 2.0),
        ("horizontal-fast", 0.0, 4.0),
    ]
    .into_iter()
    .map(|(name, dx, dy)| MotionClass { name: name.into(), dx, dy, oscillate: false })
    .collect()
}

/// Generate one sequence. Appearance randomness (sprite texture, background
/// clutter, start position) is drawn from `seed` only, so two classes given
/// the same seed differ purely in motion.
pub fn generate_sequence(cfg: &SynthConfig, class: &MotionClass, seed: u64) -> Result<VideoSequence> {
    if cfg.channels != 1 {
        return Err(FstcnError::Config("only single-channel synthesis is supported".into()));
    }
    let (mx, my, mt) = (cfg.frame_x, cfg.frame_y, cfg.frames);
    let s = cfg.sprite_size;
    if s >= mx || s >= my {
        return Err(FstcnError::Config(format!("sprite size {s} does not fit {mx}x{my} frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // static cluttered background: smoothed random blobs
    let mut background = Tensor::zeros(&[mx, my]);
    for _ in 0..8 {
        let bx = rng.gen_range(0..mx) as f64;
        let by = rng.gen_range(0..my) as f64;
        let radius = rng.gen_range(2.0..6.0);
        let amp = rng.gen_range(0.1..0.35);
        for x in 0..mx {
            for y in 0..my {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                let v = background.at(&[x, y]) + amp * (-d2 / (2.0 * radius * radius)).exp();
                background.set(&[x, y], v);
            }
        }
    }

    // sprite texture, brighter than the background
    let sprite = Tensor::from_fn(&[s, s], |_| 0.6 + 0.4 * rng.gen::<f64>());

    let mut px = rng.gen_range(0.0..mx as f64);
    let mut py = rng.gen_range(0.0..my as f64);
    let mut dir = 1.0;
    let period = (mt / 2).max(1);

    let mut frames = Tensor::zeros(&[mx, my, mt, 1]);
    for t in 0..mt {
        if class.oscillate && t > 0 && t % period == 0 {
            dir = -dir;
        }
        let ox = px.rem_euclid(mx as f64) as usize;
        let oy = py.rem_euclid(my as f64) as usize;
        for x in 0..mx {
            for y in 0..my {
                let mut v = background.at(&[x, y]);
                // sprite occupies a wrapped s x s patch anchored at (ox, oy)
                let rx = (x + mx - ox) % mx;
                let ry = (y + my - oy) % my;
                if rx < s && ry < s {
                    v = sprite.at(&[rx, ry]);
                }
                v += cfg.noise * (rng.gen::<f64>() - 0.5);
                frames.set(&[x, y, t, 0], v.clamp(0.0, 1.0));
            }
        }
        px += dir * class.dx;
        py += dir * class.dy;
    }
    VideoSequence::new(frames, None)
}

/// Generate the dataset on disk in the clip-sampler format and write the
/// manifest. Byte-deterministic given the config.
pub fn generate_dataset(cfg: &SynthConfig, root: &Path) -> Result<()> {
    if cfg.classes.len() < 2 {
        return Err(FstcnError::Config("need at least 2 classes".into()));
    }
    if cfg.seqs_per_class == 0 {
        return Err(FstcnError::Config("seqs_per_class must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(FstcnError::Config("train_fraction must lie in [0, 1]".into()));
    }
    fs::create_dir_all(root)?;
    let n_train = (cfg.seqs_per_class as f64 * cfg.train_fraction).round() as usize;
    let mut manifest = String::new();
    for class in &cfg.classes {
        let dir = root.join(&class.name);
        fs::create_dir_all(&dir)?;
        for i in 0..cfg.seqs_per_class {
            // the per-sequence seed ignores the class, so appearance is
            // identical across classes for the same sequence index
            let seq_seed = subseed(cfg.seed, &format!("synth/{i}"));
            let seq = generate_sequence(cfg, class, seq_seed)?;
            let file = format!("seq_{i:04}.bin");
            write_sequence(&dir.join(&file), &seq)?;
            let split = if i < n_train { "train" } else { "test" };
            manifest.push_str(&format!("{}/{}\t{}\n", class.name, file, split));
        }
    }
    fs::write(root.join(MANIFEST_NAME), manifest)?;
    Ok(())
}
