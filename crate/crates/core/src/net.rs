//! The FSTCN network: shared lower spatial convolutional layers, the
//! transform-and-permute (T-P) operator, the dual-kernel temporal
//! convolutional layer, a parallel spatial path, fully-connected merge and
//! classifier layers, an optional auxiliary head, checkpointing, and
//! saliency extraction.

use std::collections::HashMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::ClipPair;
use crate::error::{FstcnError, Result};
use crate::tape::{Gradients, Tape, VarId};
use crate::tensor::{LrnParams, Padding, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSTCNCK1";

/// One layer of a spatial convolutional stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `Conv(c_f, c_k, c_s)`: `maps` feature maps, `kernel x kernel`
    /// weights, applied with `stride`.
    Conv { maps: usize, kernel: usize, stride: usize, pad: Padding },
    Relu,
    Lrn(LrnParams),
    MaxPool { window: usize, stride: usize },
    Dropout { prob: f64 },
}

/// One parallel branch of the temporal convolutional layer. Kernels slide
/// over the temporal and feature-channel axes with zero same-padding so both
/// branches emit equal extents for concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalConvSpec {
    pub maps: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_x: usize,
    pub input_y: usize,
    pub input_channels: usize,
    /// Frames per clip entering the network (`l_t`).
    pub clip_len: usize,
    /// Shared lower SCL stack applied to every frame of both streams.
    pub lower_scl: Vec<LayerSpec>,
    /// SCL connecting the lower stack to the T-P operator; brings the
    /// channel count to `perm_rows`.
    pub pre_tcl_scl: Vec<LayerSpec>,
    /// Intermediate SCL on the appearance path, parallel to the TCL.
    pub parallel_scl: Vec<LayerSpec>,
    /// Exactly two parallel temporal conv branches.
    pub tcl_branches: Vec<TemporalConvSpec>,
    /// Permutation matrix dimensions `f` and `f'`.
    pub perm_rows: usize,
    pub perm_cols: usize,
    /// First and second per-path FC widths and the post-concat FC width.
    pub fc_path1: usize,
    pub fc_path2: usize,
    pub fc_merge: usize,
    pub num_classes: usize,
    pub aux_classifier: bool,
    pub dropout_prob: f64,
    /// Standard deviation of the Gaussian weight initialization. Zero means
    /// fan-in scaled (He) initialization instead.
    pub init_std: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::desk(4)
    }
}

impl NetworkConfig {
    /// The full-size configuration: 204x204 inputs, the four-layer SCL
    /// stack, 128x128 permutation matrix, 32-map TCL branches of extents 3
    /// and 5, and 4096/2048/2048 FC widths.
    pub fn paper(num_classes: usize) -> Self {
        let lrn = LrnParams::default();
        NetworkConfig {
            input_x: 204,
            input_y: 204,
            input_channels: 3,
            clip_len: 5,
            lower_scl: vec![
                LayerSpec::Conv { maps: 96, kernel: 7, stride: 2, pad: Padding::Same },
                LayerSpec::Relu,
                LayerSpec::Lrn(lrn),
                LayerSpec::MaxPool { window: 3, stride: 2 },
                LayerSpec::Conv { maps: 256, kernel: 5, stride: 2, pad: Padding::Same },
                LayerSpec::Relu,
                LayerSpec::Lrn(lrn),
                LayerSpec::MaxPool { window: 3, stride: 2 },
                LayerSpec::Conv { maps: 512, kernel: 3, stride: 1, pad: Padding::Same },
                LayerSpec::Relu,
                LayerSpec::Conv { maps: 512, kernel: 3, stride: 1, pad: Padding::Same },
                LayerSpec::Relu,
            ],
            pre_tcl_scl: vec![
                LayerSpec::Conv { maps: 128, kernel: 3, stride: 1, pad: Padding::Same },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 3, stride: 3 },
            ],
            parallel_scl: vec![
                LayerSpec::Conv { maps: 128, kernel: 3, stride: 1, pad: Padding::Same },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 3, stride: 3 },
            ],
            tcl_branches: vec![
                TemporalConvSpec { maps: 32, kernel: 3, stride: 1 },
                TemporalConvSpec { maps: 32, kernel: 5, stride: 1 },
            ],
            perm_rows: 128,
            perm_cols: 128,
            fc_path1: 4096,
            fc_path2: 2048,
            fc_merge: 2048,
            num_classes,
            aux_classifier: true,
            dropout_prob: 0.5,
            init_std: 0.01,
        }
    }

    /// Desk-scale configuration: 32x32 inputs, channel widths an eighth of
    /// the full network, 256/128 FC widths. Trainable on a single machine.
    pub fn desk(num_classes: usize) -> Self {
        let lrn = LrnParams::default();
        NetworkConfig {
            input_x: 32,
            input_y: 32,
            input_channels: 1,
            clip_len: 5,
            lower_scl: vec![
                LayerSpec::Conv { maps: 12, kernel: 5, stride: 1, pad: Padding::Same },
                LayerSpec::Relu,
                LayerSpec::Lrn(lrn),
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Conv { maps: 32, kernel: 3, stride: 1, pad: Padding::Same },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Conv { maps: 64, kernel: 3, stride: 1, pad: Padding::Same },
                LayerSpec::Relu,
            ],
            pre_tcl_scl: vec![
                LayerSpec::Conv { maps: 16, kernel: 3, stride: 1, pad: Padding::Same },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
            ],
            parallel_scl: vec![
                LayerSpec::Conv { maps: 16, kernel: 3, stride: 1, pad: Padding::Same },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
            ],
            tcl_branches: vec![
                TemporalConvSpec { maps: 4, kernel: 3, stride: 1 },
                TemporalConvSpec { maps: 4, kernel: 5, stride: 1 },
            ],
            perm_rows: 16,
            perm_cols: 16,
            fc_path1: 256,
            fc_path2: 128,
            fc_merge: 128,
            num_classes,
            aux_classifier: false,
            dropout_prob: 0.5,
            init_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tcl_branches.len() != 2 {
            return Err(FstcnError::Config(format!(
                "exactly two TCL branches required, got {}",
                self.tcl_branches.len()
            )));
        }
        if self.num_classes < 1 {
            return Err(FstcnError::Config("num_classes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(FstcnError::Config(format!("dropout_prob {} outside [0,1)", self.dropout_prob)));
        }
        Ok(())
    }
}

/// Shape bookkeeping while walking an SCL stack.
fn walk_scl(
    mut dims: (usize, usize, usize),
    layers: &[LayerSpec],
    prefix: &str,
    shapes: &mut Vec<(String, Vec<usize>)>,
) -> Result<(usize, usize, usize)> {
    for (li, layer) in layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv { maps, kernel, stride, pad } => {
                let (h, w, c) = dims;
                shapes.push((format!("{prefix}.{li}.weight"), vec![kernel, kernel, c, maps]));
                shapes.push((format!("{prefix}.{li}.bias"), vec![maps]));
                let (pb, pa) = pad.resolve(kernel);
                let oh = conv_extent(h, kernel, stride, pb + pa)?;
                let ow = conv_extent(w, kernel, stride, pb + pa)?;
                dims = (oh, ow, maps);
            }
            LayerSpec::MaxPool { window, stride } => {
                let (h, w, c) = dims;
                if window > h || window > w {
                    return Err(FstcnError::Config(format!(
                        "{prefix}.{li}: pool window {window} larger than input {h}x{w}"
                    )));
                }
                dims = ((h - window) / stride + 1, (w - window) / stride + 1, c);
            }
            LayerSpec::Relu | LayerSpec::Lrn(_) | LayerSpec::Dropout { .. } => {}
        }
    }
    Ok(dims)
}

fn conv_extent(extent: usize, kernel: usize, stride: usize, pad_total: usize) -> Result<usize> {
    let padded = extent + pad_total;
    if kernel > padded {
        return Err(FstcnError::Config(format!("kernel {kernel} exceeds padded extent {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Every parameter the configuration implies, in construction order, without
/// allocating any data. This is the audit surface for the layer spec.
pub fn parameter_shapes(cfg: &NetworkConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let mut shapes = Vec::new();
    let input = (cfg.input_x, cfg.input_y, cfg.input_channels);
    let lower = walk_scl(input, &cfg.lower_scl, "lower", &mut shapes)?;

    // TCL path
    let pre = walk_scl(lower, &cfg.pre_tcl_scl, "pre_tcl", &mut shapes)?;
    if pre.2 != cfg.perm_rows {
        return Err(FstcnError::Config(format!(
            "channel count {} entering the T-P operator does not match perm_rows {}",
            pre.2, cfg.perm_rows
        )));
    }
    let xy = pre.0 * pre.1;
    shapes.push(("tp.P".into(), vec![cfg.perm_rows, cfg.perm_cols]));
    let (t, f) = (cfg.clip_len, cfg.perm_cols);
    let mut tcl_out = 0usize;
    let mut tcl_dims = (0usize, 0usize);
    for (bi, b) in cfg.tcl_branches.iter().enumerate() {
        shapes.push((format!("tcl.{bi}.weight"), vec![b.kernel, b.kernel, xy, b.maps]));
        shapes.push((format!("tcl.{bi}.bias"), vec![b.maps]));
        let (pb, pa) = Padding::Same.resolve(b.kernel);
        let ot = conv_extent(t, b.kernel, b.stride, pb + pa)?;
        let of = conv_extent(f, b.kernel, b.stride, pb + pa)?;
        if bi == 0 {
            tcl_dims = (ot, of);
        } else if tcl_dims != (ot, of) {
            return Err(FstcnError::Config("TCL branches disagree on output extents".into()));
        }
        tcl_out += b.maps;
    }
    let tcl_flat = tcl_dims.0 * tcl_dims.1 * tcl_out;
    shapes.push(("tcl.fc1.weight".into(), vec![cfg.fc_path1, tcl_flat]));
    shapes.push(("tcl.fc1.bias".into(), vec![cfg.fc_path1]));
    shapes.push(("tcl.fc2.weight".into(), vec![cfg.fc_path2, cfg.fc_path1]));
    shapes.push(("tcl.fc2.bias".into(), vec![cfg.fc_path2]));

    // parallel SCL path
    let par = walk_scl(lower, &cfg.parallel_scl, "parallel", &mut shapes)?;
    let par_flat = par.0 * par.1 * par.2;
    shapes.push(("scl.fc1.weight".into(), vec![cfg.fc_path1, par_flat]));
    shapes.push(("scl.fc1.bias".into(), vec![cfg.fc_path1]));
    shapes.push(("scl.fc2.weight".into(), vec![cfg.fc_path2, cfg.fc_path1]));
    shapes.push(("scl.fc2.bias".into(), vec![cfg.fc_path2]));

    shapes.push(("merge.fc.weight".into(), vec![cfg.fc_merge, 2 * cfg.fc_path2]));
    shapes.push(("merge.fc.bias".into(), vec![cfg.fc_merge]));
    shapes.push(("classifier.weight".into(), vec![cfg.num_classes, cfg.fc_merge]));
    shapes.push(("classifier.bias".into(), vec![cfg.num_classes]));

    if cfg.aux_classifier {
        shapes.push(("aux.fc.weight".into(), vec![cfg.num_classes, lower.2]));
        shapes.push(("aux.fc.bias".into(), vec![cfg.num_classes]));
    }
    Ok(shapes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Which signal paths feed the classifier; missing paths contribute zeros,
/// which ablates them without changing FC geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathMode {
    Combined,
    SclOnly,
    TclOnly,
}

/// The network: a configuration plus named parameter tensors.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// Variable ids of one taped forward pass.
pub struct ForwardVars {
    pub logits: VarId,
    pub scores: VarId,
    pub aux_logits: Option<VarId>,
    /// Parameter leaves, in the network's parameter order.
    pub param_ids: Vec<(String, VarId)>,
    /// Leaves of the diff-clip frames followed by the selected clip frame.
    pub input_ids: Vec<VarId>,
}

impl Network {
    /// Allocate parameters. Weights are Gaussian (std `init_std`, or fan-in
    /// scaled when `init_std == 0`), biases zero, and P Gaussian like any
    /// other weight.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let shapes = parameter_shapes(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let std = if config.init_std > 0.0 {
                    config.init_std
                } else {
                    // fan-in: all axes except the output-map axis
                    let fan_in: usize = match shape.len() {
                        4 => shape[0] * shape[1] * shape[2],
                        2 => shape[1],
                        _ => shape.iter().product(),
                    };
                    (2.0 / fan_in as f64).sqrt()
                };
                Tensor::randn(&shape, std, &mut rng)
            };
            params.push((name, tensor));
        }
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(Network { config, params, index })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    fn leaf_params(&self, tape: &mut Tape) -> Vec<(String, VarId)> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect()
    }

    /// Run a forward pass on the given tape. Train-mode stochasticity (frame
    /// selection and dropout masks) is fully determined by `seed`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pair: &ClipPair,
        mode: Mode,
        path: PathMode,
        seed: u64,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let cs = pair.clip.shape();
        if cs != [cfg.input_x, cfg.input_y, cfg.clip_len, cfg.input_channels] {
            return Err(FstcnError::shape(
                "forward clip",
                format!("[{}, {}, {}, {}]", cfg.input_x, cfg.input_y, cfg.clip_len, cfg.input_channels),
                format!("{cs:?}"),
            ));
        }
        if pair.diff_clip.shape() != cs {
            return Err(FstcnError::shape("forward diff clip", format!("{cs:?}"), format!("{:?}", pair.diff_clip.shape())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let param_ids = self.leaf_params(tape);
        let lookup: HashMap<&str, VarId> = param_ids.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let mut input_ids = Vec::new();

        // selected appearance frame: random when training, middle otherwise
        let sel = match mode {
            Mode::Train => rng.gen_range(0..cfg.clip_len),
            Mode::Infer => cfg.clip_len / 2,
        };

        // lower SCL over all diff frames
        let mut diff_feats = Vec::with_capacity(cfg.clip_len);
        for t in 0..cfg.clip_len {
            let frame = extract_frame(&pair.diff_clip, t);
            let id = tape.leaf(frame);
            input_ids.push(id);
            diff_feats.push(self.run_scl(tape, id, &cfg.lower_scl, "lower", &lookup, mode, &mut rng)?);
        }
        // lower SCL over the selected clip frame (shared weights)
        let clip_frame = extract_frame(&pair.clip, sel);
        let clip_in = tape.leaf(clip_frame);
        input_ids.push(clip_in);
        let clip_lower = self.run_scl(tape, clip_in, &cfg.lower_scl, "lower", &lookup, mode, &mut rng)?;

        // TCL path
        let tcl_feat = if path == PathMode::SclOnly {
            None
        } else {
            let mut pre = Vec::with_capacity(cfg.clip_len);
            for &f in &diff_feats {
                pre.push(self.run_scl(tape, f, &cfg.pre_tcl_scl, "pre_tcl", &lookup, mode, &mut rng)?);
            }
            let stacked = tape.stack(&pre, 2)?; // [h, w, t, f]
            let vectorized = tp_operator(tape, stacked, lookup["tp.P"])?;
            let tcl = self.forward_tcl(tape, vectorized, &lookup, mode, &mut rng)?;
            let flat_len = tape.value(tcl).len();
            let flat = tape.reshape(tcl, &[flat_len])?;
            let h1 = self.fc(tape, &lookup, "tcl.fc1", flat)?;
            let h1 = tape.relu(h1);
            let h2 = self.fc(tape, &lookup, "tcl.fc2", h1)?;
            Some(tape.relu(h2))
        };

        // parallel SCL path
        let scl_feat = if path == PathMode::TclOnly {
            None
        } else {
            let feats = self.run_scl(tape, clip_lower, &cfg.parallel_scl, "parallel", &lookup, mode, &mut rng)?;
            let flat_len = tape.value(feats).len();
            let flat = tape.reshape(feats, &[flat_len])?;
            let h1 = self.fc(tape, &lookup, "scl.fc1", flat)?;
            let h1 = tape.relu(h1);
            let h2 = self.fc(tape, &lookup, "scl.fc2", h1)?;
            Some(tape.relu(h2))
        };

        let zero = |tape: &mut Tape| tape.leaf(Tensor::zeros(&[cfg.fc_path2]));
        let tcl_vec = tcl_feat.unwrap_or_else(|| zero(tape));
        let scl_vec = scl_feat.unwrap_or_else(|| zero(tape));
        let joint = tape.concat(&[tcl_vec, scl_vec], 0)?;
        let merged = self.fc(tape, &lookup, "merge.fc", joint)?;
        let merged = tape.relu(merged);
        let logits = self.fc_named(tape, &lookup, "classifier.weight", "classifier.bias", merged)?;
        let scores = tape.softmax(logits)?;

        let aux_logits = if cfg.aux_classifier {
            let pooled = tape.mean_spatial(clip_lower)?;
            Some(self.fc_named(tape, &lookup, "aux.fc.weight", "aux.fc.bias", pooled)?)
        } else {
            None
        };

        Ok(ForwardVars { logits, scores, aux_logits, param_ids, input_ids })
    }

    /// Deterministic inference on a fresh tape; returns class probabilities.
    pub fn infer(&self, pair: &ClipPair, path: PathMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.forward_on_tape(&mut tape, pair, Mode::Infer, path, 0)?;
        Ok(tape.value(vars.scores).clone())
    }

    fn run_scl(
        &self,
        tape: &mut Tape,
        mut x: VarId,
        layers: &[LayerSpec],
        prefix: &str,
        lookup: &HashMap<&str, VarId>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<VarId> {
        for (li, layer) in layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let w = lookup[format!("{prefix}.{li}.weight").as_str()];
                    let b = lookup[format!("{prefix}.{li}.bias").as_str()];
                    let c = tape.conv(x, w, stride, pad)?;
                    tape.add_channel_bias(c, b)?
                }
                LayerSpec::Relu => tape.relu(x),
                LayerSpec::Lrn(p) => tape.lrn(x, p)?,
                LayerSpec::MaxPool { window, stride } => tape.maxpool(x, window, stride)?,
                LayerSpec::Dropout { prob } => match mode {
                    Mode::Train => tape.dropout(x, prob, rng)?,
                    Mode::Infer => x,
                },
            };
        }
        Ok(x)
    }

    /// Dual-kernel TCL: each branch convolves over `(t, f')` with the
    /// vectorized spatial positions as input channels, then ReLU and
    /// dropout; outputs concatenate along the map axis. No pooling follows.
    fn forward_tcl(
        &self,
        tape: &mut Tape,
        vectorized: VarId, // [xy, t, f']
        lookup: &HashMap<&str, VarId>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<VarId> {
        let as_image = tape.permute(vectorized, &[1, 2, 0])?; // [t, f', xy]
        let mut branches = Vec::new();
        for (bi, spec) in self.config.tcl_branches.iter().enumerate() {
            let w = lookup[format!("tcl.{bi}.weight").as_str()];
            let b = lookup[format!("tcl.{bi}.bias").as_str()];
            let c = tape.conv(as_image, w, spec.stride, Padding::Same)?;
            let c = tape.add_channel_bias(c, b)?;
            let r = tape.relu(c);
            let d = match mode {
                Mode::Train => tape.dropout(r, self.config.dropout_prob, rng)?,
                Mode::Infer => r,
            };
            branches.push(d);
        }
        tape.concat(&branches, 2)
    }

    fn fc(&self, tape: &mut Tape, lookup: &HashMap<&str, VarId>, prefix: &str, x: VarId) -> Result<VarId> {
        self.fc_named(tape, lookup, &format!("{prefix}.weight"), &format!("{prefix}.bias"), x)
    }

    fn fc_named(
        &self,
        tape: &mut Tape,
        lookup: &HashMap<&str, VarId>,
        weight: &str,
        bias: &str,
        x: VarId,
    ) -> Result<VarId> {
        let y = tape.matvec(lookup[weight], x)?;
        let b = lookup[bias];
        tape.add(y, b)
    }

    /// Gradient-based saliency: back-propagate the pre-softmax score of
    /// `class_index` to the input pixels and reduce |gradient| by max over
    /// channels, frames, and both streams. Output shape `[l_x, l_y]`.
    pub fn saliency(&self, pair: &ClipPair, class_index: usize) -> Result<Tensor> {
        if class_index >= self.config.num_classes {
            return Err(FstcnError::Bounds(format!(
                "class index {class_index} >= {}",
                self.config.num_classes
            )));
        }
        let mut tape = Tape::new();
        let vars = self.forward_on_tape(&mut tape, pair, Mode::Infer, PathMode::Combined, 0)?;
        let score = tape.pick(vars.logits, class_index)?;
        let grads = tape.backward(score)?;
        let mut out = Tensor::zeros(&[self.config.input_x, self.config.input_y]);
        for &id in &vars.input_ids {
            if let Some(g) = grads.get(id) {
                saliency_reduce(&mut out, g);
            }
        }
        Ok(out)
    }

    /// Named gradients for all parameters after a backward pass.
    pub fn collect_param_grads(vars: &ForwardVars, grads: &Gradients) -> Vec<(String, Option<Tensor>)> {
        vars.param_ids
            .iter()
            .map(|(name, id)| (name.clone(), grads.get(*id).cloned()))
            .collect()
    }

    // ------------------------------------------------------------------
    // checkpointing
    // ------------------------------------------------------------------

    /// Binary checkpoint: magic, version, JSON config, then ordered
    /// parameter blobs (name, shape, little-endian f64). Bit-exact on
    /// round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| FstcnError::Format(format!("config serialization: {e}")))?;
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(&cfg);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, tensor) in &self.params {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC.as_slice() {
            return Err(FstcnError::Format(format!("{}: bad checkpoint magic", path.display())));
        }
        let cfg_len = cur.u64()? as usize;
        let config: NetworkConfig = serde_json::from_slice(cur.take(cfg_len)?)
            .map_err(|e| FstcnError::Format(format!("checkpoint config: {e}")))?;
        let n_params = cur.u64()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = cur.u64()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| FstcnError::Format("non-utf8 parameter name".into()))?;
            let rank = cur.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            params.push((name, Tensor::new(shape, data)?));
        }
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(Network { config, params, index })
    }
}

/// Bounds-checked reader over a byte buffer, for checkpoint parsing.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FstcnError::Format("truncated checkpoint".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// The T-P operator: vectorize each `x  x  y` map of `[x, y, t, f]` into a
/// length `x*y` position axis (a pure reshape in row-major layout), then mix
/// feature channels through the learned matrix `P`:
/// `out[.., j'] = sum_j in[.., j] * P[j, j']`. Output `[xy, t, f']`.
pub fn tp_operator(tape: &mut Tape, features: VarId, p: VarId) -> Result<VarId> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 {
        return Err(FstcnError::shape("tp_operator", "[x, y, t, f]", format!("{s:?}")));
    }
    let ps = tape.shape(p).to_vec();
    if ps.len() != 2 || ps[0] != s[3] {
        return Err(FstcnError::shape(
            "tp_operator P",
            format!("[{}, f']", s[3]),
            format!("{ps:?}"),
        ));
    }
    let vectorized = tape.reshape(features, &[s[0] * s[1], s[2], s[3]])?;
    tape.mix_last(vectorized, p)
}

fn extract_frame(clip: &Tensor, t: usize) -> Tensor {
    let s = clip.shape();
    let (lx, ly, c) = (s[0], s[1], s[3]);
    Tensor::from_fn(&[lx, ly, c], |i| clip.at(&[i[0], i[1], t, i[2]]))
}

fn saliency_reduce(out: &mut Tensor, grad: &Tensor) {
    let s = grad.shape();
    let (lx, ly, c) = (s[0], s[1], s[2]);
    for x in 0..lx {
        for y in 0..ly {
            let mut m = out.at(&[x, y]);
            for ch in 0..c {
                m = m.max(grad.at(&[x, y, ch]).abs());
            }
            out.set(&[x, y], m);
        }
    }
}
