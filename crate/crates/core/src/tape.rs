//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its output value, its parent ids, and a
//! closure mapping the upstream gradient to per-parent gradient
//! contributions. Nodes are topologically ordered by construction, so the
//! backward pass is a single reverse sweep. A tape is confined to one logical
//! thread; independent forward passes each own their tape.

use rand::Rng;

use crate::error::{FstcnError, Result};
use crate::tensor::{self, LrnParams, Padding, Tensor};

pub type VarId = usize;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    backward: Option<BackwardFn>,
}

/// Gradient tape. Created per forward pass, consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients keyed by the tape's variable ids.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, vec![], None)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: Tensor, parents: Vec<VarId>, backward: Option<BackwardFn>) -> VarId {
        self.nodes.push(Node { value, parents, backward });
        self.nodes.len() - 1
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g: &Tensor| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let value = va.mul(&vb)?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                vec![g.mul(&vb).unwrap(), g.mul(&va).unwrap()]
            })),
        ))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.value(a).scale(c);
        self.push(value, vec![a], Some(Box::new(move |g: &Tensor| vec![g.scale(c)])))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let shape = self.value(a).shape().to_vec();
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![Tensor::full(&shape, g.data()[0])])),
        )
    }

    /// Scalar entry `x[i]`; everything else receives zero gradient.
    pub fn pick(&mut self, a: VarId, i: usize) -> Result<VarId> {
        let v = self.value(a);
        if i >= v.len() {
            return Err(FstcnError::Bounds(format!("pick index {i} >= {}", v.len())));
        }
        let shape = v.shape().to_vec();
        let value = Tensor::scalar(v.data()[i]);
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut grad = Tensor::zeros(&shape);
                grad.data_mut()[i] = g.data()[0];
                vec![grad]
            })),
        ))
    }

    /// Cross-correlation, input `[h, w, c_in]` with kernels `[kh, kw, c_in, c_out]`.
    pub fn conv(&mut self, input: VarId, kernels: VarId, stride: usize, padding: Padding) -> Result<VarId> {
        let vi = self.value(input).clone();
        let vk = self.value(kernels).clone();
        let value = tensor::conv_general(&vi, &vk, stride, padding)?;
        Ok(self.push(
            value,
            vec![input, kernels],
            Some(Box::new(move |g: &Tensor| {
                let (gi, gk) = tensor::conv_general_backward(&vi, &vk, g, stride, padding).unwrap();
                vec![gi, gk]
            })),
        ))
    }

    /// Add a per-channel bias over the last axis.
    pub fn add_channel_bias(&mut self, input: VarId, bias: VarId) -> Result<VarId> {
        let vi = self.value(input);
        let vb = self.value(bias);
        let c = *vi.shape().last().unwrap();
        if vb.rank() != 1 || vb.len() != c {
            return Err(FstcnError::shape("add_channel_bias", format!("[{c}]"), format!("{:?}", vb.shape())));
        }
        let mut value = vi.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % c];
        }
        Ok(self.push(
            value,
            vec![input, bias],
            Some(Box::new(move |g: &Tensor| {
                let mut gb = Tensor::zeros(&[c]);
                for (i, &gv) in g.data().iter().enumerate() {
                    gb.data_mut()[i % c] += gv;
                }
                vec![g.clone(), gb]
            })),
        ))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let va = self.value(a).clone();
        let value = tensor::relu(&va);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![tensor::relu_backward(&va, g)])),
        )
    }

    pub fn maxpool(&mut self, a: VarId, window: usize, stride: usize) -> Result<VarId> {
        let va = self.value(a).clone();
        let (value, argmax) = tensor::maxpool2d_with_argmax(&va, window, stride)?;
        let in_shape = va.shape().to_vec();
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                vec![tensor::maxpool2d_backward(&in_shape, &argmax, g)]
            })),
        ))
    }

    pub fn lrn(&mut self, a: VarId, p: LrnParams) -> Result<VarId> {
        let va = self.value(a).clone();
        let value = tensor::lrn(&va, p)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![tensor::lrn_backward(&va, p, g).unwrap()])),
        ))
    }

    pub fn matvec(&mut self, w: VarId, x: VarId) -> Result<VarId> {
        let vw = self.value(w).clone();
        let vx = self.value(x).clone();
        let value = tensor::matvec(&vw, &vx)?;
        Ok(self.push(
            value,
            vec![w, x],
            Some(Box::new(move |g: &Tensor| {
                let (gw, gx) = tensor::matvec_backward(&vw, &vx, g);
                vec![gw, gx]
            })),
        ))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let old_shape = self.value(a).shape().to_vec();
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![g.reshape(&old_shape).unwrap()])),
        ))
    }

    pub fn permute(&mut self, a: VarId, axes: &[usize]) -> Result<VarId> {
        let value = self.value(a).permute(axes)?;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![g.permute(&inverse).unwrap()])),
        ))
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&id| self.value(id)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let part_shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        Ok(self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g: &Tensor| {
                // split g back along `axis`
                let mut out = Vec::with_capacity(extents.len());
                let mut base = 0usize;
                for (pi, shape) in part_shapes.iter().enumerate() {
                    let mut part = Tensor::zeros(shape);
                    let mut idx = vec![0usize; shape.len()];
                    let mut src = vec![0usize; shape.len()];
                    loop {
                        src.copy_from_slice(&idx);
                        src[axis] += base;
                        let v = g.at(&src);
                        part.set(&idx, v);
                        let mut done = true;
                        for ax in (0..idx.len()).rev() {
                            idx[ax] += 1;
                            if idx[ax] < shape[ax] {
                                done = false;
                                break;
                            }
                            idx[ax] = 0;
                        }
                        if done {
                            break;
                        }
                    }
                    base += extents[pi];
                    out.push(part);
                }
                out
            })),
        ))
    }

    /// Stack equally shaped tensors along a fresh axis inserted at `axis`.
    pub fn stack(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        if parts.is_empty() {
            return Err(FstcnError::Invalid("stack of zero tensors".into()));
        }
        let base_shape = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != base_shape {
                return Err(FstcnError::shape(
                    "stack",
                    format!("{base_shape:?}"),
                    format!("{:?}", self.value(p).shape()),
                ));
            }
        }
        if axis > base_shape.len() {
            return Err(FstcnError::Invalid(format!("stack axis {axis} out of range")));
        }
        let mut out_shape = base_shape.clone();
        out_shape.insert(axis, parts.len());
        let mut value = Tensor::zeros(&out_shape);
        for (pi, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            let mut idx = vec![0usize; base_shape.len()];
            loop {
                let mut dst = idx.clone();
                dst.insert(axis, pi);
                value.set(&dst, t.at(&idx));
                let mut done = true;
                for ax in (0..idx.len()).rev() {
                    idx[ax] += 1;
                    if idx[ax] < base_shape[ax] {
                        done = false;
                        break;
                    }
                    idx[ax] = 0;
                }
                if done {
                    break;
                }
            }
        }
        let n = parts.len();
        let bs = base_shape;
        Ok(self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g: &Tensor| {
                let mut grads = Vec::with_capacity(n);
                for pi in 0..n {
                    let mut part = Tensor::zeros(&bs);
                    let mut idx = vec![0usize; bs.len()];
                    loop {
                        let mut src = idx.clone();
                        src.insert(axis, pi);
                        part.set(&idx, g.at(&src));
                        let mut done = true;
                        for ax in (0..idx.len()).rev() {
                            idx[ax] += 1;
                            if idx[ax] < bs[ax] {
                                done = false;
                                break;
                            }
                            idx[ax] = 0;
                        }
                        if done {
                            break;
                        }
                    }
                    grads.push(part);
                }
                grads
            })),
        ))
    }

    /// Mix the last axis through a matrix: `out[.., j'] = sum_j in[.., j] * m[j, j']`.
    pub fn mix_last(&mut self, input: VarId, matrix: VarId) -> Result<VarId> {
        let vi = self.value(input).clone();
        let vm = self.value(matrix).clone();
        let ms = vm.shape();
        if ms.len() != 2 {
            return Err(FstcnError::shape("mix_last matrix", "[f, f']", format!("{ms:?}")));
        }
        let (f, f2) = (ms[0], ms[1]);
        let last = *vi.shape().last().unwrap();
        if last != f {
            return Err(FstcnError::shape("mix_last", format!("last axis {f}"), format!("last axis {last}")));
        }
        let rows = vi.len() / f;
        let mut out_shape = vi.shape().to_vec();
        *out_shape.last_mut().unwrap() = f2;
        let mut value = Tensor::zeros(&out_shape);
        {
            let od = value.data_mut();
            let id = vi.data();
            let md = vm.data();
            for r in 0..rows {
                for j in 0..f {
                    let v = id[r * f + j];
                    for jp in 0..f2 {
                        od[r * f2 + jp] += v * md[j * f2 + jp];
                    }
                }
            }
        }
        let in_shape = vi.shape().to_vec();
        Ok(self.push(
            value,
            vec![input, matrix],
            Some(Box::new(move |g: &Tensor| {
                let mut gi = Tensor::zeros(&in_shape);
                let mut gm = Tensor::zeros(&[f, f2]);
                let gd = g.data();
                let id = vi.data();
                let md = vm.data();
                for r in 0..rows {
                    for j in 0..f {
                        let mut acc = 0.0;
                        for jp in 0..f2 {
                            let gv = gd[r * f2 + jp];
                            acc += gv * md[j * f2 + jp];
                            gm.data_mut()[j * f2 + jp] += gv * id[r * f + j];
                        }
                        gi.data_mut()[r * f + j] += acc;
                    }
                }
                vec![gi, gm]
            })),
        ))
    }

    /// Mean over the first two (spatial) axes of `[x, y, f]`, yielding `[f]`.
    pub fn mean_spatial(&mut self, a: VarId) -> Result<VarId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 {
            return Err(FstcnError::shape("mean_spatial", "[x, y, f]", format!("{s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let inv = 1.0 / (h * w) as f64;
        let mut value = Tensor::zeros(&[c]);
        for (i, &v) in self.value(a).data().iter().enumerate() {
            value.data_mut()[i % c] += v * inv;
        }
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut gi = Tensor::zeros(&[h, w, c]);
                for (i, v) in gi.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i % c] * inv;
                }
                vec![gi]
            })),
        ))
    }

    /// Train-time dropout with inverted scaling; masks are drawn from `rng`.
    pub fn dropout(&mut self, a: VarId, prob: f64, rng: &mut impl Rng) -> Result<VarId> {
        let mask = tensor::dropout_mask(self.value(a).shape(), prob, rng)?;
        let value = self.value(a).mul(&mask)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![g.mul(&mask).unwrap()])),
        ))
    }

    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let value = tensor::softmax(self.value(a))?;
        let out = value.clone();
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![tensor::softmax_backward(&out, g)])),
        ))
    }

    /// Softmax cross-entropy against a one-hot target, fused for stability.
    pub fn cross_entropy(&mut self, logits: VarId, target: usize) -> Result<VarId> {
        let v = self.value(logits);
        if v.rank() != 1 {
            return Err(FstcnError::shape("cross_entropy", "[n]", format!("{:?}", v.shape())));
        }
        if target >= v.len() {
            return Err(FstcnError::Bounds(format!("target {target} >= {}", v.len())));
        }
        let probs = tensor::softmax(v)?;
        let loss = -probs.data()[target].max(1e-300).ln();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            Some(Box::new(move |g: &Tensor| {
                let mut grad = probs.clone();
                grad.data_mut()[target] -= 1.0;
                vec![grad.scale(g.data()[0])]
            })),
        ))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's gradients; a
    /// second call is rejected.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients> {
        if self.consumed {
            return Err(FstcnError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(FstcnError::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => *acc = acc.add(&pg).expect("gradient shape mismatch"),
                        slot => *slot = Some(pg),
                    }
                }
            } else {
                grads[id] = Some(g); // keep leaf gradients
            }
        }
        Ok(Gradients { grads })
    }
}
