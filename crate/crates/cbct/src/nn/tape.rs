//! Reverse-mode tape over NCHW tensors.
//!
//! Every operation appends a node holding its output value and enough
//! information to push gradients back to its parents. Nodes are created in
//! topological order, so the backward pass is a single reverse sweep.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView3, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};
use rayon::prelude::*;

use crate::error::{CbctError, Result};

/// Scalar types the engine runs on (`f32` for training, `f64` for
/// gradient checking).
pub trait Element:
    Float + NumAssign + ScalarOperand + LinalgScalar + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}
impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// A parameter tensor: value plus the gradient buffer filled in by the
/// last backward pass.
#[derive(Debug, Clone)]
pub struct Tensor4<F> {
    pub value: Array4<F>,
    pub grad: Option<Array4<F>>,
}

impl<F: Element> Tensor4<F> {
    pub fn new(value: Array4<F>) -> Self {
        Tensor4 { value, grad: None }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op<F> {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    MaxPool2 {
        input: TensorId,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: TensorId,
    },
    ConcatChannels {
        inputs: Vec<TensorId>,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    MseLoss {
        pred: TensorId,
        target: Array4<F>,
    },
    DiceLoss {
        pred: TensorId,
        target: Array4<F>,
        // cached per-image (numerator, denominator) from the forward pass
        terms: Vec<(F, F)>,
    },
    /// `value = a + k·b` on scalar nodes.
    ScaledAdd {
        a: TensorId,
        b: TensorId,
        k: F,
    },
}

pub struct Tape<F: Element> {
    values: Vec<Array4<F>>,
    grads: Vec<Option<Array4<F>>>,
    ops: Vec<Op<F>>,
    requires: Vec<bool>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    fn push(&mut self, value: Array4<F>, op: Op<F>, requires: bool) -> TensorId {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by an op"
        );
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        TensorId(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Array4<F>, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: TensorId) -> &Array4<F> {
        &self.values[id.0]
    }

    /// First element of a `(1,1,1,1)` node.
    pub fn scalar(&self, id: TensorId) -> F {
        self.values[id.0][[0, 0, 0, 0]]
    }

    pub fn grad(&self, id: TensorId) -> Option<&Array4<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn take_grad(&mut self, id: TensorId) -> Option<Array4<F>> {
        self.grads[id.0].take()
    }

    fn requires_any(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.requires[id.0])
    }

    // ---- ops ---------------------------------------------------------------

    /// Cross-correlation (no kernel flip). `weight` is `(cout, cin, kh, kw)`,
    /// `bias` is `(1, cout, 1, 1)`; output spatial dims follow
    /// `floor((in + 2·pad − k)/stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        if stride == 0 {
            return Err(CbctError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let x = &self.values[input.0];
        let w = &self.values[weight.0];
        let b = &self.values[bias.0];
        let (n, cin, h, width) = x.dim();
        let (cout, wcin, kh, kw) = w.dim();
        if wcin != cin {
            return Err(CbctError::InvalidArgument(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if b.dim() != (1, cout, 1, 1) {
            return Err(CbctError::InvalidArgument(format!(
                "conv2d: bias shape {:?}, want (1, {cout}, 1, 1)",
                b.dim()
            )));
        }
        if h + 2 * pad < kh || width + 2 * pad < kw {
            return Err(CbctError::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{width}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (width + 2 * pad - kw) / stride + 1;

        let w_mat = w
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weight is contiguous");
        let mut out = Array4::<F>::zeros((n, cout, oh, ow));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut out_s, x_s)| {
                let cols = im2col(&x_s, kh, kw, stride, pad, oh, ow);
                let mut out_mat = out_s
                    .view_mut()
                    .into_shape_with_order((cout, oh * ow))
                    .expect("output is contiguous");
                general_mat_mul(F::one(), &w_mat, &cols.view(), F::zero(), &mut out_mat);
            });
        for c in 0..cout {
            let bc = b[[0, c, 0, 0]];
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bc);
        }

        let requires = self.requires_any(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            requires,
        ))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let out = self.values[input.0].mapv(|v| v.max(F::zero()));
        let requires = self.requires[input.0];
        self.push(out, Op::Relu { input }, requires)
    }

    /// Logistic sigmoid, clamped into the open interval (0, 1).
    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        let lo = F::from_f64(1e-7);
        let hi = F::one() - lo;
        let out = self.values[input.0].mapv(|v| {
            let y = F::one() / (F::one() + (-v).exp());
            y.max(lo).min(hi)
        });
        let requires = self.requires[input.0];
        self.push(out, Op::Sigmoid { input }, requires)
    }

    /// 2×2 max pooling with stride 2. Ties go to the first element in scan
    /// order. Spatial dims must be even.
    pub fn maxpool2(&mut self, input: TensorId) -> Result<TensorId> {
        let x = &self.values[input.0];
        let (n, c, h, w) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CbctError::InvalidArgument(format!(
                "maxpool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<F>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        let x_slice = x.as_slice().expect("input is contiguous");
        for b in 0..n {
            for ch in 0..c {
                let plane = &x_slice[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0usize;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = (2 * oi + di) * w + (2 * oj + dj);
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[[b, ch, oi, oj]] = best;
                        argmax[((b * c + ch) * oh + oi) * ow + oj] =
                            ((b * c + ch) * h * w + best_idx) as u32;
                    }
                }
            }
        }
        let requires = self.requires[input.0];
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, requires))
    }

    /// Bilinear ×2 upsampling (half-pixel centers, clamped at the border,
    /// so the four corner pixels reproduce the input corners exactly).
    pub fn upsample2(&mut self, input: TensorId) -> TensorId {
        let x = &self.values[input.0];
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (2 * h, 2 * w);
        let row_map = upsample_taps(h);
        let col_map = upsample_taps(w);
        let mut out = Array4::<F>::zeros((n, c, oh, ow));
        for b in 0..n {
            for ch in 0..c {
                for oi in 0..oh {
                    let (r0, r1, fr) = row_map[oi];
                    for oj in 0..ow {
                        let (c0, c1, fc) = col_map[oj];
                        let top = x[[b, ch, r0, c0]] * (F::one() - fc) + x[[b, ch, r0, c1]] * fc;
                        let bot = x[[b, ch, r1, c0]] * (F::one() - fc) + x[[b, ch, r1, c1]] * fc;
                        out[[b, ch, oi, oj]] = top * (F::one() - fr) + bot * fr;
                    }
                }
            }
        }
        let requires = self.requires[input.0];
        self.push(out, Op::Upsample2 { input }, requires)
    }

    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(CbctError::InvalidArgument("concat of zero tensors".into()));
        }
        let (n, _, h, w) = self.values[inputs[0].0].dim();
        let mut c_total = 0;
        for id in inputs {
            let (ni, ci, hi, wi) = self.values[id.0].dim();
            if (ni, hi, wi) != (n, h, w) {
                return Err(CbctError::InvalidArgument(
                    "concat: mismatched batch or spatial dims".into(),
                ));
            }
            c_total += ci;
        }
        let mut out = Array4::<F>::zeros((n, c_total, h, w));
        let mut offset = 0;
        for id in inputs {
            let x = &self.values[id.0];
            let ci = x.dim().1;
            out.slice_mut(ndarray::s![.., offset..offset + ci, .., ..])
                .assign(x);
            offset += ci;
        }
        let requires = self.requires_any(inputs);
        Ok(self.push(
            out,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            requires,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.values[a.0].dim() != self.values[b.0].dim() {
            return Err(CbctError::InvalidArgument("add: shape mismatch".into()));
        }
        let out = &self.values[a.0] + &self.values[b.0];
        let requires = self.requires_any(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, requires))
    }

    /// Mean squared error over all elements, as a `(1,1,1,1)` node.
    pub fn mse_loss(&mut self, pred: TensorId, target: &Array4<F>) -> Result<TensorId> {
        let p = &self.values[pred.0];
        if p.dim() != target.dim() {
            return Err(CbctError::InvalidArgument(format!(
                "mse: prediction {:?} vs target {:?}",
                p.dim(),
                target.dim()
            )));
        }
        let n = F::from_f64(p.len() as f64);
        let mut acc = F::zero();
        for (a, b) in p.iter().zip(target.iter()) {
            let d = *a - *b;
            acc += d * d;
        }
        let value = Array4::from_elem((1, 1, 1, 1), acc / n);
        let requires = self.requires[pred.0];
        Ok(self.push(
            value,
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
            requires,
        ))
    }

    /// Soft Dice loss `1 − (2Σpg + ε)/(Σp + Σg + ε)`, computed per batch
    /// image and averaged, as a `(1,1,1,1)` node.
    pub fn dice_loss(&mut self, pred: TensorId, target: &Array4<F>, eps: F) -> Result<TensorId> {
        let p = &self.values[pred.0];
        if p.dim() != target.dim() {
            return Err(CbctError::InvalidArgument(format!(
                "dice: prediction {:?} vs target {:?}",
                p.dim(),
                target.dim()
            )));
        }
        let batch = p.dim().0;
        let mut terms = Vec::with_capacity(batch);
        let mut acc = F::zero();
        for b in 0..batch {
            let pb = p.index_axis(Axis(0), b);
            let gb = target.index_axis(Axis(0), b);
            let mut inter = F::zero();
            let mut sum_p = F::zero();
            let mut sum_g = F::zero();
            for (x, y) in pb.iter().zip(gb.iter()) {
                inter += *x * *y;
                sum_p += *x;
                sum_g += *y;
            }
            let num = F::from_f64(2.0) * inter + eps;
            let den = sum_p + sum_g + eps;
            terms.push((num, den));
            acc += F::one() - num / den;
        }
        let value = Array4::from_elem((1, 1, 1, 1), acc / F::from_f64(batch as f64));
        let requires = self.requires[pred.0];
        Ok(self.push(
            value,
            Op::DiceLoss {
                pred,
                target: target.clone(),
                terms,
            },
            requires,
        ))
    }

    /// `a + k·b` on scalar nodes.
    pub fn scaled_add(&mut self, a: TensorId, b: TensorId, k: F) -> Result<TensorId> {
        if self.values[a.0].len() != 1 || self.values[b.0].len() != 1 {
            return Err(CbctError::InvalidArgument(
                "scaled_add expects scalar nodes".into(),
            ));
        }
        let va = self.values[a.0][[0, 0, 0, 0]];
        let vb = self.values[b.0][[0, 0, 0, 0]];
        let value = Array4::from_elem((1, 1, 1, 1), va + k * vb);
        let requires = self.requires_any(&[a, b]);
        Ok(self.push(value, Op::ScaledAdd { a, b, k }, requires))
    }

    // ---- backward ----------------------------------------------------------

    fn accumulate(&mut self, id: TensorId, delta: Array4<F>) {
        match &mut self.grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar node; fills gradients of every node with
    /// `requires_grad` set on its path.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(CbctError::InvalidArgument(
                "backward starts from a scalar node".into(),
            ));
        }
        self.grads[loss.0] = Some(Array4::from_elem((1, 1, 1, 1), F::one()));

        for idx in (0..self.ops.len()).rev() {
            if !self.requires[idx] {
                continue;
            }
            let Some(out_grad) = self.grads[idx].take() else {
                continue;
            };
            // leaves keep their gradient for the caller
            if matches!(self.ops[idx], Op::Leaf) {
                self.grads[idx] = Some(out_grad);
                continue;
            }
            let op = std::mem::replace(&mut self.ops[idx], Op::Leaf);
            self.backward_op(&op, &out_grad)?;
            self.ops[idx] = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<F>, out_grad: &Array4<F>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                self.backward_conv2d(*input, *weight, *bias, *stride, *pad, out_grad);
            }
            Op::Relu { input } => {
                if self.requires[input.0] {
                    let x = &self.values[input.0];
                    let mut g = out_grad.clone();
                    ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
                        if xv <= F::zero() {
                            *gv = F::zero();
                        }
                    });
                    self.accumulate(*input, g);
                }
            }
            Op::Sigmoid { input } => {
                if self.requires[input.0] {
                    // recompute y from the stored input instead of tracking
                    // the output id inside the op
                    let lo = F::from_f64(1e-7);
                    let hi = F::one() - lo;
                    let x = &self.values[input.0];
                    let mut g = out_grad.clone();
                    ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
                        let y = (F::one() / (F::one() + (-xv).exp())).max(lo).min(hi);
                        *gv = *gv * y * (F::one() - y);
                    });
                    self.accumulate(*input, g);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.requires[input.0] {
                    let mut g = Array4::<F>::zeros(self.values[input.0].dim());
                    {
                        let gs = g.as_slice_mut().expect("contiguous");
                        for (flat, &src) in out_grad.iter().zip(argmax.iter()) {
                            gs[src as usize] += *flat;
                        }
                    }
                    self.accumulate(*input, g);
                }
            }
            Op::Upsample2 { input } => {
                if self.requires[input.0] {
                    let (n, c, h, w) = self.values[input.0].dim();
                    let row_map = upsample_taps(h);
                    let col_map = upsample_taps(w);
                    let mut g = Array4::<F>::zeros((n, c, h, w));
                    for b in 0..n {
                        for ch in 0..c {
                            for oi in 0..2 * h {
                                let (r0, r1, fr) = row_map[oi];
                                for oj in 0..2 * w {
                                    let (c0, c1, fc) = col_map[oj];
                                    let go = out_grad[[b, ch, oi, oj]];
                                    g[[b, ch, r0, c0]] +=
                                        go * (F::one() - fr) * (F::one() - fc);
                                    g[[b, ch, r0, c1]] += go * (F::one() - fr) * fc;
                                    g[[b, ch, r1, c0]] += go * fr * (F::one() - fc);
                                    g[[b, ch, r1, c1]] += go * fr * fc;
                                }
                            }
                        }
                    }
                    self.accumulate(*input, g);
                }
            }
            Op::ConcatChannels { inputs } => {
                let mut offset = 0;
                for id in inputs {
                    let ci = self.values[id.0].dim().1;
                    if self.requires[id.0] {
                        let part = out_grad
                            .slice(ndarray::s![.., offset..offset + ci, .., ..])
                            .to_owned();
                        self.accumulate(*id, part);
                    }
                    offset += ci;
                }
            }
            Op::Add { a, b } => {
                if self.requires[a.0] {
                    self.accumulate(*a, out_grad.clone());
                }
                if self.requires[b.0] {
                    self.accumulate(*b, out_grad.clone());
                }
            }
            Op::MseLoss { pred, target } => {
                if self.requires[pred.0] {
                    let g0 = out_grad[[0, 0, 0, 0]];
                    let p = &self.values[pred.0];
                    let scale = F::from_f64(2.0 / p.len() as f64) * g0;
                    let mut g = Array4::<F>::zeros(p.dim());
                    ndarray::Zip::from(&mut g)
                        .and(p)
                        .and(target)
                        .for_each(|gv, &pv, &tv| *gv = scale * (pv - tv));
                    self.accumulate(*pred, g);
                }
            }
            Op::DiceLoss {
                pred,
                target,
                terms,
            } => {
                if self.requires[pred.0] {
                    let g0 = out_grad[[0, 0, 0, 0]];
                    let p = &self.values[pred.0];
                    let batch = p.dim().0;
                    let inv_batch = F::from_f64(1.0 / batch as f64);
                    let two = F::from_f64(2.0);
                    let mut g = Array4::<F>::zeros(p.dim());
                    for b in 0..batch {
                        let (num, den) = terms[b];
                        let den2 = den * den;
                        let mut gb = g.index_axis_mut(Axis(0), b);
                        let tb = target.index_axis(Axis(0), b);
                        ndarray::Zip::from(&mut gb).and(&tb).for_each(|gv, &tv| {
                            // d(1 − num/den)/dp = −(2t·den − num)/den²
                            *gv = g0 * inv_batch * (num - two * tv * den) / den2;
                        });
                    }
                    self.accumulate(*pred, g);
                }
            }
            Op::ScaledAdd { a, b, k } => {
                if self.requires[a.0] {
                    self.accumulate(*a, out_grad.clone());
                }
                if self.requires[b.0] {
                    self.accumulate(*b, out_grad.mapv(|v| v * *k));
                }
            }
        }
        Ok(())
    }

    fn backward_conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        out_grad: &Array4<F>,
    ) {
        let (bias_grad, weight_grad, input_grad) = {
            let x = &self.values[input.0];
            let w = &self.values[weight.0];
            let (n, cin, h, width) = x.dim();
            let (cout, _, kh, kw) = w.dim();
            let (_, _, oh, ow) = out_grad.dim();

            let bias_grad = if self.requires[bias.0] {
                let mut bg = Array4::<F>::zeros((1, cout, 1, 1));
                for c in 0..cout {
                    let mut acc = F::zero();
                    for v in out_grad.index_axis(Axis(1), c).iter() {
                        acc += *v;
                    }
                    bg[[0, c, 0, 0]] = acc;
                }
                Some(bg)
            } else {
                None
            };

            let weight_grad = if self.requires[weight.0] {
                // per-sample partials, reduced in batch order
                let partials: Vec<Array2<F>> = (0..n)
                    .into_par_iter()
                    .map(|b| {
                        let cols =
                            im2col(&x.index_axis(Axis(0), b), kh, kw, stride, pad, oh, ow);
                        let og_mat = out_grad
                            .index_axis(Axis(0), b)
                            .into_shape_with_order((cout, oh * ow))
                            .expect("contiguous");
                        let mut wg = Array2::<F>::zeros((cout, cin * kh * kw));
                        general_mat_mul(F::one(), &og_mat, &cols.t(), F::zero(), &mut wg);
                        wg
                    })
                    .collect();
                let mut total = Array2::<F>::zeros((cout, cin * kh * kw));
                for p in partials {
                    total += &p;
                }
                Some(
                    total
                        .into_shape_with_order((cout, cin, kh, kw))
                        .expect("contiguous"),
                )
            } else {
                None
            };

            let input_grad = if self.requires[input.0] {
                let w_mat = w
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .expect("contiguous");
                let mut ig = Array4::<F>::zeros((n, cin, h, width));
                ig.axis_iter_mut(Axis(0))
                    .into_par_iter()
                    .zip(out_grad.axis_iter(Axis(0)).into_par_iter())
                    .for_each(|(mut ig_s, og_s)| {
                        let og_mat = og_s
                            .into_shape_with_order((cout, oh * ow))
                            .expect("contiguous");
                        let mut col_grad = Array2::<F>::zeros((cin * kh * kw, oh * ow));
                        general_mat_mul(F::one(), &w_mat.t(), &og_mat, F::zero(), &mut col_grad);
                        col2im(&col_grad, &mut ig_s, kh, kw, stride, pad, oh, ow);
                    });
                Some(ig)
            } else {
                None
            };
            (bias_grad, weight_grad, input_grad)
        };

        if let Some(bg) = bias_grad {
            self.accumulate(bias, bg);
        }
        if let Some(wg) = weight_grad {
            self.accumulate(weight, wg);
        }
        if let Some(ig) = input_grad {
            self.accumulate(input, ig);
        }
    }
}

/// (low index, high index, fraction) for each output coordinate of a ×2
/// bilinear upsampling with half-pixel centers and clamped borders.
fn upsample_taps<F: Element>(n_in: usize) -> Vec<(usize, usize, F)> {
    (0..2 * n_in)
        .map(|o| {
            let src = (o as f64 + 0.5) * 0.5 - 0.5;
            let src = src.clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, F::from_f64(src - lo as f64))
        })
        .collect()
}

fn im2col<F: Element>(
    input: &ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (cin, h, w) = input.dim();
    let mut cols = Array2::<F>::zeros((cin * kh * kw, oh * ow));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let mut dst = cols.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as i64 - pad as i64;
                    if ii < 0 || ii >= h as i64 {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as i64 - pad as i64;
                        if jj >= 0 && jj < w as i64 {
                            dst[oi * ow + oj] = input[[c, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Element>(
    col_grad: &Array2<F>,
    input_grad: &mut ndarray::ArrayViewMut3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (cin, h, w) = input_grad.dim();
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = col_grad.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as i64 - pad as i64;
                    if ii < 0 || ii >= h as i64 {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as i64 - pad as i64;
                        if jj >= 0 && jj < w as i64 {
                            input_grad[[c, ii as usize, jj as usize]] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array4;

    fn tensor(shape: (usize, usize, usize, usize), values: &[f64]) -> Array4<f64> {
        Array4::from_shape_vec(shape, values.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor((1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]), false);
        let w = tape.leaf(tensor((1, 1, 1, 1), &[1.0]), false);
        let b = tape.leaf(Array4::zeros((1, 1, 1, 1)), false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn all_ones_kernel_sums_patch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor((1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]), false);
        let w = tape.leaf(Array4::ones((1, 1, 3, 3)), false);
        let b = tape.leaf(Array4::zeros((1, 1, 1, 1)), false);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).dim(), (1, 1, 1, 1));
        assert_relative_eq!(tape.scalar(y), 45.0);
    }

    #[test]
    fn conv_weight_grad_is_patch_sum() {
        // d(Σ output)/dw_k = Σ of the input patch the weight touches
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor((1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]), false);
        let w = tape.leaf(Array4::ones((1, 1, 3, 3)), true);
        let b = tape.leaf(Array4::zeros((1, 1, 1, 1)), true);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        // Σ output is just the single output pixel here
        let target = Array4::zeros((1, 1, 1, 1));
        let loss = tape.mse_loss(y, &target).unwrap();
        tape.backward(loss).unwrap();
        // d/dw of (y−0)² = 2y·x_patch, with y = 45
        let wg = tape.grad(w).unwrap();
        assert_relative_eq!(wg[[0, 0, 0, 0]], 2.0 * 45.0 * 1.0);
        assert_relative_eq!(wg[[0, 0, 2, 2]], 2.0 * 45.0 * 9.0);
        let bg = tape.grad(b).unwrap();
        assert_relative_eq!(bg[[0, 0, 0, 0]], 2.0 * 45.0);
    }

    #[test]
    fn conv_shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::zeros((1, 2, 4, 4)), false);
        let w = tape.leaf(Array4::zeros((1, 3, 3, 3)), false);
        let b = tape.leaf(Array4::zeros((1, 1, 1, 1)), false);
        assert!(tape.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn maxpool_constant_stays_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::from_elem((1, 1, 4, 4), 3.25), false);
        let y = tape.maxpool2(x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 3.25));
        assert_eq!(tape.value(y).dim(), (1, 1, 2, 2));
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::zeros((1, 1, 5, 4)), false);
        assert!(tape.maxpool2(x).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            tensor(
                (1, 1, 2, 2),
                &[1.0, 7.0, 2.0, 3.0], // max at (0,1)
            ),
            true,
        );
        let y = tape.maxpool2(x).unwrap();
        let target = Array4::zeros((1, 1, 1, 1));
        let loss = tape.mse_loss(y, &target).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_relative_eq!(g[[0, 0, 0, 1]], 2.0 * 7.0);
        assert_eq!(g[[0, 0, 0, 0]], 0.0);
        assert_eq!(g[[0, 0, 1, 0]], 0.0);
        assert_eq!(g[[0, 0, 1, 1]], 0.0);
    }

    #[test]
    fn upsample_preserves_corners_and_constants() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.upsample2(x);
        let v = tape.value(y);
        assert_eq!(v.dim(), (1, 1, 4, 4));
        assert_relative_eq!(v[[0, 0, 0, 0]], 1.0);
        assert_relative_eq!(v[[0, 0, 0, 3]], 2.0);
        assert_relative_eq!(v[[0, 0, 3, 0]], 3.0);
        assert_relative_eq!(v[[0, 0, 3, 3]], 4.0);

        let c = tape.leaf(Array4::from_elem((1, 2, 4, 4), -0.5), false);
        let yc = tape.upsample2(c);
        assert!(tape.value(yc).iter().all(|&v| v == -0.5));
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor((1, 1, 1, 3), &[-1000.0, 0.0, 1000.0]), false);
        let y = tape.sigmoid(x);
        for &v in tape.value(y).iter() {
            assert!(v > 0.0 && v < 1.0);
        }
        assert_relative_eq!(tape.value(y)[[0, 0, 0, 1]], 0.5);
    }

    #[test]
    fn concat_and_add_round_trip_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Array4::from_elem((1, 1, 2, 2), 1.0), true);
        let b = tape.leaf(Array4::from_elem((1, 2, 2, 2), 2.0), true);
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).dim(), (1, 3, 2, 2));
        let target = Array4::zeros((1, 3, 2, 2));
        let loss = tape.mse_loss(cat, &target).unwrap();
        tape.backward(loss).unwrap();
        // d mean((x−0)²)/dx = 2x/N with N=12
        let ga = tape.grad(a).unwrap();
        assert_relative_eq!(ga[[0, 0, 0, 0]], 2.0 * 1.0 / 12.0);
        let gb = tape.grad(b).unwrap();
        assert_relative_eq!(gb[[0, 1, 1, 1]], 2.0 * 2.0 / 12.0);
    }
}
