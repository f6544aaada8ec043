//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node to the [`Tape`]. When the
//! tape records, each node also keeps what its backward rule needs. An
//! inference tape (`Tape::inference`) stores values only.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::params::ParamStore;
use crate::tensor::{
    bilinear_backward, bilinear_forward, channel_norm_backward, channel_norm_forward, col2im_add,
    conv_forward_cols, ensure_finite, gemm, im2col, ConvGeometry, MatRef, Scalar, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<Vec<T>>,
    },
    Resize {
        x: Var,
        dims: (usize, usize, usize),
        out: (usize, usize),
    },
    ChannelNorm {
        x: Var,
        inv_std: Vec<T>,
        spatial: usize,
    },
    Concat {
        a: Var,
        b: Var,
        split: usize,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Relu {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    /// Local gradient precomputed at forward time.
    Reduction {
        x: Var,
        local_grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
    flops: u64,
    param_vars: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward state.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
            flops: 0,
            param_vars: HashMap::new(),
        }
    }

    /// A tape that only evaluates; nothing on it requires gradients.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Floating-point operations executed by ops on this tape so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf whose gradient can be read back from [`Gradients`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to entry `index` of `params`; registered once per tape.
    pub fn param(&mut self, params: &ParamStore<T>, index: usize) -> Var {
        if let Some(&v) = self.param_vars.get(&index) {
            return v;
        }
        let v = self.push(params.get(index).value.clone(), Op::Param, true);
        self.param_vars.insert(index, v);
        v
    }

    /// 2-D convolution over a `[C,H,W]` or `[N,C,H,W]` input.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, chw, batched) = match xs[..] {
            [c, h, w] => (1, (c, h, w), false),
            [n, c, h, w] => (n, (c, h, w), true),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d input must be [C,H,W] or [N,C,H,W], got {xs:?}"
                )))
            }
        };
        let geom = ConvGeometry::new(chw, self.value(weight).shape(), stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::Shape(format!(
                    "conv2d bias must be [{}], got {:?}",
                    geom.c_out,
                    self.value(b).shape()
                )));
            }
        }
        let in_len = geom.c_in * geom.h * geom.w;
        let out_len = geom.c_out * geom.out_pixels();
        let wv = self.value(weight).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(n * out_len);
        let mut saved = Vec::new();
        let keep_cols = self.record && self.nodes[weight.0].requires_grad;
        for s in 0..n {
            let cols = im2col(&self.value(x).data()[s * in_len..(s + 1) * in_len], &geom);
            out.extend(conv_forward_cols(&cols, wv, bv, &geom));
            if keep_cols {
                saved.push(cols);
            }
        }
        ensure_finite(&out, "conv2d")?;
        let shape = if batched {
            vec![n, geom.c_out, geom.out_h, geom.out_w]
        } else {
            vec![geom.c_out, geom.out_h, geom.out_w]
        };
        self.flops += n as u64 * (geom.flops() + out_len as u64 * bias.is_some() as u64);
        let mut vars = vec![x, weight];
        vars.extend(bias);
        let rg = self.grad_any(&vars);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                geom,
                cols: saved,
            },
            rg,
        ))
    }

    /// Align-corners-false bilinear resize of a `[C,H,W]` tensor.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "bilinear_resize target {out_h}x{out_w} must be at least 1x1"
            )));
        }
        let dims = self.value(x).dims3()?;
        if dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Shape("bilinear_resize of an empty grid".into()));
        }
        let out = bilinear_forward(self.value(x).data(), dims, out_h, out_w);
        ensure_finite(&out, "bilinear_resize")?;
        self.flops += 11 * out.len() as u64;
        let rg = self.grad_any(&[x]);
        Ok(self.push(
            Tensor::new([dims.0, out_h, out_w], out)?,
            Op::Resize {
                x,
                dims,
                out: (out_h, out_w),
            },
            rg,
        ))
    }

    /// Standardizes each channel of a `[C,H,W]` tensor over its `H*W` positions.
    pub fn channel_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if h * w == 0 {
            return Err(Error::Shape(
                "channel_norm needs at least one position".into(),
            ));
        }
        let (out, inv_std) = channel_norm_forward(self.value(x).data(), c, h * w, eps);
        ensure_finite(&out, "channel_norm")?;
        self.flops += 6 * out.len() as u64;
        let rg = self.grad_any(&[x]);
        Ok(self.push(
            Tensor::new([c, h, w], out)?,
            Op::ChannelNorm {
                x,
                inv_std,
                spatial: h * w,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (c1, h, w) = self.value(a).dims3()?;
        let (c2, h2, w2) = self.value(b).dims3()?;
        if (h, w) != (h2, w2) {
            return Err(Error::Shape(format!(
                "concat_channels spatial mismatch: {h}x{w} vs {h2}x{w2}"
            )));
        }
        let mut out = Vec::with_capacity((c1 + c2) * h * w);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(
            Tensor::new([c1 + c2, h, w], out)?,
            Op::Concat {
                a,
                b,
                split: c1 * h * w,
            },
            rg,
        ))
    }

    /// Channels `start..start + len` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let out = self.value(x).data()[start * plane..(start + len) * plane].to_vec();
        let rg = self.grad_any(&[x]);
        Ok(self.push(
            Tensor::new([len, h, w], out)?,
            Op::Slice {
                x,
                offset: start * plane,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.flops += out.len() as u64;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::Relu { x }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        ensure_finite(out.data(), "scale")?;
        self.flops += out.len() as u64;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::Scale { x, factor }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<T> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        ensure_finite(&data, op)?;
        let shape = ta.shape().to_vec();
        self.flops += data.len() as u64;
        Tensor::new(shape, data)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        ensure_finite(&[s], "sum")?;
        self.flops += self.value(x).len() as u64;
        let rg = self.grad_any(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    /// `sum_i weight_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, wgt) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Shape(format!(
                    "weighted_sum terms must be scalars, got {:?}",
                    t.shape()
                )));
            }
            total = total + wgt * t.item();
        }
        ensure_finite(&[total], "weighted_sum")?;
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.grad_any(&vars);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of per-pixel softmax over `[Cls,H,W]` logits.
    /// Pixels labelled `ignore` are skipped; all-ignored gives 0.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &LabelMap,
        ignore: u8,
    ) -> Result<Var> {
        let (cls, h, w) = self.value(logits).dims3()?;
        if (labels.height(), labels.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "labels {}x{} do not match logits {h}x{w}",
                labels.height(),
                labels.width()
            )));
        }
        let plane = h * w;
        let x = self.value(logits).data();
        let mut count = 0usize;
        let mut loss = T::zero();
        let mut grad = vec![T::zero(); x.len()];
        for (p, &label) in labels.data().iter().enumerate() {
            if label == ignore {
                continue;
            }
            let label = label as usize;
            if label >= cls {
                return Err(Error::InvalidArgument(format!(
                    "label {label} at pixel {p} out of range for {cls} classes"
                )));
            }
            count += 1;
            let max = (0..cls)
                .map(|c| x[c * plane + p])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..cls {
                let e = (x[c * plane + p] - max).exp();
                grad[c * plane + p] = e;
                z = z + e;
            }
            loss = loss - (x[label * plane + p] - max - z.ln());
            for c in 0..cls {
                grad[c * plane + p] = grad[c * plane + p] / z;
            }
            grad[label * plane + p] = grad[label * plane + p] - T::one();
        }
        let value = if count == 0 {
            grad.fill(T::zero());
            T::zero()
        } else {
            let inv = T::from_usize(count).unwrap().recip();
            grad.iter_mut().for_each(|g| *g = *g * inv);
            loss * inv
        };
        ensure_finite(&[value], "softmax_cross_entropy")?;
        self.flops += 4 * x.len() as u64;
        let rg = self.grad_any(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Reduction {
                x: logits,
                local_grad: grad,
            },
            rg,
        ))
    }

    /// Masked mean squared error between `[C,H,W]` tensors.
    ///
    /// The sum of squared differences over masked positions and all channels
    /// is divided by `C * max(1, mask count)`. `target` and `mask` are
    /// constants: only `a` receives gradient.
    pub fn mse_masked(&mut self, a: Var, target: Var, mask: &Tensor<T>) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        if self.value(target).shape() != self.value(a).shape() {
            return Err(Error::Shape(format!(
                "mse_masked operands {:?} vs {:?}",
                self.value(a).shape(),
                self.value(target).shape()
            )));
        }
        if mask.shape() != [h, w] {
            return Err(Error::Shape(format!(
                "mse_masked mask {:?} does not match {h}x{w}",
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(Error::InvalidArgument(
                "mse_masked mask must be binary".into(),
            ));
        }
        let plane = h * w;
        let active = mask.data().iter().filter(|&&m| m == T::one()).count();
        let denom = T::from_usize(c * active.max(1)).unwrap();
        let (av, bv) = (self.value(a).data(), self.value(target).data());
        let mut grad = vec![T::zero(); av.len()];
        let mut total = T::zero();
        for ch in 0..c {
            for (p, &m) in mask.data().iter().enumerate() {
                if m == T::one() {
                    let i = ch * plane + p;
                    let d = av[i] - bv[i];
                    total = total + d * d;
                    grad[i] = (d + d) / denom;
                }
            }
        }
        let value = total / denom;
        ensure_finite(&[value], "mse_masked")?;
        self.flops += 3 * av.len() as u64;
        let rg = self.grad_any(&[a]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Reduction {
                x: a,
                local_grad: grad,
            },
            rg,
        ))
    }

    /// Gradients of scalar `loss` with respect to every leaf that requires them.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Input | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Accumulates gradients of `loss` into the matching entries of `params`.
    /// Repeated calls add up until the store's gradients are cleared.
    pub fn backward(&self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&index, &var) in &self.param_vars {
            if let Some(g) = &grads.grads[var.0] {
                ensure_finite(g, "backward")?;
                params.accumulate_grad(index, g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let p = geom.out_pixels();
                let k = geom.patch_len();
                let in_len = geom.c_in * geom.h * geom.w;
                let out_len = geom.c_out * p;
                let n = g.len() / out_len;
                let wv = self.value(*w).data();
                for s in 0..n {
                    let gs = &g[s * out_len..(s + 1) * out_len];
                    self.accumulate(grads, *w, |dw| {
                        gemm(
                            geom.c_out,
                            p,
                            k,
                            MatRef::rows(gs, p),
                            MatRef::transposed(&cols[s], p),
                            T::one(),
                            dw,
                        );
                    });
                    if let Some(b) = b {
                        self.accumulate(grads, *b, |db| {
                            for (co, row) in gs.chunks(p).enumerate() {
                                db[co] = db[co] + row.iter().copied().sum::<T>();
                            }
                        });
                    }
                    self.accumulate(grads, *x, |dx| {
                        let mut dcols = vec![T::zero(); k * p];
                        gemm(
                            k,
                            geom.c_out,
                            p,
                            MatRef::transposed(wv, k),
                            MatRef::rows(gs, p),
                            T::zero(),
                            &mut dcols,
                        );
                        col2im_add(&dcols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                    });
                }
            }
            Op::Resize { x, dims, out } => {
                let dx = bilinear_backward(g, *dims, out.0, out.1);
                self.accumulate(grads, *x, |acc| add_into(acc, &dx));
            }
            Op::ChannelNorm {
                x,
                inv_std,
                spatial,
            } => {
                let dx = channel_norm_backward(g, out.data(), inv_std, *spatial);
                self.accumulate(grads, *x, |acc| add_into(acc, &dx));
            }
            Op::Concat { a, b, split } => {
                self.accumulate(grads, *a, |acc| add_into(acc, &g[..*split]));
                self.accumulate(grads, *b, |acc| add_into(acc, &g[*split..]));
            }
            Op::Slice { x, offset } => {
                self.accumulate(grads, *x, |acc| {
                    add_into(&mut acc[*offset..*offset + g.len()], g)
                });
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *a = *a + gi;
                        }
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |acc| {
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a = *a + gi * *factor;
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| {
                    for ((d, &gi), &o) in acc.iter_mut().zip(g).zip(bv) {
                        *d = *d + gi * o;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((d, &gi), &o) in acc.iter_mut().zip(g).zip(av) {
                        *d = *d + gi * o;
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |acc| acc.iter_mut().for_each(|a| *a = *a + g[0]));
            }
            Op::WeightedSum { terms } => {
                for &(v, wgt) in terms {
                    self.accumulate(grads, v, |acc| acc[0] = acc[0] + wgt * g[0]);
                }
            }
            Op::Reduction { x, local_grad } => {
                self.accumulate(grads, *x, |acc| {
                    for (a, &l) in acc.iter_mut().zip(local_grad) {
                        *a = *a + l * g[0];
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
    }
}

/// Result of [`Tape::gradients`]; holds gradients of leaf nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum(wv).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn sum_of_squares_gradient_and_accumulation() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[2.0, 4.0, 6.0][..]));
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[4.0, 8.0, 12.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros([2]));
        let mut store = ParamStore::new();
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::full([2], 1.0)).unwrap();
        let mut tape = Tape::inference();
        let wv = tape.param(&store, w);
        let s = tape.sum(wv).unwrap();
        assert!(!tape.requires_grad(s));
        assert_eq!(tape.value(s).item(), 2.0);
    }

    #[test]
    fn param_registered_once() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full([2], 1.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full([2], f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn conv_counts_flops() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros([2, 4, 4]));
        let w = tape.constant(Tensor::zeros([3, 2, 3, 3]));
        tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.flops(), 2 * 3 * 18 * 16);
    }
}
