//! Reverse-mode differentiation over a linear tape of layer operations.
//!
//! Activations are single samples in channel-major `[c, h, w]` layout;
//! vectors are `[d]`. Parameters live in a [`ParamSet`] and are referenced
//! by [`ParamId`], so optimizers and checkpoints can walk them in order.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VadeError};
use crate::tensor::{col2im, conv2d_chw, Real, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(VadeError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn add_scaled(&mut self, other: &ParamSet<T>, scale: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt()
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    pub fn scaled_normal<T: Real>(
        rng: &mut SeededRng,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
    ) -> Tensor<T> {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of(rng.normal() * std))
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Upsample {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    MeanRows {
        table: Var,
        ids: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation for later backpropagation.
///
/// With `record == false` the tape keeps only the values needed by later
/// forward ops and skips backward caches (inference mode).
pub struct Tape<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    record: bool,
}

fn chw(t: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(VadeError::Shape(format!(
            "expected [c,h,w], got {:?}",
            t.shape()
        ))),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            record: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id).clone();
        self.push(t, Op::Param(id))
    }

    /// `[c_in,h,w]` convolution with `[c_out,c_in,k,k]` weights and `[c_out]` bias.
    pub fn conv(&mut self, x: Var, w: ParamId, b: ParamId, stride: usize) -> Result<Var> {
        let (c_in, h, wd) = chw(self.value(x))?;
        let ws = self.params.get(w).shape().to_vec();
        let [c_out, wc, k, _] = ws[..] else {
            return Err(VadeError::Shape(format!(
                "conv weight must be 4-d, got {ws:?}"
            )));
        };
        if wc != c_in {
            return Err(VadeError::Shape(format!(
                "conv expects {wc} input channels, got {c_in}"
            )));
        }
        let pad = k / 2;
        let (out, oh, ow, cols) = conv2d_chw(
            self.value(x).data(),
            c_in,
            h,
            wd,
            self.params.get(w).data(),
            Some(self.params.get(b).data()),
            c_out,
            k,
            stride,
            pad,
        )?;
        let wv = self.param(w);
        let bv = self.param(b);
        let cols = if self.record { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(vec![c_out, oh, ow], out)?,
            Op::Conv {
                x,
                w: wv,
                b: bv,
                k,
                stride,
                pad,
                cols,
            },
        ))
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
    ) -> Result<Var> {
        let (c, h, w) = chw(self.value(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(VadeError::Shape(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        let eps = T::of(1e-5);
        let hw = h * w;
        let per = c / groups * hw;
        let xd = self.value(x).data();
        let g = self.params.get(gamma).data();
        let bt = self.params.get(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); groups];
        let mut out = vec![T::zero(); xd.len()];
        for gi in 0..groups {
            let seg = &xd[gi * per..(gi + 1) * per];
            let n = T::of(per as f64);
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            for i in gi * per..(gi + 1) * per {
                let ch = i / hw;
                let xh = (xd[i] - mean) * is;
                xhat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let (xhat, inv_std) = if self.record {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::GroupNorm {
                x,
                gamma: gv,
                beta: bv,
                groups,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x, s })
    }

    /// Feature-wise modulation `x * (1 + scale) + shift` with `[c]` vectors.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x))?;
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(VadeError::Shape(format!(
                "film vectors must have {c} entries"
            )));
        }
        let hw = h * w;
        let s = self.value(scale).data();
        let b = self.value(shift).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (T::one() + s[i / hw]) + b[i / hw])
            .collect();
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::Film { x, scale, shift },
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, h, w) = chw(self.value(a))?;
        let (cb, h2, w2) = chw(self.value(b))?;
        if (h, w) != (h2, w2) {
            return Err(VadeError::Shape(format!(
                "concat spatial mismatch {h}x{w} vs {h2}x{w2}"
            )));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::new(vec![ca + cb, h, w], out)?, Op::Concat { a, b }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x))?;
        let xd = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = xd[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::Upsample { x }))
    }

    /// `w x + b` with `[d_out, d_in]` weights.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let ws = self.params.get(w).shape().to_vec();
        let [d_out, d_in] = ws[..] else {
            return Err(VadeError::Shape(format!(
                "linear weight must be 2-d, got {ws:?}"
            )));
        };
        if self.value(x).len() != d_in {
            return Err(VadeError::Shape(format!(
                "linear expects {d_in} inputs, got {}",
                self.value(x).len()
            )));
        }
        let mut out = self.params.get(b).data().to_vec();
        T::gemm(
            d_out,
            d_in,
            1,
            T::one(),
            self.params.get(w).data(),
            d_in as isize,
            1,
            self.value(x).data(),
            1,
            1,
            T::one(),
            &mut out,
            1,
            1,
        );
        let wv = self.param(w);
        let bv = self.param(b);
        Ok(self.push(
            Tensor::new(vec![d_out], out)?,
            Op::Linear { x, w: wv, b: bv },
        ))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.value(x).data();
        if start + len > d.len() {
            return Err(VadeError::Shape(format!(
                "slice {start}+{len} out of {}",
                d.len()
            )));
        }
        let out = d[start..start + len].to_vec();
        Ok(self.push(Tensor::new(vec![len], out)?, Op::Slice { x, start }))
    }

    /// Mean of the selected rows of a `[v, d]` table.
    pub fn mean_rows(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let ts = self.params.get(table).shape().to_vec();
        let [v, d] = ts[..] else {
            return Err(VadeError::Shape(format!(
                "embedding table must be 2-d, got {ts:?}"
            )));
        };
        if ids.is_empty() {
            return Err(VadeError::InvalidParam("empty token sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(VadeError::TokenOutOfRange { id: bad, len: v });
        }
        let td = self.params.get(table).data();
        let inv = T::one() / T::of(ids.len() as f64);
        let mut out = vec![T::zero(); d];
        // Sorted summation makes the result exactly order-invariant.
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        for &i in &sorted {
            for (o, &e) in out.iter_mut().zip(&td[i * d..(i + 1) * d]) {
                *o += e;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let tv = self.param(table);
        Ok(self.push(
            Tensor::new(vec![d], out)?,
            Op::MeanRows {
                table: tv,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean squared error against a constant target; scalar `[1]` output.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        self.value(pred).same_shape(&target)?;
        let n = T::of(target.len() as f64);
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::new(vec![1], vec![s])?, Op::Mse { pred, target }))
    }

    /// Backpropagates `seed` (same shape as `root`) and accumulates parameter
    /// gradients into `param_grads`. Returns per-node gradients so callers
    /// can read input gradients with [`Gradients::of`].
    pub fn backward(
        &self,
        root: Var,
        seed: Tensor<T>,
        param_grads: &mut ParamSet<T>,
    ) -> Result<Gradients<T>> {
        if !self.record {
            return Err(VadeError::InvalidParam(
                "backward on an inference tape".into(),
            ));
        }
        self.value(root).same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(dy);
                }
                Op::Param(id) => {
                    let g = param_grads.get_mut(*id);
                    for (a, &b) in g.data_mut().iter_mut().zip(dy.data()) {
                        *a += b;
                    }
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                    cols,
                } => {
                    let (c_in, h, wd) = chw(self.value(*x))?;
                    let (c_out, oh, ow) = chw(&node.value)?;
                    let n = oh * ow;
                    let kk = c_in * k * k;
                    let wdata = self.value(*w).data();
                    let mut dw = vec![T::zero(); c_out * kk];
                    T::gemm(
                        c_out,
                        n,
                        kk,
                        T::one(),
                        dy.data(),
                        n as isize,
                        1,
                        cols,
                        1,
                        n as isize,
                        T::zero(),
                        &mut dw,
                        kk as isize,
                        1,
                    );
                    let db: Vec<T> = (0..c_out)
                        .map(|co| dy.data()[co * n..(co + 1) * n].iter().copied().sum())
                        .collect();
                    let mut dcols = vec![T::zero(); kk * n];
                    T::gemm(
                        kk,
                        c_out,
                        n,
                        T::one(),
                        wdata,
                        1,
                        kk as isize,
                        dy.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        n as isize,
                        1,
                    );
                    let dx = col2im(&dcols, c_in, h, wd, *k, *stride, *pad, oh, ow);
                    accumulate(
                        &mut grads,
                        *w,
                        Tensor::new(self.value(*w).shape().to_vec(), dw)?,
                    );
                    accumulate(&mut grads, *b, Tensor::new(vec![c_out], db)?);
                    accumulate(&mut grads, *x, Tensor::new(vec![c_in, h, wd], dx)?);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let (c, h, w) = chw(&node.value)?;
                    let hw = h * w;
                    let per = c / groups * hw;
                    let g = self.value(*gamma).data();
                    let d = dy.data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for i in 0..d.len() {
                        dgamma[i / hw] += d[i] * xhat[i];
                        dbeta[i / hw] += d[i];
                    }
                    let mut dx = vec![T::zero(); d.len()];
                    let n = T::of(per as f64);
                    for gi in 0..*groups {
                        let range = gi * per..(gi + 1) * per;
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for i in range.clone() {
                            let dxh = d[i] * g[i / hw];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[i];
                        }
                        for i in range {
                            let dxh = d[i] * g[i / hw];
                            dx[i] = inv_std[gi] / n * (n * dxh - sum_dxh - xhat[i] * sum_dxh_xh);
                        }
                    }
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                    accumulate(&mut grads, *x, Tensor::new(vec![c, h, w], dx)?);
                }
                Op::Silu { x } => {
                    let xv = self.value(*x);
                    let dx = xv.zip_map(&dy, |v, d| {
                        let s = sigmoid(v);
                        d * s * (T::one() + v * (T::one() - s))
                    })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Scale { x, s } => {
                    let s = *s;
                    accumulate(&mut grads, *x, dy.map(|d| d * s));
                }
                Op::Film { x, scale, shift } => {
                    let (c, h, w) = chw(&node.value)?;
                    let hw = h * w;
                    let s = self.value(*scale).data();
                    let xv = self.value(*x).data();
                    let d = dy.data();
                    let mut dx = vec![T::zero(); d.len()];
                    let mut ds = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for i in 0..d.len() {
                        let ch = i / hw;
                        dx[i] = d[i] * (T::one() + s[ch]);
                        ds[ch] += d[i] * xv[i];
                        db[ch] += d[i];
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![c, h, w], dx)?);
                    accumulate(&mut grads, *scale, Tensor::new(vec![c], ds)?);
                    accumulate(&mut grads, *shift, Tensor::new(vec![c], db)?);
                }
                Op::Concat { a, b } => {
                    let (ca, h, w) = chw(self.value(*a))?;
                    let (cb, _, _) = chw(self.value(*b))?;
                    let split = ca * h * w;
                    let da = Tensor::new(vec![ca, h, w], dy.data()[..split].to_vec())?;
                    let db = Tensor::new(vec![cb, h, w], dy.data()[split..].to_vec())?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Upsample { x } => {
                    let (c, h, w) = chw(self.value(*x))?;
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[(ch * h + y / 2) * w + xx / 2] +=
                                    dy.data()[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![c, h, w], dx)?);
                }
                Op::Linear { x, w, b } => {
                    let ws = self.value(*w).shape();
                    let (d_out, d_in) = (ws[0], ws[1]);
                    let xv = self.value(*x).data();
                    let wdata = self.value(*w).data();
                    let d = dy.data();
                    let mut dw = vec![T::zero(); d_out * d_in];
                    let mut dx = vec![T::zero(); d_in];
                    for o in 0..d_out {
                        for i in 0..d_in {
                            dw[o * d_in + i] = d[o] * xv[i];
                            dx[i] += wdata[o * d_in + i] * d[o];
                        }
                    }
                    accumulate(&mut grads, *w, Tensor::new(vec![d_out, d_in], dw)?);
                    accumulate(&mut grads, *b, dy.clone());
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), dx)?,
                    );
                }
                Op::Slice { x, start } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    dx[*start..*start + dy.len()].copy_from_slice(dy.data());
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), dx)?,
                    );
                }
                Op::MeanRows { table, ids } => {
                    let ts = self.value(*table).shape();
                    let d = ts[1];
                    let mut dt = vec![T::zero(); ts[0] * d];
                    let inv = T::one() / T::of(ids.len() as f64);
                    for &i in ids {
                        for (o, &g) in dt[i * d..(i + 1) * d].iter_mut().zip(dy.data()) {
                            *o += g * inv;
                        }
                    }
                    accumulate(&mut grads, *table, Tensor::new(ts.to_vec(), dt)?);
                }
                Op::Mse { pred, target } => {
                    let n = T::of(target.len() as f64);
                    let g = dy.data()[0] * T::of(2.0) / n;
                    let dp = self.value(*pred).zip_map(target, |p, t| g * (p - t))?;
                    accumulate(&mut grads, *pred, dp);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients left on input nodes after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Adam with decoupled bias correction, operating on whole parameter sets.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamSet<f32>,
    v: ParamSet<f32>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(
            self.m
                .tensors_mut()
                .iter_mut()
                .zip(self.v.tensors_mut().iter_mut()),
        ) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Aborts training when the loss stays above `factor` times the initial
/// loss for `patience` consecutive steps, or becomes non-finite.
#[derive(Clone, Debug)]
pub struct DivergenceMonitor {
    factor: f64,
    patience: usize,
    initial: Option<f64>,
    streak: usize,
}

impl Default for DivergenceMonitor {
    fn default() -> Self {
        DivergenceMonitor {
            factor: 10.0,
            patience: 100,
            initial: None,
            streak: 0,
        }
    }
}

impl DivergenceMonitor {
    pub fn new(factor: f64, patience: usize) -> Self {
        DivergenceMonitor {
            factor,
            patience,
            initial: None,
            streak: 0,
        }
    }

    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(VadeError::NonFinite(format!(
                "training loss at step {step}"
            )));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.factor * initial {
            self.streak += 1;
            if self.streak >= self.patience {
                return Err(VadeError::Diverged {
                    step,
                    loss,
                    initial,
                });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};

    fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
        rng.gaussian_draw(shape).unwrap()
    }

    /// A little network touching every op, with a scalar loss.
    struct Toy {
        params: ParamSet<f64>,
        ids: Vec<ParamId>,
    }

    impl Toy {
        fn new(seed: u64) -> Self {
            let mut rng = SeededRng::new(seed);
            let mut params = ParamSet::default();
            let shapes: [(&str, &[usize]); 12] = [
                ("conv1.w", &[4, 1, 3, 3]),
                ("conv1.b", &[4]),
                ("gn.g", &[4]),
                ("gn.b", &[4]),
                ("down.w", &[4, 4, 3, 3]),
                ("down.b", &[4]),
                ("emb", &[5, 3]),
                ("lin.w", &[8, 3]),
                ("lin.b", &[8]),
                ("out.w", &[1, 8, 1, 1]),
                ("out.b", &[1]),
                ("scale", &[1]),
            ];
            let ids = shapes
                .iter()
                .map(|(n, s)| params.add(*n, rand_tensor(&mut rng, s).map(|v| 0.5 * v)))
                .collect();
            Toy { params, ids }
        }

        fn loss(
            &self,
            params: &ParamSet<f64>,
            x: &Tensor<f64>,
            target: &Tensor<f64>,
        ) -> (f64, ParamSet<f64>, Tensor<f64>) {
            let id = &self.ids;
            let mut tape = Tape::new(params);
            let xv = tape.input(x.clone());
            let h = tape.conv(xv, id[0], id[1], 1).unwrap();
            let h = tape.group_norm(h, id[2], id[3], 2).unwrap();
            let h = tape.silu(h);
            let d = tape.conv(h, id[4], id[5], 2).unwrap();
            let e = tape.mean_rows(id[6], &[1, 3, 3]).unwrap();
            let l = tape.linear(e, id[7], id[8]).unwrap();
            let s = tape.slice(l, 0, 4).unwrap();
            let b = tape.slice(l, 4, 4).unwrap();
            let d = tape.film(d, s, b).unwrap();
            let u = tape.upsample(d).unwrap();
            let c = tape.concat(u, h).unwrap();
            let c = tape.scale(c, 0.7);
            let o = tape.conv(c, id[9], id[10], 1).unwrap();
            let o = tape.add(o, xv).unwrap();
            let loss = tape.mse(o, target.clone()).unwrap();
            let mut grads = params.zeros_like();
            let g = tape
                .backward(loss, Tensor::filled(&[1], 1.0), &mut grads)
                .unwrap();
            let dx = g.of(xv).unwrap().clone();
            (tape.value(loss).data()[0], grads, dx)
        }
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        let toy = Toy::new(3);
        let mut rng = SeededRng::new(4);
        let x = rand_tensor(&mut rng, &[1, 6, 6]);
        let target = rand_tensor(&mut rng, &[1, 6, 6]);
        let (_, grads, dx) = toy.loss(&toy.params, &x, &target);

        let flat = Tensor::new(vec![toy.params.num_scalars()], toy.params.flatten()).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut ps = toy.params.clone();
                ps.assign_flat(p.data()).unwrap();
                toy.loss(&ps, &x, &target).0
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&grads.flatten(), fd.data());
        assert!(err < 1e-6, "param gradient relative error {err}");

        let fdx = finite_diff_grad(|xp| toy.loss(&toy.params, xp, &target).0, &x, 1e-5).unwrap();
        let err = relative_error(dx.data(), fdx.data());
        assert!(err < 1e-6, "input gradient relative error {err}");
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let toy = Toy::new(1);
        let mut tape = Tape::inference(&toy.params);
        let x = tape.input(Tensor::zeros(&[1]));
        let mut g = toy.params.zeros_like();
        assert!(tape.backward(x, Tensor::zeros(&[1]), &mut g).is_err());
    }

    #[test]
    fn mean_rows_checks_ids() {
        let toy = Toy::new(1);
        let mut tape = Tape::new(&toy.params);
        assert!(matches!(
            tape.mean_rows(toy.ids[6], &[5]),
            Err(VadeError::TokenOutOfRange { .. })
        ));
        assert!(tape.mean_rows(toy.ids[6], &[]).is_err());
    }

    #[test]
    fn divergence_monitor_trips_after_patience() {
        let mut m = DivergenceMonitor::new(10.0, 3);
        m.observe(0, 1.0).unwrap();
        m.observe(1, 11.0).unwrap();
        m.observe(2, 2.0).unwrap();
        m.observe(3, 11.0).unwrap();
        m.observe(4, 11.0).unwrap();
        assert!(matches!(
            m.observe(5, 11.0),
            Err(VadeError::Diverged { step: 5, .. })
        ));
        assert!(matches!(
            DivergenceMonitor::default().observe(0, f64::NAN),
            Err(VadeError::NonFinite(_))
        ));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = ParamSet::default();
        g.add("a", Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = ParamSet::default();
        let id = params.add("x", Tensor::new(vec![2], vec![3.0f32, -2.0]).unwrap());
        let mut opt = Adam::new(&params, 0.1);
        for _ in 0..500 {
            let mut g = params.zeros_like();
            let x = params.get(id).data().to_vec();
            g.get_mut(id)
                .data_mut()
                .copy_from_slice(&[2.0 * x[0], 2.0 * x[1]]);
            opt.step(&mut params, &g);
        }
        assert!(params.get(id).sq_norm() < 1e-3);
    }
}
