use std::collections::HashMap;

use rayon::prelude::*;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::{real, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Neg(Var),
    Exp(Var),
    Silu(Var),
    Softplus(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    CausalConv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    BroadcastLeading(Var),
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        states: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Tape of operations in execution order. Backward walks it in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; no backward state is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter into the graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra -------------------------------------------------

    /// `x(..., K) · w(K, N) -> (..., N)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("matmul", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_rows(
            m,
            k,
            n,
            self.data(x),
            k as isize,
            1,
            self.data(w),
            n as isize,
            1,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(x, w), &[x, w]))
    }

    /// Elementwise sum. One operand may have a shape equal to a suffix of the
    /// other's; it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (long, short, swapped) = if is_suffix(sa, sb) {
            (a, b, false)
        } else if is_suffix(sb, sa) {
            (b, a, true)
        } else {
            return Err(Error::shape(op, sa, sb));
        };
        let ld = self.data(long);
        let sd = self.data(short);
        let period = sd.len().max(1);
        let out: Vec<T> = if sd.is_empty() {
            Vec::new()
        } else {
            ld.iter()
                .enumerate()
                .map(|(i, &l)| {
                    let s = sd[i % period];
                    if swapped {
                        f(s, l)
                    } else {
                        f(l, s)
                    }
                })
                .collect()
        };
        Ok((Tensor::new(self.shape(long), out)?, swapped))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.shape(x), out).unwrap();
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| -v).collect();
        let value = Tensor::new(self.shape(x), out).unwrap();
        self.push(value, Op::Neg(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.exp()).collect();
        let value = Tensor::new(self.shape(x), out).unwrap();
        self.push(value, Op::Exp(x), &[x])
    }

    /// `u · σ(u)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::silu(v)).collect();
        let value = Tensor::new(self.shape(x), out).unwrap();
        self.push(value, Op::Silu(x), &[x])
    }

    /// `log(1 + exp(u))`, linear above 20.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::softplus(v)).collect();
        let value = Tensor::new(self.shape(x), out).unwrap();
        self.push(value, Op::Softplus(x), &[x])
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::shape("rmsnorm", &xs, self.shape(gain)))?;
        if self.shape(gain) != [d] {
            return Err(Error::shape("rmsnorm", &xs, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("rmsnorm eps must be positive".into()));
        }
        let eps = real::<T>(eps);
        let dt = real::<T>(d as f64);
        let g = self.data(gain);
        let xd = self.data(x);
        let rows = xd.len() / d.max(1);
        let mut out = vec![T::zero(); xd.len()];
        let mut inv = vec![T::zero(); rows];
        out.par_chunks_mut(d)
            .zip(inv.par_iter_mut())
            .zip(xd.par_chunks(d))
            .for_each(|((o, r), row)| {
                let ms = row.iter().map(|&v| v * v).sum::<T>() / dt;
                let ir = (ms + eps).sqrt().recip();
                *r = ir;
                for ((o, &v), &gg) in o.iter_mut().zip(row).zip(g) {
                    *o = v * ir * gg;
                }
            });
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            Op::RmsNorm {
                x,
                gain,
                inv_rms: inv,
            },
            &[x, gain],
        ))
    }

    /// Mean-centering layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::shape("layernorm", &xs, self.shape(gain)))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layernorm", &xs, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layernorm eps must be positive".into()));
        }
        let eps = real::<T>(eps);
        let dt = real::<T>(d as f64);
        let (g, bb, xd) = (self.data(gain), self.data(bias), self.data(x));
        let rows = xd.len() / d.max(1);
        let mut out = vec![T::zero(); xd.len()];
        let mut means = vec![T::zero(); rows];
        let mut invs = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let inv = (var + eps).sqrt().recip();
            means[r] = mean;
            invs[r] = inv;
            for i in 0..d {
                out[r * d + i] = (row[i] - mean) * inv * g[i] + bb[i];
            }
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                inv_std: invs,
            },
            &[x, gain, bias],
        ))
    }

    /// Depthwise causal convolution over the length axis of `x(B, L, E)`.
    ///
    /// Tap `j` of `kernel(E, k)` multiplies the input `j` steps in the past,
    /// so a kernel of `(1, 0, ..., 0)` is the identity.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 2 || ks[0] != xs[2] || self.shape(bias) != [xs[2]] {
            return Err(Error::shape("causal_conv1d", &xs, &ks));
        }
        let out = kernels::causal_conv_forward(
            self.data(x),
            self.data(kernel),
            self.data(bias),
            &xs,
            ks[1],
        );
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            Op::CausalConv { x, kernel, bias },
            &[x, kernel, bias],
        ))
    }

    // ---- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start > end || end > xs[axis] {
            return Err(Error::shape("slice", &xs, &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let width = end - start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = xs;
        shape[axis] = width;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.data(v);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len()
            || axes
                .iter()
                .any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", &xs, axes));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let out = kernels::permute(self.data(x), &xs, axes);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Select rows of `x(B, L, D)` per batch element: `index` holds `B·L'`
    /// entries in `[0, L)`, producing `(B, L', D)`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3
            || (xs[0] == 0 && !index.is_empty())
            || (xs[0] > 0 && !index.len().is_multiple_of(xs[0]))
        {
            return Err(Error::shape("gather_rows", &xs, &[index.len()]));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let per = if b == 0 { 0 } else { index.len() / b };
        if let Some(&bad) = index.iter().find(|&&i| i >= l) {
            return Err(Error::shape("gather_rows", &xs, &[bad]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(b * per * d);
        for bi in 0..b {
            for &r in &index[bi * per..(bi + 1) * per] {
                let off = (bi * l + r) * d;
                out.extend_from_slice(&src[off..off + d]);
            }
        }
        let value = Tensor::new(&[b, per, d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Repeat `x` over new leading axes.
    pub fn broadcast_leading(&mut self, x: Var, leading: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let reps: usize = leading.iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(reps * src.len());
        for _ in 0..reps {
            out.extend_from_slice(src);
        }
        let shape: Vec<usize> = leading.iter().chain(&xs).copied().collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::BroadcastLeading(x), &[x]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, _) = self.reduce_axis("sum", x, axis)?;
        Ok(self.push(value, Op::Sum { x, axis }, &[x]))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (mut value, len) = self.reduce_axis("mean", x, axis)?;
        let inv = real::<T>(1.0 / len.max(1) as f64);
        value.data_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(Tensor<T>, usize)> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(op, &xs, &[axis]));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        Ok((Tensor::new(&shape, out)?, len))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.data(x).iter().copied().sum::<T>() / real::<T>(n as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    // ---- losses ----------------------------------------------------------

    /// Mean softmax cross-entropy of `logits(B, C)` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", &ls, &[labels.len()]));
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = kernels::softmax_rows(self.data(logits), c);
        let mut loss = T::zero();
        for (row, &y) in labels.iter().enumerate() {
            let logits_row = &self.data(logits)[row * c..(row + 1) * c];
            loss += kernels::logsumexp(logits_row) - logits_row[y];
        }
        let n = real::<T>(labels.len() as f64);
        loss = loss / n;
        if !self.grad_enabled {
            probs.clear();
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared error between `pred` and a constant `target`, averaged
    /// over elements where `mask` is set (all elements when `None`). An empty
    /// selection yields zero.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>, mask: Option<&[bool]>) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps != target.shape() {
            return Err(Error::shape("mse", &ps, target.shape()));
        }
        if let Some(m) = mask {
            if m.len() != target.numel() {
                return Err(Error::shape("mse mask", &ps, &[m.len()]));
            }
        }
        let p = self.data(pred);
        let mut acc = T::zero();
        let mut count = 0usize;
        for (i, (&a, &b)) in p.iter().zip(target.data()).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                acc += (a - b) * (a - b);
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            acc / real::<T>(count as f64)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                mask: mask.map(|m| m.to_vec()),
                count,
            },
            &[pred],
        ))
    }

    // ---- state space ----------------------------------------------------

    /// Selective scan with zero-order-hold discretization folded in.
    ///
    /// Shapes: `x, delta: (B, L, E)`, `a: (E, N)`, `b, c: (B, L, N)`.
    /// Per lane `(b, e)`: `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t`,
    /// `y_t = C_t · h_t`, `h_0 = 0`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let as_ = self.shape(a).to_vec();
        if xs.len() != 3 || self.shape(delta) != xs.as_slice() || as_.len() != 2 || as_[0] != xs[2]
        {
            return Err(Error::shape("selective_scan", &xs, &as_));
        }
        let bn = [xs[0], xs[1], as_[1]];
        if self.shape(b) != bn || self.shape(c) != bn {
            return Err(Error::shape("selective_scan", &bn, self.shape(b)));
        }
        let dims = kernels::ScanDims {
            batch: xs[0],
            len: xs[1],
            width: xs[2],
            state: as_[1],
        };
        let keep = self.grad_enabled && [x, delta, a, b, c].iter().any(|&v| self.needs(v));
        let (y, states) = kernels::scan_forward(
            dims,
            self.data(x),
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            keep,
        );
        let value = Tensor::new(&xs, y)?;
        Ok(self.push(
            value,
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                states,
            },
            &[x, delta, a, b, c],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: Vec::new(),
        };
        if !self.needs(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.needs_grad {
                    let t = Tensor::new(node.value.shape(), g)?;
                    if let Some(pid) = node.param {
                        out.params.push((pid, Var(i)));
                    }
                    out.leaves.insert(i, t);
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(out)
    }

    /// Backward followed by accumulation into the parameter store.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = self.value(*x).numel() / k.max(1);
                if self.needs(*x) {
                    // dX(m×k) = dY(m×n) · Wᵀ
                    let mut dx = vec![T::zero(); m * k];
                    kernels::gemm_rows(
                        m,
                        n,
                        k,
                        g,
                        n as isize,
                        1,
                        self.data(*w),
                        1,
                        n as isize,
                        &mut dx,
                    );
                    self.accum(grads, *x, dx);
                }
                if self.needs(*w) {
                    // dW(k×n) = Xᵀ(k×m) · dY(m×n)
                    let mut dw = vec![T::zero(); k * n];
                    kernels::gemm_rows(
                        k,
                        m,
                        n,
                        self.data(*x),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        &mut dw,
                    );
                    self.accum(grads, *w, dw);
                }
            }
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.needs(v) {
                        let gv = kernels::reduce_to(g, self.value(v).numel());
                        self.accum(grads, v, gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (&v, &other) in [(a, b), (b, a)] {
                    if !self.needs(v) {
                        continue;
                    }
                    let od = self.data(other);
                    let op = od.len().max(1);
                    let vd_len = self.value(v).numel();
                    let full: Vec<T> = if od.len() == g.len() {
                        g.iter().zip(od).map(|(&gg, &o)| gg * o).collect()
                    } else {
                        g.iter()
                            .enumerate()
                            .map(|(j, &gg)| gg * od[j % op])
                            .collect()
                    };
                    self.accum(grads, v, kernels::reduce_to(&full, vd_len));
                }
            }
            Op::Scale(x, c) => {
                self.accum(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::Neg(x) => {
                self.accum(grads, *x, g.iter().map(|&v| -v).collect());
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.accum(
                    grads,
                    *x,
                    g.iter().zip(y).map(|(&gg, &yy)| gg * yy).collect(),
                );
            }
            Op::Silu(x) => {
                let d = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&u, &gg)| {
                        let s = kernels::sigmoid(u);
                        gg * s * (T::one() + u * (T::one() - s))
                    })
                    .collect();
                self.accum(grads, *x, d);
            }
            Op::Softplus(x) => {
                let d = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&u, &gg)| gg * kernels::sigmoid(u))
                    .collect();
                self.accum(grads, *x, d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let gd = self.data(*gain);
                let xd = self.data(*x);
                let d = gd.len();
                let dt = real::<T>(d as f64);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    dx.par_chunks_mut(d)
                        .zip(xd.par_chunks(d))
                        .zip(g.par_chunks(d))
                        .zip(inv_rms.par_iter())
                        .for_each(|(((dxr, xr), gr), &r)| {
                            let dot = (0..d).map(|j| gr[j] * gd[j] * xr[j]).sum::<T>();
                            let coef = r * r * r * dot / dt;
                            for j in 0..d {
                                dxr[j] = r * gd[j] * gr[j] - xr[j] * coef;
                            }
                        });
                    self.accum(grads, *x, dx);
                }
                if self.needs(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for ((xr, gr), &r) in xd.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j] * r;
                        }
                    }
                    self.accum(grads, *gain, dg);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let gd = self.data(*gain);
                let xd = self.data(*x);
                let d = gd.len();
                let dt = real::<T>(d as f64);
                let mut dx = vec![T::zero(); xd.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for r in 0..mean.len() {
                    let (m, inv) = (mean[r], inv_std[r]);
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut sum_gh = T::zero();
                    let mut sum_gh_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (xr[j] - m) * inv;
                        let gh = gr[j] * gd[j];
                        sum_gh += gh;
                        sum_gh_xhat += gh * xhat;
                        dg[j] += gr[j] * xhat;
                        db[j] += gr[j];
                    }
                    for j in 0..d {
                        let xhat = (xr[j] - m) * inv;
                        dx[r * d + j] =
                            inv * (gr[j] * gd[j] - sum_gh / dt - xhat * sum_gh_xhat / dt);
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *gain, dg);
                self.accum(grads, *bias, db);
            }
            Op::CausalConv { x, kernel, bias } => {
                let xs = self.shape(*x);
                let k = self.shape(*kernel)[1];
                let (dx, dk, db) =
                    kernels::causal_conv_backward(self.data(*x), self.data(*kernel), g, xs, k);
                self.accum(grads, *x, dx);
                self.accum(grads, *kernel, dk);
                self.accum(grads, *bias, db);
            }
            Op::Reshape(x) => self.accum(grads, *x, g.to_vec()),
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = split_axis(xs, *axis);
                let width = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    dx[dst..dst + width * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                self.accum(grads, *x, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[s..s + len * inner]);
                        }
                        self.accum(grads, v, dv);
                    }
                    offset += len;
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let dx = kernels::permute(g, node.value.shape(), &inverse);
                self.accum(grads, *x, dx);
            }
            Op::GatherRows { x, index } => {
                let xs = self.shape(*x);
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                let per = if b == 0 { 0 } else { index.len() / b };
                let mut dx = vec![T::zero(); b * l * d];
                for bi in 0..b {
                    for (j, &r) in index[bi * per..(bi + 1) * per].iter().enumerate() {
                        let src = (bi * per + j) * d;
                        let dst = (bi * l + r) * d;
                        for c in 0..d {
                            dx[dst + c] += g[src + c];
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::BroadcastLeading(x) => {
                let n = self.value(*x).numel();
                self.accum(grads, *x, kernels::reduce_to(g, n));
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = split_axis(xs, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    real::<T>(1.0 / len.max(1) as f64)
                } else {
                    T::one()
                };
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accum(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / real::<T>(n.max(1) as f64);
                self.accum(grads, *x, vec![v; n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / real::<T>(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &y) in labels.iter().enumerate() {
                    dl[row * c + y] -= scale;
                }
                self.accum(grads, *logits, dl);
            }
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                let p = self.data(*pred);
                let mut dp = vec![T::zero(); p.len()];
                if *count > 0 {
                    let scale = real::<T>(2.0) * g[0] / real::<T>(*count as f64);
                    for (i, d) in dp.iter_mut().enumerate() {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            *d = (p[i] - target[i]) * scale;
                        }
                    }
                }
                self.accum(grads, *pred, dp);
            }
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                states,
            } => {
                let xs = self.shape(*x);
                let dims = kernels::ScanDims {
                    batch: xs[0],
                    len: xs[1],
                    width: xs[2],
                    state: self.shape(*a)[1],
                };
                let sg = kernels::scan_backward(
                    dims,
                    self.data(*x),
                    self.data(*delta),
                    self.data(*a),
                    self.data(*b),
                    self.data(*c),
                    states,
                    g,
                );
                self.accum(grads, *x, sg.dx);
                self.accum(grads, *delta, sg.ddelta);
                self.accum(grads, *a, sg.da);
                self.accum(grads, *b, sg.db);
                self.accum(grads, *c, sg.dc);
            }
        }
    }
}

/// Gradients of every gradient-tracking leaf reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Add parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(pid, var) in &self.params {
            if let Some(g) = self.leaves.get(&var.0) {
                let p = store.get_mut(pid);
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b);
            }
        }
    }
}
