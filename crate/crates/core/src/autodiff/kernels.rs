//! Raw loops behind the graph operations.

use rayon::prelude::*;

use super::tensor::Real;

/// Rows per parallel GEMM task. Fixed so results do not depend on the
/// number of worker threads.
const GEMM_ROW_CHUNK: usize = 64;
/// Channels per parallel scan task.
const SCAN_LANE_CHUNK: usize = 32;

/// `c(m×n) += a · b` with `a` addressed through `(rsa, csa)` strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rows<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    if m * k * n < 1 << 16 || m <= GEMM_ROW_CHUNK {
        T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, T::one(), c);
        return;
    }
    c.par_chunks_mut(GEMM_ROW_CHUNK * n)
        .enumerate()
        .for_each(|(chunk, out)| {
            let row0 = chunk * GEMM_ROW_CHUNK;
            let rows = out.len() / n;
            let start = row0 as isize * rsa;
            T::gemm(
                rows,
                k,
                n,
                &a[start as usize..],
                rsa,
                csa,
                b,
                rsb,
                csb,
                T::one(),
                out,
            );
        });
}

#[inline]
pub(crate) fn sigmoid<T: Real>(u: T) -> T {
    if u >= T::zero() {
        (T::one() + (-u).exp()).recip()
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn silu<T: Real>(u: T) -> T {
    u * sigmoid(u)
}

#[inline]
pub(crate) fn softplus<T: Real>(u: T) -> T {
    if u > T::from_f64c(20.0) {
        u
    } else {
        u.exp().ln_1p()
    }
}

pub(crate) fn logsumexp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (o, row) in out.chunks_mut(cols).zip(x.chunks(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in o.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        o.iter_mut().for_each(|v| *v = *v / z);
    }
    out
}

/// Sum `g` over repeated leading blocks of length `n`.
pub(crate) fn reduce_to<T: Real>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    if n == 0 {
        return out;
    }
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

pub(crate) fn permute<T: Real>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// `y[b,t,e] = bias[e] + Σ_j kernel[e,j] · x[b,t-j,e]`.
pub(crate) fn causal_conv_forward<T: Real>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    shape: &[usize],
    k: usize,
) -> Vec<T> {
    let (l, e) = (shape[1], shape[2]);
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(l * e.max(1))
        .zip(x.par_chunks(l * e.max(1)))
        .for_each(|(y, xb)| {
            for t in 0..l {
                let yr = &mut y[t * e..(t + 1) * e];
                yr.copy_from_slice(bias);
                for j in 0..k.min(t + 1) {
                    let xr = &xb[(t - j) * e..(t - j + 1) * e];
                    for c in 0..e {
                        yr[c] += kernel[c * k + j] * xr[c];
                    }
                }
            }
        });
    out
}

pub(crate) fn causal_conv_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    g: &[T],
    shape: &[usize],
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, l, e) = (shape[0], shape[1], shape[2]);
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); e];
    for bi in 0..b {
        let base = bi * l * e;
        for t in 0..l {
            let gr = &g[base + t * e..base + (t + 1) * e];
            for c in 0..e {
                db[c] += gr[c];
            }
            for j in 0..k.min(t + 1) {
                let src = base + (t - j) * e;
                for c in 0..e {
                    dx[src + c] += kernel[c * k + j] * gr[c];
                    dk[c * k + j] += gr[c] * x[src + c];
                }
            }
        }
    }
    (dx, dk, db)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub width: usize,
    pub state: usize,
}

impl ScanDims {
    fn tasks(&self) -> Vec<(usize, usize, usize)> {
        let mut tasks = Vec::new();
        for b in 0..self.batch {
            let mut e0 = 0;
            while e0 < self.width {
                let e1 = (e0 + SCAN_LANE_CHUNK).min(self.width);
                tasks.push((b, e0, e1));
                e0 = e1;
            }
        }
        tasks
    }
}

/// Forward recurrence. Returns `y(B,L,E)` and, when `keep` is set, every
/// hidden state laid out per task as `(t, lane, n)` blocks.
pub(crate) fn scan_forward<T: Real>(
    dims: ScanDims,
    x: &[T],
    delta: &[T],
    a: &[T],
    bm: &[T],
    cm: &[T],
    keep: bool,
) -> (Vec<T>, Vec<T>) {
    let ScanDims {
        len: l,
        width: e,
        state: n,
        ..
    } = dims;
    let tasks = dims.tasks();
    let results: Vec<(Vec<T>, Vec<T>)> = tasks
        .par_iter()
        .map(|&(b, e0, e1)| {
            let w = e1 - e0;
            let mut h = vec![T::zero(); w * n];
            let mut y = vec![T::zero(); l * w];
            let mut states = if keep {
                Vec::with_capacity(l * w * n)
            } else {
                Vec::new()
            };
            for t in 0..l {
                let row = (b * l + t) * e;
                let bt = &bm[(b * l + t) * n..(b * l + t + 1) * n];
                let ct = &cm[(b * l + t) * n..(b * l + t + 1) * n];
                for (lane, ch) in (e0..e1).enumerate() {
                    let dt = delta[row + ch];
                    let xv = x[row + ch];
                    let ar = &a[ch * n..(ch + 1) * n];
                    let hr = &mut h[lane * n..(lane + 1) * n];
                    let mut acc = T::zero();
                    for s in 0..n {
                        let decay = (dt * ar[s]).exp();
                        hr[s] = decay * hr[s] + dt * bt[s] * xv;
                        acc += ct[s] * hr[s];
                    }
                    y[t * w + lane] = acc;
                }
                if keep {
                    states.extend_from_slice(&h);
                }
            }
            (y, states)
        })
        .collect();

    let mut y = vec![T::zero(); dims.batch * l * e];
    let mut states = Vec::with_capacity(if keep { y.len() * n } else { 0 });
    for (&(b, e0, e1), (yc, sc)) in tasks.iter().zip(results) {
        let w = e1 - e0;
        for t in 0..l {
            let dst = (b * l + t) * e + e0;
            y[dst..dst + w].copy_from_slice(&yc[t * w..(t + 1) * w]);
        }
        states.extend(sc);
    }
    (y, states)
}

pub(crate) struct ScanGrads<T> {
    pub dx: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<T: Real>(
    dims: ScanDims,
    x: &[T],
    delta: &[T],
    a: &[T],
    bm: &[T],
    cm: &[T],
    states: &[T],
    dy: &[T],
) -> ScanGrads<T> {
    let ScanDims {
        batch,
        len: l,
        width: e,
        state: n,
    } = dims;
    let tasks = dims.tasks();
    struct Part<T> {
        dx: Vec<T>,
        ddelta: Vec<T>,
        da: Vec<T>,
        db: Vec<T>,
        dc: Vec<T>,
    }
    let parts: Vec<Part<T>> = tasks
        .par_iter()
        .map(|&(b, e0, e1)| {
            let w = e1 - e0;
            let st = &states[(b * e + e0) * l * n..(b * e + e1) * l * n];
            let mut carry = vec![T::zero(); w * n];
            let mut part = Part {
                dx: vec![T::zero(); l * w],
                ddelta: vec![T::zero(); l * w],
                da: vec![T::zero(); w * n],
                db: vec![T::zero(); l * n],
                dc: vec![T::zero(); l * n],
            };
            for t in (0..l).rev() {
                let row = (b * l + t) * e;
                let bt = &bm[(b * l + t) * n..(b * l + t + 1) * n];
                let ct = &cm[(b * l + t) * n..(b * l + t + 1) * n];
                for (lane, ch) in (e0..e1).enumerate() {
                    let dt = delta[row + ch];
                    let xv = x[row + ch];
                    let gy = dy[row + ch];
                    let ar = &a[ch * n..(ch + 1) * n];
                    let h_t = &st[(t * w + lane) * n..(t * w + lane + 1) * n];
                    let mut dx_acc = T::zero();
                    let mut ddt_acc = T::zero();
                    for s in 0..n {
                        let decay = (dt * ar[s]).exp();
                        let h_prev = if t > 0 {
                            st[((t - 1) * w + lane) * n + s]
                        } else {
                            T::zero()
                        };
                        let gh = gy * ct[s] + carry[lane * n + s];
                        part.dc[t * n + s] += gy * h_t[s];
                        let d_decay = gh * h_prev;
                        let d_input = gh * xv;
                        dx_acc += gh * dt * bt[s];
                        ddt_acc += d_decay * decay * ar[s] + d_input * bt[s];
                        part.da[lane * n + s] += d_decay * decay * dt;
                        part.db[t * n + s] += d_input * dt;
                        carry[lane * n + s] = decay * gh;
                    }
                    part.dx[t * w + lane] = dx_acc;
                    part.ddelta[t * w + lane] = ddt_acc;
                }
            }
            part
        })
        .collect();

    let mut out = ScanGrads {
        dx: vec![T::zero(); batch * l * e],
        ddelta: vec![T::zero(); batch * l * e],
        da: vec![T::zero(); e * n],
        db: vec![T::zero(); batch * l * n],
        dc: vec![T::zero(); batch * l * n],
    };
    for (&(b, e0, e1), part) in tasks.iter().zip(parts) {
        let w = e1 - e0;
        for t in 0..l {
            let dst = (b * l + t) * e + e0;
            out.dx[dst..dst + w].copy_from_slice(&part.dx[t * w..(t + 1) * w]);
            out.ddelta[dst..dst + w].copy_from_slice(&part.ddelta[t * w..(t + 1) * w]);
        }
        for (o, v) in out.da[e0 * n..e1 * n].iter_mut().zip(&part.da) {
            *o += *v;
        }
        let bo = b * l * n;
        for (o, v) in out.db[bo..bo + l * n].iter_mut().zip(&part.db) {
            *o += *v;
        }
        for (o, v) in out.dc[bo..bo + l * n].iter_mut().zip(&part.dc) {
            *o += *v;
        }
    }
    out
}
