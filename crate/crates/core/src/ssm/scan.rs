//! Value-level discretization and scan, plus the convolutional reference
//! used to check the recurrence on time-invariant inputs.

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

fn dims3(t: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::shape(op, t.shape(), &[0, 0, 0])),
    }
}

/// Zero-order-hold discretization.
///
/// `Ā[b,l,e,n] = exp(Δ[b,l,e]·A[e,n])`, `B̄[b,l,e,n] = Δ[b,l,e]·B[b,l,n]`.
pub fn discretize<T: Real>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b_in: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bs, l, e) = dims3(delta, "discretize")?;
    let n = match *a.shape() {
        [ae, n] if ae == e => n,
        _ => return Err(Error::shape("discretize", delta.shape(), a.shape())),
    };
    if b_in.shape() != [bs, l, n] {
        return Err(Error::shape("discretize", a.shape(), b_in.shape()));
    }
    let mut abar = Vec::with_capacity(bs * l * e * n);
    let mut bbar = Vec::with_capacity(bs * l * e * n);
    for bl in 0..bs * l {
        for ch in 0..e {
            let dt = delta.data()[bl * e + ch];
            for s in 0..n {
                abar.push((dt * a.data()[ch * n + s]).exp());
                bbar.push(dt * b_in.data()[bl * n + s]);
            }
        }
    }
    let shape = [bs, l, e, n];
    Ok((Tensor::new(&shape, abar)?, Tensor::new(&shape, bbar)?))
}

/// Sequential recurrence `h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t`, `y_t = C_t · h_t`
/// with `h_0 = 0`, independently per `(batch, channel)` lane.
pub fn selective_scan<T: Real>(
    abar: &Tensor<T>,
    bbar: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (bs, l, e) = dims3(x, "selective_scan")?;
    let n = *abar.shape().last().unwrap_or(&0);
    let four = [bs, l, e, n];
    if abar.shape() != four || bbar.shape() != four {
        return Err(Error::shape("selective_scan", &four, abar.shape()));
    }
    if c.shape() != [bs, l, n] {
        return Err(Error::shape("selective_scan", &[bs, l, n], c.shape()));
    }
    let mut y = vec![T::zero(); bs * l * e];
    let mut h = vec![T::zero(); e * n];
    for b in 0..bs {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..l {
            let bl = b * l + t;
            for ch in 0..e {
                let xv = x.data()[bl * e + ch];
                let mut acc = T::zero();
                for s in 0..n {
                    let i = (bl * e + ch) * n + s;
                    let hs = &mut h[ch * n + s];
                    *hs = abar.data()[i] * *hs + bbar.data()[i] * xv;
                    acc += c.data()[bl * n + s] * *hs;
                }
                y[bl * e + ch] = acc;
            }
        }
    }
    Tensor::new(&[bs, l, e], y)
}

/// Convolutional form of a time-invariant SSM: materializes
/// `K̄ = (CB̄, CĀB̄, …, CĀ^{L-1}B̄)` per channel and computes `y = x * K̄`.
///
/// Reference implementation; rejects inputs whose `Ā`, `B̄` or `C` vary along
/// the length axis.
pub fn ssm_conv_oracle<T: Real>(
    abar: &Tensor<T>,
    bbar: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (bs, l, e) = dims3(x, "ssm_conv_oracle")?;
    let n = *abar.shape().last().unwrap_or(&0);
    let four = [bs, l, e, n];
    if abar.shape() != four || bbar.shape() != four || c.shape() != [bs, l, n] {
        return Err(Error::shape("ssm_conv_oracle", &four, abar.shape()));
    }
    let row = e * n;
    for b in 0..bs {
        for t in 1..l {
            let first = (b * l) * row;
            let cur = (b * l + t) * row;
            let varies = abar.data()[first..first + row] != abar.data()[cur..cur + row]
                || bbar.data()[first..first + row] != bbar.data()[cur..cur + row]
                || c.data()[b * l * n..(b * l + 1) * n]
                    != c.data()[(b * l + t) * n..(b * l + t + 1) * n];
            if varies {
                return Err(Error::Contract(
                    "convolutional form needs time-invariant parameters".into(),
                ));
            }
        }
    }
    let mut y = vec![T::zero(); bs * l * e];
    for b in 0..bs {
        let base = b * l * row;
        let cb = &c.data()[b * l * n..(b * l + 1) * n];
        for ch in 0..e {
            let ab = &abar.data()[base + ch * n..base + (ch + 1) * n];
            let bb = &bbar.data()[base + ch * n..base + (ch + 1) * n];
            // kernel[j] = Σ_n C[n] Ā[n]^j B̄[n]
            let mut kernel = vec![T::zero(); l];
            let mut power: Vec<T> = bb.to_vec();
            for k in kernel.iter_mut() {
                *k = cb.iter().zip(&power).map(|(&cc, &p)| cc * p).sum();
                power.iter_mut().zip(ab).for_each(|(p, &a)| *p *= a);
            }
            for t in 0..l {
                let mut acc = T::zero();
                for j in 0..=t {
                    acc += kernel[j] * x.data()[(b * l + t - j) * e + ch];
                }
                y[(b * l + t) * e + ch] = acc;
            }
        }
    }
    Tensor::new(&[bs, l, e], y)
}
