//! Forward and backward passes of the network primitives on single samples
//! laid out as `(channels, height, width)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorF;

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, all row-major unless
/// the matching `*_t` flag asks for the transpose of a stored matrix.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index reached through these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn kernel_dims(x: &TensorF, kernel: &TensorF) -> Result<(usize, usize, usize, usize, usize)> {
    let (cin, h, w) = x.chw()?;
    let (cout, kcin, kh, kw) = match kernel.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return Err(Error::Dimension(format!("kernel must be rank 4, got {s:?}"))),
    };
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Dimension(format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    Ok((cin, h, w, cout, kh))
}

/// Unfolds zero-padded `k x k` neighbourhoods into a `(cin*k*k, h*w)` matrix.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut col = vec![0.0; cin * k * k * hw];
    for i in 0..cin {
        let plane = &x[i * hw..(i + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((i * k + ky) * k + kx) * hw..][..hw];
                let (c0, c1) = (pad.saturating_sub(kx), (w + pad).saturating_sub(kx).min(w));
                for r in 0..h {
                    let sr = r + ky;
                    if sr < pad || sr - pad >= h || c0 >= c1 {
                        continue;
                    }
                    let src = &plane[(sr - pad) * w..][..w];
                    row[r * w + c0..r * w + c1].copy_from_slice(&src[c0 + kx - pad..c1 + kx - pad]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for i in 0..cin {
        let plane = &mut x[i * hw..(i + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((i * k + ky) * k + kx) * hw..][..hw];
                let (c0, c1) = (pad.saturating_sub(kx), (w + pad).saturating_sub(kx).min(w));
                for r in 0..h {
                    let sr = r + ky;
                    if sr < pad || sr - pad >= h || c0 >= c1 {
                        continue;
                    }
                    let dst = &mut plane[(sr - pad) * w..][..w];
                    for (d, s) in dst[c0 + kx - pad..c1 + kx - pad]
                        .iter_mut()
                        .zip(&row[r * w + c0..r * w + c1])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 cross-correlation with `k/2` zero padding, so spatial extents are
/// preserved. `kernel` is `(cout, cin, k, k)` with odd `k`; `bias` is `(cout)`.
pub fn conv2d_fwd(x: &TensorF, kernel: &TensorF, bias: &TensorF) -> Result<TensorF> {
    let (cin, h, w, cout, k) = kernel_dims(x, kernel)?;
    if bias.shape() != [cout] {
        return Err(Error::Dimension(format!(
            "bias must have shape [{cout}], got {:?}",
            bias.shape()
        )));
    }
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    let col = if k == 1 {
        x.data().to_vec()
    } else {
        im2col(x.data(), cin, h, w, k)
    };
    gemm(cout, cin * k * k, hw, kernel.data(), false, &col, false, 1.0, &mut out);
    TensorF::from_vec(&[cout, h, w], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the input gradient was not requested.
    pub dx: Option<TensorF>,
    pub dkernel: TensorF,
    pub dbias: TensorF,
}

/// Gradients of a scalar loss through [`conv2d_fwd`] given `dy = dL/dy`.
pub fn conv2d_bwd(x: &TensorF, kernel: &TensorF, dy: &TensorF, need_dx: bool) -> Result<ConvGrads> {
    let (cin, h, w, cout, k) = kernel_dims(x, kernel)?;
    if dy.shape() != [cout, h, w] {
        return Err(Error::Dimension(format!(
            "upstream gradient {:?} does not match output [{cout}, {h}, {w}]",
            dy.shape()
        )));
    }
    let hw = h * w;
    let kk = cin * k * k;
    let col = if k == 1 {
        x.data().to_vec()
    } else {
        im2col(x.data(), cin, h, w, k)
    };
    let mut dk = vec![0.0; cout * kk];
    gemm(cout, hw, kk, dy.data(), false, &col, true, 0.0, &mut dk);
    let db = dy.data().chunks_exact(hw).map(|c| c.iter().sum()).collect();
    let dx = if need_dx {
        let mut dcol = vec![0.0; kk * hw];
        gemm(kk, cout, hw, kernel.data(), true, dy.data(), false, 0.0, &mut dcol);
        let dx = if k == 1 { dcol } else { col2im(&dcol, cin, h, w, k) };
        Some(TensorF::from_vec(&[cin, h, w], dx)?)
    } else {
        None
    };
    Ok(ConvGrads {
        dx,
        dkernel: TensorF::from_vec(kernel.shape(), dk)?,
        dbias: TensorF::from_vec(&[cout], db)?,
    })
}

pub fn relu_fwd(x: &TensorF) -> TensorF {
    x.map(|v| v.max(0.0))
}

/// Routes `dy` through the rectifier whose pre-activation was `pre`.
pub fn relu_bwd(pre: &TensorF, dy: &TensorF) -> TensorF {
    let data = pre
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    TensorF::from_vec(pre.shape(), data).expect("same shape as pre-activation")
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 2x2 max pooling with stride 2. Also returns, for every output element, the
/// flat input index that won (first maximum in row-major window order).
pub fn maxpool2_fwd(x: &TensorF) -> Result<(TensorF, Vec<usize>)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "max pooling needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let base = ch * h * w + 2 * r * w + 2 * col;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((TensorF::from_vec(&[c, oh, ow], out)?, argmax))
}

pub fn maxpool2_bwd(dy: &TensorF, argmax: &[usize], input_shape: &[usize]) -> Result<TensorF> {
    if dy.len() != argmax.len() {
        return Err(Error::Dimension(format!(
            "{} upstream values for {} pooled positions",
            dy.len(),
            argmax.len()
        )));
    }
    let mut dx = TensorF::zeros(input_shape);
    let buf = dx.data_mut();
    for (&g, &i) in dy.data().iter().zip(argmax) {
        buf[i] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_fwd(x: &TensorF) -> Result<TensorF> {
    let (c, h, w) = x.chw()?;
    let src = x.data();
    let mut out = vec![0.0; c * 4 * h * w];
    let ow = 2 * w;
    for ch in 0..c {
        for r in 0..2 * h {
            let s = &src[ch * h * w + (r / 2) * w..][..w];
            let d = &mut out[ch * 4 * h * w + r * ow..][..ow];
            for (col, v) in d.iter_mut().enumerate() {
                *v = s[col / 2];
            }
        }
    }
    TensorF::from_vec(&[c, 2 * h, 2 * w], out)
}

/// Sums each 2x2 block of `dy` back onto its source pixel.
pub fn upsample2_bwd(dy: &TensorF) -> Result<TensorF> {
    let (c, h2, w2) = dy.chw()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::Dimension(format!(
            "upsampled gradient must have even extents, got {h2}x{w2}"
        )));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let src = dy.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for r in 0..h2 {
            let s = &src[ch * h2 * w2 + r * w2..][..w2];
            let d = &mut out[ch * h * w + (r / 2) * w..][..w];
            for (col, v) in s.iter().enumerate() {
                d[col / 2] += v;
            }
        }
    }
    TensorF::from_vec(&[c, h, w], out)
}

/// How a decoder stage joins the upsampled path with its encoder skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    /// Elementwise sum (Link-shape).
    Add,
    /// Channel concatenation, skip first (U-shape).
    Concat,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(MergeMode::Add),
            "concat" => Ok(MergeMode::Concat),
            other => Err(Error::Data(format!("unknown merge mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for MergeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeMode::Add => "add",
            MergeMode::Concat => "concat",
        })
    }
}

pub fn merge_fwd(skip: &TensorF, up: &TensorF, mode: MergeMode) -> Result<TensorF> {
    let (cs, h, w) = skip.chw()?;
    let (cu, hu, wu) = up.chw()?;
    match mode {
        MergeMode::Add => {
            skip.ensure_same_shape(up)?;
            let data = skip.data().iter().zip(up.data()).map(|(a, b)| a + b).collect();
            TensorF::from_vec(skip.shape(), data)
        }
        MergeMode::Concat => {
            if (h, w) != (hu, wu) {
                return Err(Error::Dimension(format!(
                    "cannot concatenate {h}x{w} with {hu}x{wu}"
                )));
            }
            let mut data = Vec::with_capacity((cs + cu) * h * w);
            data.extend_from_slice(skip.data());
            data.extend_from_slice(up.data());
            TensorF::from_vec(&[cs + cu, h, w], data)
        }
    }
}

/// Splits the merged gradient into `(d_skip, d_up)`.
pub fn merge_bwd(dy: &TensorF, mode: MergeMode, skip_channels: usize) -> Result<(TensorF, TensorF)> {
    let (c, h, w) = dy.chw()?;
    match mode {
        MergeMode::Add => Ok((dy.clone(), dy.clone())),
        MergeMode::Concat => {
            if skip_channels == 0 || skip_channels >= c {
                return Err(Error::Dimension(format!(
                    "cannot split {c} channels at {skip_channels}"
                )));
            }
            let (a, b) = dy.data().split_at(skip_channels * h * w);
            Ok((
                TensorF::from_vec(&[skip_channels, h, w], a.to_vec())?,
                TensorF::from_vec(&[c - skip_channels, h, w], b.to_vec())?,
            ))
        }
    }
}
