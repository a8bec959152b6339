//! Forward and backward passes of the differentiable kernels.
//!
//! Every kernel is a pair of free functions over [`Tensor`]s so the same
//! arithmetic serves the training graph, offline inference and the
//! chunked streaming path. Row results never depend on the values of
//! other rows, which is what makes streaming/offline equality bit-exact.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Result};

#[inline]
fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub fn transpose<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for (j, &v) in m.row(i).iter().enumerate() {
            out[j * r + i] = v;
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose keeps element count")
}

fn expect_2d<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

// ---------------------------------------------------------------- affine

/// `y = x W + b` for `x: [n x in]`, `W: [in x out]`, `b: [out]`.
pub fn affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, i) = expect_2d("affine", x)?;
    let (wi, o) = expect_2d("affine", w)?;
    if wi != i {
        return Err(shape_err("affine", format!("x is {n}x{i}, W is {wi}x{o}")));
    }
    if let Some(b) = b {
        if b.len() != o {
            return Err(shape_err("affine", format!("bias has {} entries, expected {o}", b.len())));
        }
    }
    let mut out = vec![T::zero(); n * o];
    for r in 0..n {
        let acc = &mut out[r * o..(r + 1) * o];
        if let Some(b) = b {
            acc.copy_from_slice(b.data());
        }
        for (k, &xv) in x.row(r).iter().enumerate() {
            axpy(acc, xv, w.row(k));
        }
    }
    Tensor::new(vec![n, o], out)
}

pub struct AffineGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn affine_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> AffineGrads<T> {
    let (n, i, o) = (x.rows(), x.cols(), w.cols());
    let wt = transpose(w);
    let mut dx = vec![T::zero(); n * i];
    let mut dw = vec![T::zero(); i * o];
    let mut db = vec![T::zero(); o];
    for r in 0..n {
        let g = dy.row(r);
        let dxr = &mut dx[r * i..(r + 1) * i];
        for (k, &gv) in g.iter().enumerate() {
            axpy(dxr, gv, wt.row(k));
        }
        for (k, &xv) in x.row(r).iter().enumerate() {
            axpy(&mut dw[k * o..(k + 1) * o], xv, g);
        }
        axpy(&mut db, T::one(), g);
    }
    AffineGrads {
        dx: Tensor::new(vec![n, i], dx).unwrap(),
        dw: Tensor::new(vec![i, o], dw).unwrap(),
        db: Tensor::new(vec![o], db).unwrap(),
    }
}

// ---------------------------------------------------------------- conv1d

/// Temporal context of a 1-D convolution.
///
/// Tap `j` reads frame `t + (j - left) * dilation`. With `chunk = Some(c)`
/// the convolution is block-causal: a tap whose source frame lies in a
/// later chunk than `t` is skipped, exactly as if that frame were zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub left: usize,
    pub right: usize,
    pub dilation: usize,
    pub chunk: Option<usize>,
}

impl ConvSpec {
    pub fn new(left: usize, right: usize, dilation: usize) -> Self {
        Self { left, right, dilation: dilation.max(1), chunk: None }
    }

    pub fn chunked(self, chunk: Option<usize>) -> Self {
        Self { chunk, ..self }
    }

    pub fn taps(&self) -> usize {
        self.left + self.right + 1
    }

    /// Frames of history this layer needs before the first output frame.
    pub fn history(&self) -> usize {
        self.left * self.dilation
    }

    /// Frames of future this layer reads (before chunk masking).
    pub fn lookahead(&self) -> usize {
        self.right * self.dilation
    }

    #[inline]
    pub fn source(&self, t: usize, tap: usize, seq_len: usize) -> Option<usize> {
        let s = t as isize + (tap as isize - self.left as isize) * self.dilation as isize;
        if s < 0 || s as usize >= seq_len {
            return None;
        }
        let s = s as usize;
        match self.chunk {
            Some(c) if s / c > t / c => None,
            _ => Some(s),
        }
    }
}

fn check_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<usize> {
    expect_2d("conv1d", x)?;
    let ws = w.shape();
    if ws.len() != 3 || ws[0] != spec.taps() || ws[1] != x.cols() {
        return Err(shape_err(
            "conv1d",
            format!("weight {:?} incompatible with {} taps and {} inputs", ws, spec.taps(), x.cols()),
        ));
    }
    if let Some(b) = b {
        if b.len() != ws[2] {
            return Err(shape_err("conv1d", "bias length"));
        }
    }
    Ok(ws[2])
}

/// Computes output rows `rows` (absolute frame indices) of a convolution
/// over a sequence of total length `seq_len`, given the input frames
/// starting at absolute index `x_base`.
pub fn conv1d_rows<T: Real>(
    x: &Tensor<T>,
    x_base: usize,
    seq_len: usize,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
    rows: Range<usize>,
) -> Result<Tensor<T>> {
    let o = check_conv(x, w, b, spec)?;
    let i = x.cols();
    let n = rows.len();
    let mut out = vec![T::zero(); n * o];
    for (r, t) in rows.enumerate() {
        let acc = &mut out[r * o..(r + 1) * o];
        if let Some(b) = b {
            acc.copy_from_slice(b.data());
        }
        for tap in 0..spec.taps() {
            let Some(s) = spec.source(t, tap, seq_len) else { continue };
            if s < x_base || s - x_base >= x.rows() {
                return Err(shape_err("conv1d", format!("frame {s} not buffered (base {x_base})")));
            }
            let xr = x.row(s - x_base);
            let wbase = tap * i;
            for (k, &xv) in xr.iter().enumerate() {
                axpy(acc, xv, w.row_3d(wbase + k, o));
            }
        }
    }
    Tensor::new(vec![n, o], out)
}

pub fn conv1d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let t = x.rows();
    conv1d_rows(x, 0, t, w, b, spec, 0..t)
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv1d_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>, spec: &ConvSpec) -> ConvGrads<T> {
    let (t_len, i) = (x.rows(), x.cols());
    let o = w.shape()[2];
    let taps = spec.taps();
    // wt[tap][o][i]
    let mut wt = vec![T::zero(); taps * o * i];
    for tap in 0..taps {
        for k in 0..i {
            for (oo, &v) in w.row_3d(tap * i + k, o).iter().enumerate() {
                wt[(tap * o + oo) * i + k] = v;
            }
        }
    }
    let mut dx = vec![T::zero(); t_len * i];
    let mut dw = vec![T::zero(); taps * i * o];
    let mut db = vec![T::zero(); o];
    for t in 0..t_len {
        let g = dy.row(t);
        axpy(&mut db, T::one(), g);
        for tap in 0..taps {
            let Some(s) = spec.source(t, tap, t_len) else { continue };
            let dxr = &mut dx[s * i..(s + 1) * i];
            for (oo, &gv) in g.iter().enumerate() {
                let base = (tap * o + oo) * i;
                axpy(dxr, gv, &wt[base..base + i]);
            }
            for (k, &xv) in x.row(s).iter().enumerate() {
                let base = (tap * i + k) * o;
                axpy(&mut dw[base..base + o], xv, g);
            }
        }
    }
    ConvGrads {
        dx: Tensor::new(vec![t_len, i], dx).unwrap(),
        dw: Tensor::new(w.shape().to_vec(), dw).unwrap(),
        db: Tensor::new(vec![o], db).unwrap(),
    }
}

trait Row3d<T> {
    fn row_3d(&self, r: usize, width: usize) -> &[T];
}

impl<T: Real> Row3d<T> for Tensor<T> {
    #[inline]
    fn row_3d(&self, r: usize, width: usize) -> &[T] {
        &self.data()[r * width..(r + 1) * width]
    }
}

// ---------------------------------------------------- transposed conv1d

/// Transposed convolution (upsampling): input frame `t` writes
/// `x[t] . W[k]` to output position `t * stride + k - pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTSpec {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_transpose1d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvTSpec,
) -> Result<Tensor<T>> {
    let (t_len, i) = expect_2d("conv_transpose1d", x)?;
    let ws = w.shape();
    if ws.len() != 3 || ws[1] != i || spec.stride == 0 {
        return Err(shape_err("conv_transpose1d", format!("weight {ws:?} vs input width {i}")));
    }
    let (k_len, o) = (ws[0], ws[2]);
    let out_len = t_len * spec.stride;
    let mut out = vec![T::zero(); out_len * o];
    if let Some(b) = b {
        if b.len() != o {
            return Err(shape_err("conv_transpose1d", "bias length"));
        }
        for r in 0..out_len {
            out[r * o..(r + 1) * o].copy_from_slice(b.data());
        }
    }
    for t in 0..t_len {
        for k in 0..k_len {
            let pos = (t * spec.stride + k) as isize - spec.pad as isize;
            if pos < 0 || pos as usize >= out_len {
                continue;
            }
            let p = pos as usize;
            let acc = &mut out[p * o..(p + 1) * o];
            for (c, &xv) in x.row(t).iter().enumerate() {
                axpy(acc, xv, w.row_3d(k * i + c, o));
            }
        }
    }
    Tensor::new(vec![out_len, o], out)
}

pub fn conv_transpose1d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvTSpec,
) -> ConvGrads<T> {
    let (t_len, i) = (x.rows(), x.cols());
    let (k_len, o) = (w.shape()[0], w.shape()[2]);
    let out_len = dy.rows();
    let mut dx = vec![T::zero(); t_len * i];
    let mut dw = vec![T::zero(); k_len * i * o];
    let mut db = vec![T::zero(); o];
    for r in 0..out_len {
        axpy(&mut db, T::one(), dy.row(r));
    }
    for t in 0..t_len {
        for k in 0..k_len {
            let pos = (t * spec.stride + k) as isize - spec.pad as isize;
            if pos < 0 || pos as usize >= out_len {
                continue;
            }
            let g = dy.row(pos as usize);
            for (c, &xv) in x.row(t).iter().enumerate() {
                let wr = w.row_3d(k * i + c, o);
                let mut s = T::zero();
                for (a, b) in wr.iter().zip(g) {
                    s += *a * *b;
                }
                dx[t * i + c] += s;
                let base = (k * i + c) * o;
                axpy(&mut dw[base..base + o], xv, g);
            }
        }
    }
    ConvGrads {
        dx: Tensor::new(vec![t_len, i], dx).unwrap(),
        dw: Tensor::new(w.shape().to_vec(), dw).unwrap(),
        db: Tensor::new(vec![o], db).unwrap(),
    }
}

// ------------------------------------------------------------------- GRU

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Activations of one GRU step kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GruCache<T> {
    pub r: Tensor<T>,
    pub z: Tensor<T>,
    pub n: Tensor<T>,
    /// `U_n h + b_hn`, the recurrent part of the candidate gate.
    pub hn: Tensor<T>,
}

/// One GRU step. `xp` is the precomputed input projection `[r | z | n]`
/// (3H), `u` is `[H x 3H]`, `bhn` is the recurrent candidate bias.
/// Writes the new hidden state to `h_out` and the gate activations to
/// `gates` (`[r | z | n | hn]`, 4H).
pub fn gru_step<T: Real>(xp: &[T], h_prev: &[T], u: &Tensor<T>, bhn: &[T], h_out: &mut [T], gates: &mut [T]) {
    let h = h_prev.len();
    let mut hp = vec![T::zero(); 3 * h];
    for (k, &hv) in h_prev.iter().enumerate() {
        axpy(&mut hp, hv, u.row(k));
    }
    for j in 0..h {
        let r = sigmoid(xp[j] + hp[j]);
        let z = sigmoid(xp[h + j] + hp[h + j]);
        let hn = hp[2 * h + j] + bhn[j];
        let n = (xp[2 * h + j] + r * hn).tanh();
        h_out[j] = (T::one() - z) * n + z * h_prev[j];
        gates[j] = r;
        gates[h + j] = z;
        gates[2 * h + j] = n;
        gates[3 * h + j] = hn;
    }
}

/// Runs a GRU over a whole sequence from a zero initial state.
pub fn gru<T: Real>(xp: &Tensor<T>, u: &Tensor<T>, bhn: &Tensor<T>) -> Result<(Tensor<T>, GruCache<T>)> {
    let (t_len, c) = expect_2d("gru", xp)?;
    let h = u.rows();
    if u.shape() != [h, 3 * h] || c != 3 * h || bhn.len() != h {
        return Err(shape_err(
            "gru",
            format!("input {:?}, U {:?}, b_hn {:?}", xp.shape(), u.shape(), bhn.shape()),
        ));
    }
    let mut hs = vec![T::zero(); t_len * h];
    let mut cache = [vec![T::zero(); t_len * h], vec![T::zero(); t_len * h], vec![T::zero(); t_len * h], vec![
        T::zero();
        t_len * h
    ]];
    let mut prev = vec![T::zero(); h];
    let mut cur = vec![T::zero(); h];
    let mut gates = vec![T::zero(); 4 * h];
    for t in 0..t_len {
        gru_step(xp.row(t), &prev, u, bhn.data(), &mut cur, &mut gates);
        hs[t * h..(t + 1) * h].copy_from_slice(&cur);
        for (g, store) in cache.iter_mut().enumerate() {
            store[t * h..(t + 1) * h].copy_from_slice(&gates[g * h..(g + 1) * h]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let [r, z, n, hn] = cache;
    let mk = |v| Tensor::new(vec![t_len, h], v).unwrap();
    Ok((mk(hs), GruCache { r: mk(r), z: mk(z), n: mk(n), hn: mk(hn) }))
}

pub struct GruGrads<T> {
    pub dxp: Tensor<T>,
    pub du: Tensor<T>,
    pub dbhn: Tensor<T>,
}

pub fn gru_backward<T: Real>(hs: &Tensor<T>, cache: &GruCache<T>, u: &Tensor<T>, dh_seq: &Tensor<T>) -> GruGrads<T> {
    let (t_len, h) = (hs.rows(), hs.cols());
    let ut = transpose(u);
    let mut dxp = vec![T::zero(); t_len * 3 * h];
    let mut du = vec![T::zero(); h * 3 * h];
    let mut dbhn = vec![T::zero(); h];
    let mut dh_next = vec![T::zero(); h];
    let zeros = vec![T::zero(); h];
    let mut dhp = vec![T::zero(); 3 * h];
    for t in (0..t_len).rev() {
        let h_prev = if t == 0 { &zeros[..] } else { hs.row(t - 1) };
        let (r, z, n, hn) = (cache.r.row(t), cache.z.row(t), cache.n.row(t), cache.hn.row(t));
        let mut dh_prev = vec![T::zero(); h];
        for j in 0..h {
            let dh = dh_seq.row(t)[j] + dh_next[j];
            let dz = dh * (h_prev[j] - n[j]);
            let dn = dh * (T::one() - z[j]);
            dh_prev[j] = dh * z[j];
            let dn_pre = dn * (T::one() - n[j] * n[j]);
            let dr = dn_pre * hn[j];
            let dr_pre = dr * r[j] * (T::one() - r[j]);
            let dz_pre = dz * z[j] * (T::one() - z[j]);
            let dhn = dn_pre * r[j];
            dbhn[j] += dhn;
            let base = t * 3 * h;
            dxp[base + j] = dr_pre;
            dxp[base + h + j] = dz_pre;
            dxp[base + 2 * h + j] = dn_pre;
            dhp[j] = dr_pre;
            dhp[h + j] = dz_pre;
            dhp[2 * h + j] = dhn;
        }
        for (k, &hv) in h_prev.iter().enumerate() {
            axpy(&mut du[k * 3 * h..(k + 1) * 3 * h], hv, &dhp);
        }
        for (c, &g) in dhp.iter().enumerate() {
            axpy(&mut dh_prev, g, ut.row(c));
        }
        dh_next = dh_prev;
    }
    GruGrads {
        dxp: Tensor::new(vec![t_len, 3 * h], dxp).unwrap(),
        du: Tensor::new(vec![h, 3 * h], du).unwrap(),
        dbhn: Tensor::new(vec![h], dbhn).unwrap(),
    }
}

// ------------------------------------------------------------ layer norm

pub const LN_EPS: f64 = 1e-5;

/// Per-row normalization with learned gain and bias. Statistics are
/// accumulated in f64.
pub fn layer_norm<T: Real>(x: &Tensor<T>, g: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = expect_2d("layer_norm", x)?;
    if g.len() != d || b.len() != d {
        return Err(shape_err("layer_norm", "gain/bias width"));
    }
    let mut out = vec![T::zero(); n * d];
    for r in 0..n {
        let row = x.row(r);
        let (mean, inv) = row_stats(row);
        for j in 0..d {
            let xh = T::lit((row[j].f64() - mean) * inv);
            out[r * d + j] = xh * g.data()[j] + b.data()[j];
        }
    }
    Tensor::new(vec![n, d], out)
}

fn row_stats<T: Real>(row: &[T]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d;
    let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

pub fn layer_norm_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (x.rows(), x.cols());
    let mut dx = vec![T::zero(); n * d];
    let mut dg = vec![0f64; d];
    let mut db = vec![0f64; d];
    for r in 0..n {
        let row = x.row(r);
        let gy = dy.row(r);
        let (mean, inv) = row_stats(row);
        let xh: Vec<f64> = row.iter().map(|v| (v.f64() - mean) * inv).collect();
        let dxh: Vec<f64> = (0..d).map(|j| gy[j].f64() * g.data()[j].f64()).collect();
        let m1 = dxh.iter().sum::<f64>() / d as f64;
        let m2 = dxh.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = T::lit(inv * (dxh[j] - m1 - xh[j] * m2));
            dg[j] += gy[j].f64() * xh[j];
            db[j] += gy[j].f64();
        }
    }
    let to = |v: Vec<f64>| Tensor::new(vec![d], v.into_iter().map(T::lit).collect()).unwrap();
    (Tensor::new(vec![n, d], dx).unwrap(), to(dg), to(db))
}

// --------------------------------------------------------------- softmax

pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = expect_2d("softmax", x)?;
    let mut out = vec![T::zero(); n * d];
    for r in 0..n {
        let row = x.row(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()));
        let e: Vec<f64> = row.iter().map(|v| (v.f64() - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..d {
            out[r * d + j] = T::lit(e[j] / s);
        }
    }
    Tensor::new(vec![n, d], out)
}

pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (y.rows(), y.cols());
    let mut dx = vec![T::zero(); n * d];
    for r in 0..n {
        let (yr, gr) = (y.row(r), dy.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
        for j in 0..d {
            dx[r * d + j] = T::lit(yr[j].f64() * (gr[j].f64() - dot));
        }
    }
    Tensor::new(vec![n, d], dx).unwrap()
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`. Returns the loss and the softmax probabilities.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, d) = expect_2d("cross_entropy", logits)?;
    if labels.len() != n || labels.iter().any(|&l| l >= d) {
        return Err(shape_err("cross_entropy", format!("{} labels for {n} rows of {d} classes", labels.len())));
    }
    let p = softmax(logits)?;
    let mut loss = 0f64;
    for (r, &l) in labels.iter().enumerate() {
        loss -= p.row(r)[l].f64().max(1e-300).ln();
    }
    Ok((loss / n as f64, p))
}

// ----------------------------------------------------------- STFT magnitude

/// Framing parameters for the differentiable STFT magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftSpec {
    pub fft: usize,
    pub win: usize,
    pub hop: usize,
}

impl StftSpec {
    pub fn bins(&self) -> usize {
        self.fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            (len - self.win) / self.hop + 1
        }
    }

    /// Hann-windowed real DFT basis, `[win x bins]` for cosine and sine.
    pub fn basis<T: Real>(&self) -> (Tensor<T>, Tensor<T>) {
        let bins = self.bins();
        let mut c = vec![T::zero(); self.win * bins];
        let mut s = vec![T::zero(); self.win * bins];
        for n in 0..self.win {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / self.win as f64).cos();
            for k in 0..bins {
                let a = 2.0 * std::f64::consts::PI * (k * n) as f64 / self.fft as f64;
                c[n * bins + k] = T::lit(w * a.cos());
                s[n * bins + k] = T::lit(-w * a.sin());
            }
        }
        (Tensor::new(vec![self.win, bins], c).unwrap(), Tensor::new(vec![self.win, bins], s).unwrap())
    }
}

pub const STFT_MAG_EPS: f64 = 1e-9;

fn frame_matrix<T: Real>(x: &[T], spec: &StftSpec) -> Tensor<T> {
    let f = spec.frames(x.len());
    let mut m = vec![T::zero(); f * spec.win];
    for t in 0..f {
        m[t * spec.win..(t + 1) * spec.win].copy_from_slice(&x[t * spec.hop..t * spec.hop + spec.win]);
    }
    Tensor::new(vec![f, spec.win], m).unwrap()
}

/// Magnitude STFT `sqrt(re^2 + im^2 + eps)` of a mono signal. Returns the
/// magnitudes plus the real and imaginary parts for the backward pass.
pub fn stft_mag<T: Real>(x: &[T], spec: &StftSpec) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x.len() < spec.win || spec.win > spec.fft || spec.hop == 0 {
        return Err(shape_err("stft_mag", format!("signal of {} samples, {spec:?}", x.len())));
    }
    let (c, s) = spec.basis::<T>();
    let frames = frame_matrix(x, spec);
    let re = affine(&frames, &c, None)?;
    let im = affine(&frames, &s, None)?;
    let eps = T::lit(STFT_MAG_EPS);
    let mag: Vec<T> = re.data().iter().zip(im.data()).map(|(&a, &b)| (a * a + b * b + eps).sqrt()).collect();
    Ok((Tensor::new(re.shape().to_vec(), mag)?, re, im))
}

pub fn stft_mag_backward<T: Real>(
    len: usize,
    mag: &Tensor<T>,
    re: &Tensor<T>,
    im: &Tensor<T>,
    dmag: &Tensor<T>,
    spec: &StftSpec,
) -> Vec<T> {
    let (c, s) = spec.basis::<T>();
    let (ct, st) = (transpose(&c), transpose(&s));
    let mut dx = vec![T::zero(); len];
    let bins = spec.bins();
    for t in 0..mag.rows() {
        let seg = &mut dx[t * spec.hop..t * spec.hop + spec.win];
        for k in 0..bins {
            let m = mag.row(t)[k];
            let g = dmag.row(t)[k] / m;
            axpy(seg, g * re.row(t)[k], ct.row(k));
            axpy(seg, g * im.row(t)[k], st.row(k));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity() {
        let x = t2(&[&[1.0, 2.0]]);
        let w = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(affine(&x, &w, Some(&b)).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_rejects_mismatch() {
        let x = t2(&[&[1.0, 2.0, 3.0]]);
        let w = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(affine(&x, &w, None).is_err());
    }

    #[test]
    fn identity_kernel_convolution() {
        let x = t2(&[&[0.3], &[-1.5], &[2.0], &[7.0]]);
        let w = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let y = conv1d(&x, &w, None, &ConvSpec::new(0, 0, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn causal_averaging_kernel() {
        // taps (t-1, t) with weights 0.5 each, zero left padding
        let x = t2(&[&[0.0], &[2.0], &[4.0]]);
        let w = Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap();
        let y = conv1d(&x, &w, None, &ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0]);
    }

    #[test]
    fn chunked_conv_never_reads_future_chunks() {
        let spec = ConvSpec::new(1, 3, 1).chunked(Some(4));
        for t in 0..12 {
            for tap in 0..spec.taps() {
                if let Some(s) = spec.source(t, tap, 12) {
                    assert!(s / 4 <= t / 4);
                }
            }
        }
    }

    #[test]
    fn conv_rows_matches_full_sequence() {
        let x = Tensor::new(vec![10, 2], (0..20).map(|v| v as f64 * 0.1).collect()).unwrap();
        let w = Tensor::new(vec![3, 2, 3], (0..18).map(|v| (v as f64).sin()).collect()).unwrap();
        let spec = ConvSpec::new(1, 1, 2).chunked(Some(5));
        let full = conv1d(&x, &w, None, &spec).unwrap();
        let part = conv1d_rows(&x.slice_rows(3, 10), 3, 10, &w, None, &spec, 5..10).unwrap();
        assert_eq!(part.data(), full.slice_rows(5, 10).data());
    }

    #[test]
    fn transposed_conv_upsamples() {
        let x = t2(&[&[1.0], &[2.0]]);
        let w = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let y = conv_transpose1d(&x, &w, None, &ConvTSpec { stride: 2, pad: 0 }).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_are_simplices() {
        let p = softmax(&t2(&[&[1.0, 2.0, 3.0], &[-5.0, 0.0, 5.0]])).unwrap();
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gru_step_matches_sequence() {
        let h = 3;
        let xp = Tensor::new(vec![4, 3 * h], (0..36).map(|v| ((v * 7 % 11) as f64 - 5.0) * 0.1).collect()).unwrap();
        let u = Tensor::new(vec![h, 3 * h], (0..27).map(|v| ((v * 5 % 7) as f64 - 3.0) * 0.1).collect()).unwrap();
        let bhn = Tensor::new(vec![h], vec![0.1, -0.2, 0.05]).unwrap();
        let (hs, _) = gru(&xp, &u, &bhn).unwrap();
        let mut prev = vec![0.0; h];
        let mut gates = vec![0.0; 4 * h];
        for t in 0..4 {
            let mut cur = vec![0.0; h];
            gru_step(xp.row(t), &prev, &u, bhn.data(), &mut cur, &mut gates);
            assert_eq!(&cur[..], hs.row(t));
            prev = cur;
        }
    }
}
