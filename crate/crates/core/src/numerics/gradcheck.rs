//! Central finite-difference verification of the analytic gradients.
//!
//! Each check instantiates one kernel in f64 on randomly drawn shapes,
//! treats every input as a parameter, and compares [`Graph::backward`]
//! against `(L(p + h) - L(p - h)) / 2h`. Inputs are kept away from the
//! kinks of piecewise-linear ops so the difference quotient is valid.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::kernels::{ConvSpec, ConvTSpec, StftSpec};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Affine,
    Conv1d,
    Conv1dChunked,
    ConvTranspose,
    Gru,
    LayerNorm,
    Softmax,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Embed,
    Concat,
    AddSubMul,
    RepeatRows,
    SumCols,
    L1,
    MseConst,
    CrossEntropy,
    StftMag,
    ThreeLayerNet,
}

impl Kernel {
    pub const ALL: [Kernel; 23] = [
        Kernel::Affine,
        Kernel::Conv1d,
        Kernel::Conv1dChunked,
        Kernel::ConvTranspose,
        Kernel::Gru,
        Kernel::LayerNorm,
        Kernel::Softmax,
        Kernel::Relu,
        Kernel::Tanh,
        Kernel::Sigmoid,
        Kernel::Exp,
        Kernel::Log,
        Kernel::Sqrt,
        Kernel::Embed,
        Kernel::Concat,
        Kernel::AddSubMul,
        Kernel::RepeatRows,
        Kernel::SumCols,
        Kernel::L1,
        Kernel::MseConst,
        Kernel::CrossEntropy,
        Kernel::StftMag,
        Kernel::ThreeLayerNet,
    ];
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub kernel: Kernel,
    pub shapes: Vec<Vec<usize>>,
    pub rel_error: f64,
    pub max_abs_error: f64,
}

type Builder = Box<dyn Fn(&mut Graph<f64>) -> Result<NodeId>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero by `gap`, with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, weights: &Tensor<f64>) -> Result<NodeId> {
    let c = g.input(weights.clone())?;
    let p = g.mul(y, c)?;
    g.sum_all(p)
}

fn case(kernel: Kernel, rng: &mut ChaCha8Rng) -> (ParamSet<f64>, Builder, Vec<usize>) {
    let mut ps = ParamSet::<f64>::new();
    let n = rng.gen_range(2..7);
    let d = rng.gen_range(1..5);
    let out_shape: Vec<usize>;
    let b: Builder = match kernel {
        Kernel::Affine => {
            let o = rng.gen_range(1..5);
            ps.add("x", rand_tensor(rng, &[n, d], -1.0, 1.0));
            ps.add("w", rand_tensor(rng, &[d, o], -1.0, 1.0));
            ps.add("b", rand_tensor(rng, &[o], -1.0, 1.0));
            out_shape = vec![n, o];
            Box::new(|g| {
                let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
                g.affine(x, w, Some(b))
            })
        }
        Kernel::Conv1d | Kernel::Conv1dChunked => {
            let o = rng.gen_range(1..4);
            let n = rng.gen_range(4..10);
            let mut spec = ConvSpec::new(rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(1..3));
            if kernel == Kernel::Conv1dChunked {
                spec = spec.chunked(Some(rng.gen_range(2..5)));
            }
            ps.add("x", rand_tensor(rng, &[n, d], -1.0, 1.0));
            ps.add("w", rand_tensor(rng, &[spec.taps(), d, o], -1.0, 1.0));
            ps.add("b", rand_tensor(rng, &[o], -1.0, 1.0));
            out_shape = vec![n, o];
            Box::new(move |g| {
                let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
                g.conv1d(x, w, Some(b), spec)
            })
        }
        Kernel::ConvTranspose => {
            let o = rng.gen_range(1..4);
            let stride = rng.gen_range(1..4);
            let k = rng.gen_range(1..2 * stride + 2);
            let spec = ConvTSpec { stride, pad: rng.gen_range(0..k) };
            ps.add("x", rand_tensor(rng, &[n, d], -1.0, 1.0));
            ps.add("w", rand_tensor(rng, &[k, d, o], -1.0, 1.0));
            ps.add("b", rand_tensor(rng, &[o], -1.0, 1.0));
            out_shape = vec![n * stride, o];
            Box::new(move |g| {
                let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
                g.conv_transpose1d(x, w, Some(b), spec)
            })
        }
        Kernel::Gru => {
            let h = rng.gen_range(1..4);
            ps.add("x", rand_tensor(rng, &[n, d], -1.0, 1.0));
            ps.add("w", rand_tensor(rng, &[d, 3 * h], -1.0, 1.0));
            ps.add("b", rand_tensor(rng, &[3 * h], -0.5, 0.5));
            ps.add("u", rand_tensor(rng, &[h, 3 * h], -1.0, 1.0));
            ps.add("bhn", rand_tensor(rng, &[h], -0.5, 0.5));
            out_shape = vec![n, h];
            Box::new(|g| {
                let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
                let xp = g.affine(x, w, Some(b))?;
                let (u, bhn) = (g.param("u")?, g.param("bhn")?);
                g.gru(xp, u, bhn)
            })
        }
        Kernel::LayerNorm => {
            let d = rng.gen_range(2..6);
            // Rows with well-separated entries keep the variance away
            // from eps, where the map is too curved for the step size.
            let mut x = Vec::with_capacity(n * d);
            for _ in 0..n {
                let mut row: Vec<f64> = (0..d).map(|j| j as f64 * 0.6 + rng.gen_range(-0.2..0.2)).collect();
                row.shuffle(rng);
                x.extend(row);
            }
            ps.add("x", Tensor::new(vec![n, d], x).unwrap());
            ps.add("g", rand_tensor(rng, &[d], 0.5, 1.5));
            ps.add("b", rand_tensor(rng, &[d], -0.5, 0.5));
            out_shape = vec![n, d];
            Box::new(|g| {
                let (x, ga, b) = (g.param("x")?, g.param("g")?, g.param("b")?);
                g.layer_norm(x, ga, b)
            })
        }
        Kernel::Softmax => {
            ps.add("x", rand_tensor(rng, &[n, d + 1], -2.0, 2.0));
            out_shape = vec![n, d + 1];
            Box::new(|g| {
                let x = g.param("x")?;
                g.softmax(x)
            })
        }
        Kernel::Relu | Kernel::Tanh | Kernel::Sigmoid | Kernel::Exp => {
            ps.add("x", away_from_zero(rng, &[n, d], 0.05));
            out_shape = vec![n, d];
            Box::new(move |g| {
                let x = g.param("x")?;
                match kernel {
                    Kernel::Relu => g.relu(x),
                    Kernel::Tanh => g.tanh(x),
                    Kernel::Sigmoid => g.sigmoid(x),
                    _ => g.exp(x),
                }
            })
        }
        Kernel::Log | Kernel::Sqrt => {
            ps.add("x", rand_tensor(rng, &[n, d], 0.5, 2.0));
            out_shape = vec![n, d];
            Box::new(move |g| {
                let x = g.param("x")?;
                if kernel == Kernel::Log {
                    g.log(x)
                } else {
                    g.sqrt(x)
                }
            })
        }
        Kernel::Embed => {
            let rows = rng.gen_range(2..6);
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..rows)).collect();
            ps.add("table", rand_tensor(rng, &[rows, d], -1.0, 1.0));
            out_shape = vec![n, d];
            Box::new(move |g| {
                let t = g.param("table")?;
                g.embed(t, &ids)
            })
        }
        Kernel::Concat => {
            let d2 = rng.gen_range(1..4);
            ps.add("a", rand_tensor(rng, &[n, d], -1.0, 1.0));
            ps.add("b", rand_tensor(rng, &[n, d2], -1.0, 1.0));
            out_shape = vec![n, d + d2];
            Box::new(|g| {
                let (a, b) = (g.param("a")?, g.param("b")?);
                g.concat(&[a, b])
            })
        }
        Kernel::AddSubMul => {
            ps.add("a", rand_tensor(rng, &[n, d], -1.0, 1.0));
            ps.add("b", rand_tensor(rng, &[n, d], -1.0, 1.0));
            out_shape = vec![n, d];
            Box::new(|g| {
                let (a, b) = (g.param("a")?, g.param("b")?);
                let s = g.add(a, b)?;
                let t = g.sub(s, b)?;
                let m = g.mul(t, b)?;
                let m = g.scale(m, 1.7)?;
                g.add_scalar(m, 0.3)
            })
        }
        Kernel::RepeatRows => {
            ps.add("a", rand_tensor(rng, &[1, d], -1.0, 1.0));
            out_shape = vec![n, d];
            Box::new(move |g| {
                let a = g.param("a")?;
                g.repeat_rows(a, n)
            })
        }
        Kernel::SumCols => {
            ps.add("a", rand_tensor(rng, &[n, d], -1.0, 1.0));
            out_shape = vec![n, 1];
            Box::new(|g| {
                let a = g.param("a")?;
                g.sum_cols(a)
            })
        }
        Kernel::L1 => {
            let base = rand_tensor(rng, &[n, d], -1.0, 1.0);
            let delta = away_from_zero(rng, &[n, d], 0.05);
            let other: Vec<f64> = base.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
            ps.add("a", base.clone());
            ps.add("b", Tensor::new(vec![n, d], other).unwrap());
            out_shape = vec![1];
            Box::new(|g| {
                let (a, b) = (g.param("a")?, g.param("b")?);
                g.l1(a, b)
            })
        }
        Kernel::MseConst => {
            ps.add("a", rand_tensor(rng, &[n, d], -1.0, 1.0));
            let target = *[0.0, 1.0].choose(rng).unwrap();
            out_shape = vec![1];
            Box::new(move |g| {
                let a = g.param("a")?;
                g.mse_const(a, target)
            })
        }
        Kernel::CrossEntropy => {
            let c = rng.gen_range(2..6);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            ps.add("logits", rand_tensor(rng, &[n, c], -2.0, 2.0));
            out_shape = vec![1];
            Box::new(move |g| {
                let l = g.param("logits")?;
                g.cross_entropy(l, &labels)
            })
        }
        Kernel::StftMag => {
            let fft = *[8usize, 16].choose(rng).unwrap();
            let win = rng.gen_range(fft / 2..=fft);
            let hop = rng.gen_range(1..=win / 2);
            let spec = StftSpec { fft, win, hop };
            let len = win + hop * rng.gen_range(1..4);
            ps.add("x", rand_tensor(rng, &[len, 1], -1.0, 1.0));
            out_shape = vec![spec.frames(len), spec.bins()];
            Box::new(move |g| {
                let x = g.param("x")?;
                g.stft_mag(x, spec)
            })
        }
        Kernel::ThreeLayerNet => {
            let (h1, h2, o) = (rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..4));
            ps.add("x", rand_tensor(rng, &[n, d], -1.0, 1.0));
            ps.add("w1", rand_tensor(rng, &[d, h1], -1.0, 1.0));
            ps.add("b1", rand_tensor(rng, &[h1], -0.5, 0.5));
            ps.add("w2", rand_tensor(rng, &[h1, h2], -1.0, 1.0));
            ps.add("b2", rand_tensor(rng, &[h2], -0.5, 0.5));
            ps.add("w3", rand_tensor(rng, &[h2, o], -1.0, 1.0));
            ps.add("b3", rand_tensor(rng, &[o], -0.5, 0.5));
            out_shape = vec![n, o];
            Box::new(|g| {
                let x = g.param("x")?;
                let (w1, b1) = (g.param("w1")?, g.param("b1")?);
                let h = g.affine(x, w1, Some(b1))?;
                let h = g.tanh(h)?;
                let (w2, b2) = (g.param("w2")?, g.param("b2")?);
                let h = g.affine(h, w2, Some(b2))?;
                let h = g.sigmoid(h)?;
                let (w3, b3) = (g.param("w3")?, g.param("b3")?);
                g.affine(h, w3, Some(b3))
            })
        }
    };
    (ps, b, out_shape)
}

fn loss_of(ps: &ParamSet<f64>, build: &Builder, weights: Option<&Tensor<f64>>) -> Result<f64> {
    let mut g = Graph::new(ps);
    let y = build(&mut g)?;
    let l = match weights {
        Some(w) => weighted_sum(&mut g, y, w)?,
        None => y,
    };
    Ok(g.value(l).data()[0])
}

/// Runs one randomized finite-difference check of `kernel`.
pub fn check(kernel: Kernel, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ps, build, out_shape) = case(kernel, &mut rng);
    let weights = (out_shape != [1]).then(|| rand_tensor(&mut rng, &out_shape, -1.0, 1.0));

    let analytic = {
        let mut g = Graph::new(&ps);
        let y = build(&mut g)?;
        let l = match &weights {
            Some(w) => weighted_sum(&mut g, y, w)?,
            None => y,
        };
        g.backward(l)?
    };

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut max_abs: f64 = 0.0;
    for p in 0..ps.len() {
        for j in 0..ps.tensor(p).len() {
            let orig = ps.tensor(p).data()[j];
            ps.tensors_mut()[p].data_mut()[j] = orig + FD_STEP;
            let up = loss_of(&ps, &build, weights.as_ref())?;
            ps.tensors_mut()[p].data_mut()[j] = orig - FD_STEP;
            let down = loss_of(&ps, &build, weights.as_ref())?;
            ps.tensors_mut()[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[p].data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-12);
    Ok(GradCheck {
        kernel,
        shapes: ps.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        rel_error: diff2.sqrt() / denom,
        max_abs_error: max_abs,
    })
}

/// Runs `cases` checks cycling through every kernel with derived seeds.
pub fn suite(cases: usize, seed: u64) -> Result<Vec<GradCheck>> {
    (0..cases)
        .map(|i| check(Kernel::ALL[i % Kernel::ALL.len()], seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kernel_passes_once() {
        for (i, k) in Kernel::ALL.iter().enumerate() {
            let r = check(*k, 17 + i as u64).unwrap();
            assert!(r.rel_error < 1e-4, "{k:?}: {r:?}");
        }
    }
}
