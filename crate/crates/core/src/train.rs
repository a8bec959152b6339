//! Shared training utilities: learning-rate schedule, loss logs, crops and
//! feature statistics.

use rand::Rng;

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Cosine decay from `lr` to `lr * final_fraction`.
pub fn cosine_lr(lr: f64, final_fraction: f64, step: usize, steps: usize) -> f64 {
    let p = if steps <= 1 { 1.0 } else { step as f64 / (steps - 1) as f64 };
    lr * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over `n` equal consecutive windows.
    pub fn windowed(&self, n: usize) -> Vec<f64> {
        let w = (self.losses.len() / n).max(1);
        self.losses.chunks(w).take(n).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }
}

/// Picks a crop start that is a multiple of `align` and a crop length.
pub fn crop<R: Rng>(rng: &mut R, frames: usize, want: usize, align: usize) -> (usize, usize) {
    if frames <= want {
        return (0, frames);
    }
    let slots = (frames - want) / align;
    (rng.gen_range(0..=slots) * align, want)
}

/// Per-bin mean and standard deviation over all frames.
pub fn mel_stats(utts: &[&Utterance]) -> (Vec<f32>, Vec<f32>) {
    let mels: Vec<&Tensor> = utts.iter().map(|u| &u.mel).collect();
    column_stats(&mels)
}

/// Per-column mean and standard deviation over the rows of all tensors.
pub fn column_stats(ts: &[&Tensor]) -> (Vec<f32>, Vec<f32>) {
    let m = ts[0].cols();
    let mut s = vec![0f64; m];
    let mut s2 = vec![0f64; m];
    let mut n = 0f64;
    for t in ts {
        for r in 0..t.rows() {
            for (j, v) in t.row(r).iter().enumerate() {
                s[j] += *v as f64;
                s2[j] += (*v as f64).powi(2);
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
    let std = s2.iter().zip(&mean).map(|(v, m)| ((v / n - m * m).max(1e-8)).sqrt() as f32).collect();
    (mean.iter().map(|v| *v as f32).collect(), std)
}

/// `(x - mean) / std` per column.
pub fn standardize(x: &Tensor, mean: &[f32], std: &[f32]) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != mean.len() || std.len() != mean.len() {
        return Err(Error::Shape { op: "standardize", detail: format!("{:?} vs {} columns", x.shape(), mean.len()) });
    }
    let mut out = x.clone();
    let m = mean.len();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let j = i % m;
        *v = (*v - mean[j]) / std[j];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0.1, 0, 100) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.1, 99, 100) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn column_stats_and_standardize() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 10.0, 3.0, 10.0]).unwrap();
        let (m, s) = column_stats(&[&a]);
        assert_eq!(m, vec![2.0, 10.0]);
        assert!((s[0] - 1.0).abs() < 1e-6);
        let z = standardize(&a, &m, &s).unwrap();
        assert!((z.data()[0] + 1.0).abs() < 1e-6 && (z.data()[2] - 1.0).abs() < 1e-6);
    }
}
