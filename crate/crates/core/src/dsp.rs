//! Signal primitives: STFT, mel features, autocorrelation F0 tracking,
//! multi-resolution spectral loss and WAV persistence.
//!
//! Two framings are used. [`mel_features`] is the textbook one, with
//! `floor((len - win) / hop) + 1` frames. The *frontend* framing used by
//! every model pads `win - hop` zeros in front, so frame `t` covers input
//! samples `[hop*t - (win - hop), hop*t + hop)`, its window centre sits at
//! `hop*t + hop - win/2`, and a signal of `len` samples yields `len / hop`
//! frames. A frame is therefore computable the moment its last hop of
//! samples arrives, which is what the streaming runtime relies on.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LOG_FLOOR: f64 = 1e-5;
pub const MAX_ABS_SAMPLE: f32 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    /// Analysis window in samples.
    pub win: usize,
    /// Frame shift in samples.
    pub hop: usize,
    pub fft: usize,
    pub mel_bins: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self { sample_rate: 8000, win: 200, hop: 80, fft: 256, mel_bins: 20 }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("audio: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop == 0 || self.win == 0 || self.win > self.fft {
            return bad("need 0 < hop, 0 < win <= fft");
        }
        if self.hop > self.win {
            return bad("hop longer than window leaves gaps");
        }
        if self.mel_bins == 0 || self.mel_bins > self.fft / 2 {
            return bad("mel_bins out of range");
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft / 2 + 1
    }

    pub fn frame_ms(&self) -> f64 {
        1000.0 * self.hop as f64 / self.sample_rate as f64
    }

    /// Zero padding placed before the signal by the frontend framing.
    pub fn front_pad(&self) -> usize {
        self.win - self.hop
    }

    /// Sample index of the window centre of frontend frame `t`.
    pub fn frame_centre(&self, t: usize) -> f64 {
        (self.hop * t + self.hop) as f64 - self.win as f64 / 2.0
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }
}

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > MAX_ABS_SAMPLE) {
            return Err(Error::InvalidArgument(format!("sample {i} = {} outside +-{MAX_ABS_SAMPLE}", samples[i])));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Rounds samples onto the 16-bit PCM grid so that a WAV round trip is exact.
pub fn quantize_pcm16(x: &mut [f32]) {
    for v in x {
        *v = (v.clamp(-1.0, 1.0) * 32767.0).round() / 32767.0;
    }
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = hound::WavWriter::create(path, spec)?;
    for s in &w.samples {
        out.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    out.finalize()?;
    Ok(())
}

/// Reads a mono WAV (16-bit PCM or 32-bit float).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::Format { path: path.to_path_buf(), detail: format!("{} channels, expected mono", spec.channels) });
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            r.samples::<i16>().map(|s| s.map(|v| v as f32 / 32767.0)).collect::<std::result::Result<_, _>>()?
        }
        (hound::SampleFormat::Float, 32) => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (f, b) => {
            return Err(Error::Format { path: path.to_path_buf(), detail: format!("unsupported sample format {f:?}/{b} bits") })
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// One-sided complex spectrogram, `frames x bins`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

struct Analyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
}

impl Analyzer {
    fn new(win: usize, n_fft: usize) -> Self {
        Self { fft: FftPlanner::new().plan_fft_forward(n_fft), window: hann(win), n_fft }
    }

    fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Windowed one-sided spectrum of `frame` (length `win`) into `out`.
    fn spectrum(&self, frame: &[f32], buf: &mut Vec<Complex<f64>>, out: &mut [Complex<f64>]) {
        buf.clear();
        buf.extend(frame.iter().zip(&self.window).map(|(x, w)| Complex::new(*x as f64 * w, 0.0)));
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        out.copy_from_slice(&buf[..self.bins()]);
    }
}

/// Hann-windowed STFT without padding.
pub fn stft(x: &[f32], win: usize, hop: usize, n_fft: usize) -> Result<Spectrogram> {
    if win == 0 || hop == 0 || win > n_fft {
        return Err(Error::InvalidArgument(format!("stft needs 0 < win <= fft and hop > 0 (win {win}, hop {hop}, fft {n_fft})")));
    }
    if x.len() < win {
        return Err(Error::InvalidArgument(format!("window {win} longer than signal {}", x.len())));
    }
    let a = Analyzer::new(win, n_fft);
    let frames = (x.len() - win) / hop + 1;
    let bins = a.bins();
    let mut data = vec![Complex::new(0.0, 0.0); frames * bins];
    let mut buf = Vec::with_capacity(n_fft);
    for t in 0..frames {
        a.spectrum(&x[t * hop..t * hop + win], &mut buf, &mut data[t * bins..(t + 1) * bins]);
    }
    Ok(Spectrogram { frames, bins, data })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Band edges in Hz: `mel_bins + 2` points evenly spaced on the mel scale
/// from 0 Hz to Nyquist. Band `m` rises from `edges[m]` to a unit peak at
/// `edges[m + 1]` and falls to zero at `edges[m + 2]`.
pub fn mel_edges(cfg: &AudioConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.nyquist());
    (0..cfg.mel_bins + 2).map(|i| mel_to_hz(top * i as f64 / (cfg.mel_bins + 1) as f64)).collect()
}

/// Weight of mel band `m` at frequency `f` (Hz).
#[inline]
pub fn mel_triangle(edges: &[f64], m: usize, f: f64) -> f64 {
    let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
    if f <= lo || f >= hi {
        0.0
    } else if f <= c {
        (f - lo) / (c - lo)
    } else {
        (hi - f) / (hi - c)
    }
}

/// Triangular, unit-peak filters evenly spaced on the mel scale from 0 Hz
/// to Nyquist. Returns `mel_bins` rows of `fft/2 + 1` weights.
pub fn mel_filterbank(cfg: &AudioConfig) -> Vec<Vec<f64>> {
    let edges = mel_edges(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.fft as f64;
    (0..cfg.mel_bins).map(|m| (0..cfg.bins()).map(|k| mel_triangle(&edges, m, k as f64 * bin_hz)).collect()).collect()
}

/// Reusable log-mel extractor; holds the FFT plan, window and filterbank.
pub struct MelExtractor {
    cfg: AudioConfig,
    analyzer: Analyzer,
    bank: Vec<Vec<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: AudioConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, analyzer: Analyzer::new(cfg.win, cfg.fft), bank: mel_filterbank(&cfg) })
    }

    pub fn config(&self) -> &AudioConfig {
        &self.cfg
    }

    /// Log-mel vector of a single `win`-sample frame.
    pub fn frame(&self, frame: &[f32], out: &mut [f32]) {
        let bins = self.analyzer.bins();
        let mut spec = vec![Complex::new(0.0, 0.0); bins];
        let mut buf = Vec::with_capacity(self.cfg.fft);
        self.analyzer.spectrum(frame, &mut buf, &mut spec);
        let mag: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
        for (o, row) in out.iter_mut().zip(&self.bank) {
            let e: f64 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
            *o = (e + LOG_FLOOR).ln() as f32;
        }
    }

    fn frames_from(&self, x: &[f32], frames: usize) -> Tensor {
        let (win, hop, m) = (self.cfg.win, self.cfg.hop, self.cfg.mel_bins);
        let mut data = vec![0f32; frames * m];
        for t in 0..frames {
            self.frame(&x[t * hop..t * hop + win], &mut data[t * m..(t + 1) * m]);
        }
        Tensor::new(vec![frames, m], data).expect("frames x mel")
    }

    /// Unpadded framing: `floor((len - win)/hop) + 1` frames.
    pub fn features(&self, x: &[f32]) -> Result<Tensor> {
        if x.len() < self.cfg.win {
            return Err(Error::InvalidArgument(format!("signal of {} samples shorter than window {}", x.len(), self.cfg.win)));
        }
        Ok(self.frames_from(x, (x.len() - self.cfg.win) / self.cfg.hop + 1))
    }

    /// Front-padded framing used by all models: `len / hop` frames.
    pub fn frontend(&self, x: &[f32]) -> Tensor {
        let mut padded = vec![0f32; self.cfg.front_pad()];
        padded.extend_from_slice(x);
        self.frames_from(&padded, x.len() / self.cfg.hop)
    }
}

/// Log-mel features with the unpadded framing.
pub fn mel_features(x: &[f32], cfg: &AudioConfig) -> Result<Tensor> {
    MelExtractor::new(*cfg)?.features(x)
}

/// Log-mel features with the frontend framing.
pub fn frontend_features(x: &[f32], cfg: &AudioConfig) -> Result<Tensor> {
    Ok(MelExtractor::new(*cfg)?.frontend(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct F0Config {
    pub fmin: f64,
    pub fmax: f64,
    /// Analysis window in samples, centred on each frontend frame.
    pub window: usize,
    /// Frames with normalised autocorrelation peak below this are unvoiced.
    pub threshold: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self { fmin: 70.0, fmax: 350.0, window: 320, threshold: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F0Track {
    pub f0: Vec<f32>,
    pub voiced: Vec<bool>,
    pub periodicity: Vec<f32>,
}

impl F0Track {
    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|v| **v).count() as f64 / self.voiced.len() as f64
    }
}

/// Autocorrelation pitch tracker on the frontend frame grid.
///
/// For each frame the normalised cross-correlation between the window and
/// its lagged copy is evaluated over the admissible lag range. The first
/// local maximum within 90% of the global maximum is chosen (suppressing
/// octave-down errors) and refined by parabolic interpolation.
pub fn estimate_f0(x: &[f32], audio: &AudioConfig, cfg: &F0Config) -> Result<F0Track> {
    let sr = audio.sample_rate as f64;
    if !(cfg.fmin > 0.0 && cfg.fmin < cfg.fmax && cfg.fmax < sr / 2.0) {
        return Err(Error::InvalidArgument(format!("need 0 < fmin < fmax < nyquist, got {} / {}", cfg.fmin, cfg.fmax)));
    }
    let min_lag = (sr / cfg.fmax).floor().max(2.0) as usize;
    let max_lag = (sr / cfg.fmin).ceil() as usize;
    if max_lag + 2 >= cfg.window {
        return Err(Error::InvalidArgument(format!("F0 window {} too short for fmin {}", cfg.window, cfg.fmin)));
    }
    let frames = x.len() / audio.hop;
    let mut track = F0Track { f0: vec![0.0; frames], voiced: vec![false; frames], periodicity: vec![0.0; frames] };
    let half = cfg.window as f64 / 2.0;
    let mut seg = vec![0f64; cfg.window];
    let mut r = vec![0f64; max_lag + 2];
    for t in 0..frames {
        let start = (audio.frame_centre(t) - half).round() as i64;
        for (i, s) in seg.iter_mut().enumerate() {
            let n = start + i as i64;
            *s = if n >= 0 && (n as usize) < x.len() { x[n as usize] as f64 } else { 0.0 };
        }
        let energy: f64 = seg.iter().map(|v| v * v).sum();
        if energy / (cfg.window as f64) < 1e-8 {
            continue;
        }
        for (lag, rv) in r.iter_mut().enumerate().skip(min_lag.saturating_sub(1)) {
            let n = cfg.window - lag;
            let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let (a, b) = (seg[i], seg[i + lag]);
                xy += a * b;
                xx += a * a;
                yy += b * b;
            }
            *rv = if xx > 0.0 && yy > 0.0 { xy / (xx * yy).sqrt() } else { 0.0 };
        }
        let best = (min_lag..=max_lag).map(|l| r[l]).fold(f64::NEG_INFINITY, f64::max);
        if best < cfg.threshold {
            track.periodicity[t] = best.max(0.0) as f32;
            continue;
        }
        let lag = (min_lag..=max_lag)
            .find(|&l| r[l] >= 0.9 * best && r[l] >= r[l - 1] && r[l] >= r[l + 1])
            .unwrap_or_else(|| (min_lag..=max_lag).max_by(|a, b| r[*a].total_cmp(&r[*b])).unwrap());
        let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        track.f0[t] = (sr / (lag as f64 + shift)) as f32;
        track.voiced[t] = true;
        track.periodicity[t] = b as f32;
    }
    Ok(track)
}

/// (fft, win, hop) triples used by [`multires_stft_loss`] at 8 kHz.
pub const LOSS_RESOLUTIONS: [(usize, usize, usize); 3] = [(64, 64, 16), (128, 128, 32), (256, 256, 64)];
pub const LOSS_MAG_EPS: f64 = 1e-5;

/// Sum over three resolutions of mean L1 distance between log magnitudes
/// plus spectral convergence `||S_a - S_b||_F / ||S_a||_F`, where `a` is
/// the reference signal.
pub fn multires_stft_loss(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (fft, win, hop) in LOSS_RESOLUTIONS {
        let sa = stft(a, win, hop, fft)?.magnitudes();
        let sb = stft(b, win, hop, fft)?.magnitudes();
        let l1 = sa.iter().zip(&sb).map(|(x, y)| ((x + LOSS_MAG_EPS).ln() - (y + LOSS_MAG_EPS).ln()).abs()).sum::<f64>()
            / sa.len() as f64;
        let num = sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = sa.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += l1 + num / (den + 1e-7);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn bin_centred_sine_concentrates_in_main_lobe() {
        let (fft, k) = (256, 19);
        let x: Vec<f32> = (0..1024).map(|n| (2.0 * std::f32::consts::PI * k as f32 * n as f32 / fft as f32).sin()).collect();
        let s = stft(&x, fft, 64, fft).unwrap();
        for t in 0..s.frames {
            let e: Vec<f64> = s.frame(t).iter().map(|c| c.norm_sqr()).collect();
            let total: f64 = e.iter().sum();
            assert!((e[k - 1] + e[k] + e[k + 1]) / total > 0.95);
            // Hann main lobe: centre bin holds 1/(1 + 2 * 1/4) of the energy.
            assert!((e[k] / total - 2.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stft_is_linear_and_parseval_consistent() {
        let x = noise(600, 1);
        let s = stft(&x, 200, 80, 256).unwrap();
        let x3: Vec<f32> = x.iter().map(|v| v * 3.0).collect();
        let s3 = stft(&x3, 200, 80, 256).unwrap();
        for (a, b) in s.data.iter().zip(&s3.data) {
            assert!((b.norm() - 3.0 * a.norm()).abs() < 1e-9 * (1.0 + a.norm()));
        }
        let w = hann(200);
        for t in 0..s.frames {
            let time: f64 = (0..200).map(|i| (x[t * 80 + i] as f64 * w[i]).powi(2)).sum();
            let f = s.frame(t);
            let last = f.len() - 1;
            let freq: f64 = f.iter().enumerate().map(|(k, c)| if k == 0 || k == last { c.norm_sqr() } else { 2.0 * c.norm_sqr() }).sum();
            assert!((freq / 256.0 - time).abs() < 1e-9 * time.max(1.0));
        }
        let z = stft(&[0.0; 400], 200, 80, 256).unwrap();
        assert!(z.data.iter().all(|c| c.norm() == 0.0));
        assert!(stft(&[0.0; 100], 200, 80, 256).is_err());
        assert!(stft(&[0.0; 400], 300, 80, 256).is_err());
    }

    #[test]
    fn zero_signal_gives_log_floor() {
        let cfg = AudioConfig::default();
        let m = mel_features(&[0.0; 1000], &cfg).unwrap();
        assert_eq!(m.shape(), &[(1000 - 200) / 80 + 1, 20]);
        assert!(m.data().iter().all(|v| *v == (1e-5f64).ln() as f32));
    }

    #[test]
    fn doubling_amplitude_adds_log_two() {
        let cfg = AudioConfig::default();
        let x = noise(4000, 3);
        let x2: Vec<f32> = x.iter().map(|v| v * 2.0).collect();
        let (a, b) = (mel_features(&x, &cfg).unwrap(), mel_features(&x2, &cfg).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((q - p - std::f32::consts::LN_2).abs() < 0.05);
        }
    }

    #[test]
    fn filterbank_is_triangular_and_covers_band() {
        let cfg = AudioConfig::default();
        let bank = mel_filterbank(&cfg);
        assert_eq!(bank.len(), 20);
        for k in 0..cfg.bins() {
            let touching = bank.iter().filter(|row| row[k] > 0.0).count();
            assert!(touching <= 2, "bin {k} in {touching} filters");
        }
        for row in &bank {
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.0 && peak <= 1.0);
        }
        // interior bins are covered by at least one filter
        for k in 1..cfg.bins() - 1 {
            assert!(bank.iter().any(|row| row[k] > 0.0), "bin {k} uncovered");
        }
    }

    #[test]
    fn frontend_frames_end_at_hop_boundaries() {
        let cfg = AudioConfig::default();
        let ex = MelExtractor::new(cfg).unwrap();
        let x = noise(1000, 4);
        let f = ex.frontend(&x);
        assert_eq!(f.rows(), 12);
        // frame 5 only sees samples < 480
        let mut y = x.clone();
        for v in &mut y[480..] {
            *v = 0.0;
        }
        let g = ex.frontend(&y);
        assert_eq!(f.row(5), g.row(5));
        assert_ne!(f.row(6), g.row(6));
        // delaying the input by one hop delays every interior frame by one row
        let mut d = vec![0f32; 80];
        d.extend_from_slice(&x);
        let h = ex.frontend(&d);
        for t in 2..f.rows() {
            assert_eq!(f.row(t), h.row(t + 1));
        }
        assert_eq!(cfg.frame_centre(0), -20.0);
    }

    fn sawtooth(f0: f64, n: usize, sr: f64) -> Vec<f32> {
        (0..n).map(|i| ((i as f64 * f0 / sr).fract() * 2.0 - 1.0) as f32 * 0.5).collect()
    }

    #[test]
    fn sawtooth_pitch_and_noise_and_silence() {
        let a = AudioConfig::default();
        let c = F0Config::default();
        let tr = estimate_f0(&sawtooth(200.0, 8000, 8000.0), &a, &c).unwrap();
        let mut v: Vec<f32> = tr.f0.iter().zip(&tr.voiced).filter(|(_, v)| **v).map(|(f, _)| *f).collect();
        v.sort_by(f32::total_cmp);
        assert!((v[v.len() / 2] - 200.0).abs() < 3.0);
        let n = estimate_f0(&noise(8000, 9), &a, &c).unwrap();
        assert!(n.voiced_fraction() <= 0.1, "{}", n.voiced_fraction());
        let s = estimate_f0(&[0.0; 4000], &a, &c).unwrap();
        assert!(s.voiced.iter().all(|v| !v));
        assert!(estimate_f0(&[0.0; 10], &a, &F0Config { fmin: 300.0, fmax: 200.0, ..c }).is_err());
    }

    #[test]
    fn multires_loss_basics() {
        let a = noise(2000, 5);
        let b = noise(2000, 6);
        assert_eq!(multires_stft_loss(&a, &a).unwrap(), 0.0);
        assert!(multires_stft_loss(&a, &b[..1999]).is_err());
        let mut prev = f64::INFINITY;
        for step in 0..5 {
            let lam = step as f32 / 4.0;
            let m: Vec<f32> = a.iter().zip(&b).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
            let l = multires_stft_loss(&a, &m).unwrap();
            assert!(l < prev, "{l} !< {prev} at {lam}");
            prev = l;
        }
    }

    #[test]
    fn wav_roundtrip_on_pcm_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut x = noise(500, 7);
        quantize_pcm16(&mut x);
        let w = Waveform::new(x, 8000).unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &w).unwrap();
        assert_eq!(read_wav(&p).unwrap(), w);
        assert!(Waveform::new(vec![5.0], 8000).is_err());
        assert!(matches!(read_wav(&dir.path().join("none.wav")), Err(Error::MissingArtifact(_))));
    }
}
