//! Synthetic speech-like corpus with independent content and timbre.
//!
//! Every utterance is rendered by a source-filter model: a harmonic source
//! at the frame F0 (or shaped noise for unvoiced phonemes) filtered by the
//! phoneme's resonance template and the speaker's spectral envelope.
//! Phoneme ids and the normalised prosody pattern come from a content seed
//! that is independent of the speaker, so the same content rendered by two
//! speakers shares all content latents while the F0 contour is scaled into
//! each speaker's own range.
//!
//! Labels live on the frontend frame grid: frame `t` is centred on sample
//! `hop*t + hop - win/2`, and amplitude/F0 knots are placed at those centres.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{self, hz_to_mel, AudioConfig, MelExtractor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const NUM_PHONEMES: usize = 12;

/// A pseudo-phoneme: resonances `(centre Hz, bandwidth Hz, gain)`.
#[derive(Clone, Copy, Debug)]
pub struct Phoneme {
    pub name: &'static str,
    pub voiced: bool,
    pub resonances: [(f64, f64, f64); 3],
}

pub const PHONEMES: [Phoneme; NUM_PHONEMES] = [
    Phoneme { name: "a", voiced: true, resonances: [(730.0, 90.0, 1.0), (1090.0, 110.0, 0.6), (2440.0, 170.0, 0.3)] },
    Phoneme { name: "i", voiced: true, resonances: [(270.0, 60.0, 1.0), (2290.0, 120.0, 0.5), (3010.0, 200.0, 0.35)] },
    Phoneme { name: "u", voiced: true, resonances: [(300.0, 60.0, 1.0), (870.0, 90.0, 0.45), (2240.0, 170.0, 0.15)] },
    Phoneme { name: "e", voiced: true, resonances: [(530.0, 70.0, 1.0), (1840.0, 110.0, 0.55), (2480.0, 170.0, 0.3)] },
    Phoneme { name: "o", voiced: true, resonances: [(570.0, 80.0, 1.0), (840.0, 90.0, 0.7), (2410.0, 170.0, 0.15)] },
    Phoneme { name: "ae", voiced: true, resonances: [(660.0, 90.0, 1.0), (1720.0, 110.0, 0.6), (2410.0, 170.0, 0.3)] },
    Phoneme { name: "er", voiced: true, resonances: [(490.0, 80.0, 1.0), (1350.0, 100.0, 0.7), (1690.0, 120.0, 0.6)] },
    Phoneme { name: "m", voiced: true, resonances: [(250.0, 80.0, 0.7), (1200.0, 200.0, 0.08), (2600.0, 250.0, 0.05)] },
    Phoneme { name: "l", voiced: true, resonances: [(360.0, 70.0, 1.0), (1300.0, 120.0, 0.3), (2700.0, 200.0, 0.25)] },
    Phoneme { name: "s", voiced: false, resonances: [(3500.0, 700.0, 1.0), (2600.0, 500.0, 0.2), (1500.0, 800.0, 0.02)] },
    Phoneme { name: "sh", voiced: false, resonances: [(2400.0, 700.0, 1.0), (3300.0, 600.0, 0.4), (1500.0, 600.0, 0.08)] },
    Phoneme { name: "f", voiced: false, resonances: [(2000.0, 3000.0, 0.35), (3500.0, 1500.0, 0.15), (800.0, 1000.0, 0.1)] },
];

const RESONANCE_FLOOR: f64 = 0.05;
/// Harmonics above this fraction of Nyquist are dropped.
pub const HARMONIC_CEILING: f64 = 0.95;
/// Target utterance RMS before 16-bit quantisation.
const TARGET_RMS: f64 = 0.1;
const NOISE_SEGMENT: usize = 160;

impl Phoneme {
    /// Filter magnitude of this phoneme's template at `f` Hz.
    pub fn response(&self, f: f64) -> f64 {
        self.response_shifted(f, 0.0)
    }

    /// Response with every resonance centre scaled by `1 + shift`.
    pub fn response_shifted(&self, f: f64, shift: f64) -> f64 {
        let k = 1.0 + shift;
        RESONANCE_FLOOR
            + self.resonances.iter().map(|(c, b, g)| g / (1.0 + ((f - c * k) / (0.5 * b)).powi(2))).sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerRole {
    Pool,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub id: String,
    pub role: SpeakerRole,
    /// Linear gain at each mel band centre; interpolated on the mel scale.
    pub envelope: Vec<f64>,
    pub f0_base: f64,
    /// Maximum excursion of the F0 contour around `f0_base`, in Hz.
    pub f0_range: f64,
    /// Relative per-frame F0 perturbation applied during rendering.
    pub jitter: f64,
}

impl SpeakerSpec {
    /// A flat-envelope speaker used to measure phoneme templates.
    pub fn neutral(mel_bins: usize) -> Self {
        Self {
            id: "neutral".into(),
            role: SpeakerRole::Pool,
            envelope: vec![1.0; mel_bins],
            f0_base: 150.0,
            f0_range: 30.0,
            jitter: 0.0,
        }
    }

    /// Envelope gain at `f` Hz, linear in mel between band centres.
    pub fn gain(&self, f: f64, audio: &AudioConfig) -> f64 {
        let n = self.envelope.len();
        let top = hz_to_mel(audio.nyquist());
        let pos = hz_to_mel(f.max(0.0)) / top * (n + 1) as f64 - 1.0;
        if pos <= 0.0 {
            return self.envelope[0];
        }
        if pos >= (n - 1) as f64 {
            return self.envelope[n - 1];
        }
        let i = pos.floor() as usize;
        let fr = pos - i as f64;
        self.envelope[i] * (1.0 - fr) + self.envelope[i + 1] * fr
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

pub const MAX_ENVELOPE_COSINE: f64 = 0.95;

fn random_envelope(rng: &mut ChaCha8Rng, bins: usize) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> =
        (1..=4).map(|m| (m as f64, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU))).collect();
    let tilt = rng.gen_range(-1.0..1.0);
    let raw: Vec<f64> = (0..bins)
        .map(|j| {
            let x = j as f64 / (bins - 1) as f64;
            tilt * (x - 0.5) + comps.iter().map(|(m, a, ph)| a * (std::f64::consts::PI * m * x + ph).cos()).sum::<f64>()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-9);
    let span_db = rng.gen_range(10.0..14.0);
    raw.iter().map(|v| 10f64.powf(v / peak * span_db / 20.0)).collect()
}

/// `spk` with its envelope multiplied by a random smooth curve whose
/// log-gain peaks at `db`, as if recorded in a different session.
pub fn session_speaker(spk: &SpeakerSpec, db: f64, rng: &mut ChaCha8Rng) -> SpeakerSpec {
    let mut out = spk.clone();
    if db <= 0.0 {
        return out;
    }
    let bins = spk.envelope.len();
    let tilt = rng.gen_range(-1.0..1.0);
    let (a, ph): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU));
    let raw: Vec<f64> = (0..bins)
        .map(|j| {
            let x = j as f64 / (bins - 1).max(1) as f64;
            tilt * (x - 0.5) + a * (std::f64::consts::TAU * x + ph).cos()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    for (e, r) in out.envelope.iter_mut().zip(&raw) {
        *e *= 10f64.powf(r / peak * db / 20.0);
    }
    out
}

/// Draws `n` speakers whose envelopes are pairwise less similar than
/// [`MAX_ENVELOPE_COSINE`]. Ids are `s00`, `s01`, ...; roles default to pool.
pub fn make_speakers(n: usize, mel_bins: usize, seed: u64) -> Result<Vec<SpeakerSpec>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 speakers, got {n}")));
    }
    let mut rng = rng::stream(seed, "speakers");
    let mut out: Vec<SpeakerSpec> = Vec::with_capacity(n);
    for i in 0..n {
        let mut accepted = None;
        for _ in 0..100 {
            let env = random_envelope(&mut rng, mel_bins);
            let f0_base = rng.gen_range(100.0..240.0);
            let spec = SpeakerSpec {
                id: format!("s{i:02}"),
                role: SpeakerRole::Pool,
                envelope: env,
                f0_base,
                f0_range: f0_base * rng.gen_range(0.15..0.25),
                jitter: rng.gen_range(0.002..0.008),
            };
            if out.iter().all(|o| cosine(&o.envelope, &spec.envelope) < MAX_ENVELOPE_COSINE) {
                accepted = Some(spec);
                break;
            }
        }
        out.push(accepted.ok_or_else(|| {
            Error::InvalidArgument(format!("could not separate speaker {i} from the others after 100 draws"))
        })?);
    }
    Ok(out)
}

/// Speaker-independent content: phoneme segments plus a normalised
/// prosody pattern in `[-1, 1]` on the frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Content {
    pub segments: Vec<(u8, usize)>,
    pub pattern: Vec<f32>,
    /// Per-frame relative shift of the resonance frequencies: how this
    /// token of the phoneme is realised. Empty means none.
    pub detune: Vec<f32>,
}

impl Content {
    pub fn frames(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    pub fn frame_labels(&self) -> Vec<u8> {
        self.segments.iter().flat_map(|&(p, d)| std::iter::repeat_n(p, d)).collect()
    }

    /// Random content of exactly `frames` frames.
    pub fn random(rng: &mut ChaCha8Rng, frames: usize, min_dur: usize, max_dur: usize) -> Self {
        let mut segments: Vec<(u8, usize)> = Vec::new();
        let mut left = frames;
        while left > 0 {
            let p = rng.gen_range(0..NUM_PHONEMES) as u8;
            let d = rng.gen_range(min_dur..=max_dur).min(left);
            if d < min_dur && !segments.is_empty() {
                segments.last_mut().unwrap().1 += d;
            } else {
                segments.push((p, d));
            }
            left -= d;
        }
        let sec = frames as f64 / 100.0;
        let comps: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.3..2.5), rng.gen_range(0.3..1.0), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let decl = rng.gen_range(-1.0..0.2);
        let raw: Vec<f64> = (0..frames)
            .map(|t| {
                let s = t as f64 / 100.0;
                decl * (s / sec.max(1e-9) - 0.5)
                    + comps.iter().map(|(f, a, ph)| a * (std::f64::consts::TAU * f * s + ph).sin()).sum::<f64>()
            })
            .collect();
        let peak = raw.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-9);
        Self { segments, pattern: raw.iter().map(|v| (v / peak) as f32).collect(), detune: Vec::new() }
    }

    /// Draws a token realisation: each segment's resonances shift by a
    /// uniform factor in `[-token, token]`, and each frame wobbles around
    /// that by a further uniform factor in `[-wobble, wobble]`.
    pub fn detuned(mut self, rng: &mut ChaCha8Rng, token: f64, wobble: f64) -> Self {
        let mut out = Vec::with_capacity(self.frames());
        for &(_, d) in &self.segments {
            let base = if token > 0.0 { rng.gen_range(-token..=token) } else { 0.0 };
            for _ in 0..d {
                out.push((base + if wobble > 0.0 { rng.gen_range(-wobble..=wobble) } else { 0.0 }) as f32);
            }
        }
        self.detune = out;
        self
    }

    fn frame_detune(&self) -> Vec<f64> {
        if self.detune.is_empty() {
            return vec![0.0; self.frames()];
        }
        self.detune.iter().map(|v| *v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Index into the corpus speaker list.
    pub speaker: usize,
    pub phonemes: Vec<u8>,
    pub f0: Vec<f32>,
    pub wave: Vec<f32>,
    /// Frontend log-mel features, one row per label frame.
    pub mel: Tensor,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.phonemes.len()
    }

    pub fn voiced(&self) -> Vec<bool> {
        self.phonemes.iter().map(|p| PHONEMES[*p as usize].voiced).collect()
    }
}

/// Linear interpolation of per-frame knots at sample `n`.
#[inline]
fn knot_pos(n: usize, audio: &AudioConfig, frames: usize) -> (usize, usize, f64) {
    let u = (n as f64 - audio.frame_centre(0)) / audio.hop as f64;
    let t0 = (u.floor().max(0.0) as usize).min(frames - 1);
    let t1 = (t0 + 1).min(frames - 1);
    let fr = (u - t0 as f64).clamp(0.0, 1.0);
    (t0, t1, fr)
}

/// Renders `content` with speaker `spk`; `seed` drives noise and jitter.
pub fn synthesize_utterance(content: &Content, spk: &SpeakerSpec, seed: u64, audio: &AudioConfig) -> Result<(Vec<f32>, Vec<f32>)> {
    if content.segments.is_empty() {
        return Err(Error::InvalidArgument("empty content".into()));
    }
    if let Some((p, d)) = content.segments.iter().find(|s| s.1 < 3) {
        return Err(Error::InvalidArgument(format!("phoneme {p} lasts {d} frames, need >= 3")));
    }
    let frames = content.frames();
    if content.pattern.len() != frames {
        return Err(Error::InvalidArgument("pattern length differs from frame count".into()));
    }
    if !content.detune.is_empty() && content.detune.len() != frames {
        return Err(Error::InvalidArgument("detune needs one entry per frame".into()));
    }
    let labels = content.frame_labels();
    let detune = content.frame_detune();
    let sr = audio.sample_rate as f64;
    let len = frames * audio.hop;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let f0: Vec<f32> = content.pattern.iter().map(|p| (spk.f0_base + spk.f0_range * *p as f64) as f32).collect();
    let jit: Vec<f64> = (0..frames).map(|_| 1.0 + spk.jitter * rng.sample::<f64, _>(StandardNormal)).collect();

    // harmonic amplitude knots
    let ceiling = HARMONIC_CEILING * audio.nyquist();
    let max_h = (ceiling / f0.iter().cloned().fold(f32::INFINITY, f32::min) as f64).floor() as usize;
    let mut amp = vec![0f64; frames * max_h];
    for t in 0..frames {
        let ph = &PHONEMES[labels[t] as usize];
        if !ph.voiced {
            continue;
        }
        for h in 1..=max_h {
            let f = h as f64 * f0[t] as f64;
            if f >= ceiling {
                break;
            }
            amp[t * max_h + h - 1] = ph.response_shifted(f, detune[t]) * spk.gain(f, audio) / h as f64;
        }
    }

    let mut out = vec![0f64; len];
    let mut phase = 0.0f64;
    let mut a = vec![0f64; max_h];
    for (n, o) in out.iter_mut().enumerate() {
        let (t0, t1, fr) = knot_pos(n, audio, frames);
        let f = (f0[t0] as f64 * jit[t0]) * (1.0 - fr) + (f0[t1] as f64 * jit[t1]) * fr;
        phase = (phase + std::f64::consts::TAU * f / sr) % std::f64::consts::TAU;
        let mut active = 0;
        for h in 0..max_h {
            a[h] = amp[t0 * max_h + h] * (1.0 - fr) + amp[t1 * max_h + h] * fr;
            if a[h] != 0.0 {
                active = h + 1;
            }
        }
        if active == 0 {
            continue;
        }
        let c2 = 2.0 * phase.cos();
        let (mut prev, mut cur) = (0.0, phase.sin());
        let mut acc = 0.0;
        for ah in a.iter().take(active) {
            acc += ah * cur;
            let next = c2 * cur - prev;
            prev = cur;
            cur = next;
        }
        *o = acc;
    }

    // shaped noise for unvoiced frames, overlap-added with a sqrt-Hann window
    let seg = NOISE_SEGMENT;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(seg);
    let win: Vec<f64> = dsp::hann(seg).iter().map(|w| w.sqrt()).collect();
    let mut spec = vec![Complex::new(0.0, 0.0); seg];
    for t in 0..frames {
        let ph = &PHONEMES[labels[t] as usize];
        if ph.voiced {
            continue;
        }
        for k in 0..=seg / 2 {
            let f = k as f64 * sr / seg as f64;
            let s = ph.response_shifted(f, detune[t]) * spk.gain(f, audio);
            let (re, im): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            spec[k] = if k == 0 || k == seg / 2 {
                Complex::new(re * s, 0.0)
            } else {
                Complex::new(re * s, im * s) * std::f64::consts::FRAC_1_SQRT_2
            };
            if k > 0 && k < seg / 2 {
                spec[seg - k] = spec[k].conj();
            }
        }
        ifft.process(&mut spec);
        let start = audio.frame_centre(t) as i64 - (seg / 2) as i64;
        for i in 0..seg {
            let n = start + i as i64;
            if n >= 0 && (n as usize) < len {
                out[n as usize] += spec[i].re / (seg as f64).sqrt() * win[i];
            }
        }
    }

    let r = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    let g = if r > 0.0 { TARGET_RMS / r } else { 0.0 };
    let mut wave: Vec<f32> = out.iter().map(|v| (v * g) as f32).collect();
    dsp::quantize_pcm16(&mut wave);
    Ok((wave, f0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Recognizer training.
    Asr,
    /// Acoustic-model training (fine-tune split for target speakers).
    Am,
    /// Training data for the evaluation judge recognizer.
    Judge,
    /// Speaker-encoder training and centroid estimation.
    Spk,
    /// Held-out evaluation.
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Asr, Split::Am, Split::Judge, Split::Spk, Split::Test];
}

/// Utterances per split for one speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub asr: usize,
    pub am: usize,
    pub judge: usize,
    pub spk: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.asr + self.am + self.judge + self.spk + self.test
    }

    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Asr => self.asr,
            Split::Am => self.am,
            Split::Judge => self.judge,
            Split::Spk => self.spk,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub pool_speakers: usize,
    pub target_speakers: usize,
    pub pool_split: SplitCounts,
    pub target_split: SplitCounts,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub min_phoneme_frames: usize,
    pub max_phoneme_frames: usize,
    /// Peak size in dB of a smooth per-utterance envelope offset
    /// (recording-session variation around each speaker's envelope).
    pub session_db: f64,
    /// Maximum relative resonance shift of a phoneme token.
    pub formant_detune: f64,
    /// Maximum additional per-frame resonance shift within a token.
    pub formant_wobble: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pool_speakers: 8,
            target_speakers: 2,
            pool_split: SplitCounts { asr: 40, am: 30, judge: 20, spk: 20, test: 10 },
            target_split: SplitCounts { asr: 0, am: 24, judge: 8, spk: 20, test: 8 },
            min_seconds: 2.0,
            max_seconds: 4.0,
            min_phoneme_frames: 3,
            max_phoneme_frames: 8,
            session_db: 3.0,
            formant_detune: 0.1,
            formant_wobble: 0.25,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("corpus: {m}")));
        if self.pool_speakers + self.target_speakers < 2 || self.target_speakers == 0 {
            return bad("need at least one target and two speakers in total".into());
        }
        if !(self.min_seconds > 0.0 && self.min_seconds <= self.max_seconds) {
            return bad(format!("bad duration range {}..{}", self.min_seconds, self.max_seconds));
        }
        if self.min_phoneme_frames < 3 || self.min_phoneme_frames > self.max_phoneme_frames {
            return bad("phoneme durations must satisfy 3 <= min <= max".into());
        }
        if !(0.0..0.5).contains(&self.formant_detune) || !(0.0..0.5).contains(&self.formant_wobble) {
            return bad(format!("formant shifts {} / {} outside 0..0.5", self.formant_detune, self.formant_wobble));
        }
        if !(0.0..=20.0).contains(&self.session_db) {
            return bad(format!("session variation {} dB outside 0..=20", self.session_db));
        }
        if self.pool_split.total() == 0 || self.target_split.total() == 0 {
            return bad("empty split counts".into());
        }
        Ok(())
    }

    /// Expected total seconds per target speaker.
    pub fn target_seconds(&self) -> f64 {
        self.target_split.total() as f64 * 0.5 * (self.min_seconds + self.max_seconds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttEntry {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    pub frames: usize,
    pub wav_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub audio: AudioConfig,
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerSpec>,
    pub utterances: Vec<UttEntry>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub utts: Vec<Utterance>,
}

fn wav_hash(w: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in w {
        h.update(((v.clamp(-1.0, 1.0) * 32767.0).round() as i16).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Generates the full corpus in memory.
pub fn build_corpus(cfg: &CorpusConfig, audio: &AudioConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    audio.validate()?;
    let n = cfg.pool_speakers + cfg.target_speakers;
    let mut speakers = make_speakers(n, audio.mel_bins, rng::derive(seed, "corpus"))?;
    for (i, s) in speakers.iter_mut().enumerate() {
        if i < cfg.pool_speakers {
            s.id = format!("p{i:02}");
        } else {
            s.role = SpeakerRole::Target;
            s.id = format!("t{:02}", i - cfg.pool_speakers);
        }
    }
    let mel = MelExtractor::new(*audio)?;
    let mut utts = Vec::new();
    let mut entries = Vec::new();
    for (si, spk) in speakers.iter().enumerate() {
        let counts = if spk.role == SpeakerRole::Pool { &cfg.pool_split } else { &cfg.target_split };
        let mut j = 0;
        for split in Split::ALL {
            for _ in 0..counts.get(split) {
                let id = format!("{}_{j:04}", spk.id);
                let mut crng = rng::stream(seed, &format!("content/{id}"));
                let secs = crng.gen_range(cfg.min_seconds..=cfg.max_seconds);
                let frames = ((secs * 1000.0 / audio.frame_ms()).round() as usize).max(cfg.min_phoneme_frames);
                let content = Content::random(&mut crng, frames, cfg.min_phoneme_frames, cfg.max_phoneme_frames)
                    .detuned(&mut crng, cfg.formant_detune, cfg.formant_wobble);
                let session = session_speaker(spk, cfg.session_db, &mut rng::stream(seed, &format!("session/{id}")));
                let (wave, f0) = synthesize_utterance(&content, &session, rng::derive(seed, &format!("render/{id}")), audio)?;
                entries.push(UttEntry { id: id.clone(), speaker: si, split, frames, wav_sha256: wav_hash(&wave) });
                utts.push(Utterance { id, speaker: si, phonemes: content.frame_labels(), f0, mel: mel.frontend(&wave), wave });
                j += 1;
            }
        }
    }
    Ok(Corpus { manifest: CorpusManifest { seed, audio: *audio, config: cfg.clone(), speakers, utterances: entries }, utts })
}

impl Corpus {
    pub fn speakers(&self) -> &[SpeakerSpec] {
        &self.manifest.speakers
    }

    pub fn audio(&self) -> &AudioConfig {
        &self.manifest.audio
    }

    pub fn speaker_index(&self, id: &str) -> Result<usize> {
        self.manifest.speakers.iter().position(|s| s.id == id).ok_or_else(|| Error::UnknownSpeaker(id.to_string()))
    }

    pub fn pool(&self) -> Vec<usize> {
        self.role_indices(SpeakerRole::Pool)
    }

    pub fn targets(&self) -> Vec<usize> {
        self.role_indices(SpeakerRole::Target)
    }

    fn role_indices(&self, role: SpeakerRole) -> Vec<usize> {
        (0..self.manifest.speakers.len()).filter(|i| self.manifest.speakers[*i].role == role).collect()
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.manifest.utterances[i].split
    }

    /// Utterances in `split` whose speaker satisfies `keep`.
    pub fn select(&self, split: Split, keep: impl Fn(usize) -> bool) -> Vec<&Utterance> {
        self.utts.iter().enumerate().filter(|(i, u)| self.split_of(*i) == split && keep(u.speaker)).map(|(_, u)| u).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.select(split, |_| true)
    }

    pub fn utterance(&self, id: &str) -> Result<&Utterance> {
        self.utts
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown utterance {id:?}")))
    }

    /// Total seconds of audio for speaker `s`.
    pub fn seconds(&self, s: usize) -> f64 {
        let sr = self.audio().sample_rate as f64;
        self.utts.iter().filter(|u| u.speaker == s).map(|u| u.wave.len() as f64 / sr).sum()
    }

    /// Writes `wav/<id>.wav`, `latents/<id>.bin` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("wav"))?;
        fs::create_dir_all(dir.join("latents"))?;
        for u in &self.utts {
            let w = dsp::Waveform::new(u.wave.clone(), self.audio().sample_rate)?;
            dsp::write_wav(&dir.join("wav").join(format!("{}.wav", u.id)), &w)?;
            let mut blob = Vec::with_capacity(u.frames() * 8);
            for p in &u.phonemes {
                blob.extend_from_slice(&(*p as f32).to_le_bytes());
            }
            for f in &u.f0 {
                blob.extend_from_slice(&f.to_le_bytes());
            }
            fs::write(dir.join("latents").join(format!("{}.bin", u.id)), blob)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingArtifact(mpath));
        }
        let manifest: CorpusManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
        let mel = MelExtractor::new(manifest.audio)?;
        let mut utts = Vec::with_capacity(manifest.utterances.len());
        for e in &manifest.utterances {
            let wpath = dir.join("wav").join(format!("{}.wav", e.id));
            let wave = dsp::read_wav(&wpath)?.samples;
            if wav_hash(&wave) != e.wav_sha256 {
                return Err(Error::Format { path: wpath, detail: "audio checksum mismatch".into() });
            }
            let lpath = dir.join("latents").join(format!("{}.bin", e.id));
            if !lpath.exists() {
                return Err(Error::MissingArtifact(lpath));
            }
            let raw: Vec<f32> =
                fs::read(&lpath)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if raw.len() != 2 * e.frames || wave.len() != e.frames * manifest.audio.hop {
                return Err(Error::Format { path: lpath, detail: "frame count mismatch".into() });
            }
            utts.push(Utterance {
                id: e.id.clone(),
                speaker: e.speaker,
                phonemes: raw[..e.frames].iter().map(|v| *v as u8).collect(),
                f0: raw[e.frames..].to_vec(),
                mel: mel.frontend(&wave),
                wave,
            });
        }
        Ok(Self { manifest, utts })
    }
}

/// Chi-square test of independence between speaker and phoneme-token
/// counts over the given speakers. Returns the p-value.
pub fn phoneme_independence_pvalue(corpus: &Corpus, speakers: &[usize]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let mut table: BTreeMap<usize, [f64; NUM_PHONEMES]> = BTreeMap::new();
    for u in corpus.utts.iter().filter(|u| speakers.contains(&u.speaker)) {
        let row = table.entry(u.speaker).or_insert([0.0; NUM_PHONEMES]);
        let mut prev = None;
        for p in &u.phonemes {
            if prev != Some(*p) {
                row[*p as usize] += 1.0;
            }
            prev = Some(*p);
        }
    }
    let rows: Vec<[f64; NUM_PHONEMES]> = table.into_values().collect();
    let total: f64 = rows.iter().flatten().sum();
    let col: Vec<f64> = (0..NUM_PHONEMES).map(|j| rows.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for r in &rows {
        let rs: f64 = r.iter().sum();
        for j in 0..NUM_PHONEMES {
            let e = rs * col[j] / total;
            if e > 0.0 {
                stat += (r[j] - e).powi(2) / e;
            }
        }
    }
    let dof = ((rows.len() - 1) * (NUM_PHONEMES - 1)) as f64;
    1.0 - ChiSquared::new(dof).expect("positive dof").cdf(stat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speakers_are_deterministic_and_separated() {
        let a = make_speakers(2, 20, 5).unwrap();
        assert_eq!(a, make_speakers(2, 20, 5).unwrap());
        let many = make_speakers(12, 20, 9).unwrap();
        for i in 0..many.len() {
            assert!(many[i].envelope.iter().all(|g| *g > 0.0));
            assert!((80.0..=300.0).contains(&many[i].f0_base));
            for j in 0..i {
                assert!(cosine(&many[i].envelope, &many[j].envelope) < MAX_ENVELOPE_COSINE);
            }
        }
        assert!(make_speakers(1, 20, 5).is_err());
    }

    #[test]
    fn content_respects_durations() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for frames in [5, 17, 250] {
            let c = Content::random(&mut r, frames, 5, 14);
            assert_eq!(c.frames(), frames);
            assert!(c.segments.iter().all(|s| s.1 >= 5));
            assert!(c.pattern.iter().all(|p| p.abs() <= 1.0));
        }
    }

    #[test]
    fn synthesis_rejects_bad_content() {
        let a = AudioConfig::default();
        let s = SpeakerSpec::neutral(20);
        let empty = Content { segments: vec![], pattern: vec![], detune: vec![] };
        assert!(synthesize_utterance(&empty, &s, 0, &a).is_err());
        let short = Content { segments: vec![(0, 2)], pattern: vec![0.0; 2], detune: vec![] };
        assert!(synthesize_utterance(&short, &s, 0, &a).is_err());
    }
}
