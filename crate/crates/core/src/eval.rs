//! Objective metrics: judged content accuracy, pitch correlation and
//! speaker-embedding distance.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::dsp::{estimate_f0, AudioConfig, F0Config, MelExtractor, Waveform};
use crate::error::{Error, Result};
use crate::numerics::params::{glorot_bound, uniform};
use crate::numerics::{kernels, Adam, AdamConfig, Graph, ModelBundle, ParamSet, Tensor};
use crate::recognizer::Recognizer;
use crate::rng;
use crate::train::{cosine_lr, crop, mel_stats, standardize, TrainLog};

/// Minimum number of frames voiced in both tracks for a pitch correlation.
pub const MIN_VOICED_OVERLAP: usize = 10;

/// Fraction of frames where the judge's phoneme prediction on the
/// converted audio matches the source's ground-truth labels.
pub fn content_accuracy(converted: &Waveform, truth: &Utterance, judge: &Recognizer, mel: &MelExtractor) -> Result<f64> {
    content_accuracy_mel(&mel.frontend(&converted.samples), truth, judge)
}

pub fn content_accuracy_mel(mel: &Tensor, truth: &Utterance, judge: &Recognizer) -> Result<f64> {
    let n = truth.frames();
    if mel.rows().abs_diff(n) > 1 {
        return Err(Error::InvalidArgument(format!("converted audio has {} frames, source has {n}", mel.rows())));
    }
    let pred = judge.predict(mel)?;
    let m = pred.len().min(n);
    if m == 0 {
        return Err(Error::InvalidArgument("empty utterance".into()));
    }
    let hits = pred.iter().zip(&truth.phonemes).take(m).filter(|(p, t)| **p == **t as usize).count();
    Ok(hits as f64 / n.max(pred.len()) as f64)
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pitch correlation between two F0 tracks over frames voiced in both.
/// `None` flags fewer than [`MIN_VOICED_OVERLAP`] shared voiced frames.
pub fn ppc_tracks(a: &[f32], av: &[bool], b: &[f32], bv: &[bool]) -> Option<f64> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for i in 0..a.len().min(b.len()) {
        if av[i] && bv[i] {
            x.push(a[i] as f64);
            y.push(b[i] as f64);
        }
    }
    if x.len() < MIN_VOICED_OVERLAP {
        return None;
    }
    pearson(&x, &y)
}

/// Pitch correlation between converted audio and the source recording;
/// both tracks come from the same autocorrelation tracker.
pub fn ppc(converted: &Waveform, truth: &Utterance, audio: &AudioConfig, f0: &F0Config) -> Result<Option<f64>> {
    let a = estimate_f0(&converted.samples, audio, f0)?;
    let b = estimate_f0(&truth.wave, audio, f0)?;
    Ok(ppc_tracks(&a.f0, &a.voiced, &b.f0, &b.voiced))
}

pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        d += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    let den = (na * nb).sqrt();
    if den == 0.0 {
        return 1.0;
    }
    (1.0 - d / den).clamp(0.0, 2.0)
}

pub const SPEAKER_BUNDLE_KIND: &str = "speaker_encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerEncoderConfig {
    pub audio: AudioConfig,
    pub hidden: usize,
    pub embedding: usize,
    pub speakers: Vec<String>,
}

impl SpeakerEncoderConfig {
    pub fn new(speakers: Vec<String>) -> Self {
        Self { audio: AudioConfig::default(), hidden: 64, embedding: 16, speakers }
    }

    /// Speakers plus the non-speech class.
    fn classes(&self) -> usize {
        self.speakers.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub adam: AdamConfig,
    pub final_lr_fraction: f64,
    /// Share of each batch drawn from random coloured noise, labelled as the
    /// non-speech class.
    pub noise_fraction: f64,
}

impl Default for SpeakerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 16,
            crop_frames: 100,
            adam: AdamConfig { lr: 3e-3, clip_norm: Some(5.0), ..Default::default() },
            final_lr_fraction: 0.1,
            noise_fraction: 0.125,
        }
    }
}

/// First-order coloured Gaussian noise with a log-uniform level, the
/// non-speech examples of speaker-encoder training.
fn noise_clip<R: Rng>(r: &mut R, len: usize) -> Vec<f32> {
    let level = 10f64.powf(r.gen_range(-2.5..-0.3));
    let tilt = r.gen_range(-0.9..0.9);
    let mut prev = 0.0f64;
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let w: f64 = r.sample(StandardNormal);
            prev = tilt * prev + w;
            prev
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v *= level / rms);
    out.into_iter().map(|v| v as f32).collect()
}

const NOISE_CLIPS: usize = 64;
const COSINE_SCALE: f64 = 16.0;
const COSINE_MARGIN: f32 = 0.2;

/// Utterance-level speaker classifier. Frames pass through a two-layer
/// MLP, are averaged over time and projected to the embedding. Training
/// uses an additive-margin cosine softmax over the speakers plus one
/// non-speech class fed with noise, so classes separate by angle and noise
/// stays away from every speaker centroid.
#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub cfg: SpeakerEncoderConfig,
    pub params: ParamSet,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Per-speaker mean embedding, keyed by speaker id.
    pub centroids: BTreeMap<String, Vec<f32>>,
}

impl SpeakerEncoder {
    fn init(cfg: SpeakerEncoderConfig, mean: Vec<f32>, std: Vec<f32>, seed: u64) -> Self {
        let mut r = rng::stream(seed, "speaker/init");
        let mut params = ParamSet::new();
        let (m, h, e, s) = (cfg.audio.mel_bins, cfg.hidden, cfg.embedding, cfg.classes());
        params.add("l0.w", uniform(&mut r, &[m, h], glorot_bound(m, h)));
        params.add("l0.b", Tensor::zeros(&[h]));
        params.add("l1.w", uniform(&mut r, &[h, h], glorot_bound(h, h)));
        params.add("l1.b", Tensor::zeros(&[h]));
        params.add("emb.w", uniform(&mut r, &[h, e], glorot_bound(h, e)));
        params.add("emb.b", Tensor::zeros(&[e]));
        params.add("cls.w", uniform(&mut r, &[e, s], glorot_bound(e, s)));
        Self { cfg, params, mean, std, centroids: BTreeMap::new() }
    }

    fn p(&self, n: &str) -> &Tensor {
        self.params.get(n).expect("registered at init")
    }

    fn raw_embedding(&self, mel: &Tensor) -> Result<Vec<f32>> {
        if mel.rows() == 0 {
            return Err(Error::InvalidArgument("empty mel".into()));
        }
        let x = standardize(mel, &self.mean, &self.std)?;
        let h = kernels::affine(&x, self.p("l0.w"), Some(self.p("l0.b")))?.map(|v| v.max(0.0));
        let h = kernels::affine(&h, self.p("l1.w"), Some(self.p("l1.b")))?.map(|v| v.max(0.0));
        let pooled = Tensor::new(vec![1, h.cols()], h.col_means())?;
        Ok(kernels::affine(&pooled, self.p("emb.w"), Some(self.p("emb.b")))?.into_data())
    }

    pub fn embed_mel(&self, mel: &Tensor) -> Result<Vec<f32>> {
        self.raw_embedding(mel)
    }

    pub fn embed(&self, w: &Waveform, mel: &MelExtractor) -> Result<Vec<f32>> {
        self.embed_mel(&mel.frontend(&w.samples))
    }

    /// Predicted class for `mel`: a speaker row, or `speakers.len()` for
    /// non-speech.
    pub fn classify(&self, mel: &Tensor) -> Result<usize> {
        let e = self.raw_embedding(mel)?;
        let w = self.p("cls.w");
        let cos: Vec<f32> = (0..w.cols()).map(|c| (1.0 - cosine_distance(&e, &(0..w.rows()).map(|r| w.row(r)[c]).collect::<Vec<_>>())) as f32).collect();
        Ok(argmax(&cos))
    }

    pub fn train(utts: &[&Utterance], cfg: SpeakerEncoderConfig, tcfg: &SpeakerTrainConfig, seed: u64) -> Result<(Self, TrainLog)> {
        if utts.is_empty() {
            return Err(Error::InvalidArgument("no speaker training utterances".into()));
        }
        if let Some(u) = utts.iter().find(|u| u.speaker >= cfg.speakers.len()) {
            return Err(Error::UnknownSpeaker(u.id.clone()));
        }
        let (mean, std) = mel_stats(utts);
        let mut enc = Self::init(cfg, mean, std, seed);
        let mut xs: Vec<Tensor> = utts.iter().map(|u| standardize(&u.mel, &enc.mean, &enc.std)).collect::<Result<_>>()?;
        let noise_label = enc.cfg.speakers.len();
        let first_noise = xs.len();
        if tcfg.noise_fraction > 0.0 {
            let mel = MelExtractor::new(enc.cfg.audio)?;
            let len = enc.cfg.audio.hop * tcfg.crop_frames.max(1) * 2;
            let mut nr = rng::stream(seed, "speaker/noise");
            for _ in 0..NOISE_CLIPS {
                xs.push(standardize(&mel.frontend(&noise_clip(&mut nr, len)), &enc.mean, &enc.std)?);
            }
        }
        let mut opt = Adam::new(tcfg.adam, &enc.params);
        let mut r = rng::stream(seed, "speaker/batches");
        let mut log = TrainLog::default();
        for step in 0..tcfg.steps {
            opt.set_lr(cosine_lr(tcfg.adam.lr, tcfg.final_lr_fraction, step, tcfg.steps));
            let (loss, grads) = {
                let mut g = Graph::new(&enc.params);
                let mut pooled = Vec::with_capacity(tcfg.batch);
                let mut labels = Vec::with_capacity(tcfg.batch);
                let (w0, b0, w1, b1) = (g.param("l0.w")?, g.param("l0.b")?, g.param("l1.w")?, g.param("l1.b")?);
                for _ in 0..tcfg.batch {
                    let i = if tcfg.noise_fraction > 0.0 && r.gen_bool(tcfg.noise_fraction.min(1.0)) {
                        r.gen_range(first_noise..xs.len())
                    } else {
                        r.gen_range(0..first_noise)
                    };
                    let (s, n) = crop(&mut r, xs[i].rows(), tcfg.crop_frames, 1);
                    let x = g.input(xs[i].slice_rows(s, s + n))?;
                    let h = g.affine(x, w0, Some(b0))?;
                    let h = g.relu(h)?;
                    let h = g.affine(h, w1, Some(b1))?;
                    let h = g.relu(h)?;
                    let avg = g.input(Tensor::filled(&[1, n], 1.0 / n as f32))?;
                    pooled.push(g.affine(avg, h, None)?);
                    labels.push(if i < first_noise { utts[i].speaker } else { noise_label });
                }
                let p = concat_rows(&mut g, &pooled)?;
                let (we, be, wc) = (g.param("emb.w")?, g.param("emb.b")?, g.param("cls.w")?);
                let e = g.affine(p, we, Some(be))?;
                let e = normalize_rows(&mut g, e)?;
                let wc = normalize_cols(&mut g, wc)?;
                let cos = g.affine(e, wc, None)?;
                let mut margin = Tensor::zeros(&[labels.len(), enc.cfg.classes()]);
                for (row, &l) in labels.iter().enumerate() {
                    margin.data_mut()[row * enc.cfg.classes() + l] = COSINE_MARGIN;
                }
                let m = g.input(margin)?;
                let cos = g.sub(cos, m)?;
                let logits = g.scale(cos, COSINE_SCALE)?;
                let loss = g.cross_entropy(logits, &labels)?;
                (g.value(loss).data()[0] as f64, g.backward(loss)?)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: "speaker encoder".into(), step, detail: format!("loss {loss}") });
            }
            log.losses.push(loss);
            opt.step(&mut enc.params, &grads)?;
        }
        Ok((enc, log))
    }

    /// Sets each speaker's centroid to the mean embedding of its
    /// utterances in `utts`; every speaker present needs `min_per_speaker`.
    pub fn set_centroids(&mut self, utts: &[&Utterance], min_per_speaker: usize) -> Result<()> {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for u in utts {
            let e = self.embed_mel(&u.mel)?;
            let entry = sums.entry(u.speaker).or_insert_with(|| (vec![0.0; e.len()], 0));
            for (a, v) in entry.0.iter_mut().zip(&e) {
                *a += *v as f64;
            }
            entry.1 += 1;
        }
        let mut out = BTreeMap::new();
        for (s, (sum, n)) in sums {
            let id = self.cfg.speakers.get(s).ok_or_else(|| Error::UnknownSpeaker(format!("#{s}")))?;
            if n < min_per_speaker {
                return Err(Error::InvalidArgument(format!("speaker {id} has {n} centroid utterances, need {min_per_speaker}")));
            }
            out.insert(id.clone(), sum.iter().map(|v| (v / n as f64) as f32).collect());
        }
        self.centroids = out;
        Ok(())
    }

    pub fn centroid(&self, speaker: &str) -> Result<&[f32]> {
        self.centroids.get(speaker).map(|v| v.as_slice()).ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))
    }

    /// Cosine distances from an embedding to the target and source centroids.
    pub fn sed(&self, embedding: &[f32], target: &str, source: &str) -> Result<(f64, f64)> {
        Ok((cosine_distance(embedding, self.centroid(target)?), cosine_distance(embedding, self.centroid(source)?)))
    }

    /// Held-out classification accuracy.
    pub fn accuracy(&self, utts: &[&Utterance]) -> Result<f64> {
        let mut hits = 0;
        for u in utts {
            hits += usize::from(self.classify(&u.mel)? == u.speaker);
        }
        Ok(hits as f64 / utts.len().max(1) as f64)
    }

    pub fn to_bundle(&self) -> ModelBundle {
        let mut stats = BTreeMap::new();
        stats.insert("mel_mean".to_string(), self.mean.clone());
        stats.insert("mel_std".to_string(), self.std.clone());
        for (id, c) in &self.centroids {
            stats.insert(format!("centroid/{id}"), c.clone());
        }
        ModelBundle {
            kind: SPEAKER_BUNDLE_KIND.into(),
            arch: serde_json::to_value(&self.cfg).expect("config serialises"),
            params: self.params.clone(),
            stats,
        }
    }

    pub fn from_bundle(b: &ModelBundle) -> Result<Self> {
        if b.kind != SPEAKER_BUNDLE_KIND {
            return Err(Error::InvalidArgument(format!("bundle kind {} is not a speaker encoder", b.kind)));
        }
        let cfg: SpeakerEncoderConfig = serde_json::from_value(b.arch.clone())?;
        let mut enc = Self::init(cfg, b.stat("mel_mean")?.to_vec(), b.stat("mel_std")?.to_vec(), 0);
        if enc.params.names() != b.params.names() || enc.params.tensors().iter().zip(b.params.tensors()).any(|(a, c)| a.shape() != c.shape()) {
            return Err(Error::InvalidArgument("speaker encoder parameters do not match its architecture".into()));
        }
        enc.params = b.params.clone();
        enc.centroids = b
            .stats
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("centroid/").map(|id| (id.to_string(), v.clone())))
            .collect();
        Ok(enc)
    }
}

fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().fold((0, f32::NEG_INFINITY), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) }).0
}

/// Scales every row of `x` to unit length.
fn normalize_rows(g: &mut Graph<'_>, x: crate::numerics::NodeId) -> Result<crate::numerics::NodeId> {
    let d = g.value(x).cols();
    let sq = g.mul(x, x)?;
    let ss = g.sum_cols(sq)?;
    let inv = inv_sqrt(g, ss)?;
    let ones = g.input(Tensor::filled(&[1, d], 1.0))?;
    let wide = g.affine(inv, ones, None)?;
    g.mul(x, wide)
}

/// Scales every column of `w` to unit length.
fn normalize_cols(g: &mut Graph<'_>, w: crate::numerics::NodeId) -> Result<crate::numerics::NodeId> {
    let rows = g.value(w).rows();
    let sq = g.mul(w, w)?;
    let ones = g.input(Tensor::filled(&[1, rows], 1.0))?;
    let ss = g.affine(ones, sq, None)?;
    let inv = inv_sqrt(g, ss)?;
    let tall = g.repeat_rows(inv, rows)?;
    g.mul(w, tall)
}

fn inv_sqrt(g: &mut Graph<'_>, x: crate::numerics::NodeId) -> Result<crate::numerics::NodeId> {
    let x = g.add_scalar(x, 1e-12)?;
    let l = g.log(x)?;
    let l = g.scale(l, -0.5)?;
    g.exp(l)
}

/// Stacks `[1×d]` nodes into `[n×d]` by summing one-hot placed copies.
fn concat_rows(g: &mut Graph<'_>, rows: &[crate::numerics::NodeId]) -> Result<crate::numerics::NodeId> {
    let n = rows.len();
    let mut acc = None;
    for (i, r) in rows.iter().enumerate() {
        let mut sel = Tensor::zeros(&[n, 1]);
        sel.data_mut()[i] = 1.0;
        let s = g.input(sel)?;
        let placed = g.affine(s, *r, None)?;
        acc = Some(match acc {
            Some(a) => g.add(a, placed)?,
            None => placed,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("no rows".into()))
}
