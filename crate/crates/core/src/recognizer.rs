//! Framewise phoneme recognizer whose hidden layers double as IBF taps.
//!
//! Layer 1 is a linear convolutional projection of the mel input. The next
//! `residual_layers` blocks are `x + relu(conv(x))` and the rest up to
//! `K-1` are `relu(conv(x))`; each ends in layer normalisation. Shallow
//! taps therefore stay close to the input spectrum while deeper ones are
//! free to discard it.
//! Layer `K` is an affine map followed by softmax, so tap `K` is the phonetic posteriorgram. The
//! streaming variant uses the same stack with block-causal convolutions:
//! no tap reaches into a later chunk, so output frame `t` depends only on
//! input frames in chunks `<= chunk(t)`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, NUM_PHONEMES};
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::params::{glorot_bound, uniform};
use crate::numerics::{Adam, AdamConfig, ConvSpec, Graph, ModelBundle, NodeId, ParamSet, Tensor};
use crate::rng;
use crate::train::{cosine_lr, crop, mel_stats, standardize, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    NonStreaming,
    Streaming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Total layer count K; tap K is the posteriorgram.
    pub layers: usize,
    pub width: usize,
    pub mel_bins: usize,
    pub mode: EncoderMode,
    pub chunk_frames: usize,
    /// Per-layer (left, right) taps; one entry per conv layer (K - 1).
    pub context: Vec<(usize, usize)>,
    /// Per-layer dilation; one entry per conv layer.
    pub dilations: Vec<usize>,
    /// Blocks after the input projection that carry a residual path;
    /// deeper blocks are plain `relu(conv(x))`.
    pub residual_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            width: 32,
            mel_bins: 20,
            mode: EncoderMode::NonStreaming,
            chunk_frames: 16,
            context: vec![(1, 1); 5],
            dilations: vec![1, 2, 4, 2, 1],
            residual_layers: 4,
        }
    }
}

impl EncoderConfig {
    pub fn streaming(mut self) -> Self {
        self.mode = EncoderMode::Streaming;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("encoder: {m}")));
        if self.layers < 2 {
            return bad("need at least 2 layers".into());
        }
        if self.context.len() != self.layers - 1 || self.dilations.len() != self.layers - 1 {
            return bad(format!("context/dilations need {} entries", self.layers - 1));
        }
        if self.mode == EncoderMode::Streaming && self.chunk_frames == 0 {
            return bad("streaming mode needs chunk_frames > 0".into());
        }
        if self.residual_layers > self.layers - 2 {
            return bad(format!("at most {} residual blocks", self.layers - 2));
        }
        if self.width == 0 || self.mel_bins == 0 {
            return bad("zero width".into());
        }
        Ok(())
    }

    pub fn conv_spec(&self, layer: usize) -> ConvSpec {
        let (l, r) = self.context[layer];
        let chunk = (self.mode == EncoderMode::Streaming).then_some(self.chunk_frames);
        ConvSpec::new(l, r, self.dilations[layer]).chunked(chunk)
    }

    /// Width of tap `k`.
    pub fn tap_width(&self, k: usize) -> usize {
        if k == self.layers {
            NUM_PHONEMES
        } else {
            self.width
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub adam: AdamConfig,
    /// Learning rate at the last step as a fraction of the initial one.
    pub final_lr_fraction: f64,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            crop_frames: 96,
            adam: AdamConfig { lr: 3e-3, clip_norm: Some(5.0), ..Default::default() },
            final_lr_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const BUNDLE_KIND: &str = "recognizer";

impl Recognizer {
    pub fn init(cfg: EncoderConfig, mean: Vec<f32>, std: Vec<f32>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "recognizer/init");
        let mut params = ParamSet::new();
        let mut inp = cfg.mel_bins;
        for l in 0..cfg.layers - 1 {
            let taps = cfg.conv_spec(l).taps();
            let bound = glorot_bound(inp * taps, cfg.width);
            params.add(&format!("conv{l}.w"), uniform(&mut r, &[taps, inp, cfg.width], bound));
            params.add(&format!("conv{l}.b"), Tensor::zeros(&[cfg.width]));
            params.add(&format!("ln{l}.g"), Tensor::filled(&[cfg.width], 1.0));
            params.add(&format!("ln{l}.b"), Tensor::zeros(&[cfg.width]));
            inp = cfg.width;
        }
        params.add("out.w", uniform(&mut r, &[inp, NUM_PHONEMES], glorot_bound(inp, NUM_PHONEMES)));
        params.add("out.b", Tensor::zeros(&[NUM_PHONEMES]));
        Ok(Self { cfg, params, mean, std })
    }

    pub fn layers(&self) -> usize {
        self.cfg.layers
    }

    pub fn normalize(&self, mel: &Tensor) -> Result<Tensor> {
        standardize(mel, &self.mean, &self.std)
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("parameter registered at init")
    }

    /// Block `l` applied to a convolution output `h` whose rows line up
    /// with `x`: layer 0 is a linear projection, later layers add a relu
    /// branch to their input. Every block ends in layer normalisation.
    fn block(&self, l: usize, x: &Tensor, h: Tensor) -> Result<Tensor> {
        let h = if l == 0 {
            h
        } else if self.is_residual(l) {
            let mut h = h.map(|v| v.max(0.0));
            for (a, b) in h.data_mut().iter_mut().zip(x.data()) {
                *a += b;
            }
            h
        } else {
            h.map(|v| v.max(0.0))
        };
        kernels::layer_norm(&h, self.p(&format!("ln{l}.g")), self.p(&format!("ln{l}.b")))
    }

    fn is_residual(&self, l: usize) -> bool {
        l >= 1 && l <= self.cfg.residual_layers
    }

    fn hidden(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        let h = kernels::conv1d(x, self.p(&format!("conv{l}.w")), Some(self.p(&format!("conv{l}.b"))), &self.cfg.conv_spec(l))?;
        self.block(l, x, h)
    }

    /// All taps `1..=upto` (index 0 holds tap 1).
    pub fn taps(&self, mel: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        self.check_k(upto)?;
        let mut x = self.normalize(mel)?;
        let mut out = Vec::with_capacity(upto);
        for l in 0..upto.min(self.cfg.layers - 1) {
            x = self.hidden(l, &x)?;
            out.push(x.clone());
        }
        if upto == self.cfg.layers {
            let logits = kernels::affine(&x, self.p("out.w"), Some(self.p("out.b")))?;
            out.push(kernels::softmax(&logits)?);
        }
        for t in &out {
            t.ensure_finite("recognizer")?;
        }
        Ok(out)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.cfg.layers {
            return Err(Error::InvalidArgument(format!("tap {k} outside 1..={}", self.cfg.layers)));
        }
        Ok(())
    }

    /// Intermediate bottleneck features from tap `k` (1-based).
    pub fn extract_ibf(&self, mel: &Tensor, k: usize) -> Result<Tensor> {
        Ok(self.taps(mel, k)?.pop().expect("at least one tap"))
    }

    pub fn predict(&self, mel: &Tensor) -> Result<Vec<usize>> {
        let ppg = self.extract_ibf(mel, self.cfg.layers)?;
        Ok((0..ppg.rows())
            .map(|t| ppg.row(t).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap())
            .collect())
    }

    /// Fraction of frames classified correctly.
    pub fn accuracy(&self, utts: &[&Utterance]) -> Result<f64> {
        let (mut ok, mut n) = (0usize, 0usize);
        for u in utts {
            let p = self.predict(&u.mel)?;
            ok += p.iter().zip(&u.phonemes).filter(|(a, b)| **a == **b as usize).count();
            n += p.len();
        }
        Ok(ok as f64 / n.max(1) as f64)
    }

    fn logits_graph(&self, g: &mut Graph<'_>, x: Tensor) -> Result<NodeId> {
        let mut h = g.input(x)?;
        for l in 0..self.cfg.layers - 1 {
            let (w, b) = (g.param(&format!("conv{l}.w"))?, g.param(&format!("conv{l}.b"))?);
            let c = g.conv1d(h, w, Some(b), self.cfg.conv_spec(l))?;
            h = if l == 0 {
                c
            } else if self.is_residual(l) {
                let r = g.relu(c)?;
                g.add(h, r)?
            } else {
                g.relu(c)?
            };
            let (lg, lb) = (g.param(&format!("ln{l}.g"))?, g.param(&format!("ln{l}.b"))?);
            h = g.layer_norm(h, lg, lb)?;
        }
        let (w, b) = (g.param("out.w")?, g.param("out.b")?);
        g.affine(h, w, Some(b))
    }

    /// Trains with framewise cross-entropy on random chunk-aligned crops.
    pub fn train(utts: &[&Utterance], cfg: EncoderConfig, tcfg: &RecognizerTrainConfig, seed: u64) -> Result<(Self, TrainLog)> {
        if utts.is_empty() {
            return Err(Error::InvalidArgument("no training utterances".into()));
        }
        let (mean, std) = mel_stats(utts);
        let mut model = Self::init(cfg, mean, std, seed)?;
        let normed: Vec<Tensor> = utts.iter().map(|u| model.normalize(&u.mel)).collect::<Result<_>>()?;
        let mut opt = Adam::new(tcfg.adam, &model.params);
        let mut r = rng::stream(seed, "recognizer/batches");
        let mut log = TrainLog::default();
        let align = model.cfg.chunk_frames.max(1);
        for step in 0..tcfg.steps {
            opt.set_lr(cosine_lr(tcfg.adam.lr, tcfg.final_lr_fraction, step, tcfg.steps));
            let (loss, grads) = {
                let mut g = Graph::new(&model.params);
                let mut total: Option<NodeId> = None;
                for _ in 0..tcfg.batch {
                    let i = r.gen_range(0..utts.len());
                    let (s, n) = crop(&mut r, utts[i].frames(), tcfg.crop_frames, align);
                    let labels: Vec<usize> = utts[i].phonemes[s..s + n].iter().map(|p| *p as usize).collect();
                    let logits = model.logits_graph(&mut g, normed[i].slice_rows(s, s + n))?;
                    let ce = g.cross_entropy(logits, &labels)?;
                    total = Some(match total {
                        Some(t) => g.add(t, ce)?,
                        None => ce,
                    });
                }
                let loss = g.scale(total.expect("batch > 0"), 1.0 / tcfg.batch as f64)?;
                (g.value(loss).data()[0] as f64, g.backward(loss)?)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: "recognizer".into(), step, detail: format!("loss {loss}") });
            }
            log.losses.push(loss);
            opt.step(&mut model.params, &grads)?;
        }
        Ok((model, log))
    }

    pub fn to_bundle(&self) -> ModelBundle {
        let mut stats = BTreeMap::new();
        stats.insert("mel_mean".to_string(), self.mean.clone());
        stats.insert("mel_std".to_string(), self.std.clone());
        ModelBundle {
            kind: BUNDLE_KIND.into(),
            arch: serde_json::to_value(&self.cfg).expect("config serialises"),
            params: self.params.clone(),
            stats,
        }
    }

    pub fn from_bundle(b: &ModelBundle) -> Result<Self> {
        if b.kind != BUNDLE_KIND {
            return Err(Error::InvalidArgument(format!("bundle kind {} is not a recognizer", b.kind)));
        }
        let cfg: EncoderConfig = serde_json::from_value(b.arch.clone())?;
        let fresh = Self::init(cfg.clone(), vec![], vec![], 0)?;
        if fresh.params.names() != b.params.names()
            || fresh.params.tensors().iter().zip(b.params.tensors()).any(|(a, c)| a.shape() != c.shape())
        {
            return Err(Error::InvalidArgument("recognizer bundle parameters do not match its architecture".into()));
        }
        Ok(Self { cfg, params: b.params.clone(), mean: b.stat("mel_mean")?.to_vec(), std: b.stat("mel_std")?.to_vec() })
    }

    /// Incremental chunk-by-chunk encoder up to tap `k`.
    pub fn stream(&self, k: usize) -> Result<EncoderStream<'_>> {
        self.check_k(k)?;
        if self.cfg.mode != EncoderMode::Streaming {
            return Err(Error::InvalidArgument("incremental encoding needs a streaming recognizer".into()));
        }
        Ok(EncoderStream::new(self, k))
    }
}

/// Per-stream encoder cache: the trailing rows of each layer's input that
/// later chunks can still reach.
#[derive(Clone, Debug)]
pub struct EncoderStream<'a> {
    rec: &'a Recognizer,
    k: usize,
    buffers: Vec<(usize, Tensor)>,
    frames: usize,
}

impl<'a> EncoderStream<'a> {
    fn new(rec: &'a Recognizer, k: usize) -> Self {
        let conv_layers = k.min(rec.cfg.layers - 1);
        let buffers = (0..conv_layers)
            .map(|l| {
                let w = if l == 0 { rec.cfg.mel_bins } else { rec.cfg.width };
                (0, Tensor::zeros(&[0, w]))
            })
            .collect();
        Self { rec, k, buffers, frames: 0 }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.rec, self.k);
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Consumes exactly one chunk of mel rows and returns tap-`k` rows.
    pub fn push_chunk(&mut self, mel: &Tensor) -> Result<Tensor> {
        let c = self.rec.cfg.chunk_frames;
        if mel.rows() != c {
            return Err(Error::InvalidArgument(format!("chunk has {} frames, expected {c}", mel.rows())));
        }
        let start = self.frames;
        let end = start + c;
        let mut x = self.rec.normalize(mel)?;
        for l in 0..self.buffers.len() {
            let spec = self.rec.cfg.conv_spec(l);
            let (base, buf) = &mut self.buffers[l];
            buf.append_rows(&x)?;
            let w = self.rec.p(&format!("conv{l}.w"));
            let b = self.rec.p(&format!("conv{l}.b"));
            let h = kernels::conv1d_rows(buf, *base, end, w, Some(b), &spec, start..end)?;
            x = self.rec.block(l, &x, h)?;
            let keep = spec.history();
            let have = buf.rows();
            if have > keep {
                *buf = buf.slice_rows(have - keep, have);
                *base = end - keep;
            }
        }
        if self.k == self.rec.cfg.layers {
            let logits = kernels::affine(&x, self.rec.p("out.w"), Some(self.rec.p("out.b")))?;
            x = kernels::softmax(&logits)?;
        }
        x.ensure_finite("recognizer stream")?;
        self.frames = end;
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Frames averaged into one probe example.
    pub segment_frames: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { segment_frames: 32, steps: 300, lr: 0.05 }
    }
}

fn segment_means(ibf: &Tensor, seg: usize) -> Vec<Vec<f32>> {
    let n = ibf.rows() / seg;
    (0..n)
        .map(|s| {
            (0..ibf.cols())
                .map(|j| ((s * seg..(s + 1) * seg).map(|t| ibf.row(t)[j] as f64).sum::<f64>() / seg as f64) as f32)
                .collect()
        })
        .collect()
}

/// Speaker-classification accuracy of a linear softmax probe trained on
/// segment-averaged tap-`k` features. With `shuffle_labels`, training
/// labels are permuted as a null control.
pub fn leakage_probe(
    rec: &Recognizer,
    train: &[&Utterance],
    test: &[&Utterance],
    k: usize,
    cfg: &ProbeConfig,
    seed: u64,
    shuffle_labels: bool,
) -> Result<f64> {
    let mut speakers: Vec<usize> = train.iter().map(|u| u.speaker).collect();
    speakers.sort_unstable();
    speakers.dedup();
    if speakers.len() < 2 {
        return Err(Error::InvalidArgument("leakage probe needs at least 2 speakers".into()));
    }
    let label = |s: usize| speakers.iter().position(|x| *x == s);
    let collect = |us: &[&Utterance]| -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for u in us {
            let Some(y) = label(u.speaker) else { continue };
            for v in segment_means(&rec.extract_ibf(&u.mel, k)?, cfg.segment_frames) {
                xs.push(v);
                ys.push(y);
            }
        }
        Ok((xs, ys))
    };
    let (xtr, mut ytr) = collect(train)?;
    let (xte, yte) = collect(test)?;
    if xtr.is_empty() || xte.is_empty() {
        return Err(Error::InvalidArgument("probe needs non-empty train and test segments".into()));
    }
    let mut r = rng::stream(seed, "probe");
    if shuffle_labels {
        ytr.shuffle(&mut r);
    }
    let d = xtr[0].len();
    let (mean, std) = {
        let t = Tensor::from_rows(&xtr)?;
        let mean = t.col_means();
        let std: Vec<f32> = (0..d)
            .map(|j| {
                let v = (0..t.rows()).map(|i| (t.row(i)[j] - mean[j]).powi(2) as f64).sum::<f64>() / t.rows() as f64;
                (v.sqrt() as f32).max(1e-6)
            })
            .collect();
        (mean, std)
    };
    let standardize = |xs: &[Vec<f32>]| -> Result<Tensor> {
        let rows: Vec<Vec<f32>> = xs.iter().map(|x| x.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect()).collect();
        Tensor::from_rows(&rows)
    };
    let (xtr, xte) = (standardize(&xtr)?, standardize(&xte)?);
    let c = speakers.len();
    let mut params = ParamSet::new();
    params.add("w", Tensor::zeros(&[d, c]));
    params.add("b", Tensor::zeros(&[c]));
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &params);
    for _ in 0..cfg.steps {
        let grads = {
            let mut g = Graph::new(&params);
            let x = g.input(xtr.clone())?;
            let (w, b) = (g.param("w")?, g.param("b")?);
            let logits = g.affine(x, w, Some(b))?;
            let loss = g.cross_entropy(logits, &ytr)?;
            g.backward(loss)?
        };
        opt.step(&mut params, &grads)?;
    }
    let logits = kernels::affine(&xte, params.get("w")?, Some(params.get("b")?))?;
    let ok = (0..logits.rows())
        .filter(|&i| logits.row(i).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(j, _)| j) == Some(yte[i]))
        .count();
    Ok(ok as f64 / logits.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_utt(frames: usize, seed: u64) -> Utterance {
        let mut r = rng::stream(seed, "fake");
        let mel = Tensor::new(vec![frames, 20], (0..frames * 20).map(|_| r.gen_range(-3.0..1.0)).collect()).unwrap();
        Utterance { id: format!("u{seed}"), speaker: 0, phonemes: vec![0; frames], f0: vec![100.0; frames], wave: vec![], mel }
    }

    fn model(mode: EncoderMode) -> Recognizer {
        let cfg = EncoderConfig { mode, ..Default::default() };
        Recognizer::init(cfg, vec![0.0; 20], vec![1.0; 20], 3).unwrap()
    }

    #[test]
    fn ppg_rows_are_simplices_and_taps_are_prefixes() {
        let m = model(EncoderMode::NonStreaming);
        let u = fake_utt(40, 1);
        let all = m.taps(&u.mel, 6).unwrap();
        for t in 0..40 {
            let row = all[5].row(t);
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
        for k in 1..=6 {
            assert_eq!(m.extract_ibf(&u.mel, k).unwrap(), all[k - 1]);
        }
        assert!(m.extract_ibf(&u.mel, 0).is_err());
        assert!(m.extract_ibf(&u.mel, 7).is_err());
    }

    #[test]
    fn streaming_taps_ignore_future_chunks() {
        let m = model(EncoderMode::Streaming);
        let u = fake_utt(64, 2);
        let mut v = u.mel.clone();
        for t in 32..64 {
            for x in v.row_mut(t) {
                *x += 1.5;
            }
        }
        for k in 1..=6 {
            let (a, b) = (m.extract_ibf(&u.mel, k).unwrap(), m.extract_ibf(&v, k).unwrap());
            assert_eq!(a.slice_rows(0, 32), b.slice_rows(0, 32), "tap {k}");
            assert_ne!(a.slice_rows(32, 64), b.slice_rows(32, 64));
        }
        let ns = model(EncoderMode::NonStreaming);
        assert_ne!(ns.extract_ibf(&u.mel, 6).unwrap().slice_rows(0, 32), ns.extract_ibf(&v, 6).unwrap().slice_rows(0, 32));
    }

    #[test]
    fn incremental_stream_matches_offline() {
        let m = model(EncoderMode::Streaming);
        let u = fake_utt(80, 3);
        for k in [1, 3, 6] {
            let offline = m.extract_ibf(&u.mel, k).unwrap();
            let mut s = m.stream(k).unwrap();
            let mut got = Tensor::zeros(&[0, m.cfg.tap_width(k)]);
            for c in 0..5 {
                got.append_rows(&s.push_chunk(&u.mel.slice_rows(16 * c, 16 * c + 16)).unwrap()).unwrap();
            }
            assert_eq!(got, offline, "tap {k}");
        }
        assert!(model(EncoderMode::NonStreaming).stream(3).is_err());
    }

    #[test]
    fn single_phoneme_corpus_is_learned() {
        let utts: Vec<Utterance> = (0..4).map(|i| fake_utt(50, i)).collect();
        let refs: Vec<&Utterance> = utts.iter().collect();
        let tcfg = RecognizerTrainConfig { steps: 60, batch: 2, crop_frames: 32, ..Default::default() };
        let (m, log) = Recognizer::train(&refs, EncoderConfig::default(), &tcfg, 1).unwrap();
        assert!(m.accuracy(&refs).unwrap() > 0.99);
        assert!(log.losses.last().unwrap() < &log.losses[0]);
    }

    #[test]
    fn bundle_roundtrip() {
        let m = model(EncoderMode::Streaming);
        let back = Recognizer::from_bundle(&m.to_bundle()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.cfg, m.cfg);
    }
}
