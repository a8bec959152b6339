//! Acoustic models mapping (IBF, target speaker) to a log-mel spectrogram.
//!
//! The teacher reads the whole utterance: a non-causal convolution encoder
//! feeds a recurrent decoder. The student is streamable: its encoder uses
//! block-causal convolutions with the recognizer's chunk size, and its
//! decoder is frame-autoregressive (a prenet over the previous output
//! frame feeds the recurrent cell). The student is trained with teacher
//! forcing and run free at inference; both paths share every parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::params::{glorot_bound, uniform};
use crate::numerics::{Adam, AdamConfig, ConvSpec, Graph, ModelBundle, NodeId, ParamSet, Tensor};
use crate::recognizer::{EncoderMode, Recognizer};
use crate::rng;
use crate::train::{column_stats, cosine_lr, crop, standardize, TrainLog};

pub const BUNDLE_KIND: &str = "acoustic";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmKind {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticConfig {
    pub kind: AmKind,
    /// Recognizer tap the model consumes.
    pub ibf_layer: usize,
    pub ibf_width: usize,
    pub mel_bins: usize,
    /// Speaker vocabulary; the row order of the speaker table.
    pub speakers: Vec<String>,
    pub spk_width: usize,
    pub enc_width: usize,
    /// Per-layer (left, right) taps of the encoder.
    pub context: Vec<(usize, usize)>,
    pub dilations: Vec<usize>,
    pub dec_width: usize,
    pub prenet_width: usize,
    pub prenet_dropout: f64,
    /// Student encoder chunk; ignored by the teacher.
    pub chunk_frames: usize,
}

impl AcousticConfig {
    pub fn new(kind: AmKind, ibf_layer: usize, ibf_width: usize, speakers: Vec<String>) -> Self {
        Self {
            kind,
            ibf_layer,
            ibf_width,
            mel_bins: 20,
            speakers,
            spk_width: 16,
            enc_width: 48,
            context: vec![(2, 2); 3],
            dilations: vec![1, 2, 1],
            dec_width: 48,
            prenet_width: 16,
            prenet_dropout: 0.5,
            chunk_frames: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("acoustic: {m}")));
        if self.ibf_layer == 0 || self.ibf_width == 0 || self.mel_bins == 0 {
            return bad("zero tap or width".into());
        }
        if self.speakers.is_empty() {
            return bad("empty speaker vocabulary".into());
        }
        if self.context.is_empty() || self.context.len() != self.dilations.len() {
            return bad("context and dilations need the same non-zero length".into());
        }
        if self.kind == AmKind::Student && self.chunk_frames == 0 {
            return bad("student needs chunk_frames > 0".into());
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return bad(format!("prenet dropout {}", self.prenet_dropout));
        }
        Ok(())
    }

    pub fn conv_spec(&self, l: usize) -> ConvSpec {
        let (left, right) = self.context[l];
        let chunk = (self.kind == AmKind::Student).then_some(self.chunk_frames);
        ConvSpec::new(left, right, self.dilations[l]).chunked(chunk)
    }

    pub fn speaker_index(&self, id: &str) -> Result<usize> {
        self.speakers.iter().position(|s| s == id).ok_or_else(|| Error::UnknownSpeaker(id.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsganConfig {
    /// Weight of the generator's least-squares term.
    pub weight: f64,
    pub width: usize,
    pub adam: AdamConfig,
}

impl Default for LsganConfig {
    fn default() -> Self {
        Self { weight: 0.1, width: 32, adam: AdamConfig { lr: 1e-3, clip_norm: Some(5.0), ..Default::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub adam: AdamConfig,
    pub final_lr_fraction: f64,
    /// Reconstruction only: steps of a second stage on target speakers.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl Default for AcousticTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            crop_frames: 64,
            adam: AdamConfig { lr: 3e-3, clip_norm: Some(5.0), ..Default::default() },
            final_lr_fraction: 0.1,
            finetune_steps: 200,
            finetune_lr: 1e-3,
        }
    }
}

/// Training record: the L1 loss alone in `recon`, plus the adversarial
/// terms when the discriminator is enabled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AmTrainLog {
    pub recon: TrainLog,
    pub generator_adv: Vec<f64>,
    pub discriminator: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Steps of near-zero discriminator loss that count as a collapse.
pub const COLLAPSE_STEPS: usize = 500;
pub const COLLAPSE_LOSS: f64 = 1e-4;

/// One supervised example: normalised IBF rows, target mel, speaker row.
#[derive(Clone, Debug)]
pub struct Example {
    pub ibf: Tensor,
    pub target: Tensor,
    pub speaker: usize,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub cfg: AcousticConfig,
    pub params: ParamSet,
    pub ibf_mean: Vec<f32>,
    pub ibf_std: Vec<f32>,
    pub mel_mean: Vec<f32>,
    pub mel_std: Vec<f32>,
}

impl AcousticModel {
    pub fn init(cfg: AcousticConfig, stats: [Vec<f32>; 4], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let [ibf_mean, ibf_std, mel_mean, mel_std] = stats;
        let mut r = rng::stream(seed, "acoustic/init");
        let mut params = ParamSet::new();
        let mut inp = cfg.ibf_width;
        for l in 0..cfg.context.len() {
            let taps = cfg.conv_spec(l).taps();
            params.add(&format!("enc{l}.w"), uniform(&mut r, &[taps, inp, cfg.enc_width], glorot_bound(inp * taps, cfg.enc_width)));
            params.add(&format!("enc{l}.b"), Tensor::zeros(&[cfg.enc_width]));
            inp = cfg.enc_width;
        }
        params.add("spk.table", uniform(&mut r, &[cfg.speakers.len(), cfg.spk_width], 0.5));
        let mut dec_in = cfg.enc_width + cfg.spk_width;
        if cfg.kind == AmKind::Student {
            params.add("pre.w", uniform(&mut r, &[cfg.mel_bins, cfg.prenet_width], glorot_bound(cfg.mel_bins, cfg.prenet_width)));
            params.add("pre.b", Tensor::zeros(&[cfg.prenet_width]));
            dec_in += cfg.prenet_width;
        }
        let h = cfg.dec_width;
        params.add("dec.wx", uniform(&mut r, &[dec_in, 3 * h], glorot_bound(dec_in, 3 * h)));
        params.add("dec.bx", Tensor::zeros(&[3 * h]));
        params.add("dec.u", uniform(&mut r, &[h, 3 * h], glorot_bound(h, 3 * h)));
        params.add("dec.bhn", Tensor::zeros(&[h]));
        let out_in = h + cfg.enc_width;
        params.add("out.w", uniform(&mut r, &[out_in, cfg.mel_bins], glorot_bound(out_in, cfg.mel_bins)));
        let bias = if mel_mean.len() == cfg.mel_bins { mel_mean.clone() } else { vec![0.0; cfg.mel_bins] };
        params.add("out.b", Tensor::new(vec![cfg.mel_bins], bias)?);
        Ok(Self { cfg, params, ibf_mean, ibf_std, mel_mean, mel_std })
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("parameter registered at init")
    }

    pub fn speaker_index(&self, id: &str) -> Result<usize> {
        self.cfg.speaker_index(id)
    }

    pub fn normalize_ibf(&self, ibf: &Tensor) -> Result<Tensor> {
        standardize(ibf, &self.ibf_mean, &self.ibf_std)
    }

    fn check_input(&self, ibf: &Tensor, k: usize, spk: usize) -> Result<()> {
        if k != self.cfg.ibf_layer {
            return Err(Error::InvalidArgument(format!("model consumes tap {}, got tap {k}", self.cfg.ibf_layer)));
        }
        if ibf.shape().len() != 2 || ibf.cols() != self.cfg.ibf_width {
            return Err(Error::Shape { op: "acoustic", detail: format!("IBF {:?}, expected width {}", ibf.shape(), self.cfg.ibf_width) });
        }
        if spk >= self.cfg.speakers.len() {
            return Err(Error::UnknownSpeaker(format!("#{spk}")));
        }
        Ok(())
    }

    /// Encoder layer `l` for output `rows`. `buf` holds the layer input
    /// starting at frame `base`; `cur` is its slice at `rows`, which later
    /// layers add back as a residual. Layer 0 is a linear projection.
    fn encoder_layer(&self, l: usize, buf: &Tensor, base: usize, seq_len: usize, rows: std::ops::Range<usize>, cur: &Tensor) -> Result<Tensor> {
        let w = self.p(&format!("enc{l}.w"));
        let b = self.p(&format!("enc{l}.b"));
        let mut h = kernels::conv1d_rows(buf, base, seq_len, w, Some(b), &self.cfg.conv_spec(l), rows)?;
        if l > 0 {
            for (a, x) in h.data_mut().iter_mut().zip(cur.data()) {
                *a = a.max(0.0) + x;
            }
        }
        Ok(h)
    }

    fn encode(&self, ibf_norm: &Tensor) -> Result<Tensor> {
        let mut x = ibf_norm.clone();
        let t = x.rows();
        for l in 0..self.cfg.context.len() {
            x = self.encoder_layer(l, &x, 0, t, 0..t, &x)?;
        }
        Ok(x)
    }

    /// Converts tap-`k` features to a mel spectrogram for speaker row `spk`.
    /// The student runs free: each frame's prenet reads its own previous
    /// output.
    pub fn forward(&self, ibf: &Tensor, k: usize, spk: usize) -> Result<Tensor> {
        self.check_input(ibf, k, spk)?;
        let enc = self.encode(&self.normalize_ibf(ibf)?)?;
        let out = match self.cfg.kind {
            AmKind::Teacher => {
                let spk_row = self.p("spk.table").row(spk).to_vec();
                let rows: Vec<Vec<f32>> = (0..enc.rows()).map(|t| [enc.row(t), &spk_row].concat()).collect();
                let x = if rows.is_empty() { Tensor::zeros(&[0, self.cfg.enc_width + self.cfg.spk_width]) } else { Tensor::from_rows(&rows)? };
                let xp = kernels::affine(&x, self.p("dec.wx"), Some(self.p("dec.bx")))?;
                let (hs, _) = kernels::gru(&xp, self.p("dec.u"), self.p("dec.bhn"))?;
                let rows: Vec<Vec<f32>> = (0..enc.rows()).map(|t| [hs.row(t), enc.row(t)].concat()).collect();
                if rows.is_empty() {
                    Tensor::zeros(&[0, self.cfg.mel_bins])
                } else {
                    kernels::affine(&Tensor::from_rows(&rows)?, self.p("out.w"), Some(self.p("out.b")))?
                }
            }
            AmKind::Student => {
                let mut dec = DecoderState::new(self);
                let mut data = Vec::with_capacity(enc.rows() * self.cfg.mel_bins);
                for t in 0..enc.rows() {
                    data.extend(dec.step(self, enc.row(t), spk)?);
                }
                Tensor::new(vec![enc.rows(), self.cfg.mel_bins], data)?
            }
        };
        out.ensure_finite("acoustic")?;
        Ok(out)
    }

    /// Incremental student inference for one target speaker.
    pub fn stream(&self, spk: usize) -> Result<AmStream<'_>> {
        if self.cfg.kind != AmKind::Student {
            return Err(Error::InvalidArgument("only the student model streams".into()));
        }
        if spk >= self.cfg.speakers.len() {
            return Err(Error::UnknownSpeaker(format!("#{spk}")));
        }
        Ok(AmStream::new(self, spk))
    }

    /// Teacher-forced graph for one crop. `prev` holds the normalised
    /// previous target frames (student only).
    fn graph_forward(&self, g: &mut Graph<'_>, ibf: Tensor, spk: usize, prev: Option<Tensor>, drop: Option<Tensor>) -> Result<NodeId> {
        let n = ibf.rows();
        let mut h = g.input(ibf)?;
        for l in 0..self.cfg.context.len() {
            let (w, b) = (g.param(&format!("enc{l}.w"))?, g.param(&format!("enc{l}.b"))?);
            let c = g.conv1d(h, w, Some(b), self.cfg.conv_spec(l))?;
            h = if l == 0 {
                c
            } else {
                let r = g.relu(c)?;
                g.add(h, r)?
            };
        }
        let table = g.param("spk.table")?;
        let s = g.embed(table, &vec![spk; n])?;
        let mut parts = vec![h, s];
        if let Some(prev) = prev {
            let x = g.input(prev)?;
            let (w, b) = (g.param("pre.w")?, g.param("pre.b")?);
            let mut p = g.affine(x, w, Some(b))?;
            p = g.relu(p)?;
            if let Some(mask) = drop {
                let m = g.input(mask)?;
                p = g.mul(p, m)?;
            }
            parts.push(p);
        }
        let x = g.concat(&parts)?;
        let (wx, bx) = (g.param("dec.wx")?, g.param("dec.bx")?);
        let xp = g.affine(x, wx, Some(bx))?;
        let (u, bhn) = (g.param("dec.u")?, g.param("dec.bhn")?);
        let hs = g.gru(xp, u, bhn)?;
        let o = g.concat(&[hs, h])?;
        let (w, b) = (g.param("out.w")?, g.param("out.b")?);
        g.affine(o, w, Some(b))
    }

    /// Fits the model to `examples` with an L1 loss, optionally with a
    /// least-squares adversarial term.
    pub fn fit(&mut self, examples: &[Example], tcfg: &AcousticTrainConfig, lsgan: Option<&LsganConfig>, seed: u64) -> Result<AmTrainLog> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("no training examples".into()));
        }
        let mut opt = Adam::new(tcfg.adam, &self.params);
        let mut r = rng::stream(seed, "acoustic/batches");
        let mut disc = match lsgan {
            Some(c) => Some((Discriminator::init(self.cfg.mel_bins, c.width, seed)?, c)),
            None => None,
        };
        let mut dopt = disc.as_ref().map(|(d, c)| Adam::new(c.adam, &d.params));
        let mut log = AmTrainLog::default();
        let align = if self.cfg.kind == AmKind::Student { self.cfg.chunk_frames } else { 1 };
        let mut quiet = 0usize;
        for step in 0..tcfg.steps {
            let lr = cosine_lr(tcfg.adam.lr, tcfg.final_lr_fraction, step, tcfg.steps);
            opt.set_lr(lr);
            let mut batch = Vec::with_capacity(tcfg.batch);
            for _ in 0..tcfg.batch {
                let e = &examples[r.gen_range(0..examples.len())];
                let (s, n) = crop(&mut r, e.ibf.rows(), tcfg.crop_frames, align);
                let drop = (self.cfg.kind == AmKind::Student && self.cfg.prenet_dropout > 0.0).then(|| {
                    let keep = 1.0 - self.cfg.prenet_dropout;
                    let d = (0..n * self.cfg.prenet_width).map(|_| if r.gen::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 }).collect();
                    Tensor::new(vec![n, self.cfg.prenet_width], d).expect("mask shape")
                });
                batch.push((e, s, n, drop));
            }
            let (recon, adv, fakes, grads) = {
                let mut g = Graph::new(&self.params);
                let mut recon_total: Option<NodeId> = None;
                let mut adv_total: Option<NodeId> = None;
                let mut fakes = Vec::new();
                for (e, s, n, drop) in &batch {
                    let prev = (self.cfg.kind == AmKind::Student).then(|| self.shifted_targets(&e.target, *s, *n));
                    let y = self.graph_forward(&mut g, e.ibf.slice_rows(*s, s + n), e.speaker, prev, drop.clone())?;
                    let tgt = g.input(e.target.slice_rows(*s, s + n))?;
                    let l1 = g.l1(y, tgt)?;
                    recon_total = Some(match recon_total {
                        Some(t) => g.add(t, l1)?,
                        None => l1,
                    });
                    if let Some((d, c)) = &disc {
                        let score = d.graph(&mut g, y, false)?;
                        let a = g.mse_const(score, 1.0)?;
                        let a = g.scale(a, c.weight)?;
                        adv_total = Some(match adv_total {
                            Some(t) => g.add(t, a)?,
                            None => a,
                        });
                        fakes.push(g.value(y).clone());
                    }
                }
                let inv = 1.0 / tcfg.batch as f64;
                let recon = g.scale(recon_total.expect("batch > 0"), inv)?;
                let recon_v = g.value(recon).data()[0] as f64;
                let (loss, adv_v) = match adv_total {
                    Some(a) => {
                        let a = g.scale(a, inv)?;
                        let v = g.value(a).data()[0] as f64;
                        (g.add(recon, a)?, Some(v))
                    }
                    None => (recon, None),
                };
                (recon_v, adv_v, fakes, g.backward(loss)?)
            };
            if !recon.is_finite() {
                return Err(Error::Diverged { stage: "acoustic".into(), step, detail: format!("loss {recon}") });
            }
            log.recon.losses.push(recon);
            opt.step(&mut self.params, &grads)?;
            if let (Some((d, _)), Some(dopt)) = (disc.as_mut(), dopt.as_mut()) {
                let (dl, dgrads) = {
                    let mut g = Graph::new(&d.params);
                    let mut total: Option<NodeId> = None;
                    for ((e, s, n, _), fake) in batch.iter().zip(fakes) {
                        let real = g.input(e.target.slice_rows(*s, s + n))?;
                        let sr = d.graph(&mut g, real, true)?;
                        let lr_ = g.mse_const(sr, 1.0)?;
                        let fake = g.input(fake)?;
                        let sf = d.graph(&mut g, fake, true)?;
                        let lf = g.mse_const(sf, 0.0)?;
                        let l = g.add(lr_, lf)?;
                        total = Some(match total {
                            Some(t) => g.add(t, l)?,
                            None => l,
                        });
                    }
                    let loss = g.scale(total.expect("batch > 0"), 1.0 / tcfg.batch as f64)?;
                    (g.value(loss).data()[0] as f64, g.backward(loss)?)
                };
                dopt.step(&mut d.params, &dgrads)?;
                log.discriminator.push(dl);
                log.generator_adv.push(adv.unwrap_or(0.0));
                quiet = if dl < COLLAPSE_LOSS { quiet + 1 } else { 0 };
                if quiet == COLLAPSE_STEPS {
                    let msg = format!("discriminator loss below {COLLAPSE_LOSS} for {COLLAPSE_STEPS} steps (step {step})");
                    eprintln!("warning: {msg}");
                    log.warnings.push(msg);
                }
            }
        }
        Ok(log)
    }

    /// Normalised target frames shifted right by one; the frame before the
    /// utterance start is the zero (mean) frame.
    fn shifted_targets(&self, target: &Tensor, s: usize, n: usize) -> Tensor {
        let m = self.cfg.mel_bins;
        let mut data = vec![0f32; n * m];
        for i in 0..n {
            if s + i == 0 {
                continue;
            }
            let src = target.row(s + i - 1);
            for j in 0..m {
                data[i * m + j] = (src[j] - self.mel_mean[j]) / self.mel_std[j];
            }
        }
        Tensor::new(vec![n, m], data).expect("shifted shape")
    }

    pub fn to_bundle(&self) -> ModelBundle {
        let mut stats = BTreeMap::new();
        stats.insert("ibf_mean".to_string(), self.ibf_mean.clone());
        stats.insert("ibf_std".to_string(), self.ibf_std.clone());
        stats.insert("mel_mean".to_string(), self.mel_mean.clone());
        stats.insert("mel_std".to_string(), self.mel_std.clone());
        ModelBundle {
            kind: BUNDLE_KIND.into(),
            arch: serde_json::to_value(&self.cfg).expect("config serialises"),
            params: self.params.clone(),
            stats,
        }
    }

    pub fn from_bundle(b: &ModelBundle) -> Result<Self> {
        if b.kind != BUNDLE_KIND {
            return Err(Error::InvalidArgument(format!("bundle kind {} is not an acoustic model", b.kind)));
        }
        let cfg: AcousticConfig = serde_json::from_value(b.arch.clone())?;
        let stats = [b.stat("ibf_mean")?.to_vec(), b.stat("ibf_std")?.to_vec(), b.stat("mel_mean")?.to_vec(), b.stat("mel_std")?.to_vec()];
        let mut m = Self::init(cfg, stats, 0)?;
        if m.params.names() != b.params.names() || m.params.tensors().iter().zip(b.params.tensors()).any(|(a, c)| a.shape() != c.shape()) {
            return Err(Error::InvalidArgument("acoustic bundle parameters do not match its architecture".into()));
        }
        m.params = b.params.clone();
        Ok(m)
    }
}

/// Recurrent decoder state of the free-running student.
#[derive(Clone, Debug)]
struct DecoderState {
    h: Vec<f32>,
    /// Normalised previous output frame.
    prev: Vec<f32>,
}

impl DecoderState {
    fn new(m: &AcousticModel) -> Self {
        Self { h: vec![0.0; m.cfg.dec_width], prev: vec![0.0; m.cfg.mel_bins] }
    }

    fn step(&mut self, m: &AcousticModel, enc: &[f32], spk: usize) -> Result<Vec<f32>> {
        let prev = Tensor::new(vec![1, m.cfg.mel_bins], self.prev.clone())?;
        let pre = kernels::affine(&prev, m.p("pre.w"), Some(m.p("pre.b")))?.map(|v| v.max(0.0));
        let x = [enc, m.p("spk.table").row(spk), pre.data()].concat();
        let xp = kernels::affine(&Tensor::new(vec![1, x.len()], x)?, m.p("dec.wx"), Some(m.p("dec.bx")))?;
        let mut h = vec![0f32; m.cfg.dec_width];
        let mut gates = vec![0f32; 4 * m.cfg.dec_width];
        kernels::gru_step(xp.data(), &self.h, m.p("dec.u"), m.p("dec.bhn").data(), &mut h, &mut gates);
        self.h = h;
        let o = [self.h.as_slice(), enc].concat();
        let y = kernels::affine(&Tensor::new(vec![1, o.len()], o)?, m.p("out.w"), Some(m.p("out.b")))?.into_data();
        self.prev = y.iter().enumerate().map(|(j, v)| (v - m.mel_mean[j]) / m.mel_std[j]).collect();
        Ok(y)
    }
}

/// Chunk-by-chunk student inference: encoder caches plus decoder state.
#[derive(Clone, Debug)]
pub struct AmStream<'a> {
    model: &'a AcousticModel,
    spk: usize,
    bufs: Vec<(usize, Tensor)>,
    dec: DecoderState,
    frames: usize,
}

impl<'a> AmStream<'a> {
    fn new(model: &'a AcousticModel, spk: usize) -> Self {
        let bufs = (0..model.cfg.context.len())
            .map(|l| (0, Tensor::zeros(&[0, if l == 0 { model.cfg.ibf_width } else { model.cfg.enc_width }])))
            .collect();
        Self { model, spk, bufs, dec: DecoderState::new(model), frames: 0 }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.model, self.spk);
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Consumes one chunk of raw IBF rows and returns its mel frames.
    pub fn push_chunk(&mut self, ibf: &Tensor) -> Result<Tensor> {
        let m = self.model;
        let c = m.cfg.chunk_frames;
        if ibf.rows() != c {
            return Err(Error::InvalidArgument(format!("chunk has {} frames, expected {c}", ibf.rows())));
        }
        m.check_input(ibf, m.cfg.ibf_layer, self.spk)?;
        let (start, end) = (self.frames, self.frames + c);
        let mut x = m.normalize_ibf(ibf)?;
        for l in 0..self.bufs.len() {
            let spec = m.cfg.conv_spec(l);
            let (base, buf) = &mut self.bufs[l];
            buf.append_rows(&x)?;
            x = m.encoder_layer(l, buf, *base, end, start..end, &x)?;
            let keep = spec.history();
            if buf.rows() > keep {
                *buf = buf.slice_rows(buf.rows() - keep, buf.rows());
                *base = end - keep;
            }
        }
        let mut data = Vec::with_capacity(c * m.cfg.mel_bins);
        for t in 0..c {
            data.extend(self.dec.step(m, x.row(t), self.spk)?);
        }
        self.frames = end;
        let y = Tensor::new(vec![c, m.cfg.mel_bins], data)?;
        y.ensure_finite("acoustic stream")?;
        Ok(y)
    }
}

/// Three-layer convolutional critic scoring every frame.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamSet,
}

impl Discriminator {
    const SPEC: ConvSpec = ConvSpec { left: 2, right: 2, dilation: 1, chunk: None };

    pub fn init(mel_bins: usize, width: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "acoustic/discriminator");
        let mut params = ParamSet::new();
        let dims = [(mel_bins, width), (width, width), (width, 1)];
        for (l, (i, o)) in dims.iter().enumerate() {
            params.add(&format!("d{l}.w"), uniform(&mut r, &[5, *i, *o], glorot_bound(5 * i, *o)));
            params.add(&format!("d{l}.b"), Tensor::zeros(&[*o]));
        }
        Ok(Self { params })
    }

    /// Scores `x`; with `own` the weights are this graph's parameters,
    /// otherwise they enter as constants so only `x` receives gradient.
    fn graph(&self, g: &mut Graph<'_>, x: NodeId, own: bool) -> Result<NodeId> {
        let mut h = x;
        for l in 0..3 {
            let (w, b) = if own {
                (g.param(&format!("d{l}.w"))?, g.param(&format!("d{l}.b"))?)
            } else {
                (g.input(self.params.get(&format!("d{l}.w"))?.clone())?, g.input(self.params.get(&format!("d{l}.b"))?.clone())?)
            };
            h = g.conv1d(h, w, Some(b), Self::SPEC)?;
            if l < 2 {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

// ------------------------------------------------------------ training entry points

fn check_recognizer(rec: &Recognizer, mode: EncoderMode, k: usize) -> Result<()> {
    if rec.cfg.mode != mode {
        return Err(Error::InvalidArgument(format!("expected a {mode:?} recognizer")));
    }
    if k == 0 || k > rec.layers() {
        return Err(Error::InvalidArgument(format!("tap {k} outside 1..={}", rec.layers())));
    }
    Ok(())
}

fn stats_for(ibfs: &[Tensor], mels: &[&Tensor]) -> [Vec<f32>; 4] {
    let ir: Vec<&Tensor> = ibfs.iter().collect();
    let (im, is) = column_stats(&ir);
    let (mm, ms) = column_stats(mels);
    [im, is, mm, ms]
}

/// Speaker vocabulary shared by every acoustic model of a corpus.
pub fn speaker_vocabulary(corpus: &crate::corpus::Corpus) -> Vec<String> {
    corpus.speakers().iter().map(|s| s.id.clone()).collect()
}

/// Self-reconstruction training: each utterance is both source and target.
/// The model is first trained on `pretrain` (the multi-speaker pool) and
/// then fine-tuned on `finetune` (target-speaker data) for
/// `tcfg.finetune_steps`. The recognizer stays frozen throughout.
pub fn train_reconstruction(
    cfg: AcousticConfig,
    rec: &Recognizer,
    pretrain: &[&Utterance],
    finetune: &[&Utterance],
    tcfg: &AcousticTrainConfig,
    lsgan: Option<&LsganConfig>,
    seed: u64,
) -> Result<(AcousticModel, AmTrainLog)> {
    let mode = match cfg.kind {
        AmKind::Teacher => EncoderMode::NonStreaming,
        AmKind::Student => EncoderMode::Streaming,
    };
    check_recognizer(rec, mode, cfg.ibf_layer)?;
    if pretrain.is_empty() || (tcfg.finetune_steps > 0 && finetune.is_empty()) {
        return Err(Error::InvalidArgument("no training utterances".into()));
    }
    let all: Vec<&Utterance> = pretrain.iter().chain(finetune).copied().collect();
    let ibfs: Vec<Tensor> = all.iter().map(|u| rec.extract_ibf(&u.mel, cfg.ibf_layer)).collect::<Result<_>>()?;
    let mels: Vec<&Tensor> = all.iter().map(|u| &u.mel).collect();
    let mut model = AcousticModel::init(cfg, stats_for(&ibfs, &mels), seed)?;
    let mut examples = ibfs
        .into_iter()
        .zip(&all)
        .map(|(ibf, u)| Ok(Example { ibf: model.normalize_ibf(&ibf)?, target: u.mel.clone(), speaker: u.speaker }))
        .collect::<Result<Vec<_>>>()?;
    let tuned = examples.split_off(pretrain.len());
    let mut log = model.fit(&examples, tcfg, lsgan, seed)?;
    if tcfg.finetune_steps > 0 {
        let mut ft = tcfg.clone();
        ft.steps = tcfg.finetune_steps;
        ft.adam.lr = tcfg.finetune_lr;
        let more = model.fit(&tuned, &ft, lsgan, rng::derive(seed, "finetune"))?;
        log.recon.losses.extend(more.recon.losses);
        log.generator_adv.extend(more.generator_adv);
        log.discriminator.extend(more.discriminator);
        log.warnings.extend(more.warnings);
    }
    Ok((model, log))
}

/// One teacher conversion: source utterance rendered as a target speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelPair {
    pub source: String,
    pub source_speaker: usize,
    pub target_speaker: usize,
    pub mel: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelSet {
    pub pairs: Vec<ParallelPair>,
}

#[derive(Serialize, Deserialize)]
struct PairEntry {
    source: String,
    source_speaker: usize,
    target_speaker: usize,
    path: String,
    frames: usize,
}

impl ParallelSet {
    /// Writes one little-endian f32 blob per pair plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.pairs.len());
        for (i, p) in self.pairs.iter().enumerate() {
            let path = format!("pair_{i:05}.bin");
            let blob: Vec<u8> = p.mel.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(&path), blob)?;
            entries.push(PairEntry {
                source: p.source.clone(),
                source_speaker: p.source_speaker,
                target_speaker: p.target_speaker,
                path,
                frames: p.mel.rows(),
            });
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&entries)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, mel_bins: usize) -> Result<Self> {
        let man = dir.join("manifest.json");
        if !man.exists() {
            return Err(Error::MissingArtifact(man));
        }
        let entries: Vec<PairEntry> = serde_json::from_slice(&fs::read(&man)?)?;
        let mut pairs = Vec::with_capacity(entries.len());
        for e in entries {
            let path = dir.join(&e.path);
            let blob = fs::read(&path)?;
            if blob.len() != e.frames * mel_bins * 4 {
                return Err(Error::Format { path, detail: "blob size does not match frame count".into() });
            }
            let data = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            pairs.push(ParallelPair {
                source: e.source,
                source_speaker: e.source_speaker,
                target_speaker: e.target_speaker,
                mel: Tensor::new(vec![e.frames, mel_bins], data)?,
            });
        }
        Ok(Self { pairs })
    }
}

/// Converts every source utterance to every target speaker with the
/// teacher, reading features from the non-streaming recognizer.
pub fn generate_parallel(teacher: &AcousticModel, rec: &Recognizer, sources: &[&Utterance], targets: &[usize]) -> Result<ParallelSet> {
    if teacher.cfg.kind != AmKind::Teacher {
        return Err(Error::InvalidArgument("parallel data needs a teacher model".into()));
    }
    check_recognizer(rec, EncoderMode::NonStreaming, teacher.cfg.ibf_layer)?;
    if let Some(t) = targets.iter().find(|t| **t >= teacher.cfg.speakers.len()) {
        return Err(Error::UnknownSpeaker(format!("#{t}")));
    }
    let k = teacher.cfg.ibf_layer;
    let mut pairs = Vec::with_capacity(sources.len() * targets.len());
    for u in sources {
        let ibf = rec.extract_ibf(&u.mel, k)?;
        for &t in targets {
            if t == u.speaker {
                continue;
            }
            pairs.push(ParallelPair { source: u.id.clone(), source_speaker: u.speaker, target_speaker: t, mel: teacher.forward(&ibf, k, t)? });
        }
    }
    Ok(ParallelSet { pairs })
}

/// Teacher-guidance training: the student maps streaming-recognizer
/// features of each source utterance to the teacher's conversion.
pub fn train_student_tg(
    cfg: AcousticConfig,
    rec: &Recognizer,
    sources: &[&Utterance],
    set: &ParallelSet,
    tcfg: &AcousticTrainConfig,
    seed: u64,
) -> Result<(AcousticModel, AmTrainLog)> {
    if cfg.kind != AmKind::Student {
        return Err(Error::InvalidArgument("teacher guidance trains a student".into()));
    }
    check_recognizer(rec, EncoderMode::Streaming, cfg.ibf_layer)?;
    if set.pairs.is_empty() {
        return Err(Error::InvalidArgument("empty parallel set".into()));
    }
    let by_id: BTreeMap<&str, &Utterance> = sources.iter().map(|u| (u.id.as_str(), *u)).collect();
    let mut ibf_cache: BTreeMap<&str, Tensor> = BTreeMap::new();
    for p in &set.pairs {
        if p.source_speaker == p.target_speaker {
            return Err(Error::InvalidArgument(format!("pair {} is not cross-speaker", p.source)));
        }
        if !ibf_cache.contains_key(p.source.as_str()) {
            let u = by_id.get(p.source.as_str()).ok_or_else(|| Error::InvalidArgument(format!("source {} not supplied", p.source)))?;
            ibf_cache.insert(u.id.as_str(), rec.extract_ibf(&u.mel, cfg.ibf_layer)?);
        }
    }
    let ibfs: Vec<Tensor> = ibf_cache.values().cloned().collect();
    let mels: Vec<&Tensor> = set.pairs.iter().map(|p| &p.mel).collect();
    let mut model = AcousticModel::init(cfg, stats_for(&ibfs, &mels), seed)?;
    let normed: BTreeMap<&str, Tensor> =
        ibf_cache.iter().map(|(k, v)| Ok((*k, model.normalize_ibf(v)?))).collect::<Result<_>>()?;
    let examples = set
        .pairs
        .iter()
        .map(|p| Example { ibf: normed[p.source.as_str()].clone(), target: p.mel.clone(), speaker: p.target_speaker })
        .collect::<Vec<_>>();
    let log = model.fit(&examples, tcfg, None, seed)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn speakers() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    fn model(kind: AmKind) -> AcousticModel {
        let cfg = AcousticConfig::new(kind, 3, 8, speakers());
        let stats = [vec![0.0; 8], vec![1.0; 8], vec![-2.0; 20], vec![1.0; 20]];
        AcousticModel::init(cfg, stats, 11).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test/acoustic");
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn frames_in_equal_frames_out() {
        for kind in [AmKind::Teacher, AmKind::Student] {
            let m = model(kind);
            for t in [1, 16, 37] {
                assert_eq!(m.forward(&random(t, 8, t as u64), 3, 1).unwrap().shape(), &[t, 20]);
            }
        }
    }

    #[test]
    fn wrong_tap_width_or_speaker_is_rejected() {
        let m = model(AmKind::Teacher);
        assert!(m.forward(&random(4, 8, 1), 2, 0).is_err());
        assert!(m.forward(&random(4, 7, 1), 3, 0).is_err());
        assert!(matches!(m.forward(&random(4, 8, 1), 3, 3), Err(Error::UnknownSpeaker(_))));
        assert!(matches!(m.speaker_index("zz"), Err(Error::UnknownSpeaker(_))));
    }

    #[test]
    fn student_ignores_future_chunks() {
        let m = model(AmKind::Student);
        let x = random(48, 8, 2);
        let y = m.forward(&x, 3, 0).unwrap();
        let mut x2 = x.clone();
        for t in 16..48 {
            for v in x2.row_mut(t) {
                *v += 3.0;
            }
        }
        let y2 = m.forward(&x2, 3, 0).unwrap();
        assert_eq!(y.slice_rows(0, 16), y2.slice_rows(0, 16));
        assert_ne!(y.slice_rows(16, 48), y2.slice_rows(16, 48));
    }

    #[test]
    fn teacher_reads_the_future() {
        let m = model(AmKind::Teacher);
        let x = random(32, 8, 3);
        let mut x2 = x.clone();
        for v in x2.row_mut(20) {
            *v += 3.0;
        }
        assert_ne!(m.forward(&x, 3, 0).unwrap().slice_rows(0, 20), m.forward(&x2, 3, 0).unwrap().slice_rows(0, 20));
    }

    #[test]
    fn stream_matches_free_running_forward() {
        let m = model(AmKind::Student);
        let x = random(64, 8, 4);
        let offline = m.forward(&x, 3, 2).unwrap();
        let mut s = m.stream(2).unwrap();
        let mut rows = Tensor::zeros(&[0, 20]);
        for c in 0..4 {
            rows.append_rows(&s.push_chunk(&x.slice_rows(16 * c, 16 * c + 16)).unwrap()).unwrap();
        }
        assert_eq!(rows, offline);
        s.reset();
        assert_eq!(s.push_chunk(&x.slice_rows(0, 16)).unwrap(), offline.slice_rows(0, 16));
        assert!(model(AmKind::Teacher).stream(0).is_err());
    }

    #[test]
    fn single_pair_is_memorised() {
        let cfg = AcousticConfig::new(AmKind::Student, 3, 8, speakers());
        let ibf = random(32, 8, 5);
        let target = random(32, 20, 6).map(|v| v - 3.0);
        let stats = [vec![0.0; 8], vec![1.0; 8], target.col_means(), vec![1.0; 20]];
        let mut m = AcousticModel::init(cfg, stats, 5).unwrap();
        let ex = [Example { ibf: ibf.clone(), target: target.clone(), speaker: 1 }];
        let tcfg = AcousticTrainConfig { steps: 400, batch: 1, crop_frames: 32, ..Default::default() };
        let log = m.fit(&ex, &tcfg, None, 5).unwrap();
        assert!(*log.recon.losses.last().unwrap() < 0.05, "{:?}", log.recon.windowed(4));
        assert!(log.generator_adv.is_empty() && log.discriminator.is_empty());
    }

    #[test]
    fn lsgan_adds_logged_adversarial_terms() {
        let mut m = model(AmKind::Teacher);
        let ex = [Example { ibf: random(24, 8, 7), target: random(24, 20, 8), speaker: 0 }];
        let tcfg = AcousticTrainConfig { steps: 5, batch: 2, crop_frames: 16, ..Default::default() };
        let log = m.fit(&ex, &tcfg, Some(&LsganConfig::default()), 1).unwrap();
        assert_eq!(log.recon.losses.len(), 5);
        assert_eq!(log.discriminator.len(), 5);
        assert!(log.generator_adv.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn parallel_set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let set = ParallelSet {
            pairs: vec![ParallelPair { source: "u1".into(), source_speaker: 0, target_speaker: 2, mel: random(5, 20, 9) }],
        };
        set.save(dir.path()).unwrap();
        assert_eq!(ParallelSet::load(dir.path(), 20).unwrap(), set);
    }

    #[test]
    fn bundle_roundtrip() {
        let m = model(AmKind::Student);
        let back = AcousticModel::from_bundle(&m.to_bundle()).unwrap();
        let x = random(16, 8, 10);
        assert_eq!(back.forward(&x, 3, 1).unwrap(), m.forward(&x, 3, 1).unwrap());
    }
}
