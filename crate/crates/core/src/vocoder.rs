//! Causal source-filter vocoder with a measured future budget.
//!
//! A frame-rate convolution stack reads normalised log-mel frames and
//! predicts, for every frame, harmonic band gains, noise band gains, log F0
//! and a voicing decision. These parameters live on knots at the analysis
//! frame centres. Upsampling to the sample rate is linear interpolation
//! between neighbouring knots, which is why output block `t` (samples
//! `hop*t .. hop*(t+1)`) needs the knots of frames `t ..= t + 2` at the
//! default framing: the interpolation stage alone costs two frames of
//! lookahead, and the causal stack adds none.
//!
//! The waveform is a harmonic series (phase accumulated in f64, amplitudes
//! read off the band gains through the mel triangles) plus band-filtered
//! noise drawn from a fixed, index-addressed noise table. Because both parts
//! are linear in the gains, training can express the synthesiser as sparse
//! gathers in the autodiff graph and fit it with a multi-resolution STFT
//! loss.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, HARMONIC_CEILING};
use crate::dsp::{self, AudioConfig, Waveform, LOSS_MAG_EPS, LOSS_RESOLUTIONS, MAX_ABS_SAMPLE};
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, StftSpec};
use crate::numerics::params::{glorot_bound, uniform};
use crate::numerics::{Adam, AdamConfig, ConvSpec, Graph, ModelBundle, NodeId, ParamSet, Tensor};
use crate::rng;
use crate::train::{cosine_lr, crop, mel_stats, standardize, TrainLog};

pub const BUNDLE_KIND: &str = "vocoder";

/// Length of the periodic excitation noise table in samples.
pub const NOISE_PERIOD: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderConfig {
    pub audio: AudioConfig,
    pub width: usize,
    /// Per-layer (left, right) taps of the frame-rate stack.
    pub context: Vec<(usize, usize)>,
    pub dilations: Vec<usize>,
    /// Declared future budget in mel frames; validated against the
    /// computed receptive field.
    pub lookahead_frames: usize,
    /// FIR length of the noise band filters.
    pub noise_taps: usize,
    pub f0_min: f64,
    pub f0_max: f64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            audio: AudioConfig::default(),
            width: 64,
            context: vec![(4, 0), (2, 0), (2, 0), (2, 0)],
            dilations: vec![1, 1, 2, 4],
            lookahead_frames: 2,
            noise_taps: 128,
            f0_min: 60.0,
            f0_max: 400.0,
        }
    }
}

impl VocoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("vocoder: {m}")));
        self.audio.validate()?;
        if self.context.is_empty() || self.context.len() != self.dilations.len() {
            return bad("context and dilations need the same non-zero length".into());
        }
        if self.width == 0 || self.noise_taps < 2 {
            return bad("zero width or noise filter too short".into());
        }
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max && self.f0_max < self.audio.nyquist()) {
            return bad(format!("F0 range {}..{} Hz", self.f0_min, self.f0_max));
        }
        if self.future_frames() > self.lookahead_frames {
            return bad(format!(
                "receptive field reaches {} future frames, budget is {}",
                self.future_frames(),
                self.lookahead_frames
            ));
        }
        Ok(())
    }

    pub fn spec(&self, l: usize) -> ConvSpec {
        let (left, right) = self.context[l];
        ConvSpec::new(left, right, self.dilations[l])
    }

    /// Future frames read by the frame-rate stack.
    pub fn net_future(&self) -> usize {
        (0..self.context.len()).map(|l| self.spec(l).lookahead()).sum()
    }

    /// Past frames read by the frame-rate stack.
    pub fn net_history(&self) -> usize {
        (0..self.context.len()).map(|l| self.spec(l).history()).sum()
    }

    /// Knots beyond `t` needed to render the last sample of block `t`.
    pub fn interp_lookahead(&self) -> usize {
        let (t0, fr) = knot_index(self.audio.hop - 1, &self.audio);
        t0 + usize::from(fr > 0.0)
    }

    /// Total future receptive field in mel frames.
    pub fn future_frames(&self) -> usize {
        self.net_future() + self.interp_lookahead()
    }

    pub fn lookahead_ms(&self) -> f64 {
        self.lookahead_frames as f64 * self.audio.frame_ms()
    }
}

/// Knot to the left of sample `n` and the interpolation fraction.
#[inline]
fn knot_index(n: usize, audio: &AudioConfig) -> (usize, f64) {
    let u = (n as f64 - audio.frame_centre(0)) / audio.hop as f64;
    let t0 = u.floor().max(0.0);
    (t0 as usize, (u - t0).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub adam: AdamConfig,
    pub final_lr_fraction: f64,
    /// Weight of the L1 loss on log F0 over voiced frames.
    pub f0_weight: f64,
    /// Weight of the voicing cross-entropy.
    pub voicing_weight: f64,
}

impl Default for VocoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 8,
            crop_frames: 32,
            adam: AdamConfig { lr: 3e-3, clip_norm: Some(5.0), ..Default::default() },
            final_lr_fraction: 0.1,
            f0_weight: 5.0,
            voicing_weight: 0.5,
        }
    }
}

// ------------------------------------------------------------ excitation

/// Band-filtered white noise, one periodic sequence per mel band.
#[derive(Debug)]
pub struct NoiseTable {
    bands: usize,
    /// `[NOISE_PERIOD x bands]`, row-major.
    data: Vec<f32>,
}

impl NoiseTable {
    #[inline]
    pub fn row(&self, n: usize) -> &[f32] {
        let i = n % NOISE_PERIOD;
        &self.data[i * self.bands..(i + 1) * self.bands]
    }
}

/// Unit-variance uniform noise addressed by sample index.
fn white(n: usize) -> f64 {
    let mut z = (n as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let u = (z >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * u - 1.0) * 3f64.sqrt()
}

/// Linear-phase FIR approximating mel band `m` by frequency sampling.
fn band_filter(edges: &[f64], m: usize, taps: usize, sr: f64) -> Vec<f64> {
    let half = taps / 2;
    let win = dsp::hann(taps);
    (0..taps)
        .map(|j| {
            let d = j as f64 - half as f64;
            let mut acc = 0.0;
            for k in 0..=half {
                let h = dsp::mel_triangle(edges, m, k as f64 * sr / taps as f64);
                let w = if k == 0 || (taps.is_multiple_of(2) && k == half) { 1.0 } else { 2.0 };
                acc += w * h * (std::f64::consts::TAU * k as f64 * d / taps as f64).cos();
            }
            acc / taps as f64 * win[j]
        })
        .collect()
}

fn build_noise_table(audio: &AudioConfig, taps: usize) -> NoiseTable {
    let edges = dsp::mel_edges(audio);
    let bands = audio.mel_bins;
    let filters: Vec<Vec<f64>> = (0..bands).map(|m| band_filter(&edges, m, taps, audio.sample_rate as f64)).collect();
    let w: Vec<f64> = (0..NOISE_PERIOD).map(white).collect();
    let mut data = vec![0f32; NOISE_PERIOD * bands];
    for n in 0..NOISE_PERIOD {
        for (b, h) in filters.iter().enumerate() {
            // circular convolution keeps the table exactly periodic
            let acc: f64 = h.iter().enumerate().map(|(j, c)| c * w[(n + NOISE_PERIOD - j) % NOISE_PERIOD]).sum();
            data[n * bands + b] = acc as f32;
        }
    }
    NoiseTable { bands, data }
}

type NoiseKey = (u32, usize, usize, usize);

/// Shared noise table for an audio configuration and filter length.
pub fn noise_table(audio: &AudioConfig, taps: usize) -> Arc<NoiseTable> {
    static CACHE: OnceLock<Mutex<HashMap<NoiseKey, Arc<NoiseTable>>>> = OnceLock::new();
    let key = (audio.sample_rate, audio.mel_bins, audio.fft, taps);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("noise cache lock");
    guard.entry(key).or_insert_with(|| Arc::new(build_noise_table(audio, taps))).clone()
}

/// Nonzero `(harmonic index, band, weight)` entries of the harmonic-to-band
/// map at fundamental `f0`; harmonic `k` is stored as `k - 1`.
fn harmonic_bands(edges: &[f64], bands: usize, f0: f64, ceiling: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let mut k = 1;
    while k as f64 * f0 < ceiling {
        let f = k as f64 * f0;
        for b in 0..bands {
            let w = dsp::mel_triangle(edges, b, f);
            if w > 0.0 {
                out.push((k - 1, b, w));
            }
        }
        k += 1;
    }
    out
}

/// Synthesis parameters of one frame.
#[derive(Clone, Debug, PartialEq)]
struct Knot {
    f0: f64,
    /// Harmonic amplitudes; empty when unvoiced.
    amps: Vec<f64>,
    noise: Vec<f64>,
}

/// Per-stream synthesiser state: the running phase.
#[derive(Clone, Debug, Default)]
struct Synth {
    phase: f64,
}

impl Synth {
    /// Renders block `t` from `knots[0]` = knot `t` onwards.
    fn render_block(&mut self, t: usize, knots: &[&Knot], audio: &AudioConfig, noise: &NoiseTable, out: &mut Vec<f32>) {
        let sr = audio.sample_rate as f64;
        let mut sines = Vec::new();
        for n in audio.hop * t..audio.hop * (t + 1) {
            let (t0, fr) = knot_index(n, audio);
            let (a, b) = (knots[t0 - t], knots[t0 - t + 1]);
            let f = a.f0 * (1.0 - fr) + b.f0 * fr;
            self.phase = (self.phase + std::f64::consts::TAU * f / sr) % std::f64::consts::TAU;
            let kmax = a.amps.len().max(b.amps.len());
            let mut acc = 0.0;
            if kmax > 0 {
                sines.clear();
                chebyshev_sines(self.phase, kmax, &mut sines);
                for (k, s) in sines.iter().enumerate() {
                    let amp = a.amps.get(k).copied().unwrap_or(0.0) * (1.0 - fr) + b.amps.get(k).copied().unwrap_or(0.0) * fr;
                    acc += amp * s;
                }
            }
            for (bi, e) in noise.row(n).iter().enumerate() {
                acc += (a.noise[bi] * (1.0 - fr) + b.noise[bi] * fr) * *e as f64;
            }
            out.push((acc as f32).clamp(-MAX_ABS_SAMPLE, MAX_ABS_SAMPLE));
        }
    }
}

/// `sin(k * phase)` for `k = 1..=kmax`.
fn chebyshev_sines(phase: f64, kmax: usize, out: &mut Vec<f64>) {
    let c2 = 2.0 * phase.cos();
    let (mut prev, mut cur) = (0.0, phase.sin());
    for _ in 0..kmax {
        out.push(cur);
        let next = c2 * cur - prev;
        prev = cur;
        cur = next;
    }
}

// ------------------------------------------------------------ model

#[derive(Clone, Debug)]
pub struct Vocoder {
    pub cfg: VocoderConfig,
    pub params: ParamSet,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    edges: Vec<f64>,
    noise: Arc<NoiseTable>,
}

impl Vocoder {
    pub fn init(cfg: VocoderConfig, mean: Vec<f32>, std: Vec<f32>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "vocoder/init");
        let mut params = ParamSet::new();
        let bands = cfg.audio.mel_bins;
        let mut inp = bands;
        for l in 0..cfg.context.len() {
            let taps = cfg.spec(l).taps();
            params.add(&format!("l{l}.w"), uniform(&mut r, &[taps, inp, cfg.width], glorot_bound(inp * taps, cfg.width)));
            params.add(&format!("l{l}.b"), Tensor::zeros(&[cfg.width]));
            inp = cfg.width;
        }
        params.add("gain.w", uniform(&mut r, &[cfg.width, 2 * bands], 0.1 * glorot_bound(cfg.width, 2 * bands)));
        let mut gb = vec![-3.0f32; bands];
        gb.extend(vec![-5.0f32; bands]);
        params.add("gain.b", Tensor::new(vec![2 * bands], gb)?);
        params.add("pitch.w", uniform(&mut r, &[cfg.width, 3], glorot_bound(cfg.width, 3)));
        params.add("pitch.b", Tensor::new(vec![3], vec![(150f32).ln(), 0.0, 0.0])?);
        let edges = dsp::mel_edges(&cfg.audio);
        let noise = noise_table(&cfg.audio, cfg.noise_taps);
        Ok(Self { cfg, params, mean, std, edges, noise })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.cfg
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("parameter registered at init")
    }

    fn check_mel(&self, mel: &Tensor) -> Result<()> {
        if mel.shape().len() != 2 || mel.cols() != self.cfg.audio.mel_bins {
            return Err(Error::Shape { op: "vocoder", detail: format!("mel {:?}, expected {} bins", mel.shape(), self.cfg.audio.mel_bins) });
        }
        Ok(())
    }

    /// Output rows `rows` of layer `l` given its input buffered from `base`.
    fn layer_rows(&self, l: usize, x: &Tensor, base: usize, seq_len: usize, rows: Range<usize>) -> Result<Tensor> {
        let spec = self.cfg.spec(l);
        let mut h = kernels::conv1d_rows(x, base, seq_len, self.p(&format!("l{l}.w")), Some(self.p(&format!("l{l}.b"))), &spec, rows.clone())?
            .map(|v| v.max(0.0));
        if l > 0 {
            for (r, t) in rows.enumerate() {
                let xr = x.row(t - base);
                for (o, v) in h.row_mut(r).iter_mut().zip(xr) {
                    *o += *v;
                }
            }
        }
        Ok(h)
    }

    /// Builds knots from the last hidden layer and the raw mel rows.
    fn knots(&self, hidden: &Tensor, mel: &Tensor) -> Result<Vec<Knot>> {
        let gains = kernels::affine(hidden, self.p("gain.w"), Some(self.p("gain.b")))?;
        let pitch = kernels::affine(hidden, self.p("pitch.w"), Some(self.p("pitch.b")))?;
        let bands = self.cfg.audio.mel_bins;
        let ceiling = HARMONIC_CEILING * self.cfg.audio.nyquist();
        let mut out = Vec::with_capacity(mel.rows());
        for t in 0..mel.rows() {
            let m = mel.row(t);
            let g = gains.row(t);
            let gain = |j: usize| ((m[j % bands] + g[j]) as f64).min(20.0).exp();
            let p = pitch.row(t);
            let f0 = (p[0] as f64).exp().clamp(self.cfg.f0_min, self.cfg.f0_max);
            let voiced = p[2] > p[1];
            let mut amps = Vec::new();
            if voiced {
                for (k, b, w) in harmonic_bands(&self.edges, bands, f0, ceiling) {
                    if amps.len() <= k {
                        amps.resize(k + 1, 0.0);
                    }
                    amps[k] += w * gain(b);
                }
            }
            let noise = (0..bands).map(|b| gain(bands + b)).collect();
            out.push(Knot { f0, amps, noise });
        }
        Ok(out)
    }

    /// Offline synthesis: `mel.rows() * hop` samples.
    pub fn vocode(&self, mel: &Tensor) -> Result<Waveform> {
        self.check_mel(mel)?;
        let audio = &self.cfg.audio;
        let t_len = mel.rows();
        if t_len == 0 {
            return Waveform::new(vec![], audio.sample_rate);
        }
        let mut x = standardize(mel, &self.mean, &self.std)?;
        for l in 0..self.cfg.context.len() {
            x = self.layer_rows(l, &x, 0, t_len, 0..t_len)?;
        }
        x.ensure_finite("vocoder")?;
        let knots = self.knots(&x, mel)?;
        let mut synth = Synth::default();
        let mut out = Vec::with_capacity(t_len * audio.hop);
        let span = self.cfg.interp_lookahead() + 1;
        for t in 0..t_len {
            let ks: Vec<&Knot> = (t..t + span).map(|j| &knots[j.min(t_len - 1)]).collect();
            synth.render_block(t, &ks, audio, &self.noise, &mut out);
        }
        Waveform::new(out, audio.sample_rate)
    }

    /// Incremental synthesiser; see [`VocoderStream`].
    pub fn stream(&self) -> VocoderStream<'_> {
        VocoderStream::new(self)
    }

    /// Samples of block `t` of a full offline rendering.
    pub fn block(&self, mel: &Tensor, t: usize) -> Result<Vec<f32>> {
        let hop = self.cfg.audio.hop;
        Ok(self.vocode(mel)?.samples[t * hop..(t + 1) * hop].to_vec())
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
            return Err(Error::InvalidArgument(format!("bundle kind {} is not a vocoder", b.kind)));
        }
        let cfg: VocoderConfig = serde_json::from_value(b.arch.clone())?;
        let mut v = Self::init(cfg, b.stat("mel_mean")?.to_vec(), b.stat("mel_std")?.to_vec(), 0)?;
        if v.params.names() != b.params.names()
            || v.params.tensors().iter().zip(b.params.tensors()).any(|(a, c)| a.shape() != c.shape())
        {
            return Err(Error::InvalidArgument("vocoder bundle parameters do not match its architecture".into()));
        }
        v.params = b.params.clone();
        Ok(v)
    }

    // -------------------------------------------------------- training

    /// Trains on the given utterances with a multi-resolution STFT loss on
    /// the synthesised waveform plus F0 and voicing heads supervised by the
    /// generating latents.
    pub fn train(utts: &[&Utterance], cfg: VocoderConfig, tcfg: &VocoderTrainConfig, seed: u64) -> Result<(Self, TrainLog)> {
        if utts.is_empty() {
            return Err(Error::InvalidArgument("no training utterances".into()));
        }
        let (mean, std) = mel_stats(utts);
        let mut model = Self::init(cfg, mean, std, seed)?;
        let normed: Vec<Tensor> = utts.iter().map(|u| standardize(&u.mel, &model.mean, &model.std)).collect::<Result<_>>()?;
        let mut opt = Adam::new(tcfg.adam, &model.params);
        let mut r = rng::stream(seed, "vocoder/batches");
        let mut log = TrainLog::default();
        for step in 0..tcfg.steps {
            opt.set_lr(cosine_lr(tcfg.adam.lr, tcfg.final_lr_fraction, step, tcfg.steps));
            let (loss, grads) = {
                let mut g = Graph::new(&model.params);
                let mut total: Option<NodeId> = None;
                for _ in 0..tcfg.batch {
                    let i = r.gen_range(0..utts.len());
                    let (s, n) = crop(&mut r, utts[i].frames(), tcfg.crop_frames, 1);
                    let l = model.crop_loss(&mut g, utts[i], &normed[i], s, n, tcfg)?;
                    total = Some(match total {
                        Some(t) => g.add(t, l)?,
                        None => l,
                    });
                }
                let loss = g.scale(total.expect("batch > 0"), 1.0 / tcfg.batch as f64)?;
                (g.value(loss).data()[0] as f64, g.backward(loss)?)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: "vocoder".into(), step, detail: format!("loss {loss}") });
            }
            log.losses.push(loss);
            opt.step(&mut model.params, &grads)?;
        }
        Ok((model, log))
    }

    /// Loss of one crop of `n` frames starting at frame `s`.
    fn crop_loss(&self, g: &mut Graph<'_>, u: &Utterance, normed: &Tensor, s: usize, n: usize, tcfg: &VocoderTrainConfig) -> Result<NodeId> {
        let audio = &self.cfg.audio;
        let bands = audio.mel_bins;
        let t_len = u.frames();
        let r0 = s.saturating_sub(self.cfg.net_history());
        let r1 = (s + n + self.cfg.future_frames()).min(t_len);
        let mut h = g.input(normed.slice_rows(r0, r1))?;
        for l in 0..self.cfg.context.len() {
            let (w, b) = (g.param(&format!("l{l}.w"))?, g.param(&format!("l{l}.b"))?);
            let c = g.conv1d(h, w, Some(b), self.cfg.spec(l))?;
            let c = g.relu(c)?;
            h = if l == 0 { c } else { g.add(h, c)? };
        }
        let (gw, gb) = (g.param("gain.w")?, g.param("gain.b")?);
        let lg = g.affine(h, gw, Some(gb))?;
        let mel_rows = u.mel.slice_rows(r0, r1);
        let mut mm = Vec::with_capacity(mel_rows.len() * 2);
        for t in 0..mel_rows.rows() {
            mm.extend_from_slice(mel_rows.row(t));
            mm.extend_from_slice(mel_rows.row(t));
        }
        let mm = g.input(Tensor::new(vec![mel_rows.rows(), 2 * bands], mm)?)?;
        let lg = g.add(lg, mm)?;
        let gains = g.exp(lg)?;

        let (ids0, ids1, p0, p1) = self.training_bases(u, s, n, r0)?;
        let g0 = g.embed(gains, &ids0)?;
        let g1 = g.embed(gains, &ids1)?;
        let p0 = g.input(p0)?;
        let p1 = g.input(p1)?;
        let a = g.mul(g0, p0)?;
        let b = g.mul(g1, p1)?;
        let y = g.add(a, b)?;
        let y = g.sum_cols(y)?;

        let target = &u.wave[s * audio.hop..(s + n) * audio.hop];
        let mut loss = None;
        for (fft, win, hop) in LOSS_RESOLUTIONS {
            let spec = StftSpec { fft, win, hop };
            if target.len() < win {
                continue;
            }
            let (tm, _, _) = kernels::stft_mag(target, &spec)?;
            let tlog = tm.map(|v| (v as f64 + LOSS_MAG_EPS).ln() as f32);
            let tnorm = tm.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let ym = g.stft_mag(y, spec)?;
            let yl = g.add_scalar(ym, LOSS_MAG_EPS)?;
            let yl = g.log(yl)?;
            let tl = g.input(tlog)?;
            let l1 = g.l1(yl, tl)?;
            let tmn = g.input(tm)?;
            let d = g.sub(tmn, ym)?;
            let d2 = g.mul(d, d)?;
            let ss = g.sum_all(d2)?;
            let ss = g.add_scalar(ss, 1e-12)?;
            let sc = g.sqrt(ss)?;
            let sc = g.scale(sc, 1.0 / (tnorm + 1e-7))?;
            let term = g.add(l1, sc)?;
            loss = Some(match loss {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        let mut loss = loss.ok_or_else(|| Error::InvalidArgument("crop shorter than every STFT window".into()))?;

        let (pw, pb) = (g.param("pitch.w")?, g.param("pitch.b")?);
        let pitch = g.affine(h, pw, Some(pb))?;
        let rows: Vec<usize> = (s - r0..s - r0 + n).collect();
        let pitch = g.embed(pitch, &rows)?;
        let voiced = u.voiced();
        let mask: Vec<f32> = voiced[s..s + n].iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
        let lf0: Vec<f32> = u.f0[s..s + n].iter().zip(&mask).map(|(f, m)| f.ln() * m).collect();
        let pick_f0 = g.input(Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0])?)?;
        let pick_v = g.input(Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0])?)?;
        let pf = g.affine(pitch, pick_f0, None)?;
        let m = g.input(Tensor::new(vec![n, 1], mask.clone())?)?;
        let pf = g.mul(pf, m)?;
        let tf = g.input(Tensor::new(vec![n, 1], lf0)?)?;
        let f0_loss = g.l1(pf, tf)?;
        let f0_loss = g.scale(f0_loss, tcfg.f0_weight)?;
        let vl = g.affine(pitch, pick_v, None)?;
        let labels: Vec<usize> = mask.iter().map(|v| *v as usize).collect();
        let ce = g.cross_entropy(vl, &labels)?;
        let ce = g.scale(ce, tcfg.voicing_weight)?;
        loss = g.add(loss, f0_loss)?;
        g.add(loss, ce)
    }

    /// Gather indices and basis matrices expressing the synthesiser as
    /// `sum_b G[t0(n), b] * P0[n, b] + G[t1(n), b] * P1[n, b]` over the
    /// concatenated harmonic and noise gains, using the true F0 and voicing.
    fn training_bases(&self, u: &Utterance, s: usize, n: usize, r0: usize) -> Result<(Vec<usize>, Vec<usize>, Tensor, Tensor)> {
        let audio = &self.cfg.audio;
        let bands = audio.mel_bins;
        let t_len = u.frames();
        let sr = audio.sample_rate as f64;
        let ceiling = HARMONIC_CEILING * audio.nyquist();
        let voiced = u.voiced();
        let maps: HashMap<usize, Vec<(usize, usize, f64)>> = (s..(s + n + self.cfg.interp_lookahead()).min(t_len))
            .map(|t| {
                let m = if voiced[t] { harmonic_bands(&self.edges, bands, u.f0[t] as f64, ceiling) } else { vec![] };
                (t, m)
            })
            .collect();
        let samples = n * audio.hop;
        let mut ids0 = Vec::with_capacity(samples);
        let mut ids1 = Vec::with_capacity(samples);
        let mut p0 = vec![0f32; samples * 2 * bands];
        let mut p1 = vec![0f32; samples * 2 * bands];
        let mut phase = 0.0f64;
        let mut sines = Vec::new();
        for i in 0..samples {
            let idx = s * audio.hop + i;
            let (k0, fr) = knot_index(idx, audio);
            let t0 = k0.min(t_len - 1);
            let t1 = (k0 + 1).min(t_len - 1);
            ids0.push(t0 - r0);
            ids1.push(t1 - r0);
            let f = u.f0[t0] as f64 * (1.0 - fr) + u.f0[t1] as f64 * fr;
            phase = (phase + std::f64::consts::TAU * f / sr) % std::f64::consts::TAU;
            let row0 = &mut p0[i * 2 * bands..(i + 1) * 2 * bands];
            let row1 = &mut p1[i * 2 * bands..(i + 1) * 2 * bands];
            let (m0, m1) = (&maps[&t0], &maps[&t1]);
            let kmax = m0.iter().chain(m1).map(|e| e.0 + 1).max().unwrap_or(0);
            if kmax > 0 {
                sines.clear();
                chebyshev_sines(phase, kmax, &mut sines);
                for &(k, b, w) in m0 {
                    row0[b] += (w * sines[k] * (1.0 - fr)) as f32;
                }
                for &(k, b, w) in m1 {
                    row1[b] += (w * sines[k] * fr) as f32;
                }
            }
            for (b, e) in self.noise.row(idx).iter().enumerate() {
                row0[bands + b] = e * (1.0 - fr) as f32;
                row1[bands + b] = e * fr as f32;
            }
        }
        Ok((ids0, ids1, Tensor::new(vec![samples, 2 * bands], p0)?, Tensor::new(vec![samples, 2 * bands], p1)?))
    }
}

// ------------------------------------------------------------ streaming

/// Incremental vocoder. Frames are pushed as they arrive; block `t` is
/// emitted as soon as frame `t + future_frames` has been pushed, and
/// `finish` renders the tail with the last knot held.
pub struct VocoderStream<'a> {
    voc: &'a Vocoder,
    /// Input buffer of each layer: (absolute index of row 0, rows).
    bufs: Vec<(usize, Tensor)>,
    /// Output rows already computed per layer.
    done: Vec<usize>,
    hidden: Tensor,
    hidden_base: usize,
    raw: Tensor,
    knots: Vec<Knot>,
    knot_base: usize,
    pushed: usize,
    rendered: usize,
    synth: Synth,
    finished: bool,
}

impl<'a> VocoderStream<'a> {
    fn new(voc: &'a Vocoder) -> Self {
        let bands = voc.cfg.audio.mel_bins;
        let layers = voc.cfg.context.len();
        let bufs = (0..layers).map(|l| (0, Tensor::zeros(&[0, if l == 0 { bands } else { voc.cfg.width }]))).collect();
        Self {
            voc,
            bufs,
            done: vec![0; layers],
            hidden: Tensor::zeros(&[0, voc.cfg.width]),
            hidden_base: 0,
            raw: Tensor::zeros(&[0, bands]),
            knots: Vec::new(),
            knot_base: 0,
            pushed: 0,
            rendered: 0,
            synth: Synth::default(),
            finished: false,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.voc);
    }

    /// Frames pushed so far.
    pub fn frames(&self) -> usize {
        self.pushed
    }

    /// Blocks emitted so far.
    pub fn blocks(&self) -> usize {
        self.rendered
    }

    /// Pushes mel rows and returns every sample block that became ready.
    pub fn push(&mut self, mel: &Tensor) -> Result<Vec<f32>> {
        if self.finished {
            return Err(Error::InvalidArgument("vocoder stream already finished".into()));
        }
        self.voc.check_mel(mel)?;
        let x = standardize(mel, &self.voc.mean, &self.voc.std)?;
        self.bufs[0].1.append_rows(&x)?;
        self.raw.append_rows(mel)?;
        self.pushed += mel.rows();
        self.advance(false)
    }

    /// Renders the remaining blocks, holding the last knot for the missing
    /// future frames.
    pub fn finish(&mut self) -> Result<Vec<f32>> {
        if self.finished {
            return Ok(vec![]);
        }
        let out = self.advance(true)?;
        self.finished = true;
        Ok(out)
    }

    fn advance(&mut self, last: bool) -> Result<Vec<f32>> {
        let voc = self.voc;
        let cfg = &voc.cfg;
        let layers = cfg.context.len();
        let mut avail = self.pushed;
        for l in 0..layers {
            let spec = cfg.spec(l);
            let limit = if last { avail } else { avail.saturating_sub(spec.lookahead()) };
            let start = self.done[l];
            if limit > start {
                let (base, buf) = &self.bufs[l];
                let seq_len = if last { self.pushed } else { avail };
                let y = voc.layer_rows(l, buf, *base, seq_len, start..limit)?;
                if l + 1 < layers {
                    self.bufs[l + 1].1.append_rows(&y)?;
                } else {
                    self.hidden.append_rows(&y)?;
                }
                self.done[l] = limit;
            }
            // keep only rows later outputs can still read
            let keep_from = self.done[l].saturating_sub(spec.history());
            let (base, buf) = &mut self.bufs[l];
            if keep_from > *base {
                *buf = buf.slice_rows(keep_from - *base, buf.rows());
                *base = keep_from;
            }
            avail = self.done[l];
        }
        // new knots from freshly computed hidden rows
        let have = self.knot_base + self.knots.len();
        let hidden_end = self.hidden_base + self.hidden.rows();
        if hidden_end > have {
            let h = self.hidden.slice_rows(have - self.hidden_base, hidden_end - self.hidden_base);
            let m = self.raw.slice_rows(have - self.knot_base_raw(), hidden_end - self.knot_base_raw());
            self.knots.extend(voc.knots(&h, &m)?);
        }
        let mut out = Vec::new();
        let span = cfg.interp_lookahead() + 1;
        let known = self.knot_base + self.knots.len();
        while self.rendered < self.pushed && (last || self.rendered + span <= known) {
            let t = self.rendered;
            let ks: Vec<&Knot> = (t..t + span).map(|j| &self.knots[j.min(known - 1) - self.knot_base]).collect();
            self.synth.render_block(t, &ks, &cfg.audio, &voc.noise, &mut out);
            self.rendered += 1;
        }
        // drop knots, hidden rows and raw rows no future block needs
        let keep = self.rendered.min(known);
        if keep > self.knot_base {
            let drop = keep - self.knot_base;
            self.knots.drain(..drop);
            self.knot_base = keep;
        }
        if keep > self.hidden_base {
            let d = (keep - self.hidden_base).min(self.hidden.rows());
            self.hidden = self.hidden.slice_rows(d, self.hidden.rows());
            self.hidden_base += d;
            let rd = d.min(self.raw.rows());
            self.raw = self.raw.slice_rows(rd, self.raw.rows());
        }
        Ok(out)
    }

    /// Absolute frame index of the first buffered raw mel row. Raw rows are
    /// trimmed in lockstep with hidden rows.
    fn knot_base_raw(&self) -> usize {
        self.hidden_base
    }
}

/// Largest `d` such that perturbing mel frame `t + d` changes any sample of
/// output block `t`, over the probe frames `ts`. Computed by brute force
/// from offline renderings, so it measures the implemented receptive field
/// rather than the configured one.
pub fn measure_lookahead(voc: &Vocoder, mel: &Tensor, ts: &[usize]) -> Result<usize> {
    let base = voc.vocode(mel)?;
    let hop = voc.cfg.audio.hop;
    let mut worst = 0;
    for &t in ts {
        let reference = &base.samples[t * hop..(t + 1) * hop];
        for d in 0..mel.rows().saturating_sub(t) {
            let mut m = mel.clone();
            for v in m.row_mut(t + d) {
                *v += 0.5;
            }
            let w = voc.vocode(&m)?;
            if w.samples[t * hop..(t + 1) * hop] != *reference {
                worst = worst.max(d);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mel(frames: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test/mel");
        let data = (0..frames * 20).map(|_| r.gen_range(-6.0..0.0)).collect();
        Tensor::new(vec![frames, 20], data).unwrap()
    }

    fn model() -> Vocoder {
        Vocoder::init(VocoderConfig::default(), vec![-3.0; 20], vec![1.5; 20], 7).unwrap()
    }

    #[test]
    fn default_budget_is_two_frames() {
        let cfg = VocoderConfig::default();
        assert_eq!(cfg.net_future(), 0);
        assert_eq!(cfg.interp_lookahead(), 2);
        assert_eq!(cfg.future_frames(), 2);
        assert_eq!(cfg.lookahead_ms(), 20.0);
        let mut wide = cfg.clone();
        wide.context[1] = (2, 1);
        assert!(matches!(wide.validate(), Err(Error::InvalidConfig(_))));
        wide.lookahead_frames = 3;
        wide.validate().unwrap();
    }

    #[test]
    fn output_length_is_frames_times_hop() {
        let v = model();
        for frames in [1, 2, 3, 17] {
            assert_eq!(v.vocode(&random_mel(frames, frames as u64)).unwrap().len(), frames * 80);
        }
        assert!(v.vocode(&Tensor::zeros(&[4, 19])).is_err());
    }

    #[test]
    fn streaming_matches_offline_for_any_push_pattern() {
        let v = model();
        let mel = random_mel(40, 3);
        let offline = v.vocode(&mel).unwrap().samples;
        for pattern in [vec![1usize], vec![3, 1, 7], vec![16], vec![40]] {
            let mut s = v.stream();
            let mut out = Vec::new();
            let (mut at, mut i) = (0, 0);
            while at < 40 {
                let n = pattern[i % pattern.len()].min(40 - at);
                out.extend(s.push(&mel.slice_rows(at, at + n)).unwrap());
                assert!(s.blocks() + v.cfg.future_frames() >= s.frames() || s.blocks() == s.frames());
                at += n;
                i += 1;
            }
            out.extend(s.finish().unwrap());
            assert_eq!(out, offline, "pattern {pattern:?}");
        }
    }

    #[test]
    fn stream_emits_block_once_lookahead_arrives() {
        let v = model();
        let mel = random_mel(10, 4);
        let mut s = v.stream();
        assert!(s.push(&mel.slice_rows(0, 2)).unwrap().is_empty());
        assert_eq!(s.push(&mel.slice_rows(2, 3)).unwrap().len(), 80);
        assert_eq!(s.push(&mel.slice_rows(3, 6)).unwrap().len(), 3 * 80);
    }

    #[test]
    fn measured_lookahead_equals_declared() {
        let v = model();
        let mel = random_mel(24, 5);
        assert_eq!(measure_lookahead(&v, &mel, &[3, 10]).unwrap(), v.cfg.lookahead_frames);
    }

    #[test]
    fn noise_table_is_deterministic_and_band_limited() {
        let audio = AudioConfig::default();
        let a = noise_table(&audio, 128);
        let b = build_noise_table(&audio, 128);
        assert_eq!(a.data, b.data);
        // the lowest band carries far less energy than the widest high band
        let e = |band: usize| (0..4096).map(|n| (a.row(n)[band] as f64).powi(2)).sum::<f64>();
        assert!(e(0) < e(19));
        assert!(e(19) > 0.0);
    }

    #[test]
    fn bundle_roundtrip_preserves_output() {
        let v = model();
        let back = Vocoder::from_bundle(&v.to_bundle()).unwrap();
        let mel = random_mel(6, 9);
        assert_eq!(v.vocode(&mel).unwrap(), back.vocode(&mel).unwrap());
    }
}
