//! End-to-end streaming conversion: incremental mel frontend, streaming
//! recognizer, student acoustic model and streaming vocoder chained
//! chunk by chunk, plus latency and real-time-factor accounting.
//!
//! Output is released as soon as a whole encoder chunk has been buffered
//! and the vocoder has its two frames of lookahead, so the worst-case
//! input-to-output delay is `chunk_ms + vocoder_lookahead_ms` (180 ms with
//! the default 16-frame chunk and 8 kHz / 10 ms framing).

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticModel, AmKind, AmStream};
use crate::dsp::{AudioConfig, MelExtractor, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::recognizer::{EncoderMode, EncoderStream, Recognizer};
use crate::vocoder::{Vocoder, VocoderStream};

/// Shared, read-only model triplet for one conversion system.
#[derive(Clone, Copy)]
pub struct VcModels<'a> {
    pub recognizer: &'a Recognizer,
    pub acoustic: &'a AcousticModel,
    pub vocoder: &'a Vocoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvertMode {
    Teacher,
    Student,
}

impl<'a> VcModels<'a> {
    pub fn new(recognizer: &'a Recognizer, acoustic: &'a AcousticModel, vocoder: &'a Vocoder) -> Result<Self> {
        let m = Self { recognizer, acoustic, vocoder };
        m.validate()?;
        Ok(m)
    }

    pub fn mode(&self) -> ConvertMode {
        match self.acoustic.cfg.kind {
            AmKind::Teacher => ConvertMode::Teacher,
            AmKind::Student => ConvertMode::Student,
        }
    }

    pub fn audio(&self) -> &AudioConfig {
        &self.vocoder.cfg.audio
    }

    /// IBF tap consumed by the acoustic model.
    pub fn tap(&self) -> usize {
        self.acoustic.cfg.ibf_layer
    }

    fn validate(&self) -> Result<()> {
        let (rec, am, voc) = (&self.recognizer.cfg, &self.acoustic.cfg, &self.vocoder.cfg);
        let bad = |m: String| Err(Error::InvalidArgument(format!("model triplet: {m}")));
        let k = am.ibf_layer;
        if k == 0 || k > rec.layers {
            return bad(format!("acoustic model taps layer {k}, recognizer has {}", rec.layers));
        }
        if rec.tap_width(k) != am.ibf_width {
            return bad(format!("tap {k} has width {}, acoustic model expects {}", rec.tap_width(k), am.ibf_width));
        }
        if rec.mel_bins != am.mel_bins || voc.audio.mel_bins != am.mel_bins {
            return bad("mel band counts disagree".into());
        }
        match am.kind {
            AmKind::Student => {
                if rec.mode != EncoderMode::Streaming {
                    return bad("student needs a streaming recognizer".into());
                }
                if rec.chunk_frames != am.chunk_frames {
                    return bad(format!("chunk sizes differ: {} vs {}", rec.chunk_frames, am.chunk_frames));
                }
            }
            AmKind::Teacher => {
                if rec.mode != EncoderMode::NonStreaming {
                    return bad("teacher needs a non-streaming recognizer".into());
                }
            }
        }
        Ok(())
    }

    /// Samples per encoder chunk (student only).
    pub fn chunk_samples(&self) -> usize {
        self.acoustic.cfg.chunk_frames * self.audio().hop
    }

    pub fn chunk_ms(&self) -> f64 {
        self.acoustic.cfg.chunk_frames as f64 * self.audio().frame_ms()
    }

    /// Worst-case delay implied by buffering alone.
    pub fn algorithmic_latency_ms(&self) -> f64 {
        self.chunk_ms() + self.vocoder.config().lookahead_ms()
    }
}

/// One-shot conversion of a whole waveform.
///
/// Teacher mode reads the non-streaming recognizer; student mode runs the
/// same arithmetic as [`StreamState`], including zero-padding the input to
/// a whole number of chunks, so its output matches the streamed one.
pub fn convert_offline(models: &VcModels, wave: &Waveform, target: &str) -> Result<Waveform> {
    let audio = models.audio();
    check_rate(audio, wave.sample_rate)?;
    let spk = models.acoustic.speaker_index(target)?;
    let unit = match models.mode() {
        ConvertMode::Teacher => audio.hop,
        ConvertMode::Student => models.chunk_samples(),
    };
    let n = wave.len();
    let mut x = wave.samples.clone();
    x.resize(n.div_ceil(unit) * unit, 0.0);
    let mel = MelExtractor::new(*audio)?.frontend(&x);
    let k = models.tap();
    let ibf = models.recognizer.extract_ibf(&mel, k)?;
    let out = models.acoustic.forward(&ibf, k, spk)?;
    let mut y = models.vocoder.vocode(&out)?.samples;
    y.truncate(n);
    Waveform::new(y, audio.sample_rate)
}

fn check_rate(audio: &AudioConfig, rate: u32) -> Result<()> {
    if rate != audio.sample_rate {
        return Err(Error::InvalidArgument(format!("sample rate {rate} Hz, models expect {} Hz", audio.sample_rate)));
    }
    Ok(())
}

/// Incremental front-padded mel framing that groups frames into chunks.
/// Produces exactly the rows of [`MelExtractor::frontend`].
struct Framer {
    mel: MelExtractor,
    chunk_frames: usize,
    /// Padded signal from the start of the next frame onwards.
    pending: Vec<f32>,
    rows: Vec<f32>,
    received: usize,
}

impl Framer {
    fn new(audio: AudioConfig, chunk_frames: usize) -> Result<Self> {
        Ok(Self {
            mel: MelExtractor::new(audio)?,
            chunk_frames,
            pending: vec![0.0; audio.front_pad()],
            rows: Vec::new(),
            received: 0,
        })
    }

    fn reset(&mut self) {
        let audio = *self.mel.config();
        self.pending = vec![0.0; audio.front_pad()];
        self.rows.clear();
        self.received = 0;
    }

    /// Appends samples and returns every chunk of mel rows completed.
    fn push(&mut self, samples: &[f32]) -> Vec<Tensor> {
        let audio = *self.mel.config();
        let (win, hop, bins) = (audio.win, audio.hop, audio.mel_bins);
        self.received += samples.len();
        self.pending.extend_from_slice(samples);
        let mut chunks = Vec::new();
        let mut start = 0;
        let mut frame = vec![0f32; bins];
        while self.pending.len() - start >= win {
            self.mel.frame(&self.pending[start..start + win], &mut frame);
            self.rows.extend_from_slice(&frame);
            start += hop;
            if self.rows.len() == self.chunk_frames * bins {
                let data = std::mem::take(&mut self.rows);
                chunks.push(Tensor::new(vec![self.chunk_frames, bins], data).expect("chunk rows"));
            }
        }
        self.pending.drain(..start);
        chunks
    }

    /// Zero samples that complete the final partial chunk.
    fn padding(&self) -> usize {
        let unit = self.chunk_frames * self.mel.config().hop;
        (unit - self.received % unit) % unit
    }
}

/// Per-stream state of the streaming pipeline.
pub struct StreamState<'a> {
    models: VcModels<'a>,
    framer: Framer,
    encoder: EncoderStream<'a>,
    acoustic: AmStream<'a>,
    vocoder: VocoderStream<'a>,
    emitted: usize,
    finished: bool,
    poisoned: bool,
    /// Monotonic time spent inside `push_audio` and `flush`.
    busy: std::time::Duration,
}

impl<'a> StreamState<'a> {
    pub fn new(models: VcModels<'a>, target: &str) -> Result<Self> {
        if models.mode() != ConvertMode::Student {
            return Err(Error::InvalidArgument("streaming needs a student acoustic model".into()));
        }
        let spk = models.acoustic.speaker_index(target)?;
        Ok(Self {
            models,
            framer: Framer::new(*models.audio(), models.acoustic.cfg.chunk_frames)?,
            encoder: models.recognizer.stream(models.tap())?,
            acoustic: models.acoustic.stream(spk)?,
            vocoder: models.vocoder.stream(),
            emitted: 0,
            finished: false,
            poisoned: false,
            busy: Default::default(),
        })
    }

    pub fn models(&self) -> &VcModels<'a> {
        &self.models
    }

    pub fn sample_rate(&self) -> u32 {
        self.models.audio().sample_rate
    }

    /// Input samples received since construction or the last reset.
    pub fn received(&self) -> usize {
        self.framer.received
    }

    /// Output samples emitted so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn busy_time(&self) -> std::time::Duration {
        self.busy
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn reset(&mut self) {
        self.framer.reset();
        self.encoder.reset();
        self.acoustic.reset();
        self.vocoder.reset();
        self.emitted = 0;
        self.finished = false;
        self.poisoned = false;
        self.busy = Default::default();
    }

    /// Feeds samples; returns whatever output became ready (possibly none).
    pub fn push_audio(&mut self, samples: &[f32], sample_rate: u32) -> Result<Vec<f32>> {
        if self.poisoned {
            return Err(Error::Poisoned);
        }
        check_rate(self.models.audio(), sample_rate)?;
        if self.finished {
            return Err(Error::InvalidArgument("stream already flushed; reset it first".into()));
        }
        let t0 = Instant::now();
        let res = self.run(samples);
        self.busy += t0.elapsed();
        self.settle(res)
    }

    /// Ends the stream: zero-pads the final partial chunk, drains the
    /// vocoder and trims the output to the input length.
    pub fn flush(&mut self) -> Result<Vec<f32>> {
        if self.poisoned {
            return Err(Error::Poisoned);
        }
        if self.finished {
            return Ok(vec![]);
        }
        let t0 = Instant::now();
        let res = self.run_flush();
        self.busy += t0.elapsed();
        self.finished = true;
        self.settle(res)
    }

    fn settle(&mut self, res: Result<Vec<f32>>) -> Result<Vec<f32>> {
        match res {
            Ok(out) => {
                self.emitted += out.len();
                Ok(out)
            }
            Err(e) => {
                self.poisoned = true;
                Err(e)
            }
        }
    }

    fn run(&mut self, samples: &[f32]) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for chunk in self.framer.push(samples) {
            let ibf = self.encoder.push_chunk(&chunk)?;
            let mel = self.acoustic.push_chunk(&ibf)?;
            out.extend(self.vocoder.push(&mel)?);
        }
        Ok(out)
    }

    fn run_flush(&mut self) -> Result<Vec<f32>> {
        let total = self.framer.received;
        let pad = vec![0.0; self.framer.padding()];
        let mut out = self.run(&pad)?;
        out.extend(self.vocoder.finish()?);
        let keep = total.saturating_sub(self.emitted).min(out.len());
        out.truncate(keep);
        Ok(out)
    }
}

/// Runs the three stages on separate threads joined by bounded queues of
/// whole chunks. Output equals a synchronous [`StreamState`] fed the same
/// input and then flushed.
pub fn run_pipelined(models: VcModels, target: &str, input: &[f32], push_size: usize, depth: usize) -> Result<Vec<f32>> {
    if models.mode() != ConvertMode::Student {
        return Err(Error::InvalidArgument("streaming needs a student acoustic model".into()));
    }
    let spk = models.acoustic.speaker_index(target)?;
    let push_size = push_size.max(1);
    let depth = depth.max(1);
    let (tx_ibf, rx_ibf) = sync_channel::<Tensor>(depth);
    let (tx_mel, rx_mel) = sync_channel::<Tensor>(depth);

    std::thread::scope(|s| {
        let front = s.spawn(move || -> Result<()> {
            let mut framer = Framer::new(*models.audio(), models.acoustic.cfg.chunk_frames)?;
            let mut enc = models.recognizer.stream(models.tap())?;
            let send = |tx: &SyncSender<Tensor>, t: Tensor| tx.send(t).map_err(|_| Error::InvalidArgument("acoustic stage stopped".into()));
            for piece in input.chunks(push_size) {
                for chunk in framer.push(piece) {
                    send(&tx_ibf, enc.push_chunk(&chunk)?)?;
                }
            }
            let pad = vec![0.0; framer.padding()];
            for chunk in framer.push(&pad) {
                send(&tx_ibf, enc.push_chunk(&chunk)?)?;
            }
            Ok(())
        });
        let middle = s.spawn(move || -> Result<()> {
            let mut am = models.acoustic.stream(spk)?;
            for ibf in rx_ibf.iter() {
                tx_mel.send(am.push_chunk(&ibf)?).map_err(|_| Error::InvalidArgument("vocoder stage stopped".into()))?;
            }
            Ok(())
        });
        let back = vocoder_stage(models.vocoder, rx_mel, input.len());
        let join = |h: std::thread::ScopedJoinHandle<'_, Result<()>>| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("pipeline worker panicked".into())));
        // report the most upstream failure first
        join(front)?;
        join(middle)?;
        back
    })
}

fn vocoder_stage(voc: &Vocoder, rx: Receiver<Tensor>, total: usize) -> Result<Vec<f32>> {
    let mut vs = voc.stream();
    let mut out = Vec::with_capacity(total);
    for mel in rx.iter() {
        out.extend(vs.push(&mel)?);
    }
    out.extend(vs.finish()?);
    out.truncate(total);
    Ok(out)
}

/// Anything that turns pushed audio into emitted audio incrementally.
pub trait StreamProcessor {
    fn sample_rate(&self) -> u32;
    fn push(&mut self, samples: &[f32]) -> Result<Vec<f32>>;
    fn flush(&mut self) -> Result<Vec<f32>>;
    fn reset(&mut self);
    /// Algorithmic latency of this processor in milliseconds.
    fn algorithmic_latency_ms(&self) -> f64;
}

impl StreamProcessor for StreamState<'_> {
    fn sample_rate(&self) -> u32 {
        StreamState::sample_rate(self)
    }
    fn push(&mut self, samples: &[f32]) -> Result<Vec<f32>> {
        let sr = StreamState::sample_rate(self);
        self.push_audio(samples, sr)
    }
    fn flush(&mut self) -> Result<Vec<f32>> {
        StreamState::flush(self)
    }
    fn reset(&mut self) {
        StreamState::reset(self)
    }
    fn algorithmic_latency_ms(&self) -> f64 {
        self.models.algorithmic_latency_ms()
    }
}

/// Pass-through processor used as a timing baseline.
pub struct IdentityStream {
    pub sample_rate: u32,
}

impl StreamProcessor for IdentityStream {
    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
    fn push(&mut self, samples: &[f32]) -> Result<Vec<f32>> {
        Ok(samples.to_vec())
    }
    fn flush(&mut self) -> Result<Vec<f32>> {
        Ok(vec![])
    }
    fn reset(&mut self) {}
    fn algorithmic_latency_ms(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub threads_used: usize,
    pub clock: String,
}

impl MachineInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            threads_used: 1,
            clock: "std::time::Instant (monotonic)".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Chunk duration plus vocoder lookahead.
    pub algorithmic_latency_ms: f64,
    /// Worst delay, over every emitted sample, between the sample entering
    /// the pipeline on a real-time clock and its converted counterpart
    /// leaving it. Compute time is added on top of buffering delay.
    pub first_output_latency_ms: f64,
    /// Processing time divided by audio duration.
    pub rtf: f64,
    pub audio_seconds: f64,
    pub compute_seconds: f64,
    pub push_samples: usize,
    pub utterances: usize,
    pub machine: MachineInfo,
}

impl LatencyReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Streams every waveform through `proc` in `push_samples` pieces, as if
/// they arrived in real time, and reports latency and real-time factor.
///
/// Arrival of piece `i` happens at its last sample's audio time; a piece
/// starts processing once it has arrived and the previous one is done.
pub fn measure_rtf<P: StreamProcessor>(proc: &mut P, waves: &[&Waveform], push_samples: usize) -> Result<LatencyReport> {
    Ok(run_timed(proc, waves, push_samples)?.1)
}

/// [`measure_rtf`] that also returns each stream's output.
pub fn run_timed<P: StreamProcessor>(proc: &mut P, waves: &[&Waveform], push_samples: usize) -> Result<(Vec<Vec<f32>>, LatencyReport)> {
    if waves.is_empty() {
        return Err(Error::InvalidArgument("no utterances to time".into()));
    }
    let push_samples = push_samples.max(1);
    let sr = proc.sample_rate() as f64;
    let mut compute = 0.0f64;
    let mut audio = 0.0f64;
    let mut worst = 0.0f64;
    let mut outputs = Vec::with_capacity(waves.len());
    for w in waves {
        check_rate_of(proc.sample_rate(), w.sample_rate)?;
        proc.reset();
        let mut done = 0.0f64;
        let mut y: Vec<f32> = Vec::with_capacity(w.len());
        let mut emit = |out: Vec<f32>, arrival: f64, secs: f64, y: &mut Vec<f32>| {
            done = done.max(arrival) + secs;
            if !out.is_empty() {
                // the earliest sample of this batch waited longest
                worst = worst.max(done - y.len() as f64 / sr);
            }
            y.extend(out);
        };
        for (i, piece) in w.samples.chunks(push_samples).enumerate() {
            let t0 = Instant::now();
            let out = proc.push(piece)?;
            let secs = t0.elapsed().as_secs_f64();
            compute += secs;
            emit(out, (i * push_samples + piece.len()) as f64 / sr, secs, &mut y);
        }
        let t0 = Instant::now();
        let out = proc.flush()?;
        let secs = t0.elapsed().as_secs_f64();
        compute += secs;
        emit(out, w.len() as f64 / sr, secs, &mut y);
        audio += w.duration_s();
        outputs.push(y);
    }
    let report = LatencyReport {
        algorithmic_latency_ms: proc.algorithmic_latency_ms(),
        first_output_latency_ms: 1000.0 * worst,
        rtf: compute.max(f64::MIN_POSITIVE) / audio.max(f64::MIN_POSITIVE),
        audio_seconds: audio,
        compute_seconds: compute,
        push_samples,
        utterances: waves.len(),
        machine: MachineInfo::current(),
    };
    Ok((outputs, report))
}

fn check_rate_of(expected: u32, got: u32) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidArgument(format!("sample rate {got} Hz, processor expects {expected} Hz")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::AcousticConfig;
    use crate::recognizer::EncoderConfig;
    use crate::vocoder::VocoderConfig;
    use rand::{Rng, SeedableRng};

    struct Fixture {
        rec: Recognizer,
        ns: Recognizer,
        student: AcousticModel,
        teacher: AcousticModel,
        voc: Vocoder,
    }

    fn speakers() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    fn fixture(k: usize) -> Fixture {
        let ecfg = EncoderConfig::default();
        let bins = ecfg.mel_bins;
        let rec = Recognizer::init(ecfg.clone().streaming(), vec![-4.0; bins], vec![2.0; bins], 1).unwrap();
        let ns = Recognizer::init(ecfg.clone(), vec![-4.0; bins], vec![2.0; bins], 2).unwrap();
        let w = ecfg.tap_width(k);
        let stats = || [vec![0.0; w], vec![1.0; w], vec![-4.0; bins], vec![2.0; bins]];
        let student = AcousticModel::init(AcousticConfig::new(AmKind::Student, k, w, speakers()), stats(), 3).unwrap();
        let teacher = AcousticModel::init(AcousticConfig::new(AmKind::Teacher, k, w, speakers()), stats(), 4).unwrap();
        let voc = Vocoder::init(VocoderConfig::default(), vec![-4.0; bins], vec![2.0; bins], 5).unwrap();
        Fixture { rec, ns, student, teacher, voc }
    }

    impl Fixture {
        fn student(&self) -> VcModels<'_> {
            VcModels::new(&self.rec, &self.student, &self.voc).unwrap()
        }
    }

    fn signal(n: usize, seed: u64) -> Vec<f32> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| 0.3 * (i as f32 * 0.07).sin() + 0.05 * r.gen_range(-1.0f32..1.0)).collect()
    }

    fn stream_all(st: &mut StreamState, x: &[f32], piece: usize) -> Vec<f32> {
        let mut out = Vec::new();
        for p in x.chunks(piece) {
            out.extend(st.push_audio(p, 8000).unwrap());
        }
        out.extend(st.flush().unwrap());
        out
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn framer_reproduces_frontend_rows() {
        let audio = AudioConfig::default();
        let x = signal(16 * 80 * 3, 1);
        let mut f = Framer::new(audio, 16).unwrap();
        let mut rows = Vec::new();
        for p in x.chunks(37) {
            for c in f.push(p) {
                rows.extend_from_slice(c.data());
            }
        }
        assert_eq!(rows, MelExtractor::new(audio).unwrap().frontend(&x).data());
    }

    #[test]
    fn one_sample_pushes_equal_a_single_call() {
        let fx = fixture(3);
        let x = signal(3000, 2);
        let mut a = StreamState::new(fx.student(), "b").unwrap();
        let mut b = StreamState::new(fx.student(), "b").unwrap();
        assert_eq!(stream_all(&mut a, &x, 1), stream_all(&mut b, &x, x.len()));
    }

    #[test]
    fn streamed_matches_offline_student() {
        let fx = fixture(4);
        let x = signal(4321, 3);
        let mut st = StreamState::new(fx.student(), "a").unwrap();
        let streamed = stream_all(&mut st, &x, 160);
        let offline = convert_offline(&fx.student(), &Waveform::new(x.clone(), 8000).unwrap(), "a").unwrap();
        assert_eq!(streamed.len(), x.len());
        assert!(max_diff(&streamed, &offline.samples) <= 1e-5);
    }

    #[test]
    fn short_input_is_flushed_through_zero_padding() {
        let fx = fixture(2);
        let x = signal(500, 4);
        let mut st = StreamState::new(fx.student(), "a").unwrap();
        assert!(st.push_audio(&x, 8000).unwrap().is_empty());
        let out = st.flush().unwrap();
        assert_eq!(out.len(), 500);
        assert!(out.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn output_waits_for_chunk_and_lookahead() {
        let fx = fixture(6);
        let mut st = StreamState::new(fx.student(), "a").unwrap();
        let x = signal(1280 * 2, 5);
        assert!(st.push_audio(&x[..1279], 8000).unwrap().is_empty());
        // first chunk complete: frames 0..14 have their two lookahead frames
        assert_eq!(st.push_audio(&x[1279..1280], 8000).unwrap().len(), 14 * 80);
        assert!(st.push_audio(&x[1280..2559], 8000).unwrap().is_empty());
        assert_eq!(st.push_audio(&x[2559..], 8000).unwrap().len(), 16 * 80);
    }

    #[test]
    fn reset_behaves_like_a_fresh_state() {
        let fx = fixture(3);
        let x = signal(2500, 6);
        let mut st = StreamState::new(fx.student(), "b").unwrap();
        let first = stream_all(&mut st, &signal(1800, 7), 100);
        assert!(!first.is_empty());
        st.reset();
        let again = stream_all(&mut st, &x, 100);
        let mut fresh = StreamState::new(fx.student(), "b").unwrap();
        assert_eq!(again, stream_all(&mut fresh, &x, 100));
    }

    #[test]
    fn future_samples_never_change_emitted_past() {
        let fx = fixture(4);
        let models = fx.student();
        let lat = (models.algorithmic_latency_ms() * 8.0).round() as usize;
        let x = signal(6000, 8);
        let mut st = StreamState::new(models, "a").unwrap();
        let base = stream_all(&mut st, &x, 333);
        for cut in [1500usize, 2600, 4000] {
            let mut y = x.clone();
            for v in &mut y[cut..] {
                *v = -*v + 0.1;
            }
            st.reset();
            let pert = stream_all(&mut st, &y, 333);
            let safe = cut - lat;
            assert_eq!(base[..safe], pert[..safe], "cut {cut}");
            assert_ne!(base[..cut + 800], pert[..cut + 800]);
        }
    }

    #[test]
    fn pipelined_mode_matches_synchronous() {
        let fx = fixture(5);
        let x = signal(5000, 9);
        let mut st = StreamState::new(fx.student(), "b").unwrap();
        let sync = stream_all(&mut st, &x, 250);
        assert_eq!(run_pipelined(fx.student(), "b", &x, 250, 2).unwrap(), sync);
    }

    #[test]
    fn errors_poison_until_reset() {
        let fx = fixture(3);
        let mut st = StreamState::new(fx.student(), "a").unwrap();
        assert!(matches!(st.push_audio(&[0.0; 10], 16000), Err(Error::InvalidArgument(_))));
        assert!(!st.is_poisoned());
        st.push_audio(&[f32::NAN; 1280], 8000).unwrap_err();
        assert!(st.is_poisoned());
        assert!(matches!(st.push_audio(&[0.0; 10], 8000), Err(Error::Poisoned)));
        st.reset();
        assert!(st.push_audio(&[0.0; 10], 8000).is_ok());
    }

    #[test]
    fn unknown_target_and_wrong_modes_are_rejected() {
        let fx = fixture(3);
        assert!(matches!(StreamState::new(fx.student(), "zz"), Err(Error::UnknownSpeaker(_))));
        let teacher = VcModels::new(&fx.ns, &fx.teacher, &fx.voc).unwrap();
        assert!(StreamState::new(teacher, "a").is_err());
        assert!(VcModels::new(&fx.rec, &fx.teacher, &fx.voc).is_err());
        assert!(VcModels::new(&fx.ns, &fx.student, &fx.voc).is_err());
        let w = Waveform::new(signal(900, 1), 8000).unwrap();
        assert!(matches!(convert_offline(&teacher, &w, "q"), Err(Error::UnknownSpeaker(_))));
        assert_eq!(convert_offline(&teacher, &w, "a").unwrap().len(), 900);
    }

    #[test]
    fn algorithmic_latency_is_chunk_plus_lookahead() {
        let fx = fixture(2);
        assert_eq!(fx.student().algorithmic_latency_ms(), 180.0);
    }

    #[test]
    fn measured_latency_bounds_and_identity_baseline() {
        let fx = fixture(3);
        let w = Waveform::new(signal(8000, 10), 8000).unwrap();
        let mut st = StreamState::new(fx.student(), "a").unwrap();
        let r1 = measure_rtf(&mut st, &[&w], 80).unwrap();
        let r2 = measure_rtf(&mut st, &[&w], 80).unwrap();
        assert_eq!(r1.algorithmic_latency_ms, r2.algorithmic_latency_ms);
        assert!(r1.first_output_latency_ms >= r1.algorithmic_latency_ms);
        assert!(r1.rtf > 0.0);
        let (outs, id) = run_timed(&mut IdentityStream { sample_rate: 8000 }, &[&w], 80).unwrap();
        assert_eq!(outs[0], w.samples);
        assert!(id.rtf * 10.0 < r1.rtf);
    }
}
