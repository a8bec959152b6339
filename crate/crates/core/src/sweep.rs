//! The layer sweep: every conversion system trained at every recognizer
//! tap for several seeds, scored with the shared judge, speaker encoder and
//! vocoder, and summarised as medians over seeds.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acoustic::{generate_parallel, speaker_vocabulary, train_reconstruction, train_student_tg, AcousticModel, AmKind, ParallelSet};
use crate::config::{ExperimentConfig, SystemKind};
use crate::corpus::{build_corpus, Corpus, Split, Utterance};
use crate::dsp::{MelExtractor, Waveform};
use crate::error::{Error, Result};
use crate::eval::{content_accuracy, ppc, SpeakerEncoder};
use crate::recognizer::{leakage_probe, EncoderMode, Recognizer};
use crate::rng;
use crate::runtime::{convert_offline, StreamState, VcModels};
use crate::vocoder::Vocoder;

/// Metrics of one converted utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub content_accuracy: f64,
    pub ppc: Option<f64>,
    pub sed_to_target: f64,
    pub sed_to_source: f64,
}

/// Scores of one (system, k, seed) run, averaged over its conversions;
/// also one line of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub system: SystemKind,
    pub k: usize,
    pub seed: usize,
    pub content_accuracy: f64,
    pub ppc: Option<f64>,
    pub sed_to_target: f64,
    pub sed_to_source: f64,
    /// Algorithmic latency; empty for the utterance-level teacher system.
    pub latency_ms: Option<f64>,
    /// Wall-clock processing time over audio time.
    pub rtf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub mode: EncoderMode,
    pub k: usize,
    pub seed: usize,
    pub accuracy: f64,
}

/// Quality of the teacher's parallel data for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub seed: usize,
    pub pairs: usize,
    /// Fraction of pairs closer to the target centroid than to the source's.
    pub target_win_rate: f64,
    pub content_accuracy: f64,
    /// Content accuracy of vocoded source mels for the same utterances.
    pub copy_synthesis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognizerRow {
    pub seed: usize,
    pub non_streaming: f64,
    pub streaming: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<MetricsReport>,
    pub probes: Vec<ProbeRow>,
    pub gates: Vec<GateRow>,
    pub recognizers: Vec<RecognizerRow>,
    pub judge_accuracy: f64,
    pub speaker_accuracy: f64,
    /// Judge accuracy on the evaluation sources, unprocessed and vocoded.
    pub source_accuracy: f64,
    pub copy_synthesis_accuracy: f64,
    pub layers: usize,
    pub elapsed_s: f64,
}

/// Corpus-level models shared by every cell of a sweep.
pub struct Bench {
    pub cfg: ExperimentConfig,
    pub corpus: Corpus,
    pub speakers: Vec<String>,
    pub vocoder: Vocoder,
    pub judge: Recognizer,
    pub speaker_encoder: SpeakerEncoder,
    pub mel: MelExtractor,
}

/// Seed value of sweep seed index `s`.
pub fn seed_value(global: u64, s: usize) -> u64 {
    rng::derive(global, &format!("sweep/seed{s}"))
}

impl Bench {
    /// Builds the corpus and trains the vocoder, judge and speaker encoder.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let t = Instant::now();
        let corpus = build_corpus(&cfg.corpus, &cfg.audio, rng::derive(cfg.seed, "corpus"))?;
        log::info!("corpus: {} utterances in {:.1?}", corpus.utts.len(), t.elapsed());
        Self::with_corpus(cfg, corpus)
    }

    pub fn with_corpus(cfg: &ExperimentConfig, corpus: Corpus) -> Result<Self> {
        let speakers = speaker_vocabulary(&corpus);
        let t = Instant::now();
        let (vocoder, _) = Vocoder::train(&corpus.split(Split::Am), cfg.vocoder.model.clone(), &cfg.vocoder.train, rng::derive(cfg.seed, "vocoder"))?;
        log::info!("vocoder trained in {:.1?}", t.elapsed());
        let t = Instant::now();
        let (judge, _) = Recognizer::train(&corpus.split(Split::Judge), cfg.recognizer.judge.clone(), &cfg.recognizer.judge_train, rng::derive(cfg.seed, "judge"))?;
        log::info!("judge trained in {:.1?}", t.elapsed());
        let t = Instant::now();
        let spk = corpus.split(Split::Spk);
        let (mut speaker_encoder, _) =
            SpeakerEncoder::train(&spk, cfg.speaker_config(speakers.clone()), &cfg.eval.speaker_train, rng::derive(cfg.seed, "speaker"))?;
        speaker_encoder.set_centroids(&spk, cfg.eval.min_centroid_utts)?;
        log::info!("speaker encoder trained in {:.1?}", t.elapsed());
        Self::from_parts(cfg, corpus, vocoder, judge, speaker_encoder)
    }

    /// Assembles a bench from already trained shared models.
    pub fn from_parts(cfg: &ExperimentConfig, corpus: Corpus, vocoder: Vocoder, judge: Recognizer, speaker_encoder: SpeakerEncoder) -> Result<Self> {
        let speakers = speaker_vocabulary(&corpus);
        if speaker_encoder.cfg.speakers != speakers {
            return Err(Error::InvalidArgument("speaker encoder was trained on a different speaker set".into()));
        }
        Ok(Self { cfg: cfg.clone(), mel: MelExtractor::new(cfg.audio)?, corpus, speakers, vocoder, judge, speaker_encoder })
    }

    /// Utterances of `split` spoken by pool (non-target) speakers.
    pub fn pool_split(&self, split: Split) -> Vec<&Utterance> {
        let pool = self.corpus.pool();
        self.corpus.select(split, |s| pool.contains(&s))
    }

    /// Held-out pool utterances, interleaved across speakers.
    pub fn eval_sources(&self) -> Vec<&Utterance> {
        let test = self.pool_split(Split::Test);
        let mut by_spk: BTreeMap<usize, Vec<&Utterance>> = BTreeMap::new();
        for u in test {
            by_spk.entry(u.speaker).or_default().push(u);
        }
        let mut out = Vec::new();
        let depth = by_spk.values().map(Vec::len).max().unwrap_or(0);
        'outer: for i in 0..depth {
            for us in by_spk.values() {
                if let Some(u) = us.get(i) {
                    out.push(*u);
                    if out.len() == self.cfg.eval.sources {
                        break 'outer;
                    }
                }
            }
        }
        out
    }

    pub fn score(&self, wave: &Waveform, source: &Utterance, target: usize) -> Result<Score> {
        let content_accuracy = content_accuracy(wave, source, &self.judge, &self.mel)?;
        let ppc = ppc(wave, source, &self.cfg.audio, &self.cfg.eval.f0)?;
        let e = self.speaker_encoder.embed(wave, &self.mel)?;
        let id = |i: usize| self.speakers.get(i).ok_or_else(|| Error::UnknownSpeaker(format!("#{i}")));
        let (sed_to_target, sed_to_source) = self.speaker_encoder.sed(&e, id(target)?, id(source.speaker)?)?;
        Ok(Score { content_accuracy, ppc, sed_to_target, sed_to_source })
    }

    pub fn train_recognizer(&self, streaming: bool, seed: u64) -> Result<Recognizer> {
        let name = if streaming { "asr/streaming" } else { "asr/non_streaming" };
        let (rec, _) = Recognizer::train(&self.pool_split(Split::Asr), self.cfg.encoder(streaming), &self.cfg.recognizer.train, rng::derive(seed, name))?;
        Ok(rec)
    }

    /// Reconstruction-trained model at tap `k` (teacher or student by `kind`).
    pub fn train_reconstruction(&self, kind: AmKind, rec: &Recognizer, k: usize, seed: u64) -> Result<AcousticModel> {
        let cfg = self.cfg.acoustic_config(kind, k, self.speakers.clone())?;
        let targets = self.corpus.targets();
        let finetune = self.corpus.select(Split::Am, |s| targets.contains(&s));
        let label = format!("am/{kind:?}/k{k}");
        let (m, log) = train_reconstruction(
            cfg,
            rec,
            &self.pool_split(Split::Am),
            &finetune,
            &self.cfg.acoustic.train,
            self.cfg.acoustic.lsgan.as_ref(),
            rng::derive(seed, &label),
        )?;
        for w in &log.warnings {
            log::warn!("{label}: {w}");
        }
        Ok(m)
    }

    /// Teacher conversions of every pool AM-split utterance to every target.
    pub fn parallel_set(&self, teacher: &AcousticModel, ns: &Recognizer) -> Result<ParallelSet> {
        generate_parallel(teacher, ns, &self.pool_split(Split::Am), &self.corpus.targets())
    }

    pub fn train_tg(&self, st: &Recognizer, set: &ParallelSet, k: usize, seed: u64) -> Result<AcousticModel> {
        let cfg = self.cfg.acoustic_config(AmKind::Student, k, self.speakers.clone())?;
        let (m, _) = train_student_tg(cfg, st, &self.pool_split(Split::Am), set, &self.cfg.acoustic.tg_train, rng::derive(seed, &format!("tg/k{k}")))?;
        Ok(m)
    }

    /// Converts every evaluation source to every target and averages the
    /// scores. Student systems run through the streaming runtime.
    pub fn evaluate(&self, system: SystemKind, k: usize, seed: usize, rec: &Recognizer, am: &AcousticModel) -> Result<MetricsReport> {
        let models = VcModels::new(rec, am, &self.vocoder)?;
        let sources = self.eval_sources();
        let targets = self.corpus.targets();
        let mut scores = Vec::new();
        let (mut busy, mut audio) = (0.0f64, 0.0f64);
        for u in &sources {
            let wave = Waveform::new(u.wave.clone(), self.cfg.audio.sample_rate)?;
            for &t in &targets {
                let target = &self.speakers[t];
                let out = if system.streaming() {
                    let mut st = StreamState::new(models, target)?;
                    let mut y = Vec::with_capacity(wave.len());
                    for piece in wave.samples.chunks(self.cfg.runtime.push_samples) {
                        y.extend(st.push_audio(piece, wave.sample_rate)?);
                    }
                    y.extend(st.flush()?);
                    busy += st.busy_time().as_secs_f64();
                    Waveform::new(y, wave.sample_rate)?
                } else {
                    let t0 = Instant::now();
                    let y = convert_offline(&models, &wave, target)?;
                    busy += t0.elapsed().as_secs_f64();
                    y
                };
                audio += wave.duration_s();
                scores.push(self.score(&out, u, t)?);
            }
        }
        let m = mean_scores(&scores);
        Ok(MetricsReport {
            system,
            k,
            seed,
            content_accuracy: m.content_accuracy,
            ppc: m.ppc,
            sed_to_target: m.sed_to_target,
            sed_to_source: m.sed_to_source,
            latency_ms: system.streaming().then(|| models.algorithmic_latency_ms()),
            rtf: busy / audio.max(f64::MIN_POSITIVE),
        })
    }

    /// Pair indices scored by the teacher gate.
    fn gate_indices(&self, n: usize) -> Vec<usize> {
        let want = self.cfg.eval.gate_pairs;
        if want == 0 || want >= n {
            return (0..n).collect();
        }
        (0..want).map(|i| i * n / want).collect()
    }

    /// Scores vocoded teacher conversions of the parallel set against the
    /// vocoded sources themselves.
    pub fn gate(&self, set: &ParallelSet, seed: usize) -> Result<GateRow> {
        let idx = self.gate_indices(set.pairs.len());
        let (mut wins, mut acc) = (0usize, 0.0f64);
        let mut copies: BTreeMap<&str, f64> = BTreeMap::new();
        for &i in &idx {
            let p = &set.pairs[i];
            let src = self.corpus.utterance(&p.source)?;
            let s = self.score(&self.vocoder.vocode(&p.mel)?, src, p.target_speaker)?;
            wins += usize::from(s.sed_to_target < s.sed_to_source);
            acc += s.content_accuracy;
            if !copies.contains_key(p.source.as_str()) {
                let copy = self.vocoder.vocode(&src.mel)?;
                copies.insert(p.source.as_str(), content_accuracy(&copy, src, &self.judge, &self.mel)?);
            }
        }
        let n = idx.len().max(1) as f64;
        Ok(GateRow {
            seed,
            pairs: idx.len(),
            target_win_rate: wins as f64 / n,
            content_accuracy: acc / n,
            copy_synthesis: copies.values().sum::<f64>() / copies.len().max(1) as f64,
        })
    }

    /// Runs every configured (system, k, seed) cell.
    pub fn sweep(&self) -> Result<SweepOutcome> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let ev = &cfg.eval;
        let big_k = cfg.recognizer.encoder.layers;
        let want = |s: SystemKind| ev.systems.contains(&s);

        let judge_split = self.corpus.split(Split::Test);
        let judge_accuracy = self.judge.accuracy(&judge_split)?;
        let speaker_accuracy = self.speaker_encoder.accuracy(&judge_split)?;
        let sources = self.eval_sources();
        let (mut src_acc, mut copy_acc) = (0.0, 0.0);
        for u in &sources {
            src_acc += content_accuracy(&Waveform::new(u.wave.clone(), cfg.audio.sample_rate)?, u, &self.judge, &self.mel)?;
            copy_acc += content_accuracy(&self.vocoder.vocode(&u.mel)?, u, &self.judge, &self.mel)?;
        }
        let n_src = sources.len() as f64;
        log::info!("judge {judge_accuracy:.3}, speaker encoder {speaker_accuracy:.3}, sources {:.3}, copy-synthesis {:.3}", src_acc / n_src, copy_acc / n_src);

        let mut out = SweepOutcome {
            rows: Vec::new(),
            probes: Vec::new(),
            gates: Vec::new(),
            recognizers: Vec::new(),
            judge_accuracy,
            speaker_accuracy,
            source_accuracy: src_acc / n_src,
            copy_synthesis_accuracy: copy_acc / n_src,
            layers: big_k,
            elapsed_s: 0.0,
        };
        for s in 0..ev.seeds {
            let seed = seed_value(cfg.seed, s);
            let t = Instant::now();
            let ns = self.train_recognizer(false, seed)?;
            let st = self.train_recognizer(true, seed)?;
            let test = self.pool_split(Split::Test);
            out.recognizers.push(RecognizerRow { seed: s, non_streaming: ns.accuracy(&test)?, streaming: st.accuracy(&test)? });
            log::info!("seed {s}: recognizers {:.3} / {:.3} in {:.1?}", out.recognizers[s].non_streaming, out.recognizers[s].streaming, t.elapsed());

            let probe_train = self.pool_split(Split::Spk);
            for (mode, rec) in [(EncoderMode::NonStreaming, &ns), (EncoderMode::Streaming, &st)] {
                for k in 1..=big_k {
                    let accuracy = leakage_probe(rec, &probe_train, &test, k, &cfg.recognizer.probe, rng::derive(seed, &format!("probe/{mode:?}/{k}")), false)?;
                    out.probes.push(ProbeRow { mode, k, seed: s, accuracy });
                }
            }

            let tk = cfg.acoustic.teacher_layer;
            let mut teacher = None;
            if want(SystemKind::RecStar) || want(SystemKind::Tg) {
                let t = Instant::now();
                teacher = Some(self.train_reconstruction(AmKind::Teacher, &ns, tk, seed)?);
                log::info!("seed {s}: teacher k={tk} in {:.1?}", t.elapsed());
            }
            if want(SystemKind::RecStar) {
                for &k in &ev.layers {
                    let fresh;
                    let am = if k == tk {
                        teacher.as_ref().expect("teacher trained above")
                    } else {
                        fresh = self.train_reconstruction(AmKind::Teacher, &ns, k, seed)?;
                        &fresh
                    };
                    self.push_row(&mut out, SystemKind::RecStar, k, s, &ns, am)?;
                }
            }
            if want(SystemKind::Rec) {
                for &k in &ev.layers {
                    let am = self.train_reconstruction(AmKind::Student, &st, k, seed)?;
                    self.push_row(&mut out, SystemKind::Rec, k, s, &st, &am)?;
                }
            }
            if let (true, Some(teacher)) = (want(SystemKind::Tg), teacher.as_ref()) {
                let t = Instant::now();
                let set = self.parallel_set(teacher, &ns)?;
                let gate = self.gate(&set, s)?;
                log::info!(
                    "seed {s}: {} parallel pairs, gate win rate {:.3}, content {:.3} vs copy {:.3} ({:.1?})",
                    set.pairs.len(),
                    gate.target_win_rate,
                    gate.content_accuracy,
                    gate.copy_synthesis,
                    t.elapsed()
                );
                out.gates.push(gate);
                for &k in &ev.layers {
                    let am = self.train_tg(&st, &set, k, seed)?;
                    self.push_row(&mut out, SystemKind::Tg, k, s, &st, &am)?;
                }
            }
        }
        check_complete(&out.rows, &ev.systems, &ev.layers, ev.seeds)?;
        out.elapsed_s = started.elapsed().as_secs_f64();
        Ok(out)
    }

    fn push_row(&self, out: &mut SweepOutcome, system: SystemKind, k: usize, seed: usize, rec: &Recognizer, am: &AcousticModel) -> Result<()> {
        let t = Instant::now();
        let row = self.evaluate(system, k, seed, rec, am)?;
        log::info!(
            "seed {seed} {} k={k}: acc {:.3} ppc {} sed {:.3}/{:.3} ({:.1?})",
            system.display(),
            row.content_accuracy,
            row.ppc.map_or("-".into(), |v| format!("{v:.3}")),
            row.sed_to_target,
            row.sed_to_source,
            t.elapsed()
        );
        out.rows.push(row);
        Ok(())
    }
}

/// Builds the bench and runs the sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    Bench::build(cfg)?.sweep()
}

fn mean_scores(scores: &[Score]) -> Score {
    let n = scores.len().max(1) as f64;
    let ppcs: Vec<f64> = scores.iter().filter_map(|s| s.ppc).collect();
    Score {
        content_accuracy: scores.iter().map(|s| s.content_accuracy).sum::<f64>() / n,
        ppc: (!ppcs.is_empty()).then(|| ppcs.iter().sum::<f64>() / ppcs.len() as f64),
        sed_to_target: scores.iter().map(|s| s.sed_to_target).sum::<f64>() / n,
        sed_to_source: scores.iter().map(|s| s.sed_to_source).sum::<f64>() / n,
    }
}

/// Fails listing every (system, k, seed) cell absent from `rows`.
pub fn check_complete(rows: &[MetricsReport], systems: &[SystemKind], layers: &[usize], seeds: usize) -> Result<()> {
    let mut missing = Vec::new();
    for &sys in systems {
        for &k in layers {
            for s in 0..seeds {
                if !rows.iter().any(|r| r.system == sys && r.k == k && r.seed == s) {
                    missing.push(format!("{}/k{k}/seed{s}", sys.label()));
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sweep incomplete, missing runs: {}", missing.join(", "))))
    }
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Median over seeds of one (system, k) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianCell {
    pub system: SystemKind,
    pub k: usize,
    pub content_accuracy: f64,
    pub ppc: Option<f64>,
    pub sed_to_target: f64,
    pub sed_to_source: f64,
}

pub fn medians(rows: &[MetricsReport]) -> Vec<MedianCell> {
    let mut keys: Vec<(SystemKind, usize)> = rows.iter().map(|r| (r.system, r.k)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|(system, k)| {
            let cell: Vec<&MetricsReport> = rows.iter().filter(|r| r.system == system && r.k == k).collect();
            let med = |f: &dyn Fn(&MetricsReport) -> f64| median(cell.iter().map(|r| f(r))).unwrap_or(f64::NAN);
            MedianCell {
                system,
                k,
                content_accuracy: med(&|r| r.content_accuracy),
                ppc: median(cell.iter().filter_map(|r| r.ppc)),
                sed_to_target: med(&|r| r.sed_to_target),
                sed_to_source: med(&|r| r.sed_to_source),
            }
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &p in &idx[i..=j] {
                r[p] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() {
        return None;
    }
    crate::eval::pearson(&ranks(x), &ranks(y))
}

/// Outcome of one acceptance-style check on the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

fn cell(m: &[MedianCell], s: SystemKind, k: usize) -> Option<&MedianCell> {
    m.iter().find(|c| c.system == s && c.k == k)
}

/// Evaluates the qualitative layer-sweep claims on the medians.
pub fn sweep_checks(out: &SweepOutcome) -> Vec<Check> {
    let m = medians(&out.rows);
    let big_k = out.layers;
    let mut checks = Vec::new();
    let mut ks: Vec<usize> = m.iter().map(|c| c.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let systems: Vec<SystemKind> = SystemKind::ALL.into_iter().filter(|s| m.iter().any(|c| c.system == *s)).collect();

    // content: every IBF tap at least as good as the posteriorgram tap
    let mut fails = Vec::new();
    for &s in &systems {
        let Some(ppg) = cell(&m, s, big_k) else {
            fails.push(format!("{} has no k={big_k} cell", s.label()));
            continue;
        };
        for &k in ks.iter().filter(|k| **k < big_k) {
            if let Some(c) = cell(&m, s, k) {
                if c.content_accuracy < ppg.content_accuracy {
                    fails.push(format!("{} k={k}: {:.3} < {:.3}", s.label(), c.content_accuracy, ppg.content_accuracy));
                }
            }
        }
    }
    checks.push(Check { id: "5a".into(), passed: fails.is_empty(), detail: summary(&fails, "content accuracy of every IBF tap >= PPG tap") });

    let ppc = |k| cell(&m, SystemKind::RecStar, k).and_then(|c| c.ppc);
    let (p2, pk) = (ppc(2), ppc(big_k));
    checks.push(Check {
        id: "5b".into(),
        passed: matches!((p2, pk), (Some(a), Some(b)) if a > b),
        detail: format!("Rec* PPC k=2 {p2:?} vs k={big_k} {pk:?}"),
    });

    let mut fails = Vec::new();
    for s in [SystemKind::RecStar, SystemKind::Rec].into_iter().filter(|s| systems.contains(s)) {
        for &k in ks.iter().filter(|k| **k <= 3) {
            if let Some(c) = cell(&m, s, k) {
                if c.sed_to_target <= c.sed_to_source {
                    fails.push(format!("{} k={k}: to target {:.3} <= to source {:.3}", s.label(), c.sed_to_target, c.sed_to_source));
                }
            }
        }
    }
    checks.push(Check { id: "5c".into(), passed: fails.is_empty(), detail: summary(&fails, "reconstruction systems at k<=3 stay closer to the source") });

    let mut fails = Vec::new();
    for &k in &ks {
        match cell(&m, SystemKind::Tg, k) {
            None => fails.push(format!("tg k={k} missing")),
            Some(tg) => {
                if tg.sed_to_target >= tg.sed_to_source {
                    fails.push(format!("tg k={k}: to target {:.3} >= to source {:.3}", tg.sed_to_target, tg.sed_to_source));
                }
                if k < big_k {
                    match cell(&m, SystemKind::Rec, k) {
                        Some(rec) if tg.sed_to_target < rec.sed_to_target => {}
                        Some(rec) => fails.push(format!("k={k}: tg {:.3} >= rec {:.3}", tg.sed_to_target, rec.sed_to_target)),
                        None => fails.push(format!("rec k={k} missing")),
                    }
                }
            }
        }
    }
    checks.push(Check { id: "5d".into(), passed: fails.is_empty(), detail: summary(&fails, "TG converts at every k and beats Rec on SED below K") });

    let mut fails = Vec::new();
    let mut parts = Vec::new();
    let mut ppg = BTreeMap::new();
    for mode in [EncoderMode::NonStreaming, EncoderMode::Streaming] {
        let mut pk: Vec<usize> = out.probes.iter().filter(|p| p.mode == mode).map(|p| p.k).collect();
        pk.sort_unstable();
        pk.dedup();
        let acc: Vec<f64> =
            pk.iter().map(|k| median(out.probes.iter().filter(|p| p.mode == mode && p.k == *k).map(|p| p.accuracy)).unwrap_or(f64::NAN)).collect();
        let kf: Vec<f64> = pk.iter().map(|k| *k as f64).collect();
        let rho = spearman(&kf, &acc);
        parts.push(format!("{mode:?}: rho {rho:?}, acc {acc:.3?}"));
        if !matches!(rho, Some(r) if r < 0.0) {
            fails.push(format!("{mode:?} rho {rho:?}"));
        }
        ppg.insert(format!("{mode:?}"), acc.last().copied().unwrap_or(f64::NAN));
    }
    let (ns, st) = (ppg["NonStreaming"], ppg["Streaming"]);
    if st.partial_cmp(&ns) != Some(std::cmp::Ordering::Greater) {
        fails.push(format!("streaming PPG probe {st:.3} <= non-streaming {ns:.3}"));
    }
    checks.push(Check { id: "6".into(), passed: fails.is_empty(), detail: format!("{}; {}", parts.join("; "), summary(&fails, "ordering holds")) });

    let mut fails = Vec::new();
    for g in &out.gates {
        if g.target_win_rate < 0.9 {
            fails.push(format!("seed {}: win rate {:.3}", g.seed, g.target_win_rate));
        }
        if (g.content_accuracy - g.copy_synthesis).abs() > 0.10 {
            fails.push(format!("seed {}: content {:.3} vs copy {:.3}", g.seed, g.content_accuracy, g.copy_synthesis));
        }
    }
    if out.gates.is_empty() {
        fails.push("no gate measured".into());
    }
    checks.push(Check { id: "7".into(), passed: fails.is_empty(), detail: summary(&fails, "teacher gate passes for every seed") });
    checks
}

fn summary(fails: &[String], ok: &str) -> String {
    if fails.is_empty() {
        ok.to_string()
    } else {
        fails.join("; ")
    }
}

/// Sweep table in the fixed column order
/// `system,k,seed,content_accuracy,ppc,sed_to_target,sed_to_source,latency_ms,rtf`.
/// Content accuracy is a framewise match rate: higher is better.
pub fn write_csv(rows: &[MetricsReport], path: &Path) -> Result<()> {
    write_table(rows, path)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|x| x.map_err(csv_err)).collect()
}

pub fn write_table<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Reads a sweep table back as raw string records (header first).
pub fn read_csv_records(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    r.records().map(|rec| rec.map(|x| x.iter().map(String::from).collect()).map_err(csv_err)).collect()
}

/// Three panels (content accuracy, PPC, SED to target) of seed medians
/// against the tap index, one line per system.
pub fn write_svg(rows: &[MetricsReport], layers: usize, path: &Path) -> Result<()> {
    use plotters::prelude::*;
    let m = medians(rows);
    let plot_err = |e: String| Error::InvalidArgument(format!("plot: {e}"));
    let root = SVGBackend::new(path, (1200, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let panels = root.split_evenly((1, 3));
    type Getter = fn(&MedianCell) -> Option<f64>;
    let metrics: [(&str, Getter); 3] = [
        ("content accuracy (higher is better)", |c| Some(c.content_accuracy)),
        ("PPC", |c| c.ppc),
        ("SED to target (lower is better)", |c| Some(c.sed_to_target)),
    ];
    let colors = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44)];
    let (kmin, kmax) = (m.iter().map(|c| c.k).min().unwrap_or(1), m.iter().map(|c| c.k).max().unwrap_or(layers));
    for (panel, (title, get)) in panels.iter().zip(metrics) {
        let vals: Vec<f64> = m.iter().filter_map(get).filter(|v| v.is_finite()).collect();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let (lo, hi) = if lo.is_finite() { (lo - 0.05 * (hi - lo + 0.1), hi + 0.05 * (hi - lo + 0.1)) } else { (0.0, 1.0) };
        let mut chart = ChartBuilder::on(panel)
            .caption(title, ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(32)
            .y_label_area_size(48)
            .build_cartesian_2d(kmin as f64 - 0.3..kmax as f64 + 0.3, lo..hi)
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc(format!("IBF layer k (k={layers} is the PPG)"))
            .x_labels(kmax - kmin + 1)
            .x_label_formatter(&|x| format!("{}", x.round() as i64))
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        for (sys, color) in SystemKind::ALL.into_iter().zip(colors) {
            let pts: Vec<(f64, f64)> = m.iter().filter(|c| c.system == sys).filter_map(|c| get(c).map(|v| (c.k as f64, v))).collect();
            if pts.is_empty() {
                continue;
            }
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| plot_err(e.to_string()))?
                .label(sys.display())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart.draw_series(pts.iter().map(|p| Circle::new(*p, 3, color.filled()))).map_err(|e| plot_err(e.to_string()))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
    }
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

/// Human-readable summary written next to the tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub medians: Vec<MedianCell>,
    pub checks: Vec<Check>,
    pub recognizers: Vec<RecognizerRow>,
    pub gates: Vec<GateRow>,
    pub judge_accuracy: f64,
    pub speaker_accuracy: f64,
    pub source_accuracy: f64,
    pub copy_synthesis_accuracy: f64,
    pub elapsed_s: f64,
    /// Conventions of the metrics, for readers of the tables.
    pub notes: Vec<String>,
}

/// Writes `sweep.csv`, `probes.csv`, `gates.csv`, `sweep.svg`,
/// `outcome.json` and `summary.json` into `dir`.
pub fn write_outputs(out: &SweepOutcome, dir: &Path) -> Result<SweepSummary> {
    std::fs::create_dir_all(dir)?;
    write_csv(&out.rows, &dir.join("sweep.csv"))?;
    write_table(&out.probes, &dir.join("probes.csv"))?;
    write_table(&out.gates, &dir.join("gates.csv"))?;
    write_svg(&out.rows, out.layers, &dir.join("sweep.svg"))?;
    std::fs::write(dir.join("outcome.json"), serde_json::to_string_pretty(out)?)?;
    let summary = SweepSummary {
        medians: medians(&out.rows),
        checks: sweep_checks(out),
        recognizers: out.recognizers.clone(),
        gates: out.gates.clone(),
        judge_accuracy: out.judge_accuracy,
        speaker_accuracy: out.speaker_accuracy,
        source_accuracy: out.source_accuracy,
        copy_synthesis_accuracy: out.copy_synthesis_accuracy,
        elapsed_s: out.elapsed_s,
        notes: vec![
            "content_accuracy: fraction of frames where a held-out non-streaming judge recognizer predicts the source phoneme; higher is better".into(),
            "ppc: Pearson correlation of F0 over frames voiced in both the converted audio and the source, autocorrelation tracker on both".into(),
            "sed_*: cosine distance between the utterance embedding and the speaker centroid, in [0, 2]".into(),
            format!("k = {} is the phoneme posteriorgram tap", out.layers),
            "latency_ms is algorithmic (chunk plus vocoder lookahead) and empty for the non-streaming system; rtf is wall-clock".into(),
        ],
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Reads back the outcome written by [`write_outputs`].
pub fn read_outcome(dir: &Path) -> Result<SweepOutcome> {
    let p = dir.join("outcome.json");
    if !p.exists() {
        return Err(Error::MissingArtifact(p));
    }
    Ok(serde_json::from_slice(&std::fs::read(&p)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(system: SystemKind, k: usize, seed: usize, acc: f64, t: f64, s: f64) -> MetricsReport {
        MetricsReport { system, k, seed, content_accuracy: acc, ppc: Some(acc), sed_to_target: t, sed_to_source: s, latency_ms: None, rtf: 0.1 }
    }

    #[test]
    fn median_of_odd_even_and_non_finite() {
        assert_eq!(median([3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median([4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median([f64::NAN, 5.0]), Some(5.0));
        assert_eq!(median(std::iter::empty()), None);
    }

    #[test]
    fn spearman_handles_monotone_and_ties() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        // ranks [1,2,3] vs [1.5,1.5,3]
        let r = spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 7.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn missing_cells_are_listed() {
        let rows = vec![row(SystemKind::Rec, 2, 0, 0.9, 0.5, 0.2)];
        let err = check_complete(&rows, &[SystemKind::Rec, SystemKind::Tg], &[2], 1).unwrap_err().to_string();
        assert!(err.contains("tg/k2/seed0") && !err.contains("rec/k2"));
    }

    #[test]
    fn medians_take_the_middle_seed() {
        let rows: Vec<MetricsReport> = [0.7, 0.9, 0.8].iter().enumerate().map(|(s, a)| row(SystemKind::Tg, 3, s, *a, 0.1, 0.9)).collect();
        let m = medians(&rows);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].content_accuracy, 0.8);
    }

    #[test]
    fn csv_has_fixed_header_and_empty_missing_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let mut r = row(SystemKind::RecStar, 2, 0, 0.5, 0.25, 0.75);
        r.ppc = None;
        write_csv(&[r], &p).unwrap();
        let recs = read_csv_records(&p).unwrap();
        assert_eq!(recs[0].join(","), "system,k,seed,content_accuracy,ppc,sed_to_target,sed_to_source,latency_ms,rtf");
        assert_eq!(recs[1].join(","), "rec_star,2,0,0.5,,0.25,0.75,,0.1");
        assert_eq!(read_csv(&p).unwrap()[0].ppc, None);
    }

    #[test]
    fn svg_renders_three_panels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.svg");
        let mut rows = Vec::new();
        for sys in SystemKind::ALL {
            for k in 2..=6 {
                rows.push(row(sys, k, 0, 0.8 + 0.01 * k as f64, 0.5, 0.5));
            }
        }
        write_svg(&rows, 6, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg") && text.contains("PPC") && text.contains("IBFs+TG"));
    }
}
