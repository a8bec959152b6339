mod artifacts;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use artifacts::{names, Store};
use streamvc::acoustic::{self, AcousticModel, AmKind, ParallelSet};
use streamvc::config::{ExperimentConfig, SystemKind};
use streamvc::corpus::{build_corpus, Corpus, Split};
use streamvc::dsp::{read_wav, write_wav, Waveform};
use streamvc::eval::SpeakerEncoder;
use streamvc::recognizer::Recognizer;
use streamvc::runtime::{convert_offline, run_pipelined, run_timed, StreamState, VcModels};
use streamvc::sweep::{self, Bench};
use streamvc::vocoder::Vocoder;
use streamvc::{rng, Error};

#[derive(Parser)]
#[command(name = "streamvc", version, about = "Streaming voice conversion with intermediate bottleneck features and teacher guidance")]
struct Cli {
    /// JSON experiment configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one configuration key, e.g. `--set acoustic.train.steps=500`.
    /// The value is parsed as JSON, falling back to a string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    /// Teacher guidance on parallel data.
    Tg,
    /// Self-reconstruction.
    Rec,
}

impl Method {
    fn label(self) -> &'static str {
        match self {
            Method::Tg => "tg",
            Method::Rec => "rec",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise the corpus into `<out>/corpus`.
    GenCorpus,
    /// Train the non-streaming and streaming recognizers.
    TrainAsr,
    /// Train the non-streaming teacher at one recognizer tap.
    TrainTeacher {
        /// Tap k (default: acoustic.teacher_layer).
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Convert every pool training utterance to every target with the teacher.
    GenParallel {
        /// Teacher tap (default: acoustic.teacher_layer).
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Train a streaming student.
    TrainStudent {
        #[arg(long, value_enum, default_value = "tg")]
        method: Method,
        /// Tap k (default: acoustic.layer).
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Train the mel-to-waveform vocoder.
    TrainVocoder,
    /// Convert a WAV file offline.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, value_enum, default_value = "student")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "tg")]
        method: Method,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long = "out-wav")]
        out_wav: PathBuf,
    },
    /// Convert through the streaming runtime and report latency.
    /// `-` reads or writes raw 16-bit little-endian PCM on stdin/stdout.
    Stream {
        #[arg(long = "in")]
        input: String,
        #[arg(long)]
        target: String,
        /// Must match the chunk the models were trained with.
        #[arg(long = "chunk-ms")]
        chunk_ms: Option<f64>,
        #[arg(long, value_enum, default_value = "tg")]
        method: Method,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long = "out-wav", default_value = "stream_out.wav")]
        out_wav: String,
        /// Latency report path (default: `<out>/latency.json`).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Run the three stages on separate threads.
        #[arg(long)]
        pipelined: bool,
    },
    /// Score one trained system on the held-out sources.
    Eval {
        #[arg(long, default_value = "tg")]
        system: String,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Train and score every system at every tap for several seeds.
    Sweep {
        /// Comma-separated subset of rec_star,rec,tg.
        #[arg(long)]
        systems: Option<String>,
        /// Comma-separated taps.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Re-render tables, plot and checks of a finished sweep.
    Report {
        /// Sweep directory (default: `<out>/sweep`).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = config_key_help();
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::from(2)
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::MissingArtifact(_)) => "missing_artifact",
        Some(Error::InvalidConfig(_)) => "invalid_config",
        Some(Error::Diverged { .. }) => "diverged",
        Some(Error::UnknownSpeaker(_)) => "unknown_speaker",
        Some(Error::Json(_)) => "invalid_config",
        Some(_) => "runtime",
        None => "runtime",
    }
}

/// Every configuration key with its default, for `--help`.
fn config_key_help() -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, v, out);
                }
            }
            other => out.push(format!("  {prefix} = {other}")),
        }
    }
    let mut lines = vec!["Configuration keys (defaults shown; set with --config or --set):".to_string()];
    let v = serde_json::to_value(ExperimentConfig::default()).expect("config serialises");
    walk("", &v, &mut lines);
    lines.push("  acoustic.lsgan = null | {\"weight\": 0.1, \"width\": 32, \"adam\": {...}}".into());
    lines.join("\n")
}

fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').with_context(|| format!("--set {assignment:?} needs KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => bail!(Error::InvalidConfig(format!("--set {key}: {} is not a section", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut v = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|_| Error::MissingArtifact(p.clone()))?;
            serde_json::from_str(&text).map_err(Error::Json)?
        }
        None => serde_json::to_value(ExperimentConfig::default())?,
    };
    for s in &cli.sets {
        apply_set(&mut v, s)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx {
    cfg: ExperimentConfig,
    store: Store,
}

impl Ctx {
    fn corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.store.path(names::CORPUS)).context("corpus not found; run gen-corpus first")
    }

    fn recognizer(&self, streaming: bool) -> Result<Recognizer> {
        let name = if streaming { names::ASR_ST } else { names::ASR_NS };
        Ok(Recognizer::from_bundle(&self.store.load_bundle(name)?)?)
    }

    fn vocoder(&self) -> Result<Vocoder> {
        Ok(Vocoder::from_bundle(&self.store.load_bundle(names::VOCODER)?)?)
    }

    fn acoustic(&self, name: &str) -> Result<AcousticModel> {
        Ok(AcousticModel::from_bundle(&self.store.load_bundle(name)?)?)
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive(self.cfg.seed, stage)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    if let Command::Sweep { systems, layers, seeds } = &cli.cmd {
        if let Some(s) = systems {
            cfg.eval.systems = s.split(',').map(|x| SystemKind::parse(x.trim())).collect::<Result<_, _>>()?;
        }
        if let Some(l) = layers {
            cfg.eval.layers = l.split(',').map(|x| x.trim().parse::<usize>()).collect::<Result<_, _>>().context("--layers")?;
        }
        if let Some(n) = seeds {
            cfg.eval.seeds = *n;
        }
        cfg.validate()?;
    }
    let store = Store::open(&cfg)?;
    let ctx = Ctx { cfg, store };
    match cli.cmd {
        Command::GenCorpus => gen_corpus(&ctx),
        Command::TrainAsr => train_asr(&ctx),
        Command::TrainVocoder => train_vocoder(&ctx),
        Command::TrainTeacher { layer } => train_teacher(&ctx, layer.unwrap_or(ctx.cfg.acoustic.teacher_layer)),
        Command::GenParallel { layer } => gen_parallel(&ctx, layer.unwrap_or(ctx.cfg.acoustic.teacher_layer)),
        Command::TrainStudent { method, layer } => train_student(&ctx, method, layer.unwrap_or(ctx.cfg.acoustic.layer)),
        Command::Convert { input, target, mode, method, layer, out_wav } => convert(&ctx, &input, &target, mode, method, layer, &out_wav),
        Command::Stream { input, target, chunk_ms, method, layer, out_wav, report, pipelined } => {
            stream(&ctx, &input, &target, chunk_ms, method, layer.unwrap_or(ctx.cfg.acoustic.layer), &out_wav, report, pipelined)
        }
        Command::Eval { system, layer } => eval(&ctx, SystemKind::parse(&system)?, layer),
        Command::Sweep { .. } => run_sweep(&ctx),
        Command::Report { dir } => report(&ctx, dir.unwrap_or_else(|| ctx.store.path("sweep"))),
    }
}

fn gen_corpus(ctx: &Ctx) -> Result<()> {
    let c = build_corpus(&ctx.cfg.corpus, &ctx.cfg.audio, ctx.stage_seed("corpus"))?;
    let dir = ctx.store.path(names::CORPUS);
    c.save(&dir)?;
    ctx.store.record(names::CORPUS, &["corpus/manifest.json".to_string()], &[])?;
    println!("{} utterances from {} speakers in {}", c.utts.len(), c.speakers().len(), dir.display());
    Ok(())
}

fn pool_split(c: &Corpus, split: Split) -> Vec<&streamvc::corpus::Utterance> {
    let pool = c.pool();
    c.select(split, |s| pool.contains(&s))
}

fn train_asr(ctx: &Ctx) -> Result<()> {
    let c = ctx.corpus()?;
    let train = pool_split(&c, Split::Asr);
    let test = pool_split(&c, Split::Test);
    for (streaming, name) in [(false, names::ASR_NS), (true, names::ASR_ST)] {
        let (rec, _) = Recognizer::train(&train, ctx.cfg.encoder(streaming), &ctx.cfg.recognizer.train, ctx.stage_seed(name))?;
        println!("{name}: held-out accuracy {:.3}", rec.accuracy(&test)?);
        ctx.store.save_bundle(name, &rec.to_bundle(), &[names::CORPUS])?;
    }
    Ok(())
}

fn train_vocoder(ctx: &Ctx) -> Result<()> {
    let c = ctx.corpus()?;
    let (voc, log) = Vocoder::train(&c.split(Split::Am), ctx.cfg.vocoder.model.clone(), &ctx.cfg.vocoder.train, ctx.stage_seed(names::VOCODER))?;
    println!("vocoder: final loss {:.4}", log.windowed(1).last().copied().unwrap_or(f64::NAN));
    ctx.store.save_bundle(names::VOCODER, &voc.to_bundle(), &[names::CORPUS])
}

fn finetune_split(c: &Corpus) -> Vec<&streamvc::corpus::Utterance> {
    let targets = c.targets();
    c.select(Split::Am, |s| targets.contains(&s))
}

fn train_teacher(ctx: &Ctx, k: usize) -> Result<()> {
    let c = ctx.corpus()?;
    let ns = ctx.recognizer(false)?;
    let cfg = ctx.cfg.acoustic_config(AmKind::Teacher, k, acoustic::speaker_vocabulary(&c))?;
    let name = names::teacher(k);
    let (m, log) = acoustic::train_reconstruction(
        cfg,
        &ns,
        &pool_split(&c, Split::Am),
        &finetune_split(&c),
        &ctx.cfg.acoustic.train,
        ctx.cfg.acoustic.lsgan.as_ref(),
        ctx.stage_seed(&name),
    )?;
    println!("{name}: final L1 {:.4}", log.recon.windowed(1).last().copied().unwrap_or(f64::NAN));
    ctx.store.save_bundle(&name, &m.to_bundle(), &[names::CORPUS, names::ASR_NS])
}

fn gen_parallel(ctx: &Ctx, k: usize) -> Result<()> {
    let c = ctx.corpus()?;
    let ns = ctx.recognizer(false)?;
    let teacher = ctx.acoustic(&names::teacher(k))?;
    let set = acoustic::generate_parallel(&teacher, &ns, &pool_split(&c, Split::Am), &c.targets())?;
    let name = names::parallel(k);
    set.save(&ctx.store.path(&name))?;
    ctx.store.record(&name, &[format!("{name}/manifest.json")], &[names::CORPUS, names::ASR_NS, &names::teacher(k)])?;
    println!("{name}: {} pairs", set.pairs.len());
    Ok(())
}

fn train_student(ctx: &Ctx, method: Method, k: usize) -> Result<()> {
    let c = ctx.corpus()?;
    let st = ctx.recognizer(true)?;
    let cfg = ctx.cfg.acoustic_config(AmKind::Student, k, acoustic::speaker_vocabulary(&c))?;
    let name = names::student(method.label(), k);
    let seed = ctx.stage_seed(&name);
    let sources = pool_split(&c, Split::Am);
    let tk = ctx.cfg.acoustic.teacher_layer;
    let parallel = names::parallel(tk);
    let (m, log) = match method {
        Method::Tg => {
            let set = ParallelSet::load(&ctx.store.path(&parallel), ctx.cfg.audio.mel_bins).context("parallel data not found; run gen-parallel first")?;
            acoustic::train_student_tg(cfg, &st, &sources, &set, &ctx.cfg.acoustic.tg_train, seed)?
        }
        Method::Rec => acoustic::train_reconstruction(cfg, &st, &sources, &finetune_split(&c), &ctx.cfg.acoustic.train, ctx.cfg.acoustic.lsgan.as_ref(), seed)?,
    };
    println!("{name}: final L1 {:.4}", log.recon.windowed(1).last().copied().unwrap_or(f64::NAN));
    let inputs: Vec<&str> = match method {
        Method::Tg => vec![names::CORPUS, names::ASR_ST, &parallel],
        Method::Rec => vec![names::CORPUS, names::ASR_ST],
    };
    ctx.store.save_bundle(&name, &m.to_bundle(), &inputs)
}

fn convert(ctx: &Ctx, input: &Path, target: &str, mode: Mode, method: Method, layer: Option<usize>, out: &Path) -> Result<()> {
    let wave = read_wav(input)?;
    let voc = ctx.vocoder()?;
    let (rec, am) = match mode {
        Mode::Teacher => (ctx.recognizer(false)?, ctx.acoustic(&names::teacher(layer.unwrap_or(ctx.cfg.acoustic.teacher_layer)))?),
        Mode::Student => (ctx.recognizer(true)?, ctx.acoustic(&names::student(method.label(), layer.unwrap_or(ctx.cfg.acoustic.layer)))?),
    };
    let models = VcModels::new(&rec, &am, &voc)?;
    let y = convert_offline(&models, &wave, target)?;
    write_wav(out, &y)?;
    println!("wrote {} ({:.2} s)", out.display(), y.duration_s());
    Ok(())
}

fn read_input(input: &str, sample_rate: u32) -> Result<Waveform> {
    if input == "-" {
        let mut bytes = Vec::new();
        std::io::stdin().read_to_end(&mut bytes)?;
        if bytes.len() % 2 != 0 {
            bail!(Error::InvalidArgument("raw PCM input has an odd number of bytes".into()));
        }
        let samples = bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32767.0).collect();
        return Ok(Waveform::new(samples, sample_rate)?);
    }
    Ok(read_wav(Path::new(input))?)
}

fn write_output(out: &str, w: &Waveform) -> Result<()> {
    if out == "-" {
        let mut stdout = std::io::stdout().lock();
        for s in &w.samples {
            stdout.write_all(&((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).to_le_bytes())?;
        }
        stdout.flush()?;
        return Ok(());
    }
    Ok(write_wav(Path::new(out), w)?)
}

#[allow(clippy::too_many_arguments)]
fn stream(ctx: &Ctx, input: &str, target: &str, chunk_ms: Option<f64>, method: Method, k: usize, out: &str, report: Option<PathBuf>, pipelined: bool) -> Result<()> {
    let rec = ctx.recognizer(true)?;
    let am = ctx.acoustic(&names::student(method.label(), k))?;
    let voc = ctx.vocoder()?;
    let models = VcModels::new(&rec, &am, &voc)?;
    if let Some(ms) = chunk_ms {
        if (ms - models.chunk_ms()).abs() > 1e-9 {
            bail!(Error::InvalidConfig(format!("--chunk-ms {ms}: the models were trained with {} ms chunks", models.chunk_ms())));
        }
    }
    let wave = read_input(input, models.audio().sample_rate)?;
    let push = ctx.cfg.runtime.push_samples;
    let mut state = StreamState::new(models, target)?;
    let (mut outs, latency) = run_timed(&mut state, &[&wave], push)?;
    let mut y = outs.pop().expect("one stream");
    if pipelined {
        let piped = run_pipelined(models, target, &wave.samples, push, ctx.cfg.runtime.queue_depth)?;
        if piped != y {
            bail!(Error::InvalidArgument("pipelined output differs from the synchronous stream".into()));
        }
        y = piped;
    }
    write_output(out, &Waveform::new(y, wave.sample_rate)?)?;
    let path = report.unwrap_or_else(|| ctx.store.path("latency.json"));
    latency.save(&path)?;
    log::info!(
        "algorithmic latency {:.0} ms, measured {:.1} ms, RTF {:.3}; report in {}",
        latency.algorithmic_latency_ms,
        latency.first_output_latency_ms,
        latency.rtf,
        path.display()
    );
    Ok(())
}

/// Loads the judge and speaker encoder, training and saving them if absent.
fn eval_models(ctx: &Ctx, c: &Corpus) -> Result<(Recognizer, SpeakerEncoder)> {
    let judge = match ctx.store.load_bundle(names::JUDGE) {
        Ok(b) => Recognizer::from_bundle(&b)?,
        Err(_) => {
            let (j, _) = Recognizer::train(&c.split(Split::Judge), ctx.cfg.recognizer.judge.clone(), &ctx.cfg.recognizer.judge_train, ctx.stage_seed("judge"))?;
            ctx.store.save_bundle(names::JUDGE, &j.to_bundle(), &[names::CORPUS])?;
            j
        }
    };
    let enc = match ctx.store.load_bundle(names::SPEAKER) {
        Ok(b) => SpeakerEncoder::from_bundle(&b)?,
        Err(_) => {
            let spk = c.split(Split::Spk);
            let scfg = ctx.cfg.speaker_config(acoustic::speaker_vocabulary(c));
            let (mut e, _) = SpeakerEncoder::train(&spk, scfg, &ctx.cfg.eval.speaker_train, ctx.stage_seed("speaker"))?;
            e.set_centroids(&spk, ctx.cfg.eval.min_centroid_utts)?;
            ctx.store.save_bundle(names::SPEAKER, &e.to_bundle(), &[names::CORPUS])?;
            e
        }
    };
    Ok((judge, enc))
}

fn eval(ctx: &Ctx, system: SystemKind, layer: Option<usize>) -> Result<()> {
    let c = ctx.corpus()?;
    let (judge, enc) = eval_models(ctx, &c)?;
    let voc = ctx.vocoder()?;
    let (k, rec, am) = match system {
        SystemKind::RecStar => {
            let k = layer.unwrap_or(ctx.cfg.acoustic.teacher_layer);
            (k, ctx.recognizer(false)?, ctx.acoustic(&names::teacher(k))?)
        }
        SystemKind::Rec | SystemKind::Tg => {
            let k = layer.unwrap_or(ctx.cfg.acoustic.layer);
            (k, ctx.recognizer(true)?, ctx.acoustic(&names::student(system.label(), k))?)
        }
    };
    let bench = Bench::from_parts(&ctx.cfg, c, voc, judge, enc)?;
    let m = bench.evaluate(system, k, 0, &rec, &am)?;
    let path = ctx.store.path(&format!("eval/metrics_{}_k{k}.json", system.label()));
    std::fs::write(&path, serde_json::to_string_pretty(&m)?)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}

fn print_summary(s: &sweep::SweepSummary) {
    println!("system     k  content   ppc     sed_tgt  sed_src");
    for m in &s.medians {
        println!(
            "{:<10} {}  {:.3}    {:>6}  {:.3}    {:.3}",
            m.system.label(),
            m.k,
            m.content_accuracy,
            m.ppc.map_or("-".into(), |v| format!("{v:.3}")),
            m.sed_to_target,
            m.sed_to_source
        );
    }
    for c in &s.checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.id, c.detail);
    }
}

fn run_sweep(ctx: &Ctx) -> Result<()> {
    let out = sweep::run_sweep(&ctx.cfg)?;
    let dir = ctx.store.path("sweep");
    let s = sweep::write_outputs(&out, &dir)?;
    ctx.store.record("sweep", &["sweep/sweep.csv".into(), "sweep/probes.csv".into(), "sweep/gates.csv".into()], &[])?;
    print_summary(&s);
    println!("tables and plot in {}", dir.display());
    Ok(())
}

fn report(_ctx: &Ctx, dir: PathBuf) -> Result<()> {
    let out = sweep::read_outcome(&dir)?;
    let s = sweep::write_outputs(&out, &dir)?;
    print_summary(&s);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_nested_keys_and_parses_json() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        apply_set(&mut v, "acoustic.train.steps=7").unwrap();
        apply_set(&mut v, "out_dir=/tmp/x").unwrap();
        apply_set(&mut v, "acoustic.lsgan.weight=0.2").unwrap();
        apply_set(&mut v, "seed.x=1").unwrap_err();
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.acoustic.lsgan.unwrap().weight, 0.2);
        assert_eq!(cfg.acoustic.train.steps, 7);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn misspelt_set_key_is_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        apply_set(&mut v, "acoustic.train.stepz=7").unwrap();
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn help_lists_nested_keys() {
        let h = config_key_help();
        assert!(h.contains("acoustic.train.steps = 300"));
        assert!(h.contains("recognizer.encoder.chunk_frames = 16"));
    }
}
