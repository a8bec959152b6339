//! Whole-pipeline properties with briefly trained models.

use std::sync::OnceLock;

use streamvc::acoustic::{AcousticModel, AmKind};
use streamvc::config::ExperimentConfig;
use streamvc::corpus::Split;
use streamvc::dsp::{write_wav, read_wav, Waveform};
use streamvc::numerics::ModelBundle;
use streamvc::recognizer::Recognizer;
use streamvc::runtime::{convert_offline, run_pipelined, StreamState, VcModels};
use streamvc::sweep::Bench;
use streamvc::vocoder::Vocoder;

struct Trained {
    bench: Bench,
    st: Recognizer,
    student: AcousticModel,
}

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.pool_speakers = 4;
    cfg.recognizer.train.steps = 30;
    cfg.recognizer.judge_train.steps = 10;
    cfg.eval.speaker_train.steps = 10;
    cfg.vocoder.train.steps = 30;
    cfg.acoustic.train.steps = 20;
    cfg.acoustic.train.finetune_steps = 5;
    cfg.acoustic.tg_train.steps = 20;
    cfg
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let cfg = tiny();
        let bench = Bench::build(&cfg).unwrap();
        let ns = bench.train_recognizer(false, 7).unwrap();
        let st = bench.train_recognizer(true, 7).unwrap();
        let teacher = bench.train_reconstruction(AmKind::Teacher, &ns, cfg.acoustic.teacher_layer, 7).unwrap();
        let set = bench.parallel_set(&teacher, &ns).unwrap();
        let student = bench.train_tg(&st, &set, cfg.acoustic.layer, 7).unwrap();
        Trained { bench, st, student }
    })
}

fn source(i: usize) -> Waveform {
    let b = &trained().bench;
    Waveform::new(b.pool_split(Split::Test)[i].wave.clone(), b.cfg.audio.sample_rate).unwrap()
}

fn target() -> &'static str {
    let b = &trained().bench;
    &b.speakers[b.corpus.targets()[1]]
}

fn models() -> VcModels<'static> {
    let t = trained();
    VcModels::new(&t.st, &t.student, &t.bench.vocoder).unwrap()
}

fn stream_all(models: VcModels, w: &Waveform, push: usize) -> Vec<f32> {
    let mut s = StreamState::new(models, target()).unwrap();
    let mut out = Vec::new();
    for c in w.samples.chunks(push) {
        out.extend(s.push_audio(c, w.sample_rate).unwrap());
    }
    out.extend(s.flush().unwrap());
    out
}

#[test]
fn reloaded_bundles_replay_byte_identical_audio() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let save = |name: &str, b: ModelBundle| {
        let p = dir.path().join(name);
        b.save(&p).unwrap();
        ModelBundle::load(&p).unwrap()
    };
    let st = Recognizer::from_bundle(&save("st", t.st.to_bundle())).unwrap();
    let am = AcousticModel::from_bundle(&save("am", t.student.to_bundle())).unwrap();
    let voc = Vocoder::from_bundle(&save("voc", t.bench.vocoder.to_bundle())).unwrap();
    let reloaded = VcModels::new(&st, &am, &voc).unwrap();

    let src = dir.path().join("in.wav");
    write_wav(&src, &source(0)).unwrap();
    let input = read_wav(&src).unwrap();
    let a = stream_all(models(), &input, 80);
    let b = stream_all(reloaded, &input, 80);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn streamed_pipelined_and_offline_agree() {
    let w = source(1);
    let offline = convert_offline(&models(), &w, target()).unwrap().samples;
    let streamed = stream_all(models(), &w, 333);
    let piped = run_pipelined(models(), target(), &w.samples, 500, 2).unwrap();
    assert_eq!(streamed, piped);
    let worst = streamed.iter().zip(&offline).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert_eq!(streamed.len(), offline.len());
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn future_input_never_reaches_earlier_output() {
    let m = models();
    let latency = (m.algorithmic_latency_ms() * m.audio().sample_rate as f64 / 1000.0).round() as usize;
    let w = source(2);
    let base = convert_offline(&m, &w, target()).unwrap().samples;
    for cut in [latency + 1, 5000, 11_111, w.samples.len() - 1] {
        let mut x = w.samples.clone();
        for v in &mut x[cut..] {
            *v = -*v * 0.5 + 0.01;
        }
        let y = convert_offline(&m, &Waveform::new(x, w.sample_rate).unwrap(), target()).unwrap().samples;
        let safe = cut + 1 - latency;
        assert!(base[..safe].iter().zip(&y[..safe]).all(|(a, b)| a.to_bits() == b.to_bits()), "cut {cut}");
        assert_ne!(base[cut..], y[cut..], "cut {cut} changed nothing");
    }
}
