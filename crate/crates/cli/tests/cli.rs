use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set=recognizer.train.steps=15",
    "--set=vocoder.train.steps=15",
    "--set=acoustic.train.steps=8",
    "--set=acoustic.train.finetune_steps=4",
    "--set=acoustic.tg_train.steps=8",
    "--set=recognizer.judge_train.steps=15",
    "--set=eval.speaker_train.steps=15",
    "--set=corpus.pool_speakers=4",
];

fn streamvc(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamvc"))
        .arg("--out")
        .arg(out)
        .args(TINY)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = streamvc(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stderr);
    let last = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(last).expect("error line is JSON")
}

#[test]
fn missing_upstream_artifact_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_line(&streamvc(dir.path(), &["train-asr"]));
    assert_eq!(e["error"], "missing_artifact");
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn bad_override_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_line(&streamvc(dir.path(), &["--set", "acoustic.train.stepz=3", "gen-corpus"]));
    assert_eq!(e["error"], "invalid_config");
    assert!(!dir.path().join("corpus").exists());
}

#[test]
fn long_help_lists_config_keys() {
    let o = Command::new(env!("CARGO_BIN_EXE_streamvc")).arg("--help").output().unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("vocoder.train.steps = 1200"));
    assert!(text.contains("runtime.push_samples = 80"));
}

#[test]
fn full_pipeline_produces_audio_latency_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    ok(run, &["gen-corpus"]);
    ok(run, &["train-asr"]);
    ok(run, &["train-vocoder"]);
    ok(run, &["train-teacher"]);
    ok(run, &["gen-parallel"]);
    ok(run, &["train-student", "--method", "tg"]);

    let wav = std::fs::read_dir(run.join("corpus/wav"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("p00"))
        .unwrap();
    let wav = wav.to_str().unwrap();
    let input_len = streamvc::dsp::read_wav(Path::new(wav)).unwrap().samples.len();

    let off = run.join("offline.wav");
    ok(run, &["convert", "--in", wav, "--target", "t00", "--out-wav", off.to_str().unwrap()]);
    let streamed = run.join("streamed.wav");
    ok(run, &["stream", "--in", wav, "--target", "t00", "--chunk-ms", "160", "--out-wav", streamed.to_str().unwrap()]);

    let a = streamvc::dsp::read_wav(&off).unwrap();
    let b = streamvc::dsp::read_wav(&streamed).unwrap();
    assert_eq!(a.samples.len(), input_len);
    assert_eq!(b.samples.len(), input_len);
    let worst = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    // Both files are 16-bit, so one quantisation step of slack.
    assert!(worst <= 1.0 / 32767.0 + 1e-5, "offline and streamed differ by {worst}");

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("latency.json")).unwrap()).unwrap();
    assert_eq!(report["algorithmic_latency_ms"], 180.0);
    assert!(report["first_output_latency_ms"].as_f64().unwrap() >= 180.0);

    let e = error_line(&streamvc(run, &["stream", "--in", wav, "--target", "t00", "--chunk-ms", "80"]));
    assert_eq!(e["error"], "invalid_config");

    let records: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("artifacts.json")).unwrap()).unwrap();
    let student = &records["student_tg_k3"];
    assert!(student["inputs"]["parallel_k6"].as_str().unwrap().len() == 64);
    assert_eq!(student["files"].as_object().unwrap().len(), 2);

    let metrics = ok(run, &["eval", "--system", "tg"]);
    let m: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert_eq!(m["latency_ms"], 180.0);
    let acc = m["content_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
