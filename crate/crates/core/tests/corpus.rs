use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamvc::corpus::*;
use streamvc::dsp::{estimate_f0, AudioConfig, F0Config, MelExtractor};

fn small_config() -> CorpusConfig {
    CorpusConfig {
        pool_speakers: 4,
        target_speakers: 2,
        pool_split: SplitCounts { asr: 6, am: 2, judge: 2, spk: 2, test: 2 },
        target_split: SplitCounts { asr: 0, am: 4, judge: 2, spk: 2, test: 2 },
        min_seconds: 1.0,
        max_seconds: 2.0,
        ..Default::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn same_content_two_speakers_shares_latents() {
    let a = AudioConfig::default();
    let spk = make_speakers(2, 20, 3).unwrap();
    let c = Content::random(&mut ChaCha8Rng::seed_from_u64(4), 150, 5, 14);
    let (w0, f0a) = synthesize_utterance(&c, &spk[0], 1, &a).unwrap();
    let (w1, f0b) = synthesize_utterance(&c, &spk[1], 1, &a).unwrap();
    assert_eq!(w0.len(), 150 * 80);
    assert_ne!(w0, w1);
    let norm = |f: &[f32], s: &SpeakerSpec| f.iter().map(|v| ((*v as f64 - s.f0_base) / s.f0_range) as f32).collect::<Vec<_>>();
    let (na, nb) = (norm(&f0a, &spk[0]), norm(&f0b, &spk[1]));
    for (x, y) in na.iter().zip(&nb) {
        assert!((x - y).abs() < 1e-4);
    }
}

#[test]
fn rendered_pitch_matches_stored_contour() {
    let a = AudioConfig::default();
    let spk = make_speakers(6, 20, 11).unwrap();
    let mut errs = Vec::new();
    for (i, s) in spk.iter().enumerate() {
        let c = Content::random(&mut ChaCha8Rng::seed_from_u64(i as u64), 200, 5, 14);
        let labels = c.frame_labels();
        let (w, f0) = synthesize_utterance(&c, s, 7 + i as u64, &a).unwrap();
        let tr = estimate_f0(&w, &a, &F0Config::default()).unwrap();
        for t in 0..f0.len() {
            let voiced = PHONEMES[labels[t] as usize].voiced;
            if voiced && tr.voiced[t] {
                errs.push((tr.f0[t] - f0[t]).abs() as f64);
            }
        }
    }
    let m = median(errs);
    assert!(m < 5.0, "median F0 error {m}");
}

#[test]
fn envelope_estimates_agree_across_contents() {
    let a = AudioConfig::default();
    let mel = MelExtractor::new(a).unwrap();
    let spk = make_speakers(3, 20, 21).unwrap();
    let neutral = SpeakerSpec::neutral(20);
    let estimate = |c: &Content, s: &SpeakerSpec, seed: u64| -> Vec<f64> {
        let (w, _) = synthesize_utterance(c, s, seed, &a).unwrap();
        let (wn, _) = synthesize_utterance(c, &neutral, seed, &a).unwrap();
        let (m, mn) = (mel.frontend(&w), mel.frontend(&wn));
        (0..20).map(|j| (0..m.rows()).map(|t| (m.row(t)[j] - mn.row(t)[j]) as f64).sum::<f64>() / m.rows() as f64).collect()
    };
    for (i, s) in spk.iter().enumerate() {
        let c1 = Content::random(&mut ChaCha8Rng::seed_from_u64(100 + i as u64), 250, 5, 14);
        let c2 = Content::random(&mut ChaCha8Rng::seed_from_u64(200 + i as u64), 250, 5, 14);
        let (e1, e2) = (estimate(&c1, s, 1), estimate(&c2, s, 2));
        let dot: f64 = e1.iter().zip(&e2).map(|(x, y)| x * y).sum();
        let n = (e1.iter().map(|x| x * x).sum::<f64>() * e2.iter().map(|x| x * x).sum::<f64>()).sqrt();
        assert!(dot / n > 0.9, "speaker {i}: cosine {}", dot / n);
    }
}

#[test]
fn corpus_is_reproducible_persistable_and_balanced() {
    let a = AudioConfig::default();
    let cfg = small_config();
    let c = build_corpus(&cfg, &a, 42).unwrap();
    let again = build_corpus(&cfg, &a, 42).unwrap();
    assert_eq!(c.manifest, again.manifest);
    assert_eq!(c.utts, again.utts);
    assert_ne!(build_corpus(&cfg, &a, 43).unwrap().manifest, c.manifest);

    let mut ids: Vec<&str> = c.manifest.utterances.iter().map(|u| u.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), c.utts.len());
    for u in &c.utts {
        assert_eq!(u.phonemes.len(), u.f0.len());
        assert_eq!(u.mel.rows(), u.frames());
    }
    assert_eq!(c.targets().len(), 2);
    for t in c.targets() {
        assert!(!c.select(Split::Am, |s| s == t).is_empty());
        let want = cfg.target_seconds();
        assert!((c.seconds(t) - want).abs() / want < 0.25, "{} vs {want}", c.seconds(t));
    }

    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.manifest, c.manifest);
    assert_eq!(back.utts, c.utts);
    c.save(dir.path()).unwrap();
    let bytes = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    again.save(dir2.path()).unwrap();
    assert_eq!(bytes, std::fs::read(dir2.path().join("manifest.json")).unwrap());
}

#[test]
fn phonemes_independent_of_speaker_and_timbre_recoverable() {
    let a = AudioConfig::default();
    let cfg = CorpusConfig {
        pool_speakers: 8,
        target_speakers: 1,
        pool_split: SplitCounts { asr: 10, am: 0, judge: 0, spk: 0, test: 10 },
        target_split: SplitCounts { asr: 0, am: 1, judge: 0, spk: 0, test: 0 },
        min_seconds: 2.0,
        max_seconds: 4.0,
        ..Default::default()
    };
    let c = build_corpus(&cfg, &a, 7).unwrap();
    let pool = c.pool();
    let p = phoneme_independence_pvalue(&c, &pool);
    assert!(p > 0.01, "p = {p}");

    let avg = |u: &Utterance| -> Vec<f64> {
        (0..20).map(|j| (0..u.mel.rows()).map(|t| u.mel.row(t)[j] as f64).sum::<f64>() / u.mel.rows() as f64).collect()
    };
    let centroids: Vec<Vec<f64>> = pool
        .iter()
        .map(|s| {
            let us = c.select(Split::Asr, |x| x == *s);
            (0..20).map(|j| us.iter().map(|u| avg(u)[j]).sum::<f64>() / us.len() as f64).collect()
        })
        .collect();
    let test = c.select(Split::Test, |s| pool.contains(&s));
    let correct = test
        .iter()
        .filter(|u| {
            let v = avg(u);
            let d = |cen: &Vec<f64>| cen.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            let best = (0..pool.len()).min_by(|a, b| d(&centroids[*a]).total_cmp(&d(&centroids[*b]))).unwrap();
            pool[best] == u.speaker
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.95, "nearest-centroid accuracy {acc}");
}
