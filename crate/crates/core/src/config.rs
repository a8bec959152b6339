//! Experiment configuration: one JSON document with a section per stage.
//! Unknown keys are rejected at every level; missing keys take defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticConfig, AcousticTrainConfig, AmKind, LsganConfig};
use crate::corpus::CorpusConfig;
use crate::dsp::{AudioConfig, F0Config};
use crate::error::{Error, Result};
use crate::eval::{SpeakerEncoderConfig, SpeakerTrainConfig};
use crate::recognizer::{EncoderConfig, ProbeConfig, RecognizerTrainConfig};
use crate::vocoder::{VocoderConfig, VocoderTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Every random stream is derived from this value.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub audio: AudioConfig,
    pub corpus: CorpusConfig,
    pub recognizer: RecognizerSection,
    pub acoustic: AcousticSection,
    pub vocoder: VocoderSection,
    pub runtime: RuntimeSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            audio: AudioConfig::default(),
            corpus: CorpusConfig::default(),
            recognizer: RecognizerSection::default(),
            acoustic: AcousticSection::default(),
            vocoder: VocoderSection::default(),
            runtime: RuntimeSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerSection {
    /// Architecture shared by the non-streaming and streaming recognizers;
    /// `mode` is set per model.
    pub encoder: EncoderConfig,
    pub train: RecognizerTrainConfig,
    /// Held-out judge used for content accuracy.
    pub judge: EncoderConfig,
    pub judge_train: RecognizerTrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RecognizerSection {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: RecognizerTrainConfig::default(),
            judge: EncoderConfig { width: 64, ..Default::default() },
            judge_train: RecognizerTrainConfig { steps: 1200, ..Default::default() },
            probe: ProbeConfig::default(),
        }
    }
}

/// Acoustic-model hyper-parameters independent of tap and speaker set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticArch {
    pub spk_width: usize,
    pub enc_width: usize,
    pub context: Vec<(usize, usize)>,
    pub dilations: Vec<usize>,
    pub dec_width: usize,
    pub prenet_width: usize,
    pub prenet_dropout: f64,
}

impl Default for AcousticArch {
    fn default() -> Self {
        let c = AcousticConfig::new(AmKind::Student, 1, 1, vec![]);
        Self {
            spk_width: c.spk_width,
            enc_width: c.enc_width,
            context: c.context,
            dilations: c.dilations,
            dec_width: c.dec_width,
            prenet_width: c.prenet_width,
            prenet_dropout: c.prenet_dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticSection {
    pub arch: AcousticArch,
    /// Tap used by `train-teacher` / `train-student` outside the sweep.
    pub layer: usize,
    /// Tap of the teacher that produces the parallel data.
    pub teacher_layer: usize,
    /// Reconstruction training (pretrain on pool speakers, fine-tune on targets).
    pub train: AcousticTrainConfig,
    /// Teacher-guidance training of the student.
    pub tg_train: AcousticTrainConfig,
    /// Adversarial critic for reconstruction training; off when absent.
    pub lsgan: Option<LsganConfig>,
}

impl Default for AcousticSection {
    fn default() -> Self {
        Self {
            arch: AcousticArch::default(),
            layer: 3,
            teacher_layer: 6,
            train: AcousticTrainConfig { steps: 300, finetune_steps: 150, ..Default::default() },
            tg_train: AcousticTrainConfig { steps: 600, finetune_steps: 0, ..Default::default() },
            lsgan: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderSection {
    pub model: VocoderConfig,
    pub train: VocoderTrainConfig,
}

impl Default for VocoderSection {
    fn default() -> Self {
        Self { model: VocoderConfig::default(), train: VocoderTrainConfig { steps: 1200, ..Default::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    /// Samples handed to the stream per call when timing.
    pub push_samples: usize,
    /// Use the three-thread pipelined runner for `stream`.
    pub pipelined: bool,
    /// Queue capacity between pipelined stages, in chunks.
    pub queue_depth: usize,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self { push_samples: 80, pipelined: false, queue_depth: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// Non-streaming recognizer, teacher model, reconstruction loss.
    RecStar,
    /// Streaming recognizer, student model, reconstruction loss.
    Rec,
    /// Streaming recognizer, student model, trained on teacher outputs.
    Tg,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [SystemKind::RecStar, SystemKind::Rec, SystemKind::Tg];

    pub fn label(self) -> &'static str {
        match self {
            SystemKind::RecStar => "rec_star",
            SystemKind::Rec => "rec",
            SystemKind::Tg => "tg",
        }
    }

    pub fn display(self) -> &'static str {
        match self {
            SystemKind::RecStar => "IBFs+Rec*",
            SystemKind::Rec => "IBFs+Rec",
            SystemKind::Tg => "IBFs+TG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.label() == s || (s == "rec*" && *k == SystemKind::RecStar))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown system {s:?}; expected rec_star, rec or tg")))
    }

    pub fn streaming(self) -> bool {
        self != SystemKind::RecStar
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub speaker_hidden: usize,
    pub speaker_embedding: usize,
    pub speaker_train: SpeakerTrainConfig,
    /// Real utterances required per speaker centroid.
    pub min_centroid_utts: usize,
    pub f0: F0Config,
    /// Held-out pool utterances converted to every target per cell.
    pub sources: usize,
    pub systems: Vec<SystemKind>,
    pub layers: Vec<usize>,
    pub seeds: usize,
    /// Parallel pairs scored by the teacher gate; 0 scores all of them.
    pub gate_pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            speaker_hidden: 64,
            speaker_embedding: 16,
            speaker_train: SpeakerTrainConfig::default(),
            min_centroid_utts: 20,
            f0: F0Config::default(),
            sources: 16,
            systems: SystemKind::ALL.to_vec(),
            layers: vec![2, 3, 4, 5, 6],
            seeds: 3,
            gate_pairs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.audio.validate()?;
        self.corpus.validate()?;
        let rec = &self.recognizer;
        rec.encoder.validate()?;
        rec.encoder.clone().streaming().validate()?;
        rec.judge.validate()?;
        self.vocoder.model.validate()?;
        if self.vocoder.model.audio != self.audio {
            return bad("vocoder.model.audio must equal audio".into());
        }
        if rec.encoder.mel_bins != self.audio.mel_bins || rec.judge.mel_bins != self.audio.mel_bins {
            return bad(format!("recognizer mel_bins must equal audio.mel_bins = {}", self.audio.mel_bins));
        }
        let k_max = rec.encoder.layers;
        let ac = &self.acoustic;
        for (name, k) in [("acoustic.layer", ac.layer), ("acoustic.teacher_layer", ac.teacher_layer)] {
            if k == 0 || k > k_max {
                return bad(format!("{name} = {k} outside 1..={k_max}"));
            }
        }
        if self.eval.layers.is_empty() || self.eval.layers.iter().any(|k| *k == 0 || *k > k_max) {
            return bad(format!("eval.layers must be non-empty and within 1..={k_max}"));
        }
        if self.eval.systems.is_empty() || self.eval.seeds == 0 || self.eval.sources == 0 {
            return bad("eval needs at least one system, seed and source".into());
        }
        if !(0.0..1.0).contains(&self.eval.speaker_train.noise_fraction) {
            return bad("eval.speaker_train.noise_fraction must be in [0, 1)".into());
        }
        if self.runtime.push_samples == 0 || self.runtime.queue_depth == 0 {
            return bad("runtime.push_samples and runtime.queue_depth must be positive".into());
        }
        self.acoustic_config(AmKind::Student, 1, vec!["x".into()])?;
        Ok(())
    }

    /// Recognizer architecture in the requested mode.
    pub fn encoder(&self, streaming: bool) -> EncoderConfig {
        let e = self.recognizer.encoder.clone();
        if streaming {
            e.streaming()
        } else {
            e
        }
    }

    pub fn acoustic_config(&self, kind: AmKind, k: usize, speakers: Vec<String>) -> Result<AcousticConfig> {
        let a = &self.acoustic.arch;
        let enc = &self.recognizer.encoder;
        let cfg = AcousticConfig {
            mel_bins: self.audio.mel_bins,
            spk_width: a.spk_width,
            enc_width: a.enc_width,
            context: a.context.clone(),
            dilations: a.dilations.clone(),
            dec_width: a.dec_width,
            prenet_width: a.prenet_width,
            prenet_dropout: a.prenet_dropout,
            chunk_frames: enc.chunk_frames,
            ..AcousticConfig::new(kind, k, enc.tap_width(k), speakers)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn speaker_config(&self, speakers: Vec<String>) -> SpeakerEncoderConfig {
        SpeakerEncoderConfig {
            audio: self.audio,
            hidden: self.eval.speaker_hidden,
            embedding: self.eval.speaker_embedding,
            speakers,
        }
    }

    /// Sets the encoder chunk from a duration in milliseconds.
    pub fn set_chunk_ms(&mut self, ms: f64) -> Result<()> {
        let frames = ms / self.audio.frame_ms();
        if frames < 1.0 || (frames - frames.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("chunk of {ms} ms is not a whole number of {} ms frames", self.audio.frame_ms())));
        }
        self.recognizer.encoder.chunk_frames = frames.round() as usize;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seed": 9, "corpus": {"session_db": 2.0}, "eval": {"layers": [2, 6]}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.corpus.session_db, 2.0);
        assert_eq!(c.corpus.pool_speakers, CorpusConfig::default().pool_speakers);
        assert_eq!(c.eval.layers, vec![2, 6]);
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"vocoder": {"train": {"stepz": 3}}}"#).is_err());
    }

    #[test]
    fn inconsistent_values_fail_validation() {
        let mut c = ExperimentConfig::default();
        c.eval.layers = vec![7];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.audio.mel_bins = 24;
        assert!(c.validate().is_err());
    }

    #[test]
    fn chunk_ms_maps_to_frames() {
        let mut c = ExperimentConfig::default();
        c.set_chunk_ms(160.0).unwrap();
        assert_eq!(c.recognizer.encoder.chunk_frames, 16);
        assert!(c.set_chunk_ms(165.0).is_err());
        let s = c.acoustic_config(AmKind::Student, 2, vec!["a".into()]).unwrap();
        assert_eq!(s.chunk_frames, 16);
    }
}
