use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hopchain::{BeamConfig, EncoderConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Artifact locations. Relative paths are taken against the directory of the
/// config file they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub train_questions: PathBuf,
    pub dev_questions: PathBuf,
    pub tfidf: PathBuf,
    pub checkpoint: PathBuf,
    pub warmup_checkpoint: PathBuf,
    /// Keep a checkpoint per refresh here when set.
    pub checkpoint_dir: Option<PathBuf>,
    pub train_log: PathBuf,
    pub index: PathBuf,
    pub run: PathBuf,
    pub metrics: PathBuf,
    pub metrics_csv: Option<PathBuf>,
    pub embeddings: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "data/corpus.jsonl".into(),
            train_questions: "data/train.jsonl".into(),
            dev_questions: "data/dev.jsonl".into(),
            tfidf: "out/tfidf.bin".into(),
            checkpoint: "out/encoder.bin".into(),
            warmup_checkpoint: "out/encoder-warmup.bin".into(),
            checkpoint_dir: None,
            train_log: "out/train-log.jsonl".into(),
            index: "out/index.bin".into(),
            run: "out/run.jsonl".into(),
            metrics: "out/metrics.json".into(),
            metrics_csv: None,
            embeddings: "out/embeddings.tsv".into(),
        }
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.corpus,
            &mut self.train_questions,
            &mut self.dev_questions,
            &mut self.tfidf,
            &mut self.checkpoint,
            &mut self.warmup_checkpoint,
            &mut self.train_log,
            &mut self.index,
            &mut self.run,
            &mut self.metrics,
            &mut self.embeddings,
        ] {
            fix(p);
        }
        for p in [&mut self.checkpoint_dir, &mut self.metrics_csv].into_iter().flatten() {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Root seed. Copied into the synth and train sections before any command
    /// runs, so it is the only seed that matters.
    pub seed: u64,
    pub paths: Paths,
    pub encoder: EncoderConfig,
    pub beam: BeamConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 13,
            paths: Paths::default(),
            encoder: EncoderConfig::default(),
            beam: BeamConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Read a config file and resolve its relative paths against the file's
    /// directory. Without a file, defaults are resolved against `cwd`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| hopchain::Error::Io { path: p.into(), source: e })?;
                let cfg = Self::from_json(&text)
                    .map_err(|e| hopchain::Error::Format {
                        path: p.into(),
                        message: e.to_string(),
                    })
                    .context("reading config")?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
            None => (Self::default(), PathBuf::new()),
        };
        if !base.as_os_str().is_empty() {
            cfg.paths.resolve_against(&base);
        }
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hopchain::{RefreshMode, ScoreMode};

    fn to_json(cfg: &PipelineConfig) -> String {
        serde_json::to_string_pretty(cfg).unwrap()
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 987654321;
        cfg.train.learning_rate = 0.1 + 0.2;
        cfg.train.mode = RefreshMode::ConcurrentRefresh;
        cfg.beam.score_mode = ScoreMode::PerStepSoftmax;
        cfg.beam.per_step_k = Some(7);
        cfg.encoder.init_std = Some(1.0 / 3.0);
        cfg.synth.bridge_overlap = 0.3;
        cfg.paths.metrics_csv = Some("m.csv".into());
        let back = PipelineConfig::from_json(&to_json(&cfg)).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(to_json(&back), to_json(&cfg));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 5, "beam": {"beam_size": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.beam.beam_size, 3);
        assert_eq!(cfg.beam.return_top, BeamConfig::default().return_top);
        assert_eq!(cfg.paths, Paths::default());
    }

    #[test]
    fn mistyped_values_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"seed": "x"}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.json");
        std::fs::write(&file, r#"{"paths": {"corpus": "c.jsonl", "index": "/abs/idx.bin"}}"#).unwrap();
        let cfg = PipelineConfig::load(Some(&file)).unwrap();
        assert_eq!(cfg.paths.corpus, dir.path().join("c.jsonl"));
        assert_eq!(cfg.paths.index, PathBuf::from("/abs/idx.bin"));
        assert_eq!(cfg.paths.run, dir.path().join("out/run.jsonl"));
    }
}
