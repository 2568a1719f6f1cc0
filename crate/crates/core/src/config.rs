//! Run configuration: one TOML file covering every stage. Unknown keys are
//! rejected; omitted keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::{read_file, SyntheticSpec};
use crate::error::{GinError, Result};
use crate::exec::{Exec, ExecMode, Strategy};
use crate::gradcheck::GradCheckSpec;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::text_graph::{FeatureMode, DEFAULT_K};
use crate::trainer::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "GIN_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    /// Prebuilt vocabulary; built from the training split when absent.
    pub vocab: Option<PathBuf>,
    /// Prebuilt graph over `vocab`; built from the embeddings when absent.
    pub graph: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: None,
            vocab: None,
            graph: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub max_words: usize,
    pub min_doc_freq: usize,
    pub feature_mode: FeatureMode,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_words: 10_000,
            min_doc_freq: 1,
            feature_mode: FeatureMode::Counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub k: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    pub mode: ExecMode,
    pub strategy: Strategy,
    /// Worker threads for the parallel strategy; 0 uses every core.
    pub workers: usize,
    pub precision: Precision,
}

impl RuntimeConfig {
    pub fn exec(&self) -> Exec {
        Exec::new(self.strategy, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub vocab: VocabConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub runtime: RuntimeConfig,
    pub synthetic: SyntheticSpec,
    pub gradcheck: GradCheckSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GinError::Config(e.to_string()))
    }

    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path).map_err(|e| GinError::Config(e.to_string()))?;
        let mut cfg = RunConfig::from_toml(&text)
            .map_err(|e| GinError::Config(format!("{}: {e}", path.display())))?;
        let abs = std::path::absolute(path).map_err(|e| GinError::io(path, e))?;
        let base = abs.parent().unwrap_or(Path::new("/"));
        let p = &mut cfg.paths;
        for opt in [&mut p.manifest, &mut p.vocab, &mut p.graph] {
            if let Some(rel) = opt.as_mut().filter(|q| q.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        if p.out_dir.is_relative() {
            p.out_dir = base.join(&p.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph.k == 0 {
            return Err(GinError::Config("graph.k must be >= 1".into()));
        }
        if self.vocab.max_words < 2 {
            return Err(GinError::Config("vocab.max_words must be >= 2".into()));
        }
        if self.paths.graph.is_some() && self.paths.vocab.is_none() {
            return Err(GinError::Config(
                "paths.graph needs paths.vocab (the vocabulary the graph was built over)".into(),
            ));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        Ok(())
    }

    /// Settings sized for the bundled synthetic corpus: small common space,
    /// 40-pair batches and a pool a desktop trains on in seconds.
    pub fn desk_scale() -> Self {
        let mut c = RunConfig::default();
        c.model.common_dim = 64;
        c.train.batch_size = 40;
        c.train.q1 = 20;
        c.train.q2 = 20;
        c.train.total_pos = 1000;
        c.train.total_neg = 1000;
        c
    }
}
