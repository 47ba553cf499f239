//! Run configuration: one TOML document with a section per component.
//!
//! Unknown keys are rejected. Any key can be overridden from the environment
//! as `ZSCIR__<SECTION>__<KEY>=<value>` (nested tables add more `__`
//! segments); values are parsed as TOML, falling back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::eval::{EvalProtocol, EvalSetConfig};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::triplets::{
    CaptionBackend, HttpBackendConfig, HttpCaptioner, HttpReformulator, OracleCaptioner,
    OracleReformulator, PairSamplingConfig, ReformulationBackend, DEFAULT_WORD_CAP,
};
use crate::triplets::http::ChatClient;
use crate::world::SyntheticWorldConfig;

pub const ENV_PREFIX: &str = "ZSCIR__";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory for every artifact without an explicit path.
    pub out_dir: Option<PathBuf>,
    pub collection: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub eval_set: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub combiner_checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
}

/// Artifacts a run reads or writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Collection,
    Dataset,
    EvalSet,
    Checkpoint,
    CombinerCheckpoint,
    TrainLog,
    Report,
    Gallery,
}

impl Artifact {
    pub fn default_file_name(self) -> &'static str {
        match self {
            Artifact::Collection => "collection.jsonl",
            Artifact::Dataset => "triplets.jsonl",
            Artifact::EvalSet => "eval_set.jsonl",
            Artifact::Checkpoint => "model.ckpt",
            Artifact::CombinerCheckpoint => "model_combiner.ckpt",
            Artifact::TrainLog => "train_log.jsonl",
            Artifact::Report => "report.json",
            Artifact::Gallery => "gallery.html",
        }
    }
}

impl PathsConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// The explicit path for `artifact`, else its default name under `out_dir`.
    pub fn resolve(&self, artifact: Artifact) -> PathBuf {
        let explicit = match artifact {
            Artifact::Collection => &self.collection,
            Artifact::Dataset => &self.dataset,
            Artifact::EvalSet => &self.eval_set,
            Artifact::Checkpoint => &self.checkpoint,
            Artifact::CombinerCheckpoint => &self.combiner_checkpoint,
            Artifact::TrainLog => &self.train_log,
            Artifact::Report => &self.report,
            Artifact::Gallery => &self.gallery,
        };
        explicit
            .clone()
            .unwrap_or_else(|| self.out_dir().join(artifact.default_file_name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Oracle,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub word_cap: usize,
    pub caption: Option<HttpBackendConfig>,
    pub reformulation: Option<HttpBackendConfig>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Oracle,
            word_cap: DEFAULT_WORD_CAP,
            caption: None,
            reformulation: None,
        }
    }
}

pub type Backends = (Box<dyn CaptionBackend>, Box<dyn ReformulationBackend>);

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.word_cap == 0 {
            return Err(Error::InvalidConfig("backend.word_cap must be positive".into()));
        }
        if self.kind == BackendKind::Http && (self.caption.is_none() || self.reformulation.is_none()) {
            return Err(Error::InvalidConfig(
                "backend.kind = \"http\" needs [backend.caption] and [backend.reformulation]".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self, world: &SyntheticWorldConfig) -> Result<Backends> {
        self.validate()?;
        match self.kind {
            BackendKind::Oracle => Ok((
                Box::new(OracleCaptioner::new(world)?),
                Box::new(OracleReformulator::new(world, self.word_cap)?),
            )),
            BackendKind::Http => {
                let cap = self.caption.clone().expect("validated");
                let reform = self.reformulation.clone().expect("validated");
                Ok((
                    Box::new(HttpCaptioner(ChatClient::new(cap)?)),
                    Box::new(HttpReformulator(ChatClient::new(reform)?)),
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSweepSpec {
    /// Triplet counts, strictly increasing.
    pub counts: Vec<usize>,
    /// Every count is trained once per seed; results are reported per seed and as the median.
    pub seeds: Vec<u64>,
}

impl Default for ScaleSweepSpec {
    fn default() -> Self {
        Self {
            counts: vec![500, 1000, 2000, 4000],
            seeds: vec![0, 1, 2],
        }
    }
}

impl ScaleSweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.counts[0] == 0 {
            return Err(Error::InvalidConfig("sweep.counts must be non-empty and positive".into()));
        }
        if self.counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "sweep.counts must be strictly increasing, got {:?}",
                self.counts
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep.seeds must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub world: SyntheticWorldConfig,
    pub sampling: PairSamplingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub eval_set: EvalSetConfig,
    pub backend: BackendConfig,
    pub sweep: ScaleSweepSpec,
    pub ablation: AblationSpec,
}

fn parse_override(raw: &str) -> toml::Value {
    // A bare TOML value parses as the right-hand side of a one-key document.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `ZSCIR__A__B=v` style overrides from `vars` to `table`.
pub fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidConfig(format!("malformed override variable `{key}`")));
        }
        let (last, parents) = path.split_last().expect("non-empty");
        let mut node = &mut *table;
        for seg in parents {
            let entry = node
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("`{key}`: `{seg}` is not a table")))?;
        }
        node.insert(last.clone(), parse_override(&raw));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    pub fn from_toml_with_env<I>(text: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        apply_overrides(&mut table, vars)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.sampling.n_pairs == 0 {
            return Err(Error::InvalidConfig("sampling.n_pairs must be > 0".into()));
        }
        self.train.validate()?;
        self.eval.validate()?;
        self.backend.validate()?;
        self.sweep.validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::InvalidConfig("ablation.seeds must be non-empty".into()));
        }
        if self.model.image_size != self.world.image_size {
            return Err(Error::InvalidConfig(format!(
                "model.image_size {} differs from world.image_size {}",
                self.model.image_size, self.world.image_size
            )));
        }
        let mut probe = self.model.clone();
        if probe.text_vocab_size == 0 {
            probe.text_vocab_size = probe.null_token_id + 1;
        }
        probe.validate()
    }

    /// Replaces every seed with `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.sampling.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval_set.seed = seed;
    }

    pub fn set_out_dir(&mut self, dir: &Path) {
        self.paths.out_dir = Some(dir.to_path_buf());
    }

    /// sha256 of the canonical JSON form.
    /// Hash of everything that can change results; `paths` is left out.
    pub fn hash(&self) -> Result<String> {
        let mut value = self.to_json()?;
        if let Some(map) = value.as_object_mut() {
            map.remove("paths");
        }
        Ok(artifact::sha256_hex(&serde_json::to_vec(&value)?))
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_fail() {
        let err = RunConfig::from_toml_str("[train]\nepochz = 3\n").unwrap_err();
        assert!(err.is_config_error());
        assert!(RunConfig::from_toml_str("[nonsense]\n").is_err());
    }

    #[test]
    fn env_overrides() {
        let vars = vec![
            ("ZSCIR__TRAIN__EPOCHS".to_string(), "3".to_string()),
            ("ZSCIR__PATHS__OUT_DIR".to_string(), "/tmp/x".to_string()),
            ("ZSCIR__EVAL__KS".to_string(), "[1, 2]".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let cfg = RunConfig::from_toml_with_env("[train]\nepochs = 9\n", vars).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.paths.out_dir, Some(PathBuf::from("/tmp/x")));
        assert_eq!(cfg.eval.ks, vec![1, 2]);
    }

    #[test]
    fn sweep_counts_must_increase() {
        let err = RunConfig::from_toml_str("[sweep]\ncounts = [1000, 500]\n").unwrap_err();
        assert!(err.is_config_error());
    }

    #[test]
    fn http_backend_requires_endpoints() {
        assert!(RunConfig::from_toml_str("[backend]\nkind = \"http\"\n").is_err());
    }

    #[test]
    fn paths_default_under_out_dir() {
        let p = PathsConfig {
            out_dir: Some("o".into()),
            report: Some("r.json".into()),
            ..Default::default()
        };
        assert_eq!(p.resolve(Artifact::Dataset), PathBuf::from("o/triplets.jsonl"));
        assert_eq!(p.resolve(Artifact::Report), PathBuf::from("r.json"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), RunConfig::default().hash().unwrap());
        let mut c = a.clone();
        c.paths.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash().unwrap(), c.hash().unwrap());
    }
}
