use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{HeadKind, SutConfig, SutMode, DEFAULT_GRL_SCALE, DEFAULT_HIDDEN, DEFAULT_STOCHASTICITY};
use crate::attacks::AttackerConfig;
use crate::data::{AttributeKind, MovieLensFormat, SynthConfig};
use crate::error::{Error, Result};
use crate::fedsim::DEFAULT_ADV_WEIGHT;
use crate::experiment::metrics::Candidates;
use crate::recmodel::{ScorerKind, DEFAULT_DIM, DEFAULT_NEGATIVES};

/// Overrides `run.out_dir` when set.
pub const OUT_DIR_ENV: &str = "ATTRUNLEARN_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Synth,
    Movielens,
    /// A dataset previously written by `prep`.
    Prepared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MovielensSection {
    pub ratings: PathBuf,
    pub users: PathBuf,
    pub format: MovieLensFormat,
    pub min_user: usize,
    pub min_item: usize,
    /// Age bucket boundaries; when unset, the usual split for the chosen
    /// format's dataset is used (see [`MovielensSection::thresholds`]).
    pub age_thresholds: Option<(u32, u32)>,
}

impl MovielensSection {
    /// `(27, 38)` for the tab-separated ML-100K layout, `(25, 31)` for
    /// ML-1M, unless overridden.
    pub fn thresholds(&self) -> (u32, u32) {
        self.age_thresholds.unwrap_or(match self.format {
            MovieLensFormat::Tab => (27, 38),
            MovieLensFormat::DoubleColon => (25, 31),
        })
    }
}

impl Default for MovielensSection {
    fn default() -> Self {
        MovielensSection {
            ratings: PathBuf::from("ratings.dat"),
            users: PathBuf::from("users.dat"),
            format: MovieLensFormat::DoubleColon,
            min_user: 5,
            min_item: 5,
            age_thresholds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: SourceKind,
    pub attribute: AttributeKind,
    /// Downsample the majority gender.
    pub balance: bool,
    pub prepared: PathBuf,
    pub synth: SynthConfig,
    pub movielens: MovielensSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: SourceKind::Synth,
            attribute: AttributeKind::Gender,
            balance: false,
            prepared: PathBuf::from("dataset.json"),
            synth: SynthConfig::default(),
            movielens: MovielensSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub lr: f64,
    pub rounds: u64,
    pub sample_fraction: f64,
    pub negatives: usize,
    pub local_epochs: usize,
    pub scorer: ScorerKind,
    pub scorer_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            dim: DEFAULT_DIM,
            lr: 0.1,
            rounds: 200,
            sample_fraction: 0.1,
            negatives: DEFAULT_NEGATIVES,
            local_epochs: 1,
            scorer: ScorerKind::Dot,
            scorer_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    /// `false` trains the plain federated recommender.
    pub enabled: bool,
    pub head: HeadKind,
    /// Weight of the adversarial term in the client objective.
    pub weight: f64,
    /// DSVAE stochasticity (variance of `ε₁`).
    pub lambda: f64,
    pub hidden: usize,
    pub lr: f64,
    pub pretrain_rounds: u64,
}

impl Default for AdversarySection {
    fn default() -> Self {
        AdversarySection {
            enabled: true,
            head: HeadKind::Dsvae,
            weight: DEFAULT_ADV_WEIGHT,
            lambda: DEFAULT_STOCHASTICITY,
            hidden: DEFAULT_HIDDEN,
            lr: 0.1,
            pretrain_rounds: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SutSection {
    pub mode: SutMode,
    pub eps: f64,
    pub tau: f64,
}

impl Default for SutSection {
    fn default() -> Self {
        SutSection {
            mode: SutMode::Binary,
            eps: DEFAULT_GRL_SCALE,
            tau: 1.0,
        }
    }
}

impl SutSection {
    pub fn to_config(&self) -> SutConfig {
        SutConfig { mode: self.mode, eps: self.eps, tau: self.tau }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    #[serde(flatten)]
    pub attacker: AttackerConfig,
    /// Independent shadow/eval splits averaged into the reported F1/BAcc.
    pub attacker_repeats: usize,
    pub gradient_attack: bool,
    /// The server stores gradients from rounds before this one.
    pub dlg_round: u64,
    pub dlg_steps: usize,
    pub dlg_lr: f64,
    pub dlg_restarts: usize,
    pub candidates: Candidates,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            attacker: AttackerConfig::default(),
            attacker_repeats: 5,
            gradient_attack: true,
            dlg_round: 100,
            dlg_steps: 300,
            dlg_lr: 0.05,
            dlg_restarts: 8,
            candidates: Candidates::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub parallel: bool,
    pub out_dir: PathBuf,
    pub repeats: usize,
    pub write_gradients: bool,
    pub write_checkpoint: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            parallel: true,
            out_dir: PathBuf::from("runs"),
            repeats: 1,
            write_gradients: true,
            write_checkpoint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub adversary: AdversarySection,
    pub sut: SutSection,
    pub attack: AttackSection,
    pub run: RunSection,
}

/// Applies `section.key=value` to a TOML tree. The value is parsed as a
/// TOML literal and falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Format(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Format(format!("bad override key `{path}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut node = root;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Format(format!("`{k}` in `{path}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text and applies overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (or the defaults when `path` is `None`), applies
    /// overrides and then the output-directory environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.run.out_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    /// A copy with further `section.key=value` overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let text = self.to_toml_string()?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.dim == 0 {
            return Err(Error::Domain("model.dim must be >= 1".into()));
        }
        if !(m.lr > 0.0) || !(self.adversary.lr > 0.0) {
            return Err(Error::Domain("learning rates must be > 0".into()));
        }
        if !(m.sample_fraction > 0.0 && m.sample_fraction <= 1.0) {
            return Err(Error::Domain("model.sample_fraction must lie in (0, 1]".into()));
        }
        if m.local_epochs == 0 {
            return Err(Error::Domain("model.local_epochs must be >= 1".into()));
        }
        let a = &self.adversary;
        if !(a.weight >= 0.0) || !(a.lambda >= 0.0) || a.hidden == 0 {
            return Err(Error::Domain("adversary weight/lambda must be >= 0, hidden >= 1".into()));
        }
        self.sut.to_config().validate()?;
        let k = &self.attack;
        if !(k.attacker.shadow_fraction > 0.0 && k.attacker.shadow_fraction < 1.0) {
            return Err(Error::Domain("attack.shadow_fraction must lie in (0, 1)".into()));
        }
        if k.attacker_repeats == 0 || k.dlg_steps == 0 || k.dlg_restarts == 0 || !(k.dlg_lr > 0.0) {
            return Err(Error::Domain("attack repeats/steps/restarts must be >= 1, dlg_lr > 0".into()));
        }
        if self.run.seed > i64::MAX as u64 {
            return Err(Error::Domain("run.seed must fit a TOML integer (<= 2^63 - 1)".into()));
        }
        if self.run.repeats == 0 {
            return Err(Error::Domain("run.repeats must be >= 1".into()));
        }
        if self.dataset.source == SourceKind::Synth {
            self.dataset.synth.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Short identifier derived from the hash.
    pub fn run_id(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// Label used in reports for the adversary column.
    pub fn head_label(&self) -> String {
        if self.adversary.enabled {
            serde_json::to_value(self.adversary.head)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        } else {
            "none".into()
        }
    }
}
