//! Run configuration, read from a flat TOML key-value document.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::datagen::GaussianTask;
use crate::error::{Error, Result};
use crate::losses::VatConfig;
use crate::models::{Architecture, Conditioning};

use super::optim::LrSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Casa,
    AsaBaseline,
    DannBaseline,
    SourceOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Casa, Method::AsaBaseline, Method::DannBaseline, Method::SourceOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Casa => "casa",
            Method::AsaBaseline => "asa_baseline",
            Method::DannBaseline => "dann_baseline",
            Method::SourceOnly => "source_only",
        }
    }

    pub fn conditioning(self) -> Conditioning {
        match self {
            Method::Casa => Conditioning::Outer,
            _ => Conditioning::Marginal,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected one of casa, asa_baseline, dann_baseline, source_only")))
    }
}

/// Dirichlet concentration of the target label marginal; `None` is the
/// balanced target. Written as `"none"` or a positive number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alpha(pub Option<f64>);

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("none"),
            Some(a) => write!(f, "{a}"),
        }
    }
}

impl FromStr for Alpha {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(Alpha(None));
        }
        let a: f64 = s.parse().map_err(|_| Error::Config(format!("alpha {s:?} is neither \"none\" nor a number")))?;
        Alpha::positive(a)
    }
}

impl Alpha {
    fn positive(a: f64) -> Result<Self> {
        if a > 0.0 && a.is_finite() {
            Ok(Alpha(Some(a)))
        } else {
            Err(Error::Config(format!("alpha must be positive, got {a}")))
        }
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            None => s.serialize_str("none"),
            Some(a) => s.serialize_f64(a),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(a) => Alpha::positive(a),
            Raw::Int(a) => Alpha::positive(a as f64),
            Raw::Text(t) => t.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Joint gradient-norm cap per update (`0` disables).
    pub clip_norm: f64,
    pub anneal_start: usize,
    pub anneal_end: usize,
    pub anneal_final: f64,
    pub lambda_align: f64,
    pub lambda_y: f64,
    pub lambda_ce: f64,
    pub lambda_v_src: f64,
    pub lambda_v_tgt: f64,
    pub align_warmup: usize,
    pub vat_eps: f64,
    pub vat_xi: f64,
    pub vat_power: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub disc_width: usize,
    pub disc_layers: usize,
    pub slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Casa,
            steps: 4000,
            batch: 64,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-3,
            clip_norm: 5.0,
            anneal_start: 1850,
            anneal_end: 3700,
            anneal_final: 0.001,
            lambda_align: 2.0,
            lambda_y: 1.0,
            lambda_ce: 0.1,
            lambda_v_src: 1.0,
            lambda_v_tgt: 0.1,
            align_warmup: 600,
            vat_eps: 0.1,
            vat_xi: 1e-6,
            vat_power: 1,
            seed: 0,
            eval_every: 500,
            eval_samples: 512,
            feature_dim: 8,
            hidden_width: 32,
            hidden_layers: 2,
            disc_width: 32,
            disc_layers: 2,
            slope: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.align_warmup > self.steps {
            return bad(format!("align_warmup {} exceeds steps {}", self.align_warmup, self.steps));
        }
        if self.batch == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return bad("batch, eval_every and eval_samples must be positive".into());
        }
        if self.feature_dim == 0 || self.hidden_width == 0 || self.disc_width == 0 {
            return bad("layer widths must be positive".into());
        }
        let lambdas = [
            ("lambda_align", self.lambda_align),
            ("lambda_y", self.lambda_y),
            ("lambda_ce", self.lambda_ce),
            ("lambda_v_src", self.lambda_v_src),
            ("lambda_v_tgt", self.lambda_v_tgt),
        ];
        if let Some((name, v)) = lambdas.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return bad(format!("{name} must be finite and nonnegative, got {v}"));
        }
        let reals = [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("anneal_final", self.anneal_final),
            ("vat_eps", self.vat_eps),
            ("vat_xi", self.vat_xi),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return bad(format!("{name} must be finite and nonnegative, got {v}"));
        }
        if !(self.slope > 0.0 && self.slope <= 1.0) {
            return bad(format!("slope must lie in (0, 1], got {}", self.slope));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            start: self.anneal_start,
            end: self.anneal_end,
            final_factor: self.anneal_final,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            extractor_hidden: vec![self.hidden_width; self.hidden_layers],
            discriminator_hidden: vec![self.disc_width; self.disc_layers],
            slope: self.slope,
        }
    }

    pub fn vat(&self) -> VatConfig {
        VatConfig {
            eps_ball: self.vat_eps,
            xi: self.vat_xi,
            n_power: self.vat_power,
        }
    }

    /// SHA-256 over the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub methods: Vec<Method>,
    pub alphas: Vec<Alpha>,
    pub seeds: Vec<u64>,
    /// Worker threads for the grid; 0 uses all cores.
    pub workers: usize,
    /// Target marginal used by `train` when set; overrides `alpha`.
    pub target_marginal: Option<Vec<f64>>,
    /// Target-marginal concentration used by `train`.
    pub alpha: Alpha,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Casa, Method::AsaBaseline, Method::DannBaseline, Method::SourceOnly],
            alphas: vec![Alpha(None), Alpha(Some(10.0)), Alpha(Some(3.0)), Alpha(Some(1.0)), Alpha(Some(0.5))],
            seeds: (0..5).collect(),
            workers: 0,
            target_marginal: None,
            alpha: Alpha(None),
        }
    }
}

/// Everything a run or grid needs: training, synthetic task and grid keys
/// share one flat namespace.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub task: GaussianTask,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    /// The synthetic task with a floor of 25 target samples per class, so
    /// every class reaches the held-out split at any α.
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            task: GaussianTask {
                min_class_count: 25,
                ..GaussianTask::default()
            },
            grid: GridConfig::default(),
        }
    }
}

fn table_of<T: Serialize>(value: &T) -> toml::Table {
    match toml::Value::try_from(value).expect("config serializes") {
        toml::Value::Table(t) => t,
        _ => toml::Table::new(),
    }
}

impl ExperimentConfig {
    /// Keys absent from `text` keep the values of [`ExperimentConfig::default`].
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = Self::default();
        let (mut t, mut k, mut g) = (table_of(&base.train), table_of(&base.task), table_of(&base.grid));
        // unset options are not serialized
        let mut grid_keys: BTreeSet<String> = g.keys().cloned().collect();
        grid_keys.insert("target_marginal".into());
        for (key, value) in table {
            let dest = if t.contains_key(&key) {
                &mut t
            } else if k.contains_key(&key) {
                &mut k
            } else if grid_keys.contains(&key) {
                &mut g
            } else {
                return Err(Error::Config(format!("unknown key {key:?}")));
            };
            dest.insert(key, value);
        }
        let conv = |e: toml::de::Error| Error::Config(e.to_string());
        let cfg = Self {
            train: toml::Value::Table(t).try_into().map_err(conv)?,
            task: toml::Value::Table(k).try_into().map_err(conv)?,
            grid: toml::Value::Table(g).try_into().map_err(conv)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        let mut out = table_of(&self.train);
        out.extend(table_of(&self.task));
        out.extend(table_of(&self.grid));
        toml::to_string(&out).expect("table serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.task.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if let Some(m) = &self.grid.target_marginal {
            if m.len() != self.task.classes || m.iter().any(|&v| !(v >= 0.0)) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("target_marginal must be a probability vector over the classes".into()));
            }
        }
        if self.grid.methods.is_empty() || self.grid.alphas.is_empty() || self.grid.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one method, alpha and seed".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        assert!(text.lines().all(|l| !l.starts_with('[')));
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml_str("method = \"dann_baseline\"\nsteps = 10\nalign_warmup = 5\nn_source = 90\nalphas = [\"none\", 0.5, 3]\nseeds = [4]").unwrap();
        assert_eq!(cfg.train.method, Method::DannBaseline);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.lr, 0.02);
        assert_eq!(cfg.task.n_source, 90);
        assert_eq!(cfg.task.rotation_deg, 40.0);
        assert_eq!(cfg.task.min_class_count, 25);
        assert_eq!(cfg.grid.alphas, vec![Alpha(None), Alpha(Some(0.5)), Alpha(Some(3.0))]);
        assert_eq!(cfg.grid.seeds, vec![4]);
    }

    #[test]
    fn rejects_bad_documents() {
        for doc in [
            "stepz = 3",
            "steps = 0",
            "steps = 10\nalign_warmup = 11",
            "lambda_ce = -1.0",
            "method = \"vat\"",
            "alphas = [0.0]",
            "alphas = [\"sometimes\"]",
            "target_marginal = [0.5, 0.5]",
        ] {
            assert!(ExperimentConfig::from_toml_str(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn method_and_alpha_parsing() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("none".parse::<Alpha>().unwrap(), Alpha(None));
        assert_eq!("0.5".parse::<Alpha>().unwrap(), Alpha(Some(0.5)));
        assert!("-2".parse::<Alpha>().is_err());
        assert_eq!(Alpha(Some(10.0)).to_string(), "10");
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
