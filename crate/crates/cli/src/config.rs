//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Blank lines and `#` comments are ignored. Every key must be known;
//! `train.epochs` is required. `--set key=value` overrides are applied on
//! top of the file.

use std::collections::BTreeMap;
use std::path::PathBuf;

use optshift_core::data::BlobSpec;
use optshift_core::hessian::{HessianConfig, Scope};
use optshift_core::net::LossKind;
use optshift_core::shift::{OsConfig, Sampling};
use optshift_core::train::{HessianTracking, Schedule, SosSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}{reason}", location(.line, .key))]
pub struct ConfigError {
    /// 1-based line in the config file; `None` for overrides and defaults.
    pub line: Option<usize>,
    pub key: Option<String>,
    pub reason: String,
}

fn location(line: &Option<usize>, key: &Option<String>) -> String {
    match (line, key) {
        (Some(l), Some(k)) => format!("line {l}: {k}: "),
        (Some(l), None) => format!("line {l}: "),
        (None, Some(k)) => format!("{k}: "),
        (None, None) => String::new(),
    }
}

enum Default {
    Required,
    Absent,
    Value(&'static str),
}

const KEYS: &[(&str, Default)] = &[
    ("seed", Default::Value("0")),
    ("data.source", Default::Value("blobs")),
    ("data.dir", Default::Absent),
    ("data.classes", Default::Value("10")),
    ("data.dim", Default::Value("64")),
    ("data.delta", Default::Value("3")),
    ("data.sigma", Default::Value("1")),
    ("data.train", Default::Value("5000")),
    ("data.test", Default::Value("1000")),
    ("data.seed", Default::Value("0")),
    ("model.hidden", Default::Value("128")),
    ("train.epochs", Default::Required),
    ("train.batch", Default::Value("128")),
    ("train.lr", Default::Value("0.1")),
    ("train.momentum", Default::Value("0.9")),
    ("train.nesterov", Default::Value("true")),
    ("train.weight_decay", Default::Value("1e-4")),
    ("train.schedule", Default::Value("step")),
    ("train.milestones", Default::Value("0.5,0.75")),
    ("train.factor", Default::Value("0.1")),
    ("train.loss", Default::Value("ce")),
    ("train.mixup", Default::Absent),
    ("train.sam", Default::Absent),
    ("sos.enabled", Default::Value("false")),
    ("sos.batch", Default::Value("32")),
    ("sos.every", Default::Value("1")),
    ("sos.sampling", Default::Value("uniform")),
    ("sos.pivot_tol", Default::Value("1e-10")),
    ("sos.max_logit_drift", Default::Value("1e-6")),
    ("hessian.every", Default::Value("0")),
    ("hessian.probes", Default::Value("100")),
    ("hessian.samples", Default::Value("256")),
    ("hessian.scope", Default::Value("all-parameters")),
    ("hessian.eps", Default::Value("1e-4")),
    ("hessian.power_iters", Default::Value("100")),
    ("hessian.power_tol", Default::Value("1e-4")),
    ("output.checkpoint_every", Default::Value("0")),
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: Option<usize>,
}

/// Raw key/value pairs with their source lines.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, Entry>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    line: Some(i + 1),
                    key: None,
                    reason: format!("expected `key = value`, found {line:?}"),
                });
            };
            let key = key.trim();
            if map.entries.contains_key(key) {
                return Err(ConfigError {
                    line: Some(i + 1),
                    key: Some(key.into()),
                    reason: "duplicate key".into(),
                });
            }
            map.insert(key, value.trim(), Some(i + 1))?;
        }
        Ok(map)
    }

    fn insert(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<(), ConfigError> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError {
                line,
                key: Some(key.into()),
                reason: "unknown key".into(),
            });
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line,
            },
        );
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError {
            line: None,
            key: None,
            reason: format!("override {assignment:?} is not key=value"),
        })?;
        self.insert(key.trim(), value.trim(), None)
    }

    /// Every known key with its effective value; absent optional keys are
    /// omitted.
    pub fn resolved(&self) -> Result<BTreeMap<String, String>, ConfigError> {
        let mut out = BTreeMap::new();
        for (key, default) in KEYS {
            match (self.entries.get(*key), default) {
                (Some(e), _) => {
                    out.insert(key.to_string(), e.value.clone());
                }
                (None, Default::Value(v)) => {
                    out.insert(key.to_string(), v.to_string());
                }
                (None, Default::Absent) => {}
                (None, Default::Required) => {
                    return Err(ConfigError {
                        line: None,
                        key: Some(key.to_string()),
                        reason: "missing required key".into(),
                    })
                }
            }
        }
        Ok(out)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let (value, line) = match self.entries.get(key) {
            Some(e) => (e.value.clone(), e.line),
            None => match KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| d) {
                Some(Default::Value(v)) => (v.to_string(), None),
                Some(Default::Required) => {
                    return Err(ConfigError {
                        line: None,
                        key: Some(key.into()),
                        reason: "missing required key".into(),
                    })
                }
                _ => return Ok(None),
            },
        };
        value.parse().map(Some).map_err(|e| ConfigError {
            line,
            key: Some(key.into()),
            reason: format!("cannot parse {value:?}: {e}"),
        })
    }

    fn req<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.expect("key has a default or is required"))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw: String = self.req(key)?;
        let line = self.entries.get(key).and_then(|e| e.line);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e| ConfigError {
                    line,
                    key: Some(key.into()),
                    reason: format!("cannot parse list item {s:?}: {e}"),
                })
            })
            .collect()
    }

    fn error(&self, key: &str, reason: String) -> ConfigError {
        ConfigError {
            line: self.entries.get(key).and_then(|e| e.line),
            key: Some(key.into()),
            reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs(BlobSpec),
    Mnist(PathBuf),
    Cifar10(PathBuf),
}

/// Size of the OS batch: a fixed count or the whole training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OsBatch {
    Rows(usize),
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// OS settings used by `os-apply` and by training when `sos.enabled`.
    pub os: OsConfig,
    pub os_batch: OsBatch,
    pub sos_every: usize,
    pub hessian: HessianConfig,
    pub hessian_samples: usize,
    pub checkpoint_every: usize,
    /// Effective value of every key, for the run manifest.
    pub resolved: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut map = ConfigMap::parse(text)?;
        for o in overrides {
            map.set(o)?;
        }
        Self::from_map(&map)
    }

    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        let resolved = map.resolved()?;
        let seed: u64 = map.req("seed")?;

        let source: String = map.req("data.source")?;
        let dir = || -> Result<PathBuf, ConfigError> {
            map.get::<String>("data.dir")?
                .map(PathBuf::from)
                .ok_or_else(|| map.error("data.dir", format!("required for data.source = {source}")))
        };
        let data = match source.as_str() {
            "blobs" => DataSource::Blobs(BlobSpec {
                classes: map.req("data.classes")?,
                dim: map.req("data.dim")?,
                delta: map.req("data.delta")?,
                sigma: map.req("data.sigma")?,
                train_size: map.req("data.train")?,
                test_size: map.req("data.test")?,
                seed: map.req("data.seed")?,
            }),
            "mnist" => DataSource::Mnist(dir()?),
            "cifar10" => DataSource::Cifar10(dir()?),
            other => return Err(map.error("data.source", format!("unknown source {other:?} (blobs, mnist, cifar10)"))),
        };

        let hidden: Vec<usize> = map.list("model.hidden")?;
        if hidden.contains(&0) {
            return Err(map.error("model.hidden", "widths must be positive".into()));
        }

        let schedule = match map.req::<String>("train.schedule")?.as_str() {
            "step" => Schedule::Step {
                milestones: map.list("train.milestones")?,
                factor: map.req("train.factor")?,
            },
            "quarters" => Schedule::quarters(),
            "cosine" => Schedule::Cosine,
            other => return Err(map.error("train.schedule", format!("unknown schedule {other:?} (step, quarters, cosine)"))),
        };

        let os_batch = match map.req::<String>("sos.batch")?.as_str() {
            "all" => OsBatch::All,
            s => OsBatch::Rows(s.parse().map_err(|e| map.error("sos.batch", format!("{e}")))?),
        };
        let os = OsConfig {
            batch_size: match os_batch {
                OsBatch::Rows(b) => b,
                OsBatch::All => 1,
            },
            pivot_tol: map.req("sos.pivot_tol")?,
            sampling: map
                .req::<String>("sos.sampling")?
                .parse::<Sampling>()
                .map_err(|e| map.error("sos.sampling", e))?,
            seed,
            max_logit_drift: map.req("sos.max_logit_drift")?,
        };
        os.validate().map_err(|e| map.error("sos.batch", e.to_string()))?;
        let sos_every: usize = map.req("sos.every")?;
        let sos_enabled: bool = map.req("sos.enabled")?;
        if sos_enabled && os_batch == OsBatch::All {
            return Err(map.error("sos.batch", "`all` is only meaningful for os-apply".into()));
        }

        let hessian_every: usize = map.req("hessian.every")?;
        let hessian = HessianConfig {
            probes: map.req("hessian.probes")?,
            seed,
            eps: map.req("hessian.eps")?,
            power_iters: map.req("hessian.power_iters")?,
            power_tol: map.req("hessian.power_tol")?,
            scope: map
                .req::<String>("hessian.scope")?
                .parse::<Scope>()
                .map_err(|e| map.error("hessian.scope", e))?,
        };
        if !(hessian.eps > 0.0) {
            return Err(map.error("hessian.eps", "must be positive".into()));
        }
        let hessian_samples: usize = map.req("hessian.samples")?;

        let train = TrainConfig {
            epochs: map.req("train.epochs")?,
            batch_size: map.req("train.batch")?,
            lr: map.req("train.lr")?,
            momentum: map.req("train.momentum")?,
            nesterov: map.req("train.nesterov")?,
            weight_decay: map.req("train.weight_decay")?,
            schedule,
            seed,
            loss: map
                .req::<String>("train.loss")?
                .parse::<LossKind>()
                .map_err(|e| map.error("train.loss", e))?,
            mixup_alpha: map.get("train.mixup")?,
            sam_rho: map.get("train.sam")?,
            sos: sos_enabled.then(|| SosSchedule {
                os: os.clone(),
                every: sos_every,
            }),
            hessian: (hessian_every > 0).then(|| HessianTracking {
                every: hessian_every,
                probes: hessian.probes,
                samples: hessian_samples,
                seed,
            }),
        };
        train.validate().map_err(|e| ConfigError {
            line: None,
            key: None,
            reason: e.to_string(),
        })?;

        Ok(RunConfig {
            seed,
            data,
            hidden,
            train,
            os,
            os_batch,
            sos_every,
            hessian,
            hessian_samples,
            checkpoint_every: map.req("output.checkpoint_every")?,
            resolved,
        })
    }

    /// The same configuration with `seed` replaced everywhere it is used.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c.os.seed = seed;
        c.hessian.seed = seed;
        if let Some(s) = c.train.sos.as_mut() {
            s.os.seed = seed;
        }
        if let Some(h) = c.train.hessian.as_mut() {
            h.seed = seed;
        }
        c.resolved.insert("seed".into(), seed.to_string());
        c
    }

    /// Enables or disables SOS during training with the given batch size.
    pub fn with_sos(&self, batch: Option<usize>) -> Self {
        let mut c = self.clone();
        match batch {
            Some(b) => {
                c.os.batch_size = b;
                c.os_batch = OsBatch::Rows(b);
                c.train.sos = Some(SosSchedule {
                    os: c.os.clone(),
                    every: c.sos_every,
                });
                c.resolved.insert("sos.enabled".into(), "true".into());
                c.resolved.insert("sos.batch".into(), b.to_string());
            }
            None => {
                c.train.sos = None;
                c.resolved.insert("sos.enabled".into(), "false".into());
            }
        }
        c
    }

    pub fn with_sam(&self, rho: Option<f64>) -> Self {
        let mut c = self.clone();
        c.train.sam_rho = rho;
        match rho {
            Some(r) => c.resolved.insert("train.sam".into(), r.to_string()),
            None => c.resolved.remove("train.sam"),
        };
        c
    }

    /// `key = value` lines of the resolved configuration.
    pub fn to_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
