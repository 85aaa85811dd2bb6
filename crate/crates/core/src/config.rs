//! Run configuration: TOML (or JSON) file, defaults, then flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::egroi::EgroiConfig;
use crate::error::{Error, Result};
use crate::evalharness::{AnswerScheme, Template};

pub const DEFAULT_TOKEN_ENV: &str = "TRIAD_API_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub kind: ClientKind,
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
    pub in_flight: usize,
    pub seed: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            kind: ClientKind::Stub,
            endpoint: None,
            model: "default".into(),
            token_env: DEFAULT_TOKEN_ENV.into(),
            max_attempts: 3,
            backoff_ms: 500,
            timeout_s: 120,
            in_flight: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub run_dir: PathBuf,
    pub run_name: String,
    pub egroi: EgroiConfig,
    pub template: Template,
    pub scheme: AnswerScheme,
    pub mfg_store: Option<PathBuf>,
    pub hints: Option<PathBuf>,
    pub client: ClientConfig,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("."),
            run_dir: PathBuf::from("run"),
            run_name: "default".into(),
            egroi: EgroiConfig::default(),
            template: Template::General,
            scheme: AnswerScheme::OptionLetter,
            mfg_store: None,
            hints: None,
            client: ClientConfig::default(),
            workers: 1,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub dataset_root: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub run_name: Option<String>,
    pub threshold: Option<f64>,
    pub box_side: Option<usize>,
    pub iou_merge: Option<f64>,
    pub cap: Option<usize>,
    pub pool: Option<usize>,
    pub budget: Option<usize>,
    pub seed: Option<u64>,
    pub template: Option<Template>,
    pub scheme: Option<AnswerScheme>,
    pub mfg_store: Option<PathBuf>,
    pub hints: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub client_kind: Option<ClientKind>,
    pub in_flight: Option<usize>,
    pub workers: Option<usize>,
}

macro_rules! set {
    ($src:expr => $($dst:expr),+) => {
        if let Some(v) = $src.clone() {
            $( $dst = v.clone().into(); )+
        }
    };
}

impl RunConfig {
    /// Parses a config document; `.json` files are read as JSON, anything
    /// else as TOML. Errors name the offending key path.
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let result = if json {
            let mut de = serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(&mut de).map_err(|e| (e.path().to_string(), e.into_inner().to_string()))
        } else {
            let de = toml::Deserializer::new(text);
            serde_path_to_error::deserialize(de).map_err(|e| (e.path().to_string(), e.into_inner().message().to_string()))
        };
        result.map_err(|(path, message)| Error::config(key_path(&path, &message), message))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json)
    }

    /// Defaults, then the optional file, then overrides; validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        set!(o.dataset_root => self.dataset_root);
        set!(o.run_dir => self.run_dir);
        set!(o.run_name => self.run_name);
        set!(o.threshold => self.egroi.threshold);
        set!(o.box_side => self.egroi.box_side);
        set!(o.iou_merge => self.egroi.iou_merge);
        set!(o.cap => self.egroi.cap);
        set!(o.pool => self.egroi.pool);
        set!(o.budget => self.egroi.budget);
        set!(o.seed => self.egroi.seed, self.client.seed);
        set!(o.template => self.template);
        set!(o.scheme => self.scheme);
        if let Some(v) = &o.mfg_store {
            self.mfg_store = Some(v.clone());
        }
        if let Some(v) = &o.hints {
            self.hints = Some(v.clone());
        }
        if let Some(v) = &o.endpoint {
            self.client.endpoint = Some(v.clone());
        }
        set!(o.model => self.client.model);
        set!(o.client_kind => self.client.kind);
        set!(o.in_flight => self.client.in_flight);
        set!(o.workers => self.workers);
    }

    pub fn validate(&self) -> Result<()> {
        self.egroi.validate()?;
        let name = &self.run_name;
        if name.is_empty()
            || name == "."
            || name == ".."
            || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(Error::config("run_name", format!("`{name}` is not a plain directory name")));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.client.in_flight == 0 {
            return Err(Error::config("client.in_flight", "must be at least 1"));
        }
        if self.client.max_attempts == 0 {
            return Err(Error::config("client.max_attempts", "must be at least 1"));
        }
        if self.client.kind == ClientKind::Http && self.client.endpoint.is_none() {
            return Err(Error::config("client.endpoint", "required when client.kind = \"http\""));
        }
        Ok(())
    }

    /// `<run_dir>/<run_name>`.
    pub fn run_root(&self) -> PathBuf {
        self.run_dir.join(&self.run_name)
    }
}

/// Reported path of a failed key; unknown keys at the top level come back
/// as `.` and are recovered from the message.
fn key_path(path: &str, message: &str) -> String {
    if path != "." {
        return path.to_string();
    }
    message
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next())
        .unwrap_or(".")
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("", false).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.egroi.threshold, 0.9);
        assert_eq!(cfg.egroi.cap, 4);
        assert_eq!(RunConfig::parse("{}", true).unwrap(), cfg);
    }

    #[test]
    fn flags_beat_file() {
        let mut cfg = RunConfig::parse("[egroi]\nthreshold = 0.9\n", false).unwrap();
        cfg.apply(&Overrides {
            threshold: Some(0.8),
            ..Default::default()
        });
        assert_eq!(cfg.egroi.threshold, 0.8);
        assert_eq!(cfg.egroi.box_side, 336);
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::parse("[egroi]\nthreshhold = 0.5\n", false) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "egroi.threshhold"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("bogus = 1\n", false) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse(r#"{"client": {"kind": "stub", "nope": 1}}"#, true) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "client.nope"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_mismatch_is_named() {
        match RunConfig::parse("[egroi]\nbox_side = \"big\"\n", false) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "egroi.box_side"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.egroi.threshold = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let mut cfg = RunConfig::default();
        cfg.run_name = "../escape".into();
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "run_name"));
        let mut cfg = RunConfig::default();
        cfg.client.kind = ClientKind::Http;
        assert!(cfg.validate().is_err());
    }
}
