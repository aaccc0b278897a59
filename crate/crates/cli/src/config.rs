//! Flat `key = value` settings with environment overrides.
//!
//! Lookup order for every key: command-line flag, then `NBNN_<KEY>`, then the
//! config file, then the built-in default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "apex_angle",
    "bits",
    "data",
    "leg",
    "methods",
    "n_d",
    "n_database",
    "n_p",
    "n_queries",
    "no_overlap_queries",
    "out",
    "overlap_mode",
    "pca_dim",
    "probe_radius",
    "ratio",
    "scope",
    "seed",
    "t_theta",
    "tasks_per_range",
    "threads",
];

pub const ENV_PREFIX: &str = "NBNN_";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    file: BTreeMap<String, String>,
    env: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('-', "_")
}

fn check_key(key: &str, origin: &str) -> Result<(), CliError> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("unknown setting {key:?} in {origin}")))
    }
}

/// Parses the flat config format. Blank lines and `#` comments are ignored.
pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", n + 1)))?;
        let key = normalize_key(k);
        check_key(&key, origin)?;
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("{origin}:{}: {key} set twice", n + 1)));
        }
    }
    Ok(out)
}

impl Settings {
    pub fn new(file: BTreeMap<String, String>, env: impl IntoIterator<Item = (String, String)>) -> Self {
        let env = env
            .into_iter()
            .filter_map(|(k, v)| {
                let key = normalize_key(k.strip_prefix(ENV_PREFIX)?);
                KEYS.contains(&key.as_str()).then_some((key, v))
            })
            .collect();
        Self { file, env }
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        Ok(Self::new(file, std::env::vars()))
    }

    fn raw(&self, key: &str) -> Option<(&str, String)> {
        debug_assert!(KEYS.contains(&key), "{key} is not a known setting");
        if let Some(v) = self.env.get(key) {
            return Some((v, format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())));
        }
        self.file.get(key).map(|v| (v.as_str(), format!("config key {key}")))
    }

    /// The flag if given, else the environment or file value.
    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.raw(key) {
            Some((v, origin)) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("{origin}: cannot parse {v:?}: {e}"))),
            None => Ok(None),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("--{} is required", key.replace('_', "-"))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(file: &str, env: &[(&str, &str)]) -> Settings {
        Settings::new(
            parse_config(file, "test").unwrap(),
            env.iter().map(|(k, v)| (k.to_string(), v.to_string())),
        )
    }

    #[test]
    fn precedence() {
        let s = settings("seed = 3\nn_d = 50\n", &[("NBNN_SEED", "4"), ("HOME", "/x")]);
        assert_eq!(s.get::<u64>("seed", Some(5)).unwrap(), Some(5));
        assert_eq!(s.get::<u64>("seed", None).unwrap(), Some(4));
        assert_eq!(s.get::<usize>("n_d", None).unwrap(), Some(50));
        assert_eq!(s.get_or::<usize>("n_p", None, 1).unwrap(), 1);
    }

    #[test]
    fn format() {
        let m = parse_config("# comment\n\n  N-D=20 \nout = a b\n", "t").unwrap();
        assert_eq!(m["n_d"], "20");
        assert_eq!(m["out"], "a b");
        assert!(parse_config("seed 3", "t").is_err());
        assert!(parse_config("colour = red", "t").is_err());
        assert!(parse_config("seed = 1\nseed = 2", "t").is_err());
    }

    #[test]
    fn bad_value_is_usage_error() {
        let s = settings("seed = many\n", &[]);
        assert!(matches!(s.get::<u64>("seed", None), Err(CliError::Usage(_))));
        assert!(matches!(s.require::<u64>("bits", None), Err(CliError::Usage(_))));
    }
}
