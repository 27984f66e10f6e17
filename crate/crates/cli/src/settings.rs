//! Flat `key = value` config files. Command-line flags take precedence;
//! every key in the file must be consumed by the running command.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, (String, usize)>,
    used: Vec<String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Settings, String> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            let (k, v) = (k.trim(), v.trim().trim_matches('"'));
            if k.is_empty() {
                return Err(format!("line {}: empty key", n + 1));
            }
            if values
                .insert(k.to_string(), (v.to_string(), n + 1))
                .is_some()
            {
                return Err(format!("line {}: duplicate key `{k}`", n + 1));
            }
        }
        Ok(Settings {
            values,
            used: Vec::new(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Settings, Failure> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Settings::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    /// The flag if given, else the file value, else `default`.
    pub fn get<T: FromStr>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, Failure> {
        Ok(self.opt(key, flag)?.unwrap_or(default))
    }

    pub fn opt<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure> {
        self.used.push(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                Failure::Config(format!(
                    "config line {line}: invalid value `{v}` for `{key}`"
                ))
            }),
        }
    }

    pub fn flag(&mut self, key: &str, flag: bool) -> Result<bool, Failure> {
        Ok(flag || self.get(key, None, false)?)
    }

    /// Fails on the first key no option asked for.
    pub fn finish(&self) -> Result<(), Failure> {
        match self.values.iter().find(|(k, _)| !self.used.contains(k)) {
            Some((k, (_, line))) => Err(Failure::Config(format!(
                "config line {line}: unknown key `{k}`"
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let mut s = Settings::parse("seed = 5\n# note\nrho = 8.5\n").unwrap();
        assert_eq!(s.get("seed", Some(9u64), 0).unwrap(), 9);
        assert_eq!(s.get("rho", None, 0.0f64).unwrap(), 8.5);
        assert!(s.finish().is_ok());
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        let mut s = Settings::parse("seed = 5\nsede = 6\n").unwrap();
        s.get("seed", None, 0u64).unwrap();
        assert!(matches!(s.finish(), Err(Failure::Config(m)) if m.contains("sede")));
        assert!(Settings::parse("seed 5").is_err());
        assert!(Settings::parse("a = 1\na = 2").is_err());
        let mut s = Settings::parse("steps = many").unwrap();
        assert!(s.get("steps", None, 0u64).is_err());
    }
}
