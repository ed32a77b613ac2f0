//! Flat `key=value` config files merged under command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sparse_npls::io::parse_key_values;
use sparse_npls::stream::lambda_range;
use sparse_npls::{GridPoint, NormOrder};

use crate::CliError;

/// Values from an optional config file. Flags win over file values, file
/// values win over defaults.
pub struct Settings {
    path: Option<PathBuf>,
    file: BTreeMap<String, String>,
    seen: BTreeSet<String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::io(format!("config {}: {e}", p.display())))?;
            let raw = parse_key_values(&text).map_err(|e| CliError::invalid(format!("config {}: {e}", p.display())))?;
            for (k, v) in raw {
                file.insert(k.replace('-', "_"), v);
            }
        }
        Ok(Self {
            path: path.map(Path::to_path_buf),
            file,
            seen: BTreeSet::new(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Raw text for `key`, flag first.
    pub fn raw(&mut self, key: &str, flag: Option<&str>) -> Option<String> {
        self.seen.insert(key.to_string());
        flag.map(str::to_string).or_else(|| self.file.get(key).cloned())
    }

    pub fn parse<T>(&mut self, key: &str, flag: Option<&str>, parse: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, CliError> {
        match self.raw(key, flag) {
            None => Ok(None),
            Some(text) => parse(&text).map(Some).map_err(|e| CliError::invalid(format!("{key}: {e}"))),
        }
    }

    pub fn value<T: FromStr>(&mut self, key: &str, flag: Option<&str>) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key, flag, |s| s.trim().parse::<T>().map_err(|e| format!("{s:?}: {e}")))
    }

    pub fn required<T: FromStr>(&mut self, key: &str, flag: Option<&str>) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.value(key, flag)?
            .ok_or_else(|| CliError::invalid(format!("{key}: required (flag or config key)")))
    }

    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        if flag {
            self.seen.insert(key.to_string());
            return Ok(true);
        }
        Ok(self.value::<bool>(key, None)?.unwrap_or(false))
    }

    /// Rejects config keys no command option consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.seen.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::invalid(format!("config: unknown keys {}", unknown.join(", "))))
        }
    }
}

pub fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

/// `l1:0..1:0.1;l0:0,0.05` → grid points in the given order.
pub fn parse_grid(text: &str) -> Result<Vec<GridPoint>, String> {
    let mut grid = Vec::new();
    for entry in text.split(';').map(str::trim).filter(|e| !e.is_empty()) {
        let (order, values) = entry
            .split_once(':')
            .ok_or_else(|| format!("{entry:?}: expected NORM:VALUES, e.g. l1:0,0.1 or l1:0..1:0.1"))?;
        let order: NormOrder = order
            .parse()
            .map_err(|_| format!("{order:?}: norm must be l0, l0.5 or l1"))?;
        let lambdas = if let Some((range, step)) = values.split_once("..").map(|(lo, rest)| (lo, rest.split_once(':'))) {
            let (hi, step) = step.ok_or_else(|| format!("{values:?}: range needs a step, e.g. 0..1:0.1"))?;
            let lo: f64 = range.trim().parse().map_err(|e| format!("{range:?}: {e}"))?;
            let hi: f64 = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
            let step: f64 = step.trim().parse().map_err(|e| format!("{step:?}: {e}"))?;
            if !(step > 0.0) || hi < lo {
                return Err(format!("{values:?}: need lo <= hi and step > 0"));
            }
            lambda_range(lo, hi, step)
        } else {
            parse_list::<f64>(values)?
        };
        for lambda in lambdas {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(format!("lambda {lambda} outside [0, 1]"));
            }
            grid.push(GridPoint { order, lambda });
        }
    }
    if grid.is_empty() {
        return Err("empty grid".into());
    }
    Ok(grid)
}

pub fn grid_label(p: &GridPoint) -> String {
    format!("{}:{}", p.order, p.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        let g = parse_grid("l1:0..0.2:0.1; l0:0.5,1").unwrap();
        let labels: Vec<String> = g.iter().map(grid_label).collect();
        assert_eq!(labels, ["l1:0", "l1:0.1", "l1:0.2", "l0:0.5", "l0:1"]);
        assert!(parse_grid("l2:0.1").is_err());
        assert!(parse_grid("l1:1.5").is_err());
        assert!(parse_grid("l1:0..1").is_err());
        assert!(parse_grid("").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# sweep\nf-max = 3\nmu=0.9\n").unwrap();
        let mut s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.value::<usize>("f_max", Some("7")).unwrap(), Some(7));
        assert_eq!(s.value::<f64>("mu", None).unwrap(), Some(0.9));
        assert_eq!(s.value::<u64>("seed", None).unwrap(), None);
        s.finish().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "fmax=3\n").unwrap();
        let s = Settings::load(Some(&path)).unwrap();
        assert!(s.finish().unwrap_err().message.contains("fmax"));
    }
}
