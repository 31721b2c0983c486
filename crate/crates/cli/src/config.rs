//! TOML run configuration. Path keys sit next to the command's own keys in
//! one flat table; anything unrecognised is rejected.

use std::path::{Path, PathBuf};

use dkinet_core::synth::{CODE_MAP_FILE, DDI_FILE, EHR_FILE, TRIPLES_FILE};
use dkinet_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::DataArgs;

const PATH_KEYS: [&str; 6] = ["data", "ehr", "triples", "code_map", "ddi", "out"];

/// File locations, from the config file or the command line.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PathKeys {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ehr: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triples: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code_map: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ddi: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// For commands without settings of their own.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoSettings {}

fn config_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

/// Reads `path` into path keys and command settings. Relative paths in the
/// file are taken relative to the file's directory. Without a file both
/// halves are defaults.
pub fn read<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(PathKeys, T)> {
    let Some(path) = path else {
        return Ok((PathKeys::default(), T::default()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut table: toml::Table = text.parse().map_err(|e| config_error(path, e))?;
    let mut paths = toml::Table::new();
    for key in PATH_KEYS {
        if let Some(v) = table.remove(key) {
            paths.insert(key.into(), v);
        }
    }
    let mut keys: PathKeys = toml::Value::Table(paths).try_into().map_err(|e| config_error(path, e))?;
    let settings: T = toml::Value::Table(table).try_into().map_err(|e| config_error(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [
        &mut keys.data,
        &mut keys.ehr,
        &mut keys.triples,
        &mut keys.code_map,
        &mut keys.ddi,
        &mut keys.out,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok((keys, settings))
}

/// Input files after applying flags over the config file over the data
/// directory's default names.
#[derive(Clone, Debug)]
pub struct DataFiles {
    ehr: Option<PathBuf>,
    pub triples: PathBuf,
    pub code_map: PathBuf,
    pub ddi: Option<PathBuf>,
}

impl DataFiles {
    pub fn resolve(args: &DataArgs, file: &PathKeys) -> Result<Self> {
        let data = args.data.clone().or_else(|| file.data.clone());
        let pick = |flag: &Option<PathBuf>, key: &Option<PathBuf>, default: &str, what: &str| {
            flag.clone()
                .or_else(|| key.clone())
                .or_else(|| data.as_ref().map(|d| d.join(default)))
                .ok_or_else(|| Error::Config(format!("no {what} file given; pass --{what} or --data")))
        };
        let ddi = if args.no_ddi {
            None
        } else {
            match args.ddi.clone().or_else(|| file.ddi.clone()) {
                Some(p) => Some(p),
                // the data directory's DDI file is optional
                None => data.as_ref().map(|d| d.join(DDI_FILE)).filter(|p| p.exists()),
            }
        };
        Ok(DataFiles {
            ehr: pick(&args.ehr, &file.ehr, EHR_FILE, "ehr").ok(),
            triples: pick(&args.triples, &file.triples, TRIPLES_FILE, "triples")?,
            code_map: pick(&args.code_map, &file.code_map, CODE_MAP_FILE, "code-map")?,
            ddi,
        })
    }

    pub fn ehr(&self) -> Result<&Path> {
        self.ehr
            .as_deref()
            .ok_or_else(|| Error::Config("no ehr file given; pass --ehr or --data".into()))
    }

    /// Absolute paths, so an echoed config works from any directory.
    pub fn keys(&self, out: &Path) -> PathKeys {
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        PathKeys {
            data: None,
            ehr: self.ehr.as_deref().map(abs),
            triples: Some(abs(&self.triples)),
            code_map: Some(abs(&self.code_map)),
            ddi: self.ddi.as_deref().map(abs),
            out: Some(abs(out)),
        }
    }
}

/// The merged configuration as written next to a run's outputs.
#[derive(Serialize)]
pub struct Effective<'a, T: Serialize> {
    #[serde(flatten)]
    pub paths: PathKeys,
    #[serde(flatten)]
    pub settings: &'a T,
}

impl<T: Serialize> Effective<'_, T> {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }
}
