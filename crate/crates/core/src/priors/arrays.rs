//! Versioned container of named numeric arrays used by the prior files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRIOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArrays {
    pub format_version: u32,
    pub kind: String,
    pub arrays: BTreeMap<String, Array>,
}

impl NamedArrays {
    pub fn new(kind: &str) -> Self {
        NamedArrays {
            format_version: PRIOR_FORMAT_VERSION,
            kind: kind.to_string(),
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.into(), Array { shape, data });
    }

    pub fn scalar(&mut self, name: &str, value: f64) {
        self.insert(name, vec![], vec![value]);
    }

    /// Fetches an array and checks its shape; `None` entries in `shape` match any extent.
    pub fn get(&self, name: &str, shape: &[Option<usize>]) -> Result<&Array> {
        let a = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("{} prior is missing array `{name}`", self.kind)))?;
        let ok = a.shape.len() == shape.len()
            && a.shape.iter().zip(shape).all(|(&s, want)| want.is_none_or(|w| w == s))
            && a.shape.iter().product::<usize>() == a.data.len();
        if !ok {
            return Err(Error::Format(format!(
                "array `{name}` has shape {:?}, expected {shape:?}",
                a.shape
            )));
        }
        if a.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("array `{name}` has non-finite entries")));
        }
        Ok(a)
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name, &[])?.data[0])
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.format_version != PRIOR_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported prior format_version {}",
                self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} prior, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
