//! Finding vocabulary and the boolean vectors indexed by it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered list of unique finding names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary(Vec<String>);

impl Vocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::invalid("finding vocabulary is empty"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(',') || n.trim() != n || n == "none" {
                return Err(Error::invalid(format!("invalid finding name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::invalid(format!("duplicate finding name {n:?}")));
            }
        }
        Ok(Self(names))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn name(&self, index: usize) -> &str {
        &self.0[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::invalid(format!("unknown finding {name:?}")))
    }

    pub fn empty_vector(&self) -> FindingVector {
        FindingVector::empty(self.len())
    }

    /// Vector with the named findings set.
    pub fn vector_of(&self, names: &[&str]) -> Result<FindingVector> {
        let mut v = self.empty_vector();
        for n in names {
            v.set(self.require(n)?, true);
        }
        Ok(v)
    }

    pub fn check(&self, v: &FindingVector) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} findings", self.len()),
                got: format!("{} findings", v.len()),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Vocabulary::new(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.0
    }
}

/// Presence flags, one per vocabulary entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FindingVector(Vec<bool>);

impl FindingVector {
    pub fn empty(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_bools(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    /// All `2^len` vectors, in binary counting order with index 0 as the low bit.
    pub fn enumerate_all(len: usize) -> impl Iterator<Item = FindingVector> {
        (0u64..(1u64 << len)).map(move |bits| Self((0..len).map(|i| bits >> i & 1 == 1).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.0[i] = on;
    }

    pub fn with(&self, i: usize, on: bool) -> Self {
        let mut v = self.clone();
        v.set(i, on);
        v
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn names<'v>(&self, vocab: &'v Vocabulary) -> Vec<&'v str> {
        self.active().map(|i| vocab.name(i)).collect()
    }
}

impl fmt::Display for FindingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_rejects_duplicates_and_empty() {
        assert!(Vocabulary::new(Vec::<String>::new()).is_err());
        assert!(Vocabulary::new(["a", "b", "a"]).is_err());
        assert!(Vocabulary::new(["none"]).is_err());
        assert!(Vocabulary::new(["a, b"]).is_err());
        assert_eq!(Vocabulary::new(["a", "b"]).unwrap().index_of("b"), Some(1));
    }

    #[test]
    fn enumerate_all_is_exhaustive() {
        let all: Vec<_> = FindingVector::enumerate_all(5).collect();
        assert_eq!(all.len(), 32);
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 32);
    }

    #[test]
    fn vocabulary_json_is_a_plain_list() {
        let v = Vocabulary::new(["x", "y"]).unwrap();
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"["x","y"]"#);
        assert!(serde_json::from_str::<Vocabulary>(r#"["x","x"]"#).is_err());
    }
}
