//! Flat parameter vectors and the group layouts used for per-group
//! gradient/velocity alignment.
//!
//! Everything is `f64`. Groups are contiguous index ranges into the flat
//! vector, so grouped updates operate in place without copying.

use std::ops::{Deref, DerefMut, Range};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights, velocities and gradients all live in one of these.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        ParamVector(vec![value; len])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        ParamVector(data)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn full_range(&self) -> Range<usize> {
        0..self.0.len()
    }

    /// Copies `other` into `self` without reallocating.
    pub fn copy_from(&mut self, other: &ParamVector) {
        self.0.copy_from_slice(&other.0);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        sq_norm_slice(&self.0)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

#[inline]
pub(crate) fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sq_norm_slice(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn check_group(len: usize, group: &Range<usize>) -> Result<()> {
    if group.start > group.end || group.end > len {
        return Err(Error::contract(format!(
            "group {:?} out of bounds for vector of length {len}",
            group
        )));
    }
    Ok(())
}

/// Inner product of `a` and `b` restricted to `group`.
pub fn dot(a: &ParamVector, b: &ParamVector, group: Range<usize>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "length mismatch in dot: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    check_group(a.len(), &group)?;
    Ok(dot_slice(&a[group.clone()], &b[group]))
}

/// Euclidean norm of `a` over `group`. An all-zero group gives exactly 0.
pub fn norm(a: &ParamVector, group: Range<usize>) -> Result<f64> {
    check_group(a.len(), &group)?;
    Ok(sq_norm_slice(&a[group]).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    Global,
    PerTensor,
    PerFilter,
    PerElement,
}

impl GroupMode {
    pub const ALL: [GroupMode; 4] = [
        GroupMode::Global,
        GroupMode::PerTensor,
        GroupMode::PerFilter,
        GroupMode::PerElement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupMode::Global => "global",
            GroupMode::PerTensor => "per_tensor",
            GroupMode::PerFilter => "per_filter",
            GroupMode::PerElement => "per_element",
        }
    }
}

impl std::str::FromStr for GroupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "global" => Ok(GroupMode::Global),
            "pertensor" | "tensor" => Ok(GroupMode::PerTensor),
            "perfilter" | "filter" => Ok(GroupMode::PerFilter),
            "perelement" | "element" | "elementwise" => Ok(GroupMode::PerElement),
            _ => Err(Error::config(
                "grouping",
                format!("unknown grouping `{s}` (valid: global, per_tensor, per_filter, per_element)"),
            )),
        }
    }
}

/// An exact partition of `[0, len)` into contiguous, ordered ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    mode: GroupMode,
    len: usize,
    groups: Vec<Range<usize>>,
}

impl GroupSpec {
    pub fn global(len: usize) -> Self {
        GroupSpec {
            mode: GroupMode::Global,
            len,
            groups: std::iter::once(0..len).collect(),
        }
    }

    pub fn per_element(len: usize) -> Self {
        GroupSpec {
            mode: GroupMode::PerElement,
            len,
            groups: (0..len).map(|i| i..i + 1).collect(),
        }
    }

    /// Builds a spec from explicit ranges, checking that they partition `[0, len)`.
    pub fn from_ranges(mode: GroupMode, len: usize, groups: Vec<Range<usize>>) -> Result<Self> {
        let spec = GroupSpec { mode, len, groups };
        spec.validate()?;
        Ok(spec)
    }

    /// Global/PerElement for a flat vector with no tensor structure.
    pub fn for_flat(mode: GroupMode, len: usize) -> Result<Self> {
        match mode {
            GroupMode::Global => Ok(GroupSpec::global(len)),
            GroupMode::PerElement => Ok(GroupSpec::per_element(len)),
            other => Err(Error::config(
                "grouping",
                format!(
                    "`{}` needs tensor structure; flat problems support global or per_element",
                    other.name()
                ),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0usize;
        for (i, g) in self.groups.iter().enumerate() {
            if g.start != next || g.end <= g.start {
                return Err(Error::contract(format!(
                    "group {i} ({:?}) breaks the partition at index {next}",
                    g
                )));
            }
            next = g.end;
        }
        if next != self.len {
            return Err(Error::contract(format!(
                "groups cover [0, {next}) but the vector has length {}",
                self.len
            )));
        }
        match self.mode {
            GroupMode::Global if self.groups.len() != 1 => {
                Err(Error::contract("global mode requires exactly one group"))
            }
            GroupMode::PerElement if self.groups.len() != self.len => {
                Err(Error::contract("per-element mode requires singleton groups"))
            }
            _ => Ok(()),
        }
    }

    pub fn mode(&self) -> GroupMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn iter(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.groups.iter().cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&pv(&[1.0, 2.0]), &pv(&[3.0, 4.0]), 0..2).unwrap(), 11.0);
        assert_eq!(dot(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0]), 0..2).unwrap(), 0.0);
        assert_eq!(
            dot(&pv(&[1.0, 2.0, 3.0]), &pv(&[1.0, 1.0, 1.0]), 1..3).unwrap(),
            5.0
        );
    }

    #[test]
    fn dot_length_mismatch() {
        let err = dot(&pv(&[1.0, 2.0]), &pv(&[1.0]), 0..1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn group_out_of_bounds() {
        assert!(norm(&pv(&[1.0]), 0..2).is_err());
        assert!(dot(&pv(&[1.0]), &pv(&[1.0]), 0..3).is_err());
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm(&pv(&[3.0, 4.0]), 0..2).unwrap(), 5.0);
        assert_eq!(norm(&pv(&[0.0, 0.0, 0.0]), 0..3).unwrap(), 0.0);
        assert_eq!(norm(&pv(&[1.0, 1.0, 1.0, 1.0]), 0..4).unwrap(), 2.0);
    }

    #[test]
    fn partition_validation() {
        assert!(GroupSpec::from_ranges(GroupMode::PerTensor, 5, vec![0..2, 2..5]).is_ok());
        // gap
        assert!(GroupSpec::from_ranges(GroupMode::PerTensor, 5, vec![0..2, 3..5]).is_err());
        // overlap
        assert!(GroupSpec::from_ranges(GroupMode::PerTensor, 5, vec![0..3, 2..5]).is_err());
        // short cover
        assert!(GroupSpec::from_ranges(GroupMode::PerTensor, 5, vec![0..2, 2..4]).is_err());
        // global must be one group
        assert!(GroupSpec::from_ranges(GroupMode::Global, 4, vec![0..2, 2..4]).is_err());
        assert_eq!(GroupSpec::global(7).num_groups(), 1);
        assert_eq!(GroupSpec::per_element(7).num_groups(), 7);
    }

    #[test]
    fn grouping_names_parse() {
        for mode in GroupMode::ALL {
            assert_eq!(mode.name().parse::<GroupMode>().unwrap(), mode);
        }
        assert!("rows".parse::<GroupMode>().is_err());
    }

    proptest! {
        #[test]
        fn every_index_in_exactly_one_group(len in 1usize..200, cuts in proptest::collection::vec(1usize..200, 0..10)) {
            let mut bounds: Vec<usize> = cuts.into_iter().filter(|&c| c < len).collect();
            bounds.sort_unstable();
            bounds.dedup();
            let mut ranges = Vec::new();
            let mut start = 0;
            for b in bounds.into_iter().chain(std::iter::once(len)) {
                ranges.push(start..b);
                start = b;
            }
            let spec = GroupSpec::from_ranges(GroupMode::PerTensor, len, ranges).unwrap();
            let mut hits = vec![0u32; len];
            for g in spec.iter() {
                for i in g {
                    hits[i] += 1;
                }
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }

        #[test]
        fn dot_self_matches_norm_squared(v in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let a = ParamVector::from_vec(v);
            let r = a.full_range();
            let d = dot(&a, &a, r.clone()).unwrap();
            let n = norm(&a, r).unwrap();
            prop_assert!((d - n * n).abs() <= 1e-12 * d.max(f64::MIN_POSITIVE));
        }
    }
}
