//! Weighted Gower dissimilarity between fixed-variable vectors, neighborhood
//! membership and calibration of the neighborhood radius.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Kind, MixedDataset, Role};

#[derive(Debug, Error, PartialEq)]
pub enum GowerError {
    #[error("continuous variable {0} has zero range but positive weight")]
    ZeroRange(usize),
    #[error("weights must be non-negative and sum to 1 (got sum {0})")]
    BadWeights(f64),
    #[error("d* must lie in [0, 1], got {0}")]
    BadDstar(f64),
    #[error("{weights} weights for {kinds} fixed variables")]
    LengthMismatch { weights: usize, kinds: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FixedKind {
    Ordinal { levels: u32 },
    Nominal { categories: u32 },
    Continuous { min: f64, max: f64 },
}

impl FixedKind {
    /// Distance between two values of this variable, in `[0, 1]`.
    pub fn component(&self, a: f64, b: f64) -> f64 {
        match *self {
            FixedKind::Ordinal { levels } => (a - b).abs() / f64::from(levels - 1),
            FixedKind::Nominal { .. } => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
            FixedKind::Continuous { min, max } => {
                let a = a.clamp(min, max);
                let b = b.clamp(min, max);
                (a - b).abs() / (max - min)
            }
        }
    }
}

/// Weights, per-variable metadata and radius of the fixed-variable distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    pub weights: Vec<f64>,
    pub kinds: Vec<FixedKind>,
    pub dstar: f64,
}

impl DistanceSpec {
    /// Equal weights over all fixed variables of the dataset, with observed
    /// ranges for continuous ones.
    pub fn equal_weights(data: &MixedDataset, dstar: f64) -> Self {
        let kinds = fixed_kinds(data);
        let q = kinds.len();
        DistanceSpec {
            weights: vec![1.0 / q as f64; q],
            kinds,
            dstar,
        }
    }

    pub fn with_weights(data: &MixedDataset, weights: Vec<f64>, dstar: f64) -> Self {
        DistanceSpec {
            weights,
            kinds: fixed_kinds(data),
            dstar,
        }
    }

    pub fn validate(&self) -> Result<(), GowerError> {
        if self.weights.len() != self.kinds.len() {
            return Err(GowerError::LengthMismatch {
                weights: self.weights.len(),
                kinds: self.kinds.len(),
            });
        }
        if !(0.0..=1.0).contains(&self.dstar) {
            return Err(GowerError::BadDstar(self.dstar));
        }
        let sum: f64 = self.weights.iter().sum();
        let nonneg = self.weights.iter().all(|w| *w >= 0.0 && w.is_finite());
        if !nonneg || (!self.weights.is_empty() && (sum - 1.0).abs() > 1e-12) {
            return Err(GowerError::BadWeights(sum));
        }
        for (j, (w, k)) in self.weights.iter().zip(&self.kinds).enumerate() {
            if let FixedKind::Continuous { min, max } = k {
                if *w > 0.0 && max <= min {
                    return Err(GowerError::ZeroRange(j));
                }
            }
        }
        Ok(())
    }

    /// Indices of variables that contribute to the distance.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(j, _)| j)
    }
}

/// Distance metadata for the fixed variables of a dataset, in schema order.
pub fn fixed_kinds(data: &MixedDataset) -> Vec<FixedKind> {
    data.schema()
        .variables
        .iter()
        .enumerate()
        .filter(|(_, v)| v.role == Role::Fixed)
        .map(|(j, v)| match v.kind {
            Kind::Ordinal { levels } => FixedKind::Ordinal { levels },
            Kind::Nominal { categories } => FixedKind::Nominal { categories },
            Kind::Continuous => {
                let (min, max) = data.observed_range(j).unwrap_or((0.0, 0.0));
                FixedKind::Continuous { min, max }
            }
        })
        .collect()
}

/// Weighted Gower distance. Variables with zero weight are skipped.
pub fn gower_distance(f: &[f64], g: &[f64], spec: &DistanceSpec) -> Result<f64, GowerError> {
    let mut d = 0.0;
    for j in spec.active() {
        let kind = &spec.kinds[j];
        if let FixedKind::Continuous { min, max } = kind {
            if max <= min {
                return Err(GowerError::ZeroRange(j));
            }
        }
        d += spec.weights[j] * kind.component(f[j], g[j]);
    }
    Ok(d.min(1.0))
}

/// Distance without the range check, for specs already validated.
#[inline]
pub(crate) fn distance_unchecked(f: &[f64], g: &[f64], spec: &DistanceSpec) -> f64 {
    let mut d = 0.0;
    for (j, w) in spec.weights.iter().enumerate() {
        if *w > 0.0 {
            d += w * spec.kinds[j].component(f[j], g[j]);
        }
    }
    d.min(1.0)
}

/// Membership test shared by every caller, so that boundary ties resolve
/// identically everywhere.
#[inline]
pub fn within(distance: f64, dstar: f64) -> bool {
    distance <= dstar
}

/// Global indices `h` (0-based, ascending) of locations within `d*` of `f`.
pub fn neighborhood(f: &[f64], locations: &[Vec<f64>], spec: &DistanceSpec) -> Vec<usize> {
    let mut out = Vec::new();
    neighborhood_into(f, locations, spec, &mut out);
    out
}

pub fn neighborhood_into(
    f: &[f64],
    locations: &[Vec<f64>],
    spec: &DistanceSpec,
    out: &mut Vec<usize>,
) {
    out.clear();
    for (h, loc) in locations.iter().enumerate() {
        if within(distance_unchecked(f, loc, spec), spec.dstar) {
            out.push(h);
        }
    }
}

/// Lower triangle of the pairwise distance matrix, row-major:
/// `(1,0), (2,0), (2,1), (3,0), ...`.
pub fn pairwise(rows: &[Vec<f64>], spec: &DistanceSpec) -> Vec<f64> {
    let n = rows.len();
    (1..n)
        .into_par_iter()
        .flat_map_iter(|i| (0..i).map(move |j| distance_unchecked(&rows[i], &rows[j], spec)))
        .collect()
}

fn fixed_rows(data: &MixedDataset) -> Vec<Vec<f64>> {
    (0..data.n_rows()).map(|i| data.fixed_vector(i)).collect()
}

/// Fraction of ordered pairs `(i, i')`, `i != i'`, within `d*`.
pub fn avg_neighbor_fraction(data: &MixedDataset, spec: &DistanceSpec) -> f64 {
    let d = pairwise(&fixed_rows(data), spec);
    fraction_within(&d, spec.dstar)
}

fn fraction_within(pairs: &[f64], dstar: f64) -> f64 {
    if pairs.is_empty() {
        return 1.0;
    }
    pairs.iter().filter(|d| within(**d, dstar)).count() as f64 / pairs.len() as f64
}

/// Smallest pairwise distance value `q` with `avg_neighbor_fraction(q) >= r`.
pub fn solve_dstar(data: &MixedDataset, spec: &DistanceSpec, target_r: f64) -> f64 {
    solve_dstar_from_pairs(pairwise(&fixed_rows(data), spec), target_r)
}

pub fn solve_dstar_from_pairs(mut pairs: Vec<f64>, target_r: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.sort_by(f64::total_cmp);
    let m = pairs.len();
    let c = ((target_r * m as f64).ceil() as usize).clamp(1, m);
    // Ties: the fraction at value pairs[c-1] counts every copy of it, which
    // can only exceed the target.
    pairs[c - 1]
}

const CACHE_MAGIC: &[u8; 8] = b"CMMDIST\0";
const CACHE_VERSION: u32 = 1;

/// SHA-256 over the fixed-variable rows and distance weights; used to key
/// cached pairwise-distance files.
pub fn content_hash(rows: &[Vec<f64>], spec: &DistanceSpec) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((rows.len() as u64).to_le_bytes());
    for row in rows {
        for v in row {
            hasher.update(v.to_le_bytes());
        }
    }
    for w in &spec.weights {
        hasher.update(w.to_le_bytes());
    }
    hasher.update(serde_json::to_vec(&spec.kinds).unwrap_or_default());
    hasher.finalize().into()
}

/// Pairwise distances for a dataset, read from `cache` when its key matches
/// and written there otherwise.
pub fn cached_pairwise(
    rows: &[Vec<f64>],
    spec: &DistanceSpec,
    cache: &Path,
) -> std::io::Result<Vec<f64>> {
    let key = content_hash(rows, spec);
    if let Ok(d) = read_cache(cache, &key, rows.len()) {
        return Ok(d);
    }
    let d = pairwise(rows, spec);
    write_cache(cache, &key, rows.len(), &d)?;
    Ok(d)
}

fn read_cache(path: &Path, key: &[u8; 32], n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, "stale distance cache");
    let header = 8 + 4 + 32 + 8;
    if buf.len() < header || &buf[..8] != CACHE_MAGIC {
        return Err(bad());
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    let n_stored = u64::from_le_bytes(buf[44..52].try_into().unwrap()) as usize;
    let m = n * n.saturating_sub(1) / 2;
    if version != CACHE_VERSION || &buf[12..44] != key || n_stored != n || buf.len() != header + 8 * m
    {
        return Err(bad());
    }
    Ok(buf[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_cache(path: &Path, key: &[u8; 32], n: usize, d: &[f64]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(CACHE_MAGIC)?;
    f.write_all(&CACHE_VERSION.to_le_bytes())?;
    f.write_all(key)?;
    f.write_all(&(n as u64).to_le_bytes())?;
    for v in d {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()
}
