//! Additive decompositions: coordinate groups, projections, and random
//! partition sampling.
//!
//! Coordinates are 1-based in the public representation (and in the
//! JSON form `[[1,2],[3]]`); group indices in the API are 0-based.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// A partition of `{1..p}` into disjoint coordinate groups.
///
/// Groups are stored in ascending order of their smallest coordinate,
/// with coordinates ascending within each group; this stored order is
/// the processing order used by the samplers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct AdditiveStructure {
    groups: Vec<Vec<usize>>,
    p: usize,
}

/// A partition invariant that failed validation.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StructureViolation {
    #[error("no groups")]
    Empty,
    #[error("group {group} is empty")]
    EmptyGroup { group: usize },
    #[error("coordinate {coordinate} out of range 1..={p}")]
    OutOfRange { coordinate: usize, p: usize },
    #[error("overlap at coordinate {coordinate}")]
    Overlap { coordinate: usize },
    #[error("coordinate {coordinate} uncovered")]
    Uncovered { coordinate: usize },
}

fn check_partition(groups: &[Vec<usize>], p: usize) -> std::result::Result<(), StructureViolation> {
    if groups.is_empty() {
        return Err(StructureViolation::Empty);
    }
    let mut seen = vec![false; p];
    for (gi, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(StructureViolation::EmptyGroup { group: gi });
        }
        for &c in g {
            if c == 0 || c > p {
                return Err(StructureViolation::OutOfRange { coordinate: c, p });
            }
            if seen[c - 1] {
                return Err(StructureViolation::Overlap { coordinate: c });
            }
            seen[c - 1] = true;
        }
    }
    for (i, covered) in seen.iter().enumerate() {
        if !covered {
            return Err(StructureViolation::Uncovered { coordinate: i + 1 });
        }
    }
    Ok(())
}

impl AdditiveStructure {
    /// Builds a structure from 1-based coordinate groups covering `{1..p}`.
    pub fn new(groups: Vec<Vec<usize>>, p: usize) -> Result<Self> {
        check_partition(&groups, p)
            .map_err(|v| Error::InvalidArgument(format!("invalid partition: {v}")))?;
        let mut groups = groups;
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort_by_key(|g| g[0]);
        Ok(AdditiveStructure { groups, p })
    }

    /// Total input dimension `P`.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of groups `M`.
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Dimension `d_m` of group `m`.
    pub fn group_dim(&self, m: usize) -> usize {
        self.groups[m].len()
    }

    /// The 1-based coordinates of group `m`, in stored order.
    pub fn group(&self, m: usize) -> &[usize] {
        &self.groups[m]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Checks the partition invariants, naming the first violation.
    pub fn validate(&self) -> std::result::Result<(), StructureViolation> {
        check_partition(&self.groups, self.p)
    }

    /// Selects the columns of group `m` from an `n x P` matrix.
    pub fn project<T: Real>(&self, m: usize, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        if m >= self.num_groups() {
            return Err(Error::Shape(format!(
                "group index {} out of range for {} groups",
                m,
                self.num_groups()
            )));
        }
        if x.ncols() != self.p {
            return Err(Error::Shape(format!(
                "matrix has {} columns, structure dimension is {}",
                x.ncols(),
                self.p
            )));
        }
        let g = &self.groups[m];
        let mut out = DMatrix::zeros(x.nrows(), g.len());
        for (c, &coord) in g.iter().enumerate() {
            out.set_column(c, &x.column(coord - 1));
        }
        Ok(out)
    }

    /// Samples a random partition of `{1..p}` with blocks of size at
    /// most `max_dim`.
    ///
    /// Coordinates are visited in random order and assigned by a
    /// capacity-constrained Chinese-restaurant rule: an existing block
    /// below the cap is chosen with weight equal to its size, a new
    /// block with weight 1.
    pub fn random_partition<R: Rng>(p: usize, max_dim: usize, rng: &mut R) -> Result<Self> {
        if p < 1 || max_dim < 1 {
            return Err(Error::InvalidArgument(
                "dimension and max_dim must be at least 1".into(),
            ));
        }
        let mut order: Vec<usize> = (1..=p).collect();
        order.shuffle(rng);
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for coord in order {
            let open: Vec<usize> = (0..blocks.len())
                .filter(|&b| blocks[b].len() < max_dim)
                .collect();
            let total: usize = open.iter().map(|&b| blocks[b].len()).sum::<usize>() + 1;
            let mut draw = rng.random_range(0..total);
            let mut placed = false;
            for &b in &open {
                if draw < blocks[b].len() {
                    blocks[b].push(coord);
                    placed = true;
                    break;
                }
                draw -= blocks[b].len();
            }
            if !placed {
                blocks.push(vec![coord]);
            }
        }
        AdditiveStructure::new(blocks, p)
    }
}

impl TryFrom<Vec<Vec<usize>>> for AdditiveStructure {
    type Error = Error;

    fn try_from(groups: Vec<Vec<usize>>) -> Result<Self> {
        let p = groups.iter().map(|g| g.len()).sum();
        AdditiveStructure::new(groups, p)
    }
}

impl From<AdditiveStructure> for Vec<Vec<usize>> {
    fn from(s: AdditiveStructure) -> Self {
        s.groups
    }
}
