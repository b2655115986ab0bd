//! Learnable multi-resolution hash positional encoding.
//!
//! Each level floors the normalized point onto a grid of resolution
//! `min(r0 * 2^l, r_max)` and reads one hashed table row; there is no corner
//! interpolation, so the encoding carries no gradient to coordinates.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Linear};

pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features: usize,
    pub log2_table_size: u32,
    pub base_resolution: u64,
    pub max_resolution: u64,
    pub init_std: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            features: 2,
            log2_table_size: 19,
            base_resolution: 16,
            max_resolution: 256,
            init_std: 0.01,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features == 0 {
            return Err(Error::Config("hash grid needs at least one level and feature".into()));
        }
        if !(1..=31).contains(&self.log2_table_size) {
            return Err(Error::Config(format!(
                "hash table size 2^{} outside 2^1..2^31",
                self.log2_table_size
            )));
        }
        if self.base_resolution == 0 || self.max_resolution < self.base_resolution {
            return Err(Error::Config("hash resolutions need 0 < base <= max".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("hash init std must be positive".into()));
        }
        Ok(())
    }

    /// Encoding width `3 + levels * features`.
    pub fn out_dim(&self) -> usize {
        3 + self.levels * self.features
    }

    pub fn table_rows(&self) -> usize {
        1 << self.log2_table_size
    }
}

pub fn level_resolution(cfg: &HashGridConfig, level: usize) -> Result<u64> {
    if level >= cfg.levels {
        return Err(Error::invalid(format!("level {level} outside 0..{}", cfg.levels)));
    }
    let scaled = cfg
        .base_resolution
        .checked_shl(level as u32)
        .filter(|r| r >> level == cfg.base_resolution)
        .unwrap_or(u64::MAX);
    Ok(scaled.min(cfg.max_resolution))
}

/// `((x p1) ^ (y p2) ^ (z p3)) mod 2^log2_size` with wrapping 64-bit products.
#[inline]
pub fn hash_index(cell: [u64; 3], log2_size: u32) -> u32 {
    let h = cell[0].wrapping_mul(HASH_PRIMES[0])
        ^ cell[1].wrapping_mul(HASH_PRIMES[1])
        ^ cell[2].wrapping_mul(HASH_PRIMES[2]);
    (h & ((1u64 << log2_size) - 1)) as u32
}

/// Maps `(x, y, z)` voxel coordinates into `(0, 1)^3` by voxel-cell centers
/// along `(w, d, h)`.
pub fn normalize_point(p: [f64; 3], spatial: [usize; 3]) -> [f64; 3] {
    let [h, w, d] = spatial;
    [
        (p[0] + 0.5) / w as f64,
        (p[1] + 0.5) / d as f64,
        (p[2] + 0.5) / h as f64,
    ]
}

/// Per-level table rows for a fixed point set; geometry is static, so
/// these are computed once.
#[derive(Clone, Debug)]
pub struct HashLookup {
    pub coords: Vec<[f64; 3]>,
    pub rows: Vec<Rc<[u32]>>,
}

#[derive(Clone, Debug)]
pub struct HashGrid {
    pub cfg: HashGridConfig,
    pub tables: Vec<ParamId>,
}

impl HashGrid {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &HashGridConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let shape = [cfg.table_rows(), cfg.features];
        let tables = (0..cfg.levels)
            .map(|l| store.add(format!("{name}.table{l}"), nn::normal_init(&shape, cfg.init_std, rng)?))
            .collect::<Result<_>>()?;
        Ok(HashGrid {
            cfg: cfg.clone(),
            tables,
        })
    }

    /// Errors if any coordinate falls outside `[0, 1]`.
    pub fn lookup(&self, coords: &[[f64; 3]]) -> Result<HashLookup> {
        if let Some(p) = coords.iter().find(|p| p.iter().any(|c| !(0.0..=1.0).contains(c))) {
            return Err(Error::invalid(format!("hash encode coordinate {p:?} outside [0,1]^3")));
        }
        let rows = (0..self.cfg.levels)
            .map(|l| {
                let r = level_resolution(&self.cfg, l)? as f64;
                Ok(coords
                    .iter()
                    .map(|p| {
                        let cell = p.map(|c| (c * r).floor() as u64);
                        hash_index(cell, self.cfg.log2_table_size)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(HashLookup {
            coords: coords.to_vec(),
            rows,
        })
    }

    /// `[n, 3 + levels * features]` rows `[P, f_0, ..., f_{levels-1}]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, lookup: &HashLookup) -> Result<Var> {
        let n = lookup.coords.len();
        let coords = Tensor::new(
            vec![n, 3],
            lookup.coords.iter().flatten().map(|&c| T::of(c)).collect(),
        )?;
        let mut parts = Vec::with_capacity(self.cfg.levels + 1);
        parts.push(g.constant(coords));
        for (table, rows) in self.tables.iter().zip(&lookup.rows) {
            let t = g.param(*table);
            parts.push(g.gather_rows(t, rows.clone())?);
        }
        g.concat(&parts, 1)
    }
}

/// Affine lift of the encoding to the shared feature width.
#[derive(Clone, Debug)]
pub struct PosProjector {
    pub linear: Linear,
}

impl PosProjector {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        enc_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(PosProjector {
            linear: Linear::new(store, name, enc_dim, width, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, enc: Var) -> Result<Var> {
        self.linear.forward(g, enc)
    }
}
