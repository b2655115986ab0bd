//! Density field: fuses per-pixel image features with per-sample positional
//! features, predicts densities with a skip-connected MLP and splats them
//! into the coarse volume.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, ScatterPlan, Var};
use crate::error::{Error, Result};
use crate::geometry::RayBundle;
use crate::hashenc::normalize_point;
use crate::nn::Linear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub width: usize,
    pub depth: usize,
    /// Layer whose input is `[u^skip; u^0]`.
    pub skip_layer: usize,
    pub beta: f64,
}

impl FieldConfig {
    pub fn desk() -> Self {
        FieldConfig {
            width: 32,
            depth: 8,
            skip_layer: 4,
            beta: 1.0,
        }
    }

    pub fn full() -> Self {
        FieldConfig {
            width: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config("MLP width and depth must be positive".into()));
        }
        if self.skip_layer >= self.depth {
            return Err(Error::Config(format!(
                "skip layer {} outside 0..{}",
                self.skip_layer, self.depth
            )));
        }
        Ok(())
    }
}

/// `depth` Swish layers of width `f`; layer `skip_layer` reads
/// `[u^skip; u^0]` (width `2f`); head `255 * sigmoid(w^T u + b)`.
#[derive(Clone, Debug)]
pub struct DensityMlp {
    pub cfg: FieldConfig,
    pub layers: Vec<Linear>,
    pub head: Linear,
}

impl DensityMlp {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &FieldConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.width;
        let layers = (0..cfg.depth)
            .map(|l| {
                let fan_in = if l == cfg.skip_layer { 2 * f } else { f };
                Linear::new(store, &format!("mlp.layer{l}"), fan_in, f, rng)
            })
            .collect::<Result<_>>()?;
        let head = Linear::new(store, "mlp.head", f, 1, rng)?;
        Ok(DensityMlp {
            cfg: cfg.clone(),
            layers,
            head,
        })
    }

    /// `[n, f]` fused features to `[n, 1]` densities in `(0, 255)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, fused: Var) -> Result<Var> {
        let beta = T::of(self.cfg.beta);
        let u0 = fused;
        let mut u = u0;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == self.cfg.skip_layer { g.concat(&[u, u0], 1)? } else { u };
            let h = layer.forward(g, input)?;
            u = g.swish(h, beta);
        }
        let logit = self.head.forward(g, u)?;
        let s = g.sigmoid(logit);
        Ok(g.scale(s, T::of(255.0)))
    }
}

/// Elementwise sum of each sample's pixel feature row and its positional
/// feature row.
pub fn fuse_features<T: Real>(g: &mut Graph<'_, T>, pixel_features: Var, pixel_of_sample: &Rc<[u32]>, pos: Var) -> Result<Var> {
    let per_sample = g.gather_rows(pixel_features, pixel_of_sample.clone())?;
    g.add(per_sample, pos)
}

/// Static sample set of a ray bundle: every sample of every ray with a
/// focal interval, ray-major.
#[derive(Clone, Debug)]
pub struct SampleSet {
    /// Normalized `(0, 1)^3` coordinates for the hash encoding.
    pub coords: Vec<[f64; 3]>,
    pub pixel: Rc<[u32]>,
    pub splat: Rc<ScatterPlan>,
    /// Voxels that receive at least one sample.
    pub mask: Vec<bool>,
    pub dims: [usize; 4],
}

/// Nearest voxel `(h, w, d)` of point `(x, y, z)`, if inside the grid.
pub fn nearest_voxel(p: [f64; 3], spatial: [usize; 3]) -> Option<[usize; 3]> {
    let [hn, wn, dn] = spatial;
    let idx = |c: f64, n: usize| {
        let r = c.round();
        (r >= 0.0 && r < n as f64).then_some(r as usize)
    };
    Some([idx(p[2], hn)?, idx(p[0], wn)?, idx(p[1], dn)?])
}

impl SampleSet {
    pub fn new(bundle: &RayBundle, dims: [usize; 4]) -> Result<Self> {
        if dims[0] != 1 {
            return Err(Error::invalid(format!("coarse volume must have one channel, got {dims:?}")));
        }
        let spatial = [dims[1], dims[2], dims[3]];
        let mut coords = Vec::new();
        let mut pixel = Vec::new();
        let mut targets = Vec::new();
        for r in 0..bundle.rays.len() {
            if !bundle.is_valid(r) {
                continue;
            }
            for &p in bundle.ray_points(r) {
                let v = nearest_voxel(p, spatial).ok_or_else(|| {
                    Error::invalid(format!("sample {p:?} outside the {spatial:?} volume frame"))
                })?;
                coords.push(normalize_point(p, spatial));
                pixel.push(r as u32);
                targets.push(Some(((v[0] * spatial[1] + v[1]) * spatial[2] + v[2]) as u32));
            }
        }
        if coords.is_empty() {
            return Err(Error::Degenerate("ray bundle has no samples inside the horseshoe".into()));
        }
        let plan = ScatterPlan::new(targets, dims.to_vec())?;
        let mask = plan.counts().iter().map(|&c| c > 0).collect();
        Ok(SampleSet {
            coords,
            pixel: pixel.into(),
            splat: Rc::new(plan),
            mask,
            dims,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Mean-splat `[n, 1]` densities into a `[1, H, W, D]` coarse volume.
    pub fn assemble<T: Real>(&self, g: &mut Graph<'_, T>, densities: Var) -> Result<Var> {
        g.scatter_mean(densities, self.splat.clone())
    }
}
