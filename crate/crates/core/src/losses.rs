//! Volumetric, projection and perceptual losses and their weighted sum.
//!
//! Volumes enter as `[1, H, W, D]` graph nodes with values in `[0, 255]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::projector::Plane;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub proj: f64,
    pub perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            proj: 1.0 / 1.2,
            perc: 1.0 / 25.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.proj >= 0.0 && self.perc >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// Loss configurations of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Mse,
    MseProj,
    MseProjPerc,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Mse, Ablation::MseProj, Ablation::MseProjPerc];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Mse => "MSE",
            Ablation::MseProj => "MSE+Proj",
            Ablation::MseProjPerc => "MSE+Proj+Perc",
        }
    }

    /// Weights with the disabled terms zeroed.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        match self {
            Ablation::Mse => LossWeights { proj: 0.0, perc: 0.0 },
            Ablation::MseProj => LossWeights { proj: base.proj, perc: 0.0 },
            Ablation::MseProjPerc => base.clone(),
        }
    }
}

fn check_pair<T: Real>(g: &Graph<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let s = g.shape(a);
    if s != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::invalid(format!("{op} expects [1, H, W, D] volumes, got {s:?}")));
    }
    Ok(())
}

fn sum_sq_diff<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let s = g.square(d);
    Ok(g.sum(s))
}

/// Mean squared voxel difference.
pub fn loss_mse<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    check_pair(g, "loss_mse", pred, gt)?;
    let d = g.sub(pred, gt)?;
    let s = g.square(d);
    Ok(g.mean(s))
}

/// Differentiable MIP of a `[1, H, W, D]` volume as a `[1, rows, cols]` image.
pub fn mip_var<T: Real>(g: &mut Graph<'_, T>, vol: Var, plane: Plane) -> Result<Var> {
    g.max_reduce(vol, plane.axis())
}

/// Summed squared MIP differences over the three planes.
pub fn loss_proj<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    check_pair(g, "loss_proj", pred, gt)?;
    let mut terms = Vec::with_capacity(3);
    for plane in Plane::ALL {
        let a = mip_var(g, pred, plane)?;
        let b = mip_var(g, gt, plane)?;
        terms.push(sum_sq_diff(g, a, b)?);
    }
    sum_all(g, &terms)
}

fn sum_all<T: Real>(g: &mut Graph<'_, T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNetConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 stage.
    pub stages: Vec<usize>,
    /// Stage indices whose outputs are compared.
    pub taps: Vec<usize>,
    pub seed: u64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig {
            in_channels: 3,
            stages: vec![8, 16, 32],
            taps: vec![0, 1, 2],
            seed: 0x5eed_f00d,
        }
    }
}

/// Fixed convolutional feature extractor; weights are graph constants and
/// never receive updates.
#[derive(Clone, Debug)]
pub struct FeatureNetwork<T> {
    pub cfg: FeatureNetConfig,
    stages: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> FeatureNetwork<T> {
    pub fn new(cfg: &FeatureNetConfig) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.stages.is_empty() || cfg.stages.contains(&0) {
            return Err(Error::Config("feature network needs positive channel counts".into()));
        }
        if cfg.taps.is_empty() || cfg.taps.iter().any(|&t| t >= cfg.stages.len()) {
            return Err(Error::Config(format!(
                "feature taps {:?} must name stages 0..{}",
                cfg.taps,
                cfg.stages.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cin = cfg.in_channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for &c in &cfg.stages {
            let fan_in = cin * 9;
            let w = nn::normal_init(&[c, cin, 3, 3], (2.0 / fan_in as f64).sqrt(), &mut rng)?;
            stages.push((w, Tensor::zeros(&[c])));
            cin = c;
        }
        Ok(FeatureNetwork { cfg: cfg.clone(), stages })
    }

    /// Tapped features of a `[1, rows, cols]` image in `[0, 255]`.
    pub fn features(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Vec<Var>> {
        let scaled = g.scale(image, T::of(1.0 / 255.0));
        let reps = vec![scaled; self.cfg.in_channels];
        let mut x = if reps.len() == 1 { scaled } else { g.concat(&reps, 0)? };
        let mut taps = Vec::with_capacity(self.cfg.taps.len());
        for (i, (w, b)) in self.stages.iter().enumerate() {
            let s = g.shape(x);
            if s[1] < 2 || s[2] < 2 {
                return Err(Error::invalid(format!("image too small for feature stage {i}: {s:?}")));
            }
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let c = g.conv2d(x, wv, Some(bv), 2, 1)?;
            x = g.swish(c, T::one());
            if self.cfg.taps.contains(&i) {
                taps.push(x);
            }
        }
        Ok(taps)
    }
}

/// Summed squared feature differences over taps and the three MIPs.
pub fn loss_perc<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var, net: &FeatureNetwork<T>) -> Result<Var> {
    check_pair(g, "loss_perc", pred, gt)?;
    let mut terms = Vec::new();
    for plane in Plane::ALL {
        let a = mip_var(g, pred, plane)?;
        let b = mip_var(g, gt, plane)?;
        let fa = net.features(g, a)?;
        let fb = net.features(g, b)?;
        for (x, y) in fa.into_iter().zip(fb) {
            terms.push(sum_sq_diff(g, x, y)?);
        }
    }
    sum_all(g, &terms)
}

/// Graph nodes of every component and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub mse: Var,
    pub proj: Var,
    pub perc: Var,
    pub total: Var,
}

/// Scalar values of [`LossNodes`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub mse: f64,
    pub proj: f64,
    pub perc: f64,
    pub total: f64,
}

impl LossNodes {
    pub fn values<T: Real>(&self, g: &Graph<'_, T>) -> LossValues {
        LossValues {
            mse: g.scalar(self.mse).as_f64(),
            proj: g.scalar(self.proj).as_f64(),
            perc: g.scalar(self.perc).as_f64(),
            total: g.scalar(self.total).as_f64(),
        }
    }
}

impl LossValues {
    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("mse", self.mse), ("proj", self.proj), ("perc", self.perc), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// `L_mse + w.proj * L_proj + w.perc * L_perc`.
pub fn loss_total<T: Real>(
    g: &mut Graph<'_, T>,
    pred: Var,
    gt: Var,
    weights: &LossWeights,
    net: &FeatureNetwork<T>,
) -> Result<LossNodes> {
    weights.validate()?;
    let mse = loss_mse(g, pred, gt)?;
    let proj = loss_proj(g, pred, gt)?;
    let perc = loss_perc(g, pred, gt, net)?;
    let wp = g.scale(proj, T::of(weights.proj));
    let wc = g.scale(perc, T::of(weights.perc));
    let t = g.add(mse, wp)?;
    let total = g.add(t, wc)?;
    Ok(LossNodes { mse, proj, perc, total })
}
