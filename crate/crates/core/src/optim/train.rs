use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{Checkpoint, OptimState};
use super::scheduler::{EarlyStop, Plateau, PlateauConfig};
use crate::autodiff::{Gradients, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::losses::{loss_total, FeatureNetConfig, FeatureNetwork, LossValues, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::geometry::RayBundle;
use crate::projector::{default_mu_scale, render_px, Image2D};
use crate::volume::{make_phantom, PhantomSpec, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub early_stop_patience: u32,
    pub seed: u64,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    pub weights: LossWeights,
    pub feature_net: FeatureNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            early_stop_patience: 30,
            seed: 0,
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            weights: LossWeights::default(),
            feature_net: FeatureNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config(format!("invalid Adam settings {:?}", self.adam)));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) || self.plateau.min_lr < 0.0 {
            return Err(Error::Config(format!("invalid plateau settings {:?}", self.plateau)));
        }
        self.weights.validate()
    }
}

/// A PX image and its ground-truth volume.
#[derive(Clone, Debug)]
pub struct Pair {
    pub name: String,
    pub px: Image2D,
    pub volume: Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    /// Mean training loss components over the epoch.
    pub train: LossValues,
    /// Loss driving the scheduler: validation total, or the training total
    /// when there is no validation split.
    pub monitor: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,L_MSE,L_proj,L_perc,L_total,lr,monitor";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.train.mse, self.train.proj, self.train.perc, self.train.total, self.lr, self.monitor
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
    pub best_monitor: f64,
}

/// Model, parameters and optimizer state of one training run. Every step is
/// a deterministic function of the seed and the update count.
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub scheduler: Plateau,
    pub early: EarlyStop,
    pub epoch: u64,
    net: FeatureNetwork<f32>,
    best: Option<(f64, ParamStore<f32>)>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, model_cfg, &mut rng)?;
        let adam = Adam::new(&cfg.adam, &store);
        Ok(Trainer {
            model,
            net: FeatureNetwork::new(&cfg.feature_net)?,
            adam,
            scheduler: Plateau::new(&cfg.plateau, cfg.adam.lr),
            early: EarlyStop::new(cfg.early_stop_patience),
            epoch: 0,
            store,
            cfg: cfg.clone(),
            best: None,
        })
    }

    /// Resumes from a checkpoint; optimizer state is restored when present.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(&ckpt.model, cfg)?;
        ckpt.restore_into(&mut t.store)?;
        if let Some(o) = &ckpt.optim {
            if o.adam.m.len() != t.store.len() {
                return Err(Error::Config("checkpoint optimizer state does not match the model".into()));
            }
            t.adam = o.adam.clone();
            t.scheduler = o.scheduler.clone();
            t.early = o.early.clone();
            t.epoch = o.epoch;
        }
        Ok(t)
    }

    pub fn feature_net(&self) -> &FeatureNetwork<f32> {
        &self.net
    }

    fn check_pair(&self, pair: &Pair) -> Result<()> {
        if pair.px.dims() != self.model.cfg.image() || pair.volume.dims() != self.model.cfg.volume {
            return Err(Error::ShapeMismatch {
                op: "training pair",
                lhs: [pair.px.dims().as_slice(), pair.volume.dims().as_slice()].concat(),
                rhs: [self.model.cfg.image().as_slice(), self.model.cfg.volume.as_slice()].concat(),
            });
        }
        Ok(())
    }

    fn gt_tensor(vol: &Volume) -> Result<Tensor<f32>> {
        Tensor::new(vol.dims().to_vec(), vol.data().to_vec())
    }

    /// Losses of the refined volume without dropout or updates.
    pub fn evaluate(&self, pair: &Pair) -> Result<LossValues> {
        self.check_pair(pair)?;
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(self.model.input_tensor(pair.px.pixels())?);
        let out = self.model.forward(&mut g, x, None)?;
        let gt = g.constant(Self::gt_tensor(&pair.volume)?);
        let nodes = loss_total(&mut g, out.refined, gt, &self.cfg.weights, &self.net)?;
        Ok(nodes.values(&g))
    }

    /// One forward, backward and Adam update on a single pair.
    pub fn step(&mut self, pair: &Pair) -> Result<LossValues> {
        self.check_pair(pair)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.adam.step + 1);
        let (values, grads) = {
            let mut g = Graph::with_params(&self.store);
            let x = g.constant(self.model.input_tensor(pair.px.pixels())?);
            let out = self.model.forward(&mut g, x, Some(&mut rng as &mut dyn RngCore))?;
            let gt = g.constant(Self::gt_tensor(&pair.volume)?);
            let nodes = loss_total(&mut g, out.refined, gt, &self.cfg.weights, &self.net)?;
            let values = nodes.values(&g);
            if let Some(bad) = values.non_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite {bad} loss at update {} on {}",
                    self.adam.step + 1,
                    pair.name
                )));
            }
            (values, g.backward(nodes.total)?)
        };
        if self.adam.step == 0 {
            self.audit(&grads)?;
        }
        self.adam.lr = self.scheduler.lr;
        self.adam.apply(&mut self.store, &grads)?;
        Ok(values)
    }

    /// Every stored parameter must be reached by the first backward pass.
    fn audit(&self, grads: &Gradients<f32>) -> Result<()> {
        let touched = grads.touched_params();
        let missing: Vec<&str> = self.store.ids().filter(|id| !touched.contains(id)).map(|id| self.store.name(id)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("parameters without gradient: {}", missing.join(", "))))
        }
    }

    /// One pass over `train` followed by validation, scheduling and
    /// early-stop bookkeeping. Returns the log and whether to stop.
    pub fn run_epoch(&mut self, train: &[Pair], val: &[Pair]) -> Result<(EpochLog, bool)> {
        if train.is_empty() {
            return Err(Error::Degenerate("training split is empty".into()));
        }
        let lr = self.scheduler.lr;
        let mut sum = LossValues::default();
        for pair in train {
            let v = self.step(pair)?;
            sum.mse += v.mse;
            sum.proj += v.proj;
            sum.perc += v.perc;
            sum.total += v.total;
        }
        let n = train.len() as f64;
        let mean = LossValues {
            mse: sum.mse / n,
            proj: sum.proj / n,
            perc: sum.perc / n,
            total: sum.total / n,
        };
        let monitor = if val.is_empty() {
            mean.total
        } else {
            let mut acc = 0.0;
            for pair in val {
                acc += self.evaluate(pair)?.total;
            }
            acc / val.len() as f64
        };
        if !monitor.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {}", self.epoch)));
        }
        self.scheduler.step(monitor)?;
        if self.best.as_ref().is_none_or(|(b, _)| monitor < *b) {
            self.best = Some((monitor, self.store.clone()));
        }
        let stop = self.early.observe(monitor);
        let log = EpochLog {
            epoch: self.epoch,
            train: mean,
            monitor,
            lr,
        };
        self.epoch += 1;
        Ok((log, stop))
    }

    /// Runs until `cfg.epochs` total epochs or early stopping; `observer`
    /// sees every epoch log.
    pub fn train(&mut self, train: &[Pair], val: &[Pair], mut observer: impl FnMut(&EpochLog, &Trainer)) -> Result<TrainOutcome> {
        let mut history = Vec::new();
        let mut stopped_early = false;
        while self.epoch < self.cfg.epochs {
            let (log, stop) = self.run_epoch(train, val)?;
            observer(&log, self);
            history.push(log);
            if stop {
                stopped_early = true;
                break;
            }
        }
        Ok(TrainOutcome {
            history,
            stopped_early,
            best_monitor: self.best.as_ref().map_or(f64::INFINITY, |b| b.0),
        })
    }

    /// Parameters with the best monitored loss so far.
    pub fn best_params(&self) -> &ParamStore<f32> {
        self.best.as_ref().map_or(&self.store, |b| &b.1)
    }

    /// Full state at the current epoch boundary.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            params: self.store.clone(),
            optim: Some(OptimState {
                adam: self.adam.clone(),
                scheduler: self.scheduler.clone(),
                early: self.early.clone(),
                epoch: self.epoch,
            }),
        }
    }

    /// Best parameters without optimizer state.
    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            params: self.best_params().clone(),
            optim: None,
        }
    }
}

/// Coarse and refined volumes of a PX image.
pub fn reconstruct(model: &Model, store: &ParamStore<f32>, px: &Image2D) -> Result<(Volume, Volume)> {
    if px.dims() != model.cfg.image() {
        return Err(Error::ShapeMismatch {
            op: "reconstruct",
            lhs: px.dims().to_vec(),
            rhs: model.cfg.image().to_vec(),
        });
    }
    let mut g = Graph::with_params(store);
    let x = g.constant(model.input_tensor(px.pixels())?);
    let out = model.forward(&mut g, x, None)?;
    let coarse = Volume::new(model.cfg.volume, g.value(out.coarse).to_vec())?;
    let refined = Volume::new(model.cfg.volume, g.value(out.refined).to_vec())?;
    Ok((coarse, refined))
}

/// `n_test = n_val = floor(n / 10)`, the rest trains; order is preserved.
pub fn split_811<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = items.len() / 10;
    let n_train = items.len() - 2 * k;
    (
        items[..n_train].to_vec(),
        items[n_train..n_train + k].to_vec(),
        items[n_train + k..].to_vec(),
    )
}

/// Phantom volume and its rendered PX for a model configuration.
pub fn synthetic_pair(cfg: &ModelConfig, seed: u64) -> Result<Pair> {
    let volume = make_phantom(&PhantomSpec::for_dims(cfg.volume, seed))?;
    let bundle = RayBundle::build(&cfg.trajectory)?;
    let px = render_px(&volume, &bundle, default_mu_scale(&bundle))?;
    Ok(Pair {
        name: format!("phantom-{seed:04}"),
        px,
        volume,
    })
}
