//! End-to-end reconstruction network: PX image to coarse and refined
//! volumes.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::extractor::{Extractor, ExtractorConfig, ImageProjector};
use crate::field::{fuse_features, DensityMlp, FieldConfig, SampleSet};
use crate::geometry::{RayBundle, TrajectoryConfig};
use crate::hashenc::{HashGrid, HashGridConfig, HashLookup, PosProjector};
use crate::refiner::{UNet, UNetConfig};

/// Architecture and geometry; everything needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(c, h, w, d)` of reconstructed volumes.
    pub volume: [usize; 4],
    pub trajectory: TrajectoryConfig,
    pub hash: HashGridConfig,
    pub extractor: ExtractorConfig,
    pub field: FieldConfig,
    pub unet: UNetConfig,
}

impl ModelConfig {
    /// 32x64x64 volumes from 32x64 PX images.
    pub fn desk() -> Self {
        ModelConfig {
            volume: [1, 32, 64, 64],
            trajectory: TrajectoryConfig::for_volume([32, 64, 64], [32, 64]),
            hash: HashGridConfig::default(),
            extractor: ExtractorConfig::desk(),
            field: FieldConfig::desk(),
            unet: UNetConfig::desk(),
        }
    }

    /// 128x256x256 volumes from 128x256 PX images.
    pub fn full() -> Self {
        ModelConfig {
            volume: [1, 128, 256, 256],
            trajectory: TrajectoryConfig::for_volume([128, 256, 256], [128, 256]),
            hash: HashGridConfig::default(),
            extractor: ExtractorConfig::full(),
            field: FieldConfig::full(),
            unet: UNetConfig::full(),
        }
    }

    /// 8x16x16 volume, 8x16 image, widths 8, one U-Net level and small
    /// hash tables; sized for finite-difference checks.
    pub fn micro() -> Self {
        let mut trajectory = TrajectoryConfig::for_volume([8, 16, 16], [8, 16]);
        trajectory.samples = 8;
        ModelConfig {
            volume: [1, 8, 16, 16],
            trajectory,
            hash: HashGridConfig {
                levels: 4,
                features: 2,
                log2_table_size: 8,
                base_resolution: 2,
                max_resolution: 16,
                init_std: 0.01,
            },
            extractor: ExtractorConfig {
                patch: 8,
                dim: 8,
                layers: 1,
                heads: 2,
                ff_hidden: 16,
                dropout: 0.0,
                cnn_beta: 1.2,
                kappa: 8,
                decoder_fusion: crate::extractor::DecoderFusion::CrossAttention,
            },
            field: FieldConfig {
                width: 8,
                ..FieldConfig::desk()
            },
            unet: UNetConfig {
                channels: vec![2],
                beta: 1.0,
            },
        }
    }

    pub fn image(&self) -> [usize; 2] {
        self.trajectory.image
    }

    pub fn validate(&self) -> Result<()> {
        if self.volume[0] != 1 || self.volume.contains(&0) {
            return Err(Error::Config(format!("volume dims must be (1, h, w, d), got {:?}", self.volume)));
        }
        self.trajectory.validate()?;
        self.hash.validate()?;
        self.extractor.validate(self.image())?;
        self.field.validate()?;
        self.unet.validate()?;
        self.unet.check_dims([self.volume[1], self.volume[2], self.volume[3]])?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub extractor: Extractor,
    pub image_proj: ImageProjector,
    pub hash: HashGrid,
    pub pos_proj: PosProjector,
    pub mlp: DensityMlp,
    pub unet: UNet,
    pub bundle: RayBundle,
    pub samples: SampleSet,
    pub lookup: HashLookup,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub coarse: Var,
    pub refined: Var,
}

impl Model {
    /// Registers every parameter in `store` in a fixed order.
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let bundle = RayBundle::build(&cfg.trajectory)?;
        let samples = SampleSet::new(&bundle, cfg.volume)?;
        let f = cfg.field.width;
        let extractor = Extractor::new(store, &cfg.extractor, cfg.image(), rng)?;
        let image_proj = ImageProjector::new(store, cfg.extractor.kappa, f, rng)?;
        let hash = HashGrid::new(store, "hash", &cfg.hash, rng)?;
        let pos_proj = PosProjector::new(store, "phi_pos", cfg.hash.out_dim(), f, rng)?;
        let mlp = DensityMlp::new(store, &cfg.field, rng)?;
        let unet = UNet::new(store, &cfg.unet, rng)?;
        let lookup = hash.lookup(&samples.coords)?;
        Ok(Model {
            cfg: cfg.clone(),
            extractor,
            image_proj,
            hash,
            pos_proj,
            mlp,
            unet,
            bundle,
            samples,
            lookup,
        })
    }

    /// Image as a `[1, H, W]` tensor in `[0, 1]`.
    pub fn input_tensor<T: Real>(&self, pixels: &[f32]) -> Result<Tensor<T>> {
        let [h, w] = self.cfg.image();
        if pixels.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vec![pixels.len()],
                rhs: vec![h, w],
            });
        }
        Ok(Tensor::from_fn(&[1, h, w], |i| T::of(pixels[i] as f64 / 255.0)))
    }

    /// Coarse `[1, H, W, D]` splat and refined volume; dropout only with `rng`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var, rng: Option<&mut dyn RngCore>) -> Result<ModelOutput> {
        let e_img = self.extractor.forward(g, image, rng)?;
        let f_img = self.image_proj.forward(g, e_img)?;
        let enc = self.hash.encode(g, &self.lookup)?;
        let f_pos = self.pos_proj.forward(g, enc)?;
        let fused = fuse_features(g, f_img, &self.samples.pixel, f_pos)?;
        let density = self.mlp.forward(g, fused)?;
        let coarse = self.samples.assemble(g, density)?;
        let refined = self.unet.forward(g, coarse)?;
        Ok(ModelOutput { coarse, refined })
    }
}
