//! Hybrid ViT-CNN image feature extractor and the per-pixel lift to the
//! shared feature width.
//!
//! Image tensors are `[C, H, W]`; token matrices are `[tokens, d]` with the
//! class token at row 0.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Conv, ConvKind, LayerNorm, Linear};

/// How decoder layer `l` combines its state with encoder state `L - l + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderFusion {
    CrossAttention,
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
    pub cnn_beta: f64,
    /// Channels of the fused image feature map.
    pub kappa: usize,
    pub decoder_fusion: DecoderFusion,
}

impl ExtractorConfig {
    pub fn desk() -> Self {
        ExtractorConfig {
            patch: 16,
            dim: 32,
            layers: 2,
            heads: 2,
            ff_hidden: 64,
            dropout: 0.1,
            cnn_beta: 1.2,
            kappa: 16,
            decoder_fusion: DecoderFusion::CrossAttention,
        }
    }

    pub fn full() -> Self {
        ExtractorConfig {
            dim: 256,
            layers: 12,
            heads: 8,
            ff_hidden: 512,
            kappa: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self, image: [usize; 2]) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.heads == 0 || self.layers == 0 || self.kappa == 0 {
            return Err(Error::Config("extractor sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if image[0] % self.patch != 0 || image[1] % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                image[0], image[1], self.patch
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

fn maybe_dropout<T: Real>(g: &mut Graph<'_, T>, x: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
    match rng {
        Some(r) => g.dropout(x, p, *r),
        None => Ok(x),
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    /// Returns the output and the per-head softmax weight matrices.
    pub fn forward_with_weights<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, kv: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, kv)?;
        let v = self.v.forward(g, kv)?;
        let dim = g.shape(q)[1];
        let dh = dim / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let a = g.softmax(scores, 1)?;
            weights.push(a);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = g.concat(&outs, 1)?;
        Ok((self.out.forward(g, cat)?, weights))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, kv: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, query, kv)?.0)
    }
}

/// Pre-norm residual block: attention (self or cross) then Swish MLP.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerLayer {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &ExtractorConfig, rng: &mut R) -> Result<Self> {
        Ok(TransformerLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.dim, cfg.ff_hidden, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ff_hidden, cfg.dim, rng)?,
        })
    }

    fn feed_forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let n = self.norm2.forward(g, x)?;
        let h = self.ff1.forward(g, n)?;
        let h = g.swish(h, T::one());
        let h = self.ff2.forward(g, h)?;
        let h = maybe_dropout(g, h, p, rng)?;
        g.add(h, x)
    }

    /// `Z~ = MHSA(LN(Z)) + Z; Z' = MLP(LN(Z~)) + Z~`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, z: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let n = self.norm1.forward(g, z)?;
        let a = self.attn.forward(g, n, n)?;
        let a = maybe_dropout(g, a, p, rng)?;
        let z = g.add(a, z)?;
        self.feed_forward(g, z, p, rng)
    }

    /// `D~ = MHA(LN(D), E, E) + D` (or `D + E` when additive);
    /// `D' = MLP(LN(D~)) + D~`.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        d: Var,
        skip: Var,
        fusion: DecoderFusion,
        p: f64,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let d = match fusion {
            DecoderFusion::CrossAttention => {
                let n = self.norm1.forward(g, d)?;
                let a = self.attn.forward(g, n, skip)?;
                let a = maybe_dropout(g, a, p, rng)?;
                g.add(a, d)?
            }
            DecoderFusion::Additive => g.add(d, skip)?,
        };
        self.feed_forward(g, d, p, rng)
    }
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub cfg: ExtractorConfig,
    pub image: [usize; 2],
    pub embed: Conv,
    pub pos: ParamId,
    pub cls: ParamId,
    pub encoder: Vec<TransformerLayer>,
    pub decoder: Vec<TransformerLayer>,
    pub upsample: Conv,
    pub cnn: Vec<[Conv; 3]>,
    pub cnn_skip: Conv,
    pub fuse: Conv,
}

impl Extractor {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ExtractorConfig,
        image: [usize; 2],
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(image)?;
        let (d, p) = (cfg.dim, cfg.patch);
        let n = image[0] * image[1] / (p * p);
        let embed = Conv::new(store, "vit.embed", ConvKind::Conv2d, 1, d, p, p, 0, rng)?;
        let pos = store.add("vit.pos", nn::normal_init(&[n, d], 0.02, rng)?)?;
        let cls = store.add("vit.cls", nn::normal_init(&[1, d], 0.02, rng)?)?;
        let encoder = (0..cfg.layers)
            .map(|l| TransformerLayer::new(store, &format!("vit.enc{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.layers)
            .map(|l| TransformerLayer::new(store, &format!("vit.dec{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        let upsample = Conv::new(store, "vit.up", ConvKind::Transpose2d, d, d, p, p, 0, rng)?;
        let cnn = (0..3)
            .map(|b| {
                let conv = |store: &mut ParamStore<T>, i: usize, cin: usize, rng: &mut R| {
                    Conv::new(store, &format!("cnn.block{b}.conv{i}"), ConvKind::Conv2d, cin, d, 3, 1, 1, rng)
                };
                let cin = if b == 0 { 1 } else { d };
                Ok([conv(store, 0, cin, rng)?, conv(store, 1, d, rng)?, conv(store, 2, d, rng)?])
            })
            .collect::<Result<_>>()?;
        let cnn_skip = Conv::new(store, "cnn.skip", ConvKind::Conv2d, 1, d, 1, 1, 0, rng)?;
        let fuse = Conv::new(store, "fuse", ConvKind::Conv2d, d, cfg.kappa, 3, 1, 1, rng)?;
        Ok(Extractor {
            cfg: cfg.clone(),
            image,
            embed,
            pos,
            cls,
            encoder,
            decoder,
            upsample,
            cnn,
            cnn_skip,
            fuse,
        })
    }

    pub fn patch_grid(&self) -> [usize; 2] {
        [self.image[0] / self.cfg.patch, self.image[1] / self.cfg.patch]
    }

    pub fn num_patches(&self) -> usize {
        let [a, b] = self.patch_grid();
        a * b
    }

    fn check_image<T: Real>(&self, g: &Graph<'_, T>, img: Var) -> Result<()> {
        let expect = [1, self.image[0], self.image[1]];
        if g.shape(img) != expect {
            return Err(Error::ShapeMismatch {
                op: "extractor",
                lhs: g.shape(img).to_vec(),
                rhs: expect.to_vec(),
            });
        }
        Ok(())
    }

    /// `[1, H, W]` image to `[N + 1, d]` tokens.
    pub fn patch_embed<T: Real>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<Var> {
        self.check_image(g, img)?;
        let e = self.embed.forward(g, img)?;
        let n = self.num_patches();
        let e = g.reshape(e, &[self.cfg.dim, n])?;
        let tokens = g.transpose(e)?;
        let pos = g.param(self.pos);
        let tokens = g.add(tokens, pos)?;
        let cls = g.param(self.cls);
        g.concat(&[cls, tokens], 0)
    }

    /// Drops the class token and upsamples `[N + 1, d]` tokens to `[d, H, W]`.
    pub fn reassemble<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        let n = self.num_patches();
        if g.shape(tokens) != [n + 1, self.cfg.dim] {
            return Err(Error::ShapeMismatch {
                op: "reassemble",
                lhs: g.shape(tokens).to_vec(),
                rhs: vec![n + 1, self.cfg.dim],
            });
        }
        let body = g.slice(tokens, 0, 1, n)?;
        let t = g.transpose(body)?;
        let [gh, gw] = self.patch_grid();
        let grid = g.reshape(t, &[self.cfg.dim, gh, gw])?;
        self.upsample.forward(g, grid)
    }

    /// Global branch: `[1, H, W]` to `[d, H, W]`.
    pub fn vit_branch<T: Real>(&self, g: &mut Graph<'_, T>, img: Var, mut rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let p = self.cfg.dropout;
        let mut z = self.patch_embed(g, img)?;
        let mut states = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            z = layer.encode(g, z, p, &mut rng)?;
            states.push(z);
        }
        let mut d = z;
        for (l, layer) in self.decoder.iter().enumerate() {
            let skip = states[states.len() - 1 - l];
            d = layer.decode(g, d, skip, self.cfg.decoder_fusion, p, &mut rng)?;
        }
        self.reassemble(g, d)
    }

    /// Local branch: three residual blocks of three conv + Swish layers.
    pub fn cnn_branch<T: Real>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<Var> {
        self.check_image(g, img)?;
        let beta = T::of(self.cfg.cnn_beta);
        let mut x = img;
        for (b, block) in self.cnn.iter().enumerate() {
            let skip = if b == 0 { self.cnn_skip.forward(g, x)? } else { x };
            let mut h = x;
            for conv in block {
                let c = conv.forward(g, h)?;
                h = g.swish(c, beta);
            }
            x = g.add(h, skip)?;
        }
        Ok(x)
    }

    /// `Swish(Conv3x3(E_global + E_local))` with `kappa` output channels.
    pub fn fuse<T: Real>(&self, g: &mut Graph<'_, T>, global: Var, local: Var) -> Result<Var> {
        let sum = g.add(global, local)?;
        let c = self.fuse.forward(g, sum)?;
        Ok(g.swish(c, T::one()))
    }

    /// `[1, H, W]` image in `[0, 1]` to `[kappa, H, W]` features. Dropout
    /// is active only when `rng` is given.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, img: Var, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let global = self.vit_branch(g, img, rng)?;
        let local = self.cnn_branch(g, img)?;
        self.fuse(g, global, local)
    }
}

/// Per-pixel affine lift `kappa -> f`; output rows are pixels in row-major
/// order.
#[derive(Clone, Debug)]
pub struct ImageProjector {
    pub linear: Linear,
}

impl ImageProjector {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, kappa: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(ImageProjector {
            linear: Linear::new(store, "phi_img", kappa, width, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid(format!("image features must be [C, H, W], got {s:?}")));
        }
        let flat = g.reshape(features, &[s[0], s[1] * s[2]])?;
        let rows = g.transpose(flat)?;
        self.linear.forward(g, rows)
    }
}
