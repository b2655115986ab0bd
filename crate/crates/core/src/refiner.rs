//! 3D U-Net mapping the coarse splatted volume to the refined volume.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Encoder block widths, shallow to deep; one level per entry.
    pub channels: Vec<usize>,
    pub beta: f64,
}

impl UNetConfig {
    pub fn desk() -> Self {
        UNetConfig {
            channels: vec![4, 8, 16, 32],
            beta: 1.0,
        }
    }

    pub fn full() -> Self {
        UNetConfig {
            channels: vec![64, 128, 256, 512],
            beta: 1.0,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("U-Net needs at least one level of positive width".into()));
        }
        Ok(())
    }

    /// Spatial dims must halve cleanly at every level.
    pub fn check_dims(&self, spatial: [usize; 3]) -> Result<()> {
        let m = 1usize << self.levels();
        if spatial.iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::Config(format!(
                "volume dims {spatial:?} not divisible by 2^{} for a {}-level U-Net",
                self.levels(),
                self.levels()
            )));
        }
        Ok(())
    }
}

/// Two `3^3` convolutions, each followed by instance norm and Swish.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub convs: [Conv; 2],
}

impl ConvBlock {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        Ok(ConvBlock {
            convs: [
                Conv::new(store, &format!("{name}.conv0"), ConvKind::Conv3d, cin, cout, 3, 1, 1, rng)?,
                Conv::new(store, &format!("{name}.conv1"), ConvKind::Conv3d, cout, cout, 3, 1, 1, rng)?,
            ],
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, beta: T) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            let c = conv.forward(g, h)?;
            let n = g.instance_norm(c)?;
            h = g.swish(n, beta);
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub enc: Vec<ConvBlock>,
    pub down: Vec<Conv>,
    /// Decoder stages, deepest first.
    pub up: Vec<Conv>,
    pub dec: Vec<ConvBlock>,
    pub head: Conv,
}

impl UNet {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &UNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut cin = 1;
        for (i, &c) in ch.iter().enumerate() {
            enc.push(ConvBlock::new(store, &format!("unet.enc{i}"), cin, c, rng)?);
            down.push(Conv::new(store, &format!("unet.down{i}"), ConvKind::Conv3d, c, c, 3, 2, 1, rng)?);
            cin = c;
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for i in (0..ch.len()).rev() {
            let c = ch[i];
            up.push(Conv::new(store, &format!("unet.up{i}"), ConvKind::Transpose3d, cin, c, 2, 2, 0, rng)?);
            dec.push(ConvBlock::new(store, &format!("unet.dec{i}"), 2 * c, c, rng)?);
            cin = c;
        }
        let head = Conv::new(store, "unet.head", ConvKind::Conv3d, ch[0], 1, 1, 1, 0, rng)?;
        Ok(UNet {
            cfg: cfg.clone(),
            enc,
            down,
            up,
            dec,
            head,
        })
    }

    /// Encoder level consumed by each decoder stage, in decoder order.
    pub fn skip_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.dec.len()).map(|k| (self.enc.len() - 1 - k, k)).collect()
    }

    /// `[1, H, W, D]` coarse volume to `[1, H, W, D]` refined volume in
    /// `(0, 255)`. Inputs are scaled by `1/255` before the first block.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, coarse: Var) -> Result<Var> {
        let s = g.shape(coarse).to_vec();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::invalid(format!("refiner input must be [1, H, W, D], got {s:?}")));
        }
        self.cfg.check_dims([s[1], s[2], s[3]])?;
        let beta = T::of(self.cfg.beta);
        let mut x = g.scale(coarse, T::of(1.0 / 255.0));
        let mut skips = Vec::with_capacity(self.enc.len());
        for (block, down) in self.enc.iter().zip(&self.down) {
            let e = block.forward(g, x, beta)?;
            skips.push(e);
            x = down.forward(g, e)?;
        }
        for ((up, block), (level, _)) in self.up.iter().zip(&self.dec).zip(self.skip_pairs()) {
            let u = up.forward(g, x)?;
            let cat = g.concat(&[u, skips[level]], 0)?;
            x = block.forward(g, cat, beta)?;
        }
        let out = self.head.forward(g, x)?;
        let sig = g.sigmoid(out);
        Ok(g.scale(sig, T::of(255.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_shapes_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let net = UNet::new(&mut store, &UNetConfig::desk(), &mut rng).unwrap();
        let x = Tensor::from_fn(&[1, 32, 64, 64], |_| rng.random_range(0.0..255.0));
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        let y = net.forward(&mut g, xv).unwrap();
        assert_eq!(g.shape(y), &[1, 32, 64, 64]);
        assert!(g.value(y).iter().all(|&v| v > 0.0 && v < 255.0));
    }

    #[test]
    fn skips_pair_each_encoder_level_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let net = UNet::new(&mut store, &UNetConfig::desk(), &mut rng).unwrap();
        let mut levels: Vec<usize> = net.skip_pairs().iter().map(|p| p.0).collect();
        assert_eq!(levels, vec![3, 2, 1, 0]);
        levels.sort();
        levels.dedup();
        assert_eq!(levels.len(), 4);
        assert_eq!(store.get(net.head.weight).shape(), &[1, 4, 1, 1, 1]);
    }

    #[test]
    fn parameter_count_is_size_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = UNetConfig {
            channels: vec![2, 4],
            beta: 1.0,
        };
        let mut store = ParamStore::<f32>::new();
        let net = UNet::new(&mut store, &cfg, &mut rng).unwrap();
        let before = store.numel();
        for n in [4, 8] {
            let mut g = Graph::with_params(&store);
            let x = g.constant(Tensor::zeros(&[1, n, n, n]));
            let y = net.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y), &[1, n, n, n]);
        }
        assert_eq!(store.numel(), before);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 6, 8, 8]));
        assert!(matches!(net.forward(&mut g, x), Err(Error::Config(_))));
    }

    #[test]
    fn micro_unet_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = UNetConfig {
            channels: vec![2, 4],
            beta: 1.0,
        };
        let mut store = ParamStore::<f64>::new();
        let net = UNet::new(&mut store, &cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(&[1, 8, 8, 8], |_| rng.random_range(0.0..255.0));
        let target = Tensor::from_fn(&[1, 8, 8, 8], |_| rng.random_range(0.0..255.0));
        let loss = |g: &mut Graph<'_, f64>, v: &[Var]| {
            let y = net.forward(g, v[0])?;
            let t = g.constant(target.clone());
            let d = g.sub(y, t)?;
            let d = g.scale(d, 1.0 / 255.0);
            let s = g.square(d);
            Ok(g.mean(s))
        };
        // a strided subset keeps the check fast
        let mut k = 0usize;
        let report = gradcheck::check_params(&store, 1e-5, 1e-6, |_, _| {
            k += 1;
            k % 3 == 0
        }, |g| {
            let xv = g.constant(x.clone());
            loss(g, &[xv])
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        let inputs = gradcheck::check_inputs_with(Some(&store), &[x.clone()], 1e-3, 1e-6, loss).unwrap();
        assert!(inputs.passes(1e-4), "{inputs:?}");
    }
}
