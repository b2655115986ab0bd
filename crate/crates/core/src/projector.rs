//! Beer-Lambert forward projection, maximum intensity projections and
//! continuous volume readout.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RayBundle;
use crate::pgm;
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "image {height}x{width} cannot hold {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Degenerate("image has non-finite pixels".into()));
        }
        Ok(Image2D {
            height,
            width,
            pixels,
        })
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.pixels[i * self.width + j]
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        pgm::write_pgm(path, self.width, self.height, &self.pixels)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let (w, h, px) = pgm::read_pgm(path)?;
        Image2D::new(h, w, px)
    }
}

/// Trilinear readout at `(x, y, z)` = `(w, d, h)` voxel coordinates of
/// channel 0; zero outside `[0, n - 1]` on any axis.
pub fn sample_trilinear(vol: &Volume, p: [f64; 3]) -> f64 {
    let [hn, wn, dn] = vol.spatial();
    let coords = [(p[2], hn), (p[0], wn), (p[1], dn)];
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for (a, &(c, n)) in coords.iter().enumerate() {
        if !(c >= 0.0 && c <= (n - 1) as f64) {
            return 0.0;
        }
        let f = c.floor().min((n - 1) as f64);
        base[a] = f as usize;
        frac[a] = c - f;
    }
    let data = vol.data();
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut weight = 1.0;
        for a in 0..3 {
            let hi = (corner >> (2 - a)) & 1 == 1;
            weight *= if hi { frac[a] } else { 1.0 - frac[a] };
            idx[a] = if hi { base[a] + 1 } else { base[a] };
        }
        if weight == 0.0 {
            continue;
        }
        acc += weight * data[(idx[0] * wn + idx[1]) * dn + idx[2]] as f64;
    }
    acc
}

/// Attenuation scale that lands a mid-density phantom mid-range.
pub fn default_mu_scale(bundle: &RayBundle) -> f64 {
    let l = bundle.mean_path_length();
    if l > 0.0 {
        4.0 / l
    } else {
        1.0
    }
}

/// Pixel value `255 (1 - exp(-A))` for line integral `A`.
#[inline]
pub fn transfer(attenuation: f64) -> f64 {
    255.0 * (1.0 - (-attenuation).exp())
}

/// Rectangle-rule line integral `A = dt * sum_s mu(P_s)`, with
/// `mu = mu_scale * density / 255`; empty rays render 0.
pub fn render_px(vol: &Volume, bundle: &RayBundle, mu_scale: f64) -> Result<Image2D> {
    if !(mu_scale >= 0.0) {
        return Err(Error::invalid(format!("mu_scale must be non-negative, got {mu_scale}")));
    }
    let pixels = (0..bundle.rays.len())
        .map(|r| {
            if !bundle.is_valid(r) {
                return 0.0;
            }
            let dt = bundle.rays[r].spacing(bundle.samples);
            let sum: f64 = bundle.ray_points(r).iter().map(|&p| sample_trilinear(vol, p)).sum();
            transfer(dt * mu_scale * sum / 255.0) as f32
        })
        .collect();
    Image2D::new(bundle.image[0], bundle.image[1], pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Sagittal,
    Coronal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Sagittal, Plane::Coronal];

    /// Reduced axis of a `(c, h, w, d)` tensor.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 3,
            Plane::Sagittal => 2,
            Plane::Coronal => 1,
        }
    }
}

impl std::fmt::Display for Plane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Plane::Axial => "axial",
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
        })
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "sagittal" => Ok(Plane::Sagittal),
            "coronal" => Ok(Plane::Coronal),
            other => Err(Error::invalid(format!(
                "unknown plane {other:?}; expected axial, sagittal or coronal"
            ))),
        }
    }
}

/// Maximum over one spatial axis of channel 0. Axial keeps `(h, w)`,
/// sagittal keeps `(h, d)`, coronal keeps `(w, d)`.
pub fn mip(vol: &Volume, plane: Plane) -> Image2D {
    let [hn, wn, dn] = vol.spatial();
    let (rows, cols) = match plane {
        Plane::Axial => (hn, wn),
        Plane::Sagittal => (hn, dn),
        Plane::Coronal => (wn, dn),
    };
    let mut px = vec![f32::NEG_INFINITY; rows * cols];
    for h in 0..hn {
        for w in 0..wn {
            for d in 0..dn {
                let v = vol.get(h, w, d);
                let slot = match plane {
                    Plane::Axial => h * wn + w,
                    Plane::Sagittal => h * dn + d,
                    Plane::Coronal => w * dn + d,
                };
                if v > px[slot] {
                    px[slot] = v;
                }
            }
        }
    }
    Image2D {
        height: rows,
        width: cols,
        pixels: px,
    }
}
