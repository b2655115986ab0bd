//! Dense scalar volumes, intensity preprocessing, procedural jaw phantoms
//! and the `VNBLAVOL1` file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Horseshoe;
use crate::pgm;

pub const VOLUME_MAGIC: &[u8; 16] = b"VNBLAVOL1\0\0\0\0\0\0\0";

/// Scalar density grid laid out row-major as `(c, h, w, d)`.
///
/// Continuous points `(x, y, z)` address the grid with `x` along `w`, `y`
/// along `d` and `z` along `h`; voxel centers sit at integer coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 4],
    voxels: Vec<f32>,
    spacing: f32,
}

impl Volume {
    pub fn new(dims: [usize; 4], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::invalid(format!("volume dims {dims:?} overflow")))?;
        if n != voxels.len() {
            return Err(Error::invalid(format!(
                "volume dims {dims:?} need {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Volume {
            dims,
            voxels,
            spacing: 1.0,
        })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Volume {
            dims,
            voxels: vec![0.0; dims.iter().product()],
            spacing: 1.0,
        }
    }

    pub fn with_spacing(mut self, mm: f32) -> Self {
        self.spacing = mm;
        self
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Spatial extents `(h, w, d)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn spacing(&self) -> f32 {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.voxels
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_data(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[2] + w) * self.dims[3] + d
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> f32 {
        self.voxels[self.index(h, w, d)]
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, v: f32) {
        let i = self.index(h, w, d);
        self.voxels[i] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessOptions {
    pub low_percentile: f64,
    pub high_percentile: f64,
    /// Insert `log1p` between clipping and standardization.
    pub log_compress: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            low_percentile: 1.0,
            high_percentile: 99.9,
            log_compress: false,
        }
    }
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clip to the configured percentiles, standardize with the global mean and
/// standard deviation, then rescale linearly to `[0, 255]`.
pub fn preprocess(raw: &Volume, opts: &PreprocessOptions) -> Result<Volume> {
    if raw.is_empty() {
        return Err(Error::invalid("cannot preprocess an empty volume"));
    }
    if !(0.0..=100.0).contains(&opts.low_percentile)
        || !(0.0..=100.0).contains(&opts.high_percentile)
        || opts.low_percentile > opts.high_percentile
    {
        return Err(Error::Config(format!(
            "percentiles must satisfy 0 <= low <= high <= 100, got {} and {}",
            opts.low_percentile, opts.high_percentile
        )));
    }
    let mut sorted: Vec<f64> = raw.data().iter().map(|&v| v as f64).collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("volume contains non-finite voxels".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, opts.low_percentile);
    let hi = percentile(&sorted, opts.high_percentile);

    let mut v: Vec<f64> = raw.data().iter().map(|&x| (x as f64).clamp(lo, hi)).collect();
    if opts.log_compress {
        v.iter_mut().for_each(|x| *x = (*x - lo).ln_1p());
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if std <= 0.0 || !std.is_finite() {
        return Err(Error::Degenerate("volume has zero variance after clipping".into()));
    }
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
    let (zmin, zmax) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = zmax - zmin;
    let voxels = v
        .iter()
        .map(|x| ((x - zmin) / span * 255.0).clamp(0.0, 255.0) as f32)
        .collect();
    Ok(Volume {
        dims: raw.dims,
        voxels,
        spacing: raw.spacing,
    })
}

/// Parameters of a procedural jaw phantom: a half-annulus of bone between
/// two ellipses, extruded over a band of rows, with spherical teeth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 4],
    pub center: [f64; 2],
    pub inner: [f64; 2],
    pub outer: [f64; 2],
    /// Row band `[z_lo, z_hi]` occupied by the horseshoe.
    pub z_band: [f64; 2],
    pub tooth_count: usize,
    pub tooth_radius: [f64; 2],
    pub bone_density: f32,
    pub tooth_density: f32,
    pub background: f32,
}

impl PhantomSpec {
    /// Layout scaled to the volume extents.
    pub fn for_dims(dims: [usize; 4], seed: u64) -> Self {
        let [_, h, w, d] = dims;
        let (w, d, h) = (w as f64, d as f64, h as f64);
        let inner = [0.25 * w, 0.22 * d];
        let outer = [0.42 * w, 0.39 * d];
        let thickness = (outer[0] - inner[0]).min(outer[1] - inner[1]);
        PhantomSpec {
            seed,
            dims,
            center: [(w - 1.0) / 2.0, (d - 1.0) / 2.0],
            inner,
            outer,
            z_band: [0.125 * (h - 1.0), 0.875 * (h - 1.0)],
            tooth_count: 12,
            tooth_radius: [0.18 * thickness, 0.32 * thickness],
            bone_density: 110.0,
            tooth_density: 220.0,
            background: 0.0,
        }
    }

    pub fn horseshoe(&self) -> Horseshoe {
        Horseshoe {
            center: self.center,
            inner: self.inner,
            outer: self.outer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) || self.dims[0] != 1 {
            return Err(Error::Config(format!("phantom dims must be (1, h, w, d), got {:?}", self.dims)));
        }
        self.horseshoe().validate()?;
        if !(self.z_band[0] <= self.z_band[1]) {
            return Err(Error::Config("phantom z band is inverted".into()));
        }
        for v in [self.bone_density, self.tooth_density, self.background] {
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::Config(format!("density {v} outside [0, 255]")));
            }
        }
        let [rmin, rmax] = self.tooth_radius;
        if self.tooth_count > 0 && !(0.0 < rmin && rmin <= rmax) {
            return Err(Error::Config(format!("tooth radius range {rmin}..{rmax} is invalid")));
        }
        let thickness = (self.outer[0] - self.inner[0]).min(self.outer[1] - self.inner[1]);
        if self.tooth_count > 0 && rmax > thickness {
            return Err(Error::Config(format!(
                "tooth radius {rmax} exceeds annulus thickness {thickness}"
            )));
        }
        Ok(())
    }

    /// Whether the voxel center at `(h, w, d)` lies in the horseshoe support.
    pub fn in_support(&self, h: usize, w: usize, d: usize) -> bool {
        let z = h as f64;
        z >= self.z_band[0] && z <= self.z_band[1] && self.horseshoe().contains(w as f64, d as f64, 0.0)
    }
}

struct Tooth {
    center: [f64; 3],
    radius: f64,
}

/// Deterministic phantom for a seed; zero outside the horseshoe support.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mid = [
        (spec.inner[0] + spec.outer[0]) / 2.0,
        (spec.inner[1] + spec.outer[1]) / 2.0,
    ];
    let zc = (spec.z_band[0] + spec.z_band[1]) / 2.0;
    let n = spec.tooth_count;
    let teeth: Vec<Tooth> = (0..n)
        .map(|k| {
            let slot = std::f64::consts::PI / n as f64;
            let theta = slot * (k as f64 + 0.5) + rng.random_range(-0.3..0.3) * slot;
            let radius = if spec.tooth_radius[0] < spec.tooth_radius[1] {
                rng.random_range(spec.tooth_radius[0]..spec.tooth_radius[1])
            } else {
                spec.tooth_radius[0]
            };
            Tooth {
                center: [
                    spec.center[0] + mid[0] * theta.cos(),
                    spec.center[1] + mid[1] * theta.sin(),
                    zc + rng.random_range(-0.5..0.5) * (spec.z_band[1] - spec.z_band[0]) * 0.25,
                ],
                radius,
            }
        })
        .collect();

    let mut vol = Volume::zeros(spec.dims);
    vol.voxels.iter_mut().for_each(|v| *v = spec.background);
    let [_, hn, wn, dn] = spec.dims;
    for h in 0..hn {
        for w in 0..wn {
            for d in 0..dn {
                if !spec.in_support(h, w, d) {
                    continue;
                }
                let p = [w as f64, d as f64, h as f64];
                let in_tooth = teeth.iter().any(|t| {
                    let dist2: f64 = (0..3).map(|a| (p[a] - t.center[a]).powi(2)).sum();
                    dist2 <= t.radius * t.radius
                });
                let v = if in_tooth { spec.tooth_density } else { spec.bone_density };
                vol.set(h, w, d, v);
            }
        }
    }
    Ok(vol)
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + v.voxels.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    for d in v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < 32 || &bytes[..16] != VOLUME_MAGIC {
        return Err(Error::format(path, "bad volume magic"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let b = &bytes[16 + 4 * i..20 + 4 * i];
        *d = u32::from_le_bytes(b.try_into().unwrap()) as usize;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format(path, format!("zero extent in dims {dims:?}")));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)))
        .ok_or_else(|| Error::format(path, format!("dims {dims:?} overflow")))?;
    let payload = &bytes[32..];
    if payload.len() != n.1 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, dims {dims:?} need {}", payload.len(), n.1),
        ));
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Volume {
        dims,
        voxels,
        spacing: 1.0,
    })
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

/// One-byte-per-voxel mask sidecar (0 or 1), same voxel order as the volume.
pub fn save_mask(mask: &[bool], path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Writes one PGM per row `h` (an axial-plane `w x d` slice stack).
pub fn export_pgm_slices(v: &Volume, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [_, hn, wn, dn] = v.dims;
    let mut paths = Vec::with_capacity(hn);
    for h in 0..hn {
        let start = v.index(h, 0, 0);
        let px = &v.voxels[start..start + wn * dn];
        let path = dir.join(format!("{stem}_{h:04}.pgm"));
        pgm::write_pgm(&path, wn, dn, px)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn rand_volume(seed: u64, dims: [usize; 4]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|_| rng.random_range(-500.0..3000.0)).collect()).unwrap()
    }

    #[test]
    fn outlier_is_clipped_at_high_percentile() {
        let mut v = vec![0.0f32; 1000];
        v[500] = 1000.0;
        let vol = Volume::new([1, 10, 10, 10], v).unwrap();
        let mut sorted: Vec<f64> = vol.data().iter().map(|&x| x as f64).collect();
        sorted.sort_by(f64::total_cmp);
        // rank 0.999 * 999 = 998.001 between 0 and 1000
        assert!((percentile(&sorted, 99.9) - 1.0).abs() < 1e-9);
        let out = preprocess(&vol, &PreprocessOptions::default()).unwrap();
        assert_eq!(out.min_max(), (0.0, 255.0));
        // after clipping the outlier equals the clip value, which maps to 255;
        // every other voxel maps to 0
        assert_eq!(out.data()[500], 255.0);
        assert_eq!(out.data().iter().filter(|&&x| x == 0.0).count(), 999);
    }

    #[test]
    fn preprocess_spans_full_range() {
        let out = preprocess(&rand_volume(1, [1, 4, 5, 6]), &PreprocessOptions::default()).unwrap();
        assert_eq!(out.min_max(), (0.0, 255.0));
        let logged = preprocess(
            &rand_volume(1, [1, 4, 5, 6]),
            &PreprocessOptions {
                log_compress: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(logged.min_max(), (0.0, 255.0));
    }

    #[test]
    fn preprocess_matches_scratch_recomputation() {
        let raw = rand_volume(2, [1, 6, 7, 8]);
        let out = preprocess(&raw, &PreprocessOptions::default()).unwrap();
        // independent recomputation: nearest-rank free percentile via sort
        // index arithmetic, then clip, z-score, min-max
        let mut s: Vec<f64> = raw.data().iter().map(|&v| v as f64).collect();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |p: f64| {
            let r = p / 100.0 * (s.len() as f64 - 1.0);
            let f = r.floor();
            s[f as usize] + (s[r.ceil() as usize] - s[f as usize]) * (r - f)
        };
        let (lo, hi) = (pct(1.0), pct(99.9));
        let c: Vec<f64> = raw.data().iter().map(|&v| (v as f64).max(lo).min(hi)).collect();
        let m = c.iter().sum::<f64>() / c.len() as f64;
        let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
        let z: Vec<f64> = c.iter().map(|v| (v - m) / sd).collect();
        let zmin = z.iter().cloned().fold(f64::MAX, f64::min);
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let expect: Vec<f64> = z.iter().map(|v| 255.0 * (v - zmin) / (zmax - zmin)).collect();
        let mean_e = expect.iter().sum::<f64>() / expect.len() as f64;
        let mean_o = out.data().iter().map(|&v| v as f64).sum::<f64>() / expect.len() as f64;
        assert!((mean_e - mean_o).abs() < 1e-3);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let v = Volume::new([1, 2, 2, 2], vec![7.0; 8]).unwrap();
        assert!(matches!(preprocess(&v, &PreprocessOptions::default()), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn preprocess_is_monotone(seed in 0u64..500) {
            let raw = rand_volume(seed, [1, 3, 4, 5]);
            let once = preprocess(&raw, &PreprocessOptions::default()).unwrap();
            let twice = preprocess(&once, &PreprocessOptions::default()).unwrap();
            let a = once.data();
            let b = twice.data();
            for i in 0..a.len() {
                for j in 0..a.len() {
                    if a[i] < a[j] {
                        prop_assert!(b[i] <= b[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn phantom_without_teeth_is_pure_horseshoe() {
        let mut spec = PhantomSpec::for_dims([1, 16, 32, 32], 3);
        spec.tooth_count = 0;
        let v = make_phantom(&spec).unwrap();
        let mut inside = 0;
        for h in 0..16 {
            for w in 0..32 {
                for d in 0..32 {
                    let expect = if spec.in_support(h, w, d) { spec.bone_density } else { 0.0 };
                    assert_eq!(v.get(h, w, d), expect);
                    inside += spec.in_support(h, w, d) as usize;
                }
            }
        }
        assert!(inside > 0);
    }

    #[test]
    fn phantom_is_deterministic_and_zero_outside_support() {
        let spec = PhantomSpec::for_dims([1, 32, 64, 64], 42);
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut teeth = 0;
        for h in 0..32 {
            for w in 0..64 {
                for d in 0..64 {
                    if !spec.in_support(h, w, d) {
                        assert_eq!(a.get(h, w, d), 0.0);
                    } else if a.get(h, w, d) == spec.tooth_density {
                        teeth += 1;
                    }
                }
            }
        }
        assert!(teeth > 0);
        let other = make_phantom(&PhantomSpec::for_dims([1, 32, 64, 64], 43)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn horseshoe_voxel_count_matches_monte_carlo_area() {
        let mut spec = PhantomSpec::for_dims([1, 32, 64, 64], 0);
        spec.tooth_count = 0;
        let v = make_phantom(&spec).unwrap();
        let counted = v.data().iter().filter(|&&x| x > 0.0).count() as f64;
        // Monte-Carlo estimate of the half-annulus area, times the rows in the band
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let hs = spec.horseshoe();
        let (xr, yr) = (spec.outer[0], spec.outer[1]);
        let samples = 400_000;
        let hits = (0..samples)
            .filter(|_| {
                let x = spec.center[0] + rng.random_range(-xr..xr);
                let y = spec.center[1] + rng.random_range(0.0..yr);
                hs.contains(x, y, 0.0)
            })
            .count() as f64;
        let area = hits / samples as f64 * (2.0 * xr * yr);
        let rows = (0..32).filter(|&h| h as f64 >= spec.z_band[0] && h as f64 <= spec.z_band[1]).count();
        let expect = area * rows as f64;
        assert!((counted - expect).abs() / expect < 0.05, "{counted} vs {expect}");
        let analytic = std::f64::consts::FRAC_PI_2
            * (spec.outer[0] * spec.outer[1] - spec.inner[0] * spec.inner[1])
            * rows as f64;
        assert!((counted - analytic).abs() / analytic < 0.05, "{counted} vs {analytic}");
    }

    #[test]
    fn oversized_teeth_are_rejected() {
        let mut spec = PhantomSpec::for_dims([1, 16, 32, 32], 0);
        spec.tooth_radius = [1.0, 50.0];
        assert!(matches!(make_phantom(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn volume_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let v = rand_volume(5, [1, 3, 4, 5]);
        let p = dir.path().join("a.vol");
        save_volume(&v, &p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);

        let small = Volume::new([1, 2, 3, 4], vec![0.5; 24]).unwrap();
        let bytes = encode_volume(&small);
        assert_eq!(bytes.len(), 32 + 24 * 4);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad, &p), Err(Error::Format { .. })));
        assert!(matches!(decode_volume(&bytes[..bytes.len() - 1], &p), Err(Error::Format { .. })));
        let mut huge = bytes.clone();
        for i in 0..4 {
            huge[16 + 4 * i..20 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_volume(&huge, &p).is_err());
    }
}
