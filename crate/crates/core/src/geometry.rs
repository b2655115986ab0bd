//! Tangent-ray bundle along an elliptical trajectory, horseshoe focal
//! intervals and uniform point sampling.
//!
//! In-plane coordinates are `(x, y)` with `x` along the volume `w` axis and
//! `y` along `d`; `z` runs along `h`. The horseshoe is the region between
//! two concentric ellipses restricted to the half-plane `y >= y0`; its open
//! side faces `-y`.
//!
//! Every ray starts at its tangency point on the trajectory and travels
//! forward only, all in the counter-clockwise tangent direction. Two such
//! half-rays tangent to the same convex curve never meet: the crossing point
//! of their supporting lines lies ahead on one ray and behind on the other.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per ray in the reference hash-grid baseline this design replaces.
pub const BASELINE_SAMPLES: usize = 200;
pub const DEFAULT_SAMPLES: usize = 96;

/// Fractional reduction in per-ray samples relative to [`BASELINE_SAMPLES`].
pub fn sampling_reduction(samples: usize) -> f64 {
    (BASELINE_SAMPLES as f64 - samples as f64) / BASELINE_SAMPLES as f64
}

/// Membership tolerance on the implicit boundary functions.
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horseshoe {
    pub center: [f64; 2],
    pub inner: [f64; 2],
    pub outer: [f64; 2],
}

impl Horseshoe {
    pub fn validate(&self) -> Result<()> {
        let ok = self.inner.iter().all(|&a| a > 0.0)
            && self.inner[0] < self.outer[0]
            && self.inner[1] < self.outer[1];
        if !ok {
            return Err(Error::Config(format!(
                "horseshoe needs 0 < inner < outer, got inner {:?} outer {:?}",
                self.inner, self.outer
            )));
        }
        Ok(())
    }

    fn level(&self, axes: [f64; 2], x: f64, y: f64) -> f64 {
        let u = (x - self.center[0]) / axes[0];
        let v = (y - self.center[1]) / axes[1];
        u * u + v * v
    }

    pub fn inner_level(&self, x: f64, y: f64) -> f64 {
        self.level(self.inner, x, y)
    }

    pub fn outer_level(&self, x: f64, y: f64) -> f64 {
        self.level(self.outer, x, y)
    }

    pub fn contains(&self, x: f64, y: f64, tol: f64) -> bool {
        self.inner_level(x, y) >= 1.0 - tol
            && self.outer_level(x, y) <= 1.0 + tol
            && y - self.center[1] >= -tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub trajectory: [f64; 2],
    pub horseshoe: Horseshoe,
    /// Angular sweep of tangency parameters, radians.
    pub sweep: f64,
    /// Tangency parameter of column 0, radians.
    pub sweep_start: f64,
    /// PX image `(rows, columns)`.
    pub image: [usize; 2],
    /// `z` of row 0 and of the last row.
    pub z_range: [f64; 2],
    pub samples: usize,
}

impl TrajectoryConfig {
    /// Layout matched to [`crate::volume::PhantomSpec::for_dims`] with a
    /// sweep start that centers the covered arch on the `+y` axis.
    pub fn for_volume(spatial: [usize; 3], image: [usize; 2]) -> Self {
        let [h, w, d] = spatial.map(|n| n as f64);
        let horseshoe = Horseshoe {
            center: [(w - 1.0) / 2.0, (d - 1.0) / 2.0],
            inner: [0.25 * w, 0.22 * d],
            outer: [0.42 * w, 0.39 * d],
        };
        let trajectory = [0.2 * horseshoe.inner[0], 0.2 * horseshoe.inner[1]];
        let mid = (horseshoe.inner[0] + horseshoe.outer[0]) / 2.0;
        TrajectoryConfig {
            trajectory,
            horseshoe,
            sweep: PI,
            sweep_start: -(trajectory[0] / mid).acos(),
            image,
            z_range: [0.0, h - 1.0],
            samples: DEFAULT_SAMPLES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.horseshoe.validate()?;
        let [at, bt] = self.trajectory;
        let hs = &self.horseshoe;
        if !(at > 0.0 && bt > 0.0 && at < hs.inner[0] && bt < hs.inner[1]) {
            return Err(Error::Config(format!(
                "trajectory {:?} must lie strictly inside the inner ellipse {:?}",
                self.trajectory, hs.inner
            )));
        }
        if self.samples < 2 {
            return Err(Error::Config(format!("samples per ray must be >= 2, got {}", self.samples)));
        }
        if !(self.sweep > 0.0 && self.sweep <= 2.0 * PI) {
            return Err(Error::Config(format!("sweep must be in (0, 2pi], got {}", self.sweep)));
        }
        if self.image.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("image dims must be positive, got {:?}", self.image)));
        }
        if !(self.sweep_start.is_finite() && self.z_range.iter().all(|z| z.is_finite())) {
            return Err(Error::Config("non-finite sweep start or z range".into()));
        }
        Ok(())
    }

    /// Tangency parameter of column `j`; endpoints of the sweep included.
    pub fn tangency(&self, j: usize) -> f64 {
        let w = self.image[1];
        if w == 1 {
            return self.sweep_start + self.sweep / 2.0;
        }
        self.sweep_start + self.sweep * j as f64 / (w - 1) as f64
    }

    pub fn row_z(&self, i: usize) -> f64 {
        let h = self.image[0];
        if h == 1 {
            return self.z_range[0];
        }
        self.z_range[0] + (self.z_range[1] - self.z_range[0]) * i as f64 / (h - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    /// `None` when the ray misses the horseshoe.
    pub interval: Option<[f64; 2]>,
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }

    pub fn length(&self) -> f64 {
        self.interval.map_or(0.0, |[a, b]| b - a)
    }

    /// Uniform spacing of `samples` points over the focal interval.
    pub fn spacing(&self, samples: usize) -> f64 {
        self.length() / (samples - 1) as f64
    }
}

/// Roots of `a t^2 + b t + c = 0`, ascending; `None` without real roots.
fn quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return None;
    }
    // numerically stable form
    let s = disc.sqrt();
    let q = -0.5 * (b + b.signum() * s);
    let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    Some((r1.min(r2), r1.max(r2)))
}

fn ellipse_roots(hs: &Horseshoe, axes: [f64; 2], o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let ox = (o[0] - hs.center[0]) / axes[0];
    let oy = (o[1] - hs.center[1]) / axes[1];
    let dx = d[0] / axes[0];
    let dy = d[1] / axes[1];
    quadratic(dx * dx + dy * dy, 2.0 * (ox * dx + oy * dy), ox * ox + oy * oy - 1.0)
}

fn intersect(a: [f64; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let lo = a[0].max(b[0]);
    let hi = a[1].min(b[1]);
    (lo < hi).then_some([lo, hi])
}

/// Forward focal interval of a horizontal ray: the first contiguous piece of
/// `{t >= 0}` inside the horseshoe.
pub fn focal_interval(origin: [f64; 3], dir: [f64; 3], hs: &Horseshoe) -> Option<[f64; 2]> {
    let (u1, u2) = ellipse_roots(hs, hs.outer, origin, dir)?;
    let mut base = intersect([0.0, f64::INFINITY], [u1, u2])?;

    let off = origin[1] - hs.center[1];
    if dir[1] > 0.0 {
        base = intersect(base, [-off / dir[1], f64::INFINITY])?;
    } else if dir[1] < 0.0 {
        base = intersect(base, [f64::NEG_INFINITY, -off / dir[1]])?;
    } else if off < 0.0 {
        return None;
    }

    match ellipse_roots(hs, hs.inner, origin, dir) {
        None => Some(base),
        Some((s1, s2)) => intersect(base, [f64::NEG_INFINITY, s1])
            .or_else(|| intersect(base, [s2, f64::INFINITY])),
    }
}

/// Ray through pixel `(i, j)`; its focal interval is filled in.
pub fn ray_for_pixel(cfg: &TrajectoryConfig, i: usize, j: usize) -> Ray {
    let phi = cfg.tangency(j);
    let [at, bt] = cfg.trajectory;
    let c = cfg.horseshoe.center;
    let origin = [c[0] + at * phi.cos(), c[1] + bt * phi.sin(), cfg.row_z(i)];
    let tx = -at * phi.sin();
    let ty = bt * phi.cos();
    let n = tx.hypot(ty);
    let dir = [tx / n, ty / n, 0.0];
    Ray {
        origin,
        dir,
        interval: focal_interval(origin, dir, &cfg.horseshoe),
    }
}

/// Rays in row-major pixel order, index `i * W + j`.
pub fn build_rays(cfg: &TrajectoryConfig) -> Result<Vec<Ray>> {
    cfg.validate()?;
    let [h, w] = cfg.image;
    Ok((0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .map(|(i, j)| ray_for_pixel(cfg, i, j))
        .collect())
}

/// `t_s = t_min + s (t_max - t_min) / (S - 1)` for `s = 0..S`.
pub fn sample_points(ray: &Ray, samples: usize) -> Result<Vec<[f64; 3]>> {
    if samples < 2 {
        return Err(Error::invalid(format!("samples per ray must be >= 2, got {samples}")));
    }
    let [t0, t1] = ray
        .interval
        .ok_or_else(|| Error::invalid("cannot sample a ray with an empty focal interval"))?;
    let step = (t1 - t0) / (samples - 1) as f64;
    Ok((0..samples)
        .map(|s| {
            let t = if s == samples - 1 { t1 } else { t0 + s as f64 * step };
            ray.at(t)
        })
        .collect())
}

/// All rays of a PX image with their sample points.
#[derive(Clone, Debug)]
pub struct RayBundle {
    pub image: [usize; 2],
    pub samples: usize,
    pub rays: Vec<Ray>,
    /// `rays.len() * samples` points; rays without an interval contribute
    /// their origin repeated and are masked by [`RayBundle::is_valid`].
    pub points: Vec<[f64; 3]>,
}

impl RayBundle {
    pub fn build(cfg: &TrajectoryConfig) -> Result<Self> {
        let rays = build_rays(cfg)?;
        let s = cfg.samples;
        let mut points = Vec::with_capacity(rays.len() * s);
        for ray in &rays {
            match ray.interval {
                Some(_) => points.extend(sample_points(ray, s)?),
                None => points.extend(std::iter::repeat_n(ray.origin, s)),
            }
        }
        Ok(RayBundle {
            image: cfg.image,
            samples: s,
            rays,
            points,
        })
    }

    pub fn is_valid(&self, ray: usize) -> bool {
        self.rays[ray].interval.is_some()
    }

    pub fn ray_points(&self, ray: usize) -> &[[f64; 3]] {
        &self.points[ray * self.samples..(ray + 1) * self.samples]
    }

    /// `(row, column)` of ray index `r`.
    pub fn pixel(&self, r: usize) -> (usize, usize) {
        (r / self.image[1], r % self.image[1])
    }

    pub fn valid_count(&self) -> usize {
        self.rays.iter().filter(|r| r.interval.is_some()).count()
    }

    pub fn mean_path_length(&self) -> f64 {
        let n = self.valid_count();
        if n == 0 {
            return 0.0;
        }
        self.rays.iter().map(Ray::length).sum::<f64>() / n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionReport {
    pub pass: bool,
    pub pairs_checked: usize,
    /// Ray indices and in-plane crossing point of the first offending pair.
    pub offending: Option<(usize, usize, [f64; 2])>,
}

const SEGMENT_EPS: f64 = 1e-9;

/// Whether the focal segments of two horizontal rays share a point in-plane.
fn segments_meet(a: &Ray, b: &Ray) -> Option<[f64; 2]> {
    let [a0, a1] = a.interval?;
    let [b0, b1] = b.interval?;
    let (p, r) = ([a.origin[0], a.origin[1]], [a.dir[0], a.dir[1]]);
    let (q, s) = ([b.origin[0], b.origin[1]], [b.dir[0], b.dir[1]]);
    let cross = |u: [f64; 2], v: [f64; 2]| u[0] * v[1] - u[1] * v[0];
    let qp = [q[0] - p[0], q[1] - p[1]];
    let rxs = cross(r, s);
    if rxs.abs() < 1e-12 {
        if cross(qp, r).abs() > 1e-9 {
            return None;
        }
        // collinear: project b's segment onto a's parameter
        let dot = r[0] * s[0] + r[1] * s[1];
        let shift = qp[0] * r[0] + qp[1] * r[1];
        let (e0, e1) = (shift + dot * b0, shift + dot * b1);
        let lo = a0.max(e0.min(e1));
        let hi = a1.min(e0.max(e1));
        return (lo <= hi + SEGMENT_EPS).then(|| [p[0] + lo * r[0], p[1] + lo * r[1]]);
    }
    let t = cross(qp, s) / rxs;
    let u = cross(qp, r) / rxs;
    let within = |x: f64, lo: f64, hi: f64| x >= lo - SEGMENT_EPS && x <= hi + SEGMENT_EPS;
    (within(t, a0, a1) && within(u, b0, b1)).then(|| [p[0] + t * r[0], p[1] + t * r[1]])
}

/// Brute-force check over all same-row pairs of `rays` (row-major,
/// `width` per row).
pub fn validate_rays(rays: &[Ray], width: usize) -> IntersectionReport {
    let mut pairs = 0;
    for row in rays.chunks(width) {
        let base = pairs_base(rays, row);
        for a in 0..row.len() {
            for b in a + 1..row.len() {
                pairs += 1;
                if let Some(pt) = segments_meet(&row[a], &row[b]) {
                    return IntersectionReport {
                        pass: false,
                        pairs_checked: pairs,
                        offending: Some((base + a, base + b, pt)),
                    };
                }
            }
        }
    }
    IntersectionReport {
        pass: true,
        pairs_checked: pairs,
        offending: None,
    }
}

fn pairs_base(all: &[Ray], row: &[Ray]) -> usize {
    (row.as_ptr() as usize - all.as_ptr() as usize) / std::mem::size_of::<Ray>()
}

pub fn validate_no_intersection(cfg: &TrajectoryConfig) -> Result<IntersectionReport> {
    Ok(validate_rays(&build_rays(cfg)?, cfg.image[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> TrajectoryConfig {
        TrajectoryConfig::for_volume([32, 64, 64], [32, 64])
    }

    #[test]
    fn sampling_reduction_is_52_percent() {
        assert_eq!(sampling_reduction(DEFAULT_SAMPLES), 0.52);
        assert_eq!(desk().samples, 96);
    }

    #[test]
    fn circle_tangents_are_perpendicular_to_radius() {
        let mut cfg = desk();
        cfg.trajectory = [5.0, 5.0];
        for ray in build_rays(&cfg).unwrap() {
            let rx = ray.origin[0] - cfg.horseshoe.center[0];
            let ry = ray.origin[1] - cfg.horseshoe.center[1];
            assert!((rx * ray.dir[0] + ry * ray.dir[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn two_columns_hit_sweep_endpoints() {
        let mut cfg = desk();
        cfg.image = [1, 2];
        cfg.sweep_start = 0.0;
        assert_eq!(cfg.tangency(0), 0.0);
        assert_eq!(cfg.tangency(1), PI);
    }

    #[test]
    fn directions_are_unit_and_rows_follow_z() {
        let cfg = desk();
        let rays = build_rays(&cfg).unwrap();
        assert_eq!(rays.len(), 32 * 64);
        for (r, ray) in rays.iter().enumerate() {
            let n = ray.dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(ray.dir[2], 0.0);
            assert_eq!(ray.origin[2], (r / 64) as f64);
        }
    }

    #[test]
    fn build_rays_is_order_independent() {
        let cfg = desk();
        let rays = build_rays(&cfg).unwrap();
        for r in (0..rays.len()).rev().step_by(7) {
            assert_eq!(ray_for_pixel(&cfg, r / 64, r % 64), rays[r]);
        }
    }

    fn scan_interval(ray: &Ray, hs: &Horseshoe, tmax: f64, n: usize) -> Option<[f64; 2]> {
        // first contiguous run of inside samples
        let dt = tmax / n as f64;
        let mut start = None;
        for k in 0..=n {
            let t = k as f64 * dt;
            let p = ray.at(t);
            let inside = hs.contains(p[0], p[1], 0.0);
            match (inside, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => return Some([s, t - dt]),
                _ => {}
            }
        }
        start.map(|s| [s, tmax])
    }

    #[test]
    fn focal_interval_matches_dense_scan() {
        let cfg = desk();
        let rays = build_rays(&cfg).unwrap();
        let tmax = 200.0;
        let n = 400_000;
        let tol = 2.0 * tmax / n as f64;
        for ray in rays.iter().take(64).step_by(3) {
            let scan = scan_interval(ray, &cfg.horseshoe, tmax, n);
            match (ray.interval, scan) {
                (Some([a, b]), Some([c, d])) => {
                    assert!((a - c).abs() < tol && (b - d).abs() < tol, "{a},{b} vs {c},{d}");
                }
                (None, None) => {}
                other => panic!("mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn symmetric_axis_chord_is_annulus_thickness() {
        let hs = Horseshoe {
            center: [0.0, 0.0],
            inner: [10.0, 8.0],
            outer: [20.0, 15.0],
        };
        let iv = focal_interval([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], &hs).unwrap();
        assert!((iv[0] - 8.0).abs() < 1e-12 && (iv[1] - 15.0).abs() < 1e-12);
        let iv = focal_interval([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], &hs).unwrap();
        assert!((iv[1] - iv[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn missing_and_limiting_rays() {
        let hs = Horseshoe {
            center: [0.0, 0.0],
            inner: [10.0, 8.0],
            outer: [20.0, 15.0],
        };
        assert_eq!(focal_interval([0.0, 30.0, 0.0], [1.0, 0.0, 0.0], &hs), None);
        // posterior half-plane excluded
        assert_eq!(focal_interval([0.0, -1.0, 0.0], [0.0, -1.0, 0.0], &hs), None);
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let shrunk = Horseshoe {
                outer: [10.0 + 10.0 / 2f64.powi(k), 8.0 + 7.0 / 2f64.powi(k)],
                ..hs
            };
            let len = focal_interval([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], &shrunk)
                .map_or(0.0, |[a, b]| b - a);
            assert!(len < prev);
            prev = len;
        }
        assert!(prev < 0.2);
    }

    #[test]
    fn sample_spacing_and_endpoints() {
        let ray = Ray {
            origin: [0.0; 3],
            dir: [1.0, 0.0, 0.0],
            interval: Some([0.0, 95.0]),
        };
        let pts = sample_points(&ray, 96).unwrap();
        for (s, p) in pts.iter().enumerate() {
            assert_eq!(p[0], s as f64);
        }
        let two = sample_points(&ray, 2).unwrap();
        assert_eq!((two[0][0], two[1][0]), (0.0, 95.0));
        assert!(sample_points(&ray, 1).is_err());
        let empty = Ray { interval: None, ..ray };
        assert!(sample_points(&empty, 4).is_err());
    }

    #[test]
    fn bundle_points_lie_in_horseshoe_with_constant_spacing() {
        let cfg = desk();
        let b = RayBundle::build(&cfg).unwrap();
        assert!(b.valid_count() > b.rays.len() * 9 / 10, "{}", b.valid_count());
        for r in 0..b.rays.len() {
            if !b.is_valid(r) {
                continue;
            }
            let pts = b.ray_points(r);
            let step = b.rays[r].spacing(b.samples);
            for (s, p) in pts.iter().enumerate() {
                assert!(cfg.horseshoe.contains(p[0], p[1], BOUNDARY_TOL));
                if s > 0 {
                    let q = pts[s - 1];
                    let dt = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    assert!((dt - step).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn default_config_has_no_intersections() {
        let report = validate_no_intersection(&desk()).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.pairs_checked, 32 * 64 * 63 / 2);
    }

    #[test]
    fn identical_rays_fail_and_parallel_rays_pass() {
        let ray = Ray {
            origin: [0.0, 0.0, 0.0],
            dir: [1.0, 0.0, 0.0],
            interval: Some([1.0, 5.0]),
        };
        let report = validate_rays(&[ray, ray], 2);
        assert!(!report.pass);
        assert_eq!(report.offending.map(|o| (o.0, o.1)), Some((0, 1)));
        let shifted = Ray {
            origin: [0.0, 1.0, 0.0],
            ..ray
        };
        assert!(validate_rays(&[ray, shifted], 2).pass);
        let crossing = Ray {
            origin: [3.0, -2.0, 0.0],
            dir: [0.0, 1.0, 0.0],
            interval: Some([0.0, 4.0]),
        };
        assert!(!validate_rays(&[ray, crossing], 2).pass);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = desk();
        cfg.trajectory = [100.0, 1.0];
        assert!(matches!(build_rays(&cfg), Err(Error::Config(_))));
        let mut cfg = desk();
        cfg.samples = 1;
        assert!(build_rays(&cfg).is_err());
        let mut cfg = desk();
        cfg.sweep = 7.0;
        assert!(build_rays(&cfg).is_err());
    }
}
