//! Uniform sampling on hyperspherical caps and bands, plus the small amount
//! of spherical geometry the rest of the crate needs.
//!
//! A cap of half-angle `phi` around a pole `v` on the sphere of radius `R`
//! in `R^d` is sampled exactly, without rejection. The cosine of the polar
//! angle of a uniform point on `S^{d-1}` is `1 - 2U` with
//! `U ~ Beta((d-1)/2, (d-1)/2)`, so a cap is a truncation of that law to
//! `U <= sin^2(phi/2)` and a band is the slice between two such bounds. The
//! truncated variable is drawn by inverting the Beta CDF on a uniform
//! variate, the orthogonal part is uniform on the remaining `(d-2)`-sphere,
//! and a Householder reflection carries the canonical pole `e_1` onto `v`.

mod beta;

pub use beta::{beta_cdf, beta_inv_cdf, beta_pdf};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rng::RngStream;

const POLE_TOL: f64 = 1e-12;

/// Uniform distribution on `{w : |w| = R, angle(w, pole) <= half_angle}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapSpec {
    pub dim: usize,
    pub half_angle: f64,
    pub pole: Vec<f64>,
    pub radius: f64,
}

/// Uniform distribution on
/// `{w : |w| = R, start_angle <= angle(w, pole) <= start_angle + width}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub dim: usize,
    pub start_angle: f64,
    pub width: f64,
    pub pole: Vec<f64>,
    pub radius: f64,
}

fn check_pole(dim: usize, pole: &[f64]) -> Result<()> {
    if dim < 2 {
        return Err(domain(format!("sphere dimension must be >= 2, got {dim}")));
    }
    if pole.len() != dim {
        return Err(crate::Error::Dimension { expected: dim, got: pole.len() });
    }
    let n = norm(pole);
    if (n - 1.0).abs() > POLE_TOL {
        return Err(domain(format!("pole must be a unit vector, |pole| = {n}")));
    }
    Ok(())
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(domain(format!("radius must be positive, got {radius}")));
    }
    Ok(())
}

/// First canonical basis vector of `R^dim`.
pub fn unit_axis(dim: usize, axis: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[axis] = 1.0;
    v
}

impl CapSpec {
    pub fn new(dim: usize, half_angle: f64, pole: Vec<f64>, radius: f64) -> Result<Self> {
        check_pole(dim, &pole)?;
        check_radius(radius)?;
        if !(half_angle > 0.0 && half_angle <= std::f64::consts::PI) {
            return Err(domain(format!("cap half-angle must lie in (0, pi], got {half_angle}")));
        }
        Ok(Self { dim, half_angle, pole, radius })
    }

    /// Unit-radius cap around `e_1`.
    pub fn around_e1(dim: usize, half_angle: f64) -> Result<Self> {
        if dim < 2 {
            return Err(domain(format!("sphere dimension must be >= 2, got {dim}")));
        }
        Self::new(dim, half_angle, unit_axis(dim, 0), 1.0)
    }

    pub fn full_sphere(dim: usize) -> Result<Self> {
        Self::around_e1(dim, std::f64::consts::PI)
    }

    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        check_radius(radius)?;
        self.radius = radius;
        Ok(self)
    }

    pub fn contains(&self, w: &[f64]) -> bool {
        match angle_between(w, &self.pole) {
            Ok(a) => a <= self.half_angle,
            Err(_) => false,
        }
    }
}

impl BandSpec {
    pub fn new(dim: usize, start_angle: f64, width: f64, pole: Vec<f64>, radius: f64) -> Result<Self> {
        check_pole(dim, &pole)?;
        check_radius(radius)?;
        if start_angle < 0.0 || width <= 0.0 {
            return Err(domain(format!(
                "band needs start >= 0 and width > 0, got start={start_angle}, width={width}"
            )));
        }
        // A few ulps of slack so that degree grids like 175 + 5 convert cleanly.
        if start_angle + width > std::f64::consts::PI + 1e-12 {
            return Err(domain(format!(
                "band end {} exceeds pi",
                start_angle + width
            )));
        }
        let width = width.min(std::f64::consts::PI - start_angle);
        Ok(Self { dim, start_angle, width, pole, radius })
    }

    pub fn around_e1(dim: usize, start_angle: f64, width: f64) -> Result<Self> {
        if dim < 2 {
            return Err(domain(format!("sphere dimension must be >= 2, got {dim}")));
        }
        Self::new(dim, start_angle, width, unit_axis(dim, 0), 1.0)
    }

    pub fn end_angle(&self) -> f64 {
        self.start_angle + self.width
    }
}

/// A cap or a band; the two supports used for task and input distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SphereRegion {
    Cap(CapSpec),
    Band(BandSpec),
}

impl SphereRegion {
    pub fn dim(&self) -> usize {
        match self {
            Self::Cap(c) => c.dim,
            Self::Band(b) => b.dim,
        }
    }

    pub fn pole(&self) -> &[f64] {
        match self {
            Self::Cap(c) => &c.pole,
            Self::Band(b) => &b.pole,
        }
    }

    pub fn radius(&self) -> f64 {
        match self {
            Self::Cap(c) => c.radius,
            Self::Band(b) => b.radius,
        }
    }

    /// Polar-angle interval `[lo, hi]` covered by the region.
    pub fn angle_range(&self) -> (f64, f64) {
        match self {
            Self::Cap(c) => (0.0, c.half_angle),
            Self::Band(b) => (b.start_angle, b.end_angle()),
        }
    }

    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        check_radius(radius)?;
        let mut out = self.clone();
        match &mut out {
            Self::Cap(c) => c.radius = radius,
            Self::Band(b) => b.radius = radius,
        }
        Ok(out)
    }

    pub fn sampler(&self) -> Result<RegionSampler> {
        let (lo, hi) = self.angle_range();
        RegionSampler::new(self.dim(), self.pole().to_vec(), self.radius(), lo, hi)
    }
}

impl From<CapSpec> for SphereRegion {
    fn from(c: CapSpec) -> Self {
        Self::Cap(c)
    }
}

impl From<BandSpec> for SphereRegion {
    fn from(b: BandSpec) -> Self {
        Self::Band(b)
    }
}

/// Sampler for a region with the Beta-CDF truncation bounds cached.
#[derive(Clone, Debug)]
pub struct RegionSampler {
    dim: usize,
    radius: f64,
    shape: f64,
    /// `F(u_lo)`, `F(u_hi)` for the Beta law of `U = (1 - cos angle) / 2`.
    t_range: (f64, f64),
    u_range: (f64, f64),
    /// `e_1 - pole` and its squared norm; `None` when the pole is `e_1`.
    reflector: Option<(Vec<f64>, f64)>,
}

impl RegionSampler {
    fn new(dim: usize, pole: Vec<f64>, radius: f64, min_angle: f64, max_angle: f64) -> Result<Self> {
        check_pole(dim, &pole)?;
        let shape = (dim as f64 - 1.0) / 2.0;
        let u_of = |angle: f64| (0.5 * angle).sin().powi(2);
        let u_range = (u_of(min_angle), u_of(max_angle));
        let t_range = (beta_cdf(u_range.0, shape, shape)?, beta_cdf(u_range.1, shape, shape)?);
        let mut u = pole.iter().map(|p| -p).collect::<Vec<_>>();
        u[0] += 1.0;
        let u_sq = dot(&u, &u);
        let reflector = (u_sq > 1e-24).then_some((u, u_sq));
        Ok(Self { dim, radius, shape, t_range, u_range, reflector })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let t = rng.uniform_in(self.t_range.0, self.t_range.1);
        let u = beta_inv_cdf(t, self.shape, self.shape)
            .unwrap_or(0.5 * (self.u_range.0 + self.u_range.1))
            .clamp(self.u_range.0, self.u_range.1);
        let cos = 1.0 - 2.0 * u;
        let sin = 2.0 * (u * (1.0 - u)).sqrt();

        let mut w = Vec::with_capacity(self.dim);
        w.push(self.radius * cos);
        let orth = loop {
            let g = rng.normal_vec(self.dim - 1);
            let n = norm(&g);
            if n > 0.0 {
                break g.into_iter().map(|x| x / n).collect::<Vec<_>>();
            }
        };
        w.extend(orth.into_iter().map(|x| self.radius * sin * x));

        if let Some((r, r_sq)) = &self.reflector {
            let coef = 2.0 * dot(r, &w) / r_sq;
            for (wi, ri) in w.iter_mut().zip(r) {
                *wi -= coef * ri;
            }
        }
        w
    }
}

pub fn sample_cap(rng: &mut RngStream, spec: &CapSpec) -> Result<Vec<f64>> {
    Ok(SphereRegion::Cap(spec.clone()).sampler()?.sample(rng))
}

pub fn sample_band(rng: &mut RngStream, spec: &BandSpec) -> Result<Vec<f64>> {
    Ok(SphereRegion::Band(spec.clone()).sampler()?.sample(rng))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Angle in `[0, pi]` between two nonzero vectors.
pub fn angle_between(u: &[f64], w: &[f64]) -> Result<f64> {
    if u.len() != w.len() {
        return Err(crate::Error::Dimension { expected: u.len(), got: w.len() });
    }
    let (nu, nw) = (norm(u), norm(w));
    if nu == 0.0 || nw == 0.0 {
        return Err(domain("angle_between: zero vector"));
    }
    Ok((dot(u, w) / (nu * nw)).clamp(-1.0, 1.0).acos())
}

/// Spherical linear interpolation between unit vectors.
pub fn great_circle_interpolate(w_a: &[f64], w_b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(domain(format!("interpolation parameter {alpha} outside [0, 1]")));
    }
    let omega = angle_between(w_a, w_b)?;
    if std::f64::consts::PI - omega < 1e-9 {
        return Err(domain("great_circle_interpolate: antipodal endpoints"));
    }
    if omega < 1e-12 {
        return Ok(w_a.to_vec());
    }
    let s = omega.sin();
    let ca = ((1.0 - alpha) * omega).sin() / s;
    let cb = (alpha * omega).sin() / s;
    Ok(w_a.iter().zip(w_b).map(|(a, b)| ca * a + cb * b).collect())
}

/// Nearest point of a cap to a unit target.
#[derive(Clone, Debug, PartialEq)]
pub struct CapProjection {
    pub point: Vec<f64>,
    /// Set when the target is antipodal to the pole, so every point of the
    /// boundary circle is equally near and a canonical one was chosen.
    pub degenerate: bool,
}

pub fn project_to_cap(w_star: &[f64], spec: &CapSpec) -> Result<CapProjection> {
    if w_star.len() != spec.dim {
        return Err(crate::Error::Dimension { expected: spec.dim, got: w_star.len() });
    }
    let n = norm(w_star);
    if (n - 1.0).abs() > 1e-9 {
        return Err(domain(format!("project_to_cap expects a unit target, |w| = {n}")));
    }
    let angle = angle_between(w_star, &spec.pole)?;
    if angle <= spec.half_angle {
        return Ok(CapProjection { point: w_star.to_vec(), degenerate: false });
    }
    let c = dot(w_star, &spec.pole);
    let mut perp: Vec<f64> = w_star.iter().zip(&spec.pole).map(|(w, p)| w - c * p).collect();
    let mut degenerate = false;
    if norm(&perp) < 1e-12 {
        degenerate = true;
        let axis = (0..spec.dim)
            .find(|&i| spec.pole[i].abs() < 1.0 - 1e-12)
            .unwrap_or(1);
        let e = unit_axis(spec.dim, axis);
        let ce = dot(&e, &spec.pole);
        perp = e.iter().zip(&spec.pole).map(|(x, p)| x - ce * p).collect();
    }
    let pn = norm(&perp);
    let (s, co) = spec.half_angle.sin_cos();
    let point = spec
        .pole
        .iter()
        .zip(&perp)
        .map(|(p, q)| co * p + s * q / pn)
        .collect();
    Ok(CapProjection { point, degenerate })
}
