//! Double-Gaussian biphoton source.
//!
//! A pair is drawn from a Gaussian marginal for the first photon and a
//! Gaussian conditional density for its twin. In the near field the twin sits
//! at the same transverse position (shifted into the other polarization spot);
//! in the far field it sits at the mirrored position through the spot center.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{OpticalGeometry, HEISENBERG_BOUND};

/// A 2-vector in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Xy {
    pub x: f64,
    pub y: f64,
}

impl Xy {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    fn norm2(self) -> f64 {
        self.x * self.x + self.y * self.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    NearField,
    FarField,
}

impl Plane {
    pub fn code(self) -> u8 {
        match self {
            Plane::NearField => 0,
            Plane::FarField => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Plane::NearField),
            1 => Some(Plane::FarField),
            _ => None,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Plane::NearField => "nf",
            Plane::FarField => "ff",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Signal,
    Idler,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonEvent {
    pub x: f64,
    pub y: f64,
    pub arm: Arm,
}

/// Photons emitted during one frame. Twins are adjacent in generation order,
/// but nothing downstream is allowed to rely on that.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonEventList {
    pub plane: Plane,
    pub events: Vec<PhotonEvent>,
}

/// Center pair for the two polarization spots in one plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamCenters {
    pub signal: Xy,
    pub idler: Xy,
}

/// Smooth deterministic modulation of the pair rate along x.
///
/// The weight rises linearly from 1 to `ratio` over four marginal widths
/// centered on the signal spot, and is flat outside that band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub ratio: f64,
}

impl Envelope {
    fn acceptance(&self, x: f64, center: f64, sigma: f64) -> f64 {
        let t = ((x - center) / (4.0 * sigma) + 0.5).clamp(0.0, 1.0);
        (1.0 + (self.ratio - 1.0) * t) / self.ratio
    }

    /// Mean acceptance for a Gaussian marginal, used to keep fluence fixed
    /// when the envelope is switched on.
    pub fn mean_acceptance(&self) -> f64 {
        // t = clamp(z/4 + 1/2) with z ~ N(0,1); integrate numerically.
        let n = 4000;
        let (lo, hi) = (-8.0f64, 8.0f64);
        let dz = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let z = lo + (i as f64 + 0.5) * dz;
            let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            acc += pdf * self.acceptance(z, 0.0, 1.0) * dz;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    /// Pump envelope widths (near-field pixels); sets the near-field marginal.
    pub pump_sigma: Xy,
    /// Width of the near-field pair-separation density.
    pub nf_pair_sigma: Xy,
    /// Width of the far-field momentum-sum density.
    pub ff_sum_sigma: Xy,
    /// Width of each photon's far-field marginal.
    pub ff_marginal_sigma: Xy,
    pub mean_pairs_per_frame: f64,
    /// Fraction of each arm's photons emitted without a partner. Pairs arrive
    /// at rate (1 − u)·mean and each arm receives independent singles at rate
    /// u·mean drawn from the same marginal, so 1 removes all correlation.
    pub unpaired_fraction: f64,
    pub near_centers: BeamCenters,
    pub far_centers: BeamCenters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Envelope>,
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("source.pump_sigma", self.pump_sigma),
            ("source.nf_pair_sigma", self.nf_pair_sigma),
            ("source.ff_sum_sigma", self.ff_sum_sigma),
            ("source.ff_marginal_sigma", self.ff_marginal_sigma),
        ];
        for (name, s) in sigmas {
            if !(s.x.is_finite() && s.y.is_finite() && s.x > 0.0 && s.y > 0.0) {
                return Err(Error::config(name, format!("widths must be > 0, got ({}, {})", s.x, s.y)));
            }
        }
        if self.ff_marginal_sigma.x < self.ff_sum_sigma.x || self.ff_marginal_sigma.y < self.ff_sum_sigma.y {
            return Err(Error::config(
                "source.ff_marginal_sigma",
                "far-field marginal must be at least as wide as the momentum-sum width",
            ));
        }
        if !(self.mean_pairs_per_frame.is_finite() && self.mean_pairs_per_frame >= 0.0) {
            return Err(Error::config("source.mean_pairs_per_frame", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.unpaired_fraction) {
            return Err(Error::config("source.unpaired_fraction", "must lie in [0, 1]"));
        }
        if let Some(env) = self.envelope {
            if !(env.ratio.is_finite() && env.ratio >= 1.0) {
                return Err(Error::config("source.envelope.ratio", "must be finite and >= 1"));
            }
        }
        Ok(())
    }

    pub fn centers(&self, plane: Plane) -> BeamCenters {
        match plane {
            Plane::NearField => self.near_centers,
            Plane::FarField => self.far_centers,
        }
    }

    /// Width of the conditional (pair) density in `plane`.
    pub fn pair_sigma(&self, plane: Plane) -> Xy {
        match plane {
            Plane::NearField => self.nf_pair_sigma,
            Plane::FarField => self.ff_sum_sigma,
        }
    }

    /// Gaussian marginals `(center, sigma)` of the signal and idler photons.
    pub fn marginals(&self, plane: Plane) -> [(Xy, Xy); 2] {
        let c = self.centers(plane);
        let (m1, pair) = match plane {
            Plane::NearField => (self.pump_sigma, self.nf_pair_sigma),
            Plane::FarField => (self.ff_marginal_sigma, self.ff_sum_sigma),
        };
        let m2 = Xy::new(m1.x.hypot(pair.x), m1.y.hypot(pair.y));
        [(c.signal, m1), (c.idler, m2)]
    }

    fn signal_marginal_sigma(&self, plane: Plane) -> Xy {
        match plane {
            Plane::NearField => self.pump_sigma,
            Plane::FarField => self.ff_marginal_sigma,
        }
    }
}

/// Width ratios used when solving for a target violation factor.
///
/// `near` and `far` give the shape of the near-field pair width and the
/// far-field momentum-sum width; one common scale factor is solved for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anisotropy {
    pub near: Xy,
    pub far: Xy,
}

impl Anisotropy {
    pub fn isotropic() -> Self {
        Self {
            near: Xy::new(1.0, 1.0),
            far: Xy::new(1.0, 1.0),
        }
    }

    /// Shape of the widths reported for the BBO experiment
    /// (near 1.53 × 2.2 px, far 2.35 × 1.85 px).
    pub fn published() -> Self {
        Self {
            near: Xy::new(1.53, 2.2),
            far: Xy::new(2.35, 1.85),
        }
    }
}

/// Violation factor the analysis should recover from an ideal detector.
pub fn expected_violation(p: &SourceParams, g: &OpticalGeometry) -> f64 {
    let u = g.product_unit();
    let product = 0.25 * p.nf_pair_sigma.norm2() * p.ff_sum_sigma.norm2() * u * u;
    HEISENBERG_BOUND / product
}

/// Returns `template` with pair widths rescaled so that
/// `expected_violation` equals `v_target`.
pub fn calibrate_to_violation(
    v_target: f64,
    anisotropy: Anisotropy,
    g: &OpticalGeometry,
    template: &SourceParams,
) -> Result<SourceParams> {
    if !(v_target.is_finite() && v_target > 0.0) {
        return Err(Error::config("v_target", "must be finite and > 0"));
    }
    for (name, a) in [("anisotropy.near", anisotropy.near), ("anisotropy.far", anisotropy.far)] {
        if !(a.x.is_finite() && a.y.is_finite() && a.x > 0.0 && a.y > 0.0) {
            return Err(Error::config(name, "anisotropy components must be > 0"));
        }
    }
    let u = g.product_unit();
    // ¼·s⁴·|near|²·|far|²·u² = 1/(4V)
    let s4 = 1.0 / (v_target * anisotropy.near.norm2() * anisotropy.far.norm2() * u * u);
    let s = s4.powf(0.25);
    let mut p = template.clone();
    p.nf_pair_sigma = anisotropy.near.scale(s);
    p.ff_sum_sigma = anisotropy.far.scale(s);
    p.validate()?;
    Ok(p)
}

fn gauss2<R: Rng + ?Sized>(rng: &mut R, sigma: Xy) -> Xy {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    Xy::new(a * sigma.x, b * sigma.y)
}

/// Draws one accepted pair: signal and idler positions.
fn draw_pair<R: Rng + ?Sized>(p: &SourceParams, plane: Plane, rng: &mut R) -> (Xy, Xy) {
    let c = p.centers(plane);
    let m = p.signal_marginal_sigma(plane);
    loop {
        let d1 = gauss2(rng, m);
        if let Some(env) = p.envelope {
            if env.ratio > 1.0 {
                let u: f64 = rng.random();
                if u >= env.acceptance(d1.x, 0.0, m.x) {
                    continue;
                }
            }
        }
        let r1 = Xy::new(c.signal.x + d1.x, c.signal.y + d1.y);
        let e = gauss2(rng, p.pair_sigma(plane));
        let r2 = match plane {
            // same transverse position, shifted to the idler spot
            Plane::NearField => Xy::new(c.idler.x + d1.x + e.x, c.idler.y + d1.y + e.y),
            // opposite transverse momentum
            Plane::FarField => Xy::new(c.idler.x - d1.x + e.x, c.idler.y - d1.y + e.y),
        };
        return (r1, r2);
    }
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> Result<usize> {
    if mean <= 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(mean).map_err(|e| Error::config("source.mean_pairs_per_frame", e.to_string()))?;
    Ok(d.sample(rng) as usize)
}

/// Samples the photons of one frame.
pub fn sample_frame<R: Rng + ?Sized>(p: &SourceParams, plane: Plane, rng: &mut R) -> Result<PhotonEventList> {
    p.validate()?;
    let u = p.unpaired_fraction;
    let n_pairs = poisson(rng, p.mean_pairs_per_frame * (1.0 - u))?;
    let n_singles = [poisson(rng, p.mean_pairs_per_frame * u)?, poisson(rng, p.mean_pairs_per_frame * u)?];
    let mut events = Vec::with_capacity(2 * n_pairs + n_singles[0] + n_singles[1]);
    for _ in 0..n_pairs {
        let (r1, r2) = draw_pair(p, plane, rng);
        events.push(PhotonEvent { x: r1.x, y: r1.y, arm: Arm::Signal });
        events.push(PhotonEvent { x: r2.x, y: r2.y, arm: Arm::Idler });
    }
    for _ in 0..n_singles[0] {
        let r = draw_pair(p, plane, rng).0;
        events.push(PhotonEvent { x: r.x, y: r.y, arm: Arm::Signal });
    }
    for _ in 0..n_singles[1] {
        let r = draw_pair(p, plane, rng).1;
        events.push(PhotonEvent { x: r.x, y: r.y, arm: Arm::Idler });
    }
    Ok(PhotonEventList { plane, events })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    pub(crate) fn desk_source() -> SourceParams {
        SourceParams {
            pump_sigma: Xy::new(12.0, 12.0),
            nf_pair_sigma: Xy::new(1.53, 2.2),
            ff_sum_sigma: Xy::new(2.35, 1.85),
            ff_marginal_sigma: Xy::new(12.0, 12.0),
            mean_pairs_per_frame: 500.0,
            unpaired_fraction: 0.0,
            near_centers: BeamCenters {
                signal: Xy::new(39.5, 63.5),
                idler: Xy::new(87.5, 63.5),
            },
            far_centers: BeamCenters {
                signal: Xy::new(31.5, 63.5),
                idler: Xy::new(95.5, 63.5),
            },
            envelope: None,
        }
    }

    #[test]
    fn zero_rate_gives_empty_frame() {
        let mut p = desk_source();
        p.mean_pairs_per_frame = 0.0;
        let ev = sample_frame(&p, Plane::NearField, &mut stream(1, Domain::Test, 0)).unwrap();
        assert!(ev.events.is_empty());
    }

    #[test]
    fn tight_pairs_mirror_exactly() {
        let mut p = desk_source();
        p.nf_pair_sigma = Xy::new(1e-12, 1e-12);
        p.ff_sum_sigma = Xy::new(1e-12, 1e-12);
        for plane in [Plane::NearField, Plane::FarField] {
            let ev = sample_frame(&p, plane, &mut stream(2, Domain::Test, 0)).unwrap();
            let c = p.centers(plane);
            for pair in ev.events.chunks(2) {
                assert_eq!(pair[0].arm, Arm::Signal);
                assert_eq!(pair[1].arm, Arm::Idler);
                let (dx, dy) = (pair[0].x - c.signal.x, pair[0].y - c.signal.y);
                let (ex, ey) = match plane {
                    Plane::NearField => (c.idler.x + dx, c.idler.y + dy),
                    Plane::FarField => (c.idler.x - dx, c.idler.y - dy),
                };
                assert!((pair[1].x - ex).abs() < 1e-9 && (pair[1].y - ey).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_zero_sigma() {
        let mut p = desk_source();
        p.nf_pair_sigma.x = 0.0;
        assert!(sample_frame(&p, Plane::NearField, &mut stream(1, Domain::Test, 0)).is_err());
        let mut p = desk_source();
        p.ff_marginal_sigma = Xy::new(1.0, 1.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn calibration_round_trip() {
        let g = OpticalGeometry::published();
        let t = desk_source();
        for v in [0.5, 1.0, 4.15, 5.16] {
            for a in [Anisotropy::isotropic(), Anisotropy::published()] {
                let p = calibrate_to_violation(v, a, &g, &t).unwrap();
                assert!((expected_violation(&p, &g) - v).abs() < 1e-6 * v);
            }
        }
        // boundary: isotropic V=1 sits exactly on the Heisenberg bound
        let p = calibrate_to_violation(1.0, Anisotropy::isotropic(), &g, &t).unwrap();
        let u = g.product_unit();
        let prod = 0.25 * p.nf_pair_sigma.norm2() * p.ff_sum_sigma.norm2() * u * u;
        assert!((prod - 0.25).abs() < 1e-12);
        // the 2D product for V=5.16 equals ħ²/(4·5.16) = 0.0485 ħ²
        let p = calibrate_to_violation(5.16, Anisotropy::published(), &g, &t).unwrap();
        let prod = 0.25 * p.nf_pair_sigma.norm2() * p.ff_sum_sigma.norm2() * u * u;
        assert!((prod - 0.0485).abs() < 1e-4, "{prod}");
        // aspect ratios are preserved
        assert!((p.nf_pair_sigma.x / p.nf_pair_sigma.y - 1.53 / 2.2).abs() < 1e-12);
        assert!(calibrate_to_violation(1.0, Anisotropy { near: Xy::new(0.0, 1.0), far: Xy::new(1.0, 1.0) }, &g, &t).is_err());
        assert!(calibrate_to_violation(0.0, Anisotropy::isotropic(), &g, &t).is_err());
    }

    #[test]
    fn violation_from_published_widths() {
        let g = OpticalGeometry::published();
        let p = desk_source();
        // ¼·(1.53²+2.2²)(2.35²+1.85²)·u², u = 2π·(16e-6)²/(0.037·710e-9)
        let u = 2.0 * std::f64::consts::PI * 16e-6 * 16e-6 / (0.037 * 710e-9);
        let oracle = 0.25 / (0.25 * (1.53f64.powi(2) + 2.2f64.powi(2)) * (2.35f64.powi(2) + 1.85f64.powi(2)) * u * u);
        let v = expected_violation(&p, &g);
        assert!((v - oracle).abs() < 1e-9);
        assert!((v - 4.15).abs() < 0.01, "{v}");
        let mut q = p.clone();
        q.nf_pair_sigma = q.nf_pair_sigma.scale(2.0);
        assert!((expected_violation(&q, &g) - v / 4.0).abs() < 1e-12);
    }

    fn stats(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn conditional_width_matches_pair_sigma() {
        let g = OpticalGeometry::published();
        let mut p = calibrate_to_violation(5.16, Anisotropy::published(), &g, &desk_source()).unwrap();
        p.mean_pairs_per_frame = 1000.0;
        for plane in [Plane::NearField, Plane::FarField] {
            let c = p.centers(plane);
            let (mut ex, mut ey) = (Vec::new(), Vec::new());
            for i in 0..100 {
                let ev = sample_frame(&p, plane, &mut stream(3, Domain::Test, i)).unwrap();
                for pair in ev.events.chunks(2) {
                    let (dx, dy) = (pair[0].x - c.signal.x, pair[0].y - c.signal.y);
                    let (ix, iy) = match plane {
                        Plane::NearField => (c.idler.x + dx, c.idler.y + dy),
                        Plane::FarField => (c.idler.x - dx, c.idler.y - dy),
                    };
                    ex.push(pair[1].x - ix);
                    ey.push(pair[1].y - iy);
                }
            }
            assert!(ex.len() > 90_000);
            let s = p.pair_sigma(plane);
            let (_, vx) = stats(&ex);
            let (_, vy) = stats(&ey);
            assert!((vx.sqrt() / s.x - 1.0).abs() < 0.02);
            assert!((vy.sqrt() / s.y - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn pairing_sign_convention() {
        let mut p = desk_source();
        p.mean_pairs_per_frame = 2000.0;
        for (plane, sign) in [(Plane::NearField, 1.0), (Plane::FarField, -1.0)] {
            let c = p.centers(plane);
            let ev = sample_frame(&p, plane, &mut stream(4, Domain::Test, 0)).unwrap();
            let (mut cx, mut cy) = (0.0, 0.0);
            for pair in ev.events.chunks(2) {
                cx += (pair[0].x - c.signal.x) * (pair[1].x - c.idler.x);
                cy += (pair[0].y - c.signal.y) * (pair[1].y - c.idler.y);
            }
            assert!(sign * cx > 0.0 && sign * cy > 0.0);
        }
    }

    #[test]
    fn pair_counts_are_poissonian() {
        let mut p = desk_source();
        p.mean_pairs_per_frame = 20.0;
        let counts: Vec<f64> = (0..4000)
            .map(|i| sample_frame(&p, Plane::NearField, &mut stream(5, Domain::Test, i)).unwrap().events.len() as f64 / 2.0)
            .collect();
        let (m, v) = stats(&counts);
        assert!((m - 20.0).abs() < 4.0 * (20.0f64 / 4000.0).sqrt());
        // var of the sample variance for Poisson ≈ (2λ²+λ)/n
        assert!((v - m).abs() < 4.0 * ((2.0 * 400.0 + 20.0) / 4000.0f64).sqrt());
    }

    fn ks_distance(a: &mut [f64], b: &mut [f64]) -> f64 {
        a.sort_by(|x, y| x.total_cmp(y));
        b.sort_by(|x, y| x.total_cmp(y));
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn unpaired_photons_keep_marginals() {
        let mut p = desk_source();
        p.mean_pairs_per_frame = 1000.0;
        let mut q = p.clone();
        q.unpaired_fraction = 1.0;
        for plane in [Plane::NearField, Plane::FarField] {
            for arm in [Arm::Signal, Arm::Idler] {
                let collect = |params: &SourceParams, seed: u64| {
                    let mut xs = Vec::new();
                    for i in 0..100 {
                        let ev = sample_frame(params, plane, &mut stream(seed, Domain::Test, i)).unwrap();
                        xs.extend(ev.events.iter().filter(|e| e.arm == arm).map(|e| e.x));
                    }
                    xs
                };
                let mut a = collect(&p, 10);
                let mut b = collect(&q, 11);
                let (n, m) = (a.len() as f64, b.len() as f64);
                let d = ks_distance(&mut a, &mut b);
                // 1% critical value of the two-sample KS statistic
                let crit = 1.63 * ((n + m) / (n * m)).sqrt();
                assert!(d < crit, "{plane:?} {arm:?}: D={d} crit={crit}");
            }
        }
    }

    fn arm_counts(p: &SourceParams, frames: u64) -> Vec<(f64, f64)> {
        (0..frames)
            .map(|i| {
                let ev = sample_frame(p, Plane::NearField, &mut stream(5, Domain::Test, i)).unwrap();
                let s = ev.events.iter().filter(|e| e.arm == Arm::Signal).count() as f64;
                (s, ev.events.len() as f64 - s)
            })
            .collect()
    }

    fn correlation(v: &[(f64, f64)]) -> f64 {
        let n = v.len() as f64;
        let (ma, mb) = (v.iter().map(|x| x.0).sum::<f64>() / n, v.iter().map(|x| x.1).sum::<f64>() / n);
        let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
        for (a, b) in v {
            c += (a - ma) * (b - mb);
            va += (a - ma).powi(2);
            vb += (b - mb).powi(2);
        }
        c / (va * vb).sqrt()
    }

    #[test]
    fn fully_unpaired_source_is_uncorrelated() {
        let mut p = desk_source();
        p.mean_pairs_per_frame = 200.0;
        let paired = arm_counts(&p, 400);
        assert!(paired.iter().all(|(a, b)| a == b));
        p.unpaired_fraction = 1.0;
        let v = arm_counts(&p, 2000);
        let mean = v.iter().map(|x| x.0 + x.1).sum::<f64>() / (2.0 * v.len() as f64);
        assert!((mean - 200.0).abs() < 1.0, "mean per arm {mean}");
        // 2000 frames: the null correlation has standard deviation 0.022
        let r = correlation(&v);
        assert!(r.abs() < 0.09, "r = {r}");
    }

    #[test]
    fn envelope_mean_acceptance() {
        let env = Envelope { ratio: 2.0 };
        // symmetric ramp from 1/2 to 1 around the center
        assert!((env.mean_acceptance() - 0.75).abs() < 1e-6);
    }
}
