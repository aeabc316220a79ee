//! Axis-aligned 2D Gaussian plus constant baseline, fitted by damped
//! Gauss-Newton (Levenberg-Marquardt) to the unmasked points of a window.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::correlator::{CorrMap, Window};
use crate::error::{Error, Result};

/// Fit window side length used when none is configured.
pub const DEFAULT_WINDOW: usize = 15;
/// Minimum number of unmasked displacements in a window.
pub const MIN_POINTS: usize = 25;
const MAX_ITER: usize = 200;
const REL_STEP_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-8;

// parameter order: amplitude, x0, y0, σx, σy, baseline
const A: usize = 0;
const X0: usize = 1;
const Y0: usize = 2;
const SX: usize = 3;
const SY: usize = 4;
const B: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Smallest integrated-peak signal-to-noise ratio accepted as a peak.
    pub min_significance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { min_significance: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussFit {
    pub amplitude: f64,
    pub sigma: (f64, f64),
    pub center: (f64, f64),
    pub baseline: f64,
    /// Covariance of (amplitude, x0, y0, σx, σy, baseline).
    pub covariance: [[f64; 6]; 6],
    pub window: Window,
    pub n_points: usize,
    pub converged: bool,
    pub iterations: usize,
    pub residual_rms: f64,
}

impl GaussFit {
    pub fn sigma_std(&self) -> (f64, f64) {
        (self.covariance[SX][SX].max(0.0).sqrt(), self.covariance[SY][SY].max(0.0).sqrt())
    }

    /// 2×2 covariance of (σx, σy).
    pub fn sigma_cov(&self) -> [[f64; 2]; 2] {
        [
            [self.covariance[SX][SX], self.covariance[SX][SY]],
            [self.covariance[SY][SX], self.covariance[SY][SY]],
        ]
    }

    fn params(&self) -> Vector6<f64> {
        Vector6::new(self.amplitude, self.center.0, self.center.1, self.sigma.0, self.sigma.1, self.baseline)
    }
}

/// Model value and its gradient with respect to the six parameters.
pub fn model(p: &[f64; 6], dx: f64, dy: f64) -> (f64, [f64; 6]) {
    let ux = dx - p[X0];
    let uy = dy - p[Y0];
    let (sx2, sy2) = (p[SX] * p[SX], p[SY] * p[SY]);
    let e = (-0.5 * (ux * ux / sx2 + uy * uy / sy2)).exp();
    let ae = p[A] * e;
    let grad = [
        e,
        ae * ux / sx2,
        ae * uy / sy2,
        ae * ux * ux / (sx2 * p[SX]),
        ae * uy * uy / (sy2 * p[SY]),
        1.0,
    ];
    (ae + p[B], grad)
}

struct Points {
    x: Vec<f64>,
    y: Vec<f64>,
    v: Vec<f64>,
}

impl Points {
    fn cost_and_normal(&self, p: &Vector6<f64>) -> (f64, Matrix6<f64>, Vector6<f64>) {
        let arr: [f64; 6] = (*p).into();
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        let mut cost = 0.0;
        for i in 0..self.v.len() {
            let (f, g) = model(&arr, self.x[i], self.y[i]);
            let r = self.v[i] - f;
            cost += r * r;
            let g = Vector6::from(g);
            jtj += g * g.transpose();
            jtr += g * r;
        }
        (cost, jtj, jtr)
    }

    fn cost(&self, p: &Vector6<f64>) -> f64 {
        let arr: [f64; 6] = (*p).into();
        (0..self.v.len())
            .map(|i| {
                let r = self.v[i] - model(&arr, self.x[i], self.y[i]).0;
                r * r
            })
            .sum()
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits the peak inside `window` with the default options.
pub fn fit_gaussian(map: &CorrMap, window: &Window) -> Result<GaussFit> {
    fit_gaussian_with(map, window, &FitOptions::default())
}

pub fn fit_gaussian_with(map: &CorrMap, window: &Window, opts: &FitOptions) -> Result<GaussFit> {
    if window.w > map.w || window.h > map.h {
        return Err(Error::Fit(format!("window {window:?} larger than the {}×{} map", map.w, map.h)));
    }
    let mut pts = Points {
        x: Vec::new(),
        y: Vec::new(),
        v: Vec::new(),
    };
    for dy in window.y0..window.y0 + window.h as i64 {
        for dx in window.x0..window.x0 + window.w as i64 {
            if map.masked(dx, dy) {
                continue;
            }
            let v = map.at(dx, dy);
            if !v.is_finite() {
                return Err(Error::Fit(format!("non-finite map value at ({dx}, {dy})")));
            }
            pts.x.push(dx as f64);
            pts.y.push(dy as f64);
            pts.v.push(v);
        }
    }
    let n = pts.v.len();
    if n < MIN_POINTS {
        return Err(Error::Fit(format!(
            "window holds {n} unmasked displacements, need at least {MIN_POINTS}"
        )));
    }

    let b0 = median(&mut pts.v.clone());
    let (imax, vmax) = pts
        .v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, v)| (i, *v))
        .expect("non-empty");
    let a0 = vmax - b0;
    if !(a0 > 0.0) {
        return Err(Error::NoPeak("window is flat".into()));
    }
    let (x0, y0) = (pts.x[imax], pts.y[imax]);
    let (mut wsum, mut mx, mut my) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let wt = (pts.v[i] - b0).max(0.0);
        wsum += wt;
        mx += wt * (pts.x[i] - x0).powi(2);
        my += wt * (pts.y[i] - y0).powi(2);
    }
    let clamp = |s: f64, len: usize| s.clamp(0.5, (len as f64 / 4.0).max(0.5));
    let sx0 = clamp((mx / wsum).sqrt(), window.w);
    let sy0 = clamp((my / wsum).sqrt(), window.h);
    let mut p = Vector6::new(a0, x0, y0, sx0, sy0, b0);

    let (mut cost, mut jtj, mut jtr) = pts.cost_and_normal(&p);
    let grad0 = jtr.norm();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let mut damped = jtj;
        for k in 0..6 {
            damped[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
        }
        let Some(step) = damped.lu().solve(&jtr) else {
            lambda *= 10.0;
            if lambda > 1e20 {
                break;
            }
            continue;
        };
        let trial = p + step;
        let valid = trial.iter().all(|v| v.is_finite()) && trial[SX] > 0.0 && trial[SY] > 0.0;
        let trial_cost = if valid { pts.cost(&trial) } else { f64::INFINITY };
        if trial_cost <= cost {
            let rel = (0..6)
                .map(|k| step[k].abs() / p[k].abs().max(1e-12))
                .fold(0.0, f64::max);
            p = trial;
            (cost, jtj, jtr) = pts.cost_and_normal(&p);
            lambda = (lambda * 0.1).max(1e-12);
            if rel < REL_STEP_TOL {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e20 {
                break;
            }
        }
    }
    let grad = jtr.norm();
    // A small step alone is not enough: the gradient must also have collapsed.
    let converged = grad <= GRAD_TOL * grad0;

    let dof = (n - 6).max(1) as f64;
    let s2 = cost / dof;
    let cov = jtj
        .try_inverse()
        .map(|inv| inv * s2)
        .ok_or_else(|| Error::NoPeak("fit degenerated (singular normal matrix at solution)".into()))?;
    let mut covariance = [[0.0; 6]; 6];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = cov[(i, j)];
        }
    }
    let fit = GaussFit {
        amplitude: p[A],
        sigma: (p[SX], p[SY]),
        center: (p[X0], p[Y0]),
        baseline: p[B],
        covariance,
        window: *window,
        n_points: n,
        converged,
        iterations,
        residual_rms: (cost / n as f64).sqrt(),
    };
    if fit.amplitude <= 0.0 {
        return Err(Error::NoPeak(format!("fitted amplitude {} is not positive", fit.amplitude)));
    }
    // Significance is checked on the best iterate even when the solver did
    // not converge, so that noise never passes as an unconverged peak.
    let (r, sr) = r_with_error(&fit);
    if !sr.is_finite() || r < opts.min_significance * sr {
        return Err(Error::NoPeak(format!(
            "integrated peak {r:.3e} ± {sr:.3e} is below {}σ",
            opts.min_significance
        )));
    }
    Ok(fit)
}

/// Window of `size` centered on the largest unmasked value.
pub fn window_at_peak(map: &CorrMap, size: usize) -> Result<Window> {
    let (x, y) = map
        .unmasked_argmax()
        .ok_or_else(|| Error::Fit("map has no unmasked values".into()))?;
    Ok(Window::centered(x, y, size))
}

/// Integral of the fitted Gaussian, baseline excluded: 2π·A·σx·σy.
pub fn integrate_r(fit: &GaussFit) -> Result<f64> {
    if !fit.converged {
        return Err(Error::Fit("fit did not converge".into()));
    }
    if fit.amplitude < 0.0 {
        return Err(Error::NoPeak("negative amplitude".into()));
    }
    Ok(2.0 * std::f64::consts::PI * fit.amplitude * fit.sigma.0 * fit.sigma.1)
}

/// `integrate_r` plus its first-order standard error from the fit covariance.
pub fn integrate_r_with_error(fit: &GaussFit) -> Result<(f64, f64)> {
    integrate_r(fit)?;
    Ok(r_with_error(fit))
}

fn r_with_error(fit: &GaussFit) -> (f64, f64) {
    let tau = 2.0 * std::f64::consts::PI;
    let r = tau * fit.amplitude * fit.sigma.0 * fit.sigma.1;
    let mut g = Vector6::zeros();
    g[A] = tau * fit.sigma.0 * fit.sigma.1;
    g[SX] = tau * fit.amplitude * fit.sigma.1;
    g[SY] = tau * fit.amplitude * fit.sigma.0;
    let cov = Matrix6::from_fn(|i, j| fit.covariance[i][j]);
    let var = (g.transpose() * cov * g)[(0, 0)];
    (r, var.max(0.0).sqrt())
}

/// Root mean square of two per-axis widths: sqrt((σx² + σy²)/2).
pub fn combine_axes(sx: f64, sy: f64) -> f64 {
    ((sx * sx + sy * sy) / 2.0).sqrt()
}

/// Standard error of `combine_axes` from the 2×2 width covariance.
pub fn combine_axes_std(sx: f64, sy: f64, cov: [[f64; 2]; 2]) -> f64 {
    let c = combine_axes(sx, sy);
    if c == 0.0 {
        return 0.0;
    }
    let g = [sx / (2.0 * c), sy / (2.0 * c)];
    let var = g[0] * g[0] * cov[0][0] + 2.0 * g[0] * g[1] * cov[0][1] + g[1] * g[1] * cov[1][1];
    var.max(0.0).sqrt()
}

#[doc(hidden)]
pub fn fitted_params(fit: &GaussFit) -> [f64; 6] {
    fit.params().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::source::Plane;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn synthetic(w: usize, p: [f64; 6], noise: f64, seed: u64) -> CorrMap {
        let mut rng = stream(seed, Domain::Test, 0);
        let mut map = CorrMap {
            w,
            h: w,
            plane: Plane::NearField,
            values: vec![0.0; w * w],
            std_error: vec![noise.max(1e-12); w * w],
            mask: vec![false; w * w],
            n_frames: 1,
            mean_counts: (0.1, 0.1),
        };
        for idx in 0..w * w {
            let (dx, dy) = map.displacement(idx);
            let z: f64 = StandardNormal.sample(&mut rng);
            map.values[idx] = model(&p, dx as f64, dy as f64).0 + noise * z;
        }
        map
    }

    #[test]
    fn noiseless_recovery() {
        let truth = [0.01, 0.3, -0.2, 1.53, 2.2, 0.0];
        let map = synthetic(32, truth, 0.0, 0);
        let fit = fit_gaussian(&map, &Window::centered(0, 0, 15)).unwrap();
        assert!(fit.converged);
        let got = fitted_params(&fit);
        for k in 0..6 {
            let tol = 1e-9 * truth[k].abs().max(1e-3);
            assert!((got[k] - truth[k]).abs() < tol, "param {k}: {} vs {}", got[k], truth[k]);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = stream(4, Domain::Test, 0);
        use rand::Rng;
        for _ in 0..50 {
            let p = [
                rng.random_range(0.001..1.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.6..4.0),
                rng.random_range(0.6..4.0),
                rng.random_range(-0.1..0.1),
            ];
            let (dx, dy) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let (_, g) = model(&p, dx, dy);
            for k in 0..6 {
                let h = 1e-6;
                let (mut hi, mut lo) = (p, p);
                hi[k] += h;
                lo[k] -= h;
                let fd = (model(&hi, dx, dy).0 - model(&lo, dx, dy).0) / (2.0 * h);
                let scale = g[k].abs().max(p[0].abs());
                assert!((fd - g[k]).abs() <= 1e-6 * scale, "param {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn flat_map_has_no_peak() {
        let map = synthetic(32, [0.0, 0.0, 0.0, 1.0, 1.0, 0.003], 0.0, 0);
        let err = fit_gaussian(&map, &Window::centered(0, 0, 15)).unwrap_err();
        assert!(err.is_no_peak(), "{err}");
    }

    #[test]
    fn pure_noise_has_no_peak() {
        let mut no_peak = 0;
        for seed in 0..20 {
            let map = synthetic(64, [0.0, 0.0, 0.0, 1.0, 1.0, 0.0], 1e-3, seed);
            let w = window_at_peak(&map, 15).unwrap();
            match fit_gaussian(&map, &w) {
                Err(e) if e.is_no_peak() => no_peak += 1,
                Ok(f) if !f.converged => no_peak += 1,
                _ => {}
            }
        }
        assert!(no_peak >= 19, "{no_peak}/20");
    }

    #[test]
    fn small_window_rejected() {
        let map = synthetic(32, [0.01, 0.0, 0.0, 1.5, 1.5, 0.0], 0.0, 0);
        assert!(matches!(fit_gaussian(&map, &Window::centered(0, 0, 4)), Err(Error::Fit(_))));
        let mut masked = map.clone();
        for m in masked.mask.iter_mut() {
            *m = true;
        }
        assert!(fit_gaussian(&masked, &Window::centered(0, 0, 15)).is_err());
    }

    #[test]
    fn masked_points_are_ignored() {
        let truth = [0.01, 0.0, 0.0, 1.53, 2.2, 0.0];
        let mut map = synthetic(32, truth, 0.0, 0);
        let i = map.index(5, 5);
        map.values[i] = 10.0;
        map.mask[i] = true;
        let fit = fit_gaussian(&map, &Window::centered(0, 0, 15)).unwrap();
        assert!((fit.sigma.0 - 1.53).abs() < 1e-8);
        assert_eq!(fit.n_points, 224);
    }

    #[test]
    fn translation_equivariance() {
        let truth = [0.01, 0.2, 0.1, 1.53, 2.2, 0.0005];
        let map = synthetic(32, truth, 2e-4, 3);
        let base = fit_gaussian(&map, &Window::centered(0, 0, 15)).unwrap();
        for (u, v) in [(3, -2), (10, 7), (-15, 12)] {
            let moved = map.translated(u, v);
            let fit = fit_gaussian(&moved, &Window::centered(u, v, 15)).unwrap();
            assert!((fit.center.0 - base.center.0 - u as f64).abs() < 1e-8);
            assert!((fit.center.1 - base.center.1 - v as f64).abs() < 1e-8);
            assert!((fit.amplitude - base.amplitude).abs() < 1e-8);
            assert!((fit.sigma.0 - base.sigma.0).abs() < 1e-8);
            assert!((fit.sigma.1 - base.sigma.1).abs() < 1e-8);
            assert!((fit.baseline - base.baseline).abs() < 1e-8);
        }
    }

    #[test]
    fn integrated_peak() {
        let mut fit = fit_gaussian(&synthetic(32, [0.002364, 0.0, 0.0, 1.53, 2.2, 0.0], 0.0, 0), &Window::centered(0, 0, 15)).unwrap();
        let r = integrate_r(&fit).unwrap();
        // 2π·0.002364·1.53·2.2
        assert!((r - 0.0500).abs() < 1e-4, "{r}");
        fit.amplitude *= 2.0;
        assert!((integrate_r(&fit).unwrap() - 2.0 * r).abs() < 1e-15);
        fit.amplitude /= 2.0;
        fit.sigma.0 *= 2.0;
        assert!((integrate_r(&fit).unwrap() - 2.0 * r).abs() < 1e-15);
        fit.amplitude = 0.0;
        assert_eq!(integrate_r(&fit).unwrap(), 0.0);
        fit.converged = false;
        assert!(integrate_r(&fit).is_err());
    }

    #[test]
    fn combine_widths() {
        assert!((combine_axes(1.53, 2.2) - 1.895).abs() < 1e-3);
        assert!((combine_axes(2.35, 1.85) - 2.115).abs() < 1e-3);
        assert_eq!(combine_axes(1.7, 1.7), 1.7);
    }
}
