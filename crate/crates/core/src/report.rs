//! Position–momentum uncertainty products and the EPR verdict.
//!
//! All products are in units of ħ². The per-axis product is
//! Δ²x·Δ²p_x and the isotropic one is Δ²r·Δ²p with Δ²r = (Δ²x + Δ²y)/2,
//! which expands to ¼(Δ²x + Δ²y)(Δ²p_x + Δ²p_y).

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisOptions};
use crate::correlator::{CorrMap, RoiPair};
use crate::detector::FrameStack;
use crate::error::{Error, Result};
use crate::optics::{heisenberg_product_1d, OpticalGeometry, HEISENBERG_BOUND};
use crate::par;
use crate::peakfit::{self, combine_axes, combine_axes_std, GaussFit};
use crate::rng::{stream, Domain};

/// Smallest accepted number of bootstrap resamples.
pub const MIN_RESAMPLES: usize = 50;
pub const DEFAULT_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Triple {
    pub x: f64,
    pub y: f64,
    pub iso: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub x: bool,
    pub y: bool,
    pub iso: bool,
}

/// One plane's fit plus its combined width (Δr in the near field, Δp in
/// the far field), in that plane's pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneReport {
    pub fit: GaussFit,
    pub width: f64,
}

/// Standard deviations of every reported quantity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Spread {
    /// σx, σy of the near-field fit.
    pub nf_sigma: (f64, f64),
    /// σx, σy of the far-field fit.
    pub ff_sigma: (f64, f64),
    pub nf_width: f64,
    pub ff_width: f64,
    #[serde(rename = "R_n")]
    pub r_n: f64,
    #[serde(rename = "R_p")]
    pub r_p: f64,
    pub products: Triple,
    pub factors: Triple,
}

const SPREAD_LEN: usize = 14;

impl Spread {
    fn to_vec(self) -> [f64; SPREAD_LEN] {
        [
            self.nf_sigma.0,
            self.nf_sigma.1,
            self.ff_sigma.0,
            self.ff_sigma.1,
            self.nf_width,
            self.ff_width,
            self.r_n,
            self.r_p,
            self.products.x,
            self.products.y,
            self.products.iso,
            self.factors.x,
            self.factors.y,
            self.factors.iso,
        ]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self {
            nf_sigma: (v[0], v[1]),
            ff_sigma: (v[2], v[3]),
            nf_width: v[4],
            ff_width: v[5],
            r_n: v[6],
            r_p: v[7],
            products: Triple { x: v[8], y: v[9], iso: v[10] },
            factors: Triple { x: v[11], y: v[12], iso: v[13] },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub n_resamples: usize,
    pub n_failed: usize,
    pub seed: u64,
    pub spread: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uncertainties {
    /// First-order propagation of the fit covariances.
    pub fit: Spread,
    /// Frame-resampling spread, when computed.
    pub bootstrap: Option<BootstrapSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameCounts {
    pub nf: usize,
    pub ff: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EprReport {
    pub nf: PlaneReport,
    pub ff: PlaneReport,
    #[serde(rename = "R_n")]
    pub r_n: f64,
    #[serde(rename = "R_p")]
    pub r_p: f64,
    /// Δ²x·Δ²p_x, Δ²y·Δ²p_y and Δ²r·Δ²p, in ħ².
    pub products: Triple,
    /// (ħ²/4) / product.
    pub factors: Triple,
    /// Δ²x·Δ²p_y + Δ²y·Δ²p_x, in ħ²; bounded below by ħ²/2 for separable states.
    pub cross_sum: f64,
    pub uncertainties: Uncertainties,
    pub fluence_nf: Option<f64>,
    pub fluence_ff: Option<f64>,
    pub n_frames: FrameCounts,
    pub geometry: OpticalGeometry,
    /// True where product + 1σ < ħ²/4.
    pub verdict: Verdict,
}

fn check_fit(fit: &GaussFit, which: &str) -> Result<()> {
    if !fit.converged {
        return Err(Error::Fit(format!("{which} fit did not converge")));
    }
    if !(fit.sigma.0 > 0.0 && fit.sigma.1 > 0.0) {
        return Err(Error::Fit(format!("{which} fit has non-positive width {:?}", fit.sigma)));
    }
    Ok(())
}

fn quad(g: [f64; 2], c: [[f64; 2]; 2]) -> f64 {
    g[0] * g[0] * c[0][0] + g[0] * g[1] * (c[0][1] + c[1][0]) + g[1] * g[1] * c[1][1]
}

/// Products from the four widths (near-field pixels, far-field pixels).
pub fn products(nf: (f64, f64), ff: (f64, f64), g: &OpticalGeometry) -> Triple {
    let u2 = g.product_unit().powi(2);
    Triple {
        x: heisenberg_product_1d(nf.0, ff.0, g),
        y: heisenberg_product_1d(nf.1, ff.1, g),
        iso: 0.25 * (nf.0 * nf.0 + nf.1 * nf.1) * (ff.0 * ff.0 + ff.1 * ff.1) * u2,
    }
}

fn factors(p: &Triple) -> Triple {
    Triple {
        x: HEISENBERG_BOUND / p.x,
        y: HEISENBERG_BOUND / p.y,
        iso: HEISENBERG_BOUND / p.iso,
    }
}

fn factor_std(p: f64, sp: f64) -> f64 {
    HEISENBERG_BOUND * sp / (p * p)
}

/// Combines the two fits into products, factors and first-order errors.
pub fn build_report(nf_fit: &GaussFit, ff_fit: &GaussFit, g: &OpticalGeometry) -> Result<EprReport> {
    check_fit(nf_fit, "near-field")?;
    check_fit(ff_fit, "far-field")?;
    g.validate()?;
    let (sx, sy) = nf_fit.sigma;
    let (px, py) = ff_fit.sigma;
    let cn = nf_fit.sigma_cov();
    let cf = ff_fit.sigma_cov();
    let p = products((sx, sy), (px, py), g);
    let f = factors(&p);
    let u2 = g.product_unit().powi(2);

    let var_x = (2.0 * p.x / sx).powi(2) * cn[0][0] + (2.0 * p.x / px).powi(2) * cf[0][0];
    let var_y = (2.0 * p.y / sy).powi(2) * cn[1][1] + (2.0 * p.y / py).powi(2) * cf[1][1];
    let sn2 = sx * sx + sy * sy;
    let sf2 = px * px + py * py;
    let var_iso = quad([0.5 * sx * sf2 * u2, 0.5 * sy * sf2 * u2], cn)
        + quad([0.5 * px * sn2 * u2, 0.5 * py * sn2 * u2], cf);
    let sp = Triple {
        x: var_x.max(0.0).sqrt(),
        y: var_y.max(0.0).sqrt(),
        iso: var_iso.max(0.0).sqrt(),
    };
    let (r_n, sr_n) = peakfit::integrate_r_with_error(nf_fit)?;
    let (r_p, sr_p) = peakfit::integrate_r_with_error(ff_fit)?;
    let fit_spread = Spread {
        nf_sigma: nf_fit.sigma_std(),
        ff_sigma: ff_fit.sigma_std(),
        nf_width: combine_axes_std(sx, sy, cn),
        ff_width: combine_axes_std(px, py, cf),
        r_n: sr_n,
        r_p: sr_p,
        products: sp,
        factors: Triple {
            x: factor_std(p.x, sp.x),
            y: factor_std(p.y, sp.y),
            iso: factor_std(p.iso, sp.iso),
        },
    };
    let mut report = EprReport {
        nf: PlaneReport {
            fit: nf_fit.clone(),
            width: combine_axes(sx, sy),
        },
        ff: PlaneReport {
            fit: ff_fit.clone(),
            width: combine_axes(px, py),
        },
        r_n,
        r_p,
        products: p,
        factors: f,
        cross_sum: heisenberg_product_1d(sx, py, g) + heisenberg_product_1d(sy, px, g),
        uncertainties: Uncertainties {
            fit: fit_spread,
            bootstrap: None,
        },
        fluence_nf: None,
        fluence_ff: None,
        n_frames: FrameCounts::default(),
        geometry: *g,
        verdict: Verdict {
            x: false,
            y: false,
            iso: false,
        },
    };
    report.update_verdict();
    Ok(report)
}

impl EprReport {
    /// Product uncertainty used by the verdict: the larger of the fit and
    /// bootstrap figures.
    pub fn verdict_sigma(&self) -> Triple {
        let f = self.uncertainties.fit.products;
        match &self.uncertainties.bootstrap {
            Some(b) => Triple {
                x: f.x.max(b.spread.products.x),
                y: f.y.max(b.spread.products.y),
                iso: f.iso.max(b.spread.products.iso),
            },
            None => f,
        }
    }

    fn update_verdict(&mut self) {
        let s = self.verdict_sigma();
        let p = self.products;
        let ok = |v: f64, s: f64| v.is_finite() && s.is_finite() && v + s < HEISENBERG_BOUND;
        self.verdict = Verdict {
            x: ok(p.x, s.x),
            y: ok(p.y, s.y),
            iso: ok(p.iso, s.iso),
        };
    }

    /// Attaches frame counts and fluences taken from the two maps.
    pub fn with_maps(mut self, nf: &CorrMap, ff: &CorrMap) -> Self {
        let fl = |m: &CorrMap| 0.5 * (m.mean_counts.0 + m.mean_counts.1);
        self.fluence_nf = Some(fl(nf));
        self.fluence_ff = Some(fl(ff));
        self.n_frames = FrameCounts {
            nf: nf.n_frames,
            ff: ff.n_frames,
        };
        self
    }

    pub fn with_bootstrap(mut self, b: BootstrapSummary) -> Self {
        self.uncertainties.bootstrap = Some(b);
        self.update_verdict();
        self
    }

    /// Overall verdict used for exit codes: the isotropic inequality.
    pub fn violated(&self) -> bool {
        self.verdict.iso
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text summary of the three inequalities.
    pub fn summary(&self) -> String {
        let s = self.verdict_sigma();
        let fs = match &self.uncertainties.bootstrap {
            Some(b) => {
                let f = self.uncertainties.fit.factors;
                Triple {
                    x: f.x.max(b.spread.factors.x),
                    y: f.y.max(b.spread.factors.y),
                    iso: f.iso.max(b.spread.factors.iso),
                }
            }
            None => self.uncertainties.fit.factors,
        };
        let mark = |v: bool| if v { "violated" } else { "not violated" };
        let nf = &self.nf.fit;
        let ff = &self.ff.fit;
        let u = &self.uncertainties.fit;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "near field: Δx = {:.3} ± {:.3} px, Δy = {:.3} ± {:.3} px, Δr = {:.3} ± {:.3} px, R_n = {:.4} ± {:.4}",
            nf.sigma.0, u.nf_sigma.0, nf.sigma.1, u.nf_sigma.1, self.nf.width, u.nf_width, self.r_n, u.r_n
        );
        let _ = writeln!(
            out,
            "far field:  Δp_x = {:.3} ± {:.3} px, Δp_y = {:.3} ± {:.3} px, Δp = {:.3} ± {:.3} px, R_p = {:.4} ± {:.4}",
            ff.sigma.0, u.ff_sigma.0, ff.sigma.1, u.ff_sigma.1, self.ff.width, u.ff_width, self.r_p, u.r_p
        );
        for (label, p, sp, f, sf, v) in [
            ("Δ²x Δ²p_x", self.products.x, s.x, self.factors.x, fs.x, self.verdict.x),
            ("Δ²y Δ²p_y", self.products.y, s.y, self.factors.y, fs.y, self.verdict.y),
            ("Δ²r Δ²p  ", self.products.iso, s.iso, self.factors.iso, fs.iso, self.verdict.iso),
        ] {
            let _ = writeln!(
                out,
                "{label} = ({p:.4} ± {sp:.4}) ħ² vs ħ²/4: factor {f:.2} ± {sf:.2}, {}",
                mark(v)
            );
        }
        if let Some(b) = &self.uncertainties.bootstrap {
            let _ = writeln!(
                out,
                "errors: larger of fit covariance and bootstrap ({} resamples, {} failed)",
                b.n_resamples, b.n_failed
            );
        } else {
            let _ = writeln!(out, "errors: fit covariance");
        }
        out
    }
}

/// Resamples frames with replacement and returns the per-component sample
/// standard deviation of `stat` together with the number of failed
/// resamples. `n_frames` lists the length of each independently resampled
/// stack; `stat` receives one index vector per stack. Resample `r` draws its
/// indices from its own random stream, so the result does not depend on the
/// number of workers.
pub fn resample_spread<F>(n_frames: &[usize], n_resamples: usize, seed: u64, stat: F) -> Result<(Vec<f64>, usize)>
where
    F: Fn(&[Vec<usize>]) -> Result<Vec<f64>> + Sync,
{
    if n_frames.contains(&0) {
        return Err(Error::Estimator("cannot resample an empty stack".into()));
    }
    let results = par::map_indexed(n_resamples, |r| {
        let mut rng = stream(seed, Domain::Bootstrap, r as u64);
        let idx: Vec<Vec<usize>> = n_frames
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(0..n as u64) as usize).collect())
            .collect();
        stat(&idx)
    });
    let mut ok: Vec<Vec<f64>> = Vec::with_capacity(n_resamples);
    let mut failed = 0;
    let mut last = String::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                last = e.to_string();
            }
        }
    }
    if failed * 10 > n_resamples || ok.len() < 2 {
        return Err(Error::Bootstrap {
            failed,
            total: n_resamples,
            last,
        });
    }
    let dim = ok[0].len();
    let n = ok.len() as f64;
    let mut std = vec![0.0; dim];
    for (k, s) in std.iter_mut().enumerate() {
        let mean = ok.iter().map(|v| v[k]).sum::<f64>() / n;
        let ss = ok.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>();
        *s = (ss / (n - 1.0)).sqrt();
    }
    Ok((std, failed))
}

fn report_vector(nf: &GaussFit, ff: &GaussFit, g: &OpticalGeometry) -> Result<Vec<f64>> {
    let r = build_report(nf, ff, g)?;
    Ok(Spread {
        nf_sigma: r.nf.fit.sigma,
        ff_sigma: r.ff.fit.sigma,
        nf_width: r.nf.width,
        ff_width: r.ff.width,
        r_n: r.r_n,
        r_p: r.r_p,
        products: r.products,
        factors: r.factors,
    }
    .to_vec()
    .to_vec())
}

/// One plane's input to the bootstrap.
#[derive(Debug, Clone, Copy)]
pub struct PlaneData<'a> {
    pub stack: &'a FrameStack,
    pub rois: &'a RoiPair,
    pub opts: &'a AnalysisOptions,
}

/// Bootstrap spread of widths, R, products and factors: each resample
/// reruns correlation, fitting and the report on frames drawn with
/// replacement from both stacks.
pub fn bootstrap_errors(
    nf: PlaneData<'_>,
    ff: PlaneData<'_>,
    g: &OpticalGeometry,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapSummary> {
    if n_resamples < MIN_RESAMPLES {
        return Err(Error::config(
            "analysis.n_resamples",
            format!("must be ≥ {MIN_RESAMPLES}, got {n_resamples}"),
        ));
    }
    let (std, n_failed) = resample_spread(&[nf.stack.len(), ff.stack.len()], n_resamples, seed, |idx| {
        let a = analysis::analyze_plane(&nf.stack.select(&idx[0]), nf.rois, nf.opts)?;
        let b = analysis::analyze_plane(&ff.stack.select(&idx[1]), ff.rois, ff.opts)?;
        report_vector(&a.fit, &b.fit, g)
    })?;
    Ok(BootstrapSummary {
        n_resamples,
        n_failed,
        seed,
        spread: Spread::from_slice(&std),
    })
}
