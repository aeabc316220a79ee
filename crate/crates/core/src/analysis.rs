//! The per-plane analysis chain: correlate, mask, locate the peak, fit.

use serde::{Deserialize, Serialize};

use crate::correlator::{self, Axis, CorrMap, RoiPair, DEFAULT_MASK_RADIUS};
use crate::detector::FrameStack;
use crate::error::{Error, Result};
use crate::peakfit::{self, FitOptions, GaussFit, DEFAULT_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Side of the square fit window, in displacement pixels.
    pub fit_window: usize,
    pub mask_radius: f64,
    /// Mask the detector smear line along this axis.
    pub smear_axis: Option<Axis>,
    pub fit: FitOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            fit_window: DEFAULT_WINDOW,
            mask_radius: DEFAULT_MASK_RADIUS,
            smear_axis: None,
            fit: FitOptions::default(),
        }
    }
}

impl AnalysisOptions {
    pub fn validate(&self) -> Result<()> {
        if self.fit_window < 5 {
            return Err(Error::config("analysis.fit_window", format!("must be ≥ 5, got {}", self.fit_window)));
        }
        if !(self.mask_radius.is_finite() && self.mask_radius >= 0.0) {
            return Err(Error::config(
                "analysis.mask_radius",
                format!("must be finite and ≥ 0, got {}", self.mask_radius),
            ));
        }
        if !(self.fit.min_significance.is_finite() && self.fit.min_significance >= 0.0) {
            return Err(Error::config(
                "analysis.min_significance",
                format!("must be finite and ≥ 0, got {}", self.fit.min_significance),
            ));
        }
        Ok(())
    }
}

/// Result of fitting one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneAnalysis {
    /// Intercorrelation map with the mask applied.
    pub map: CorrMap,
    pub fit: GaussFit,
}

/// Masks `map`, centers a window on the strongest unmasked value and fits it.
pub fn fit_map(map: &CorrMap, rois: &RoiPair, opts: &AnalysisOptions) -> Result<PlaneAnalysis> {
    let map = correlator::build_mask(map, rois, opts.smear_axis, opts.mask_radius);
    let window = peakfit::window_at_peak(&map, opts.fit_window)?;
    if let Err(e) = correlator::check_mask_clearance(&map, &window) {
        // a noise maximum beside the mask is not worth diagnosing as geometry
        let (cx, cy) = (window.x0 + window.w as i64 / 2, window.y0 + window.h as i64 / 2);
        let i = map.index(cx, cy);
        let z = map.values[i] / map.std_error[i];
        if !(z >= opts.fit.min_significance) {
            return Err(Error::NoPeak(format!("strongest value is only {z:.1}σ and lies beside the mask")));
        }
        return Err(e);
    }
    let fit = peakfit::fit_gaussian_with(&map, &window, &opts.fit)?;
    Ok(PlaneAnalysis { map, fit })
}

pub fn analyze_plane(stack: &FrameStack, rois: &RoiPair, opts: &AnalysisOptions) -> Result<PlaneAnalysis> {
    let map = correlator::intercorrelation(stack, rois)?;
    fit_map(&map, rois, opts)
}
