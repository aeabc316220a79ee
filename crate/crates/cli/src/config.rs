//! Run configuration: one TOML document with a section per concern.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spdc_epr::analysis::AnalysisOptions;
use spdc_epr::correlator::{Axis, RoiPair};
use spdc_epr::detector::{self, DetectorParams, Roi};
use spdc_epr::optics::OpticalGeometry;
use spdc_epr::peakfit::{FitOptions, DEFAULT_WINDOW};
use spdc_epr::report::{DEFAULT_RESAMPLES, MIN_RESAMPLES};
use spdc_epr::source::{self, Anisotropy, Plane, SourceParams};
use spdc_epr::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub quantum_efficiency: f64,
    pub false_count_prob: f64,
    pub smear_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSection {
    pub roi1: Roi,
    pub roi2: Roi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rois {
    pub near_field: RoiSection,
    pub far_field: RoiSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub fit_window: usize,
    pub mask_radius: f64,
    /// Axis of the detector smear line masked in each plane.
    pub smear_axis_nf: Option<Axis>,
    pub smear_axis_ff: Option<Axis>,
    /// Superpixel side for the variance-of-difference check.
    pub bin: usize,
    /// Bootstrap resamples; 0 skips the bootstrap.
    pub n_resamples: usize,
    pub min_significance: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let fit = FitOptions::default();
        Self {
            fit_window: DEFAULT_WINDOW,
            mask_radius: spdc_epr::correlator::DEFAULT_MASK_RADIUS,
            smear_axis_nf: Some(Axis::Y),
            smear_axis_ff: None,
            bin: 8,
            n_resamples: DEFAULT_RESAMPLES,
            min_significance: fit.min_significance,
        }
    }
}

/// Optional targets applied on top of the raw source parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    /// Rescale the pair widths so the ideal violation factor equals this.
    pub violation: Option<f64>,
    /// Width shape kept while rescaling; defaults to the current widths.
    pub anisotropy: Option<Anisotropy>,
    /// Set the pair rate of each plane so the mean ROI fluence equals this.
    pub fluence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub geometry: OpticalGeometry,
    pub source: SourceParams,
    pub detector: DetectorSection,
    pub rois: Rois,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("toml", e.to_string().trim_end()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field: format!("{}: {field}", path.display()),
                reason,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn detector(&self) -> DetectorParams {
        DetectorParams {
            quantum_efficiency: self.detector.quantum_efficiency,
            false_count_prob: self.detector.false_count_prob,
            smear_prob: self.detector.smear_prob,
            width: self.geometry.sensor_width,
            height: self.geometry.sensor_height,
        }
    }

    pub fn rois(&self, plane: Plane) -> RoiPair {
        let s = match plane {
            Plane::NearField => self.rois.near_field,
            Plane::FarField => self.rois.far_field,
        };
        RoiPair {
            roi1: s.roi1,
            roi2: s.roi2,
            plane,
        }
    }

    pub fn analysis_options(&self, plane: Plane) -> AnalysisOptions {
        let a = &self.analysis;
        AnalysisOptions {
            fit_window: a.fit_window,
            mask_radius: a.mask_radius,
            smear_axis: match plane {
                Plane::NearField => a.smear_axis_nf,
                Plane::FarField => a.smear_axis_ff,
            },
            fit: FitOptions {
                min_significance: a.min_significance,
            },
        }
    }

    /// Source parameters actually simulated for `plane`, after calibration.
    pub fn resolved_source(&self, plane: Plane) -> Result<SourceParams> {
        let mut src = self.source.clone();
        let Some(cal) = self.calibration else {
            return Ok(src);
        };
        if let Some(v) = cal.violation {
            let shape = cal.anisotropy.unwrap_or(Anisotropy {
                near: src.nf_pair_sigma,
                far: src.ff_sum_sigma,
            });
            src = source::calibrate_to_violation(v, shape, &self.geometry, &src)
                .map_err(|e| prefix_field(e, "calibration"))?;
        }
        if let Some(f) = cal.fluence {
            let rois = self.rois(plane);
            src.mean_pairs_per_frame = detector::pairs_for_fluence(&src, &self.detector(), plane, &[rois.roi1, rois.roi2], f)
                .map_err(|e| prefix_field(e, "calibration"))?;
        }
        Ok(src)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.source.validate()?;
        self.detector().validate()?;
        let (w, h) = (self.geometry.sensor_width, self.geometry.sensor_height);
        for plane in [Plane::NearField, Plane::FarField] {
            let r = self.rois(plane);
            r.validate(w, h).map_err(|e| prefix_field(e, &format!("rois.{}", plane_key(plane))))?;
            let bin = self.analysis.bin;
            if bin == 0 || !r.roi1.w.is_multiple_of(bin) || !r.roi1.h.is_multiple_of(bin) {
                return Err(Error::config(
                    "analysis.bin",
                    format!("bin {bin} must be ≥ 1 and divide the {}×{} ROI", r.roi1.w, r.roi1.h),
                ));
            }
            if self.analysis.fit_window > r.roi1.w.min(r.roi1.h) {
                return Err(Error::config(
                    "analysis.fit_window",
                    format!("window {} exceeds the {}×{} ROI", self.analysis.fit_window, r.roi1.w, r.roi1.h),
                ));
            }
            self.analysis_options(plane).validate()?;
        }
        let n = self.analysis.n_resamples;
        if n != 0 && n < MIN_RESAMPLES {
            return Err(Error::config(
                "analysis.n_resamples",
                format!("must be 0 (off) or ≥ {MIN_RESAMPLES}, got {n}"),
            ));
        }
        if let Some(cal) = self.calibration {
            if let Some(f) = cal.fluence {
                if !(f > 0.0 && f < 1.0) {
                    return Err(Error::config("calibration.fluence", format!("must lie in (0, 1), got {f}")));
                }
            }
            if let Some(v) = cal.violation {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::config("calibration.violation", format!("must be > 0, got {v}")));
                }
            }
        }
        Ok(())
    }
}

pub fn plane_key(plane: Plane) -> &'static str {
    match plane {
        Plane::NearField => "near_field",
        Plane::FarField => "far_field",
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = include_str!("../../../configs/desk.toml");
    const PUBLISHED: &str = include_str!("../../../configs/published.toml");

    #[test]
    fn committed_configs_parse() {
        let desk = RunConfig::from_toml_str(DESK).unwrap();
        assert_eq!(desk.geometry.sensor_width, 128);
        assert_eq!(desk.n_frames, 2000);
        let full = RunConfig::from_toml_str(PUBLISHED).unwrap();
        assert_eq!(full.geometry.sensor_width, 512);
        assert_eq!(full.n_frames, 10_000);
    }

    #[test]
    fn published_config_keeps_published_widths() {
        let full = RunConfig::from_toml_str(PUBLISHED).unwrap();
        let src = full.resolved_source(Plane::NearField).unwrap();
        assert_eq!((src.nf_pair_sigma.x, src.nf_pair_sigma.y), (1.53, 2.2));
        assert_eq!((src.ff_sum_sigma.x, src.ff_sum_sigma.y), (2.35, 1.85));
        let v = source::expected_violation(&src, &full.geometry);
        assert!((v - 4.15).abs() < 0.01, "{v}");
    }

    #[test]
    fn round_trips_through_toml() {
        let desk = RunConfig::from_toml_str(DESK).unwrap();
        let again = RunConfig::from_toml_str(&desk.to_toml()).unwrap();
        assert_eq!(desk, again);
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let broken = DESK.replacen("n_frames = 2000", "n_frames = \"many\"", 1);
        let err = RunConfig::from_toml_str(&broken).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
        assert!(err.contains("n_frames"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = DESK.replacen("[analysis]", "[analysis]\nfit_windw = 3", 1);
        let err = RunConfig::from_toml_str(&typo).unwrap_err().to_string();
        assert!(err.contains("fit_windw"), "{err}");
    }

    #[test]
    fn indivisible_bin_names_the_field() {
        let bad = DESK.replacen("bin = 8", "bin = 7", 1);
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "analysis.bin"), "{err}");
    }

    #[test]
    fn roi_outside_sensor_names_the_plane() {
        let mut cfg = RunConfig::from_toml_str(DESK).unwrap();
        cfg.rois.far_field.roi2.x0 = 100;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("rois.far_field"), "{err}");
    }

    #[test]
    fn calibration_hits_targets() {
        let desk = RunConfig::from_toml_str(DESK).unwrap();
        for plane in [Plane::NearField, Plane::FarField] {
            let src = desk.resolved_source(plane).unwrap();
            assert!((source::expected_violation(&src, &desk.geometry) - 5.16).abs() < 1e-9);
            let r = desk.rois(plane);
            let f = detector::predicted_fluence(&src, &desk.detector(), plane, &[r.roi1, r.roi2]);
            assert!((f - 0.15).abs() < 1e-6, "{f}");
        }
    }
}
