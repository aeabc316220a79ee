//! Optical geometry and unit conversions.
//!
//! Momenta are carried in units of ħ·m⁻¹, so ħ never appears numerically and
//! every uncertainty product comes out directly in units of ħ².

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera and imaging-lens parameters shared by the near- and far-field setups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalGeometry {
    /// Side of a square pixel, in meters.
    pub pixel_pitch: f64,
    /// Focal length of the Fourier lens, in meters.
    pub focal_length: f64,
    /// Central wavelength of the detected photons, in meters.
    pub wavelength: f64,
    pub sensor_width: usize,
    pub sensor_height: usize,
}

impl OpticalGeometry {
    /// 16 µm pixels, 37 mm lens, 710 nm, 512×512 sensor.
    pub fn published() -> Self {
        Self {
            pixel_pitch: 16e-6,
            focal_length: 37e-3,
            wavelength: 710e-9,
            sensor_width: 512,
            sensor_height: 512,
        }
    }

    pub fn with_sensor(mut self, width: usize, height: usize) -> Self {
        self.sensor_width = width;
        self.sensor_height = height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("geometry.pixel_pitch", self.pixel_pitch),
            ("geometry.focal_length", self.focal_length),
            ("geometry.wavelength", self.wavelength),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if self.sensor_width < 16 || self.sensor_height < 16 {
            return Err(Error::config(
                "geometry.sensor_width/sensor_height",
                format!(
                    "sensor must be at least 16×16, got {}×{}",
                    self.sensor_width, self.sensor_height
                ),
            ));
        }
        let k = self.momentum_per_ff_pixel();
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::config(
                "geometry",
                "far-field momentum per pixel is not finite and positive",
            ));
        }
        Ok(())
    }

    /// Transverse momentum spanned by one far-field pixel, in ħ·m⁻¹.
    pub fn momentum_per_ff_pixel(&self) -> f64 {
        2.0 * PI * self.pixel_pitch / (self.focal_length * self.wavelength)
    }

    /// Dimensionless factor turning (near px)·(far px) into a position–momentum
    /// product in units of ħ.
    pub fn product_unit(&self) -> f64 {
        self.pixel_pitch * self.momentum_per_ff_pixel()
    }
}

pub fn nf_pixels_to_meters(d: f64, g: &OpticalGeometry) -> f64 {
    d * g.pixel_pitch
}

pub fn ff_pixels_to_momentum(d: f64, g: &OpticalGeometry) -> f64 {
    d * g.momentum_per_ff_pixel()
}

/// Variance product Δ²x·Δ²p for one axis, in ħ², from the near-field width
/// `dx_px` and the far-field width `dp_px` (both in pixels).
pub fn heisenberg_product_1d(dx_px: f64, dp_px: f64, g: &OpticalGeometry) -> f64 {
    let p = dx_px * dp_px * g.product_unit();
    p * p
}

/// Heisenberg bound for the variance product, in ħ².
pub const HEISENBERG_BOUND: f64 = 0.25;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn near_field_scaling() {
        let g = OpticalGeometry::published();
        assert_relative_eq!(nf_pixels_to_meters(1.0, &g), 16e-6, max_relative = 1e-15);
        assert_relative_eq!(nf_pixels_to_meters(1.53, &g), 24.48e-6, max_relative = 1e-12);
        assert_eq!(nf_pixels_to_meters(0.0, &g), 0.0);
    }

    #[test]
    fn far_field_momentum() {
        let g = OpticalGeometry::published();
        // 2π·16e-6 / (0.037·710e-9), evaluated independently
        let unit = 2.0 * std::f64::consts::PI * 16e-6 / (0.037 * 710e-9);
        assert!((unit - 3826.8).abs() < 0.05, "{unit}");
        assert_relative_eq!(ff_pixels_to_momentum(1.0, &g), unit, max_relative = 1e-14);
        assert!((ff_pixels_to_momentum(2.35, &g) - 8993.1).abs() < 0.1);
        assert_eq!(ff_pixels_to_momentum(0.0, &g), 0.0);
    }

    #[test]
    fn published_axis_products() {
        let g = OpticalGeometry::published();
        let px = heisenberg_product_1d(1.53, 2.35, &g);
        let py = heisenberg_product_1d(2.2, 1.85, &g);
        assert!((px - 0.0485).abs() < 1e-4, "{px}");
        assert!((py - 0.0621).abs() < 1e-4, "{py}");
        assert_eq!(heisenberg_product_1d(0.0, 3.0, &g), 0.0);
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let mut g = OpticalGeometry::published();
        g.focal_length = 0.0;
        assert!(g.validate().is_err());
        let g = OpticalGeometry::published().with_sensor(8, 512);
        assert!(g.validate().is_err());
        assert!(OpticalGeometry::published().validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn product_is_quadratic(dx in 0.0f64..10.0, dp in 0.0f64..10.0, s in 0.1f64..5.0) {
                let g = OpticalGeometry::published();
                let a = heisenberg_product_1d(dx * s, dp, &g);
                let b = s * s * heisenberg_product_1d(dx, dp, &g);
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            }

            #[test]
            fn momentum_is_linear(a in 0.0f64..100.0, b in 0.0f64..100.0) {
                let g = OpticalGeometry::published();
                let lhs = ff_pixels_to_momentum(a + b, &g);
                let rhs = ff_pixels_to_momentum(a, &g) + ff_pixels_to_momentum(b, &g);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
            }

            #[test]
            fn product_matches_unit_round_trip(dx in 0.01f64..10.0, dp in 0.01f64..10.0) {
                let g = OpticalGeometry::published();
                let direct = heisenberg_product_1d(dx, dp, &g);
                let via = (nf_pixels_to_meters(dx, &g) * ff_pixels_to_momentum(dp, &g)).powi(2);
                prop_assert!((direct - via).abs() <= 1e-12 * direct);
            }
        }
    }
}
