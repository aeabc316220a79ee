//! Small 2D complex FFT on row-major buffers, without padding.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fft2 {
    w: usize,
    h: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(w: usize, h: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            w,
            h,
            row_fwd: planner.plan_fft_forward(w),
            col_fwd: planner.plan_fft_forward(h),
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn len(&self) -> usize {
        self.w * self.h
    }

    fn run(&self, buf: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        debug_assert_eq!(buf.len(), self.w * self.h);
        rows.process(buf);
        let mut col = vec![Complex64::default(); self.h];
        for x in 0..self.w {
            for (y, c) in col.iter_mut().enumerate() {
                *c = buf[y * self.w + x];
            }
            cols.process(&mut col);
            for (y, c) in col.iter().enumerate() {
                buf[y * self.w + x] = *c;
            }
        }
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Unnormalized inverse transform.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }

    /// Forward transform of a real buffer.
    pub fn forward_real(&self, input: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = input.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Circular cross-correlation c(δ) = Σ_r a(r)·b(r+δ) given the spectra
    /// accumulated as Σ conj(A)·B.
    pub fn correlation_from_cross_spectrum(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut spec);
        let scale = 1.0 / self.len() as f64;
        spec.into_iter().map(|c| c.re * scale).collect()
    }
}
