//! Normalized signal–idler intercorrelation of photon-counting frames.
//!
//! For displacement δ the estimator is
//!
//! ```text
//! F(δ) = ⟨(I₁(r) − m₁(r))·(I₂(r+δ) − m₂(r+δ))⟩ / ½(⟨N₁⟩ + ⟨N₂⟩)
//! ```
//!
//! averaged over frames and over all ROI pixels `r`, with `m₁`, `m₂` the
//! per-pixel temporal means and `⟨N⟩` their spatial averages. Displacements
//! wrap around the ROI (circular correlation, no zero padding). In the far
//! field the idler ROI is point-reversed through its center first, so a
//! peak at δ = 0 means opposite momenta.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::detector::{FrameStack, FrameView, Roi};
use crate::error::{Error, Result};
use crate::fft2::Fft2;
use crate::par;
use crate::source::Plane;

/// The two polarization regions compared by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiPair {
    pub roi1: Roi,
    pub roi2: Roi,
    pub plane: Plane,
}

impl RoiPair {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if (self.roi1.w, self.roi1.h) != (self.roi2.w, self.roi2.h) {
            return Err(Error::config(
                "rois",
                format!(
                    "ROIs must have identical size, got {}×{} and {}×{}",
                    self.roi1.w, self.roi1.h, self.roi2.w, self.roi2.h
                ),
            ));
        }
        for (name, r) in [("roi1", self.roi1), ("roi2", self.roi2)] {
            if !r.fits(width, height) {
                return Err(Error::config(name, format!("{r:?} is not inside the {width}×{height} sensor")));
            }
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            roi1: self.roi2,
            roi2: self.roi1,
            plane: self.plane,
        }
    }

    /// Displacement at which a pixel shared by both ROIs correlates with
    /// itself (roi1 origin minus roi2 origin), before wrapping.
    pub fn overlap_displacement(&self) -> (i64, i64) {
        (
            self.roi1.x0 as i64 - self.roi2.x0 as i64,
            self.roi1.y0 as i64 - self.roi2.y0 as i64,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Integer rectangle of displacements, inclusive of `x0..x0+w`, `y0..y0+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x0: i64,
    pub y0: i64,
    pub w: usize,
    pub h: usize,
}

impl Window {
    pub fn centered(cx: i64, cy: i64, size: usize) -> Self {
        let half = (size / 2) as i64;
        Self {
            x0: cx - half,
            y0: cy - half,
            w: size,
            h: size,
        }
    }

    pub fn contains(&self, dx: i64, dy: i64) -> bool {
        dx >= self.x0 && dx < self.x0 + self.w as i64 && dy >= self.y0 && dy < self.y0 + self.h as i64
    }
}

/// F(δ) on the grid of circular displacements, stored with δ = 0 at
/// index `(w/2, h/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrMap {
    pub w: usize,
    pub h: usize,
    pub plane: Plane,
    pub values: Vec<f64>,
    /// Standard error of each value under the no-correlation hypothesis.
    pub std_error: Vec<f64>,
    /// True where the displacement is excluded from fitting.
    pub mask: Vec<bool>,
    pub n_frames: usize,
    /// Spatially averaged per-pixel mean counts ⟨N₁⟩, ⟨N₂⟩.
    pub mean_counts: (f64, f64),
}

impl CorrMap {
    pub fn dx_min(&self) -> i64 {
        -((self.w / 2) as i64)
    }

    pub fn dy_min(&self) -> i64 {
        -((self.h / 2) as i64)
    }

    pub fn dx_max(&self) -> i64 {
        self.dx_min() + self.w as i64 - 1
    }

    pub fn dy_max(&self) -> i64 {
        self.dy_min() + self.h as i64 - 1
    }

    /// Wraps any displacement onto the stored grid.
    pub fn wrap(&self, dx: i64, dy: i64) -> (i64, i64) {
        let wrap1 = |d: i64, n: usize, lo: i64| (d - lo).rem_euclid(n as i64) + lo;
        (wrap1(dx, self.w, self.dx_min()), wrap1(dy, self.h, self.dy_min()))
    }

    pub fn index(&self, dx: i64, dy: i64) -> usize {
        let (dx, dy) = self.wrap(dx, dy);
        (dy - self.dy_min()) as usize * self.w + (dx - self.dx_min()) as usize
    }

    pub fn displacement(&self, idx: usize) -> (i64, i64) {
        ((idx % self.w) as i64 + self.dx_min(), (idx / self.w) as i64 + self.dy_min())
    }

    pub fn at(&self, dx: i64, dy: i64) -> f64 {
        self.values[self.index(dx, dy)]
    }

    pub fn masked(&self, dx: i64, dy: i64) -> bool {
        self.mask[self.index(dx, dy)]
    }

    /// Displacement of the largest unmasked value.
    pub fn unmasked_argmax(&self) -> Option<(i64, i64)> {
        self.values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (v, m))| !**m && v.is_finite())
            .max_by(|a, b| a.1 .0.total_cmp(b.1 .0))
            .map(|(i, _)| self.displacement(i))
    }

    /// Largest |F|/σ over unmasked displacements.
    pub fn max_abs_z(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.std_error)
            .zip(&self.mask)
            .filter(|(_, m)| !**m)
            .map(|((v, s), _)| if *s > 0.0 { (v / s).abs() } else if *v == 0.0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    /// Circularly translates the map content by `(u, v)`.
    pub fn translated(&self, u: i64, v: i64) -> CorrMap {
        let mut out = self.clone();
        for idx in 0..self.values.len() {
            let (dx, dy) = self.displacement(idx);
            let j = self.index(dx + u, dy + v);
            out.values[j] = self.values[idx];
            out.std_error[j] = self.std_error[idx];
            out.mask[j] = self.mask[idx];
        }
        out
    }
}

/// Running sums for one pass of the estimator.
struct Accum {
    s1: Vec<f64>,
    s2: Vec<f64>,
    q1: Vec<f64>,
    q2: Vec<f64>,
    cross: Vec<Complex64>,
}

impl Accum {
    fn zeros(n: usize) -> Self {
        Self {
            s1: vec![0.0; n],
            s2: vec![0.0; n],
            q1: vec![0.0; n],
            q2: vec![0.0; n],
            cross: vec![Complex64::default(); n],
        }
    }

    fn add(mut self, other: Accum) -> Accum {
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            *a += b;
        }
        for (a, b) in self.q1.iter_mut().zip(&other.q1) {
            *a += b;
        }
        for (a, b) in self.q2.iter_mut().zip(&other.q2) {
            *a += b;
        }
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            *a += b;
        }
        self
    }
}

/// Extracts the idler ROI, point-reversed in the far field.
pub(crate) fn extract_roi2(frame: &FrameView<'_>, rois: &RoiPair, out: &mut [f64]) {
    frame.roi_into(&rois.roi2, out);
    if rois.plane == Plane::FarField {
        out.reverse();
    }
}

fn check_inputs(stack: &FrameStack, rois: &RoiPair, min_frames: usize) -> Result<()> {
    if stack.len() < min_frames {
        return Err(Error::Estimator(format!(
            "need at least {min_frames} frame(s), stack has {}",
            stack.len()
        )));
    }
    if stack.plane != rois.plane {
        return Err(Error::Estimator(format!(
            "stack plane {:?} does not match ROI plane {:?}",
            stack.plane, rois.plane
        )));
    }
    rois.validate(stack.width, stack.height)
}

fn fftshift(raw: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let (hx, hy) = (w / 2, h / 2);
    for y in 0..h {
        for x in 0..w {
            out[((y + hy) % h) * w + (x + hx) % w] = raw[y * w + x];
        }
    }
    out
}

/// Core estimator over `n` frame pairs `(a_k, b_k)`: roi1 from frame `a_k`,
/// roi2 from frame `b_k`.
fn estimate<P>(stack: &FrameStack, rois: &RoiPair, n: usize, pair: P) -> Result<CorrMap>
where
    P: Fn(usize) -> (usize, usize) + Sync + Send,
{
    let (w, h) = (rois.roi1.w, rois.roi1.h);
    let npix = w * h;
    let fft = Fft2::new(w, h);
    let acc = par::chunked_reduce(
        n,
        par::CHUNK,
        |range| {
            let mut acc = Accum::zeros(npix);
            let mut i1 = vec![0.0; npix];
            let mut i2 = vec![0.0; npix];
            for k in range {
                let (a, b) = pair(k);
                stack.frame(a).roi_into(&rois.roi1, &mut i1);
                extract_roi2(&stack.frame(b), rois, &mut i2);
                for p in 0..npix {
                    acc.s1[p] += i1[p];
                    acc.s2[p] += i2[p];
                    acc.q1[p] += i1[p] * i1[p];
                    acc.q2[p] += i2[p] * i2[p];
                }
                let f1 = fft.forward_real(&i1);
                let f2 = fft.forward_real(&i2);
                for ((c, x), y) in acc.cross.iter_mut().zip(&f1).zip(&f2) {
                    *c += x.conj() * y;
                }
            }
            acc
        },
        Accum::add,
    )
    .ok_or_else(|| Error::Estimator("empty frame sequence".into()))?;

    let nf = n as f64;
    let m1: Vec<f64> = acc.s1.iter().map(|s| s / nf).collect();
    let m2: Vec<f64> = acc.s2.iter().map(|s| s / nf).collect();
    let mean1 = m1.iter().sum::<f64>() / npix as f64;
    let mean2 = m2.iter().sum::<f64>() / npix as f64;
    let norm = 0.5 * (mean1 + mean2);
    if !(norm > 0.0) {
        return Err(Error::Estimator(
            "mean counts are zero in both ROIs; normalization undefined".into(),
        ));
    }

    // ⟨I₁I₂⟩ − m₁⋆m₂, both from spectra
    let fm1 = fft.forward_real(&m1);
    let fm2 = fft.forward_real(&m2);
    let spec: Vec<Complex64> = acc
        .cross
        .iter()
        .zip(fm1.iter().zip(&fm2))
        .map(|(c, (a, b))| c / nf - a.conj() * b)
        .collect();
    let cov = fft.correlation_from_cross_spectrum(spec);
    let values: Vec<f64> = cov.iter().map(|c| c / (npix as f64 * norm)).collect();

    let v1: Vec<f64> = acc.q1.iter().zip(&m1).map(|(q, m)| (q / nf - m * m).max(0.0)).collect();
    let v2: Vec<f64> = acc.q2.iter().zip(&m2).map(|(q, m)| (q / nf - m * m).max(0.0)).collect();
    let fv1 = fft.forward_real(&v1);
    let fv2 = fft.forward_real(&v2);
    let vspec: Vec<Complex64> = fv1.iter().zip(&fv2).map(|(a, b)| a.conj() * b).collect();
    let vv = fft.correlation_from_cross_spectrum(vspec);
    let se: Vec<f64> = vv
        .iter()
        .map(|s| (s.max(0.0) / nf).sqrt() / (npix as f64 * norm))
        .collect();

    Ok(CorrMap {
        w,
        h,
        plane: rois.plane,
        values: fftshift(&values, w, h),
        std_error: fftshift(&se, w, h),
        mask: vec![false; npix],
        n_frames: n,
        mean_counts: (mean1, mean2),
    })
}

/// Signal–idler intercorrelation within each frame.
pub fn intercorrelation(stack: &FrameStack, rois: &RoiPair) -> Result<CorrMap> {
    check_inputs(stack, rois, 1)?;
    estimate(stack, rois, stack.len(), |k| (k, k))
}

/// Same estimator with roi1 of frame `i` against roi2 of frame `i+1`.
/// Intra-frame pair correlations cannot survive this; anything left is a
/// deterministic artifact.
pub fn witness(stack: &FrameStack, rois: &RoiPair) -> Result<CorrMap> {
    check_inputs(stack, rois, 2)?;
    estimate(stack, rois, stack.len() - 1, |k| (k, k + 1))
}

/// Default exclusion radius around the autocorrelation peak, in pixels.
pub const DEFAULT_MASK_RADIUS: f64 = 3.0;

/// Masks the self-overlap autocorrelation peak (overlapping near-field ROIs
/// only) and, when `smear_axis` is set, the one-pixel line along that axis
/// through the same displacement.
pub fn build_mask(map: &CorrMap, rois: &RoiPair, smear_axis: Option<Axis>, radius: f64) -> CorrMap {
    let mut out = map.clone();
    let (ax, ay) = rois.overlap_displacement();
    let (ax, ay) = map.wrap(ax, ay);
    let overlap = rois.plane == Plane::NearField && rois.roi1.overlaps(&rois.roi2);
    for idx in 0..out.values.len() {
        let (dx, dy) = map.displacement(idx);
        let (ddx, ddy) = map.wrap(dx - ax, dy - ay);
        let in_disk = overlap && ((ddx * ddx + ddy * ddy) as f64) <= radius * radius;
        let on_line = match smear_axis {
            Some(Axis::Y) => ddx == 0,
            Some(Axis::X) => ddy == 0,
            None => false,
        };
        if in_disk || on_line {
            out.mask[idx] = true;
        }
    }
    out
}

/// Fails when any masked displacement falls inside the fit window.
pub fn check_mask_clearance(map: &CorrMap, window: &Window) -> Result<()> {
    for idx in 0..map.mask.len() {
        if !map.mask[idx] {
            continue;
        }
        let (dx, dy) = map.displacement(idx);
        if window.contains(dx, dy) {
            return Err(Error::Estimator(format!(
                "masked displacement ({dx}, {dy}) lies inside the fit window {window:?}"
            )));
        }
    }
    Ok(())
}

/// Variance of the signal–idler count difference over superpixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VodEstimate {
    /// Var(N₁ − N₂) / (Var(N₁) + Var(N₂)), i.e. in shot-noise units.
    pub ratio: f64,
    /// Standard error of `ratio` from the spread over frame groups.
    pub std_error: f64,
    pub n_cells: usize,
}

struct CellSums {
    s1: Vec<f64>,
    s2: Vec<f64>,
    q1: Vec<f64>,
    q2: Vec<f64>,
    qd: Vec<f64>,
}

impl CellSums {
    fn zeros(n: usize) -> Self {
        Self {
            s1: vec![0.0; n],
            s2: vec![0.0; n],
            q1: vec![0.0; n],
            q2: vec![0.0; n],
            qd: vec![0.0; n],
        }
    }

    fn add(mut self, o: CellSums) -> CellSums {
        for (a, b) in [
            (&mut self.s1, &o.s1),
            (&mut self.s2, &o.s2),
            (&mut self.q1, &o.q1),
            (&mut self.q2, &o.q2),
            (&mut self.qd, &o.qd),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self
    }

    /// (Σ Var(N₁−N₂), Σ Var(N₁)+Var(N₂)) over cells, plug-in variances.
    fn variances(&self, n: f64) -> (f64, f64) {
        let (mut vd, mut vs) = (0.0, 0.0);
        for c in 0..self.s1.len() {
            let (m1, m2) = (self.s1[c] / n, self.s2[c] / n);
            let v1 = self.q1[c] / n - m1 * m1;
            let v2 = self.q2[c] / n - m2 * m2;
            let md = m1 - m2;
            vd += self.qd[c] / n - md * md;
            vs += v1 + v2;
        }
        (vd, vs)
    }
}

/// Groups used for the standard error of the ratio.
const VOD_GROUPS: usize = 20;

/// Variance of the difference between `bin×bin` superpixel counts of the two
/// ROIs, in shot-noise units. For uncorrelated arms this is 1; perfect
/// twin-photon correlation drives it to 0.
pub fn variance_of_difference(stack: &FrameStack, rois: &RoiPair, bin: usize) -> Result<VodEstimate> {
    check_inputs(stack, rois, 2)?;
    let (w, h) = (rois.roi1.w, rois.roi1.h);
    if bin == 0 || w % bin != 0 || h % bin != 0 {
        return Err(Error::config(
            "analysis.bin",
            format!("bin {bin} must be >= 1 and divide the {w}×{h} ROI"),
        ));
    }
    let (cw, ch) = (w / bin, h / bin);
    let ncell = cw * ch;
    let n = stack.len();
    let groups = VOD_GROUPS.min(n / 2).max(1);

    let per_group: Vec<CellSums> = par::map_indexed(groups, |g| {
        let (start, end) = (g * n / groups, (g + 1) * n / groups);
        let mut sums = CellSums::zeros(ncell);
        let mut i1 = vec![0.0; w * h];
        let mut i2 = vec![0.0; w * h];
        let mut c1 = vec![0.0; ncell];
        let mut c2 = vec![0.0; ncell];
        for k in start..end {
            let f = stack.frame(k);
            f.roi_into(&rois.roi1, &mut i1);
            extract_roi2(&f, rois, &mut i2);
            c1.iter_mut().for_each(|v| *v = 0.0);
            c2.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..h {
                for x in 0..w {
                    let c = (y / bin) * cw + x / bin;
                    c1[c] += i1[y * w + x];
                    c2[c] += i2[y * w + x];
                }
            }
            for c in 0..ncell {
                sums.s1[c] += c1[c];
                sums.s2[c] += c2[c];
                sums.q1[c] += c1[c] * c1[c];
                sums.q2[c] += c2[c] * c2[c];
                sums.qd[c] += (c1[c] - c2[c]).powi(2);
            }
        }
        sums
    });

    let group_ratios: Vec<f64> = per_group
        .iter()
        .enumerate()
        .filter_map(|(g, s)| {
            let len = ((g + 1) * n / groups - g * n / groups) as f64;
            let (vd, vs) = s.variances(len);
            (vs > 0.0 && len >= 2.0).then(|| vd / vs)
        })
        .collect();
    let total = per_group
        .into_iter()
        .reduce(CellSums::add)
        .expect("at least one group");
    let (vd, vs) = total.variances(n as f64);
    if !(vs > 0.0) {
        return Err(Error::Estimator(
            "superpixel counts do not fluctuate; shot-noise normalization undefined".into(),
        ));
    }
    let std_error = if group_ratios.len() >= 2 {
        let g = group_ratios.len() as f64;
        let m = group_ratios.iter().sum::<f64>() / g;
        (group_ratios.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (g - 1.0) / g).sqrt()
    } else {
        f64::NAN
    };
    Ok(VodEstimate {
        ratio: vd / vs,
        std_error,
        n_cells: ncell,
    })
}
