//! Thresholded photon-counting camera model.
//!
//! The EMCCD gain register and threshold are collapsed into three rates
//! acting on a binary frame: quantum efficiency, per-pixel false counts and
//! a one-row smear toward the readout register (+y).

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Domain};
use crate::source::{self, PhotonEventList, Plane, SourceParams};

/// Lower and upper edge of the photon-counting fluence regime.
pub const FLUENCE_REGIME: (f64, f64) = (0.1, 0.2);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub quantum_efficiency: f64,
    pub false_count_prob: f64,
    pub smear_prob: f64,
    pub width: usize,
    pub height: usize,
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantum_efficiency > 0.0 && self.quantum_efficiency <= 1.0) {
            return Err(Error::config("detector.quantum_efficiency", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.false_count_prob) {
            return Err(Error::config("detector.false_count_prob", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.smear_prob) {
            return Err(Error::config("detector.smear_prob", "must lie in [0, 1)"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("detector.width/height", "sensor must be non-empty"));
        }
        if self.width > u32::MAX as usize || self.height > u32::MAX as usize {
            return Err(Error::config("detector.width/height", "sensor too large"));
        }
        Ok(())
    }

    pub fn noiseless(width: usize, height: usize) -> Self {
        Self {
            quantum_efficiency: 1.0,
            false_count_prob: 0.0,
            smear_prob: 0.0,
            width,
            height,
        }
    }
}

/// Axis-aligned rectangle of sensor pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Roi {
    pub const fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self { x0, y0, w, h }
    }

    /// Rectangle of size `w×h` whose geometric center is closest to `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, w: usize, h: usize) -> Self {
        let x0 = (cx - (w as f64 - 1.0) / 2.0).round().max(0.0) as usize;
        let y0 = (cy - (h as f64 - 1.0) / 2.0).round().max(0.0) as usize;
        Self { x0, y0, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 as f64 + (self.w as f64 - 1.0) / 2.0,
            self.y0 as f64 + (self.h as f64 - 1.0) / 2.0,
        )
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x0 + self.w <= width && self.y0 + self.h <= height
    }

    pub fn overlaps(&self, other: &Roi) -> bool {
        self.x0 < other.x0 + other.w
            && other.x0 < self.x0 + self.w
            && self.y0 < other.y0 + other.h
            && other.y0 < self.y0 + self.h
    }
}

/// One thresholded frame, 1 bit per pixel, rows padded to whole bytes,
/// least significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub index: u64,
    bits: Vec<u8>,
}

pub fn row_bytes(width: usize) -> usize {
    width.div_ceil(8)
}

impl Frame {
    pub fn empty(width: usize, height: usize, index: u64) -> Self {
        Self {
            width,
            height,
            index,
            bits: vec![0; row_bytes(width) * height],
        }
    }

    pub fn from_packed(width: usize, height: usize, index: u64, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len(), row_bytes(width) * height, "packed frame length");
        Self { width, height, index, bits }
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        get_bit(&self.bits, row_bytes(self.width), x, y)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize) {
        let rb = row_bytes(self.width);
        self.bits[y * rb + x / 8] |= 1 << (x % 8);
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn fluence(&self) -> f64 {
        self.popcount() as f64 / (self.width * self.height) as f64
    }
}

#[inline]
fn get_bit(bits: &[u8], rb: usize, x: usize, y: usize) -> bool {
    bits[y * rb + x / 8] >> (x % 8) & 1 == 1
}

/// Ordered set of equal-sized binary frames from one measurement plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameStack {
    pub width: usize,
    pub height: usize,
    pub plane: Plane,
    pub seed: u64,
    data: Vec<u8>,
}

/// Borrowed view of one frame inside a stack.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub width: usize,
    pub height: usize,
    bits: &'a [u8],
}

impl FrameView<'_> {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        get_bit(self.bits, row_bytes(self.width), x, y)
    }

    /// Copies `roi` into `out` as 0.0/1.0, row-major.
    pub fn roi_into(&self, roi: &Roi, out: &mut [f64]) {
        debug_assert_eq!(out.len(), roi.area());
        let rb = row_bytes(self.width);
        for j in 0..roi.h {
            let row = &self.bits[(roi.y0 + j) * rb..(roi.y0 + j + 1) * rb];
            let dst = &mut out[j * roi.w..(j + 1) * roi.w];
            for (i, d) in dst.iter_mut().enumerate() {
                let x = roi.x0 + i;
                *d = (row[x / 8] >> (x % 8) & 1) as f64;
            }
        }
    }

    pub fn roi_count(&self, roi: &Roi) -> u64 {
        let mut n = 0;
        for y in roi.y0..roi.y0 + roi.h {
            for x in roi.x0..roi.x0 + roi.w {
                n += self.get(x, y) as u64;
            }
        }
        n
    }
}

impl FrameStack {
    pub fn new(width: usize, height: usize, plane: Plane, seed: u64) -> Self {
        Self {
            width,
            height,
            plane,
            seed,
            data: Vec::new(),
        }
    }

    pub fn frame_bytes(&self) -> usize {
        row_bytes(self.width) * self.height
    }

    pub fn len(&self) -> usize {
        if self.frame_bytes() == 0 {
            0
        } else {
            self.data.len() / self.frame_bytes()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, frame: &Frame) {
        assert_eq!((frame.width, frame.height), (self.width, self.height), "frame size");
        self.data.extend_from_slice(frame.packed());
    }

    pub fn frame(&self, i: usize) -> FrameView<'_> {
        let fb = self.frame_bytes();
        FrameView {
            width: self.width,
            height: self.height,
            bits: &self.data[i * fb..(i + 1) * fb],
        }
    }

    pub fn to_frame(&self, i: usize) -> Frame {
        Frame::from_packed(self.width, self.height, i as u64, self.frame(i).bits.to_vec())
    }

    /// Packed payload of every frame, in order.
    pub fn payload(&self) -> &[u8] {
        &self.data
    }

    /// Stack over an existing packed payload; fails unless the payload is a
    /// whole number of frames.
    pub fn from_packed_frames(width: usize, height: usize, plane: Plane, seed: u64, data: Vec<u8>) -> Result<Self> {
        let fb = row_bytes(width) * height;
        if fb == 0 || !data.len().is_multiple_of(fb) {
            return Err(Error::Estimator(format!(
                "payload of {} bytes is not a whole number of {width}×{height} frames",
                data.len()
            )));
        }
        Ok(Self::from_payload(width, height, plane, seed, data))
    }

    pub(crate) fn from_payload(width: usize, height: usize, plane: Plane, seed: u64, data: Vec<u8>) -> Self {
        Self {
            width,
            height,
            plane,
            seed,
            data,
        }
    }

    /// New stack made of the frames at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> FrameStack {
        let fb = self.frame_bytes();
        let mut data = Vec::with_capacity(indices.len() * fb);
        for &i in indices {
            data.extend_from_slice(&self.data[i * fb..(i + 1) * fb]);
        }
        FrameStack::from_payload(self.width, self.height, self.plane, self.seed, data)
    }
}

/// Result of rasterizing one frame of photon events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rasterized {
    pub frame: Frame,
    /// Detected events that fell outside the sensor.
    pub clipped: u32,
}

/// Thresholds a list of photon events into a binary frame.
pub fn rasterize<R: Rng + ?Sized>(events: &PhotonEventList, d: &DetectorParams, index: u64, rng: &mut R) -> Rasterized {
    let mut frame = Frame::empty(d.width, d.height, index);
    let mut hits: Vec<usize> = Vec::with_capacity(events.events.len());
    let mut clipped = 0u32;
    for ev in &events.events {
        let u: f64 = rng.random();
        if u >= d.quantum_efficiency {
            continue;
        }
        // f64::round is round-half-away-from-zero
        let (x, y) = (ev.x.round(), ev.y.round());
        if !(x >= 0.0 && y >= 0.0 && x < d.width as f64 && y < d.height as f64) {
            clipped += 1;
            continue;
        }
        hits.push(y as usize * d.width + x as usize);
    }
    hits.sort_unstable();
    hits.dedup();
    for &h in &hits {
        frame.set(h % d.width, h / d.width);
    }
    if d.smear_prob > 0.0 {
        for &h in &hits {
            let u: f64 = rng.random();
            let (x, y) = (h % d.width, h / d.width);
            if u < d.smear_prob && y + 1 < d.height {
                frame.set(x, y + 1);
            }
        }
    }
    if d.false_count_prob > 0.0 {
        // geometric gaps between false counts
        let n = d.width * d.height;
        let log_q = (1.0 - d.false_count_prob).ln();
        let mut pos = 0usize;
        loop {
            let u: f64 = rng.random();
            let gap = ((1.0 - u).ln() / log_q).floor();
            if !gap.is_finite() || gap >= (n - pos) as f64 {
                break;
            }
            pos += gap as usize;
            frame.set(pos % d.width, pos / d.width);
            pos += 1;
            if pos >= n {
                break;
            }
        }
    }
    Rasterized { frame, clipped }
}

/// Simulates `n_frames` frames of `plane`. Frame `i` depends only on
/// `(seed, i)`.
pub fn simulate_stack(
    source: &SourceParams,
    detector: &DetectorParams,
    plane: Plane,
    n_frames: usize,
    seed: u64,
) -> Result<(FrameStack, u64)> {
    source.validate()?;
    detector.validate()?;
    let (src_dom, det_dom) = match plane {
        Plane::NearField => (Domain::NearSource, Domain::NearDetector),
        Plane::FarField => (Domain::FarSource, Domain::FarDetector),
    };
    let frames = par::map_indexed(n_frames, |i| -> Result<Rasterized> {
        let events = source::sample_frame(source, plane, &mut rng::stream(seed, src_dom, i as u64))?;
        Ok(rasterize(&events, detector, i as u64, &mut rng::stream(seed, det_dom, i as u64)))
    });
    let mut stack = FrameStack::new(detector.width, detector.height, plane, seed);
    let mut clipped = 0u64;
    for r in frames {
        let r = r?;
        clipped += r.clipped as u64;
        stack.push(&r.frame);
    }
    Ok((stack, clipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluenceCheck {
    pub fluence: f64,
    /// True when the fluence lies inside the photon-counting regime.
    pub in_regime: bool,
}

/// Mean fraction of lit pixels over all frames, restricted to `rois` when
/// given (each rectangle weighted by its own area).
pub fn check_fluence(stack: &FrameStack, rois: &[Roi]) -> Result<FluenceCheck> {
    if stack.is_empty() {
        return Err(Error::Estimator("fluence of an empty stack is undefined".into()));
    }
    let full = [Roi::new(0, 0, stack.width, stack.height)];
    let rois = if rois.is_empty() { &full[..] } else { rois };
    for r in rois {
        if !r.fits(stack.width, stack.height) {
            return Err(Error::config("roi", format!("{r:?} exceeds the sensor")));
        }
    }
    let lit = par::chunked_reduce(
        stack.len(),
        par::CHUNK,
        |range| {
            range
                .map(|i| {
                    let f = stack.frame(i);
                    rois.iter().map(|r| f.roi_count(r)).sum::<u64>()
                })
                .sum::<u64>()
        },
        |a, b| a + b,
    )
    .unwrap_or(0);
    let area: usize = rois.iter().map(Roi::area).sum();
    let fluence = lit as f64 / (area as f64 * stack.len() as f64);
    let in_regime = (FLUENCE_REGIME.0..=FLUENCE_REGIME.1).contains(&fluence);
    Ok(FluenceCheck { fluence, in_regime })
}

fn pixel_mass(center: f64, sigma: f64, i: usize) -> f64 {
    let a = (i as f64 - 0.5 - center) / (sigma * std::f64::consts::SQRT_2);
    let b = (i as f64 + 0.5 - center) / (sigma * std::f64::consts::SQRT_2);
    0.5 * (erfc(a) - erfc(b))
}

/// Expected fluence over `rois` for a given pair rate, from the Gaussian
/// marginals and the detector rates (Poisson photon statistics per pixel).
pub fn predicted_fluence(source: &SourceParams, d: &DetectorParams, plane: Plane, rois: &[Roi]) -> f64 {
    let marg = source.marginals(plane);
    let rate = source.mean_pairs_per_frame * d.quantum_efficiency;
    let lambda = |x: usize, y: usize| -> f64 {
        marg.iter()
            .map(|(c, s)| pixel_mass(c.x, s.x, x) * pixel_mass(c.y, s.y, y))
            .sum::<f64>()
            * rate
    };
    let mut sum = 0.0;
    let mut area = 0usize;
    for r in rois {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                let direct_off = (-lambda(x, y)).exp();
                let above_on = if y > 0 { 1.0 - (-lambda(x, y - 1)).exp() } else { 0.0 };
                let off = (1.0 - d.false_count_prob) * direct_off * (1.0 - d.smear_prob * above_on);
                sum += 1.0 - off;
            }
        }
        area += r.area();
    }
    sum / area as f64
}

/// Pair rate giving `target` mean fluence over `rois`.
pub fn pairs_for_fluence(
    source: &SourceParams,
    d: &DetectorParams,
    plane: Plane,
    rois: &[Roi],
    target: f64,
) -> Result<f64> {
    if !(target > d.false_count_prob && target < 1.0) {
        return Err(Error::config("fluence", format!("target {target} is not reachable")));
    }
    let mut p = source.clone();
    let mut eval = |k: f64| {
        p.mean_pairs_per_frame = k;
        predicted_fluence(&p, d, plane, rois)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while eval(hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::config("fluence", "target fluence unreachable"));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if eval(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = 0.5 * (lo + hi);
    Ok(match source.envelope {
        Some(env) if env.ratio > 1.0 => k / env.mean_acceptance(),
        _ => k,
    })
}
