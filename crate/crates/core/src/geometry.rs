//! Image-plane geometry for rectified stereo.
//!
//! Disparity convention: a left pixel `(x, y)` corresponds to the right pixel
//! `(x - d, y)` with `d >= 0`. Feature propagation samples right-view features at
//! `x - d` (backward warping); pseudo-stereo synthesis splats left pixels to
//! `x - d` (forward warping) with nearer surfaces winning collisions.

use serde::{Deserialize, Serialize};

use crate::autodiff::cosine_forward;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel-first feature map or image with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Argument(
                "feature map needs at least one channel".into(),
            ));
        }
        if data.len() != channels * height * width {
            return Err(Error::Argument(format!(
                "{} values for {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            valid: vec![true; height * width],
        })
    }

    pub fn with_valid(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.height * self.width {
            return Err(Error::Argument("valid mask size".into()));
        }
        self.valid = valid;
        Ok(self)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
            valid: vec![true; height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_plane(&self, h: usize, w: usize, what: &str) -> Result<()> {
        if self.height != h || self.width != w {
            return Err(Error::Argument(format!(
                "{what}: {}x{} vs {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Boolean mask over a `height x width` plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl ValidMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn all(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Real field over a plane (disparity, cosine weights, …).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisparityField<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> DisparityField<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Argument("disparity size".into()));
        }
        Ok(Self {
            height,
            width,
            data,
            valid: vec![true; height * width],
        })
    }

    pub fn uniform(height: usize, width: usize, d: T) -> Self {
        Self {
            height,
            width,
            data: vec![d; height * width],
            valid: vec![true; height * width],
        }
    }

    /// Average-pool by `stride` and rescale to the pooled pixel grid. A pooled
    /// cell is valid only if every covered pixel is.
    pub fn downsample(&self, stride: usize) -> Result<Self> {
        if self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::Argument(format!(
                "{}x{} not divisible by stride {stride}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let mut data = vec![T::zero(); h * w];
        let mut valid = vec![true; h * w];
        let norm = T::from_usize_lossy(stride * stride * stride);
        for y in 0..h {
            for x in 0..w {
                let mut s = T::zero();
                for dy in 0..stride {
                    for dx in 0..stride {
                        let p = (y * stride + dy) * self.width + x * stride + dx;
                        s += self.data[p];
                        valid[y * w + x] &= self.valid[p];
                    }
                }
                data[y * w + x] = s / norm;
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
            valid,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthField<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub valid: Vec<bool>,
    pub z_max: T,
}

impl<T: Scalar> DepthField<T> {
    /// All pixels valid; `z_max` is the maximum entry.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Self::with_valid(height, width, data, vec![true; height * width])
    }

    pub fn with_valid(height: usize, width: usize, data: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || valid.len() != data.len() {
            return Err(Error::Argument("depth size".into()));
        }
        let z_max = data
            .iter()
            .zip(&valid)
            .filter(|(_, &v)| v)
            .map(|(&z, _)| z)
            .fold(T::zero(), T::max);
        Ok(Self {
            height,
            width,
            data,
            valid,
            z_max,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    TemporalDonor,
    BlankWithMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoStereoConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub sobel_threshold: f64,
    pub fill_mode: FillMode,
}

impl Default for PseudoStereoConfig {
    fn default() -> Self {
        Self {
            d_min: 5.0,
            d_max: 15.0,
            sobel_threshold: 1.0,
            fill_mode: FillMode::TemporalDonor,
        }
    }
}

impl PseudoStereoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min <= self.d_max) {
            return Err(Error::Config(format!(
                "pseudo-stereo range must satisfy 0 < d_min <= d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// Scale used at inference time.
    pub fn mean_scale(&self) -> f64 {
        0.5 * (self.d_min + self.d_max)
    }
}

/// Which way a horizontal resampling looks up its source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpDirection {
    /// Output `(x, y)` reads source `(x - d, y)`: right-view data into the left view.
    RightToLeft,
    /// Output `(x, y)` reads source `(x + d, y)`: left-view data into the right view.
    LeftToRight,
}

#[derive(Debug, Clone, Copy)]
struct WarpTap<T> {
    x0: u32,
    x1: u32,
    w0: T,
    w1: T,
    valid: bool,
}

/// Precomputed bilinear taps for a horizontal warp, shared by the plain
/// function and the differentiable graph op.
#[derive(Debug, Clone)]
pub struct WarpPlan<T> {
    height: usize,
    width: usize,
    taps: Vec<WarpTap<T>>,
}

impl<T: Scalar> WarpPlan<T> {
    pub fn new(
        disparity: &DisparityField<T>,
        source_valid: &[bool],
        direction: WarpDirection,
    ) -> Result<Self> {
        let (h, w) = (disparity.height, disparity.width);
        if source_valid.len() != h * w {
            return Err(Error::Argument("warp source validity size".into()));
        }
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let d = disparity.data[p];
                let xs = match direction {
                    WarpDirection::RightToLeft => T::from_usize_lossy(x) - d,
                    WarpDirection::LeftToRight => T::from_usize_lossy(x) + d,
                };
                let mut tap = WarpTap {
                    x0: 0,
                    x1: 0,
                    w0: T::zero(),
                    w1: T::zero(),
                    valid: false,
                };
                if disparity.valid[p] && xs.is_finite() {
                    let f = xs.floor();
                    let a = xs - f;
                    let in_range = |v: T| v >= T::zero() && v <= T::from_usize_lossy(w - 1);
                    if a == T::zero() {
                        if in_range(f) {
                            let i = f.to_usize().unwrap_or(0);
                            tap = WarpTap {
                                x0: i as u32,
                                x1: i as u32,
                                w0: T::one(),
                                w1: T::zero(),
                                valid: source_valid[y * w + i],
                            };
                        }
                    } else if in_range(f) && in_range(f + T::one()) {
                        let i = f.to_usize().unwrap_or(0);
                        tap = WarpTap {
                            x0: i as u32,
                            x1: i as u32 + 1,
                            w0: T::one() - a,
                            w1: a,
                            valid: source_valid[y * w + i] && source_valid[y * w + i + 1],
                        };
                    }
                }
                taps.push(tap);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            taps,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn valid(&self) -> Vec<bool> {
        self.taps.iter().map(|t| t.valid).collect()
    }

    pub fn apply(&self, src: &[T], channels: usize) -> Vec<T> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![T::zero(); channels * h * w];
        for c in 0..channels {
            let plane = &src[c * h * w..(c + 1) * h * w];
            let dst = &mut out[c * h * w..(c + 1) * h * w];
            for (p, t) in self.taps.iter().enumerate() {
                if t.valid {
                    let row = (p / w) * w;
                    dst[p] = t.w0 * plane[row + t.x0 as usize] + t.w1 * plane[row + t.x1 as usize];
                }
            }
        }
        out
    }

    /// Transpose of [`apply`](Self::apply).
    pub fn adjoint(&self, dy: &[T], channels: usize) -> Vec<T> {
        let (h, w) = (self.height, self.width);
        let mut dx = vec![T::zero(); channels * h * w];
        for c in 0..channels {
            let g = &dy[c * h * w..(c + 1) * h * w];
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for (p, t) in self.taps.iter().enumerate() {
                if t.valid {
                    let row = (p / w) * w;
                    dst[row + t.x0 as usize] += t.w0 * g[p];
                    dst[row + t.x1 as usize] += t.w1 * g[p];
                }
            }
        }
        dx
    }
}

/// Resample `source` at `x - d(x, y)` with bilinear interpolation.
pub fn backward_warp<T: Scalar>(
    source: &FeatureMap<T>,
    disparity: &DisparityField<T>,
) -> Result<FeatureMap<T>> {
    warp_with_direction(source, disparity, WarpDirection::RightToLeft)
}

pub fn warp_with_direction<T: Scalar>(
    source: &FeatureMap<T>,
    disparity: &DisparityField<T>,
    direction: WarpDirection,
) -> Result<FeatureMap<T>> {
    source.same_plane(disparity.height, disparity.width, "backward_warp")?;
    let plan = WarpPlan::new(disparity, &source.valid, direction)?;
    Ok(FeatureMap {
        channels: source.channels,
        height: source.height,
        width: source.width,
        data: plan.apply(&source.data, source.channels),
        valid: plan.valid(),
    })
}

/// Pixelwise cosine similarity; zero where `b` is invalid or a norm is below 1e-8.
pub fn cosine_fusion_weight<T: Scalar>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
) -> Result<ScalarField<T>> {
    if a.channels != b.channels {
        return Err(Error::Argument(format!(
            "channels {} vs {}",
            a.channels, b.channels
        )));
    }
    a.same_plane(b.height, b.width, "cosine_fusion_weight")?;
    let (w, ..) = cosine_forward(&a.data, &b.data, a.channels, &b.valid);
    Ok(ScalarField {
        height: a.height,
        width: a.width,
        data: w,
    })
}

/// `left + weight · warped`, leaving `left` untouched where `warped` is invalid.
pub fn fuse_dfp<T: Scalar>(
    left: &FeatureMap<T>,
    warped: &FeatureMap<T>,
    weight: &ScalarField<T>,
) -> Result<FeatureMap<T>> {
    if left.channels != warped.channels {
        return Err(Error::Argument("fuse channel mismatch".into()));
    }
    left.same_plane(warped.height, warped.width, "fuse_dfp")?;
    left.same_plane(weight.height, weight.width, "fuse_dfp weight")?;
    let p = left.pixels();
    let mut out = left.clone();
    for c in 0..left.channels {
        for i in 0..p {
            if warped.valid[i] {
                out.data[c * p + i] += weight.data[i] * warped.data[c * p + i];
            }
        }
    }
    Ok(out)
}

/// `d_s · z_max / Z` on valid pixels.
pub fn disparity_from_depth<T: Scalar>(depth: &DepthField<T>, d_s: T) -> Result<DisparityField<T>> {
    if d_s < T::zero() {
        return Err(Error::Argument("negative disparity scale".into()));
    }
    let mut data = vec![T::zero(); depth.data.len()];
    for (i, (&z, &v)) in depth.data.iter().zip(&depth.valid).enumerate() {
        if v {
            if !(z > T::zero()) {
                return Err(Error::Data(format!("non-positive depth {z} at pixel {i}")));
            }
            data[i] = d_s * depth.z_max / z;
        }
    }
    Ok(DisparityField {
        height: depth.height,
        width: depth.width,
        data,
        valid: depth.valid.clone(),
    })
}

/// Sobel gradient magnitude (normalized to px/px) with invalid neighbours
/// replaced by the centre value and the border replicated.
pub fn sobel_magnitude<T: Scalar>(d: &DisparityField<T>) -> Vec<T> {
    let (h, w) = (d.height as isize, d.width as isize);
    let mut out = vec![T::zero(); d.data.len()];
    let eighth = T::c(0.125);
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) as usize;
            if !d.valid[p] {
                continue;
            }
            let centre = d.data[p];
            let at = |dy: isize, dx: isize| {
                let q = ((y + dy).clamp(0, h - 1) * w + (x + dx).clamp(0, w - 1)) as usize;
                if d.valid[q] {
                    d.data[q]
                } else {
                    centre
                }
            };
            let two = T::c(2.0);
            let gx = (at(-1, 1) + two * at(0, 1) + at(1, 1))
                - (at(-1, -1) + two * at(0, -1) + at(1, -1));
            let gy = (at(1, -1) + two * at(1, 0) + at(1, 1))
                - (at(-1, -1) + two * at(-1, 0) + at(-1, 1));
            out[p] = (gx * gx + gy * gy).sqrt() * eighth;
        }
    }
    out
}

/// Remove flying pixels (Sobel magnitude above threshold) from the valid set.
pub fn sharpen_disparity<T: Scalar>(
    disparity: &DisparityField<T>,
    cfg: &PseudoStereoConfig,
) -> (DisparityField<T>, ValidMask) {
    let thr = T::c(cfg.sobel_threshold);
    let mag = sobel_magnitude(disparity);
    let flying: Vec<bool> = mag
        .iter()
        .zip(&disparity.valid)
        .map(|(&m, &v)| v && m > thr)
        .collect();
    let mut out = disparity.clone();
    for (v, &f) in out.valid.iter_mut().zip(&flying) {
        *v &= !f;
    }
    (
        out,
        ValidMask::new(disparity.height, disparity.width, flying),
    )
}

/// Splat every valid pixel to `round(x - d)`; the larger disparity wins collisions.
pub fn forward_warp<T: Scalar>(
    image: &FeatureMap<T>,
    disparity: &DisparityField<T>,
) -> Result<(FeatureMap<T>, ValidMask)> {
    image.same_plane(disparity.height, disparity.width, "forward_warp")?;
    let (h, w, c) = (image.height, image.width, image.channels);
    let p = h * w;
    let mut out = FeatureMap::zeros(c, h, w);
    let mut best: Vec<Option<T>> = vec![None; p];
    let half = T::c(0.5);
    for y in 0..h {
        for x in 0..w {
            let s = y * w + x;
            if !image.valid[s] || !disparity.valid[s] {
                continue;
            }
            let d = disparity.data[s];
            let xt = (T::from_usize_lossy(x) - d + half).floor();
            if xt < T::zero() || xt > T::from_usize_lossy(w - 1) {
                continue;
            }
            let t = y * w + xt.to_usize().unwrap_or(0);
            if best[t].is_some_and(|b| b >= d) {
                continue;
            }
            best[t] = Some(d);
            for ch in 0..c {
                out.data[ch * p + t] = image.data[ch * p + s];
            }
        }
    }
    let valid: Vec<bool> = best.iter().map(Option::is_some).collect();
    out.valid = valid.clone();
    Ok((out, ValidMask::new(h, w, valid)))
}

/// Fill pixels outside `valid` from `donor` or with zeros.
pub fn fill_holes<T: Scalar>(
    image: &FeatureMap<T>,
    valid: &ValidMask,
    donor: Option<&FeatureMap<T>>,
    mode: FillMode,
) -> Result<FeatureMap<T>> {
    image.same_plane(valid.height, valid.width, "fill_holes")?;
    let p = image.pixels();
    let mut out = image.clone();
    match mode {
        FillMode::TemporalDonor => {
            let donor = donor.ok_or_else(|| {
                Error::Argument("temporal_donor fill requires a donor frame".into())
            })?;
            if donor.channels != image.channels {
                return Err(Error::Argument("donor channels".into()));
            }
            donor.same_plane(image.height, image.width, "donor")?;
            for i in (0..p).filter(|&i| !valid.data[i]) {
                for c in 0..image.channels {
                    out.data[c * p + i] = donor.data[c * p + i];
                }
            }
            out.valid = vec![true; p];
        }
        FillMode::BlankWithMask => {
            for i in (0..p).filter(|&i| !valid.data[i]) {
                for c in 0..image.channels {
                    out.data[c * p + i] = T::zero();
                }
            }
            out.valid = valid.data.clone();
        }
    }
    Ok(out)
}

/// Synthesize a right view from a left image and its depth:
/// depth → disparity → sharpen → forward warp → fill.
pub fn synth_right_view<T: Scalar>(
    left: &FeatureMap<T>,
    depth: &DepthField<T>,
    d_s: T,
    donor: Option<&FeatureMap<T>>,
    cfg: &PseudoStereoConfig,
) -> Result<(FeatureMap<T>, ValidMask)> {
    let disparity = disparity_from_depth(depth, d_s)?;
    let (sharp, _) = sharpen_disparity(&disparity, cfg);
    let (warped, covered) = forward_warp(left, &sharp)?;
    let filled = fill_holes(&warped, &covered, donor, cfg.fill_mode)?;
    let valid = ValidMask::new(filled.height, filled.width, filled.valid.clone());
    Ok((filled, valid))
}

/// Disparity expressed on the right view's pixel grid by splatting the left field.
pub fn right_view_disparity<T: Scalar>(left: &DisparityField<T>) -> Result<DisparityField<T>> {
    let as_map = FeatureMap {
        channels: 1,
        height: left.height,
        width: left.width,
        data: left.data.clone(),
        valid: left.valid.clone(),
    };
    let (warped, covered) = forward_warp(&as_map, left)?;
    Ok(DisparityField {
        height: left.height,
        width: left.width,
        data: warped.data,
        valid: covered.data,
    })
}

/// Validity at `stride` resolution: a cell is valid when all covered pixels are.
pub fn pool_valid(valid: &[bool], height: usize, width: usize, stride: usize) -> Vec<bool> {
    let (h, w) = (height / stride, width / stride);
    let mut out = vec![true; h * w];
    for y in 0..h * stride {
        for x in 0..w * stride {
            if !valid[y * width + x] {
                out[(y / stride) * w + x / stride] = false;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> FeatureMap<f64> {
        FeatureMap::new(1, 1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn zero_disparity_is_identity() {
        let src = FeatureMap::new(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        let out = backward_warp(&src, &DisparityField::uniform(2, 3, 0.0)).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn integer_shift_gathers_left_neighbour() {
        let out = backward_warp(
            &row(&[10., 20., 30., 40.]),
            &DisparityField::uniform(1, 4, 1.0),
        )
        .unwrap();
        assert_eq!(out.valid, vec![false, true, true, true]);
        assert_eq!(&out.data[1..], &[10., 20., 30.]);
    }

    #[test]
    fn half_pixel_shift_interpolates() {
        let out = backward_warp(
            &row(&[10., 20., 30., 40.]),
            &DisparityField::uniform(1, 4, 0.5),
        )
        .unwrap();
        assert!(!out.valid[0]);
        for (got, want) in out.data[1..].iter().zip([15., 25., 35.]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_rejects_shape_mismatch() {
        let err = backward_warp(&row(&[1., 2.]), &DisparityField::uniform(1, 3, 0.0));
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn invalid_source_pixels_poison_samples() {
        let mut src = row(&[1., 2., 3., 4.]);
        src.valid[1] = false;
        let out = backward_warp(&src, &DisparityField::uniform(1, 4, 0.5)).unwrap();
        assert_eq!(out.valid, vec![false, false, false, true]);
    }

    #[test]
    fn cosine_weight_cases() {
        let a = FeatureMap::<f64>::new(2, 1, 1, vec![1., 0.]).unwrap();
        let b = FeatureMap::new(2, 1, 1, vec![0., 1.]).unwrap();
        assert_eq!(cosine_fusion_weight(&a, &b).unwrap().data, vec![0.0]);
        let w = cosine_fusion_weight(&a, &a).unwrap().data[0];
        assert!((w - 1.0).abs() < 1e-7);
        let c = FeatureMap::new(2, 1, 1, vec![1., 1.]).unwrap();
        let w = cosine_fusion_weight(&c, &a).unwrap().data[0];
        assert!((w - 0.70711).abs() < 1e-5);
        let zero = FeatureMap::new(2, 1, 1, vec![0., 0.]).unwrap();
        assert_eq!(cosine_fusion_weight(&zero, &a).unwrap().data, vec![0.0]);
    }

    #[test]
    fn fuse_arithmetic_and_invalid_passthrough() {
        let left = FeatureMap::new(1, 1, 2, vec![3., 3.]).unwrap();
        let mut warped = FeatureMap::new(1, 1, 2, vec![2., 2.]).unwrap();
        warped.valid[1] = false;
        let w = ScalarField {
            height: 1,
            width: 2,
            data: vec![0.5, 0.5],
        };
        let out = fuse_dfp(&left, &warped, &w).unwrap();
        assert_eq!(out.data, vec![4.0, 3.0]);
    }

    #[test]
    fn disparity_from_depth_examples() {
        let depth = DepthField::new(2, 2, vec![2., 4., 8., 8.]).unwrap();
        assert_eq!(depth.z_max, 8.0);
        assert_eq!(
            disparity_from_depth(&depth, 1.0).unwrap().data,
            vec![4., 2., 1., 1.]
        );
        assert!(disparity_from_depth(&depth, 0.0)
            .unwrap()
            .data
            .iter()
            .all(|&d| d == 0.0));
        let flat = DepthField::new(1, 3, vec![5.; 3]).unwrap();
        assert_eq!(disparity_from_depth(&flat, 7.0).unwrap().data, vec![7.; 3]);
        let bad = DepthField::new(1, 2, vec![0., 1.]).unwrap();
        assert!(matches!(
            disparity_from_depth(&bad, 1.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn sobel_flags_two_column_band_on_step() {
        let (h, w) = (5, 8);
        let data = (0..h * w)
            .map(|i| if i % w >= 4 { 10.0 } else { 0.0 })
            .collect();
        let d = DisparityField::new(h, w, data).unwrap();
        let cfg = PseudoStereoConfig::default();
        let (sharp, flying) = sharpen_disparity(&d, &cfg);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(flying.data[y * w + x], x == 3 || x == 4, "({x},{y})");
                assert_eq!(sharp.valid[y * w + x], !(x == 3 || x == 4));
            }
        }
        let constant = DisparityField::uniform(4, 4, 3.0);
        assert_eq!(sharpen_disparity(&constant, &cfg).1.count(), 0);
        let inf = PseudoStereoConfig {
            sobel_threshold: f64::INFINITY,
            ..cfg
        };
        assert_eq!(sharpen_disparity(&d, &inf).0, d);
    }

    #[test]
    fn forward_warp_examples() {
        let (out, valid) =
            forward_warp(&row(&[1., 2., 3., 4.]), &DisparityField::uniform(1, 4, 1.0)).unwrap();
        assert_eq!(valid.data, vec![true, true, true, false]);
        assert_eq!(&out.data[..3], &[2., 3., 4.]);

        // pixel 3 (d=2) and pixel 2 (d=1) both land on target 1.
        let img = row(&[0., 0., 5., 9.]);
        let d = DisparityField::new(1, 4, vec![0., 0., 1., 2.]).unwrap();
        let (out, _) = forward_warp(&img, &d).unwrap();
        assert_eq!(out.data[1], 9.0);
        let d = DisparityField::new(1, 4, vec![0., 0., 1., 2.]).unwrap();
        let img = row(&[0., 0., 9., 5.]);
        let (out, _) = forward_warp(
            &img,
            &DisparityField {
                data: vec![0., 0., 2., 1.],
                ..d
            },
        )
        .unwrap();
        assert_eq!(out.data[0], 9.0);
    }

    #[test]
    fn fill_modes() {
        let img = row(&[1., 2., 3.]);
        let valid = ValidMask::new(1, 3, vec![true, false, true]);
        let donor = row(&[7., 7., 7.]);
        let filled = fill_holes(&img, &valid, Some(&donor), FillMode::TemporalDonor).unwrap();
        assert_eq!(filled.data, vec![1., 7., 3.]);
        let blank = fill_holes(&img, &valid, None, FillMode::BlankWithMask).unwrap();
        assert_eq!(blank.data, vec![1., 0., 3.]);
        assert_eq!(blank.valid, vec![true, false, true]);
        assert!(matches!(
            fill_holes(&img, &valid, None, FillMode::TemporalDonor),
            Err(Error::Argument(_))
        ));
        let all = ValidMask::all(1, 3, true);
        assert_eq!(
            fill_holes(&img, &all, None, FillMode::BlankWithMask)
                .unwrap()
                .data,
            img.data
        );
    }

    #[test]
    fn synth_right_view_flat_depth_shifts() {
        let (h, w) = (2, 6);
        let left = FeatureMap::new(1, h, w, (0..h * w).map(|i| i as f64).collect()).unwrap();
        let depth = DepthField::new(h, w, vec![4.0; h * w]).unwrap();
        let cfg = PseudoStereoConfig {
            fill_mode: FillMode::BlankWithMask,
            ..Default::default()
        };
        let (right, valid) = synth_right_view(&left, &depth, 2.0, None, &cfg).unwrap();
        for y in 0..h {
            for x in 0..w {
                if x + 2 < w {
                    assert!(valid.data[y * w + x]);
                    assert_eq!(right.at(0, y, x), left.at(0, y, x + 2));
                } else {
                    assert!(!valid.data[y * w + x]);
                    assert_eq!(right.at(0, y, x), 0.0);
                }
            }
        }
        let (same, valid) = synth_right_view(&left, &depth, 0.0, None, &cfg).unwrap();
        assert_eq!(same.data, left.data);
        assert_eq!(valid.count(), h * w);
        let again = synth_right_view(&left, &depth, 2.0, None, &cfg).unwrap();
        assert_eq!(again.0, right);
    }
}
