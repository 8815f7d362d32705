//! Neighbourhood distances and the exponential kernel that turns a distance
//! into a sample weight.
//!
//! Three distances are provided: the cosine distance between interpretable
//! bit vectors, and two perceptual distances computed in pixel space on the
//! luminance channel, MS-SSIM and NLPD.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    self, binomial5, box_kernel, gaussian_kernel, Boundary, Kernel2D, PlanarImage,
};
use crate::surrogate::InterpretableVector;

/// Canonical five-scale MS-SSIM exponents.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW_RADIUS: usize = 5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
// Lower clamp for per-scale means so that fractional powers stay defined.
const SSIM_FLOOR: f64 = 1e-8;

pub const NLPD_DEFAULT_STAGES: usize = 4;
pub const NLPD_LARGE_STAGES: usize = 6;
pub const NLPD_DEFAULT_CONSTANT: f64 = 0.17;
pub const NLPD_POOL_SIDE: usize = 5;
// Images whose short side reaches this use the deeper pyramid in auto mode.
const NLPD_LARGE_MIN_SIDE: usize = 192;

pub const DEFAULT_KERNEL_WIDTH: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsssimParams {
    /// Per-scale exponents, finest scale first.
    pub weights: Vec<f64>,
}

impl Default for MsssimParams {
    fn default() -> Self {
        Self {
            weights: MSSSIM_WEIGHTS.to_vec(),
        }
    }
}

impl MsssimParams {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Parameter("MS-SSIM weights must be positive".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        // The published five-scale weights sum to 1.0001; they are renormalized anyway.
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::Parameter(format!(
                "MS-SSIM weights must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Number of scales usable on an `h x w` image: the coarsest scale must
    /// still hold a full SSIM window.
    pub fn feasible_scales(&self, h: usize, w: usize) -> usize {
        let side = 2 * SSIM_WINDOW_RADIUS + 1;
        let (mut h, mut w) = (h, w);
        let mut scales = 0;
        while scales < self.weights.len() && h >= side && w >= side {
            scales += 1;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        scales
    }

    /// Leading weights renormalized to the feasible scale count.
    pub fn weights_for(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        let scales = self.feasible_scales(h, w);
        if scales == 0 {
            return Err(Error::Size(format!(
                "{h}x{w} image is smaller than the {0}x{0} SSIM window",
                2 * SSIM_WINDOW_RADIUS + 1
            )));
        }
        let head = &self.weights[..scales];
        let total: f64 = head.iter().sum();
        Ok(head.iter().map(|w| w / total).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlpdParams {
    /// Pyramid depth; `None` picks it from the image size.
    pub stages: Option<usize>,
    /// Additive constant in the divisive normalization.
    pub constant: f64,
}

impl Default for NlpdParams {
    fn default() -> Self {
        Self {
            stages: None,
            constant: NLPD_DEFAULT_CONSTANT,
        }
    }
}

impl NlpdParams {
    pub fn validate(&self) -> Result<()> {
        if self.stages == Some(0) {
            return Err(Error::Parameter("NLPD needs at least one stage".into()));
        }
        if !(self.constant > 0.0) || !self.constant.is_finite() {
            return Err(Error::Parameter(format!(
                "NLPD normalization constant must be positive, got {}",
                self.constant
            )));
        }
        Ok(())
    }

    /// Largest stage count whose every band is big enough for the pooling filter.
    pub fn max_stages(h: usize, w: usize) -> usize {
        let min_side = NLPD_POOL_SIDE
            .div_ceil(2)
            .max(binomial5().rows().div_ceil(2));
        let (mut h, mut w) = (h, w);
        let mut stages = 0;
        while h >= min_side && w >= min_side {
            stages += 1;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        stages
    }

    pub fn stages_for(&self, h: usize, w: usize) -> Result<usize> {
        let max = Self::max_stages(h, w);
        let stages = match self.stages {
            Some(s) => s,
            None if h.min(w) >= NLPD_LARGE_MIN_SIDE && max >= NLPD_LARGE_STAGES => {
                NLPD_LARGE_STAGES
            }
            None => NLPD_DEFAULT_STAGES.min(max),
        };
        if stages == 0 || stages > max {
            return Err(Error::Size(format!(
                "{h}x{w} image supports at most {max} NLPD stages, {stages} requested"
            )));
        }
        Ok(stages)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceKind {
    CosineBinary,
    Msssim(MsssimParams),
    Nlpd(NlpdParams),
}

impl DistanceKind {
    pub fn cosine() -> Self {
        DistanceKind::CosineBinary
    }

    pub fn msssim() -> Self {
        DistanceKind::Msssim(MsssimParams::default())
    }

    pub fn nlpd() -> Self {
        DistanceKind::Nlpd(NlpdParams::default())
    }

    /// The three kinds compared in the robustness experiment.
    pub fn all() -> Vec<Self> {
        vec![Self::cosine(), Self::msssim(), Self::nlpd()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistanceKind::CosineBinary => "cosine",
            DistanceKind::Msssim(_) => "msssim",
            DistanceKind::Nlpd(_) => "nlpd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistanceKind::CosineBinary => Ok(()),
            DistanceKind::Msssim(p) => p.validate(),
            DistanceKind::Nlpd(p) => p.validate(),
        }
    }

    pub fn is_perceptual(&self) -> bool {
        !matches!(self, DistanceKind::CosineBinary)
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" | "cosine_binary" => Ok(Self::cosine()),
            "msssim" | "ms-ssim" | "ms_ssim" => Ok(Self::msssim()),
            "nlpd" => Ok(Self::nlpd()),
            other => Err(Error::Parameter(format!("unknown distance kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub width: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_KERNEL_WIDTH,
        }
    }
}

impl KernelConfig {
    pub fn new(width: f64) -> Result<Self> {
        let cfg = Self { width };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::Parameter(format!(
                "kernel width must be positive, got {}",
                self.width
            )));
        }
        Ok(())
    }
}

/// `exp(-d^2 / width^2)`. Underflow is held at the smallest positive double
/// so every sample keeps a strictly positive weight.
pub fn kernel_weight(d: f64, cfg: KernelConfig) -> Result<f64> {
    cfg.validate()?;
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::Parameter(format!(
            "distance must be finite and non-negative, got {d}"
        )));
    }
    let ratio = d / cfg.width;
    Ok((-(ratio * ratio)).exp().max(f64::MIN_POSITIVE))
}

/// `1 - a.b / (|a| |b|)`, with 1 for any all-zero vector.
pub fn cosine_distance_binary(a: &InterpretableVector, b: &InterpretableVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "vector lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (x, y) in a.bits().iter().zip(b.bits()) {
        dot += u64::from(*x && *y);
        na += u64::from(*x);
        nb += u64::from(*y);
    }
    if na == 0 || nb == 0 {
        return Ok(1.0);
    }
    // sqrt of the exact integer product keeps identical vectors at exactly 0.
    let cos = dot as f64 / ((na * nb) as f64).sqrt();
    Ok((1.0 - cos).clamp(0.0, 1.0))
}

fn require_gray(img: &PlanarImage) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::Parameter(format!(
            "perceptual metrics expect a single-channel image, got {} channels",
            img.channels()
        )));
    }
    Ok(())
}

fn require_same_dims(a: &PlanarImage, b: &PlanarImage) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::Dimension(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

// First- and second-order windowed moments of one image at one scale.
#[derive(Clone, Debug)]
struct ScaleMoments {
    image: PlanarImage,
    mean: PlanarImage,
    mean_sq: PlanarImage,
}

fn moments(img: &PlanarImage, window: &Kernel2D) -> Result<ScaleMoments> {
    Ok(ScaleMoments {
        mean: imaging::convolve_same(img, window, Boundary::Mirror)?,
        mean_sq: imaging::convolve_same(&img.mul(img)?, window, Boundary::Mirror)?,
        image: img.clone(),
    })
}

fn moment_pyramid(
    img: &PlanarImage,
    scales: usize,
    window: &Kernel2D,
) -> Result<Vec<ScaleMoments>> {
    let lowpass = binomial5();
    let mut out = Vec::with_capacity(scales);
    let mut current = img.clone();
    for s in 0..scales {
        out.push(moments(&current, window)?);
        if s + 1 < scales {
            current = imaging::downsample2(&current, &lowpass)?;
        }
    }
    Ok(out)
}

/// Mean luminance term and mean contrast-structure term at one scale.
fn scale_terms(a: &ScaleMoments, b: &ScaleMoments, window: &Kernel2D) -> Result<(f64, f64)> {
    let cross = imaging::convolve_same(&a.image.mul(&b.image)?, window, Boundary::Mirror)?;
    let n = a.image.pixel_count() as f64;
    let (mut lcs_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..a.image.pixel_count() {
        let (mx, my) = (a.mean.data()[i], b.mean.data()[i]);
        let vx = a.mean_sq.data()[i] - mx * mx;
        let vy = b.mean_sq.data()[i] - my * my;
        let cov = cross.data()[i] - mx * my;
        let cs = (2.0 * cov + SSIM_C2) / (vx + vy + SSIM_C2);
        let l = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
        cs_sum += cs;
        lcs_sum += l * cs;
    }
    Ok((lcs_sum / n, cs_sum / n))
}

fn combine_scales(per_scale: &[(f64, f64)], weights: &[f64]) -> f64 {
    let last = per_scale.len() - 1;
    per_scale
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(s, (&(lcs, cs), &w))| {
            let term = if s == last { lcs } else { cs };
            term.clamp(SSIM_FLOOR, 1.0).powf(w)
        })
        .product()
}

fn ssim_window() -> Kernel2D {
    gaussian_kernel(SSIM_WINDOW_SIGMA, SSIM_WINDOW_RADIUS)
        .expect("fixed window parameters are valid")
}

/// Multi-scale structural similarity in `(0, 1]` between two single-channel
/// images. Contrast-structure terms enter at every scale, the luminance term
/// at the coarsest one only. Fewer scales are used when the image is too
/// small for the full set, with the weights renormalized.
pub fn msssim(reference: &PlanarImage, test: &PlanarImage, params: &MsssimParams) -> Result<f64> {
    MsssimReference::new(reference, params)?.similarity(test)
}

pub fn msssim_distance(
    reference: &PlanarImage,
    test: &PlanarImage,
    params: &MsssimParams,
) -> Result<f64> {
    Ok(1.0 - msssim(reference, test, params)?)
}

/// MS-SSIM against a fixed reference, with the reference moments cached.
#[derive(Clone, Debug)]
pub struct MsssimReference {
    weights: Vec<f64>,
    window: Kernel2D,
    scales: Vec<ScaleMoments>,
}

impl MsssimReference {
    pub fn new(reference: &PlanarImage, params: &MsssimParams) -> Result<Self> {
        params.validate()?;
        require_gray(reference)?;
        let (h, w) = reference.dims();
        let weights = params.weights_for(h, w)?;
        let window = ssim_window();
        let scales = moment_pyramid(reference, weights.len(), &window)?;
        Ok(Self {
            weights,
            window,
            scales,
        })
    }

    pub fn similarity(&self, test: &PlanarImage) -> Result<f64> {
        require_gray(test)?;
        require_same_dims(&self.scales[0].image, test)?;
        let other = moment_pyramid(test, self.weights.len(), &self.window)?;
        let per_scale = self
            .scales
            .iter()
            .zip(&other)
            .map(|(a, b)| scale_terms(a, b, &self.window))
            .collect::<Result<Vec<_>>>()?;
        Ok(combine_scales(&per_scale, &self.weights))
    }

    pub fn distance(&self, test: &PlanarImage) -> Result<f64> {
        Ok(1.0 - self.similarity(test)?)
    }

    pub fn scale_count(&self) -> usize {
        self.weights.len()
    }
}

/// Laplacian pyramid with every band divided by `constant` plus a 5x5 box
/// average of its own magnitude.
pub fn nlpd_transform(img: &PlanarImage, params: &NlpdParams) -> Result<Vec<PlanarImage>> {
    params.validate()?;
    require_gray(img)?;
    let (h, w) = img.dims();
    let stages = params.stages_for(h, w)?;
    let pool = box_kernel(NLPD_POOL_SIDE)?;
    imaging::laplacian_pyramid(img, stages, &binomial5())?
        .into_iter()
        .map(|band| {
            let local = imaging::convolve_same(&band.map(f64::abs), &pool, Boundary::Mirror)?;
            let data = band
                .data()
                .iter()
                .zip(local.data())
                .map(|(v, m)| v / (params.constant + m))
                .collect();
            PlanarImage::new(band.height(), band.width(), 1, data)
        })
        .collect()
}

fn rms_diff(a: &PlanarImage, b: &PlanarImage) -> f64 {
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (sum / a.data().len() as f64).sqrt()
}

/// Mean over stages of the RMS difference between normalized bands.
pub fn nlpd_distance(
    reference: &PlanarImage,
    test: &PlanarImage,
    params: &NlpdParams,
) -> Result<f64> {
    require_same_dims(reference, test)?;
    NlpdReference::new(reference, params)?.distance(test)
}

/// NLPD against a fixed reference, with the reference transform cached.
#[derive(Clone, Debug)]
pub struct NlpdReference {
    params: NlpdParams,
    bands: Vec<PlanarImage>,
}

impl NlpdReference {
    pub fn new(reference: &PlanarImage, params: &NlpdParams) -> Result<Self> {
        let (h, w) = reference.dims();
        // Pin the stage count so the test image gets the same decomposition.
        let pinned = NlpdParams {
            stages: Some(params.stages_for(h, w)?),
            constant: params.constant,
        };
        let bands = nlpd_transform(reference, &pinned)?;
        Ok(Self {
            params: pinned,
            bands,
        })
    }

    pub fn distance(&self, test: &PlanarImage) -> Result<f64> {
        require_gray(test)?;
        require_same_dims(&self.bands[0], test)?;
        let other = nlpd_transform(test, &self.params)?;
        let total: f64 = self
            .bands
            .iter()
            .zip(&other)
            .map(|(a, b)| rms_diff(a, b))
            .sum();
        Ok(total / self.bands.len() as f64)
    }

    pub fn stage_count(&self) -> usize {
        self.bands.len()
    }
}

/// A pixel-space distance with its reference pre-processed.
#[derive(Clone, Debug)]
pub enum PreparedDistance {
    Msssim(MsssimReference),
    Nlpd(NlpdReference),
}

impl PreparedDistance {
    /// Returns `None` for the cosine kind, which never looks at pixels.
    /// `reference` may be color; it is reduced to luminance here.
    pub fn new(kind: &DistanceKind, reference: &PlanarImage) -> Result<Option<Self>> {
        kind.validate()?;
        let gray = imaging::to_grayscale(reference);
        Ok(match kind {
            DistanceKind::CosineBinary => None,
            DistanceKind::Msssim(p) => Some(Self::Msssim(MsssimReference::new(&gray, p)?)),
            DistanceKind::Nlpd(p) => Some(Self::Nlpd(NlpdReference::new(&gray, p)?)),
        })
    }

    /// Distance from the reference to `test` (color or gray).
    pub fn distance(&self, test: &PlanarImage) -> Result<f64> {
        let gray = imaging::to_grayscale(test);
        match self {
            Self::Msssim(r) => r.distance(&gray),
            Self::Nlpd(r) => r.distance(&gray),
        }
    }
}
