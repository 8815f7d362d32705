//! Parametric corruptions at five severities.
//!
//! | family         | parameter               | severity 1 .. 5            |
//! |----------------|-------------------------|----------------------------|
//! | gaussian_noise | noise sigma             | .04 .06 .08 .10 .14        |
//! | impulse_noise  | flipped fraction        | .01 .02 .03 .05 .07        |
//! | gaussian_blur  | blur sigma              | 0.6 1.0 1.5 2.0 3.0        |
//! | brightness     | additive shift          | .05 .10 .15 .20 .30        |
//! | contrast       | scale about 0.5         | .85 .70 .55 .40 .30        |
//! | pixelate       | block side              | 2 3 4 6 8                  |
//! | jpeg           | encoder quality         | 80 60 40 25 15             |
//!
//! `identity` returns its input at any severity and exists for pipeline
//! checks.

use std::fmt;
use std::str::FromStr;

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, Boundary, PlanarImage};

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

const GAUSSIAN_NOISE_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.10, 0.14];
const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.02, 0.03, 0.05, 0.07];
const BLUR_SIGMA: [f64; 5] = [0.6, 1.0, 1.5, 2.0, 3.0];
const BRIGHTNESS_SHIFT: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.30];
const CONTRAST_SCALE: [f64; 5] = [0.85, 0.70, 0.55, 0.40, 0.30];
const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];
const JPEG_QUALITY: [u8; 5] = [80, 60, 40, 25, 15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
    Jpeg,
    Identity,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::GaussianNoise,
        Family::ImpulseNoise,
        Family::GaussianBlur,
        Family::Brightness,
        Family::Contrast,
        Family::Pixelate,
        Family::Jpeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianNoise => "gaussian_noise",
            Family::ImpulseNoise => "impulse_noise",
            Family::GaussianBlur => "gaussian_blur",
            Family::Brightness => "brightness",
            Family::Contrast => "contrast",
            Family::Pixelate => "pixelate",
            Family::Jpeg => "jpeg",
            Family::Identity => "identity",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, Family::GaussianNoise | Family::ImpulseNoise)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Family::ALL
            .into_iter()
            .chain([Family::Identity])
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unsupported distortion family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub family: Family,
    pub severity: u8,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(family: Family, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Parameter(format!(
                "severity must be 1..=5, got {severity}"
            )));
        }
        Ok(Self {
            family,
            severity,
            seed,
        })
    }

    /// Parses `"family:severity"`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let (family, severity) = s
            .split_once(':')
            .ok_or_else(|| Error::Parameter(format!("expected family:severity, got {s:?}")))?;
        let severity = severity
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("bad severity in {s:?}")))?;
        Self::new(family.parse()?, severity, seed)
    }

    fn index(&self) -> usize {
        usize::from(self.severity - 1)
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family, self.severity)
    }
}

pub fn apply_distortion(img: &PlanarImage, spec: &DistortionSpec) -> Result<PlanarImage> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::Parameter(format!(
            "severity must be 1..=5, got {}",
            spec.severity
        )));
    }
    let i = spec.index();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out = match spec.family {
        Family::Identity => img.clone(),
        Family::GaussianNoise => {
            let noise = Normal::new(0.0, GAUSSIAN_NOISE_SIGMA[i]).expect("positive sigma");
            img.map(|v| v + noise.sample(&mut rng))
        }
        Family::ImpulseNoise => impulse(img, IMPULSE_FRACTION[i], &mut rng),
        Family::GaussianBlur => {
            let sigma = BLUR_SIGMA[i];
            let kernel = imaging::gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize)?;
            imaging::convolve_same(img, &kernel, Boundary::Mirror)?
        }
        Family::Brightness => img.map(|v| v + BRIGHTNESS_SHIFT[i]),
        Family::Contrast => img.map(|v| (v - 0.5) * CONTRAST_SCALE[i] + 0.5),
        Family::Pixelate => pixelate(img, PIXELATE_BLOCK[i]),
        Family::Jpeg => jpeg_round_trip(img, JPEG_QUALITY[i])?,
    };
    Ok(out.clamp01())
}

/// The five severities of one family applied independently to `img`.
pub fn severity_sweep(img: &PlanarImage, family: Family, seed: u64) -> Result<Vec<PlanarImage>> {
    SEVERITIES
        .iter()
        .map(|&s| apply_distortion(img, &DistortionSpec::new(family, s, seed)?))
        .collect()
}

fn impulse(img: &PlanarImage, fraction: f64, rng: &mut ChaCha8Rng) -> PlanarImage {
    let mut out = img.clone();
    for c in 0..img.channels() {
        for v in out.plane_mut(c) {
            if rng.random::<f64>() < fraction {
                *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

fn pixelate(img: &PlanarImage, block: usize) -> PlanarImage {
    let (h, w) = img.dims();
    let mut out = img.clone();
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for r0 in (0..h).step_by(block) {
            for c0 in (0..w).step_by(block) {
                let (r1, c1) = ((r0 + block).min(h), (c0 + block).min(w));
                let mut sum = 0.0;
                for r in r0..r1 {
                    sum += src[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                let mean = sum / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    dst[r * w + c0..r * w + c1].fill(mean);
                }
            }
        }
    }
    out
}

/// Baseline JPEG encode at `quality` with 4:2:0 chroma subsampling, then decode.
fn jpeg_round_trip(img: &PlanarImage, quality: u8) -> Result<PlanarImage> {
    let (h, w) = img.dims();
    let (w16, h16) = (
        u16::try_from(w).map_err(|_| Error::Size("image too wide for JPEG".into()))?,
        u16::try_from(h).map_err(|_| Error::Size("image too tall for JPEG".into()))?,
    );
    let raw = imaging::to_u8_interleaved(img);
    let mut bytes = Vec::new();
    let mut encoder = Encoder::new(&mut bytes, quality);
    encoder.set_sampling_factor(SamplingFactor::R_4_2_0);
    encoder.set_progressive(false);
    let color = if img.channels() == 1 {
        ColorType::Luma
    } else {
        ColorType::Rgb
    };
    encoder
        .encode(&raw, w16, h16, color)
        .map_err(|e| Error::Format(format!("jpeg encode: {e}")))?;
    let decoded = imaging::decode_jpeg(&bytes)?;
    if decoded.channels() == img.channels() {
        Ok(decoded)
    } else if img.channels() == 1 {
        Ok(imaging::to_grayscale(&decoded))
    } else {
        let gray = decoded.plane(0).to_vec();
        PlanarImage::new(h, w, 3, gray.repeat(3))
    }
}
