//! Pixel-space projection of explanations and the distance between two
//! explanations of possibly different segmentations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::PlanarImage;
use crate::surrogate::Explanation;

/// Per-pixel importance: every pixel carries the coefficient of its superpixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub class_id: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImportanceMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Intercepts are not part of the projection.
pub fn project_explanation(expl: &Explanation, class_id: usize) -> Result<ImportanceMap> {
    let coefficients = expl.coefficients_for(class_id)?;
    let seg = &expl.segment_map;
    Ok(ImportanceMap {
        class_id,
        height: seg.height(),
        width: seg.width(),
        values: seg
            .labels()
            .iter()
            .map(|&l| coefficients[l as usize])
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Plain squared Frobenius norm, summed over pixels.
    #[default]
    Sum,
    /// Squared Frobenius norm divided by the pixel count.
    PerPixel,
}

/// Mean over the explained classes of `||E_k - E'_k||_F^2`.
pub fn explanation_distance(a: &Explanation, b: &Explanation) -> Result<f64> {
    explanation_distance_with(a, b, Normalization::Sum)
}

pub fn explanation_distance_with(
    a: &Explanation,
    b: &Explanation,
    norm: Normalization,
) -> Result<f64> {
    if a.segment_map.dims() != b.segment_map.dims() {
        return Err(Error::Dimension(format!(
            "explanations cover {:?} and {:?} pixels",
            a.segment_map.dims(),
            b.segment_map.dims()
        )));
    }
    let (mut ca, mut cb) = (a.class_ids.clone(), b.class_ids.clone());
    ca.sort_unstable();
    cb.sort_unstable();
    if ca != cb {
        return Err(Error::Comparability(format!(
            "explained classes {:?} and {:?} differ",
            a.class_ids, b.class_ids
        )));
    }
    if ca.is_empty() {
        return Err(Error::Comparability("no explained classes".into()));
    }
    let mut total = 0.0;
    for &class in &ca {
        let (ea, eb) = (
            project_explanation(a, class)?,
            project_explanation(b, class)?,
        );
        let sq: f64 = ea
            .values
            .iter()
            .zip(&eb.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += match norm {
            Normalization::Sum => sq,
            Normalization::PerPixel => sq / ea.values.len() as f64,
        };
    }
    Ok(total / ca.len() as f64)
}

/// Peak tint opacity, reached by the largest-magnitude coefficient.
pub const OVERLAY_MAX_OPACITY: f64 = 0.6;

/// The source image with positive superpixels tinted green, negative ones
/// red, opacity proportional to `|coef| / max |coef|`, and yellow boundaries.
pub fn overlay_image(
    img: &PlanarImage,
    expl: &Explanation,
    class_id: usize,
) -> Result<PlanarImage> {
    let seg = &expl.segment_map;
    if img.dims() != seg.dims() {
        return Err(Error::Dimension(format!(
            "image is {:?}, explanation covers {:?}",
            img.dims(),
            seg.dims()
        )));
    }
    let coefficients = expl.coefficients_for(class_id)?;
    let peak = coefficients.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let boundary = seg.boundary_mask();
    let w = img.width();
    PlanarImage::from_fn(img.height(), w, 3, |c, r, col| {
        let idx = r * w + col;
        if boundary[idx] {
            return [1.0, 1.0, 0.0][c];
        }
        let base = img.get(if img.channels() == 1 { 0 } else { c }, r, col);
        let coef = coefficients[seg.labels()[idx] as usize];
        if peak == 0.0 || coef == 0.0 {
            return base;
        }
        let alpha = OVERLAY_MAX_OPACITY * coef.abs() / peak;
        let tint = if coef > 0.0 {
            [0.0, 1.0, 0.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        (1.0 - alpha) * base + alpha * tint[c]
    })
}
