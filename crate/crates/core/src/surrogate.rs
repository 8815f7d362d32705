//! Local linear surrogate explanations.
//!
//! Binary vectors over superpixels are sampled uniformly, each one is
//! rendered back to an image by ablating the switched-off superpixels, the
//! black box is queried on the result, and a ridge regression weighted by the
//! kernelised distance to the query image is fit per explained class.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::Model;
use crate::error::{Error, Result};
use crate::imaging::PlanarImage;
use crate::metrics::{self, DistanceKind, KernelConfig, PreparedDistance};
use crate::segmentation::{segment_means, SegmentMap};

pub const DEFAULT_SAMPLE_COUNT: usize = 1000;
pub const DEFAULT_RIDGE_ALPHA: f64 = 1.0;

/// Presence (`true`) or ablation (`false`) of each superpixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InterpretableVector {
    bits: Vec<bool>,
}

impl InterpretableVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn ones(len: usize) -> Self {
        Self {
            bits: vec![true; len],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn as_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighbourhoodSample {
    pub vector: InterpretableVector,
    /// Distance from the query point under the configured kind.
    pub distance: f64,
    /// Kernel weight of the sample, in `(0, 1]`.
    pub weight: f64,
    /// Black-box probability for each explained class, in explanation order.
    pub targets: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Ablated superpixels are set to black.
    #[default]
    Zero,
    /// Ablated superpixels take their own mean colour.
    SegmentMean,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "mean" | "segment_mean" => Ok(Self::SegmentMean),
            other => Err(Error::Parameter(format!("unknown ablation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub sample_count: usize,
    pub ablation: AblationMode,
    pub ridge_alpha: f64,
    pub kernel: KernelConfig,
    pub distance: DistanceKind,
    pub rng_seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            sample_count: DEFAULT_SAMPLE_COUNT,
            ablation: AblationMode::Zero,
            ridge_alpha: DEFAULT_RIDGE_ALPHA,
            kernel: KernelConfig::default(),
            distance: DistanceKind::CosineBinary,
            rng_seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self, segment_count: usize) -> Result<()> {
        if self.sample_count < segment_count + 1 {
            return Err(Error::Parameter(format!(
                "{} samples cannot determine {segment_count} coefficients plus an intercept",
                self.sample_count
            )));
        }
        if !(self.ridge_alpha >= 0.0) || !self.ridge_alpha.is_finite() {
            return Err(Error::Parameter(format!(
                "ridge alpha must be >= 0, got {}",
                self.ridge_alpha
            )));
        }
        self.kernel.validate()?;
        self.distance.validate()
    }
}

/// `sample_count` vectors: the all-ones query representation first, then
/// i.i.d. fair coin flips per bit from a ChaCha8 stream seeded with
/// `rng_seed`.
pub fn sample_vectors(segment_count: usize, cfg: &SurrogateConfig) -> Vec<InterpretableVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::with_capacity(cfg.sample_count);
    if cfg.sample_count > 0 {
        out.push(InterpretableVector::ones(segment_count));
    }
    for _ in 1..cfg.sample_count {
        out.push(InterpretableVector::new(
            (0..segment_count).map(|_| rng.random::<bool>()).collect(),
        ));
    }
    out
}

pub fn ablate(
    img: &PlanarImage,
    seg: &SegmentMap,
    v: &InterpretableVector,
    mode: AblationMode,
) -> Result<PlanarImage> {
    let means = match mode {
        AblationMode::Zero => None,
        AblationMode::SegmentMean => Some(segment_means(img, seg)?),
    };
    ablate_with(img, seg, v, means.as_deref())
}

fn ablate_with(
    img: &PlanarImage,
    seg: &SegmentMap,
    v: &InterpretableVector,
    means: Option<&[Vec<f64>]>,
) -> Result<PlanarImage> {
    seg.check_image(img)?;
    if v.len() != seg.segment_count() {
        return Err(Error::Dimension(format!(
            "vector has {} bits for {} segments",
            v.len(),
            seg.segment_count()
        )));
    }
    let mut out = img.clone();
    for c in 0..img.channels() {
        for (px, &l) in out.plane_mut(c).iter_mut().zip(seg.labels()) {
            if !v.bits()[l as usize] {
                *px = means.map_or(0.0, |m| m[l as usize][c]);
            }
        }
    }
    Ok(out)
}

fn check_classes(class_ids: &[usize], class_count: usize) -> Result<()> {
    if class_ids.is_empty() {
        return Err(Error::Parameter("no classes to explain".into()));
    }
    for (i, &c) in class_ids.iter().enumerate() {
        if c >= class_count {
            return Err(Error::Parameter(format!(
                "class {c} out of range for {class_count} classes"
            )));
        }
        if class_ids[..i].contains(&c) {
            return Err(Error::Parameter(format!("class {c} listed twice")));
        }
    }
    Ok(())
}

/// Samples, queries and weights a neighbourhood under `cfg.distance`.
pub fn build_neighbourhood(
    img: &PlanarImage,
    seg: &SegmentMap,
    model: &dyn Model,
    class_ids: &[usize],
    cfg: &SurrogateConfig,
) -> Result<Vec<NeighbourhoodSample>> {
    let mut all = build_neighbourhoods(
        img,
        seg,
        model,
        class_ids,
        cfg,
        std::slice::from_ref(&cfg.distance),
    )?;
    Ok(all.remove(0))
}

/// One neighbourhood per distance kind. The sampled vectors and black-box
/// outputs are shared; only distances and weights differ between kinds.
pub fn build_neighbourhoods(
    img: &PlanarImage,
    seg: &SegmentMap,
    model: &dyn Model,
    class_ids: &[usize],
    cfg: &SurrogateConfig,
    kinds: &[DistanceKind],
) -> Result<Vec<Vec<NeighbourhoodSample>>> {
    seg.check_image(img)?;
    cfg.validate(seg.segment_count())?;
    check_classes(class_ids, model.class_count())?;
    let prepared = kinds
        .iter()
        .map(|k| PreparedDistance::new(k, img))
        .collect::<Result<Vec<_>>>()?;
    let means = match cfg.ablation {
        AblationMode::Zero => None,
        AblationMode::SegmentMean => Some(segment_means(img, seg)?),
    };
    let query = InterpretableVector::ones(seg.segment_count());
    let vectors = sample_vectors(seg.segment_count(), cfg);

    // Collected in sample order whatever the completion order.
    let evaluated = vectors
        .par_iter()
        .enumerate()
        .map(|(index, v)| -> Result<(Vec<f64>, Vec<f64>)> {
            let z = ablate_with(img, seg, v, means.as_deref())?;
            let probs = model.predict(&z).map_err(|e| Error::Model {
                index,
                source: Box::new(e),
            })?;
            let targets = class_ids.iter().map(|&c| probs.get(c)).collect();
            let distances = prepared
                .iter()
                .map(|p| match p {
                    None => metrics::cosine_distance_binary(&query, v),
                    Some(p) => p.distance(&z),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((targets, distances))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = vec![Vec::with_capacity(vectors.len()); kinds.len()];
    for (v, (targets, distances)) in vectors.into_iter().zip(evaluated) {
        for (k, d) in distances.into_iter().enumerate() {
            out[k].push(NeighbourhoodSample {
                vector: v.clone(),
                distance: d,
                weight: metrics::kernel_weight(d, cfg.kernel)?,
                targets: targets.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// Minimizes `sum_i w_i (y_i - b.z_i - b0)^2 + alpha |b|^2` in closed form.
/// The intercept is not penalized.
pub fn weighted_ridge_fit(
    samples: &[NeighbourhoodSample],
    class_index: usize,
    alpha: f64,
) -> Result<RidgeFit> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!(
            "ridge alpha must be >= 0, got {alpha}"
        )));
    }
    let first = samples
        .first()
        .ok_or_else(|| Error::Parameter("no samples to fit".into()))?;
    if samples.iter().all(|s| s.vector == first.vector) {
        return Err(Error::Parameter(
            "need at least two distinct sample vectors".into(),
        ));
    }
    let p = first.vector.len();
    if samples.iter().any(|s| s.vector.len() != p) {
        return Err(Error::Dimension("sample vectors differ in length".into()));
    }
    if samples.iter().any(|s| class_index >= s.targets.len()) {
        return Err(Error::Parameter(format!(
            "class position {class_index} out of range"
        )));
    }
    if samples
        .iter()
        .any(|s| !(s.weight >= 0.0) || !s.weight.is_finite())
    {
        return Err(Error::Parameter(
            "sample weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if !(total > 0.0) {
        return Err(Error::Parameter("sample weights sum to zero".into()));
    }

    let mut z_mean = DVector::<f64>::zeros(p);
    let mut y_mean = 0.0;
    for s in samples {
        for (j, z) in s.vector.as_f64().enumerate() {
            z_mean[j] += s.weight * z;
        }
        y_mean += s.weight * s.targets[class_index];
    }
    z_mean /= total;
    y_mean /= total;

    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut centered = DVector::<f64>::zeros(p);
    for s in samples {
        for (j, z) in s.vector.as_f64().enumerate() {
            centered[j] = z - z_mean[j];
        }
        gram.syger(s.weight, &centered, &centered, 1.0);
        rhs.axpy(s.weight * (s.targets[class_index] - y_mean), &centered, 1.0);
    }
    for j in 0..p {
        gram[(j, j)] += alpha;
    }

    let scale = (0..p).map(|j| gram[(j, j)]).fold(0.0, f64::max);
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Singular("weighted normal equations are not positive definite".into())
    })?;
    let min_pivot = (0..p)
        .map(|j| chol.l_dirty()[(j, j)])
        .fold(f64::INFINITY, f64::min);
    if min_pivot * min_pivot <= 1e-12 * scale {
        return Err(Error::Singular(
            "weighted normal equations are rank deficient; use alpha > 0".into(),
        ));
    }
    let beta = chol.solve(&rhs);
    let intercept = y_mean - beta.dot(&z_mean);
    Ok(RidgeFit {
        coefficients: beta.iter().copied().collect(),
        intercept,
    })
}

/// Settings echoed into a serialized explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub seed: u64,
    pub distance: DistanceKind,
    pub kernel_width: f64,
    pub ridge_alpha: f64,
    pub sample_count: usize,
    pub ablation: AblationMode,
}

impl From<&SurrogateConfig> for ConfigEcho {
    fn from(cfg: &SurrogateConfig) -> Self {
        Self {
            seed: cfg.rng_seed,
            distance: cfg.distance.clone(),
            kernel_width: cfg.kernel.width,
            ridge_alpha: cfg.ridge_alpha,
            sample_count: cfg.sample_count,
            ablation: cfg.ablation,
        }
    }
}

/// Per-class linear surrogate over the superpixels of `segment_map`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawExplanation")]
pub struct Explanation {
    pub class_ids: Vec<usize>,
    pub coefficients: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub segment_map: SegmentMap,
    pub config: ConfigEcho,
}

#[derive(Deserialize)]
struct RawExplanation {
    class_ids: Vec<usize>,
    coefficients: Vec<Vec<f64>>,
    intercepts: Vec<f64>,
    segment_map: RawSegmentMap,
    config: ConfigEcho,
}

#[derive(Deserialize)]
struct RawSegmentMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl TryFrom<RawExplanation> for Explanation {
    type Error = Error;

    fn try_from(raw: RawExplanation) -> Result<Self> {
        let seg = SegmentMap::new(
            raw.segment_map.height,
            raw.segment_map.width,
            raw.segment_map.labels,
        )?;
        Explanation::new(
            raw.class_ids,
            raw.coefficients,
            raw.intercepts,
            seg,
            raw.config,
        )
    }
}

impl Explanation {
    pub fn new(
        class_ids: Vec<usize>,
        coefficients: Vec<Vec<f64>>,
        intercepts: Vec<f64>,
        segment_map: SegmentMap,
        config: ConfigEcho,
    ) -> Result<Self> {
        for (i, c) in class_ids.iter().enumerate() {
            if class_ids[..i].contains(c) {
                return Err(Error::Parameter(format!("class {c} listed twice")));
            }
        }
        if coefficients.len() != class_ids.len() || intercepts.len() != class_ids.len() {
            return Err(Error::Dimension(format!(
                "{} classes, {} coefficient vectors, {} intercepts",
                class_ids.len(),
                coefficients.len(),
                intercepts.len()
            )));
        }
        if let Some(bad) = coefficients
            .iter()
            .find(|c| c.len() != segment_map.segment_count())
        {
            return Err(Error::Dimension(format!(
                "{} coefficients for {} segments",
                bad.len(),
                segment_map.segment_count()
            )));
        }
        Ok(Self {
            class_ids,
            coefficients,
            intercepts,
            segment_map,
            config,
        })
    }

    pub fn position(&self, class_id: usize) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == class_id)
            .ok_or(Error::UnknownClass(class_id))
    }

    pub fn coefficients_for(&self, class_id: usize) -> Result<&[f64]> {
        Ok(&self.coefficients[self.position(class_id)?])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn fit_explanation(
    samples: &[NeighbourhoodSample],
    seg: &SegmentMap,
    class_ids: &[usize],
    cfg: &SurrogateConfig,
    distance: &DistanceKind,
) -> Result<Explanation> {
    let fits = (0..class_ids.len())
        .map(|k| weighted_ridge_fit(samples, k, cfg.ridge_alpha))
        .collect::<Result<Vec<_>>>()?;
    let mut echo = ConfigEcho::from(cfg);
    echo.distance = distance.clone();
    let (coefficients, intercepts) = fits
        .into_iter()
        .map(|f| (f.coefficients, f.intercept))
        .unzip();
    Explanation::new(
        class_ids.to_vec(),
        coefficients,
        intercepts,
        seg.clone(),
        echo,
    )
}

/// Explains `class_ids` on `img` with one shared neighbourhood.
pub fn explain(
    img: &PlanarImage,
    seg: &SegmentMap,
    model: &dyn Model,
    class_ids: &[usize],
    cfg: &SurrogateConfig,
) -> Result<Explanation> {
    let samples = build_neighbourhood(img, seg, model, class_ids, cfg)?;
    fit_explanation(&samples, seg, class_ids, cfg, &cfg.distance)
}

/// One explanation per distance kind from a single set of black-box queries.
/// `cfg.distance` is ignored in favor of `kinds`.
pub fn explain_each(
    img: &PlanarImage,
    seg: &SegmentMap,
    model: &dyn Model,
    class_ids: &[usize],
    cfg: &SurrogateConfig,
    kinds: &[DistanceKind],
) -> Result<Vec<Explanation>> {
    build_neighbourhoods(img, seg, model, class_ids, cfg, kinds)?
        .iter()
        .zip(kinds)
        .map(|(samples, kind)| fit_explanation(samples, seg, class_ids, cfg, kind))
        .collect()
}
