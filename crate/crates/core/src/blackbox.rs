//! The black-box classifier being explained.
//!
//! [`ToyModel`] is a deterministic in-process stand-in; [`ExternalModel`]
//! talks to any model server implementing the `/predict` JSON protocol:
//!
//! ```text
//! POST /predict   {"image_png_b64": "<base64 PNG>"}
//! 200 OK          {"probs": [p0, p1, ...]}
//! ```

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, PlanarImage};

pub const MODEL_URL_ENV: &str = "PSX_MODEL_URL";
pub const TOY_GRID: usize = 4;
pub const TOY_FEATURES: usize = TOY_GRID * TOY_GRID;
/// Standard deviation of the toy model's weights and biases.
pub const TOY_WEIGHT_SCALE: f64 = 1.0;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;
pub const DEFAULT_RETRIES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassProbabilities {
    probs: Vec<f64>,
}

impl ClassProbabilities {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Protocol(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Protocol(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Protocol(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probs[class]
    }
}

/// Anything that maps an image to class probabilities.
pub trait Model: Send + Sync {
    fn class_count(&self) -> usize;
    fn predict(&self, img: &PlanarImage) -> Result<ClassProbabilities>;
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Mean luminance of each cell of a fixed 4x4 grid, row-major. Cell `i`
/// spans rows `i*h/4 .. (i+1)*h/4` (at least one row), likewise for columns.
pub fn grid_features(img: &PlanarImage) -> [f64; TOY_FEATURES] {
    let gray = imaging::to_grayscale(img);
    let (h, w) = gray.dims();
    let span = |i: usize, n: usize| {
        let lo = (i * n / TOY_GRID).min(n - 1);
        let hi = ((i + 1) * n / TOY_GRID).max(lo + 1);
        lo..hi
    };
    let mut out = [0.0; TOY_FEATURES];
    for gy in 0..TOY_GRID {
        for gx in 0..TOY_GRID {
            let (rows, cols) = (span(gy, h), span(gx, w));
            let count = (rows.len() * cols.len()) as f64;
            let sum: f64 = rows
                .flat_map(|r| cols.clone().map(move |c| (r, c)))
                .map(|(r, c)| gray.get(0, r, c))
                .sum();
            out[gy * TOY_GRID + gx] = sum / count;
        }
    }
    out
}

/// Grid cell containing pixel `(row, col)`.
pub fn grid_cell_of(row: usize, col: usize, height: usize, width: usize) -> usize {
    let gy = (row * TOY_GRID / height).min(TOY_GRID - 1);
    let gx = (col * TOY_GRID / width).min(TOY_GRID - 1);
    gy * TOY_GRID + gx
}

/// Softmax of a fixed affine map over 4x4 grid-cell mean intensities.
///
/// With `from_seed`, the parameters are drawn from a ChaCha8 stream seeded
/// with the seed: for each class in order, one bias then sixteen weights,
/// each a standard normal scaled by [`TOY_WEIGHT_SCALE`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    weights: Vec<[f64; TOY_FEATURES]>,
    bias: Vec<f64>,
}

impl ToyModel {
    pub fn new(weights: Vec<[f64; TOY_FEATURES]>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 || weights.len() != bias.len() {
            return Err(Error::Parameter(format!(
                "toy model needs matching weights and biases for at least 2 classes ({} vs {})",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn from_seed(class_count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut weights = Vec::with_capacity(class_count);
        let mut bias = Vec::with_capacity(class_count);
        for _ in 0..class_count {
            bias.push(TOY_WEIGHT_SCALE * draw());
            let mut w = [0.0; TOY_FEATURES];
            w.iter_mut().for_each(|v| *v = TOY_WEIGHT_SCALE * draw());
            weights.push(w);
        }
        Self::new(weights, bias)
    }

    /// Class 0's logit is `gain * mean(cell)`; all other logits are zero.
    pub fn planted(class_count: usize, cell: usize, gain: f64) -> Result<Self> {
        if cell >= TOY_FEATURES {
            return Err(Error::Parameter(format!("grid cell {cell} out of range")));
        }
        let mut weights = vec![[0.0; TOY_FEATURES]; class_count];
        if let Some(w) = weights.first_mut() {
            w[cell] = gain;
        }
        Self::new(weights, vec![0.0; class_count])
    }

    pub fn logits(&self, img: &PlanarImage) -> Vec<f64> {
        let features = grid_features(img);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&features).map(|(a, f)| a * f).sum::<f64>())
            .collect()
    }

    pub fn weights(&self) -> &[[f64; TOY_FEATURES]] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

impl Model for ToyModel {
    fn class_count(&self) -> usize {
        self.weights.len()
    }

    fn predict(&self, img: &PlanarImage) -> Result<ClassProbabilities> {
        ClassProbabilities::new(softmax(&self.logits(img)))
    }
}

pub fn toy_predict(img: &PlanarImage, class_count: usize, seed: u64) -> Result<ClassProbabilities> {
    ToyModel::from_seed(class_count, seed)?.predict(img)
}

// Counting gate bounding the number of concurrent requests.
#[derive(Debug)]
struct Gate {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePass<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        GatePass(self)
    }
}

struct GatePass<'a>(&'a Gate);

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    image_png_b64: &'a str,
}

#[derive(Deserialize)]
struct PredictResponse {
    probs: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExternalConfig {
    pub endpoint: String,
    pub class_count: usize,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retries: usize,
}

impl ExternalConfig {
    pub fn new(endpoint: impl Into<String>, class_count: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            class_count,
            timeout: DEFAULT_TIMEOUT,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retries: DEFAULT_RETRIES,
        }
    }

    /// Endpoint taken from `PSX_MODEL_URL`.
    pub fn from_env(class_count: usize) -> Result<Self> {
        let endpoint = std::env::var(MODEL_URL_ENV)
            .map_err(|_| Error::Parameter(format!("{MODEL_URL_ENV} is not set")))?;
        Ok(Self::new(endpoint, class_count))
    }
}

/// HTTP client for a remote model server.
#[derive(Debug)]
pub struct ExternalModel {
    config: ExternalConfig,
    url: String,
    agent: ureq::Agent,
    gate: Gate,
}

impl ExternalModel {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        if config.class_count < 2 {
            return Err(Error::Parameter("class_count must be at least 2".into()));
        }
        if config.max_in_flight == 0 {
            return Err(Error::Parameter("max_in_flight must be at least 1".into()));
        }
        let base = config.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/predict") {
            base.to_string()
        } else {
            format!("{base}/predict")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            url,
            agent,
        })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    fn request_once(&self, body: &str) -> Result<ClassProbabilities> {
        let _pass = self.gate.acquire();
        let mut response = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("reading response: {e}")))?;
        if status != 200 {
            return Err(Error::Protocol(format!("server answered {status}: {text}")));
        }
        let parsed: PredictResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Protocol(format!("malformed response: {e}")))?;
        let probs = parsed
            .probs
            .ok_or_else(|| Error::Protocol("response has no \"probs\" field".into()))?;
        if probs.len() != self.config.class_count {
            return Err(Error::Protocol(format!(
                "expected {} probabilities, got {}",
                self.config.class_count,
                probs.len()
            )));
        }
        ClassProbabilities::new(probs)
    }
}

impl Model for ExternalModel {
    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn predict(&self, img: &PlanarImage) -> Result<ClassProbabilities> {
        let png = imaging::encode_png(img)?;
        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
        let body = serde_json::to_string(&PredictRequest {
            image_png_b64: &b64,
        })?;
        let mut attempt = 0;
        loop {
            match self.request_once(&body) {
                Err(Error::Transport(_)) if attempt < self.config.retries => {
                    std::thread::sleep(Duration::from_millis(100 << attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Toy or external backend behind one type.
#[derive(Debug)]
pub enum ModelClient {
    Toy(ToyModel),
    External(ExternalModel),
}

impl ModelClient {
    pub fn toy(class_count: usize, seed: u64) -> Result<Self> {
        Ok(Self::Toy(ToyModel::from_seed(class_count, seed)?))
    }

    pub fn external(config: ExternalConfig) -> Result<Self> {
        Ok(Self::External(ExternalModel::new(config)?))
    }

    /// `"toy"` or an `http://` URL; `"external"` reads `PSX_MODEL_URL`.
    pub fn from_spec(spec: &str, class_count: usize, seed: u64) -> Result<Self> {
        match spec {
            "toy" => Self::toy(class_count, seed),
            "external" => Self::external(ExternalConfig::from_env(class_count)?),
            url if url.starts_with("http://") || url.starts_with("https://") => {
                Self::external(ExternalConfig::new(url, class_count))
            }
            other => Err(Error::Parameter(format!(
                "unknown model {other:?}; use toy or a URL"
            ))),
        }
    }

    pub fn backend_name(&self) -> &'static str {
        match self {
            Self::Toy(_) => "toy",
            Self::External(_) => "external",
        }
    }
}

impl Model for ModelClient {
    fn class_count(&self) -> usize {
        match self {
            Self::Toy(m) => m.class_count(),
            Self::External(m) => m.class_count(),
        }
    }

    fn predict(&self, img: &PlanarImage) -> Result<ClassProbabilities> {
        match self {
            Self::Toy(m) => m.predict(img),
            Self::External(m) => m.predict(img),
        }
    }
}

/// Indices of the `k` most probable classes, most probable first; equal
/// probabilities are ordered by class index.
pub fn top_k(p: &ClassProbabilities, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::Parameter(format!(
            "k = {k} out of range for {} classes",
            p.len()
        )));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p.get(b).total_cmp(&p.get(a)).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agreement {
    /// Same set of top-k classes, in any order.
    #[default]
    Set,
    /// Same top-k classes in the same rank order.
    Ordered,
}

pub fn top_k_agree(p: &ClassProbabilities, q: &ClassProbabilities, k: usize) -> Result<bool> {
    top_k_agree_with(p, q, k, Agreement::Set)
}

pub fn top_k_agree_with(
    p: &ClassProbabilities,
    q: &ClassProbabilities,
    k: usize,
    mode: Agreement,
) -> Result<bool> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "{} vs {} classes",
            p.len(),
            q.len()
        )));
    }
    let (mut a, mut b) = (top_k(p, k)?, top_k(q, k)?);
    if mode == Agreement::Set {
        a.sort_unstable();
        b.sort_unstable();
    }
    Ok(a == b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(v: &[f64]) -> ClassProbabilities {
        ClassProbabilities::new(v.to_vec()).unwrap()
    }

    #[test]
    fn probability_validation() {
        assert!(ClassProbabilities::new(vec![0.5, 0.6]).is_err());
        assert!(ClassProbabilities::new(vec![1.2, -0.2]).is_err());
        assert!(ClassProbabilities::new(vec![1.0]).is_err());
        assert!(ClassProbabilities::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&probs(&[0.1, 0.7, 0.2]), 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k(&probs(&[0.5, 0.5]), 1).unwrap(), vec![0]);
        assert!(top_k(&probs(&[0.5, 0.5]), 3).is_err());
        assert!(top_k(&probs(&[0.5, 0.5]), 0).is_err());
    }

    #[test]
    fn agreement_semantics() {
        let mut a = vec![0.0; 10];
        a[3] = 0.5;
        a[7] = 0.4;
        a[0] = 0.1;
        let mut b = a.clone();
        b.swap(3, 7);
        let mut c = a.clone();
        c.swap(7, 9);
        let (a, b, c) = (probs(&a), probs(&b), probs(&c));
        assert!(top_k_agree(&a, &a, 2).unwrap());
        assert!(top_k_agree(&a, &b, 2).unwrap());
        assert!(!top_k_agree_with(&a, &b, 2, Agreement::Ordered).unwrap());
        assert!(!top_k_agree(&a, &c, 2).unwrap());
        assert!(top_k_agree(&a, &probs(&[0.5, 0.5]), 1).is_err());
    }

    #[test]
    fn toy_zero_image_is_softmax_of_bias() {
        let m = ToyModel::from_seed(5, 3).unwrap();
        let zero = PlanarImage::filled(16, 16, 3, 0.0).unwrap();
        let expected = softmax(m.bias());
        let got = m.predict(&zero).unwrap();
        for (a, b) in got.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn toy_is_deterministic_and_normalized() {
        let img = PlanarImage::from_fn(20, 28, 3, |c, r, col| ((r + 2 * col + c) % 9) as f64 / 8.0)
            .unwrap();
        let a = toy_predict(&img, 10, 42).unwrap();
        let b = toy_predict(&img, 10, 42).unwrap();
        assert_eq!(a, b);
        assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, toy_predict(&img, 10, 43).unwrap());
    }

    #[test]
    fn grid_cells_tile_the_image() {
        let (h, w) = (10, 7);
        let mut counts = [0usize; TOY_FEATURES];
        for r in 0..h {
            for c in 0..w {
                counts[grid_cell_of(r, c, h, w)] += 1;
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), 70);
        // a change inside one cell moves only that cell's feature
        let base = PlanarImage::filled(h, w, 1, 0.2).unwrap();
        let mut poked = base.clone();
        poked.set(0, 9, 6, 0.9);
        let (fa, fb) = (grid_features(&base), grid_features(&poked));
        let changed: Vec<usize> = (0..TOY_FEATURES).filter(|&i| fa[i] != fb[i]).collect();
        assert_eq!(changed, vec![grid_cell_of(9, 6, h, w)]);
    }

    #[test]
    fn tiny_images_still_have_features() {
        let img = PlanarImage::filled(2, 3, 1, 0.7).unwrap();
        assert!(grid_features(&img).iter().all(|&f| (f - 0.7).abs() < 1e-15));
    }

    #[test]
    fn planted_model_responds_to_one_cell() {
        let m = ToyModel::planted(3, 5, 6.0).unwrap();
        let (h, w) = (16, 16);
        let mut last = 0.0;
        for step in 0..=10 {
            let v = step as f64 / 10.0;
            let img = PlanarImage::from_fn(h, w, 1, |_, r, c| {
                if grid_cell_of(r, c, h, w) == 5 {
                    v
                } else {
                    0.3
                }
            })
            .unwrap();
            let p0 = m.predict(&img).unwrap().get(0);
            assert!(p0 > last);
            last = p0;
        }
        assert!(ToyModel::planted(3, 16, 1.0).is_err());
    }

    #[test]
    fn model_spec_parsing() {
        assert_eq!(
            ModelClient::from_spec("toy", 4, 1).unwrap().backend_name(),
            "toy"
        );
        assert_eq!(
            ModelClient::from_spec("http://127.0.0.1:9/", 4, 1)
                .unwrap()
                .backend_name(),
            "external"
        );
        assert!(ModelClient::from_spec("resnet", 4, 1).is_err());
    }
}
