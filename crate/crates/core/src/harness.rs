//! Robustness benchmark: distort, filter on top-k agreement, explain both
//! images under every distance kind, and compare the explanations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{self, Agreement, Model};
use crate::distortion::{self, DistortionSpec, Family};
use crate::error::{Error, Result};
use crate::expdist::{self, Normalization};
use crate::imaging::{self, PlanarImage};
use crate::metrics::DistanceKind;
use crate::segmentation::{self, SlicParams};
use crate::surrogate::{self, Explanation, SurrogateConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CorpusSource {
    Dir {
        path: PathBuf,
    },
    Synthetic {
        count: usize,
        size: usize,
        seed: u64,
    },
}

impl CorpusSource {
    /// A directory path, or `synthetic:COUNT[:SIZE]` for a generated corpus.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let mut parts = rest.split(':');
            let count = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Parameter(format!("bad synthetic corpus spec {s:?}")))?;
            let size = match parts.next() {
                Some(p) => p
                    .parse()
                    .map_err(|_| Error::Parameter(format!("bad synthetic image size in {s:?}")))?,
                None => 64,
            };
            Ok(Self::Synthetic { count, size, seed })
        } else {
            Ok(Self::Dir {
                path: PathBuf::from(s),
            })
        }
    }

    pub fn load(&self) -> Result<Vec<CorpusImage>> {
        match self {
            Self::Dir { path } => load_corpus(path),
            Self::Synthetic { count, size, seed } => synthetic_corpus(*count, *size, *seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusImage {
    pub id: String,
    pub image: PlanarImage,
}

/// Every `.png`, `.ppm` and `.pgm` file in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusImage>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pgm")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Parameter(format!(
            "no PNG/PPM images in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(CorpusImage {
                id,
                image: imaging::load_image(&p)?,
            })
        })
        .collect()
}

/// Seeded RGB test scenes: a two-colour gradient background, a few filled
/// discs and rectangles, and a faint sinusoidal texture.
pub fn synthetic_image(size: usize, seed: u64) -> Result<PlanarImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| {
        [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ]
    };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let (gx, gy) = (angle.cos(), angle.sin());
    enum Shape {
        Disc { cy: f64, cx: f64, r: f64 },
        Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    }
    let n_shapes = rng.random_range(3..=6);
    let s = size as f64;
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.random::<bool>() {
                Shape::Disc {
                    cy: rng.random::<f64>() * s,
                    cx: rng.random::<f64>() * s,
                    r: (0.1 + 0.2 * rng.random::<f64>()) * s,
                }
            } else {
                let (y0, x0) = (rng.random::<f64>() * s * 0.8, rng.random::<f64>() * s * 0.8);
                let (hh, ww) = (
                    (0.15 + 0.3 * rng.random::<f64>()) * s,
                    (0.15 + 0.3 * rng.random::<f64>()) * s,
                );
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + hh,
                    x1: x0 + ww,
                }
            };
            (shape, color(&mut rng))
        })
        .collect();
    let (fy, fx) = (
        0.2 + 0.6 * rng.random::<f64>(),
        0.2 + 0.6 * rng.random::<f64>(),
    );
    PlanarImage::from_fn(size, size, 3, |c, r, col| {
        let (y, x) = (r as f64 + 0.5, col as f64 + 0.5);
        let t = ((gx * (x / s - 0.5) + gy * (y / s - 0.5)) + 0.5).clamp(0.0, 1.0);
        let mut v = (1.0 - t) * c0[c] + t * c1[c];
        for (shape, rgb) in &shapes {
            let inside = match *shape {
                Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
                Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            };
            if inside {
                v = rgb[c];
            }
        }
        (v + 0.04 * (fy * y).sin() * (fx * x).cos()).clamp(0.0, 1.0)
    })
}

pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Result<Vec<CorpusImage>> {
    if count == 0 {
        return Err(Error::Parameter(
            "synthetic corpus needs at least one image".into(),
        ));
    }
    (0..count)
        .map(|i| {
            Ok(CorpusImage {
                id: format!("synth{i:03}"),
                image: synthetic_image(size, mix_seed(seed, &[i as u64]))?,
            })
        })
        .collect()
}

// splitmix64-style mixing so derived seeds are spread across the space.
fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub families: Vec<Family>,
    pub severities: Vec<u8>,
    pub distances: Vec<DistanceKind>,
    pub top_k: usize,
    pub agreement: Agreement,
    /// `rng_seed` is overridden per image; `distance` is ignored.
    pub surrogate: SurrogateConfig,
    /// Segmentation parameters; `None` picks them from the image size.
    pub slic: Option<SlicParams>,
    pub normalization: Normalization,
    pub seed: u64,
    pub model: String,
    pub output_dir: Option<PathBuf>,
    pub overlay: bool,
}

impl ExperimentConfig {
    pub fn new(
        corpus: CorpusSource,
        families: Vec<Family>,
        severities: Vec<u8>,
        seed: u64,
    ) -> Self {
        Self {
            corpus,
            families,
            severities,
            distances: DistanceKind::all(),
            top_k: 2,
            agreement: Agreement::Set,
            surrogate: SurrogateConfig::default(),
            slic: None,
            normalization: Normalization::Sum,
            seed,
            model: "toy".into(),
            output_dir: None,
            overlay: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Parameter("no distortion families".into()));
        }
        if self.severities.is_empty() || self.severities.iter().any(|s| !(1..=5).contains(s)) {
            return Err(Error::Parameter(format!(
                "severities must be in 1..=5, got {:?}",
                self.severities
            )));
        }
        if self.distances.is_empty() {
            return Err(Error::Parameter("no distance kinds".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Parameter("top_k must be at least 1".into()));
        }
        self.distances.iter().try_for_each(DistanceKind::validate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub image_id: String,
    pub family: Family,
    pub severity: u8,
    pub distance: String,
    /// Present exactly when the pair agreed and both explanations succeeded.
    pub d_exp: Option<f64>,
    pub agreed: bool,
    pub top_classes: Vec<usize>,
    pub timing_secs: f64,
    pub error: Option<String>,
}

/// Runs one reference/distorted pair under every configured distance kind.
/// Failures are reported in the returned rows rather than as an error.
pub fn run_pair(
    image_id: &str,
    reference: &PlanarImage,
    spec: &DistortionSpec,
    cfg: &ExperimentConfig,
    model: &dyn Model,
    surrogate_seed: u64,
) -> Vec<PairResult> {
    let start = Instant::now();
    let row = |distance: &DistanceKind| PairResult {
        image_id: image_id.to_string(),
        family: spec.family,
        severity: spec.severity,
        distance: distance.name().to_string(),
        d_exp: None,
        agreed: false,
        top_classes: Vec::new(),
        timing_secs: 0.0,
        error: None,
    };
    let mut rows: Vec<PairResult> = cfg.distances.iter().map(row).collect();
    let outcome = pair_outcome(image_id, reference, spec, cfg, model, surrogate_seed);
    let elapsed = start.elapsed().as_secs_f64();
    for (i, r) in rows.iter_mut().enumerate() {
        r.timing_secs = elapsed;
        match &outcome {
            Ok(o) => {
                r.agreed = o.agreed;
                r.top_classes = o.top_classes.clone();
                match &o.distances {
                    Some(Ok(d)) => r.d_exp = Some(d[i]),
                    Some(Err(e)) => r.error = Some(e.clone()),
                    None => {}
                }
            }
            Err(e) => r.error = Some(e.to_string()),
        }
    }
    rows
}

struct PairOutcome {
    agreed: bool,
    top_classes: Vec<usize>,
    distances: Option<std::result::Result<Vec<f64>, String>>,
}

fn pair_outcome(
    image_id: &str,
    reference: &PlanarImage,
    spec: &DistortionSpec,
    cfg: &ExperimentConfig,
    model: &dyn Model,
    surrogate_seed: u64,
) -> Result<PairOutcome> {
    let distorted = distortion::apply_distortion(reference, spec)?;
    let p_ref = model.predict(reference)?;
    let p_dist = model.predict(&distorted)?;
    let top_classes = blackbox::top_k(&p_ref, cfg.top_k)?;
    let agreed = blackbox::top_k_agree_with(&p_ref, &p_dist, cfg.top_k, cfg.agreement)?;
    if !agreed {
        return Ok(PairOutcome {
            agreed,
            top_classes,
            distances: None,
        });
    }
    let distances = explain_pair(
        image_id,
        reference,
        &distorted,
        spec,
        &top_classes,
        cfg,
        model,
        surrogate_seed,
    )
    .map_err(|e| e.to_string());
    Ok(PairOutcome {
        agreed,
        top_classes,
        distances: Some(distances),
    })
}

#[allow(clippy::too_many_arguments)]
fn explain_pair(
    image_id: &str,
    reference: &PlanarImage,
    distorted: &PlanarImage,
    spec: &DistortionSpec,
    classes: &[usize],
    cfg: &ExperimentConfig,
    model: &dyn Model,
    surrogate_seed: u64,
) -> Result<Vec<f64>> {
    let (h, w) = reference.dims();
    let slic = cfg.slic.unwrap_or_else(|| SlicParams::for_dims(h, w));
    let surrogate_cfg = SurrogateConfig {
        rng_seed: surrogate_seed,
        ..cfg.surrogate.clone()
    };
    let explain = |img: &PlanarImage| -> Result<Vec<Explanation>> {
        let seg = segmentation::slic_segment(img, &slic)?;
        surrogate::explain_each(img, &seg, model, classes, &surrogate_cfg, &cfg.distances)
    };
    let ref_expl = explain(reference)?;
    let dist_expl = explain(distorted)?;
    if cfg.overlay {
        if let Some(dir) = &cfg.output_dir {
            let dir = dir.join("overlays");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (kind, (er, ed)) in cfg.distances.iter().zip(ref_expl.iter().zip(&dist_expl)) {
                for &class in classes {
                    let stem = format!(
                        "{image_id}_{}{}_{}_c{class}",
                        spec.family,
                        spec.severity,
                        kind.name()
                    );
                    render_overlay(reference, er, class, dir.join(format!("{stem}_ref.png")))?;
                    render_overlay(distorted, ed, class, dir.join(format!("{stem}_dist.png")))?;
                }
            }
        }
    }
    ref_expl
        .iter()
        .zip(&dist_expl)
        .map(|(a, b)| expdist::explanation_distance_with(a, b, cfg.normalization))
        .collect()
}

/// Runs every (image, family, severity) unit. Units run in parallel; the
/// rows come back in corpus, family, severity, distance order.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    corpus: &[CorpusImage],
    model: &dyn Model,
) -> Result<Vec<PairResult>> {
    cfg.validate()?;
    let mut units = Vec::new();
    for (i, img) in corpus.iter().enumerate() {
        for &family in &cfg.families {
            for &severity in &cfg.severities {
                let seed = mix_seed(cfg.seed, &[i as u64, family as u64, u64::from(severity)]);
                units.push((i, img, DistortionSpec::new(family, severity, seed)?));
            }
        }
    }
    let rows = units
        .par_iter()
        .map(|(i, img, spec)| {
            run_pair(
                &img.id,
                &img.image,
                spec,
                cfg,
                model,
                mix_seed(cfg.seed, &[*i as u64]),
            )
        })
        .collect::<Vec<_>>();
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// A family name, or `all`.
    pub scope: String,
    pub distance: String,
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    pub agreed: usize,
    pub rejected: usize,
    pub failed: usize,
}

/// Mean and spread of `d_exp` per (family, distance) and per distance over
/// all families. Rows that failed the top-k filter only count as rejected.
pub fn aggregate(results: &[PairResult]) -> Vec<SummaryRow> {
    let mut families: Vec<String> = Vec::new();
    let mut distances: Vec<String> = Vec::new();
    for r in results {
        let f = r.family.to_string();
        if !families.contains(&f) {
            families.push(f);
        }
        if !distances.contains(&r.distance) {
            distances.push(r.distance.clone());
        }
    }
    let summarize = |scope: &str, distance: &str, rows: Vec<&PairResult>| {
        let values: Vec<f64> = rows.iter().filter_map(|r| r.d_exp).collect();
        let (mean, std) = if values.is_empty() {
            (None, None)
        } else {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()))
        };
        SummaryRow {
            scope: scope.to_string(),
            distance: distance.to_string(),
            mean,
            std,
            agreed: values.len(),
            rejected: rows.iter().filter(|r| !r.agreed).count(),
            failed: rows
                .iter()
                .filter(|r| r.agreed && r.d_exp.is_none())
                .count(),
        }
    };
    let mut out = Vec::new();
    for f in &families {
        for d in &distances {
            let rows: Vec<&PairResult> = results
                .iter()
                .filter(|r| r.family.name() == f && &r.distance == d)
                .collect();
            out.push(summarize(f, d, rows));
        }
    }
    for d in &distances {
        let rows = results.iter().filter(|r| &r.distance == d).collect();
        out.push(summarize("all", d, rows));
    }
    out
}

pub const RESULTS_HEADER: [&str; 8] = [
    "image_id",
    "family",
    "severity",
    "distance",
    "agreed",
    "d_exp",
    "top_classes",
    "error",
];

pub const SUMMARY_HEADER: [&str; 7] = [
    "scope",
    "distance",
    "mean_d_exp",
    "std_d_exp",
    "agreed",
    "rejected",
    "failed",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn join_classes(classes: &[usize]) -> String {
    classes
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// One row per result. Wall-clock timings are kept out of this file so that
/// repeated runs produce identical bytes; see [`write_timings_csv`].
pub fn write_results_csv(path: &Path, results: &[PairResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        w.write_record([
            r.image_id.clone(),
            r.family.to_string(),
            r.severity.to_string(),
            r.distance.clone(),
            r.agreed.to_string(),
            fmt_opt(r.d_exp),
            join_classes(&r.top_classes),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_timings_csv(path: &Path, results: &[PairResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "family", "severity", "distance", "seconds"])?;
    for r in results {
        w.write_record([
            r.image_id.clone(),
            r.family.to_string(),
            r.severity.to_string(),
            r.distance.clone(),
            format!("{:.6}", r.timing_secs),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for s in summary {
        w.write_record([
            s.scope.clone(),
            s.distance.clone(),
            fmt_opt(s.mean),
            fmt_opt(s.std),
            s.agreed.to_string(),
            s.rejected.to_string(),
            s.failed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the explanation overlay for `class_id` to a PNG.
pub fn render_overlay(
    img: &PlanarImage,
    expl: &Explanation,
    class_id: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    imaging::save_image(&expdist::overlay_image(img, expl, class_id)?, path)
}

/// Full benchmark run: results, timings, summary and a config echo in
/// `cfg.output_dir`.
pub fn run_bench(
    cfg: &ExperimentConfig,
    model: &dyn Model,
) -> Result<(Vec<PairResult>, Vec<SummaryRow>)> {
    let corpus = cfg.corpus.load()?;
    let results = run_experiment(cfg, &corpus, model)?;
    let summary = aggregate(&results);
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_results_csv(&dir.join("results.csv"), &results)?;
        write_timings_csv(&dir.join("timings.csv"), &results)?;
        write_summary_csv(&dir.join("summary.csv"), &summary)?;
        let echo = dir.join("run-config.json");
        std::fs::write(&echo, serde_json::to_string_pretty(cfg)?)
            .map_err(|e| Error::io(&echo, e))?;
    }
    Ok((results, summary))
}
