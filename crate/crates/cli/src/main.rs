use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psx_core::blackbox::{self, ModelClient};
use psx_core::distortion::{self, DistortionSpec, Family};
use psx_core::harness::{self, CorpusSource, ExperimentConfig};
use psx_core::imaging;
use psx_core::metrics::{DistanceKind, KernelConfig};
use psx_core::segmentation::{self, SlicParams};
use psx_core::surrogate::{self, AblationMode, SurrogateConfig};
use psx_core::{Error, Model, Result};

#[derive(Parser)]
#[command(
    name = "psx",
    version,
    about = "Local surrogate explanations with perceptual neighbourhood weighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain one image and write explanation.json plus overlays.
    Explain(ExplainArgs),
    /// Distort a corpus, explain reference/distorted pairs and compare.
    Bench(BenchArgs),
    /// Apply one distortion to an image.
    Distort(DistortArgs),
    /// Write a seeded synthetic corpus as PNG files.
    GenCorpus(GenCorpusArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// `toy`, `external` (reads PSX_MODEL_URL) or an http(s) URL.
    #[arg(long, default_value = "toy")]
    model: String,
    /// Number of classes the model outputs.
    #[arg(long, default_value_t = 10)]
    class_count: usize,
    /// Seed of the toy model's parameters.
    #[arg(long, default_value_t = 7)]
    model_seed: u64,
}

impl ModelArgs {
    fn client(&self) -> Result<ModelClient> {
        ModelClient::from_spec(&self.model, self.class_count, self.model_seed)
    }
}

#[derive(Args)]
struct SurrogateArgs {
    /// Neighbourhood size, including the unablated query sample.
    #[arg(long, default_value_t = surrogate::DEFAULT_SAMPLE_COUNT)]
    samples: usize,
    /// Exponential kernel width.
    #[arg(long, default_value_t = psx_core::metrics::DEFAULT_KERNEL_WIDTH)]
    width: f64,
    /// Ridge penalty.
    #[arg(long, default_value_t = surrogate::DEFAULT_RIDGE_ALPHA)]
    alpha: f64,
    /// `zero` or `mean`.
    #[arg(long, default_value = "zero")]
    ablation: AblationMode,
    /// Superpixel count target; default depends on image size.
    #[arg(long)]
    segments: Option<usize>,
}

impl SurrogateArgs {
    fn config(&self, seed: u64) -> Result<SurrogateConfig> {
        Ok(SurrogateConfig {
            sample_count: self.samples,
            ablation: self.ablation,
            ridge_alpha: self.alpha,
            kernel: KernelConfig::new(self.width)?,
            distance: DistanceKind::cosine(),
            rng_seed: seed,
        })
    }

    fn slic(&self, h: usize, w: usize) -> SlicParams {
        let mut p = SlicParams::for_dims(h, w);
        if let Some(n) = self.segments {
            p.target_segments = n;
        }
        p
    }
}

#[derive(Args)]
struct ExplainArgs {
    image: PathBuf,
    /// Distance kinds, comma separated.
    #[arg(long, default_value = "cosine", value_delimiter = ',')]
    distance: Vec<DistanceKind>,
    /// `topN` or a comma-separated list of class indices.
    #[arg(long, default_value = "top2")]
    classes: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    surrogate: SurrogateArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Image directory, or `synthetic:COUNT[:SIZE]`.
    #[arg(long)]
    corpus: String,
    /// Distortion families, comma separated, or `all`.
    #[arg(long, default_value = "all")]
    families: String,
    /// Range such as `1-5` or a list such as `1,3`.
    #[arg(long, default_value = "1-5")]
    severities: String,
    #[arg(long, default_value = "cosine,msssim,nlpd", value_delimiter = ',')]
    distances: Vec<DistanceKind>,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write overlays/*.png for every agreeing pair.
    #[arg(long)]
    overlay: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    surrogate: SurrogateArgs,
}

#[derive(Args)]
struct DistortArgs {
    image: PathBuf,
    /// `family:severity`, e.g. `jpeg:3`.
    #[arg(long)]
    spec: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 30)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_classes(spec: &str, probs: &psx_core::ClassProbabilities) -> Result<Vec<usize>> {
    if let Some(n) = spec.strip_prefix("top") {
        let k = n
            .parse()
            .map_err(|_| Error::Parameter(format!("bad class spec {spec:?}")))?;
        return blackbox::top_k(probs, k);
    }
    spec.split(',')
        .map(|s| {
            let c: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::Parameter(format!("bad class index {s:?}")))?;
            if c >= probs.len() {
                return Err(Error::UnknownClass(c));
            }
            Ok(c)
        })
        .collect()
}

fn parse_families(spec: &str) -> Result<Vec<Family>> {
    if spec == "all" {
        return Ok(Family::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

fn parse_severities(spec: &str) -> Result<Vec<u8>> {
    let bad = || Error::Parameter(format!("bad severity spec {spec:?}"));
    if let Some((a, b)) = spec.split_once('-') {
        let (a, b): (u8, u8) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn explain(args: ExplainArgs) -> Result<()> {
    let img = imaging::load_image(&args.image)?;
    let model = args.model.client()?;
    let probs = model.predict(&img)?;
    let classes = parse_classes(&args.classes, &probs)?;
    let (h, w) = img.dims();
    let seg = segmentation::slic_segment(&img, &args.surrogate.slic(h, w))?;
    let cfg = args.surrogate.config(args.seed)?;
    let explanations = surrogate::explain_each(&img, &seg, &model, &classes, &cfg, &args.distance)?;
    create_dir(&args.out)?;
    imaging::save_image(
        &segmentation::render_segments(&img, &seg)?,
        args.out.join("segments.png"),
    )?;
    let single = explanations.len() == 1;
    for (kind, expl) in args.distance.iter().zip(&explanations) {
        let name = if single {
            "explanation.json".to_string()
        } else {
            format!("explanation_{}.json", kind.name())
        };
        let path = args.out.join(name);
        std::fs::write(&path, expl.to_json()?).map_err(|e| Error::Io { path, source: e })?;
        for &class in &classes {
            let stem = if single {
                format!("overlay_c{class}.png")
            } else {
                format!("overlay_{}_c{class}.png", kind.name())
            };
            harness::render_overlay(&img, expl, class, args.out.join(stem))?;
            let coefs = expl.coefficients_for(class)?;
            let top = (0..coefs.len()).max_by(|&a, &b| coefs[a].abs().total_cmp(&coefs[b].abs()));
            if let Some(s) = top {
                println!(
                    "{} class {class} (p={:.4}): {} segments, strongest segment {s} ({:+.5})",
                    kind.name(),
                    probs.get(class),
                    coefs.len(),
                    coefs[s]
                );
            }
        }
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let model = args.model.client()?;
    let mut cfg = ExperimentConfig::new(
        CorpusSource::parse(&args.corpus, args.seed)?,
        parse_families(&args.families)?,
        parse_severities(&args.severities)?,
        args.seed,
    );
    cfg.distances = args.distances;
    cfg.top_k = args.top_k;
    cfg.surrogate = args.surrogate.config(args.seed)?;
    if let Some(n) = args.surrogate.segments {
        cfg.slic = Some(SlicParams {
            target_segments: n,
            ..SlicParams::for_dims(0, 0)
        });
    }
    cfg.model = args.model.model.clone();
    cfg.output_dir = Some(args.out.clone());
    cfg.overlay = args.overlay;
    let (results, summary) = harness::run_bench(&cfg, &model)?;
    let errors = results.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} rows written to {}",
        results.len(),
        args.out.join("results.csv").display()
    );
    for s in summary.iter().filter(|s| s.scope == "all") {
        match (s.mean, s.std) {
            (Some(m), Some(sd)) => println!(
                "{:7} d_exp {m:.6} +- {sd:.6} (agreed {}, rejected {}, failed {})",
                s.distance, s.agreed, s.rejected, s.failed
            ),
            _ => println!(
                "{:7} no agreeing pairs (rejected {}, failed {})",
                s.distance, s.rejected, s.failed
            ),
        }
    }
    if errors > 0 {
        eprintln!("warning: {errors} rows recorded errors; see the error column");
    }
    Ok(())
}

fn distort(args: DistortArgs) -> Result<()> {
    let img = imaging::load_image(&args.image)?;
    let spec = DistortionSpec::parse(&args.spec, args.seed)?;
    imaging::save_image(&distortion::apply_distortion(&img, &spec)?, &args.out)
}

fn gen_corpus(args: GenCorpusArgs) -> Result<()> {
    create_dir(&args.out)?;
    for item in harness::synthetic_corpus(args.count, args.size, args.seed)? {
        imaging::save_image(&item.image, args.out.join(format!("{}.png", item.id)))?;
    }
    println!("{} images written to {}", args.count, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let outcome = match Cli::parse().command {
        Command::Explain(a) => explain(a),
        Command::Bench(a) => bench(a),
        Command::Distort(a) => distort(a),
        Command::GenCorpus(a) => gen_corpus(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
