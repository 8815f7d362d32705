//! Straight-line reimplementations checked against the library.

use psx_core::blackbox::{self, Model, ToyModel};
use psx_core::distortion::{DistortionSpec, Family};
use psx_core::harness::{self, CorpusSource, ExperimentConfig};
use psx_core::imaging::PlanarImage;
use psx_core::metrics::{self, MsssimParams, NlpdParams, MSSSIM_WEIGHTS};
use psx_core::surrogate::{self, InterpretableVector, NeighbourhoodSample};
use psx_core::DistanceKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Grid = Vec<Vec<f64>>;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn conv(img: &Grid, k: &Grid) -> Grid {
    let (h, w) = (img.len(), img[0].len());
    let (kr, kc) = (k.len() / 2, k[0].len() / 2);
    let mut out = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, tap) in row.iter().enumerate() {
                    let rr = reflect(r as isize + kr as isize - i as isize, h);
                    let cc = reflect(c as isize + kc as isize - j as isize, w);
                    acc += tap * img[rr][cc];
                }
            }
            out[r][c] = acc;
        }
    }
    out
}

fn binomial() -> Grid {
    let t = [1.0, 4.0, 6.0, 4.0, 1.0];
    t.iter()
        .map(|a| t.iter().map(|b| a * b / 256.0).collect())
        .collect()
}

fn to_grid(img: &PlanarImage) -> Grid {
    (0..img.height())
        .map(|r| (0..img.width()).map(|c| img.get(0, r, c)).collect())
        .collect()
}

fn decimate(g: &Grid) -> Grid {
    g.iter()
        .step_by(2)
        .map(|row| row.iter().step_by(2).copied().collect())
        .collect()
}

fn expand(g: &Grid, h: usize, w: usize) -> Grid {
    let mut z = vec![vec![0.0; w]; h];
    for (r, row) in g.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            z[2 * r][2 * c] = *v;
        }
    }
    let k: Grid = binomial()
        .iter()
        .map(|row| row.iter().map(|v| 4.0 * v).collect())
        .collect();
    conv(&z, &k)
}

#[test]
fn nlpd_transform_matches_nested_loop_oracle_on_impulse() {
    let mut img = PlanarImage::filled(32, 32, 1, 0.0).unwrap();
    img.set(0, 16, 16, 1.0);
    let params = NlpdParams {
        stages: Some(3),
        constant: 0.17,
    };
    let bands = metrics::nlpd_transform(&img, &params).unwrap();
    assert_eq!(bands.len(), 3);

    let mut current = to_grid(&img);
    let mut expected = Vec::new();
    for _ in 0..2 {
        let down = decimate(&conv(&current, &binomial()));
        let up = expand(&down, current.len(), current[0].len());
        let band: Grid = current
            .iter()
            .zip(&up)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        expected.push(band);
        current = down;
    }
    expected.push(current);
    let boxk = vec![vec![1.0 / 25.0; 5]; 5];
    for (band, exp) in bands.iter().zip(&expected) {
        let abs: Grid = exp
            .iter()
            .map(|row| row.iter().map(|v| v.abs()).collect())
            .collect();
        let local = conv(&abs, &boxk);
        assert_eq!((band.height(), band.width()), (exp.len(), exp[0].len()));
        for r in 0..exp.len() {
            for c in 0..exp[0].len() {
                let want = exp[r][c] / (0.17 + local[r][c]);
                assert!(
                    (band.get(0, r, c) - want).abs() < 1e-9,
                    "({r},{c}) {} vs {want}",
                    band.get(0, r, c)
                );
            }
        }
    }
}

fn gaussian_window() -> Grid {
    let raw: Grid = (-5..=5)
        .map(|i: i32| {
            (-5..=5)
                .map(|j: i32| (-((i * i + j * j) as f64) / (2.0 * 1.5 * 1.5)).exp())
                .collect()
        })
        .collect();
    let total: f64 = raw.iter().flatten().sum();
    raw.iter()
        .map(|row| row.iter().map(|v| v / total).collect())
        .collect()
}

fn mul(a: &Grid, b: &Grid) -> Grid {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect())
        .collect()
}

// (mean of l*cs, mean of cs) at one scale.
fn ssim_terms(x: &Grid, y: &Grid) -> (f64, f64) {
    let g = gaussian_window();
    let (mx, my) = (conv(x, &g), conv(y, &g));
    let (xx, yy, xy) = (
        conv(&mul(x, x), &g),
        conv(&mul(y, y), &g),
        conv(&mul(x, y), &g),
    );
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut lcs, mut cs, mut n) = (0.0, 0.0, 0.0);
    for r in 0..x.len() {
        for c in 0..x[0].len() {
            let (a, b) = (mx[r][c], my[r][c]);
            let s =
                (2.0 * (xy[r][c] - a * b) + c2) / ((xx[r][c] - a * a) + (yy[r][c] - b * b) + c2);
            let l = (2.0 * a * b + c1) / (a * a + b * b + c1);
            lcs += l * s;
            cs += s;
            n += 1.0;
        }
    }
    (lcs / n, cs / n)
}

#[test]
fn msssim_one_pixel_flip_matches_hand_computation() {
    let reference = PlanarImage::filled(32, 32, 1, 0.5).unwrap();
    let mut test = reference.clone();
    test.set(0, 10, 21, 1.0);
    let got = metrics::msssim(&reference, &test, &MsssimParams::default()).unwrap();

    // 32 px and 16 px hold an 11x11 window; 8 px does not: two scales.
    let (x0, y0) = (to_grid(&reference), to_grid(&test));
    let (x1, y1) = (
        decimate(&conv(&x0, &binomial())),
        decimate(&conv(&y0, &binomial())),
    );
    let (_, cs0) = ssim_terms(&x0, &y0);
    let (lcs1, _) = ssim_terms(&x1, &y1);
    let total = MSSSIM_WEIGHTS[0] + MSSSIM_WEIGHTS[1];
    let want = cs0.powf(MSSSIM_WEIGHTS[0] / total) * lcs1.powf(MSSSIM_WEIGHTS[1] / total);
    assert!(got < 1.0);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn toy_model_matches_formula_for_seed_42() {
    let img = PlanarImage::from_fn(20, 28, 3, |c, r, col| {
        ((3 * r + 5 * col + 7 * c) % 11) as f64 / 10.0
    })
    .unwrap();
    let got = blackbox::toy_predict(&img, 5, 42).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut logits = Vec::new();
    let lum = |r: usize, c: usize| {
        0.299 * img.get(0, r, c) + 0.587 * img.get(1, r, c) + 0.114 * img.get(2, r, c)
    };
    for _ in 0..5 {
        let bias: f64 = StandardNormal.sample(&mut rng);
        let mut logit = blackbox::TOY_WEIGHT_SCALE * bias;
        for cell in 0..16 {
            let w: f64 = StandardNormal.sample(&mut rng);
            let (gi, gj) = (cell / 4, cell % 4);
            let (r0, r1) = (gi * 20 / 4, (gi + 1) * 20 / 4);
            let (c0, c1) = (gj * 28 / 4, (gj + 1) * 28 / 4);
            let mut sum = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += lum(r, c);
                }
            }
            logit += blackbox::TOY_WEIGHT_SCALE * w * sum / ((r1 - r0) * (c1 - c0)) as f64;
        }
        logits.push(logit);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    for (k, l) in logits.iter().enumerate() {
        assert!((got.get(k) - (l - m).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn planted_model_is_monotone_in_region_mean() {
    let model = ToyModel::planted(3, 0, 5.0).unwrap();
    let mut last = 0.0;
    for step in 0..=10 {
        let v = step as f64 / 10.0;
        let img = PlanarImage::from_fn(16, 16, 3, |_, r, c| if r < 4 && c < 4 { v } else { 0.3 })
            .unwrap();
        let p = model.predict(&img).unwrap().get(0);
        assert!(step == 0 || p > last, "{p} after {last}");
        last = p;
    }
}

// Normal equations with an unpenalized intercept column, solved by Gaussian
// elimination with partial pivoting.
fn normal_equations(samples: &[NeighbourhoodSample], alpha: f64) -> Vec<f64> {
    let p = samples[0].vector.len() + 1;
    let mut a = vec![vec![0.0; p + 1]; p];
    for s in samples {
        let mut x = vec![1.0];
        x.extend(s.vector.as_f64());
        for i in 0..p {
            for j in 0..p {
                a[i][j] += s.weight * x[i] * x[j];
            }
            a[i][p] += s.weight * x[i] * s.targets[0];
        }
    }
    for (i, row) in a.iter_mut().enumerate().skip(1) {
        row[i] += alpha;
    }
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=p {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

#[test]
fn ridge_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..30 {
        let p = 2 + trial % 9;
        let samples: Vec<_> = (0..(4 * p + 10))
            .map(|_| NeighbourhoodSample {
                vector: InterpretableVector::new((0..p).map(|_| rng.random::<bool>()).collect()),
                distance: 0.0,
                weight: rng.random::<f64>() + 1e-3,
                targets: vec![rng.random::<f64>() * 2.0 - 1.0],
            })
            .collect();
        let alpha = [0.0, 0.5, 1.0, 10.0][trial % 4];
        let fit = surrogate::weighted_ridge_fit(&samples, 0, alpha).unwrap();
        let want = normal_equations(&samples, alpha);
        assert!((fit.intercept - want[0]).abs() < 1e-9);
        for (a, b) in fit.coefficients.iter().zip(&want[1..]) {
            assert!((a - b).abs() < 1e-9, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn cosine_closed_form() {
    let ones = InterpretableVector::ones(8);
    let two = InterpretableVector::new((0..8).map(|i| i < 2).collect());
    let d = metrics::cosine_distance_binary(&ones, &two).unwrap();
    assert!((d - (1.0 - (2.0f64 / 8.0).sqrt())).abs() < 1e-15);
}

#[test]
fn identity_family_gives_zero_distance_for_every_kind() {
    let corpus = harness::synthetic_corpus(2, 32, 1).unwrap();
    let mut cfg = ExperimentConfig::new(
        CorpusSource::Synthetic {
            count: 2,
            size: 32,
            seed: 1,
        },
        vec![Family::Identity],
        vec![1],
        3,
    );
    cfg.surrogate.sample_count = 120;
    let model = blackbox::ModelClient::toy(6, 2).unwrap();
    let rows = harness::run_experiment(&cfg, &corpus, &model).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    for r in rows {
        assert!(r.agreed);
        assert_eq!(r.d_exp, Some(0.0), "{r:?}");
    }
}

#[test]
fn noise_pair_gives_finite_nonnegative_distances() {
    let img = harness::synthetic_image(64, 8).unwrap();
    let spec = DistortionSpec::parse("gaussian_noise:2", 4).unwrap();
    let mut cfg = ExperimentConfig::new(
        CorpusSource::Synthetic {
            count: 1,
            size: 64,
            seed: 0,
        },
        vec![spec.family],
        vec![2],
        0,
    );
    cfg.surrogate.sample_count = 200;
    let model = blackbox::ModelClient::toy(10, 7).unwrap();
    let rows = harness::run_pair("x", &img, &spec, &cfg, &model, 5);
    let kinds: Vec<_> = rows.iter().map(|r| r.distance.clone()).collect();
    assert_eq!(
        kinds,
        DistanceKind::all()
            .iter()
            .map(|k| k.name().to_string())
            .collect::<Vec<_>>()
    );
    for r in rows {
        assert!(r.agreed, "{r:?}");
        let d = r.d_exp.unwrap();
        assert!(d.is_finite() && d >= 0.0);
        assert_eq!(r.top_classes.len(), 2);
    }
}
