//! Acceptance suite. Prints one `criterion N: PASS|FAIL ...` line per
//! criterion (written straight to stdout so it shows without `--nocapture`)
//! and fails if any criterion fails.

mod common;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use actsz::analysis::study::{run_conv_study, ConvGeometry, StudyCase};
use actsz::analysis::{
    exact_sigma, fit_coefficient, inject_uniform_error, predict_sigma, sub_seed,
    DEFAULT_COEFFICIENT,
};
use actsz::cli::main_with;
use actsz::codec::{compress, decompress, CodecParams, Predictor};
use actsz::controller::{compute_error_bound, ControllerConfig, LayerStats};
use actsz::tensor::write_tnsr;
use actsz::train::{build_network, load_datasets, train_run, RunMode, RunPaths, TrainConfig};
use actsz::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn geometry(size: usize) -> ConvGeometry {
    format!("c=2,k=2,size={size},kernel=3").parse().unwrap()
}

fn study(
    geometry: ConvGeometry,
    batch: usize,
    eb: f64,
    nonzero_ratio: f64,
    preserve_zeros: bool,
    trials: usize,
    seed: u64,
) -> StudyCase {
    StudyCase {
        geometry,
        batch,
        eb,
        nonzero_ratio,
        preserve_zeros,
        trials,
        seed,
    }
}

/// Random test tensor: smooth (sum of waves) or noisy, optionally rectified.
fn random_tensor(rng: &mut ChaCha8Rng, len: usize) -> Tensor<f32> {
    let scale = 10f64.powf(rng.random_range(-2.0..1.0));
    let smooth = rng.random_bool(0.5);
    let rectify = rng.random_bool(0.5);
    let (f1, f2, phase): (f64, f64, f64) = (
        rng.random_range(1e-3..0.1),
        rng.random_range(0.1..1.0),
        rng.random(),
    );
    let data: Vec<f32> = (0..len)
        .map(|i| {
            let x = i as f64;
            let v = if smooth {
                (f1 * x + phase).sin() + 0.1 * (f2 * x).cos()
            } else {
                rng.sample::<f64, _>(StandardNormal)
            };
            let v = scale * v;
            (if rectify { v.max(0.0) } else { v }) as f32
        })
        .collect();
    let shape = if len.is_multiple_of(100) {
        vec![len / 100, 100]
    } else {
        vec![len]
    };
    Tensor::new(shape, data).unwrap()
}

fn criterion_1() -> Verdict {
    const COUNT: usize = 1000;
    let start = Instant::now();
    let results = par::map_range(COUNT, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(1, i as u64));
        let len = 10f64.powf(rng.random_range(2.0..=6.0)).round() as usize;
        let t = random_tensor(&mut rng, len);
        let eb = 10f64.powi(-(1 + (i % 6) as i32));
        let predictor = if t.rank() == 2 && i % 2 == 0 {
            Predictor::Lorenzo2d
        } else {
            Predictor::Lorenzo1d
        };
        let blob = compress(&t, &CodecParams::new(eb).with_predictor(predictor)).unwrap();
        let plain = decompress(&blob, false).unwrap();
        let filtered = decompress(&blob, true).unwrap();
        let plain_violations = t
            .data()
            .iter()
            .zip(plain.data())
            .filter(|(o, d)| (f64::from(**o) - f64::from(**d)).abs() > eb)
            .count();
        let filter_violations = t
            .data()
            .iter()
            .zip(filtered.data())
            .filter(|(o, d)| {
                let err = (f64::from(**o) - f64::from(**d)).abs();
                if **o == 0.0 {
                    d.to_bits() != o.to_bits()
                } else if **d == 0.0 {
                    err > 2.0 * eb
                } else {
                    err > eb
                }
            })
            .count();
        (len, plain_violations, filter_violations)
    });
    let elapsed = start.elapsed();
    let elements: usize = results.iter().map(|r| r.0).sum();
    let plain: usize = results.iter().map(|r| r.1).sum();
    let filtered: usize = results.iter().map(|r| r.2).sum();
    verdict(
        plain == 0 && filtered == 0 && elapsed < Duration::from_secs(120),
        format!(
            "{COUNT} tensors, {elements} elements, violations filter-off {plain} filter-on {filtered}, {:.1}s (limit 120s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let (h, w, eb) = (512, 512, 1e-4);
    let t = Tensor::from_fn(vec![h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        ((0.031 * x).sin() * (0.017 * y).cos() + 0.5 * (0.011 * (x + y)).sin()) as f32
    })
    .unwrap();
    let blob = compress(
        &t,
        &CodecParams::new(eb).with_predictor(Predictor::Lorenzo2d),
    )
    .unwrap();
    let back = decompress(&blob, false).unwrap();
    let mut bins = [0usize; 10];
    for (o, d) in t.data().iter().zip(back.data()) {
        let e = f64::from(*d) - f64::from(*o);
        let k = (((e + eb) / (2.0 * eb)) * 10.0).floor().clamp(0.0, 9.0) as usize;
        bins[k] += 1;
    }
    let n = t.len() as f64;
    let fractions: Vec<f64> = bins.iter().map(|&c| c as f64 / n).collect();
    let worst = fractions
        .iter()
        .map(|f| (f - 0.1).abs())
        .fold(0.0, f64::max);
    verdict(
        t.len() >= 100_000 && worst <= 0.02,
        format!(
            "{} samples, bin fractions {:?}, worst deviation {:.4} (limit 0.02)",
            t.len(),
            fractions
                .iter()
                .map(|f| format!("{f:.4}"))
                .collect::<Vec<_>>(),
            worst
        ),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let g = geometry(10);
    let fan_in = g.fan_in().unwrap();
    let out = run_conv_study(&study(g, 32, 1e-3, 1.0, false, 10_000, 3)).unwrap();
    let within = out.normalized.within_one_sigma;
    let elapsed = start.elapsed();
    verdict(
        fan_in >= 64 && (within - 0.682).abs() <= 0.02 && elapsed < Duration::from_secs(300),
        format!(
            "N=32 fan-in {fan_in}, 10000 trials, {} samples: within ±exact_sigma {:.4} (target 0.682 ± 0.02), {:.1}s",
            out.normalized.sample_count,
            within,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_4() -> Verdict {
    const TRIALS: usize = 100_000;
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(4, k));
        let (n, pairs) = (rng.random_range(2..=16), rng.random_range(4..=32));
        let eb = 10f64.powf(rng.random_range(-5.0..-1.0));
        let losses = Tensor::from_fn(vec![n, pairs], |_| {
            rng.sample::<f64, _>(StandardNormal) * 2.0
        })
        .unwrap();
        let preserve = k % 2 == 1;
        let acts = Tensor::from_fn(vec![n, pairs], |_| {
            if preserve && rng.random_bool(0.4) {
                0.0
            } else {
                1.0
            }
        })
        .unwrap();
        let exact = exact_sigma(&losses, eb, preserve.then_some(&acts)).unwrap();
        let errors = par::map_range(TRIALS, |t| {
            let noisy =
                inject_uniform_error(&acts, eb, preserve, sub_seed(sub_seed(40, k), t as u64))
                    .unwrap();
            let dot: f64 = noisy
                .data()
                .iter()
                .zip(acts.data())
                .zip(losses.data())
                .map(|((p, a), l)| (p - a) * l)
                .sum();
            dot / n as f64
        });
        let mean = errors.iter().sum::<f64>() / TRIALS as f64;
        let mc =
            (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (TRIALS - 1) as f64).sqrt();
        worst = worst.max((mc / exact - 1.0).abs());
    }
    verdict(
        worst <= 0.03,
        format!(
            "20 loss tensors, {TRIALS} trials each: worst |MC/exact - 1| {worst:.4} (limit 0.03)"
        ),
    )
}

fn criterion_5() -> Verdict {
    let g = geometry(10);
    let sigma = |r: f64| {
        run_conv_study(&study(g, 128, 1e-3, r, true, 2000, 5))
            .unwrap()
            .empirical_sigma
    };
    let dense = sigma(1.0);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for r in [0.25, 0.5, 1.0] {
        let ratio = sigma(r) / dense;
        let dev = (ratio / r.sqrt() - 1.0).abs();
        worst = worst.max(dev);
        parts.push(format!(
            "R={r}: ratio {ratio:.4} vs sqrt(R) {:.4}",
            r.sqrt()
        ));
    }
    verdict(
        worst <= 0.05,
        format!(
            "{}; worst deviation {worst:.4} (limit 0.05)",
            parts.join(", ")
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut outcomes = Vec::new();
    for (gi, size) in [10, 14].into_iter().enumerate() {
        for batch in [8, 32, 128] {
            for eb in [1e-5, 1e-4, 1e-3] {
                let seed = sub_seed(6, outcomes.len() as u64 + 100 * gi as u64);
                outcomes.push(
                    run_conv_study(&study(geometry(size), batch, eb, 1.0, false, 1000, seed))
                        .unwrap(),
                );
            }
        }
    }
    let observations: Vec<_> = outcomes.iter().map(|o| o.observation()).collect();
    let a = fit_coefficient(&observations).unwrap();
    let worst = observations
        .iter()
        .map(|o| {
            let p = predict_sigma(o.mean_abs_loss, o.batch, o.eb, o.nonzero_ratio, a)
                .unwrap()
                .predicted_sigma;
            (p / o.sigma).max(o.sigma / p)
        })
        .fold(1.0, f64::max);
    verdict(
        worst <= 1.5,
        format!(
            "{} grid points, fitted a {a:.4} (reference {DEFAULT_COEFFICIENT}), worst predicted/empirical factor {worst:.3} (limit 1.5)",
            observations.len()
        ),
    )
}

fn criterion_7() -> Verdict {
    const CASES: usize = 1_000_000;
    let cfg = ControllerConfig {
        eb_min: f64::MIN_POSITIVE,
        eb_max: f64::MAX,
        ..ControllerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for i in 0..CASES {
        let log = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| 10f64.powf(rng.random_range(lo..hi));
        let cfg = ControllerConfig {
            coefficient_a: log(&mut rng, -3.0, 3.0),
            ..cfg
        };
        let stats = LayerStats {
            layer: 0,
            mean_abs_loss: log(&mut rng, -12.0, 6.0),
            nonzero_ratio: rng.random_range(f64::EPSILON..=1.0),
            momentum_mean_abs: log(&mut rng, -10.0, 2.0),
            batch: rng.random_range(1..=4096),
            collected_at: i as u64,
        };
        let target = log(&mut rng, -14.0, 2.0);
        let Some(eb) = compute_error_bound(&stats, target, &cfg) else {
            continue;
        };
        let back = predict_sigma(
            stats.mean_abs_loss,
            stats.batch,
            eb,
            stats.nonzero_ratio,
            cfg.coefficient_a,
        )
        .unwrap()
        .predicted_sigma;
        worst = worst.max((back / target - 1.0).abs());
        checked += 1;
    }
    verdict(
        checked == CASES && worst <= 1e-12,
        format!("{checked}/{CASES} fuzz cases, worst relative error {worst:.3e} (limit 1e-12)"),
    )
}

fn criterion_8() -> Verdict {
    let checks = common::all_checks();
    let (name, worst) =
        checks.iter().cloned().fold(
            (String::new(), 0.0),
            |acc, (n, e)| if e > acc.1 { (n, e) } else { acc },
        );
    verdict(
        worst < common::TOLERANCE,
        format!(
            "{} gradient checks, worst {worst:.3e} at {name} (limit 1e-4)",
            checks.len()
        ),
    )
}

fn criterion_9() -> Verdict {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let (train, test) = load_datasets(&cfg).unwrap();
    let net = build_network(&cfg, &train).unwrap();
    let base = train_run(
        &net,
        &train,
        &test,
        &cfg,
        RunMode::Baseline,
        &RunPaths::default(),
    )
    .unwrap();
    let comp = train_run(
        &net,
        &train,
        &test,
        &cfg,
        RunMode::Compressed,
        &RunPaths::default(),
    )
    .unwrap();
    let delta_pp = 100.0 * (comp.summary.final_test_accuracy - base.summary.final_test_accuracy);
    let ratio = comp.summary.mean_conv_ratio;
    verdict(
        delta_pp.abs() <= 1.0 && ratio >= 4.0 && start.elapsed() < Duration::from_secs(1800),
        format!(
            "{} epochs, baseline {:.2}% compressed {:.2}% (delta {delta_pp:+.2} pp, limit 1.0), mean conv ratio {ratio:.2}x (min 4), {:.1}s",
            cfg.epochs,
            100.0 * base.summary.final_test_accuracy,
            100.0 * comp.summary.final_test_accuracy,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else if p.file_name().unwrap() != "timing.json" {
            out.push((
                p.strip_prefix(dir).unwrap().to_path_buf(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

fn criterion_10() -> Verdict {
    let root = tempfile::TempDir::new().unwrap();
    let input = root.path().join("act.tnsr");
    let t = Tensor::from_fn(vec![8, 4, 16, 16], |i| {
        ((i as f32 * 0.01).sin() - 0.1).max(0.0)
    })
    .unwrap();
    write_tnsr(&t, File::create(&input).unwrap()).unwrap();
    let study_cfg = root.path().join("study.cfg");
    std::fs::write(
        &study_cfg,
        "batches = 8, 32\nebs = 1e-4, 1e-3\ntrials = 200\n",
    )
    .unwrap();
    let train_cfg = root.path().join("train.cfg");
    std::fs::write(
        &train_cfg,
        "train_size = 640\ntest_size = 128\nepochs = 1\nW = 5\n",
    )
    .unwrap();

    let run_all = |dir: &Path| -> Vec<i32> {
        std::fs::create_dir_all(dir).unwrap();
        let p = |name: &str| dir.join(name).display().to_string();
        let i = input.display().to_string();
        let (sc, tc) = (
            study_cfg.display().to_string(),
            train_cfg.display().to_string(),
        );
        let commands: Vec<Vec<String>> = vec![
            vec![
                "compress".into(),
                i.clone(),
                p("act.acz"),
                "--eb".into(),
                "1e-3".into(),
            ],
            vec![
                "decompress".into(),
                p("act.acz"),
                p("back.tnsr"),
                "--filter".into(),
            ],
            vec![
                "error-study".into(),
                "--config".into(),
                sc.clone(),
                "--seed".into(),
                "3".into(),
                "--out".into(),
                p("study"),
            ],
            vec![
                "fit-a".into(),
                "--config".into(),
                sc,
                "--seed".into(),
                "3".into(),
                "--out".into(),
                p("fit"),
            ],
            vec![
                "train".into(),
                "--config".into(),
                tc,
                "--seed".into(),
                "3".into(),
                "--out".into(),
                p("train"),
            ],
        ];
        commands
            .into_iter()
            .map(|args| main_with(std::iter::once("actsz".to_string()).chain(args)))
            .collect()
    };
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let codes: Vec<i32> = run_all(&a).into_iter().chain(run_all(&b)).collect();
    let (fa, fb) = (files(&a), files(&b));
    let identical = fa == fb;
    verdict(
        codes.iter().all(|&c| c == 0) && identical && !fa.is_empty(),
        format!(
            "5 commands run twice, exit codes {codes:?}, {} output files {}",
            fa.len(),
            if identical {
                "byte-identical"
            } else {
                "DIFFER"
            }
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [fn() -> Verdict; 10] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
    ];
    let mut failed = Vec::new();
    for (i, c) in criteria.iter().enumerate() {
        let v = c();
        let line = format!(
            "criterion {}: {} {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        writeln!(std::io::stdout().lock(), "{line}").unwrap();
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
