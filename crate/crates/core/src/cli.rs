//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::analysis::study::{run_conv_study, ConvGeometry, StudyCase, StudyOutcome};
use crate::analysis::{fit_coefficient, predict_sigma, sub_seed, DEFAULT_COEFFICIENT};
use crate::codec::{
    compress, decompress, CodecParams, CompressedTensor, Predictor, DEFAULT_QUANT_RADIUS,
};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{read_tnsr, write_tnsr};
use crate::train::{
    build_network, default_checkpoint_dir, load_datasets, train_run, write_iterations_csv, RunMode,
    RunPaths, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "actsz",
    version,
    about = "Error-bounded activation compression for CNN training"
)]
pub struct Cli {
    /// Master seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a TNSR tensor into a blob.
    Compress {
        input: PathBuf,
        output: PathBuf,
        /// Absolute error bound.
        #[arg(long)]
        eb: f64,
        #[arg(long, default_value = "lorenzo1d")]
        predictor: Predictor,
        #[arg(long, default_value_t = DEFAULT_QUANT_RADIUS)]
        quant_radius: u32,
    },
    /// Decompress a blob into a TNSR tensor.
    Decompress {
        input: PathBuf,
        output: PathBuf,
        /// Re-zero reconstructed values within the error bound.
        #[arg(long)]
        filter: bool,
        /// Original tensor to verify against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Monte Carlo study of gradient error under injected activation error.
    ErrorStudy,
    /// Fit the sigma estimator coefficient over an error-study sweep.
    FitA,
    /// Train baseline and compressed networks with identical seeds.
    Train,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut kv = match &cli.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    if let Some(seed) = cli.seed {
        kv.insert("seed", seed);
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::Compress {
            input,
            output,
            eb,
            predictor,
            quant_radius,
        } => cmd_compress(input, output, *eb, *predictor, *quant_radius),
        Command::Decompress {
            input,
            output,
            filter,
            reference,
        } => cmd_decompress(input, output, *filter, reference.as_deref()),
        Command::ErrorStudy => cmd_error_study(&kv, &out),
        Command::FitA => cmd_fit_a(&kv, &out),
        Command::Train => cmd_train(&kv, &out),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))
}

fn cmd_compress(
    input: &Path,
    output: &Path,
    eb: f64,
    predictor: Predictor,
    quant_radius: u32,
) -> Result<()> {
    let t = read_tnsr(File::open(input)?)?;
    let params = CodecParams {
        eb,
        quant_radius,
        predictor,
    };
    let blob = compress(&t, &params)?;
    std::fs::write(output, blob.to_bytes())?;
    let max_error = t.max_abs_diff(&decompress(&blob, false)?)?;
    let report = json!({
        "command": "compress",
        "input": input,
        "output": output,
        "eb": eb,
        "predictor": predictor.to_string(),
        "quant_radius": quant_radius,
        "elements": blob.element_count(),
        "uncompressed_bytes": blob.uncompressed_bytes(),
        "compressed_bytes": blob.compressed_bytes(),
        "ratio": blob.compression_ratio(),
        "max_error": max_error,
    });
    println!("{report}");
    Ok(())
}

fn cmd_decompress(
    input: &Path,
    output: &Path,
    filter: bool,
    reference: Option<&Path>,
) -> Result<()> {
    let blob = CompressedTensor::from_bytes(&std::fs::read(input)?)?;
    let t = decompress(&blob, filter)?;
    write_tnsr(&t, BufWriter::new(File::create(output)?))?;
    let mut report = json!({
        "command": "decompress",
        "input": input,
        "output": output,
        "filter": filter,
        "eb": blob.params().eb,
        "uncompressed_bytes": blob.uncompressed_bytes(),
        "compressed_bytes": blob.compressed_bytes(),
        "ratio": blob.compression_ratio(),
    });
    if let Some(r) = reference {
        let orig = read_tnsr(File::open(r)?)?;
        let zeros_preserved = orig
            .data()
            .iter()
            .zip(t.data())
            .filter(|(o, _)| **o == 0.0)
            .all(|(o, d)| o.to_bits() == d.to_bits());
        report["reference"] = json!(r);
        report["max_error"] = json!(orig.max_abs_diff(&t)?);
        report["zeros_preserved"] = json!(zeros_preserved);
    }
    println!("{report}");
    Ok(())
}

/// Sweep over geometries, batch sizes, error bounds and sparsities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyConfig {
    pub geometries: Vec<ConvGeometry>,
    pub batches: Vec<usize>,
    pub ebs: Vec<f64>,
    pub nonzero_ratios: Vec<f64>,
    pub preserve_zeros: bool,
    pub trials: usize,
    pub coefficient_a: f64,
    pub seed: u64,
}

impl StudyConfig {
    pub const KEYS: [&'static str; 8] = [
        "geometries",
        "batches",
        "ebs",
        "nonzero_ratios",
        "preserve_zeros",
        "trials",
        "coefficient_a",
        "seed",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(&Self::KEYS)?;
        let geometries = match kv.raw("geometries") {
            Some(v) => v
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<Result<Vec<ConvGeometry>>>()?,
            None => vec![
                "c=2,k=2,size=10,kernel=3".parse()?,
                "c=2,k=2,size=14,kernel=3".parse()?,
            ],
        };
        let cfg = StudyConfig {
            geometries,
            batches: kv.list("batches", vec![8, 32, 128])?,
            ebs: kv.list("ebs", vec![1e-5, 1e-4, 1e-3])?,
            nonzero_ratios: kv.list("nonzero_ratios", vec![1.0])?,
            preserve_zeros: kv.get("preserve_zeros", false)?,
            trials: kv.get("trials", 1000)?,
            coefficient_a: kv.get("coefficient_a", DEFAULT_COEFFICIENT)?,
            seed: kv.get("seed", 0)?,
        };
        if cfg.geometries.is_empty() || cfg.trials == 0 || cfg.batches.contains(&0) {
            return Err(Error::Config(
                "sweep grid must be nonempty with positive trials and batches".into(),
            ));
        }
        if cfg.ebs.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Config("error bounds must be positive".into()));
        }
        if cfg.nonzero_ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config("nonzero ratios must lie in (0, 1]".into()));
        }
        Ok(cfg)
    }

    pub fn cases(&self) -> Vec<StudyCase> {
        let mut cases = Vec::new();
        let mut cell = 0;
        for &geometry in &self.geometries {
            for &batch in &self.batches {
                for &eb in &self.ebs {
                    let seed = sub_seed(self.seed, cell);
                    cell += 1;
                    for &nonzero_ratio in &self.nonzero_ratios {
                        cases.push(StudyCase {
                            geometry,
                            batch,
                            eb,
                            nonzero_ratio,
                            preserve_zeros: self.preserve_zeros,
                            trials: self.trials,
                            seed,
                        });
                    }
                }
            }
        }
        cases
    }
}

#[derive(Debug, Clone, Serialize)]
struct StudyRow {
    case: usize,
    geometry: String,
    fan_in: usize,
    batch: usize,
    eb: f64,
    nonzero_ratio: f64,
    preserve_zeros: bool,
    trials: usize,
    seed: u64,
    #[serde(rename = "L_bar")]
    l_bar: f64,
    exact_sigma: f64,
    empirical_sigma: f64,
    predicted_sigma: f64,
    within_one_sigma: f64,
}

fn study_row(i: usize, o: &StudyOutcome, a: f64) -> Result<StudyRow> {
    let c = &o.case;
    Ok(StudyRow {
        case: i,
        geometry: c.geometry.to_string(),
        fan_in: c.geometry.fan_in()?,
        batch: c.batch,
        eb: c.eb,
        nonzero_ratio: o.measured_nonzero_ratio,
        preserve_zeros: c.preserve_zeros,
        trials: c.trials,
        seed: c.seed,
        l_bar: o.mean_abs_loss,
        exact_sigma: o.exact_sigma,
        empirical_sigma: o.empirical_sigma,
        predicted_sigma: predict_sigma(
            o.mean_abs_loss,
            c.batch,
            c.eb,
            o.measured_nonzero_ratio,
            a,
        )?
        .predicted_sigma,
        within_one_sigma: o.normalized.within_one_sigma,
    })
}

fn run_study(cfg: &StudyConfig) -> Result<Vec<StudyOutcome>> {
    cfg.cases().iter().map(run_conv_study).collect()
}

fn cmd_error_study(kv: &KeyValues, out: &Path) -> Result<()> {
    let cfg = StudyConfig::from_kv(kv)?;
    create_out(out)?;
    let outcomes = run_study(&cfg)?;
    let mut summary = csv::Writer::from_path(out.join("error_study.csv"))?;
    let mut rows = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        let row = study_row(i, o, cfg.coefficient_a)?;
        summary.serialize(&row)?;
        write_json(
            &out.join(format!("study_{i:03}.json")),
            &json!({ "config": cfg, "seed": cfg.seed, "summary": row, "report": o.normalized, "outcome": o }),
        )?;
        o.normalized
            .write_histogram_csv(BufWriter::new(File::create(
                out.join(format!("study_{i:03}_hist.csv")),
            )?))?;
        println!(
            "case {i:3} {} N={:<4} eb={:.0e} R={:.2}: within±σ {:.4}  σ emp {:.4e} exact {:.4e} pred {:.4e}",
            row.geometry,
            row.batch,
            row.eb,
            row.nonzero_ratio,
            row.within_one_sigma,
            row.empirical_sigma,
            row.exact_sigma,
            row.predicted_sigma
        );
        rows.push(row);
    }
    summary.flush()?;
    write_json(
        &out.join("error_study.json"),
        &json!({ "config": cfg, "seed": cfg.seed, "cases": rows }),
    )?;
    Ok(())
}

fn cmd_fit_a(kv: &KeyValues, out: &Path) -> Result<()> {
    let cfg = StudyConfig::from_kv(kv)?;
    create_out(out)?;
    let outcomes = run_study(&cfg)?;
    if outcomes.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "a fit needs at least 3 sweep points, the grid has {}",
            outcomes.len()
        )));
    }
    let observations: Vec<_> = outcomes.iter().map(StudyOutcome::observation).collect();
    let a = fit_coefficient(&observations)?;
    let residuals: Vec<_> = observations
        .iter()
        .zip(&outcomes)
        .map(|(obs, o)| {
            let predicted = a * obs.regressor();
            json!({
                "geometry": o.case.geometry.to_string(),
                "batch": obs.batch,
                "eb": obs.eb,
                "nonzero_ratio": obs.nonzero_ratio,
                "L_bar": obs.mean_abs_loss,
                "empirical_sigma": obs.sigma,
                "predicted_sigma": predicted,
                "residual": obs.sigma - predicted,
                "ratio": predicted / obs.sigma,
            })
        })
        .collect();
    let worst = observations
        .iter()
        .map(|o| {
            let r = a * o.regressor() / o.sigma;
            r.max(1.0 / r)
        })
        .fold(1.0, f64::max);
    write_json(
        &out.join("fit_a.json"),
        &json!({
            "config": cfg,
            "seed": cfg.seed,
            "fitted_a": a,
            "reference_a": DEFAULT_COEFFICIENT,
            "max_ratio_factor": worst,
            "observations": residuals,
        }),
    )?;
    println!("fitted a = {a:.4} (reference {DEFAULT_COEFFICIENT}); worst predicted/empirical factor {worst:.3}");
    Ok(())
}

fn cmd_train(kv: &KeyValues, out: &Path) -> Result<()> {
    let cfg = TrainConfig::from_kv(kv)?;
    create_out(out)?;
    let (train, test) = load_datasets(&cfg)?;
    let net = build_network(&cfg, &train)?;
    let base_paths = RunPaths {
        ledger: None,
        checkpoint: Some(default_checkpoint_dir(out, RunMode::Baseline)),
    };
    let comp_paths = RunPaths {
        ledger: Some(out.join("ledger.csv")),
        checkpoint: Some(default_checkpoint_dir(out, RunMode::Compressed)),
    };
    let base = train_run(&net, &train, &test, &cfg, RunMode::Baseline, &base_paths)?;
    let comp = train_run(&net, &train, &test, &cfg, RunMode::Compressed, &comp_paths)?;
    write_iterations_csv(
        &base,
        BufWriter::new(File::create(out.join("baseline_iterations.csv"))?),
    )?;
    write_iterations_csv(
        &comp,
        BufWriter::new(File::create(out.join("compressed_iterations.csv"))?),
    )?;
    for w in &comp.summary.warnings {
        eprintln!("warning: {w}");
    }
    let delta_pp = 100.0 * (comp.summary.final_test_accuracy - base.summary.final_test_accuracy);
    write_json(
        &out.join("summary.json"),
        &json!({
            "config": cfg,
            "seed": cfg.seed,
            "network": net.describe(),
            "baseline": base.summary,
            "compressed": comp.summary,
            "accuracy_delta_pp": delta_pp,
        }),
    )?;
    let (tb, tc): (f64, f64) = (
        base.epoch_seconds.iter().sum(),
        comp.epoch_seconds.iter().sum(),
    );
    write_json(
        &out.join("timing.json"),
        &json!({
            "seed": cfg.seed,
            "baseline_epoch_seconds": base.epoch_seconds,
            "compressed_epoch_seconds": comp.epoch_seconds,
            "overhead_percent": 100.0 * (tc - tb) / tb,
        }),
    )?;
    println!(
        "baseline accuracy {:.4}  compressed accuracy {:.4}  delta {delta_pp:+.2} pp  mean conv ratio {:.2}x  overhead {:.1}%",
        base.summary.final_test_accuracy,
        comp.summary.final_test_accuracy,
        comp.summary.mean_conv_ratio,
        100.0 * (tc - tb) / tb
    );
    Ok(())
}
