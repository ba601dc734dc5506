//! Baseline and compressed training runs with identical seeds.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::KeyValues;
use crate::controller::{Controller, ControllerConfig, LedgerRecord, MemoryMeter};
use crate::error::{Error, Result};
use crate::nn::data::{load_idx, load_tnsr, synthetic_glyphs, Dataset, GlyphSpec};
use crate::nn::optim::save_checkpoint;
use crate::nn::{
    sgd_momentum_step, ActivationStash, Hyperparams, KeepActivations, Network, TrainState,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic {
        train: usize,
        test: usize,
        classes: usize,
        size: usize,
        strokes: usize,
        max_shift: i32,
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Tnsr {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub dataset: DatasetSource,
    /// Layer lines; the built-in two-conv network when absent.
    pub architecture: Option<String>,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Step decay period in iterations; 0 disables it.
    pub lr_step_every: u64,
    pub lr_step_gamma: f64,
    /// Test-set evaluation period in iterations; the final iteration is always evaluated.
    pub eval_every: u64,
    pub seed: u64,
    pub controller: ControllerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetSource::Synthetic {
                train: 4000,
                test: 1000,
                classes: 10,
                size: 16,
                strokes: 3,
                max_shift: 2,
                noise: 0.08,
            },
            architecture: None,
            epochs: 3,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            lr_step_every: 0,
            lr_step_gamma: 0.1,
            eval_every: 50,
            seed: 0,
            controller: ControllerConfig {
                window: 25,
                ..ControllerConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 21] = [
        "dataset",
        "train_size",
        "test_size",
        "classes",
        "image_size",
        "glyph_strokes",
        "glyph_shift",
        "glyph_noise",
        "train_images",
        "train_labels",
        "test_images",
        "test_labels",
        "architecture",
        "epochs",
        "batch_size",
        "learning_rate",
        "momentum",
        "lr_step_every",
        "lr_step_gamma",
        "eval_every",
        "seed",
    ];

    /// Builds a config from `key=value` settings; controller knobs are
    /// accepted under their own names.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut allowed: Vec<&str> = Self::KEYS.to_vec();
        allowed.extend(ControllerConfig::KEYS);
        kv.check_keys(&allowed)?;
        let d = TrainConfig::default();
        let path = |key: &str| -> Result<PathBuf> {
            kv.raw(key)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("dataset needs `{key}`")))
        };
        let dataset = match kv.raw("dataset").unwrap_or("synthetic") {
            "synthetic" => {
                let DatasetSource::Synthetic {
                    train,
                    test,
                    classes,
                    size,
                    strokes,
                    max_shift,
                    noise,
                } = d.dataset
                else {
                    unreachable!()
                };
                DatasetSource::Synthetic {
                    train: kv.get("train_size", train)?,
                    test: kv.get("test_size", test)?,
                    classes: kv.get("classes", classes)?,
                    size: kv.get("image_size", size)?,
                    strokes: kv.get("glyph_strokes", strokes)?,
                    max_shift: kv.get("glyph_shift", max_shift)?,
                    noise: kv.get("glyph_noise", noise)?,
                }
            }
            kind @ ("idx" | "tnsr") => {
                let (train_images, train_labels) = (path("train_images")?, path("train_labels")?);
                let (test_images, test_labels) = (path("test_images")?, path("test_labels")?);
                if kind == "idx" {
                    DatasetSource::Idx {
                        train_images,
                        train_labels,
                        test_images,
                        test_labels,
                    }
                } else {
                    DatasetSource::Tnsr {
                        train_images,
                        train_labels,
                        test_images,
                        test_labels,
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
        };
        let architecture = match kv.raw("architecture") {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read architecture {p}: {e}")))?,
            ),
            None => None,
        };
        let mut controller = d.controller;
        for (k, v) in kv.iter() {
            controller.set(k, v)?;
        }
        controller.validate()?;
        let cfg = TrainConfig {
            dataset,
            architecture,
            epochs: kv.get("epochs", d.epochs)?,
            batch_size: kv.get("batch_size", d.batch_size)?,
            learning_rate: kv.get("learning_rate", d.learning_rate)?,
            momentum: kv.get("momentum", d.momentum)?,
            lr_step_every: kv.get("lr_step_every", d.lr_step_every)?,
            lr_step_gamma: kv.get("lr_step_gamma", d.lr_step_gamma)?,
            eval_every: kv.get("eval_every", d.eval_every)?,
            seed: kv.get("seed", d.seed)?,
            controller,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and eval_every must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::Config(
                "learning_rate must be positive and momentum in [0, 1)".into(),
            ));
        }
        self.controller.validate()
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            lr_step: (self.lr_step_every > 0).then_some((self.lr_step_every, self.lr_step_gamma)),
        }
    }
}

/// `(train, test)` for the configured source.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSource::Synthetic {
            train,
            test,
            classes,
            size,
            strokes,
            max_shift,
            noise,
        } => {
            let spec = GlyphSpec {
                classes: *classes,
                size: *size,
                strokes: *strokes,
                max_shift: *max_shift,
                noise: *noise,
            };
            synthetic_glyphs(&spec, *train, *test, cfg.seed)
        }
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        )),
        DatasetSource::Tnsr {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_tnsr(train_images, train_labels)?,
            load_tnsr(test_images, test_labels)?,
        )),
    }
}

pub fn build_network(cfg: &TrainConfig, train: &Dataset) -> Result<Network> {
    let shape = train.sample_shape();
    let classes = train.classes.max(2);
    match &cfg.architecture {
        Some(text) => Network::parse(text, shape),
        None => Network::small_cnn(shape, classes),
    }
}

/// Fraction of correctly classified samples.
pub fn evaluate(net: &Network, params: &[Tensor<f32>], data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.gather(chunk)?;
        let pred = net.predict(params, &x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    Compressed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    /// Compression ratio per conv layer in this iteration.
    pub layer_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub iterations: u64,
    pub final_test_accuracy: f64,
    pub final_train_loss: f64,
    /// Raw over stored bytes across all compressed (non-fallback) windows.
    pub mean_conv_ratio: f64,
    /// Raw over stored bytes across the whole run, including uncompressed windows.
    pub overall_conv_ratio: f64,
    pub distinct_eb_per_layer: Vec<usize>,
    /// Stash memory after the uncompressed cold-start window.
    pub memory: Option<MemoryMeter>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<IterationRecord>,
    pub ledger: Vec<LedgerRecord>,
    pub conv_layers: Vec<usize>,
    pub epoch_seconds: Vec<f64>,
    pub params: Vec<Tensor<f32>>,
}

/// Where a run writes its side artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    pub ledger: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

enum Stash {
    Keep(KeepActivations),
    Adaptive(Box<Controller>),
}

/// Trains `net` from its seeded initialisation. The baseline and compressed
/// runs see the same initial weights and batch order.
pub fn train_run(
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mode: RunMode,
    paths: &RunPaths,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut state = TrainState::new(net.init_params::<f32>(cfg.seed), cfg.hyperparams());
    let mut stash = match mode {
        RunMode::Baseline => Stash::Keep(KeepActivations),
        RunMode::Compressed => {
            let mut c = Controller::new(net, cfg.controller)?;
            if let Some(p) = &paths.ledger {
                c = c.with_ledger_file(std::fs::File::create(p)?);
            }
            Stash::Adaptive(Box::new(c))
        }
    };
    let conv_layers = net.conv_layers();
    let batches_per_epoch = (train.len() / cfg.batch_size) as u64;
    if batches_per_epoch == 0 {
        return Err(Error::Config(format!(
            "training set of {} samples is smaller than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let total = batches_per_epoch * cfg.epochs;
    let mut records = Vec::with_capacity(total as usize);
    let mut epoch_seconds = Vec::new();
    let mut last_loss = f64::NAN;
    let mut final_accuracy = 0.0;
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        for batch in train.epoch_batches(cfg.batch_size, cfg.seed, epoch) {
            let (x, y) = train.gather(&batch)?;
            let step = match &mut stash {
                Stash::Keep(k) => net.forward_backward(&state.weights, &x, &y, k),
                Stash::Adaptive(c) => {
                    if t == cfg.controller.window + 1 {
                        // Report peak memory over the compressed phase only.
                        c.reset_peak_memory();
                    }
                    c.begin_iteration(t);
                    net.forward_backward(&state.weights, &x, &y, c.as_mut())
                }
            };
            let out = match step {
                Ok(out) if out.loss.is_finite() => out,
                Ok(_) | Err(Error::Numerical(_) | Error::Domain(_)) => {
                    return Err(abort(&state, t, paths))
                }
                Err(e) => return Err(e),
            };
            if let Err(Error::Numerical(_) | Error::Domain(_)) =
                sgd_momentum_step(&mut state, &out.grads)
            {
                return Err(abort(&state, t, paths));
            }
            let layer_ratios = match &mut stash {
                Stash::Keep(_) => vec![1.0; conv_layers.len()],
                Stash::Adaptive(c) => {
                    c.end_iteration(&state.momentum)?;
                    c.iteration_ratios()
                }
            };
            last_loss = out.loss;
            let eval_accuracy = if (t + 1).is_multiple_of(cfg.eval_every) || t + 1 == total {
                final_accuracy = evaluate(net, &state.weights, test)?;
                Some(final_accuracy)
            } else {
                None
            };
            records.push(IterationRecord {
                iteration: t,
                train_loss: out.loss,
                eval_accuracy,
                layer_ratios,
            });
            t += 1;
        }
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    let (ledger, memory, warnings) = match stash {
        Stash::Keep(_) => (Vec::new(), None, Vec::new()),
        Stash::Adaptive(mut c) => {
            c.finish()?;
            let w = c.take_warnings();
            (c.ledger().to_vec(), Some(c.memory()), w)
        }
    };
    let summary = RunSummary {
        mode,
        iterations: t,
        final_test_accuracy: final_accuracy,
        final_train_loss: last_loss,
        mean_conv_ratio: ratio_over(&records, &ledger, cfg.controller.window, true),
        overall_conv_ratio: ratio_over(&records, &ledger, cfg.controller.window, false),
        distinct_eb_per_layer: conv_layers
            .iter()
            .map(|&l| {
                let mut ebs: Vec<u64> = ledger
                    .iter()
                    .filter(|r| r.layer == l && !r.fallback_flag)
                    .map(|r| r.eb.to_bits())
                    .collect();
                ebs.sort_unstable();
                ebs.dedup();
                ebs.len()
            })
            .collect(),
        memory,
        warnings,
    };
    Ok(RunOutput {
        summary,
        records,
        ledger,
        conv_layers,
        epoch_seconds,
        params: state.weights,
    })
}

fn abort(state: &TrainState<f32>, iteration: u64, paths: &RunPaths) -> Error {
    let saved = paths
        .checkpoint
        .as_deref()
        .map(|dir| save_checkpoint(state, dir).map(|_| dir.display().to_string()));
    let where_ = match saved {
        Some(Ok(dir)) => format!("; last good state saved to {dir}"),
        Some(Err(e)) => format!("; checkpoint failed: {e}"),
        None => String::new(),
    };
    Error::Numerical(format!("loss diverged at iteration {iteration}{where_}"))
}

/// Byte-weighted ratio over per-layer iteration ratios. With
/// `compressed_only`, iterations covered by a fallback window are skipped.
fn ratio_over(
    records: &[IterationRecord],
    ledger: &[LedgerRecord],
    window: u64,
    compressed_only: bool,
) -> f64 {
    // All iterations of one layer stash the same raw size, so the byte-weighted
    // ratio is the harmonic mean of per-iteration ratios.
    let mut inv_sum = 0.0;
    let mut count = 0usize;
    for r in records {
        for (li, &ratio) in r.layer_ratios.iter().enumerate() {
            if compressed_only {
                let start = r.iteration.saturating_sub(1) / window * window;
                let covered = r.iteration >= 1
                    && ledger
                        .iter()
                        .filter(|l| l.iteration == start)
                        .nth(li)
                        .is_some_and(|l| !l.fallback_flag);
                if !covered {
                    continue;
                }
            }
            inv_sum += 1.0 / ratio;
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        count as f64 / inv_sum
    }
}

pub fn write_iterations_csv<W: std::io::Write>(out: &RunOutput, w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec![
        "iteration".to_string(),
        "train_loss".into(),
        "eval_accuracy".into(),
    ];
    header.extend(out.conv_layers.iter().map(|l| format!("ratio_layer{l}")));
    csv.write_record(&header)?;
    for r in &out.records {
        let mut row = vec![
            r.iteration.to_string(),
            format!("{:.9e}", r.train_loss),
            r.eval_accuracy.map_or(String::new(), |a| format!("{a:.6}")),
        ];
        row.extend(r.layer_ratios.iter().map(|x| format!("{x:.6}")));
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Largest absolute weight difference between two parameter sets.
pub fn max_weight_divergence(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f64> {
    a.iter()
        .zip(b)
        .try_fold(0.0f64, |m, (x, y)| Ok(m.max(x.max_abs_diff(y)?)))
}

/// Runs a stash over one batch without training; used to probe compression.
pub fn probe<S: ActivationStash<f32>>(
    net: &Network,
    params: &[Tensor<f32>],
    data: &Dataset,
    stash: &mut S,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len().min(32)).collect();
    let (x, y) = data.gather(&idx)?;
    Ok(net.forward_backward(params, &x, &y, stash)?.loss)
}

pub fn default_checkpoint_dir(out: &Path, mode: RunMode) -> PathBuf {
    out.join(match mode {
        RunMode::Baseline => "checkpoint-baseline",
        RunMode::Compressed => "checkpoint-compressed",
    })
}
