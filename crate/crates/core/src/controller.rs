//! Adaptive activation compression: collects training statistics every `W`
//! iterations, turns them into a per-layer error bound, and compresses conv
//! inputs between the forward and backward pass.

use std::fmt;
use std::fs::File;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{batch_mean_loss_magnitude, predict_sigma};
use crate::codec::{compress, decompress, CodecParams, CompressedTensor};
use crate::error::{Error, Result};
use crate::nn::{ActivationStash, LayerSpec, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroRestoration {
    /// Decompression-side filter: reconstructed `|v| ≤ eb` becomes zero.
    CodecFilter,
    /// For layers fed by a ReLU, the zero set is re-derived from a bitmask
    /// kept alongside the blob; other values are left as decompressed.
    /// Layers not fed by a ReLU use the codec filter.
    ReluRecompute,
}

impl FromStr for ZeroRestoration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "codec-filter" | "filter" => Ok(ZeroRestoration::CodecFilter),
            "relu-recompute" | "recompute" => Ok(ZeroRestoration::ReluRecompute),
            other => Err(Error::Config(format!("unknown zero_restoration `{other}`"))),
        }
    }
}

impl fmt::Display for ZeroRestoration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZeroRestoration::CodecFilter => "codec-filter",
            ZeroRestoration::ReluRecompute => "relu-recompute",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    #[serde(rename = "W")]
    pub window: u64,
    pub sigma_fraction: f64,
    pub coefficient_a: f64,
    pub eb_min: f64,
    pub eb_max: f64,
    pub zero_restoration: ZeroRestoration,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            window: 1000,
            sigma_fraction: 0.01,
            coefficient_a: crate::analysis::DEFAULT_COEFFICIENT,
            eb_min: 1e-8,
            eb_max: 0.1,
            zero_restoration: ZeroRestoration::CodecFilter,
        }
    }
}

impl ControllerConfig {
    pub const KEYS: [&'static str; 6] = [
        "W",
        "sigma_fraction",
        "coefficient_a",
        "eb_min",
        "eb_max",
        "zero_restoration",
    ];

    pub fn validate(&self) -> Result<()> {
        let ok = self.window >= 1
            && self.sigma_fraction.is_finite()
            && self.sigma_fraction > 0.0
            && self.coefficient_a.is_finite()
            && self.coefficient_a > 0.0
            && self.eb_min > 0.0
            && self.eb_min <= self.eb_max
            && self.eb_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid controller config {self:?}")))
        }
    }

    /// Applies one `key=value` setting. Returns `false` for keys that are not
    /// controller knobs.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: `{v}` is not a number")))
        };
        match key {
            "W" => {
                self.window = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("W: `{value}` is not a positive integer")))?
            }
            "sigma_fraction" => self.sigma_fraction = num(value)?,
            "coefficient_a" => self.coefficient_a = num(value)?,
            "eb_min" => self.eb_min = num(value)?,
            "eb_max" => self.eb_max = num(value)?,
            "zero_restoration" => self.zero_restoration = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Mean absolute gradient of the batch-mean loss at the layer output.
    pub mean_abs_loss: f64,
    pub nonzero_ratio: f64,
    pub momentum_mean_abs: f64,
    pub batch: usize,
    pub collected_at: u64,
}

impl LayerStats {
    pub fn is_degenerate(&self) -> bool {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        !(pos(self.mean_abs_loss)
            && pos(self.nonzero_ratio)
            && pos(self.momentum_mean_abs)
            && self.batch > 0)
    }
}

/// `loss` is the per-sample gradient at the layer output, `[N, ...]`.
pub fn collect_stats(
    layer: usize,
    activation: &Tensor<f32>,
    loss: &Tensor<f32>,
    momentum: &Tensor<f32>,
    collected_at: u64,
) -> Result<LayerStats> {
    Ok(LayerStats {
        layer,
        mean_abs_loss: batch_mean_loss_magnitude(loss)?,
        nonzero_ratio: activation.nonzero_ratio()?,
        momentum_mean_abs: momentum.mean_abs()?,
        batch: loss.shape()[0],
        collected_at,
    })
}

/// `sigma_fraction · M_avg`, or `None` when momentum carries no scale.
pub fn target_sigma(stats: &LayerStats, cfg: &ControllerConfig) -> Option<f64> {
    let m = stats.momentum_mean_abs;
    (m.is_finite() && m > 0.0).then_some(cfg.sigma_fraction * m)
}

/// `σ / (a · L̄ · √(N·R))` clamped to `[eb_min, eb_max]`; `None` routes the
/// layer to pass-through.
pub fn compute_error_bound(stats: &LayerStats, sigma: f64, cfg: &ControllerConfig) -> Option<f64> {
    if stats.is_degenerate() || !(sigma.is_finite() && sigma > 0.0) {
        return None;
    }
    let denom =
        cfg.coefficient_a * stats.mean_abs_loss * (stats.batch as f64 * stats.nonzero_ratio).sqrt();
    let eb = sigma / denom;
    eb.is_finite().then(|| eb.clamp(cfg.eb_min, cfg.eb_max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub iteration: u64,
    pub layer: usize,
    pub eb: f64,
    pub predicted_sigma: f64,
    #[serde(rename = "L_bar")]
    pub l_bar: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "M_avg")]
    pub m_avg: f64,
    pub ratio: f64,
    pub fallback_flag: bool,
}

pub enum Handle {
    Raw(Tensor<f32>),
    Compressed {
        blob: CompressedTensor,
        zero_mask: Option<Vec<u64>>,
        held_bytes: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct Plan {
    eb: f64,
    predicted_sigma: f64,
}

#[derive(Debug, Clone)]
struct LayerSlot {
    layer: usize,
    weight_slot: usize,
    post_relu: bool,
    plan: Option<Plan>,
    stats: Option<LayerStats>,
    window_start: u64,
    raw_bytes: u64,
    stored_bytes: u64,
    pending_r: Option<f64>,
    pending_l: Option<(f64, usize)>,
    iter_raw: u64,
    iter_stored: u64,
}

/// Memory held by stashed activations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MemoryMeter {
    pub held_bytes: usize,
    pub peak_held_bytes: usize,
    /// What the same stash would hold uncompressed.
    pub raw_held_bytes: usize,
    pub peak_raw_held_bytes: usize,
}

impl MemoryMeter {
    fn add(&mut self, held: usize, raw: usize) {
        self.held_bytes += held;
        self.raw_held_bytes += raw;
        self.peak_held_bytes = self.peak_held_bytes.max(self.held_bytes);
        self.peak_raw_held_bytes = self.peak_raw_held_bytes.max(self.raw_held_bytes);
    }

    /// Restarts peak tracking from the current holdings.
    pub fn reset_peak(&mut self) {
        self.peak_held_bytes = self.held_bytes;
        self.peak_raw_held_bytes = self.raw_held_bytes;
    }

    fn remove(&mut self, held: usize, raw: usize) {
        self.held_bytes -= held;
        self.raw_held_bytes -= raw;
    }
}

pub struct Controller {
    cfg: ControllerConfig,
    slots: Vec<LayerSlot>,
    iteration: u64,
    collections: u64,
    ledger: Vec<LedgerRecord>,
    sink: Option<csv::Writer<File>>,
    memory: MemoryMeter,
    warnings: Vec<String>,
}

impl Controller {
    /// Tracks every conv layer of `net`.
    pub fn new(net: &Network, cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = net.layers();
        let slots = net
            .conv_layers()
            .into_iter()
            .map(|layer| {
                let post_relu = layers[..layer]
                    .iter()
                    .rev()
                    .find(|l| !matches!(l, LayerSpec::MaxPool(_)))
                    .is_some_and(|l| matches!(l, LayerSpec::Relu));
                LayerSlot {
                    layer,
                    weight_slot: net.param_range(layer).start,
                    post_relu,
                    plan: None,
                    stats: None,
                    window_start: 0,
                    raw_bytes: 0,
                    stored_bytes: 0,
                    pending_r: None,
                    pending_l: None,
                    iter_raw: 0,
                    iter_stored: 0,
                }
            })
            .collect();
        Ok(Controller {
            cfg,
            slots,
            iteration: 0,
            collections: 0,
            ledger: Vec::new(),
            sink: None,
            memory: MemoryMeter::default(),
            warnings: Vec::new(),
        })
    }

    /// Appends each ledger record to `file` as CSV as soon as its window closes.
    pub fn with_ledger_file(mut self, file: File) -> Self {
        self.sink = Some(csv::Writer::from_writer(file));
        self
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &[LedgerRecord] {
        &self.ledger
    }

    pub fn memory(&self) -> MemoryMeter {
        self.memory
    }

    pub fn reset_peak_memory(&mut self) {
        self.memory.reset_peak();
    }

    pub fn collections(&self) -> u64 {
        self.collections
    }

    pub fn take_warnings(&mut self) -> Vec<String> {
        std::mem::take(&mut self.warnings)
    }

    /// Current error bound of `layer`, `None` while it passes through.
    pub fn error_bound(&self, layer: usize) -> Option<f64> {
        self.slot(layer).and_then(|s| s.plan).map(|p| p.eb)
    }

    /// Parameter-collection iterations are the multiples of `W`.
    pub fn is_collecting(&self) -> bool {
        self.iteration.is_multiple_of(self.cfg.window)
    }

    pub fn begin_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
        for slot in &mut self.slots {
            slot.iter_raw = 0;
            slot.iter_stored = 0;
        }
    }

    /// Tracked conv layers in network order.
    pub fn layers(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.layer).collect()
    }

    /// Per-layer compression ratio achieved in the current iteration.
    pub fn iteration_ratios(&self) -> Vec<f64> {
        self.slots
            .iter()
            .map(|s| {
                if s.iter_stored > 0 {
                    s.iter_raw as f64 / s.iter_stored as f64
                } else {
                    1.0
                }
            })
            .collect()
    }

    fn slot(&self, layer: usize) -> Option<&LayerSlot> {
        self.slots.iter().find(|s| s.layer == layer)
    }

    fn slot_mut(&mut self, layer: usize) -> Option<&mut LayerSlot> {
        self.slots.iter_mut().find(|s| s.layer == layer)
    }

    /// Called after the optimizer step with the updated momentum. On
    /// collection iterations this closes the running window and installs the
    /// plans used for the next `W` iterations.
    pub fn end_iteration(&mut self, momentum: &[Tensor<f32>]) -> Result<()> {
        if !self.is_collecting() {
            return Ok(());
        }
        self.collections += 1;
        self.close_windows()?;
        let cold = self.iteration == 0;
        let (cfg, iteration) = (self.cfg, self.iteration);
        for slot in &mut self.slots {
            let stats = match (slot.pending_r.take(), slot.pending_l.take()) {
                (Some(r), Some((l, n))) => Some(LayerStats {
                    layer: slot.layer,
                    mean_abs_loss: l,
                    nonzero_ratio: r,
                    momentum_mean_abs: momentum
                        .get(slot.weight_slot)
                        .ok_or_else(|| {
                            Error::Shape(format!("no momentum for layer {}", slot.layer))
                        })?
                        .mean_abs()?,
                    batch: n,
                    collected_at: iteration,
                }),
                _ => None,
            };
            // Statistics from the very first iteration are not applied; the
            // first window runs uncompressed.
            slot.plan = match (&stats, cold) {
                (Some(s), false) => target_sigma(s, &cfg)
                    .and_then(|sigma| compute_error_bound(s, sigma, &cfg))
                    .map(|eb| Plan {
                        eb,
                        predicted_sigma: predict_sigma(
                            s.mean_abs_loss,
                            s.batch,
                            eb,
                            s.nonzero_ratio,
                            cfg.coefficient_a,
                        )
                        .map_or(f64::NAN, |e| e.predicted_sigma),
                    }),
                _ => None,
            };
            slot.stats = stats;
            slot.window_start = iteration;
            slot.raw_bytes = 0;
            slot.stored_bytes = 0;
        }
        Ok(())
    }

    /// Closes any open window, appending its ledger records.
    pub fn finish(&mut self) -> Result<()> {
        self.close_windows()?;
        for slot in &mut self.slots {
            slot.stats = None;
            slot.plan = None;
        }
        Ok(())
    }

    fn close_windows(&mut self) -> Result<()> {
        let mut records = Vec::new();
        for slot in &self.slots {
            let Some(stats) = slot.stats else { continue };
            let ratio = if slot.stored_bytes > 0 {
                slot.raw_bytes as f64 / slot.stored_bytes as f64
            } else {
                1.0
            };
            records.push(LedgerRecord {
                iteration: slot.window_start,
                layer: slot.layer,
                eb: slot.plan.map_or(0.0, |p| p.eb),
                predicted_sigma: slot.plan.map_or(0.0, |p| p.predicted_sigma),
                l_bar: stats.mean_abs_loss,
                r: stats.nonzero_ratio,
                m_avg: stats.momentum_mean_abs,
                ratio,
                fallback_flag: slot.plan.is_none(),
            });
        }
        if let Some(sink) = &mut self.sink {
            for r in &records {
                sink.serialize(r)?;
            }
            sink.flush()?;
        }
        self.ledger.extend(records);
        Ok(())
    }

    fn active_plan(&self, slot: &LayerSlot) -> Option<Plan> {
        // A plan installed at iteration t covers t+1 ..= t+W.
        let age = self.iteration.checked_sub(slot.window_start)?;
        (age >= 1 && age <= self.cfg.window)
            .then_some(slot.plan)
            .flatten()
    }

    /// Compresses `activation` if the layer has an active plan.
    pub fn wrap_forward(&mut self, layer: usize, activation: Tensor<f32>) -> Result<Handle> {
        let collecting = self.is_collecting();
        let Some(idx) = self.slots.iter().position(|s| s.layer == layer) else {
            let raw = activation.len() * 4;
            self.memory.add(raw, raw);
            return Ok(Handle::Raw(activation));
        };
        if collecting {
            self.slots[idx].pending_r = Some(activation.nonzero_ratio()?);
        }
        let raw = activation.len() * 4;
        let plan = self.active_plan(&self.slots[idx]);
        let Some(plan) = plan else {
            self.account(idx, raw, raw);
            return Ok(Handle::Raw(activation));
        };
        let blob = match compress(&activation, &CodecParams::new(plan.eb)) {
            Ok(b) => b,
            Err(e) => {
                self.warnings.push(format!(
                    "iteration {}: layer {layer} stored uncompressed: {e}",
                    self.iteration
                ));
                self.account(idx, raw, raw);
                return Ok(Handle::Raw(activation));
            }
        };
        let zero_mask = (self.cfg.zero_restoration == ZeroRestoration::ReluRecompute
            && self.slots[idx].post_relu)
            .then(|| zero_bitmask(&activation));
        drop(activation);
        let held = blob.compressed_bytes() + zero_mask.as_ref().map_or(0, |m| m.len() * 8);
        self.account(idx, raw, held);
        Ok(Handle::Compressed {
            blob,
            zero_mask,
            held_bytes: held,
        })
    }

    fn account(&mut self, idx: usize, raw: usize, held: usize) {
        let slot = &mut self.slots[idx];
        slot.raw_bytes += raw as u64;
        slot.stored_bytes += held as u64;
        slot.iter_raw += raw as u64;
        slot.iter_stored += held as u64;
        self.memory.add(held, raw);
    }

    /// Reconstructs the activation. Decode failures are unrecoverable.
    pub fn unwrap_backward(&mut self, handle: Handle) -> Result<Tensor<f32>> {
        match handle {
            Handle::Raw(t) => {
                let raw = t.len() * 4;
                self.memory.remove(raw, raw);
                Ok(t)
            }
            Handle::Compressed {
                blob,
                zero_mask,
                held_bytes,
            } => {
                self.memory.remove(held_bytes, blob.uncompressed_bytes());
                let t = decompress(&blob, zero_mask.is_none())
                    .map_err(|e| Error::Decode(format!("stashed activation lost: {e}")))?;
                match zero_mask {
                    None => Ok(t),
                    Some(mask) => {
                        let mut data = t.into_data();
                        for (i, v) in data.iter_mut().enumerate() {
                            if mask[i / 64] >> (i % 64) & 1 == 1 {
                                *v = 0.0;
                            }
                        }
                        Tensor::new(blob.shape().to_vec(), data)
                    }
                }
            }
        }
    }
}

fn zero_bitmask(t: &Tensor<f32>) -> Vec<u64> {
    let mut mask = vec![0u64; t.len().div_ceil(64)];
    for (i, &v) in t.data().iter().enumerate() {
        if v == 0.0 {
            mask[i / 64] |= 1 << (i % 64);
        }
    }
    mask
}

impl ActivationStash<f32> for Controller {
    type Handle = Handle;

    fn stash(&mut self, layer: usize, activation: Tensor<f32>) -> Result<Handle> {
        self.wrap_forward(layer, activation)
    }

    fn restore(&mut self, layer: usize, handle: Handle, loss: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.is_collecting() {
            if let Some(slot) = self.slot_mut(layer) {
                slot.pending_l = Some((batch_mean_loss_magnitude(loss)?, loss.shape()[0]));
            }
        }
        self.unwrap_backward(handle)
    }
}

/// Writes ledger records as CSV.
pub fn write_ledger_csv<W: std::io::Write>(records: &[LedgerRecord], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}
