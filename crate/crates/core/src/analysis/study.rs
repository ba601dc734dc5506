//! Monte Carlo study of how uniform activation error propagates through a
//! real convolution backward pass into the weight gradient.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    batch_max_loss_magnitude, batch_mean_loss_magnitude, distribution_report, exact_sigma,
    inject_uniform_error, sub_seed, ErrorDistributionReport, Observation,
};
use crate::error::{Error, Result};
use crate::nn::{conv2d_backward_weights, ConvSpec};
use crate::par;
use crate::tensor::Tensor;

/// A single conv layer with square kernel. Parsed from `key=value` pairs
/// separated by commas, e.g. `c=2,k=4,h=10,w=10,kernel=3,stride=1,padding=0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn spec(&self) -> ConvSpec {
        ConvSpec::square(
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.stride,
            self.padding,
        )
    }

    /// Output positions contributing to each weight when no padding is hit,
    /// i.e. the number of terms per sample in the gradient sum.
    pub fn fan_in(&self) -> Result<usize> {
        let (oh, ow) = self.spec().output_hw(self.height, self.width)?;
        Ok(oh * ow)
    }
}

impl fmt::Display for ConvGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "c={},k={},h={},w={},kernel={},stride={},padding={}",
            self.in_channels,
            self.out_channels,
            self.height,
            self.width,
            self.kernel,
            self.stride,
            self.padding
        )
    }
}

impl FromStr for ConvGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut g = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            height: 0,
            width: 0,
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                Error::Config(format!("geometry entry `{part}` is not key=value"))
            })?;
            let value: usize = value.trim().parse().map_err(|_| {
                Error::Config(format!("geometry value `{value}` is not an integer"))
            })?;
            match key.trim() {
                "c" => g.in_channels = value,
                "k" => g.out_channels = value,
                "h" => g.height = value,
                "w" => g.width = value,
                "size" => (g.height, g.width) = (value, value),
                "kernel" => g.kernel = value,
                "stride" => g.stride = value,
                "padding" => g.padding = value,
                other => return Err(Error::Config(format!("unknown geometry key `{other}`"))),
            }
        }
        if g.in_channels == 0 || g.out_channels == 0 || g.height == 0 || g.width == 0 {
            return Err(Error::Config(format!("geometry `{s}` has a zero extent")));
        }
        g.fan_in().map_err(|e| Error::Config(e.to_string()))?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyCase {
    pub geometry: ConvGeometry,
    pub batch: usize,
    pub eb: f64,
    /// Fraction of nonzero activations, realised exactly.
    pub nonzero_ratio: f64,
    pub preserve_zeros: bool,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOutcome {
    pub case: StudyCase,
    pub measured_nonzero_ratio: f64,
    /// Estimator loss magnitude, `mean|L| / N`.
    pub mean_abs_loss: f64,
    /// Alternative magnitude from per-sample maxima, for comparison.
    pub max_abs_loss: f64,
    /// Root-mean-square of the per-weight exact sigma.
    pub exact_sigma: f64,
    /// Pooled standard deviation of the observed gradient errors.
    pub empirical_sigma: f64,
    /// Distribution of errors normalised by each weight's exact sigma.
    pub normalized: ErrorDistributionReport,
}

impl StudyOutcome {
    pub fn observation(&self) -> Observation {
        Observation {
            mean_abs_loss: self.mean_abs_loss,
            batch: self.case.batch,
            eb: self.case.eb,
            nonzero_ratio: self.measured_nonzero_ratio,
            sigma: self.empirical_sigma,
        }
    }
}

/// Samples `Laplace(0, scale)` by inversion.
fn laplace(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Post-ReLU-like activations: `|N(0,1)|` with exactly `round(R·len)` nonzeros.
pub fn synthetic_activations(
    shape: Vec<usize>,
    nonzero_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f64>> {
    if !(nonzero_ratio > 0.0 && nonzero_ratio <= 1.0) {
        return Err(Error::Parameter(format!(
            "nonzero ratio must be in (0, 1], got {nonzero_ratio}"
        )));
    }
    let len: usize = shape.iter().product();
    let keep = ((nonzero_ratio * len as f64).round() as usize).max(1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let mut data = vec![0.0; len];
    for &i in &order[..keep] {
        let v: f64 = rng.sample(StandardNormal);
        data[i] = v.abs().max(f64::MIN_POSITIVE);
    }
    Tensor::new(shape, data)
}

/// Per-weight exact sigma over the valid `(sample, output position)` pairs.
fn per_weight_exact_sigma(
    case: &StudyCase,
    acts: &Tensor<f64>,
    loss: &Tensor<f64>,
) -> Result<Vec<f64>> {
    let g = &case.geometry;
    let spec = g.spec();
    let (oh, ow) = spec.output_hw(g.height, g.width)?;
    let (n, c_in, k_out, kk) = (case.batch, g.in_channels, g.out_channels, g.kernel);
    let a = acts.data();
    let l = loss.data();
    let mut sigmas = Vec::with_capacity(k_out * c_in * kk * kk);
    for k in 0..k_out {
        for c in 0..c_in {
            for i in 0..kk {
                for j in 0..kk {
                    let mut lv = Vec::new();
                    let mut mv = Vec::new();
                    for b in 0..n {
                        for y in 0..oh {
                            let Some(ih) = spec.input_coord(y, i, g.height) else {
                                continue;
                            };
                            for x in 0..ow {
                                let Some(iw) = spec.input_coord(x, j, g.width) else {
                                    continue;
                                };
                                lv.push(l[((b * k_out + k) * oh + y) * ow + x]);
                                let av = a[((b * c_in + c) * g.height + ih) * g.width + iw];
                                mv.push(if case.preserve_zeros && av == 0.0 {
                                    0.0
                                } else {
                                    1.0
                                });
                            }
                        }
                    }
                    let pairs = lv.len() / n;
                    let losses = Tensor::new(vec![n, pairs], lv)?;
                    let mask = Tensor::new(vec![n, pairs], mv)?;
                    sigmas.push(exact_sigma(&losses, case.eb, Some(&mask))?);
                }
            }
        }
    }
    Ok(sigmas)
}

/// Runs `trials` independent error injections on one fixed activation/loss
/// draw. Losses come from their own stream, so cases that share a seed and
/// differ only in sparsity see the same loss tensor. Each trial differences
/// real backward passes; trials run in parallel with per-trial sub-seeds and
/// give identical results with or without threading.
pub fn run_conv_study(case: &StudyCase) -> Result<StudyOutcome> {
    if case.batch == 0 || case.trials == 0 {
        return Err(Error::Parameter("batch and trials must be positive".into()));
    }
    if !(case.eb.is_finite() && case.eb > 0.0) {
        return Err(Error::Parameter(format!(
            "error bound must be positive, got {}",
            case.eb
        )));
    }
    let g = &case.geometry;
    let spec = g.spec();
    let (oh, ow) = spec.output_hw(g.height, g.width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(case.seed, 0));
    let acts = synthetic_activations(
        vec![case.batch, g.in_channels, g.height, g.width],
        case.nonzero_ratio,
        &mut rng,
    )?;
    let mut loss_rng = ChaCha8Rng::seed_from_u64(sub_seed(case.seed, 1));
    let loss = Tensor::from_fn(vec![case.batch, g.out_channels, oh, ow], |_| {
        laplace(&mut loss_rng, 1.0)
    })?;

    let clean = conv2d_backward_weights(&acts, &loss, &spec)?;
    let sigmas = per_weight_exact_sigma(case, &acts, &loss)?;
    if sigmas.iter().any(|&s| s <= 0.0) {
        return Err(Error::Numerical(
            "a weight receives no error-carrying pairs".into(),
        ));
    }

    let trial_seed = sub_seed(case.seed, u64::MAX);
    let errors: Vec<Vec<f64>> = par::map_range(case.trials, |t| {
        let noisy = inject_uniform_error(
            &acts,
            case.eb,
            case.preserve_zeros,
            sub_seed(trial_seed, t as u64),
        )
        .and_then(|a| conv2d_backward_weights(&a, &loss, &spec))
        .expect("shapes validated above");
        noisy
            .data()
            .iter()
            .zip(clean.data())
            .map(|(p, q)| p - q)
            .collect()
    });

    let count = (case.trials * sigmas.len()) as f64;
    let raw_sq: f64 = errors.iter().flatten().map(|e| e * e).sum();
    let raw_mean: f64 = errors.iter().flatten().sum::<f64>() / count;
    let normalized: Vec<f64> = errors
        .iter()
        .flat_map(|trial| trial.iter().zip(&sigmas).map(|(e, s)| e / s))
        .collect();
    let exact_rms = (sigmas.iter().map(|s| s * s).sum::<f64>() / sigmas.len() as f64).sqrt();

    Ok(StudyOutcome {
        case: *case,
        measured_nonzero_ratio: acts.nonzero_ratio()?,
        mean_abs_loss: batch_mean_loss_magnitude(&loss)?,
        max_abs_loss: batch_max_loss_magnitude(&loss)?,
        exact_sigma: exact_rms,
        empirical_sigma: (raw_sq / count - raw_mean * raw_mean).max(0.0).sqrt(),
        normalized: distribution_report(&normalized, 1.0, Some(case.seed))?,
    })
}
