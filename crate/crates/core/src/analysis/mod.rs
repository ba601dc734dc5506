//! Statistics of compression error propagated into weight gradients.
//!
//! The gradient error of one conv weight is `E = (1/N) Σ e·L`, a sum of
//! independent uniform activation errors `e ∈ [-eb, eb]` weighted by the
//! per-sample loss gradient `L`. Its exact standard deviation is
//! `sqrt(eb²/3 · Σ L²) / N`; the estimator `a · L̄ · √N · eb · √R` is the
//! cheap closed form the controller inverts.

pub mod study;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Coefficient of the sigma estimator used when no fitted value is supplied.
pub const DEFAULT_COEFFICIENT: f64 = 0.32;

pub const HISTOGRAM_BINS: usize = 41;
pub const HISTOGRAM_SPAN_SIGMAS: f64 = 5.0;

/// Derives an independent sub-seed for trial or worker `index`.
pub fn sub_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Adds i.i.d. `Uniform(-eb, eb)` noise to every element, leaving exact zeros
/// untouched when `preserve_zeros` is set.
pub fn inject_uniform_error<T: Scalar>(
    t: &Tensor<T>,
    eb: f64,
    preserve_zeros: bool,
    seed: u64,
) -> Result<Tensor<T>> {
    if !(eb.is_finite() && eb > 0.0) {
        return Err(Error::Parameter(format!(
            "error bound must be positive, got {eb}"
        )));
    }
    let dist = Uniform::new_inclusive(-eb, eb).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = t
        .data()
        .iter()
        .map(|&v| {
            // Draw for every element so the noise stream does not depend on
            // the zero pattern.
            let e = dist.sample(&mut rng);
            if preserve_zeros && v.is_zero() {
                v
            } else {
                T::cast_from(v.as_f64() + e)
            }
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Exact standard deviation of `(1/N) Σ e·L` for `losses [N, n]` under
/// independent `Uniform(-eb, eb)` errors. Positions where `mask` is zero carry
/// no error (preserved zeros).
pub fn exact_sigma<T: Scalar>(
    losses: &Tensor<T>,
    eb: f64,
    mask: Option<&Tensor<T>>,
) -> Result<f64> {
    if !(eb.is_finite() && eb > 0.0) {
        return Err(Error::Parameter(format!(
            "error bound must be positive, got {eb}"
        )));
    }
    let n = losses.shape()[0] as f64;
    let sum_sq: f64 = match mask {
        Some(m) => {
            m.check_same_shape(losses)?;
            losses
                .data()
                .iter()
                .zip(m.data())
                .filter(|(_, mv)| !mv.is_zero())
                .map(|(l, _)| l.as_f64().powi(2))
                .sum()
        }
        None => losses.data().iter().map(|l| l.as_f64().powi(2)).sum(),
    };
    Ok((eb * eb / 3.0 * sum_sq).sqrt() / n)
}

/// Loss magnitude fed to the estimator: the mean absolute gradient of the
/// batch-mean loss. For per-sample loss gradients `L` this is `mean|L| / N`.
pub fn batch_mean_loss_magnitude<T: Scalar>(per_sample_loss: &Tensor<T>) -> Result<f64> {
    let n = per_sample_loss.shape()[0] as f64;
    Ok(per_sample_loss.mean_abs()? / n)
}

/// Alternative magnitude: average over samples of each sample's largest
/// `|L|`, divided by `N` like [`batch_mean_loss_magnitude`].
pub fn batch_max_loss_magnitude<T: Scalar>(per_sample_loss: &Tensor<T>) -> Result<f64> {
    let n = per_sample_loss.shape()[0];
    if per_sample_loss.is_empty() {
        return Err(Error::Domain("empty loss".into()));
    }
    let per = per_sample_loss.len() / n;
    let total: f64 = per_sample_loss
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max))
        .sum();
    Ok(total / (n * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub predicted_sigma: f64,
    pub mean_abs_loss: f64,
    pub batch: usize,
    pub eb: f64,
    pub nonzero_ratio: f64,
    pub coefficient: f64,
}

/// `σ = a · L̄ · √N · eb · √R`.
pub fn predict_sigma(
    mean_abs_loss: f64,
    batch: usize,
    eb: f64,
    nonzero_ratio: f64,
    coefficient: f64,
) -> Result<SigmaEstimate> {
    let positive = |x: f64| x.is_finite() && x > 0.0;
    if !(positive(mean_abs_loss) && batch > 0 && positive(eb) && positive(coefficient))
        || !(nonzero_ratio > 0.0 && nonzero_ratio <= 1.0)
    {
        return Err(Error::Parameter(format!(
            "predict_sigma inputs out of domain: L={mean_abs_loss}, N={batch}, eb={eb}, R={nonzero_ratio}, a={coefficient}"
        )));
    }
    Ok(SigmaEstimate {
        predicted_sigma: coefficient
            * mean_abs_loss
            * (batch as f64).sqrt()
            * eb
            * nonzero_ratio.sqrt(),
        mean_abs_loss,
        batch,
        eb,
        nonzero_ratio,
        coefficient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub mean_abs_loss: f64,
    pub batch: usize,
    pub eb: f64,
    pub nonzero_ratio: f64,
    pub sigma: f64,
}

impl Observation {
    /// Regressor `L̄ · √N · eb · √R`.
    pub fn regressor(&self) -> f64 {
        self.mean_abs_loss * (self.batch as f64).sqrt() * self.eb * self.nonzero_ratio.sqrt()
    }
}

/// Least-squares coefficient through the origin: `a = Σ x·σ / Σ x²`.
pub fn fit_coefficient(observations: &[Observation]) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::DegenerateFit("no observations".into()));
    }
    if let Some(o) = observations.iter().find(|o| {
        !(o.regressor().is_finite()
            && o.regressor() >= 0.0
            && o.sigma.is_finite()
            && o.sigma >= 0.0)
    }) {
        return Err(Error::DegenerateFit(format!("invalid observation {o:?}")));
    }
    let sxx: f64 = observations.iter().map(|o| o.regressor().powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all regressors are zero".into()));
    }
    let sxy: f64 = observations.iter().map(|o| o.regressor() * o.sigma).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistributionReport {
    pub empirical_sigma: f64,
    pub within_one_sigma: f64,
    pub reference_sigma: f64,
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<u64>,
    pub sample_count: u64,
    pub seed: Option<u64>,
    /// Set when every error is identical (zero spread).
    pub degenerate: bool,
}

/// Empirical spread, the fraction within `±reference_sigma`, and a 41-bin
/// histogram over `±5·reference_sigma` (outside values go to the end bins).
pub fn distribution_report(
    errors: &[f64],
    reference_sigma: f64,
    seed: Option<u64>,
) -> Result<ErrorDistributionReport> {
    if errors.is_empty() {
        return Err(Error::Domain("empty error sample".into()));
    }
    if !(reference_sigma.is_finite() && reference_sigma > 0.0) {
        return Err(Error::Parameter(format!(
            "reference sigma must be positive, got {reference_sigma}"
        )));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let within = errors.iter().filter(|e| e.abs() <= reference_sigma).count() as f64 / n;

    let lo = -HISTOGRAM_SPAN_SIGMAS * reference_sigma;
    let width = 2.0 * HISTOGRAM_SPAN_SIGMAS * reference_sigma / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS)
        .map(|i| lo + i as f64 * width)
        .collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for e in errors {
        let bin = ((e - lo) / width)
            .floor()
            .clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize;
        counts[bin] += 1;
    }
    Ok(ErrorDistributionReport {
        empirical_sigma: var.sqrt(),
        within_one_sigma: within,
        reference_sigma,
        histogram_edges: edges,
        histogram_counts: counts,
        sample_count: errors.len() as u64,
        seed,
        degenerate: var == 0.0,
    })
}

impl ErrorDistributionReport {
    pub fn write_histogram_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["bin_lo", "bin_hi", "count"])?;
        for (i, c) in self.histogram_counts.iter().enumerate() {
            csv.write_record([
                format!("{:e}", self.histogram_edges[i]),
                format!("{:e}", self.histogram_edges[i + 1]),
                c.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn injection_examples() {
        let x = Tensor::<f64>::from_fn(vec![100], |i| i as f64 * 0.01).unwrap();
        let y = inject_uniform_error(&x, 1e-12, false, 1).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() <= 1e-12 + 1e-15);

        let z = Tensor::<f64>::zeros(vec![50]).unwrap();
        assert_eq!(inject_uniform_error(&z, 0.5, true, 2).unwrap(), z);

        assert!(matches!(
            inject_uniform_error(&x, 0.0, false, 0),
            Err(Error::Parameter(_))
        ));
        assert_eq!(
            inject_uniform_error(&x, 0.1, false, 9).unwrap(),
            inject_uniform_error(&x, 0.1, false, 9).unwrap()
        );
    }

    #[test]
    fn injected_error_std_is_eb_over_sqrt3() {
        let eb = 0.02;
        let x = Tensor::<f64>::zeros(vec![1_000_000]).unwrap();
        let y = inject_uniform_error(&x, eb, false, 5).unwrap();
        let var = y.data().iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        let expected = eb / 3f64.sqrt();
        assert!((var.sqrt() / expected - 1.0).abs() < 0.01);
    }

    #[test]
    fn exact_sigma_examples() {
        let one = Tensor::<f64>::new(vec![1, 1], vec![1.0]).unwrap();
        assert!((exact_sigma(&one, 0.3, None).unwrap() - 0.3 / 3f64.sqrt()).abs() < 1e-15);
        let zeros = Tensor::<f64>::zeros(vec![4, 8]).unwrap();
        assert_eq!(exact_sigma(&zeros, 0.1, None).unwrap(), 0.0);
        assert!(exact_sigma(&one, -1.0, None).is_err());
    }

    #[test]
    fn exact_sigma_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, fan) = (4, 8);
        let losses = Tensor::<f64>::from_fn(vec![n, fan], |_| rng.sample(StandardNormal)).unwrap();
        let eb = 1e-3;
        let exact = exact_sigma(&losses, eb, None).unwrap();

        let zeros = Tensor::<f64>::zeros(vec![n, fan]).unwrap();
        let trials = 100_000;
        let draws: Vec<f64> = (0..trials)
            .map(|t| {
                let e = inject_uniform_error(&zeros, eb, false, sub_seed(42, t)).unwrap();
                e.data()
                    .iter()
                    .zip(losses.data())
                    .map(|(e, l)| e * l)
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        let mc = distribution_report(&draws, exact, None)
            .unwrap()
            .empirical_sigma;
        assert!((mc / exact - 1.0).abs() < 0.03, "mc {mc} exact {exact}");
    }

    #[test]
    fn predict_sigma_examples() {
        let s = predict_sigma(0.01, 256, 1e-4, 1.0, DEFAULT_COEFFICIENT).unwrap();
        assert!((s.predicted_sigma - 5.12e-6).abs() < 1e-18);
        let quarter = predict_sigma(0.01, 256, 1e-4, 0.25, DEFAULT_COEFFICIENT).unwrap();
        assert!((s.predicted_sigma / quarter.predicted_sigma - 2.0).abs() < 1e-12);
        assert!(predict_sigma(0.01, 256, 1e-4, 0.0, 0.32).is_err());
        assert!(predict_sigma(0.01, 0, 1e-4, 1.0, 0.32).is_err());
        assert!(predict_sigma(-1.0, 8, 1e-4, 1.0, 0.32).is_err());
    }

    #[test]
    fn predict_sigma_is_multiplicative() {
        let base = predict_sigma(0.3, 16, 1e-3, 0.5, 0.4)
            .unwrap()
            .predicted_sigma;
        let twice_eb = predict_sigma(0.3, 16, 2e-3, 0.5, 0.4)
            .unwrap()
            .predicted_sigma;
        let four_n = predict_sigma(0.3, 64, 1e-3, 0.5, 0.4)
            .unwrap()
            .predicted_sigma;
        assert!((twice_eb / base - 2.0).abs() < 1e-12);
        assert!((four_n / base - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fit_examples() {
        let obs: Vec<Observation> = [
            (0.1, 8, 1e-3, 1.0),
            (0.02, 32, 1e-4, 0.5),
            (0.5, 128, 1e-2, 0.25),
        ]
        .iter()
        .map(|&(l, n, eb, r)| {
            let mut o = Observation {
                mean_abs_loss: l,
                batch: n,
                eb,
                nonzero_ratio: r,
                sigma: 0.0,
            };
            o.sigma = 0.32 * o.regressor();
            o
        })
        .collect();
        assert!((fit_coefficient(&obs).unwrap() - 0.32).abs() < 1e-15);

        let single = Observation {
            mean_abs_loss: 2.0,
            batch: 1,
            eb: 1.0,
            nonzero_ratio: 1.0,
            sigma: 1.0,
        };
        assert_eq!(fit_coefficient(&[single]).unwrap(), 0.5);

        let zero = Observation {
            mean_abs_loss: 0.0,
            ..single
        };
        assert!(matches!(
            fit_coefficient(&[zero]),
            Err(Error::DegenerateFit(_))
        ));
        assert!(fit_coefficient(&[]).is_err());
    }

    #[test]
    fn single_sample_coefficient_is_one_over_sqrt3() {
        // N = 1, one loss element: the gradient error is e·L.
        let mut obs = Vec::new();
        for (k, (l, eb)) in [(0.5, 1e-3), (2.0, 1e-2), (0.1, 1e-4), (1.0, 5e-3)]
            .into_iter()
            .enumerate()
        {
            let losses = Tensor::<f64>::new(vec![1, 1], vec![l]).unwrap();
            let zeros = Tensor::<f64>::zeros(vec![1, 1]).unwrap();
            let draws: Vec<f64> = (0..50_000)
                .map(|t| {
                    inject_uniform_error(&zeros, eb, false, sub_seed(k as u64, t)).unwrap()[0] * l
                })
                .collect();
            let sigma = distribution_report(&draws, 1.0, None)
                .unwrap()
                .empirical_sigma;
            let exact = exact_sigma(&losses, eb, None).unwrap();
            assert!((sigma / exact - 1.0).abs() < 0.02);
            obs.push(Observation {
                mean_abs_loss: l,
                batch: 1,
                eb,
                nonzero_ratio: 1.0,
                sigma,
            });
        }
        let a = fit_coefficient(&obs).unwrap();
        assert!((a - 1.0 / 3f64.sqrt()).abs() < 0.01, "a = {a}");
    }

    #[test]
    fn report_on_normal_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal: Vec<f64> = (0..1_000_000).map(|_| rng.sample(StandardNormal)).collect();
        let r = distribution_report(&normal, 1.0, Some(3)).unwrap();
        assert!(
            (r.within_one_sigma - 0.682).abs() < 0.005,
            "{}",
            r.within_one_sigma
        );
        assert_eq!(r.histogram_counts.iter().sum::<u64>(), r.sample_count);
        assert_eq!(r.histogram_edges.len(), HISTOGRAM_BINS + 1);

        let uniform: Vec<f64> = (0..1_000_000)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let r = distribution_report(&uniform, 1.0 / 3f64.sqrt(), None).unwrap();
        assert!((r.within_one_sigma - 0.577).abs() < 0.005);

        let flat = distribution_report(&[0.0; 10], 1.0, None).unwrap();
        assert_eq!(flat.empirical_sigma, 0.0);
        assert!(flat.degenerate);
        assert!(matches!(
            distribution_report(&[], 1.0, None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn report_json_field_names() {
        let r = distribution_report(&[0.1, -0.2, 0.3], 0.2, Some(7)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in [
            "empirical_sigma",
            "within_one_sigma",
            "histogram_edges",
            "histogram_counts",
            "sample_count",
            "seed",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let mut buf = Vec::new();
        r.write_histogram_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), HISTOGRAM_BINS + 1);
    }
}
