//! Finite-difference gradient checks shared by the test targets.

#![allow(dead_code)]

use actsz::nn::layers::*;
use actsz::nn::{KeepActivations, LayerSpec, Network};
use actsz::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    numeric_grad_with(x, STEP, f)
}

pub fn numeric_grad_with(x: &Tensor<f64>, step: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let bump = |d: f64| {
                let mut v = x.clone().into_data();
                v[i] += d;
                f(&Tensor::new(x.shape().to_vec(), v).unwrap())
            };
            (bump(step) - bump(-step)) / (2.0 * step)
        })
        .collect()
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Values at least `gap` away from zero, so ReLU kinks are not crossed.
fn away_from_zero(shape: Vec<usize>, gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .unwrap()
}

/// Distinct values spaced well beyond the step, so pool argmaxes are stable.
fn spaced(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..len).collect();
    use rand::seq::SliceRandom;
    order.shuffle(rng);
    Tensor::new(shape, order.iter().map(|&k| k as f64 * 0.01).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `(name, relative error)` for every layer backward and the full network.
pub fn all_checks() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    // conv2d on a 2x3x5x5 instance, both with and without padding/stride.
    for spec in [
        ConvSpec::square(3, 4, 3, 1, 0),
        ConvSpec::square(3, 2, 3, 2, 1),
    ] {
        let x = random(vec![2, 3, 5, 5], &mut rng);
        let w = random(spec.weight_shape(), &mut rng);
        let y = conv2d_forward(&x, &w, &spec).unwrap();
        let r = random(y.shape().to_vec(), &mut rng);
        let n = x.shape()[0] as f64;
        let g = conv2d_backward(&x, &w, &r, &spec).unwrap();
        let nw = numeric_grad(&w, |w| dot(&conv2d_forward(&x, w, &spec).unwrap(), &r) / n);
        out.push((
            format!("conv2d weights s{} p{}", spec.stride, spec.padding),
            relative_error(g.weights.data(), &nw),
        ));
        let nx = numeric_grad(&x, |x| dot(&conv2d_forward(x, &w, &spec).unwrap(), &r));
        out.push((
            format!("conv2d input s{} p{}", spec.stride, spec.padding),
            relative_error(g.input.data(), &nx),
        ));
    }

    let x = away_from_zero(vec![2, 3, 4, 4], 0.05, &mut rng);
    let r = random(x.shape().to_vec(), &mut rng);
    let g = relu_backward(&x, &r).unwrap();
    let nx = numeric_grad(&x, |x| dot(&relu_forward(x).unwrap(), &r));
    out.push(("relu".into(), relative_error(g.data(), &nx)));

    let spec = PoolSpec {
        window: 2,
        stride: 2,
    };
    let x = spaced(vec![2, 2, 4, 6], &mut rng);
    let (y, arg) = maxpool_forward(&x, &spec).unwrap();
    let r = random(y.shape().to_vec(), &mut rng);
    let g = maxpool_backward(&r, &arg, x.shape()).unwrap();
    let nx = numeric_grad(&x, |x| dot(&maxpool_forward(x, &spec).unwrap().0, &r));
    out.push(("maxpool".into(), relative_error(g.data(), &nx)));

    let x = random(vec![3, 7], &mut rng);
    let w = random(vec![4, 7], &mut rng);
    let b = random(vec![4], &mut rng);
    let r = random(vec![3, 4], &mut rng);
    let g = fc_backward(&x, &w, &r).unwrap();
    let nw = numeric_grad(&w, |w| dot(&fc_forward(&x, w, &b).unwrap(), &r) / 3.0);
    let nb = numeric_grad(&b, |b| dot(&fc_forward(&x, &w, b).unwrap(), &r) / 3.0);
    let nx = numeric_grad(&x, |x| dot(&fc_forward(x, &w, &b).unwrap(), &r));
    out.push(("fc weights".into(), relative_error(g.weights.data(), &nw)));
    out.push(("fc bias".into(), relative_error(g.bias.data(), &nb)));
    out.push(("fc input".into(), relative_error(g.input.data(), &nx)));

    let logits = random(vec![4, 5], &mut rng);
    let labels = [0, 3, 4, 1];
    let (_, g) = softmax_xent(&logits, &labels).unwrap();
    let per_sample: Vec<f64> = g.data().iter().map(|v| v / 4.0).collect();
    let nl = numeric_grad(&logits, |l| softmax_xent(l, &labels).unwrap().0);
    out.push(("softmax_xent".into(), relative_error(&per_sample, &nl)));

    out.extend(network_check());
    out
}

/// Smallest distance of any ReLU input from zero and any pooling window's
/// top value from its runner-up along a forward pass.
fn kink_margin(net: &Network, params: &[Tensor<f64>], x: &Tensor<f64>) -> f64 {
    let mut a = x.clone();
    let mut margin = f64::INFINITY;
    for (i, layer) in net.layers().iter().enumerate() {
        let p = &params[net.param_range(i)];
        a = match layer {
            LayerSpec::Conv2d(c) => conv2d_forward(&a, &p[0], c).unwrap(),
            LayerSpec::Relu => {
                margin = a.data().iter().fold(margin, |m, v| m.min(v.abs()));
                relu_forward(&a).unwrap()
            }
            LayerSpec::MaxPool(s) => {
                let &[n, c, h, w] = a.shape() else {
                    unreachable!()
                };
                let (oh, ow) = s.output_hw(h, w).unwrap();
                for plane in 0..n * c {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut vals: Vec<f64> = (0..s.window)
                                .flat_map(|i| {
                                    (0..s.window)
                                        .map(move |j| (y * s.stride + i, xo * s.stride + j))
                                })
                                .filter(|&(r, q)| r < h && q < w)
                                .map(|(r, q)| a[plane * h * w + r * w + q])
                                .collect();
                            vals.sort_by(|p, q| q.partial_cmp(p).unwrap());
                            // Post-ReLU zeros tie exactly and stay tied.
                            if vals.len() > 1 && vals[0] > 0.0 {
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
                maxpool_forward(&a, s).unwrap().0
            }
            LayerSpec::FullyConnected { .. } => fc_forward(&a, &p[0], &p[1]).unwrap(),
            LayerSpec::SoftmaxXent => a,
        };
    }
    margin
}

/// Every parameter of a 2-conv + pool + fc network against the batch-mean
/// loss, on the first seeded instance that keeps clear of ReLU and pooling
/// kinks by a wide margin relative to the step.
pub fn network_check() -> Vec<(String, f64)> {
    let net = Network::parse(
        "conv2d in=1 out=2 kernel=3 padding=1\nrelu\nmaxpool window=2\n\
         conv2d in=2 out=3 kernel=3 padding=1\nrelu\nmaxpool window=2\n\
         fc in=3 out=3\nsoftmax_xent\n",
        vec![1, 4, 4],
    )
    .unwrap();
    let labels = [0, 2];
    let (params, x) = (0..10_000u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = net.init_params::<f64>(seed);
            let x = random(vec![2, 1, 4, 4], &mut rng);
            (params, x)
        })
        .find(|(p, x)| kink_margin(&net, p, x) > 50.0 * STEP)
        .expect("a kink-free instance exists");
    let out = net
        .forward_backward(&params, &x, &labels, &mut KeepActivations)
        .unwrap();
    (0..params.len())
        .map(|p| {
            let numeric = numeric_grad(&params[p], |w| {
                let mut ps = params.clone();
                ps[p] = w.clone();
                net.loss(&ps, &x, &labels).unwrap()
            });
            (
                format!("network param {p} {:?}", params[p].shape()),
                relative_error(out.grads[p].data(), &numeric),
            )
        })
        .collect()
}
