use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tnsr, write_tnsr, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub learning_rate: f64,
    /// Momentum coefficient μ.
    pub momentum: f64,
    pub batch_size: usize,
    /// Multiply the learning rate by `gamma` every `every` iterations.
    pub lr_step: Option<(u64, f64)>,
}

impl Hyperparams {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.lr_step {
            Some((every, gamma)) if every > 0 => {
                self.learning_rate * gamma.powi((iteration / every) as i32)
            }
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar = f32> {
    pub weights: Vec<Tensor<T>>,
    pub momentum: Vec<Tensor<T>>,
    pub hyper: Hyperparams,
    pub iteration: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(weights: Vec<Tensor<T>>, hyper: Hyperparams) -> Self {
        let momentum = weights
            .iter()
            .map(|w| Tensor::zeros(w.shape().to_vec()).unwrap())
            .collect();
        TrainState {
            weights,
            momentum,
            hyper,
            iteration: 0,
        }
    }
}

/// Classic momentum: `m ← μ·m + g`, `w ← w − lr·m`.
pub fn sgd_momentum_step<T: Scalar>(state: &mut TrainState<T>, grads: &[Tensor<T>]) -> Result<()> {
    if grads.len() != state.weights.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} weights",
            grads.len(),
            state.weights.len()
        )));
    }
    let mu = T::cast_from(state.hyper.momentum);
    let lr = T::cast_from(state.hyper.lr_at(state.iteration));
    // Compute everything first so a failed step leaves the state untouched.
    let mut updates = Vec::with_capacity(grads.len());
    for ((w, m), g) in state.weights.iter().zip(&state.momentum).zip(grads) {
        m.check_same_shape(g)?;
        let numerical = |e: Error| Error::Numerical(format!("weight update: {e}"));
        let new_m = m.zip_map(g, |mv, gv| mu * mv + gv).map_err(numerical)?;
        let new_w = w
            .zip_map(&new_m, |wv, mv| wv - lr * mv)
            .map_err(numerical)?;
        updates.push((new_w, new_m));
    }
    for ((w, m), (nw, nm)) in state
        .weights
        .iter_mut()
        .zip(&mut state.momentum)
        .zip(updates)
    {
        *w = nw;
        *m = nm;
    }
    state.iteration += 1;
    Ok(())
}

/// Writes weights and momentum as `w{i}.tnsr` / `m{i}.tnsr` plus `state.txt`.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, (w, m)) in state.weights.iter().zip(&state.momentum).enumerate() {
        write_tnsr(w, std::fs::File::create(dir.join(format!("w{i}.tnsr")))?)?;
        write_tnsr(m, std::fs::File::create(dir.join(format!("m{i}.tnsr")))?)?;
    }
    let h = &state.hyper;
    let meta = format!(
        "iteration={}\nlearning_rate={}\nmomentum={}\nbatch_size={}\nparams={}\n",
        state.iteration,
        h.learning_rate,
        h.momentum,
        h.batch_size,
        state.weights.len()
    );
    std::fs::write(dir.join("state.txt"), meta)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, hyper: Hyperparams) -> Result<TrainState<f32>> {
    let meta = std::fs::read_to_string(dir.join("state.txt"))?;
    let field = |key: &str| -> Result<u64> {
        meta.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::format(0, format!("checkpoint state.txt missing {key}")))
    };
    let n = field("params")? as usize;
    let mut weights = Vec::with_capacity(n);
    let mut momentum = Vec::with_capacity(n);
    for i in 0..n {
        weights.push(read_tnsr(std::fs::File::open(
            dir.join(format!("w{i}.tnsr")),
        )?)?);
        momentum.push(read_tnsr(std::fs::File::open(
            dir.join(format!("m{i}.tnsr")),
        )?)?);
    }
    Ok(TrainState {
        weights,
        momentum,
        hyper,
        iteration: field("iteration")?,
    })
}
