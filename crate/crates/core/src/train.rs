//! Datasets, Adam training of MLP Sumformers, metrics and the latent
//! dimension sweep.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::multisym::latent_dimension;
use crate::sumformer::SumformerModel;
use crate::tape::Tape;
use crate::targets::TargetFunction;
use crate::tensor::Matrix;

/// Validation error is recorded every this many epochs (and at epoch 0).
pub const VALIDATION_EVERY: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    /// Inputs and targets of the given indices stacked row-wise.
    pub fn stacked(&self, indices: &[usize]) -> Result<(Matrix, Matrix)> {
        let stack = |ms: &[Matrix]| {
            let rows: Vec<&[f64]> = indices.iter().flat_map(|&i| ms[i].row_iter()).collect();
            Matrix::from_rows(&rows)
        };
        Ok((stack(&self.inputs)?, stack(&self.targets)?))
    }
}

/// `count` sequences uniform in `[0,1)^{n×d}`; the first
/// `round(count · split_fraction)` of a seeded shuffle form the training split.
pub fn generate_dataset(
    target: &TargetFunction,
    n: usize,
    d: usize,
    count: usize,
    split_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if count < 2 || !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "need count ≥ 2 and 0 < split < 1, got {count} and {split_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Matrix> = (0..count)
        .map(|_| Matrix::from_fn(n, d, |_, _| rng.random::<f64>()))
        .collect();
    let targets = inputs.iter().map(|x| target.eval(x)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let n_train = ((count as f64 * split_fraction).round() as usize).clamp(1, count - 1);
    let validation = order.split_off(n_train);
    Ok(Dataset {
        n,
        d,
        inputs,
        targets,
        train: order,
        validation,
        seed,
    })
}

/// `‖pred − truth‖₂ / ‖truth‖₂` over all entries.
pub fn relative_l2_error(pred: &[Matrix], truth: &[Matrix]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err(
            "relative_l2_error",
            format!("{} predictions for {} references", pred.len(), truth.len()),
        ));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() {
            return Err(shape_err("relative_l2_error", "prediction shape differs"));
        }
        for (a, b) in p.data().iter().zip(t.data()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    if den == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sequences per step; `None` means full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: Some(DEFAULT_BATCH_SIZE),
            seed: 0,
        }
    }
}

pub const DEFAULT_BATCH_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(epoch, validation relative L² error)` every [`VALIDATION_EVERY`] epochs.
    pub validation_curve: Vec<(usize, f64)>,
    /// Mean mini-batch MSE of each epoch, starting with epoch 1.
    pub train_loss: Vec<f64>,
    pub best_validation_error: f64,
    pub epochs: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

impl TrainReport {
    fn push_validation(&mut self, epoch: usize, err: f64) {
        self.validation_curve.push((epoch, err));
        if self.validation_curve.len() == 1 || err < self.best_validation_error {
            self.best_validation_error = err;
        }
    }
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, shapes: &[usize]) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            lr: config.lr,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w -= update;
            }
        }
    }
}

/// One optimizer step on the stacked batch; returns the batch MSE before the
/// step.
fn train_step(model: &mut SumformerModel, adam: &mut Adam, x: &Matrix, y: &Matrix, phi_rows: Option<&Matrix>, n: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape)?;
    let pred = model.forward_on_tape(&mut tape, &vars, x, phi_rows, n)?;
    let target = tape.constant(y.clone());
    let diff = tape.sub(pred, target)?;
    let loss = tape.mean_square(diff);
    let loss_value = tape.value(loss).get(0, 0);
    if !loss_value.is_finite() {
        return Ok(loss_value);
    }
    let grads = tape.gradient(loss)?;
    let gs: Vec<&Matrix> = vars
        .vars()
        .into_iter()
        .map(|v| grads.get(v).expect("registered parameter"))
        .collect();
    let mut params = model.trainable_mut();
    adam.step(&mut params, &gs);
    Ok(loss_value)
}

fn validation_error(model: &SumformerModel, x: &Matrix, y: &Matrix, n: usize) -> Result<f64> {
    let pred = model.forward_stacked(x, n)?;
    relative_l2_error(std::slice::from_ref(&pred), std::slice::from_ref(y))
}

/// Minimizes the mean squared error of `model` on the training split with
/// Adam. Deterministic given the model, the data and `config`.
pub fn train(model: &mut SumformerModel, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    if !model.is_trainable() {
        return Err(Error::Contract("model has no trainable ψ".into()));
    }
    if data.d != model.d {
        return Err(shape_err("train", format!("data d = {} for model d = {}", data.d, model.d)));
    }
    let n = data.n;
    let (val_x, val_y) = data.stacked(&data.validation)?;
    let shapes: Vec<usize> = model.trainable().iter().map(|m| m.data().len()).collect();
    let mut adam = Adam::new(config, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.batch_size.unwrap_or(data.train.len()).clamp(1, data.train.len());

    let mut report = TrainReport {
        validation_curve: Vec::new(),
        train_loss: Vec::with_capacity(config.epochs),
        best_validation_error: f64::INFINITY,
        epochs: config.epochs,
        seed: config.seed,
        config: config.clone(),
    };
    report.push_validation(0, validation_error(model, &val_x, &val_y, n)?);

    // Batches of a frozen monomial φ never change; cache them in full-batch mode.
    let mut order = data.train.clone();
    let full = if batch == order.len() {
        let (x, y) = data.stacked(&order)?;
        let phi = match &model.phi {
            crate::construction::PhiMap::Monomial { .. } => Some(model.phi.apply_rows(&x)?),
            _ => None,
        };
        Some((x, y, phi))
    } else {
        None
    };

    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut steps = 0usize;
        if let Some((x, y, phi)) = &full {
            total = train_step(model, &mut adam, x, y, phi.as_ref(), n)?;
            steps = 1;
        } else {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let (x, y) = data.stacked(chunk)?;
                total += train_step(model, &mut adam, &x, &y, None, n)?;
                steps += 1;
            }
        }
        let mean = total / steps as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_report: Box::new(report),
            });
        }
        report.train_loss.push(mean);
        if epoch % VALIDATION_EVERY == 0 {
            let err = validation_error(model, &val_x, &val_y, n)?;
            if !err.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_report: Box::new(report),
                });
            }
            report.push_validation(epoch, err);
        }
    }
    Ok(report)
}

/// Architecture and data settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub target: String,
    pub n: usize,
    pub d: usize,
    pub d_latent: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub points: usize,
    pub split: f64,
    pub train: TrainConfig,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            target: "cubic-rest".into(),
            n: 3,
            d: 2,
            d_latent: 32,
            hidden_layers: 5,
            hidden_units: 50,
            points: 2000,
            split: 0.8,
            train: TrainConfig::default(),
        }
    }
}

/// Builds the dataset and an MLP Sumformer from `seed` and trains it. The
/// dataset, the initialization and the batch order all derive from `seed`.
pub fn run_cell(target: &TargetFunction, spec: &RunSpec, seed: u64) -> Result<TrainReport> {
    let data = generate_dataset(target, spec.n, spec.d, spec.points, spec.split, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut model = SumformerModel::mlp(spec.d, spec.d_latent, spec.hidden_layers, spec.hidden_units, &mut rng)?;
    let config = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    train(&mut model, &data, &config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub d_prime: usize,
    pub seed: u64,
    pub best_val_err: f64,
    /// `C(n+d, d) − 1`, the latent width the continuous construction uses.
    pub dprime_formula: usize,
}

/// Trains one model per `(d, d', seed)`; cells run in parallel and rows come
/// back sorted by that key.
pub fn latent_sweep(
    target: &TargetFunction,
    base: &RunSpec,
    d_list: &[usize],
    dprime_list: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if d_list.is_empty() || dprime_list.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("sweep lists must be nonempty".into()));
    }
    let mut cells = Vec::new();
    for &d in d_list {
        for &dp in dprime_list {
            for &s in seeds {
                cells.push((d, dp, s));
            }
        }
    }
    cells.sort_unstable();
    cells.dedup();
    cells
        .par_iter()
        .map(|&(d, d_prime, seed)| {
            let spec = RunSpec {
                d,
                d_latent: d_prime,
                ..base.clone()
            };
            let report = run_cell(target, &spec, seed)?;
            Ok(SweepRow {
                d,
                d_prime,
                seed,
                best_val_err: report.best_validation_error,
                dprime_formula: latent_dimension(d, base.n)?,
            })
        })
        .collect()
}

/// Rows `epoch,split,metric,value`: validation relative L² and per-epoch
/// training MSE.
pub fn write_curve_csv(report: &TrainReport, out: impl Write) -> Result<()> {
    let mut rows: Vec<(usize, &str, &str, f64)> = report
        .validation_curve
        .iter()
        .map(|&(e, v)| (e, "validation", "relative_l2", v))
        .collect();
    rows.extend(
        report
            .train_loss
            .iter()
            .enumerate()
            .map(|(i, &v)| (i + 1, "train", "mse", v)),
    );
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut w = out;
    writeln!(w, "epoch,split,metric,value")?;
    for (e, split, metric, v) in rows {
        writeln!(w, "{e},{split},{metric},{v:e}")?;
    }
    Ok(())
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = out;
    writeln!(w, "d,d_prime,seed,best_val_err,dprime_formula")?;
    for r in rows {
        writeln!(w, "{},{},{},{:e},{}", r.d, r.d_prime, r.seed, r.best_val_err, r.dprime_formula)?;
    }
    Ok(())
}

/// Mean best error per `d'` (in the order of first appearance) and the number
/// of adjacent pairs where the mean increases.
pub fn sweep_trend(rows: &[SweepRow], d: usize) -> (Vec<(usize, f64)>, usize) {
    let mut means: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.d == d) {
        match means.iter_mut().find(|m| m.0 == r.d_prime) {
            Some(m) => {
                m.1 += r.best_val_err;
                m.2 += 1;
            }
            None => means.push((r.d_prime, r.best_val_err, 1)),
        }
    }
    means.sort_by_key(|m| m.0);
    let means: Vec<(usize, f64)> = means.into_iter().map(|(dp, s, c)| (dp, s / c as f64)).collect();
    let inversions = means.windows(2).filter(|w| w[1].1 > w[0].1).count();
    (means, inversions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{constant, cubic_rest};

    fn small_spec() -> RunSpec {
        RunSpec {
            d: 1,
            d_latent: 4,
            hidden_layers: 2,
            hidden_units: 8,
            points: 60,
            train: TrainConfig {
                epochs: 10,
                lr: 1e-2,
                batch_size: Some(8),
                ..TrainConfig::default()
            },
            ..RunSpec::default()
        }
    }

    #[test]
    fn dataset_split_and_determinism() {
        let t = cubic_rest();
        let a = generate_dataset(&t, 3, 2, 10, 0.8, 7).unwrap();
        assert_eq!((a.train.len(), a.validation.len()), (8, 2));
        assert!(a.train.iter().all(|i| !a.validation.contains(i)));
        assert_eq!(a, generate_dataset(&t, 3, 2, 10, 0.8, 7).unwrap());
        for (x, y) in a.inputs.iter().zip(&a.targets) {
            assert_eq!(&t.eval(x).unwrap(), y);
            assert!(x.data().iter().all(|v| (0.0..1.0).contains(v)));
        }
        assert!(generate_dataset(&t, 3, 2, 1, 0.8, 7).is_err());
        assert!(generate_dataset(&t, 3, 2, 10, 1.0, 7).is_err());
    }

    #[test]
    fn relative_error_examples() {
        let t = vec![Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap()];
        assert_eq!(relative_l2_error(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_l2_error(&[t[0].scale(2.0)], &t).unwrap(), 1.0);
        assert_eq!(relative_l2_error(&[Matrix::zeros(2, 2)], &t).unwrap(), 1.0);
        let z = vec![Matrix::zeros(2, 2)];
        assert!(matches!(relative_l2_error(&t, &z), Err(Error::ZeroNorm)));
    }

    #[test]
    fn zero_epochs_records_initial_error_only() {
        let spec = RunSpec {
            train: TrainConfig {
                epochs: 0,
                ..small_spec().train
            },
            ..small_spec()
        };
        let r = run_cell(&cubic_rest(), &spec, 1).unwrap();
        assert_eq!(r.validation_curve.len(), 1);
        assert!(r.train_loss.is_empty());
        let mut buf = Vec::new();
        write_curve_csv(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn training_is_reproducible_and_best_is_minimum() {
        let a = run_cell(&cubic_rest(), &small_spec(), 3).unwrap();
        let b = run_cell(&cubic_rest(), &small_spec(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.validation_curve.len(), 3);
        let min = a.validation_curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_validation_error, min);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let t = cubic_rest();
        let data = generate_dataset(&t, 3, 1, 20, 0.5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = SumformerModel::mlp(1, 3, 2, 6, &mut rng).unwrap();
        let before = model.clone();
        let config = TrainConfig {
            epochs: 1,
            lr: 0.0,
            batch_size: None,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &config).unwrap();
        let bits = |m: &SumformerModel| -> Vec<u64> {
            m.trainable().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&model), bits(&before));
    }

    #[test]
    fn constant_target_is_learned() {
        let spec = RunSpec {
            target: "constant".into(),
            d: 1,
            d_latent: 4,
            hidden_layers: 2,
            hidden_units: 16,
            points: 100,
            train: TrainConfig {
                epochs: 200,
                batch_size: Some(16),
                ..TrainConfig::default()
            },
            ..RunSpec::default()
        };
        let r = run_cell(&constant(1.0), &spec, 5).unwrap();
        assert!(r.best_validation_error <= 1e-2, "{}", r.best_validation_error);
        let windows = r.train_loss.windows(21).count();
        let good = r.train_loss.windows(21).filter(|w| w[20] <= w[0]).count();
        assert!(good as f64 >= 0.9 * windows as f64, "{good}/{windows}");
    }

    #[test]
    fn divergence_is_reported() {
        let t = cubic_rest();
        let data = generate_dataset(&t, 3, 1, 20, 0.5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = SumformerModel::mlp(1, 3, 2, 6, &mut rng).unwrap();
        let config = TrainConfig {
            epochs: 10,
            lr: f64::INFINITY,
            batch_size: None,
            ..TrainConfig::default()
        };
        match train(&mut model, &data, &config) {
            Err(Error::Diverged { last_report, .. }) => assert!(!last_report.validation_curve.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_cell_sweep_equals_run() {
        let spec = small_spec();
        let rows = latent_sweep(&cubic_rest(), &spec, &[1], &[4], &[11]).unwrap();
        let r = run_cell(&cubic_rest(), &spec, 11).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].best_val_err, r.best_validation_error);
        assert_eq!(rows[0].dprime_formula, 3);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn trend_counts_inversions() {
        let row = |dp, e| SweepRow {
            d: 1,
            d_prime: dp,
            seed: 0,
            best_val_err: e,
            dprime_formula: 3,
        };
        let (m, inv) = sweep_trend(&[row(8, 0.2), row(2, 0.5), row(32, 0.3), row(128, 0.1)], 1);
        assert_eq!(m.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 8, 32, 128]);
        assert_eq!(inv, 1);
    }
}
