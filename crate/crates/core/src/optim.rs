//! Adam, mini-batch training with validation early stopping.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{lsd, GradientBundle, ModelParams, Network};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 14,
            max_epochs: 700,
            patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "train.learning_rate",
                "must be finite and >= 0",
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(Error::config("train.beta1", "must lie in (0, 1)"));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("train.beta2", "must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("train.epsilon", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be >= 1"));
        }
        Ok(())
    }
}

/// First/second moment estimates over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::mismatch(
            "adam gradient length",
            params.len(),
            grads.len(),
        ));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::mismatch(
            "adam state length",
            params.len(),
            state.m.len(),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// One training pair: the sparse input and the dense target it should map to.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: DMatrix<f64>,
    pub target: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_lsd: f64,
    pub val_lsd: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation LSD seen (the initial parameters
    /// when no epoch ran).
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

/// Mean per-sample LSD of the model over `samples`.
pub fn mean_lsd(network: &Network, params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Training(
            "cannot evaluate an empty sample set".into(),
        ));
    }
    let losses = samples
        .par_iter()
        .map(|s| lsd(&s.target, &network.forward(params, &s.input)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean LSD and mean gradient over a batch. Per-sample work may run in
/// parallel; the reduction is a sum in sample order.
pub fn batch_loss_and_grad(
    network: &Network,
    params: &ModelParams,
    batch: &[&Sample],
) -> Result<(f64, GradientBundle)> {
    let per_sample = batch
        .par_iter()
        .map(|s| network.loss_and_grad(params, &s.input, &s.target))
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradientBundle::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        total.add_assign(g)?;
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Trains with Adam on shuffled mini-batches and keeps the parameters with the
/// best validation LSD. Stops after `max_epochs` or `patience` epochs without
/// a strict improvement.
pub fn train(
    network: &Network,
    init: ModelParams,
    train_set: &[Sample],
    validation_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    if validation_set.is_empty() {
        return Err(Error::Training("validation set is empty".into()));
    }
    let mut params = init;
    let mut flat = params.to_flat();
    let mut state = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut stale = 0;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_loss_and_grad(network, &params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut flat, &grads.to_flat(), &mut state, cfg)?;
            params.set_flat(&flat)?;
        }
        let train_lsd = loss_sum / train_set.len() as f64;
        let val_lsd = mean_lsd(network, &params, validation_set)?;
        if !val_lsd.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        let record = EpochRecord {
            epoch,
            train_lsd,
            val_lsd,
        };
        on_epoch(&record);
        history.push(record);
        if val_lsd < best_val {
            best_val = val_lsd;
            best = params.clone();
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        steps: state.step_count,
    })
}

/// Tab-separated history: `epoch  train_lsd  val_lsd`.
pub fn format_history(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\ttrain_lsd\tval_lsd\n");
    for r in history {
        out.push_str(&format!("{}\t{}\t{}\n", r.epoch, r.train_lsd, r.val_lsd));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        fibonacci_grid, split_known, subject_seed, synth_subject, Ear, FrequencyAxis, SynthParams,
    };
    use crate::network::Architecture;
    use crate::sh::ShtConfig;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, &cfg(0.1)).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn adam_one_step_trace() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg(0.1)).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((p[0] - (-0.099_999_999)).abs() <= 1e-12);
        assert!((s.m[0] - 0.1).abs() < 1e-15);
        assert!((s.v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn adam_two_step_trace_on_quadratic() {
        // loss theta^2 / 2, gradient theta, starting at 1
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        let c = cfg(0.1);
        let g = p[0];
        adam_step(&mut p, &[g], &mut s, &c).unwrap();
        assert!((p[0] - 0.900_000_001).abs() <= 1e-12);
        let g = p[0];
        adam_step(&mut p, &[g], &mut s, &c).unwrap();
        assert!((p[0] - 0.800_412_229_712_337_4).abs() <= 1e-12);
        assert!(p[0].abs() < 0.9 && p[0].abs() < 1.0);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut s, &cfg(0.1)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            adam_step(&mut p, &[1.0, f64::NAN], &mut s, &cfg(0.1)),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, vec![0.0; 2]);
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn config_validation_names_fields() {
        let c = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "train.beta1"));
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(
            matches!(c.validate(), Err(Error::Config { field, .. }) if field == "train.batch_size")
        );
        let c = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(
            matches!(c.validate(), Err(Error::Config { field, .. }) if field == "train.patience")
        );
    }

    /// Tiny model plus synthetic samples for `subjects` (both ears each).
    fn setup(
        subjects: &[u32],
        arch_orders: (usize, usize, usize),
    ) -> (Network, ModelParams, Vec<Sample>) {
        let dense = fibonacci_grid(48).unwrap();
        let split = split_known(&dense, 20, 1, arch_orders.0, &ShtConfig::default()).unwrap();
        let freqs = FrequencyAxis::linear(200.0, 12000.0, 3).unwrap();
        let mut arch = Architecture::new(3);
        (arch.n_map_in, arch.n_conv, arch.n_map_out) = arch_orders;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params =
            ModelParams::initialize(&arch, split.known.clone(), split.dense.clone(), &mut rng)
                .unwrap();
        let net = Network::new(&params, &ShtConfig::default()).unwrap();
        let samples = subjects
            .iter()
            .flat_map(|&id| Ear::BOTH.map(|ear| (id, ear)))
            .map(|(id, ear)| {
                let f = synth_subject(
                    subject_seed(5, id, ear),
                    &freqs,
                    3,
                    split.dense.clone(),
                    &SynthParams::default(),
                    id,
                    ear,
                )
                .unwrap();
                Sample {
                    input: f.values.select_rows(&split.known_indices),
                    target: f.values,
                }
            })
            .collect();
        (net, params, samples)
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_history_flat() {
        let (net, params, samples) = setup(&[1, 2], (2, 2, 2));
        let c = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 4,
            patience: 10,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let out = train(
            &net,
            params.clone(),
            &samples[..2],
            &samples[2..],
            &c,
            |_| {},
        )
        .unwrap();
        assert_eq!(out.best, params);
        assert_eq!(out.history.len(), 4);
        let first = out.history[0];
        for r in &out.history {
            assert_eq!(r.val_lsd, first.val_lsd);
            assert!((r.train_lsd - first.train_lsd).abs() < 1e-12);
        }
        assert_eq!(out.best_epoch, Some(1));
        assert_eq!(out.steps, 4);
    }

    #[test]
    fn patience_one_with_flat_validation_stops_after_two_epochs() {
        let (net, params, samples) = setup(&[1, 2], (2, 2, 2));
        let c = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 100,
            patience: 1,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let out = train(&net, params, &samples[..2], &samples[2..], &c, |_| {
            seen += 1
        })
        .unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(seen, 2);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (net, params, samples) = setup(&[1, 2], (2, 2, 2));
        let c = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(
            &net,
            params.clone(),
            &samples[..2],
            &samples[2..],
            &c,
            |_| {},
        )
        .unwrap();
        assert_eq!(out.best, params);
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, None);
        assert_eq!(format_history(&out.history), "epoch\ttrain_lsd\tval_lsd\n");
    }

    #[test]
    fn empty_sets_are_rejected() {
        let (net, params, samples) = setup(&[1], (2, 2, 2));
        let c = TrainConfig::default();
        assert!(matches!(
            train(&net, params.clone(), &[], &samples, &c, |_| {}),
            Err(Error::Training(_))
        ));
        assert!(matches!(
            train(&net, params, &samples, &[], &c, |_| {}),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let (net, params, samples) = setup(&[1, 2], (2, 2, 2));
        let c = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 5,
            batch_size: 3,
            seed: 17,
            ..TrainConfig::default()
        };
        let a = train(&net, params.clone(), &samples, &samples, &c, |_| {}).unwrap();
        let b = train(&net, params, &samples, &samples, &c, |_| {}).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let (net, params, samples) = setup(&[1, 2], (2, 2, 2));
        let refs: Vec<&Sample> = samples.iter().collect();
        let (loss, g) = batch_loss_and_grad(&net, &params, &refs).unwrap();
        let mut expect = vec![0.0; params.num_params()];
        let mut expect_loss = 0.0;
        for s in &samples {
            let (l, gs) = net.loss_and_grad(&params, &s.input, &s.target).unwrap();
            expect_loss += l / samples.len() as f64;
            for (e, v) in expect.iter_mut().zip(gs.to_flat()) {
                *e += v / samples.len() as f64;
            }
        }
        assert!((loss - expect_loss).abs() < 1e-12);
        for (a, b) in g.to_flat().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_model_overfits_two_subjects() {
        let (net, params, samples) = setup(&[1, 2], (2, 4, 4));
        let c = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 200,
            patience: 200,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&net, params, &samples, &samples, &c, |_| {}).unwrap();
        let first = out.history[0].train_lsd;
        let best = out
            .history
            .iter()
            .map(|r| r.train_lsd)
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 0.5 * first, "train LSD {first} -> {best}");
    }

    #[test]
    fn history_format() {
        let h = [EpochRecord {
            epoch: 1,
            train_lsd: 2.5,
            val_lsd: 3.0,
        }];
        assert_eq!(format_history(&h), "epoch\ttrain_lsd\tval_lsd\n1\t2.5\t3\n");
    }
}
