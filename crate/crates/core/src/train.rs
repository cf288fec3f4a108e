//! Adam, early stopping and the epoch loop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedSentence;
use crate::embed::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::{predict_all, token_prf};
use crate::io::read_to_string;
use crate::model::{DepBert, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement before stopping.
    pub tolerance: usize,
    pub seed: u64,
    /// Hard cap on optimizer steps; 0 disables it.
    pub max_steps: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Minimum training-set frequency for a form to get its own id.
    pub min_count: usize,
    /// Record zero wall-clock seconds so histories are byte-stable.
    pub deterministic: bool,
    /// Worker threads for validation scoring.
    pub threads: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            tolerance: 10,
            seed: 0,
            max_steps: 0,
            grad_clip: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            min_count: 1,
            deterministic: true,
            threads: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Batch size and epoch budget used for the original full-scale runs.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 128,
            max_epochs: 1000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.tolerance == 0 || self.threads == 0 {
            return fail("batch_size, max_epochs, tolerance and threads must be positive");
        }
        if self.tolerance >= self.max_epochs {
            return fail("tolerance must be smaller than max_epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("beta1/beta2 must lie in [0, 1) and adam_eps must be positive");
        }
        if self.grad_clip < 0.0 {
            return fail("grad_clip must be non-negative");
        }
        self.model.validate()
    }

    pub fn to_toml(&self) -> String {
        let body = toml::to_string(self).expect("config serialises");
        format!(
            "# Resolved training configuration.\n# Full-scale reference values: batch_size = 128, max_epochs = 1000.\n{body}"
        )
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overlays a TOML or JSON file (chosen by extension) on `base`. Keys
    /// absent from the file keep the values in `base`; unknown keys are errors.
    pub fn load_over(base: &TrainConfig, path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let overlay: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let mut merged = serde_json::to_value(base)?;
        merge_json(&mut merged, overlay);
        serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Bias-corrected Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update. Gradients are checked for NaN/inf before anything is
    /// modified, so a failed step leaves parameters and moments untouched.
    pub fn update(&mut self, params: &mut [Tensor], names: &[String], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::precondition("adam_step", "parameter, gradient and state counts differ"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            let bad = g.data().iter().filter(|x| !x.is_finite()).count();
            if bad > 0 {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFinite { name, count: bad });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over a loss that should decrease.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    tolerance: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(tolerance: usize) -> Self {
        EarlyStopping {
            tolerance,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.tolerance {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there is no validation set.
    pub val_loss: f64,
    pub val_exact_match: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_exact_match,val_f1,seconds\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:.10},{:.10},{:.6},{:.6},{:.3}",
            r.epoch, r.train_loss, r.val_loss, r.val_exact_match, r.val_f1, r.seconds
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest monitored loss.
    pub model: DepBert,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn manifest_metadata(&self, config: &TrainConfig) -> serde_json::Value {
        serde_json::json!({
            "seed": config.seed,
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "optimizer": {"name": "adam", "beta1": config.beta1, "beta2": config.beta2, "eps": config.adam_eps},
            "best_epoch": self.best_epoch,
            "best_loss": self.best_loss,
            "epochs_run": self.history.len(),
            "steps": self.steps,
        })
    }
}

/// Builds a vocabulary from `train_set` and trains a freshly initialised model.
pub fn train(config: &TrainConfig, train_set: &[AnnotatedSentence], val_set: &[AnnotatedSentence]) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::precondition("train", "training set is empty"));
    }
    let vocab = Vocabulary::build(train_set, config.min_count, config.model.max_len)?;
    let model = DepBert::new(config.model.clone(), vocab, config.seed)?;
    train_model(config, model, train_set, val_set)
}

/// Trains an already constructed model in place of its current weights.
pub fn train_model(
    config: &TrainConfig,
    mut model: DepBert,
    train_set: &[AnnotatedSentence],
    val_set: &[AnnotatedSentence],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::precondition("train", "training set is empty"));
    }
    if val_set.is_empty() {
        warn!("validation set is empty; early stopping monitors training loss");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let names = model.params().names().to_vec();
    let mut adam = AdamState::new(model.params().tensors(), config.beta1, config.beta2, config.adam_eps);
    let mut stopper = EarlyStopping::new(config.tolerance);
    let mut best = model.params().clone();
    let mut history = Vec::new();
    let mut steps = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&AnnotatedSentence> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = model.batch(&refs)?;
            let (loss, mut grads) = model.loss_and_grads(&batch)?;
            if config.grad_clip > 0.0 {
                clip_global_norm(&mut grads, config.grad_clip);
            }
            adam.update(model.params_mut().tensors_mut(), &names, &grads, config.learning_rate)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
            if config.max_steps > 0 && steps >= config.max_steps {
                break;
            }
        }
        let train_loss = loss_sum / seen as f64;
        let (val_loss, val_exact_match, val_f1) = if val_set.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let (preds, loss) = predict_all(&model, val_set, config.batch_size, config.threads)?;
            let report = token_prf(&preds, val_set)?;
            (loss, report.exact_match, report.micro.f1)
        };
        let seconds = if config.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_exact_match,
            val_f1,
            seconds,
        });
        info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_loss {val_loss:.6} val_exact {val_exact_match:.4} val_f1 {val_f1:.4}"
        );
        let monitored = if val_set.is_empty() { train_loss } else { val_loss };
        match stopper.observe(epoch, monitored) {
            StopDecision::Improved => best = model.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break 'epochs;
            }
        }
        if config.max_steps > 0 && steps >= config.max_steps {
            break;
        }
    }
    *model.params_mut() = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: stopper.best_epoch(),
        best_loss: stopper.best(),
        steps,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut adam = AdamState::new(&params, 0.9, 0.999, 1e-8);
        adam.update(&mut params, &["w".into()], &[Tensor::zeros(&[2])], 1e-3).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn two_step_hand_trace() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let mut params = vec![Tensor::scalar(0.5)];
        let mut adam = AdamState::new(&params, b1, b2, eps);
        let gs = [0.3, -0.7];
        let (mut m, mut v, mut w) = (0.0, 0.0, 0.5);
        for (t, &g) in gs.iter().enumerate() {
            adam.update(&mut params, &["w".into()], &[Tensor::scalar(g)], lr).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - b2.powi(t as i32 + 1));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!((params[0].item() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut adam = AdamState::new(&params, 0.9, 0.999, 1e-8);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam.update(&mut params, &["w".into()], &[Tensor::scalar(2.5)], 1e-3).unwrap();
            last_step = prev - params[0].item();
            prev = params[0].item();
        }
        assert!(params[0].item() < 0.0);
        assert!((last_step - 1e-3).abs() < 1e-6, "{last_step}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = vec![Tensor::scalar(0.0), Tensor::vector(vec![0.0; 3])];
        let mut adam = AdamState::new(&params, 0.9, 0.999, 1e-8);
        let grads = [Tensor::scalar(1.0), Tensor::vector(vec![0.0, f64::NAN, 1.0])];
        let err = adam
            .update(&mut params, &["a".into(), "right.0.w3".into()], &grads, 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("right.0.w3"));
        assert_eq!(adam.step, 0);
        assert_eq!(params[0].item(), 0.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tolerance_one_stops_on_first_regression() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 1.5), StopDecision::Stop);
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn patience_resets_on_improvement() {
        let mut s = EarlyStopping::new(2);
        s.observe(1, 1.0);
        assert_eq!(s.observe(2, 1.1), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.9), StopDecision::Improved);
        assert_eq!(s.observe(4, 0.95), StopDecision::Continue);
        assert_eq!(s.observe(5, 0.95), StopDecision::Stop);
        assert_eq!(s.best(), 0.9);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tolerance: 200,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let round = TrainConfig::from_toml(&TrainConfig::full_scale().to_toml()).unwrap();
        assert_eq!(round, TrainConfig::full_scale());
        assert!(TrainConfig::from_toml("learning_rte = 0.1").is_err());
    }

    #[test]
    fn file_overlays_base() {
        let dir = tempfile::tempdir().unwrap();
        let base = TrainConfig {
            seed: 9,
            ..TrainConfig::default()
        };
        let toml_path = dir.path().join("c.toml");
        std::fs::write(&toml_path, "batch_size = 8\n[model]\nd_model = 16\n").unwrap();
        let c = TrainConfig::load_over(&base, &toml_path).unwrap();
        assert_eq!((c.batch_size, c.seed, c.model.d_model, c.model.left_layers), (8, 9, 16, 2));
        let json_path = dir.path().join("c.json");
        std::fs::write(&json_path, r#"{"model": {"ablation": "left-only"}}"#).unwrap();
        let c = TrainConfig::load_over(&base, &json_path).unwrap();
        assert_eq!(c.model.ablation, crate::model::Ablation::LeftOnly);
        std::fs::write(&json_path, r#"{"model": {"heads": 3}}"#).unwrap();
        assert!(TrainConfig::load_over(&base, &json_path).is_err());
    }
}
