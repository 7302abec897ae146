//! SGD with classical momentum and coupled weight decay, and the
//! deterministic training loop.

use std::collections::HashMap;

use aggrnet_tensor::{ops, Element, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fea::MaskMode;
use crate::metrics::EvalReport;
use crate::model::{Model, ModelConfig};
use crate::params::{Ctx, Mode, ParamId, ParamStore};

pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// FEM masking while training; evaluation always uses hard masks.
    pub mask_mode: MaskMode,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            mask_mode: MaskMode::Soft,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter slot (buffers never get one).
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<F> {
    pub velocity: Vec<Option<Tensor<F>>>,
}

impl<F: Element> SgdState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let mut velocity = vec![None; params.len()];
        for id in params.learnable_ids() {
            velocity[id.index()] = Some(params.get(id).zeros_like());
        }
        Self { velocity }
    }
}

/// One step of `v ← m·v + g + wd·w; w ← w − lr·v`, followed by each
/// parameter's clamp. A parameter without a gradient is stepped with `g = 0`.
pub fn sgd_step<F: Element>(
    params: &mut ParamStore<F>,
    grads: &HashMap<ParamId, Tensor<F>>,
    state: &mut SgdState<F>,
    tc: &TrainConfig,
) -> Result<()> {
    let (lr, m, wd) = (F::lit(tc.lr), F::lit(tc.momentum), F::lit(tc.weight_decay));
    let ids: Vec<ParamId> = params.learnable_ids().collect();
    for id in ids {
        let w = params.get(id);
        let v = state.velocity[id.index()].get_or_insert_with(|| w.zeros_like());
        let g = grads.get(&id);
        if let Some(g) = g {
            if g.shape() != w.shape() {
                return Err(Error::Numeric(format!("gradient for {} has shape {:?}", params.spec(id).name, g.shape())));
            }
        }
        let clamp = params.spec(id).clamp.map(|(lo, hi)| (F::lit(lo), F::lit(hi)));
        let n = w.numel();
        let mut new_v = Vec::with_capacity(n);
        let mut new_w = Vec::with_capacity(n);
        for i in 0..n {
            let gi = g.map_or(F::zero(), |g| g.data()[i]);
            let wi = w.data()[i];
            let vi = m * v.data()[i] + gi + wd * wi;
            let mut wn = wi - lr * vi;
            if let Some((lo, hi)) = clamp {
                wn = wn.max(lo).min(hi);
            }
            new_v.push(vi);
            new_w.push(wn);
        }
        *v = Tensor::new(w.shape().to_vec(), new_v)?;
        let shape = w.shape().to_vec();
        params.set(id, Tensor::new(shape, new_w)?)?;
    }
    Ok(())
}

/// Loss, gradients and buffer updates of one batch.
pub struct StepOutput<F> {
    pub loss: F,
    pub logits: Tensor<F>,
    pub grads: HashMap<ParamId, Tensor<F>>,
    pub updates: Vec<(ParamId, Tensor<F>)>,
}

pub fn compute_gradients<F: Element>(
    model: &Model,
    params: &ParamStore<F>,
    images: &Tensor<F>,
    labels: &[usize],
    mode: Mode,
) -> Result<StepOutput<F>> {
    let k = model.config.num_classes;
    if let Some(i) = labels.iter().position(|&l| l >= k) {
        return Err(Error::Data(format!("label {} at batch position {i} is outside [0, {k})", labels[i])));
    }
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, params, mode);
    let x = ctx.tape.constant(images.clone());
    let logits = model.forward(&mut ctx, x)?;
    let loss = ctx.tape.cross_entropy(logits, labels)?;
    let (bound, updates) = ctx.finish();
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("loss became {loss_value}")));
    }
    let g = tape.backward(loss)?;
    let grads = params
        .learnable_ids()
        .filter_map(|id| bound.get(&id).and_then(|&v| g.get(v)).map(|t| (id, t.clone())))
        .collect();
    Ok(StepOutput { loss: loss_value, logits: tape.value(logits).clone(), grads, updates })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub qwk: f64,
    pub mae: f64,
}

pub struct Trainer<F: Element> {
    pub model: Model,
    pub params: ParamStore<F>,
    pub sgd: SgdState<F>,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    /// Sum over steps of each parameter's gradient L2 norm, by slot.
    pub grad_norm_sum: Vec<f64>,
    pub step_losses: Vec<f64>,
}

impl<F: Element> Trainer<F> {
    pub fn new(model_cfg: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::build(model_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = model.init_params(&mut rng);
        Ok(Self::from_parts(model, params, None, config.clone(), rng, 0, 0))
    }

    pub fn from_parts(
        model: Model,
        params: ParamStore<F>,
        sgd: Option<SgdState<F>>,
        config: TrainConfig,
        rng: ChaCha8Rng,
        epoch: usize,
        step: u64,
    ) -> Self {
        let sgd = sgd.unwrap_or_else(|| SgdState::new(&params));
        let grad_norm_sum = vec![0.0; params.len()];
        Self { model, params, sgd, config, rng, epoch, step, grad_norm_sum, step_losses: Vec::new() }
    }

    pub fn train_step(&mut self, images: &Tensor<F>, labels: &[usize]) -> Result<f64> {
        let out = compute_gradients(&self.model, &self.params, images, labels, Mode::train(self.config.mask_mode))?;
        for (id, g) in &out.grads {
            let sq: f64 = g.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum();
            self.grad_norm_sum[id.index()] += sq.sqrt();
        }
        sgd_step(&mut self.params, &out.grads, &mut self.sgd, &self.config)?;
        for (id, value) in out.updates {
            self.params.set(id, value)?;
        }
        let loss = out.loss.to_f64_lossy();
        self.step += 1;
        self.step_losses.push(loss);
        Ok(loss)
    }

    /// Shuffled mini-batches for one epoch.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        chunk(&order, self.config.batch_size)
    }

    /// Replaces every normalization layer's running statistics with the
    /// average of its batch statistics over one ordered pass of `data` under
    /// the current weights. Exponential averages taken during training lag
    /// badly behind weights that move as fast as they do on small datasets.
    pub fn recalibrate(&mut self, data: &Dataset) -> Result<()> {
        let order: Vec<usize> = (0..data.len()).collect();
        for (i, batch) in chunk(&order, self.config.batch_size).iter().enumerate() {
            let (images, _) = data.batch::<F>(batch)?;
            let mode = Mode { stat_momentum: 1.0 / (i + 1) as f64, ..Mode::train(self.config.mask_mode) };
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &self.params, mode);
            let x = ctx.tape.constant(images);
            self.model.forward(&mut ctx, x)?;
            let (_, updates) = ctx.finish();
            for (id, value) in updates {
                self.params.set(id, value)?;
            }
        }
        Ok(())
    }

    /// One pass over `data` followed by [`Self::recalibrate`]; returns the
    /// sample-weighted mean loss.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<f64> {
        self.check_dataset(data)?;
        let mut total = 0.0;
        for batch in self.epoch_batches(data.len()) {
            let (images, labels) = data.batch::<F>(&batch)?;
            total += self.train_step(&images, &labels)? * batch.len() as f64;
        }
        self.recalibrate(data)?;
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.num_classes() != self.model.config.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model predicts {}",
                data.num_classes(),
                self.model.config.num_classes
            )));
        }
        self.model
            .check_input(data.images.shape())
            .map_err(|e| Error::Data(format!("dataset does not fit the model: {e}")))
    }

    /// Runs one epoch and evaluates on `eval` (or the training data).
    pub fn fit_epoch(&mut self, train: &Dataset, eval: Option<&Dataset>) -> Result<EpochRecord> {
        let loss = self.run_epoch(train)?;
        let report = self.evaluate(eval.unwrap_or(train))?;
        Ok(EpochRecord { epoch: self.epoch, loss, accuracy: report.accuracy, qwk: report.qwk, mae: report.mae })
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        self.check_dataset(data)?;
        evaluate(&self.model, &self.params, data)
    }
}

/// Splits `order` into batches of `size`; a trailing single-sample batch is
/// folded into the one before it so batch statistics stay defined.
fn chunk(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Class probabilities `[N, K]` (row-major) in eval mode.
pub fn predict_proba<F: Element>(model: &Model, params: &ParamStore<F>, data: &Dataset) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(data.len() * model.config.num_classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, _) = data.batch::<F>(chunk)?;
        let logits = model.predict(params, &images)?;
        if !logits.all_finite() {
            return Err(Error::Numeric("non-finite logits during evaluation".into()));
        }
        probs.extend(ops::softmax(&logits, 1)?.to_f64_vec());
    }
    Ok(probs)
}

/// Single deterministic eval-mode pass with hard masks.
pub fn evaluate<F: Element>(model: &Model, params: &ParamStore<F>, data: &Dataset) -> Result<EvalReport> {
    let probs = predict_proba(model, params, data)?;
    EvalReport::from_scores(&probs, &data.labels, model.config.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamKind, ParamSpec, Registry};

    fn one_param(value: f64, clamp: Option<(f64, f64)>) -> (ParamStore<f64>, ParamId) {
        let mut reg = Registry::new();
        let id = reg.push(ParamSpec {
            name: "w".into(),
            shape: vec![1],
            kind: ParamKind::Learnable,
            init: Init::Const(value),
            clamp,
        });
        (reg.materialize(&mut ChaCha8Rng::seed_from_u64(0)), id)
    }

    fn tc(lr: f64, momentum: f64, wd: f64) -> TrainConfig {
        TrainConfig { lr, momentum, weight_decay: wd, ..TrainConfig::default() }
    }

    #[test]
    fn plain_step() {
        let (mut p, id) = one_param(1.0, None);
        let mut s = SgdState::new(&p);
        let g = HashMap::from([(id, Tensor::full(vec![1], 0.1))]);
        sgd_step(&mut p, &g, &mut s, &tc(0.01, 0.0, 0.0)).unwrap();
        assert_eq!(p.get(id).data()[0], 1.0 - 0.01 * 0.1);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut p, id) = one_param(0.0, None);
        let mut s = SgdState::new(&p);
        let g = HashMap::from([(id, Tensor::full(vec![1], 1.0))]);
        let c = tc(0.01, 0.937, 0.0);
        sgd_step(&mut p, &g, &mut s, &c).unwrap();
        sgd_step(&mut p, &g, &mut s, &c).unwrap();
        assert!((p.get(id).data()[0] + 0.02937).abs() < 1e-15);
    }

    #[test]
    fn clamp_applies_after_step() {
        let (mut p, id) = one_param(0.5, Some((0.01, 0.99)));
        let mut s = SgdState::new(&p);
        let g = HashMap::from([(id, Tensor::full(vec![1], -1000.0))]);
        sgd_step(&mut p, &g, &mut s, &tc(0.01, 0.0, 0.0)).unwrap();
        assert_eq!(p.get(id).data()[0], 0.99);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(tc(0.0, 0.9, 0.0).validate().is_err());
        assert!(tc(0.1, 1.0, 0.0).validate().is_err());
        assert!(tc(0.1, 0.5, -1.0).validate().is_err());
    }
}
