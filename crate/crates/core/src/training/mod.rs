//! Training pipelines: teacher, two-stage student, end-to-end and CR+BQ
//! baselines, and frozen-encoder task heads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{OptimizerConfig, Params};
use crate::autodiff::{Graph, Var};
use crate::entropy_model::rate_graph;
use crate::error::{Error, Result};
use crate::layers::{section_graph, Binder, ModelSpec, Section, Trainable};

mod eval;
mod pipelines;

pub use eval::{
    bit_allocation_latent, bit_allocation_map, eval_rd, evaluate_accuracy, evaluate_accuracy_unquantized, RdPoint,
};
pub use pipelines::{
    finetune_task, stage1_distill, stage2_finetune, teacher_targets, train_crbq, train_end2end, train_teacher,
    TeacherTargets, Trained,
};

/// Step decay: `initial · factor^⌊epoch / every⌋`; `every = 0` keeps it constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_epochs: usize,
    #[serde(default = "one")]
    pub decay_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, decay_epochs: 0, decay_factor: 1.0 }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if self.decay_epochs == 0 {
            self.initial
        } else {
            self.initial * self.decay_factor.powi((epoch / self.decay_epochs) as i32)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rate weight in the rate-distortion objective.
    pub beta: f64,
    /// Cross-entropy weight of the distillation loss.
    pub alpha: f64,
    /// Softmax temperature of the distillation loss.
    pub tau: f64,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Also match the output of the first frozen tail block during stage 1.
    #[serde(default)]
    pub aux_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.28e-3,
            alpha: 0.5,
            tau: 1.0,
            lr: LrSchedule::constant(1e-3),
            batch_size: 32,
            epochs: 10,
            seed: 0,
            optimizer: OptimizerConfig::adam(),
            aux_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr.initial > 0.0 && self.lr.decay_factor > 0.0) {
            return bad("learning rate and decay factor must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        Ok(())
    }
}

/// Scalar nodes of the rate-distortion objective, all averaged over the batch.
#[derive(Clone, Copy, Debug)]
pub struct RdTerms {
    pub loss: Var,
    /// `½‖h − ĥ‖²` per sample.
    pub distortion: Var,
    /// `−ln p(z̃)` per sample.
    pub rate_nats: Var,
    pub h_hat: Var,
    /// Probabilities that hit the rate floor.
    pub clamped: usize,
}

/// `½‖h − g(z̃)‖² − β·ln p(z̃)`, averaged over the batch.
///
/// `z_noisy` is the encoder output with quantization noise already added; the
/// decoder and prior parameters come from `b`. `β = 0` is accepted here.
pub fn rd_loss(
    g: &mut Graph,
    b: &mut Binder,
    spec: &ModelSpec,
    h: Var,
    z_noisy: Var,
    beta: f64,
) -> Result<RdTerms> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be non-negative, got {beta}")));
    }
    let n = g.value(z_noisy).shape()[0] as f64;
    let h_hat = section_graph(g, b, spec, Section::Decoder, z_noisy)?;
    let se = g.squared_error(h, h_hat)?;
    let distortion = g.scale(se, 0.5 / n);
    let (rate, clamped) = rate_graph(g, b, z_noisy)?;
    let rate_nats = g.scale(rate, 1.0 / n);
    let weighted = g.scale(rate_nats, beta);
    let loss = g.add(distortion, weighted)?;
    Ok(RdTerms { loss, distortion, rate_nats, h_hat, clamped })
}

/// `CE(tail(g(z̃)), y) − (β/N)·ln p(z̃)`: the single-stage objective with no
/// teacher. `β = 0` is accepted here.
pub fn end2end_loss(g: &mut Graph, b: &mut Binder, spec: &ModelSpec, z_noisy: Var, labels: &[usize], beta: f64) -> Result<Var> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be non-negative, got {beta}")));
    }
    let n = g.value(z_noisy).shape()[0] as f64;
    let h_hat = section_graph(g, b, spec, Section::Decoder, z_noisy)?;
    let logits = section_graph(g, b, spec, Section::Tail, h_hat)?;
    let ce = g.cross_entropy(logits, labels)?;
    let (rate, _) = rate_graph(g, b, z_noisy)?;
    let r = g.scale(rate, beta / n);
    g.add(ce, r)
}

/// `α·CE(s, y) + (1−α)·τ²·KL(softmax(s/τ) ‖ softmax(t/τ))`, batch mean.
pub fn kd_loss(g: &mut Graph, student: Var, teacher: Var, labels: &[usize], alpha: f64, tau: f64) -> Result<Var> {
    if g.value(student).shape() != g.value(teacher).shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            g.value(student).shape(),
            g.value(teacher).shape()
        )));
    }
    let ce = g.cross_entropy(student, labels)?;
    if alpha == 1.0 {
        return Ok(ce);
    }
    let kl = g.kl_divergence(student, teacher, tau)?;
    let a = g.scale(ce, alpha);
    let k = g.scale(kl, (1.0 - alpha) * tau * tau);
    g.add(a, k)
}

/// Mean loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    /// Mean of the last `k` epoch losses (or all of them).
    pub fn smoothed_final(&self, k: usize) -> f64 {
        let n = self.epoch_losses.len();
        let tail = &self.epoch_losses[n.saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Context handed to a batch-loss closure.
pub(crate) struct Batch<'a> {
    pub indices: &'a [usize],
    pub noise: &'a mut ChaCha8Rng,
}

/// Shuffled mini-batch optimization of the parameters selected by `trainable`.
///
/// Epoch `e` visits samples in an order drawn from `seed` and `e`; the noise
/// stream is a separate generator, so runs are reproducible from the config.
pub(crate) fn train_loop(
    params: &mut Params,
    trainable: &Trainable,
    cfg: &TrainConfig,
    n_samples: usize,
    what: &str,
    mut batch_loss: impl FnMut(&mut Graph, &mut Binder, Batch) -> Result<Var>,
) -> Result<TrainReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty training set")));
    }
    let mut opt = cfg.optimizer.build();
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_4015E);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n_samples).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let lr = cfg.lr.at(epoch);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let grads = {
                let mut g = Graph::new();
                let mut b = Binder::new(params, trainable.clone());
                let loss = batch_loss(&mut g, &mut b, Batch { indices: chunk, noise: &mut noise })?;
                let v = g.value(loss).data()[0];
                if !v.is_finite() {
                    return Err(Error::Diverged(format!(
                        "{what}: loss {v} at epoch {epoch}, step {}",
                        report.steps
                    )));
                }
                total += v * chunk.len() as f64;
                count += chunk.len();
                g.backward(loss)?.into_params()
            };
            opt.step(params, &grads, lr).map_err(|e| Error::Diverged(format!("{what}: {e}")))?;
            report.steps += 1;
        }
        let mean = total / count as f64;
        log::info!("{what}: epoch {} loss {mean:.6}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Model, TeacherWidths};
    use crate::tensor::Tensor;

    fn tiny() -> Model {
        let t = ModelSpec::teacher([3, 8, 8], TeacherWidths { stage1: 2, stage2: 3 }, 3);
        Model::init(ModelSpec::entropic_student(&t, 2, 3).unwrap(), 11).unwrap()
    }

    fn ramp(shape: Vec<usize>, k: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64) * k).sin() * 2.0).collect()).unwrap()
    }

    #[test]
    fn rd_loss_decomposes_into_eager_terms() {
        let m = tiny();
        let zs = m.encoder_forward(&ramp(vec![2, 3, 8, 8], 0.37)).unwrap().shape().to_vec();
        let z = crate::quantizer::round_tensor(&ramp(zs, 0.91));
        let h = ramp(vec![2, 2, 4, 4], 0.53);
        let beta = 0.25;
        let mut g = Graph::new();
        let mut b = Binder::new(&m.params, Trainable::Nothing);
        let (hv, zv) = (g.constant(h.clone()).unwrap(), g.constant(z.clone()).unwrap());
        let t = rd_loss(&mut g, &mut b, &m.spec, hv, zv, beta).unwrap();
        let h_hat = m.decoder_forward(&z).unwrap();
        let se: f64 = h.data().iter().zip(h_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let nats = m.entropy_model().unwrap().rate_bits(&z).unwrap().bits * std::f64::consts::LN_2;
        let (d, r, l) = (g.value(t.distortion).data()[0], g.value(t.rate_nats).data()[0], g.value(t.loss).data()[0]);
        assert!((d - 0.5 * se / 2.0).abs() < 1e-12 * d.max(1.0));
        assert!((r - nats / 2.0).abs() < 1e-9 * r.max(1.0));
        assert_eq!(l, d + beta * r);
    }

    #[test]
    fn beta_zero_limits() {
        let m = tiny();
        let z = ramp(vec![2, 2, 2, 2], 0.77);
        let h = ramp(vec![2, 2, 4, 4], 0.21);
        let mut g = Graph::new();
        let mut b = Binder::new(&m.params, Trainable::Nothing);
        let (hv, zv) = (g.constant(h).unwrap(), g.constant(z.clone()).unwrap());
        // rate-distortion with no rate weight is the feature error alone
        let t = rd_loss(&mut g, &mut b, &m.spec, hv, zv, 0.0).unwrap();
        assert_eq!(g.value(t.loss).data(), g.value(t.distortion).data());
        // the single-stage objective with no rate weight is plain cross-entropy
        let e = end2end_loss(&mut g, &mut b, &m.spec, zv, &[1, 2], 0.0).unwrap();
        let logits = m.tail_forward(&m.decoder_forward(&z).unwrap()).unwrap();
        let mut g2 = Graph::new();
        let lv = g2.constant(logits).unwrap();
        let ce = g2.cross_entropy(lv, &[1, 2]).unwrap();
        assert_eq!(g.value(e).data(), g2.value(ce).data());
        assert!(rd_loss(&mut g, &mut b, &m.spec, hv, zv, -1.0).is_err());
    }

    #[test]
    fn schedule_steps() {
        let s = LrSchedule { initial: 0.1, decay_epochs: 2, decay_factor: 0.5 };
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(1), 0.1);
        assert_eq!(s.at(2), 0.05);
        assert_eq!(LrSchedule::constant(0.3).at(100), 0.3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { beta: 0.0, ..Default::default() },
            TrainConfig { alpha: 1.5, ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn logits(g: &mut Graph, v: Vec<f64>) -> Var {
        let n = v.len() / 2;
        g.constant(Tensor::new(vec![n, 2], v).unwrap()).unwrap()
    }

    #[test]
    fn kd_closed_form() {
        // KL((½,½) ‖ (¾,¼)) = ½ln(⅔) + ½ln(2)
        let mut g = Graph::new();
        let s = logits(&mut g, vec![0.0, 0.0]);
        let t = logits(&mut g, vec![3f64.ln(), 0.0]);
        let l = kd_loss(&mut g, s, t, &[0], 0.0, 1.0).unwrap();
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((g.value(l).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn kd_alpha_one_is_cross_entropy() {
        let mut g = Graph::new();
        let s = logits(&mut g, vec![0.3, -1.0, 2.0, 0.5]);
        let t = logits(&mut g, vec![1.0, 1.0, -1.0, 0.0]);
        let l = kd_loss(&mut g, s, t, &[1, 0], 1.0, 2.0).unwrap();
        let ce = g.cross_entropy(s, &[1, 0]).unwrap();
        assert_eq!(g.value(l).data(), g.value(ce).data());
    }

    #[test]
    fn kd_identical_logits_leave_only_cross_entropy() {
        let mut g = Graph::new();
        let s = logits(&mut g, vec![0.3, -1.0]);
        let t = logits(&mut g, vec![0.3, -1.0]);
        let l = kd_loss(&mut g, s, t, &[0], 0.0, 3.0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }
}
