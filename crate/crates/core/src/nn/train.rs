use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, pair_penalty, LossKind, MIN_CORR_BATCH};
use super::net::Net;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Reseeds the network's generator before the first shuffle.
    pub seed: u64,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            loss: LossKind::CrossEntropy,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if let LossKind::Complementary { lambda1, lambda2 } = self.loss {
            if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
                return Err(Error::Config("loss weights must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Aligned model inputs and labels.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl TrainData {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("no input tensors".into()));
        }
        if let Some(t) = inputs.iter().find(|t| t.batch() != labels.len()) {
            return Err(Error::InvalidInput(format!(
                "input has {} rows but there are {} labels",
                t.batch(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> TrainData {
        TrainData {
            inputs: self.inputs.iter().map(|t| t.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn refs(&self) -> Vec<&Tensor> {
        self.inputs.iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Loss terms for one batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub l_mi: f64,
    pub l_ortho: f64,
    pub regularization: f64,
    pub correct: usize,
}

/// Train-mode forward pass and objective for one batch. With `grad` set,
/// parameter gradients of the full objective are left in the network.
pub fn batch_objective(net: &mut Net, data: &TrainData, loss: &LossKind, grad: bool) -> Result<BatchLoss> {
    let probs = net.forward(&data.refs(), true)?;
    let (ce, dlogits) = cross_entropy(&probs, &data.labels)?;
    let correct = probs.argmax_rows().iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    let mut out = BatchLoss { cross_entropy: ce, correct, ..Default::default() };
    let mut seeds = vec![(net.logits_node()?, dlogits)];
    if let LossKind::Complementary { lambda1, lambda2 } = *loss {
        if !loss.is_plain() && data.len() >= MIN_CORR_BATCH && net.fusion_taps.len() >= 2 {
            let taps = net.fusion_taps.clone();
            for a in 0..taps.len() {
                for b in a + 1..taps.len() {
                    let fi = net.cached(taps[a])?.clone();
                    let fj = net.cached(taps[b])?.clone();
                    let p = pair_penalty(&fi, &fj, lambda1, lambda2)?;
                    out.l_mi += p.l_mi;
                    out.l_ortho += p.l_ortho;
                    seeds.push((taps[a], Tensor::new(fi.shape().to_vec(), p.grad_i)?));
                    seeds.push((taps[b], Tensor::new(fj.shape().to_vec(), p.grad_j)?));
                }
            }
            out.total += lambda1 * out.l_mi + lambda2 * out.l_ortho;
        }
    }
    out.regularization = net.regularization_loss();
    out.total += ce + out.regularization;
    if grad {
        net.zero_grad();
        net.backward(&seeds)?;
    }
    Ok(out)
}

/// One Adam update of every trainable parameter using its stored gradient.
pub fn adam_step(net: &mut Net, cfg: &TrainConfig) {
    net.step += 1;
    let t = net.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in net.params_mut().filter(|p| p.trainable) {
        let g = p.grad.data().to_vec();
        let m = p.m.data_mut();
        for (mi, gi) in m.iter_mut().zip(&g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = p.v.data_mut();
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (p.m.data().to_vec(), p.v.data().to_vec());
        for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(&m).zip(&v) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Eval-mode loss and accuracy.
pub fn evaluate_loss(net: &mut Net, data: &TrainData) -> Result<(f64, f64)> {
    let probs = net.predict(&data.refs())?;
    let (ce, _) = cross_entropy(&probs, &data.labels)?;
    let correct = probs.argmax_rows().iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok((ce, correct as f64 / data.len() as f64))
}

/// Mini-batch Adam training. Returns the weights from the epoch with the best
/// validation accuracy (training accuracy when `val` is absent).
///
/// Generator consumption after reseeding: per epoch one shuffle of the row
/// order, then per batch the dropout masks in node order.
pub fn train(mut net: Net, data: &TrainData, val: Option<&TrainData>, cfg: &TrainConfig) -> Result<(Net, History)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    net.reseed(cfg.seed);
    let mut history = History::default();
    let mut best: Option<(f64, Net)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut net.rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.select(chunk);
            let l = batch_objective(&mut net, &batch, &cfg.loss, true)?;
            if !l.total.is_finite() {
                return Err(Error::NumericFailure { epoch, batch: bi + 1 });
            }
            adam_step(&mut net, cfg);
            loss_sum += l.total * chunk.len() as f64;
            correct += l.correct;
        }
        let train_loss = loss_sum / data.len() as f64;
        let train_acc = correct as f64 / data.len() as f64;
        let (val_loss, val_acc) = match val {
            Some(v) => evaluate_loss(&mut net, v)?,
            None => (train_loss, train_acc),
        };
        log::debug!("epoch {epoch}: loss {train_loss:.4} acc {train_acc:.3} val_loss {val_loss:.4} val_acc {val_acc:.3}");
        history.epochs.push(EpochStats { epoch, train_loss, train_acc, val_loss, val_acc });
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            net.cache.iter_mut().for_each(|c| *c = None);
            best = Some((val_acc, net.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                history.stopped_early = true;
                break;
            }
        }
    }
    let (_, best_net) = best.expect("at least one epoch ran");
    Ok((best_net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec, NetBuilder};

    fn tiny_net(seed: u64) -> Net {
        let mut b = NetBuilder::new(seed);
        let x = b.input("x", &[2]).unwrap();
        let h = b.add("dense", LayerSpec::dense(2, Activation::Linear), &[x]).unwrap();
        let out = b.add("softmax", LayerSpec::Softmax, &[h]).unwrap();
        b.finish(out).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut net = tiny_net(1);
        let before = net.param_values();
        net.zero_grad();
        adam_step(&mut net, &TrainConfig::default());
        assert_eq!(before, net.param_values());
    }

    #[test]
    fn config_rejects_zero_epochs() {
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
