//! Minibatch SGD with momentum.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DepthModel, DepthNet, Params, SegNet};
use crate::autodiff::Gradients;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::rmse;
use crate::parallel;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Global gradient-norm clip applied to each minibatch gradient.
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn depth_default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.001,
            batch_size: 8,
            momentum: 0.9,
            clip_norm: 50.0,
            seed: 0,
        }
    }

    pub fn seg_default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            clip_norm: 5.0,
            ..Self::depth_default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::config("learning rate, batch size and clip norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeldOutMetric {
    /// Mean per-image RMSE in metres.
    Rmse(f64),
    /// Fraction of correctly labelled pixels.
    PixelAccuracy(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_training_loss: Option<f64>,
    pub held_out: Option<HeldOutMetric>,
}

/// Runs the shared SGD loop. `example_grad(i)` returns the loss and parameter
/// gradients of training example `i`.
fn sgd<F>(params: &mut Params, n: usize, cfg: &TrainConfig, example_grad: F) -> Result<Vec<f64>>
where
    F: Fn(&Params, usize) -> Result<(f64, Gradients)> + Sync + Send,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("training set is empty"));
    }
    let mut velocity: Params = params
        .iter()
        .map(|(k, v)| (k.clone(), crate::tensor::Tensor::zeros(v.shape())))
        .collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &*params;
            let results = parallel::map(batch, |&i| example_grad(snapshot, i));
            let mut total: Option<Params> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r.map_err(|e| {
                    if e.is_numerical() {
                        Error::Diverged { epoch }
                    } else {
                        e
                    }
                })?;
                batch_loss += loss;
                match &mut total {
                    None => total = Some(grads.iter().map(|(k, v)| (k.clone(), v.clone())).collect()),
                    Some(acc) => {
                        for (k, g) in grads.iter() {
                            for (a, v) in acc.get_mut(k).expect("same parameters").data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            let mut total = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            let norm = total
                .values()
                .flat_map(|t| t.data())
                .map(|v| (v * inv) * (v * inv))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() || !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let factor = inv * if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
            for (name, p) in params.iter_mut() {
                let g = total.get_mut(name).expect("gradient for every parameter");
                let v = velocity.get_mut(name).expect("velocity for every parameter");
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv + gv * factor;
                    *pv -= cfg.learning_rate * *vv;
                }
            }
            if params.values().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += batch_loss * inv;
            batches += 1;
        }
        let mean = loss_sum / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Trains a depth network on the valid pixels of each sample.
///
/// The per-example loss is the masked sum of squared errors divided by the
/// number of valid pixels.
pub fn train_depth(net: &mut DepthNet, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let arch = net.arch;
    let losses = sgd(&mut net.params, train.len(), cfg, |params, i| {
        let view = DepthNet {
            arch,
            params: params.clone(),
        };
        let s = &train[i];
        view.param_gradients(&s.rgb, &s.depth, &s.valid)
    })?;
    let held_out = if val.is_empty() {
        None
    } else {
        let r = mean_rmse(net, val)?;
        if !r.is_finite() {
            return Err(Error::Diverged { epoch: losses.len() });
        }
        Some(HeldOutMetric::Rmse(r))
    };
    Ok(TrainReport {
        epochs_run: losses.len(),
        final_training_loss: losses.last().copied(),
        epoch_losses: losses,
        held_out,
    })
}

/// Mean per-image RMSE of `net` over `samples`.
pub fn mean_rmse(net: &impl DepthModel, samples: &[Sample]) -> Result<f64> {
    let per = parallel::try_map(samples, |s| rmse(&net.predict(&s.rgb)?, &s.ground_truth()))?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Trains a segmentation network with mean per-pixel cross-entropy.
pub fn train_seg(net: &mut SegNet, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let classes = net.classes;
    let losses = sgd(&mut net.params, train.len(), cfg, |params, i| {
        let view = SegNet {
            classes,
            params: params.clone(),
        };
        view.param_gradients(&train[i].rgb, &train[i].seg)
    })?;
    let held_out = if val.is_empty() {
        None
    } else {
        Some(HeldOutMetric::PixelAccuracy(pixel_accuracy(net, val)?))
    };
    Ok(TrainReport {
        epochs_run: losses.len(),
        final_training_loss: losses.last().copied(),
        epoch_losses: losses,
        held_out,
    })
}

/// Fraction of pixels whose arg-max class matches the label, pooled over samples.
pub fn pixel_accuracy(net: &SegNet, samples: &[Sample]) -> Result<f64> {
    let per = parallel::try_map(samples, |s| {
        let pred = net.predict_labels(&s.rgb)?;
        Ok(pred
            .data()
            .iter()
            .zip(s.seg.data())
            .filter(|(a, b)| a == b)
            .count())
    })?;
    let total: usize = samples.iter().map(|s| s.seg.len()).sum();
    Ok(per.iter().sum::<usize>() as f64 / total as f64)
}
