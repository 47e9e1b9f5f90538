//! Full-batch gradient descent on the empirical logistic objective, plus the
//! two value-only fine-tuning procedures used for transfer.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::analysis::{accuracy_on, cosine_sim, patch_association_score, residual_norm};
use crate::distribution::{DataPoint, Dataset, DistributionSpec, Partition};
use crate::error::{invalid, Error, Result};
use crate::idealized::reduce_attention;
use crate::linalg::{norm, Matrix};
use crate::model::{batch_loss_and_grads_points, ModelParams};
use crate::rng::{purpose, Streams};

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Train `v` and the off-diagonal of `A`.
    Realistic,
    /// Train `v` only; `A` is frozen.
    ValueOnly,
}

/// Activation and attention hyperparameters that are not trained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModelHyper {
    pub p: u32,
    pub nu: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    /// Init scale of `v` and of the off-diagonal attention entries.
    pub omega: f64,
    pub sigma_a: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid(format!("learning rate {} must be positive", self.eta)));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(invalid(format!("init scale {} must be >= 0", self.omega)));
        }
        if !self.sigma_a.is_finite() {
            return Err(invalid("sigma_A must be finite"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be at least 1"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub step: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub cosine_sim: f64,
    pub patch_assoc_score: f64,
    pub gamma_hat: f64,
    pub rho_hat: f64,
    pub eps_v: f64,
}

/// Held-out points used for the accuracy column of [`RunRecord`].
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub spec: DistributionSpec,
    pub partition: Partition,
    pub points: Vec<DataPoint>,
}

impl From<Dataset> for EvalSet {
    fn from(ds: Dataset) -> Self {
        Self {
            spec: ds.spec,
            partition: ds.partition,
            points: ds.points,
        }
    }
}

/// `A_ii = sigma_A`, everything else i.i.d. `N(0, omega^2)`.
pub fn init_params(
    cfg: &TrainConfig,
    hyper: &ModelHyper,
    d: usize,
    num_patches: usize,
    streams: &Streams,
) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::zeros(d, num_patches, hyper.p, hyper.nu, hyper.tau, cfg.sigma_a)?;
    let mut rng = streams.stream(purpose::INIT, 0);
    for v in &mut params.v {
        *v = cfg.omega * rng.sample::<f64, _>(StandardNormal);
    }
    for i in 0..num_patches {
        for j in 0..num_patches {
            if i != j {
                params.a.set(i, j, cfg.omega * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    Ok(params)
}

/// One full-batch step. Returns the new params and the loss at the old ones.
pub fn gd_step(params: &ModelParams, points: &[DataPoint], eta: f64, mode: TrainMode) -> Result<(ModelParams, f64)> {
    let grads = batch_loss_and_grads_points(params, points)?;
    if !grads.loss.is_finite() || !grads.grad_v.iter().all(|g| g.is_finite()) || !grads.grad_a.all_finite() {
        return Err(Error::NonFinite(format!("gradient at loss {}", grads.loss)));
    }
    let mut next = params.clone();
    for (v, g) in next.v.iter_mut().zip(&grads.grad_v) {
        *v -= eta * g;
    }
    if mode == TrainMode::Realistic {
        let n = next.num_patches();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    next.a.set(i, j, next.a.get(i, j) - eta * grads.grad_a.get(i, j));
                }
            }
        }
    }
    Ok((next, grads.loss))
}

pub fn evaluate(params: &ModelParams, step: usize, train_loss: f64, eval: &EvalSet) -> Result<RunRecord> {
    let w = &eval.spec.w_star;
    let red = reduce_attention(&params.a, &eval.partition)?;
    let vnorm = norm(&params.v);
    Ok(RunRecord {
        step,
        train_loss,
        test_accuracy: accuracy_on(params, &eval.points, &eval.spec, &eval.partition)?.accuracy,
        cosine_sim: if vnorm > 0.0 { cosine_sim(&params.v, w)? } else { 0.0 },
        patch_assoc_score: patch_association_score(&params.a, &eval.partition)?.score,
        gamma_hat: red.gamma_hat,
        rho_hat: red.rho_hat,
        eps_v: residual_norm(&params.v, w),
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<RunRecord>,
    /// Set when the run stopped early; `history` then holds the partial log.
    pub diverged: Option<Error>,
}

/// Runs `cfg.steps` steps of GD from `params`, logging every `cfg.eval_every`
/// steps and at the end. `on_record` sees each record with the params it
/// describes.
pub fn train_from(
    mut params: ModelParams,
    cfg: &TrainConfig,
    points: &[DataPoint],
    eval: &EvalSet,
    mut on_record: impl FnMut(&RunRecord, &ModelParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut history = Vec::new();
    let mut push = |rec: RunRecord, params: &ModelParams, history: &mut Vec<RunRecord>| {
        on_record(&rec, params);
        history.push(rec);
    };
    for step in 0..cfg.steps {
        let result = gd_step(&params, points, cfg.eta, cfg.mode);
        let (next, loss) = match result {
            Ok(r) => r,
            Err(e) => {
                return Ok(TrainOutcome {
                    params,
                    history,
                    diverged: Some(Error::Divergence {
                        step,
                        reason: e.to_string(),
                    }),
                })
            }
        };
        if loss > DIVERGENCE_LOSS {
            return Ok(TrainOutcome {
                params,
                history,
                diverged: Some(Error::Divergence {
                    step,
                    reason: format!("loss {loss:e} exceeds {DIVERGENCE_LOSS:e}"),
                }),
            });
        }
        if step % cfg.eval_every == 0 {
            let rec = evaluate(&params, step, loss, eval)?;
            push(rec, &params, &mut history);
        }
        params = next;
    }
    let final_loss = batch_loss_and_grads_points(&params, points)?.loss;
    if !final_loss.is_finite() || final_loss > DIVERGENCE_LOSS {
        return Ok(TrainOutcome {
            params,
            history,
            diverged: Some(Error::Divergence {
                step: cfg.steps,
                reason: format!("final loss {final_loss:e}"),
            }),
        });
    }
    let rec = evaluate(&params, cfg.steps, final_loss, eval)?;
    push(rec, &params, &mut history);
    Ok(TrainOutcome {
        params,
        history,
        diverged: None,
    })
}

/// Initializes from `cfg.seed` and trains on `dataset`.
pub fn train(cfg: &TrainConfig, hyper: &ModelHyper, dataset: &Dataset, eval: &EvalSet) -> Result<TrainOutcome> {
    let streams = Streams::new(cfg.seed);
    let params = init_params(cfg, hyper, dataset.spec.d, dataset.spec.num_patches, &streams)?;
    train_from(params, cfg, &dataset.points, eval, |_, _| {})
}

/// Value-only GD with `A` frozen; `v` is re-drawn from `N(0, omega^2 I)`.
pub fn finetune_value(
    pretrained: &ModelParams,
    downstream: &[DataPoint],
    cfg: &TrainConfig,
    eval: &EvalSet,
) -> Result<TrainOutcome> {
    if cfg.mode != TrainMode::ValueOnly {
        return Err(invalid("finetune_value requires value-only mode"));
    }
    let mut params = pretrained.clone();
    let mut rng = Streams::new(cfg.seed).stream(purpose::INIT, 1);
    for v in &mut params.v {
        *v = cfg.omega * rng.sample::<f64, _>(StandardNormal);
    }
    train_from(params, cfg, downstream, eval, |_, _| {})
}

/// From `v = 0`, a single normalized step along the summed descent direction.
pub fn one_step_normalized_transfer(pretrained: &ModelParams, downstream: &[DataPoint]) -> Result<ModelParams> {
    let mut params = pretrained.clone();
    params.v.iter_mut().for_each(|v| *v = 0.0);
    let grads = batch_loss_and_grads_points(&params, downstream)?;
    // the mean gradient points the same way as the sum
    let g: Vec<f64> = grads.grad_v.iter().map(|g| -g).collect();
    let n = norm(&g);
    if !(n > 0.0 && n.is_finite()) {
        return Err(invalid("descent direction vanishes on this dataset"));
    }
    params.v = g.into_iter().map(|x| x / n).collect();
    Ok(params)
}

/// True when the off-diagonal of `a` is untouched relative to `b`.
pub fn attention_unchanged(a: &Matrix, b: &Matrix) -> bool {
    a.as_slice() == b.as_slice()
}
