//! WGAN-GP critic loss, the (K+1)-class semi-supervised task loss and their
//! weighted combinations for the discriminator and the generator.

use std::rc::Rc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `ln(1e-12)`: log-probabilities are floored here so `log(1 - p)` stays
/// finite when `p` reaches 1.
pub const LOG_FLOOR: f64 = -27.631_021_115_928_547;

/// Components of a discriminator or generator loss.
///
/// `multitask == sum_t w_t * per_task[t]` and
/// `total == alpha * wgan + multitask`, both exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub wgan: f64,
    pub per_task: Vec<(String, f64)>,
    pub multitask: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn assemble(
        wgan: f64,
        per_task: Vec<(String, f64)>,
        importance: &[f64],
        alpha: f64,
        lambda: f64,
    ) -> Self {
        assert_eq!(per_task.len(), importance.len(), "one importance per task");
        let multitask = per_task
            .iter()
            .zip(importance)
            .fold(0.0, |acc, ((_, l), w)| acc + w * l);
        LossBreakdown {
            wgan,
            per_task,
            multitask,
            total: alpha * wgan + multitask,
            alpha,
            lambda,
        }
    }
}

/// Supervision for one task inside a bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch<T> {
    pub task: usize,
    /// `[n, C, H, W]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub weights: Vec<T>,
}

/// Everything one discriminator update consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchBundle<T> {
    pub labeled: Vec<LabeledBatch<T>>,
    /// Real images drawn from the whole training pool.
    pub unlabeled: Tensor<T>,
    /// Generator outputs, same count as `unlabeled`.
    pub fake: Tensor<T>,
    /// One mixing weight per (unlabeled, fake) pair.
    pub interp_eps: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub alpha: f64,
    pub lambda: f64,
    /// Without it, only labelled terms remain (no critic, no K+1 terms).
    pub semi_supervised: bool,
}

/// `eps_i * real_i + (1 - eps_i) * fake_i`.
pub fn interpolate<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, eps: &[T]) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() || eps.len() != real.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?} with {} mixing weights", real.shape(), real.rows()),
            found: format!("{:?} with {} mixing weights", fake.shape(), eps.len()),
        });
    }
    if eps.iter().any(|e| !(*e >= T::zero() && *e <= T::one())) {
        return Err(Error::InvalidArgument(
            "mixing weights must lie in [0, 1]".into(),
        ));
    }
    let w = real.row_len();
    let mut out = fake.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let e = eps[i / w];
        *v = e * real.data()[i] + (T::one() - e) * *v;
    }
    Ok(out)
}

/// `lambda * mean_i (||grad_x D(x)_i||_2 - 1)^2`, where `critic` was computed
/// from `interp` on `g`. The result stays differentiable in the critic's
/// parameters.
pub fn gradient_penalty<'g, T: Scalar>(
    g: &'g Graph<T>,
    interp: Var<'g, T>,
    critic: Var<'g, T>,
    lambda: T,
) -> Result<Var<'g, T>> {
    let n = interp.shape()[0];
    let grad = match g.grad(critic.sum(), &[interp], true).pop().flatten() {
        Some(v) => v,
        None => g.constant(Tensor::zeros(&interp.shape())),
    };
    if !grad.value().all_finite() {
        return Err(Error::NonFiniteGradient);
    }
    // the tiny offset keeps the square root differentiable at a zero gradient
    let norm = grad
        .mul(grad)
        .row_sum()
        .add_scalar(T::of(1e-30))
        .powf(T::of(0.5));
    let dev = norm.add_scalar(-T::one());
    debug_assert_eq!(dev.shape(), vec![n]);
    Ok(dev.mul(dev).mean().scale(lambda))
}

/// `mean D(fake) - mean D(real) + penalty`.
pub fn critic_loss<'g, T: Scalar>(
    real_critic: Var<'g, T>,
    fake_critic: Var<'g, T>,
    penalty: Var<'g, T>,
) -> Var<'g, T> {
    fake_critic.mean().sub(real_critic.mean()).add(penalty)
}

/// The three terms of one task's semi-supervised loss.
pub struct TaskTerms<'g, T: Scalar> {
    pub labeled: Option<Var<'g, T>>,
    pub unlabeled: Option<Var<'g, T>>,
    pub fake: Option<Var<'g, T>>,
}

impl<'g, T: Scalar> TaskTerms<'g, T> {
    pub fn total(&self) -> Option<Var<'g, T>> {
        [self.labeled, self.unlabeled, self.fake]
            .into_iter()
            .flatten()
            .reduce(|a, b| a.add(b))
    }
}

fn check_finite<T: Scalar>(v: &Var<'_, T>) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLogit)
    }
}

/// `log p(fake class | x)` per row of `[N, K+1]` logits, floored.
pub fn log_prob_fake<'g, T: Scalar>(logits: Var<'g, T>) -> Var<'g, T> {
    let k = logits.shape()[1] - 1;
    logits
        .slice_cols(k, k + 1)
        .reshape(&[logits.shape()[0]])
        .sub(logits.logsumexp_rows())
        .max_const(T::of(LOG_FLOOR))
}

/// Semi-supervised loss for one task over `[N, K+1]` logit batches.
///
/// - labelled: `-(1/N) sum_i w_i log p(y_i | x_i, y < K+1)` (softmax over the
///   first `K` logits);
/// - unlabelled real: `-mean log(1 - p(K+1 | x))`;
/// - fake: `-mean log p(K+1 | G(z))`.
pub fn semisup_task_loss<'g, T: Scalar>(
    labeled: Option<(Var<'g, T>, &[usize], &[T])>,
    unlabeled: Option<Var<'g, T>>,
    fake: Option<Var<'g, T>>,
) -> Result<TaskTerms<'g, T>> {
    let floor = T::of(LOG_FLOOR);
    let labeled = match labeled {
        Some((logits, labels, weights)) if !labels.is_empty() => {
            check_finite(&logits)?;
            let k = logits.shape()[1] - 1;
            if labels.len() != logits.shape()[0] || weights.len() != labels.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} labels and weights", logits.shape()[0]),
                    found: format!("{} labels, {} weights", labels.len(), weights.len()),
                });
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: k,
                });
            }
            let picked = logits.pick_cols(Rc::new(labels.to_vec()));
            let log_p = picked
                .sub(logits.slice_cols(0, k).logsumexp_rows())
                .max_const(floor);
            let n = T::of(labels.len() as f64);
            Some(
                log_p
                    .row_scale(Rc::new(weights.to_vec()))
                    .sum()
                    .scale(-T::one() / n),
            )
        }
        _ => None,
    };
    let unlabeled = match unlabeled {
        Some(logits) if logits.shape()[0] > 0 => {
            check_finite(&logits)?;
            let k = logits.shape()[1] - 1;
            let log_real = logits
                .slice_cols(0, k)
                .logsumexp_rows()
                .sub(logits.logsumexp_rows())
                .max_const(floor);
            Some(log_real.mean().scale(-T::one()))
        }
        _ => None,
    };
    let fake = match fake {
        Some(logits) if logits.shape()[0] > 0 => {
            check_finite(&logits)?;
            Some(log_prob_fake(logits).mean().scale(-T::one()))
        }
        _ => None,
    };
    Ok(TaskTerms {
        labeled,
        unlabeled,
        fake,
    })
}

fn scalar_of<T: Scalar>(v: Option<Var<'_, T>>) -> f64 {
    v.map_or(0.0, |v| v.value().item().as_f64())
}

/// `alpha * L_wgan + sum_t w_t L_t` over one bundle.
///
/// Returns the differentiable total (in the discriminator's parameters
/// `params`) and its breakdown.
pub fn discriminator_loss<'g, T: Scalar>(
    g: &'g Graph<T>,
    d: &Discriminator<T>,
    params: &[Var<'g, T>],
    bundle: &BatchBundle<T>,
    importance: &[f64],
    opts: LossOptions,
) -> Result<(Var<'g, T>, LossBreakdown)> {
    let n_tasks = d.spec.heads.len();
    if importance.len() != n_tasks {
        return Err(Error::InvalidArgument(format!(
            "{} importances for {n_tasks} heads",
            importance.len()
        )));
    }
    let n_u = bundle.unlabeled.rows();
    let n_f = if opts.semi_supervised {
        bundle.fake.rows()
    } else {
        0
    };

    let mut parts: Vec<&Tensor<T>> = bundle.labeled.iter().map(|b| &b.images).collect();
    let mut offsets = Vec::with_capacity(bundle.labeled.len());
    let mut at = 0;
    for b in &bundle.labeled {
        offsets.push(at);
        at += b.images.rows();
    }
    let (u0, f0) = (at, at + n_u);
    if opts.semi_supervised {
        parts.push(&bundle.unlabeled);
        parts.push(&bundle.fake);
    }
    let x = Tensor::concat_rows(&parts)?;
    let out = d.forward_vars(params, g.constant(x));

    let mut task_vars: Vec<Option<Var<'g, T>>> = vec![None; n_tasks];
    let mut per_task = Vec::with_capacity(n_tasks);
    for (t, (name, _)) in d.spec.heads.iter().enumerate() {
        let logits = out.logits[t];
        let mut labeled = None;
        for (b, &off) in bundle.labeled.iter().zip(&offsets) {
            if b.task == t && !b.labels.is_empty() {
                labeled = Some((
                    logits.slice_rows(off, off + b.labels.len()),
                    b.labels.as_slice(),
                    b.weights.as_slice(),
                ));
            }
        }
        let (unl, fk) = if opts.semi_supervised {
            (
                Some(logits.slice_rows(u0, u0 + n_u)),
                Some(logits.slice_rows(f0, f0 + n_f)),
            )
        } else {
            (None, None)
        };
        let terms = semisup_task_loss(labeled, unl, fk)?;
        let total = terms.total();
        per_task.push((name.clone(), scalar_of(total)));
        task_vars[t] = total;
    }

    let mut loss: Option<Var<'g, T>> = None;
    let mut wgan_value = 0.0;
    if opts.semi_supervised {
        let real_c = out.critic.slice_rows(u0, u0 + n_u);
        let fake_c = out.critic.slice_rows(f0, f0 + n_f);
        let xhat = g.leaf(interpolate(
            &bundle.unlabeled,
            &bundle.fake,
            &bundle.interp_eps,
        )?);
        let hat_c = d.forward_vars(params, xhat).critic;
        let pen = gradient_penalty(g, xhat, hat_c, T::of(opts.lambda))?;
        let wgan = critic_loss(real_c, fake_c, pen);
        wgan_value = wgan.value().item().as_f64();
        loss = Some(wgan.scale(T::of(opts.alpha)));
    }
    for (v, &w) in task_vars.into_iter().zip(importance) {
        if let Some(v) = v {
            let term = v.scale(T::of(w));
            loss = Some(match loss {
                Some(l) => l.add(term),
                None => term,
            });
        }
    }
    let loss = loss.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())));
    let alpha = if opts.semi_supervised {
        opts.alpha
    } else {
        0.0
    };
    Ok((
        loss,
        LossBreakdown::assemble(wgan_value, per_task, importance, alpha, opts.lambda),
    ))
}

/// Generator loss on critic/logit outputs for a fake batch:
/// `alpha * (-mean D(G(z))) + sum_t w_t mean log p_t(K+1 | G(z))`.
pub fn generator_loss_from_outputs<'g, T: Scalar>(
    critic: Var<'g, T>,
    logits: &[Var<'g, T>],
    names: &[String],
    importance: &[f64],
    alpha: f64,
) -> Result<(Var<'g, T>, LossBreakdown)> {
    let wgan = critic.mean().scale(-T::one());
    let mut loss = wgan.scale(T::of(alpha));
    let mut per_task = Vec::with_capacity(logits.len());
    for ((l, name), &w) in logits.iter().zip(names).zip(importance) {
        check_finite(l)?;
        let term = log_prob_fake(*l).mean();
        per_task.push((name.clone(), term.value().item().as_f64()));
        loss = loss.add(term.scale(T::of(w)));
    }
    let wgan_value = wgan.value().item().as_f64();
    Ok((
        loss,
        LossBreakdown::assemble(wgan_value, per_task, importance, alpha, 0.0),
    ))
}

/// Generates from `z` and scores the fakes with a frozen discriminator.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<'g, T: Scalar>(
    g: &'g Graph<T>,
    gen: &Generator<T>,
    gen_params: &[Var<'g, T>],
    d: &Discriminator<T>,
    d_params: &[Var<'g, T>],
    z: Tensor<T>,
    importance: &[f64],
    alpha: f64,
) -> Result<(Var<'g, T>, LossBreakdown)> {
    let fake = gen.forward(gen_params, g.constant(z));
    let out = d.forward_vars(d_params, fake);
    let names: Vec<String> = d.spec.heads.iter().map(|(n, _)| n.clone()).collect();
    generator_loss_from_outputs(out.critic, &out.logits, &names, importance, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_constant_matches_ln() {
        assert_eq!(LOG_FLOOR, (1e-12f64).ln());
    }

    #[test]
    fn interpolate_endpoints_and_errors() {
        let r = Tensor::<f64>::full(&[2, 3], 1.0);
        let f = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(interpolate(&r, &f, &[1.0, 1.0]).unwrap(), r);
        assert_eq!(interpolate(&r, &f, &[0.0, 0.0]).unwrap(), f);
        assert!(interpolate(&r, &Tensor::zeros(&[2, 2]), &[0.5, 0.5]).is_err());
        assert!(interpolate(&r, &f, &[1.5, 0.0]).is_err());
    }

    #[test]
    fn label_range_and_nonfinite_logits() {
        let g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            semisup_task_loss(Some((l, &[3][..], &[1.0][..])), None, None),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
        let bad = g.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            semisup_task_loss(None, Some(bad), None),
            Err(Error::NonFiniteLogit)
        ));
    }
}
