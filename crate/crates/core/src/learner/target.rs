//! Q-targets and the gradient step.

use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use super::net::{argmax, ValueNet, MASKED_Q};
use super::replay::Transition;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Select with the online net, evaluate with the target net.
    Ddqn,
    /// Select and evaluate with the target net.
    Dqn,
}

/// `r + gamma * Q_target(o', argmax_a Q_online(o', a))`, or `r` when done.
pub fn ddqn_target(batch: &[&Transition], online: &ValueNet, target: &ValueNet, gamma: f64) -> Result<Vec<f64>> {
    q_target_with(batch, TargetKind::Ddqn, gamma, |_| (online, target))
}

/// `r + gamma * max_a Q_target(o', a)`, or `r` when done.
pub fn dqn_target(batch: &[&Transition], target: &ValueNet, gamma: f64) -> Result<Vec<f64>> {
    q_target_with(batch, TargetKind::Dqn, gamma, |_| (target, target))
}

/// Targets where each sample's `(online, target)` pair is looked up from its
/// `next_agent`. A next state with no valid slot bootstraps nothing.
pub fn q_target_with<'a, F>(batch: &[&Transition], kind: TargetKind, gamma: f64, nets: F) -> Result<Vec<f64>>
where
    F: Fn(Option<usize>) -> (&'a ValueNet, &'a ValueNet),
{
    let mut y: Vec<f64> = batch.iter().map(|t| t.r).collect();
    if gamma == 0.0 {
        return Ok(y);
    }
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, t) in batch.iter().enumerate() {
        if !t.done {
            groups.entry(t.next_agent).or_default().push(i);
        }
    }
    for (who, idx) in groups {
        let (online, target) = nets(who);
        let xs: Vec<&[f64]> = idx.iter().map(|&i| batch[i].o_next.as_slice()).collect();
        let qt = target.forward_batch(&xs)?;
        let qo = match kind {
            TargetKind::Ddqn => Some(online.forward_batch(&xs)?),
            TargetKind::Dqn => None,
        };
        for (k, &i) in idx.iter().enumerate() {
            let mask = &batch[i].mask_next;
            if mask.len() != target.output_dim() {
                return Err(Error::ShapeError(format!(
                    "mask has {} slots, net has {} outputs",
                    mask.len(),
                    target.output_dim()
                )));
            }
            let masked = |q: &[f64]| -> Vec<f64> {
                q.iter().zip(mask).map(|(&v, &ok)| if ok { v } else { MASKED_Q }).collect()
            };
            let pick = match &qo {
                Some(qo) => argmax(&masked(&qo[k])),
                None => argmax(&masked(&qt[k])),
            };
            if let Some(a) = pick {
                y[i] += gamma * qt[k][a];
            }
        }
    }
    Ok(y)
}

/// One plain gradient step on the batch's taken-action outputs. Returns the
/// loss before the step.
pub fn sgd_update(net: &mut ValueNet, batch: &[&Transition], y: &[f64], lr: f64) -> Result<f64> {
    let (loss, g) = batch_gradients(net, batch, y)?;
    net.apply_gradients(&g, lr);
    Ok(loss)
}

pub(crate) fn batch_gradients(
    net: &ValueNet,
    batch: &[&Transition],
    y: &[f64],
) -> Result<(f64, super::net::Gradients)> {
    let inputs: Vec<&[f64]> = batch.iter().map(|t| t.o.as_slice()).collect();
    let actions: Vec<usize> = batch.iter().map(|t| t.a).collect();
    let (loss, g) = net.loss_and_gradients(&inputs, &actions, y)?;
    if !loss.is_finite() {
        return Err(Error::DivergenceDetected {
            episode: 0,
            step: 0,
            detail: format!("loss is {loss}"),
        });
    }
    Ok((loss, g))
}
