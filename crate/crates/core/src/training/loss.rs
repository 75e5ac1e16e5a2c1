use std::fmt;
use std::str::FromStr;

use crate::avr::TaskKind;
use crate::error::{Error, Result};
use crate::model::{argmax, ForwardVars, ModelOutput, ScarModel};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Which candidate groups' rule logits enter the auxiliary loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RuleGroup {
    /// The group completed by the correct answer.
    #[default]
    Label,
    /// The group the model currently ranks first.
    Predicted,
    /// Every group, averaged.
    Mean,
}

impl fmt::Display for RuleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleGroup::Label => "label",
            RuleGroup::Predicted => "predicted",
            RuleGroup::Mean => "mean",
        })
    }
}

impl FromStr for RuleGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(RuleGroup::Label),
            "predicted" => Ok(RuleGroup::Predicted),
            "mean" => Ok(RuleGroup::Mean),
            other => Err(Error::invalid(format!("unknown rule group `{other}`"))),
        }
    }
}

/// Total loss and its two components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub aux: f64,
}

/// `CE(scores, label) + β · BCE(rule logits, target)`, with the rule logits
/// taken from the groups `group` selects.
///
/// The auxiliary term is zero when the instance carries no rule annotation
/// or the output has no rule logits.
pub fn compute_loss<T: Scalar>(
    output: &ModelOutput<T>,
    label: usize,
    rule_target: Option<&[u8]>,
    beta: f64,
    group: RuleGroup,
) -> Result<LossParts> {
    let scores: Vec<f64> = output.scores.iter().map(|s| s.to_f64_lossy()).collect();
    if label >= scores.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} answers",
            scores.len()
        )));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let ce = lse - scores[label];
    let aux = match (rule_target, &output.rule_logits) {
        (Some(target), Some(logits)) => {
            if let Some(z) = logits.iter().find(|z| z.len() != target.len()) {
                return Err(Error::invalid(format!(
                    "rule target has {} entries, rule head emits {}",
                    target.len(),
                    z.len()
                )));
            }
            let bce = |k: usize| mean_bce(logits[k].iter().map(|v| v.to_f64_lossy()), target);
            match group {
                RuleGroup::Label => bce(label),
                RuleGroup::Predicted => bce(output.prediction),
                RuleGroup::Mean => (0..logits.len()).map(bce).sum::<f64>() / logits.len() as f64,
            }
        }
        _ => 0.0,
    };
    Ok(LossParts {
        total: ce + beta * aux,
        ce,
        aux,
    })
}

fn mean_bce(logits: impl Iterator<Item = f64>, target: &[u8]) -> f64 {
    let total: f64 = logits
        .zip(target)
        .map(|(z, &t)| z.max(0.0) - z * f64::from(t) + (-z.abs()).exp().ln_1p())
        .sum();
    total / target.len() as f64
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub ce: Var,
    pub aux: Option<Var>,
}

/// Batch-mean loss on the graph. `rule_targets` is `[N, |r|]` when the
/// batch is annotated and the model has a rule head for `task`.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &ScarModel<T>,
    vars: &ForwardVars,
    task: TaskKind,
    labels: &[usize],
    rule_targets: Option<&Tensor<T>>,
    beta: f64,
    group: RuleGroup,
) -> Result<BatchLoss> {
    let ce = g.cross_entropy_with_logits(vars.scores, labels)?;
    let Some(targets) = rule_targets else {
        return Ok(BatchLoss { total: ce, ce, aux: None });
    };
    let answers = g.shape(vars.scores)[1];
    let (logits, targets) = match group {
        RuleGroup::Label | RuleGroup::Predicted => {
            let picks: Vec<usize> = match group {
                RuleGroup::Label => labels.to_vec(),
                _ => g.value(vars.scores).data().chunks(answers).map(argmax).collect(),
            };
            let rows: Vec<usize> = picks.iter().enumerate().map(|(i, &k)| i * answers + k).collect();
            (model.rule_logits(g, task, vars.features, Some(&rows))?, targets.clone())
        }
        RuleGroup::Mean => {
            // Every group of instance i shares instance i's target row.
            let width = targets.shape().get(1).copied().unwrap_or(0);
            let data: Vec<T> = targets
                .data()
                .chunks(width.max(1))
                .flat_map(|row| std::iter::repeat_n(row, answers).flatten().copied())
                .collect();
            let repeated = Tensor::new(vec![labels.len() * answers, width], data)?;
            (model.rule_logits(g, task, vars.features, None)?, repeated)
        }
    };
    let aux = g.bce_with_logits(logits, &targets)?;
    let weighted = g.scale(aux, T::lit(beta));
    let total = g.add(ce, weighted)?;
    Ok(BatchLoss {
        total,
        ce,
        aux: Some(aux),
    })
}
