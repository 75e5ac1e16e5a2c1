use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{loss_graph, RuleGroup};
use crate::avr::{ProblemInstance, TaskKind, TaskStructure};
use crate::error::{Error, Result};
use crate::model::{stack_instances, ForwardVars, ScarConfig, ScarModel};
use crate::sal::StructureSpec;
use crate::taskgen::{generate, GeneratorConfig};
use crate::tensor::{relative_error, Graph, ParamId, Tensor};

/// Settings of the end-to-end finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Compared entries outside `W*`.
    pub samples: usize,
    /// Compared entries of `W*`.
    pub w_star_samples: usize,
    /// `W*` blocks whose shared gradient is checked.
    pub sharing_blocks: usize,
    pub instances: usize,
    pub beta: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-4,
            tolerance: 1e-5,
            floor: 1e-7,
            samples: 200,
            w_star_samples: 60,
            sharing_blocks: 4,
            instances: 2,
            beta: 10.0,
        }
    }
}

/// One compared coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradEntry>,
    pub w_star_checked: usize,
    /// Drawn coordinates whose `±h` stencil switched a ReLU unit; the loss
    /// is not differentiable across the stencil there, so they were redrawn.
    pub kink_skips: usize,
    pub max_relative_error: f64,
    /// Largest relative error between a `W*` entry's gradient and
    /// `1/(d_r·d_c)` times the derivative along its whole block.
    pub sharing_max_error: f64,
    pub sharing_factor: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance && self.sharing_max_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

struct Problem {
    structure: TaskStructure,
    panels: Tensor<f64>,
    labels: Vec<usize>,
    targets: Tensor<f64>,
    beta: f64,
}

impl Problem {
    fn build(&self, g: &mut Graph<f64>, model: &ScarModel<f64>) -> Result<(ForwardVars, crate::tensor::Var)> {
        let vars = model.forward(g, &self.panels, &self.structure, true)?;
        let loss = loss_graph(
            g,
            model,
            &vars,
            self.structure.kind,
            &self.labels,
            Some(&self.targets),
            self.beta,
            RuleGroup::Label,
        )?;
        Ok((vars, loss.total))
    }

    /// Loss value and ReLU activity pattern.
    fn eval(&self, model: &ScarModel<f64>) -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::inference();
        let (_, loss) = self.build(&mut g, model)?;
        Ok((g.value(loss).item(), g.relu_pattern()))
    }
}

/// Central difference of the loss along `direction`, or `None` when the
/// stencil crosses a ReLU kink.
fn stencil(
    problem: &Problem,
    model: &ScarModel<f64>,
    id: ParamId,
    members: &[usize],
    h: f64,
    base: &[bool],
) -> Result<Option<f64>> {
    let mut scratch = model.clone();
    let mut at = |eps: f64| -> Result<(f64, Vec<bool>)> {
        let t = scratch.store_mut().get_mut(id);
        *t = model.store().get(id).clone();
        for &m in members {
            t.data_mut()[m] += eps;
        }
        problem.eval(&scratch)
    };
    let (up, p_up) = at(h)?;
    let (down, p_down) = at(-h)?;
    for (v, i) in [(up, members[0]), (down, members[0])] {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i, value: v });
        }
    }
    if p_up != base || p_down != base {
        return Ok(None);
    }
    Ok(Some((up - down) / (2.0 * h)))
}

/// Compares backpropagated gradients of the training loss (train-mode
/// batch statistics, CE plus β-weighted rule loss) on a few generated rpm
/// instances against central differences, in double precision.
pub fn gradient_check(config: &ScarConfig, gc: &GradcheckConfig) -> Result<GradcheckReport> {
    if gc.instances == 0 {
        return Err(Error::invalid("gradient check needs at least one instance"));
    }
    if !(gc.step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {}", gc.step)));
    }
    let mut gen = GeneratorConfig::new(TaskKind::Rpm, gc.instances, gc.seed);
    gen.height = config.panel_h;
    gen.width = config.panel_w;
    let batch: Vec<ProblemInstance<f64>> = generate(&gen)?
        .into_iter()
        .map(|g| ProblemInstance {
            panels: g.instance.panels.iter().map(Tensor::cast).collect(),
            label: g.instance.label,
            rules: g.instance.rules,
        })
        .collect();
    let rule_len = batch[0].rules.as_ref().map_or(0, Vec::len);
    let problem = Problem {
        structure: TaskStructure::rpm(),
        panels: stack_instances(&batch)?,
        labels: batch.iter().map(|i| i.label).collect(),
        targets: Tensor::new(
            vec![batch.len(), rule_len],
            batch
                .iter()
                .flat_map(|i| i.rules.iter().flatten().map(|&b| f64::from(b)))
                .collect(),
        )?,
        beta: gc.beta,
    };
    let mut model = ScarModel::<f64>::new(config.clone(), gc.seed)?;
    model.ensure_rule_head(TaskKind::Rpm, rule_len)?;

    let mut g = Graph::new();
    let (_, loss) = problem.build(&mut g, &model)?;
    let base = g.relu_pattern();
    let grads = g.backward(loss)?.param_map(model.store());

    let w_star = model
        .w_star_id()
        .ok_or_else(|| Error::invalid("gradient check needs the SAL aggregator"))?;
    let others: Vec<ParamId> = model.store().trainable_ids().filter(|&id| id != w_star).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut entries = Vec::new();
    let mut kink_skips = 0;
    let mut seen = std::collections::HashSet::new();
    let max_draws = 50 * (gc.samples + gc.w_star_samples).max(1);
    let mut draws = 0;
    let mut w_checked = 0;
    let mut other_checked = 0;
    while other_checked < gc.samples || w_checked < gc.w_star_samples {
        draws += 1;
        if draws > max_draws {
            return Err(Error::invalid(format!(
                "gradient check found only {} kink-free coordinates in {max_draws} draws",
                entries.len()
            )));
        }
        // Each tensor is visited once before uniform draws take over.
        let id = if other_checked < gc.samples {
            others.get(draws - 1).copied().unwrap_or_else(|| *others.choose(&mut rng).expect("parameters"))
        } else {
            w_star
        };
        let index = rng.gen_range(0..model.store().get(id).len());
        if !seen.insert((id, index)) {
            continue;
        }
        let Some(numeric) = stencil(&problem, &model, id, &[index], gc.step, &base)? else {
            kink_skips += 1;
            continue;
        };
        let analytic = grads[&id].data()[index];
        if id == w_star {
            w_checked += 1;
        } else {
            other_checked += 1;
        }
        entries.push(GradEntry {
            name: model.store().name(id).to_owned(),
            index,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric, gc.floor),
        });
    }

    // Shared gradient: moving a whole d_r × d_c block by ε moves the adapted
    // entry by ε, so each member's gradient is that derivative / (d_r·d_c).
    let cfg = model.config();
    let (d_r, d_c) = StructureSpec::from(&problem.structure).windows(cfg.big_r, cfg.big_c)?;
    let (big_c, d_h, d_v) = (cfg.big_c, cfg.d_h, cfg.d_v);
    let factor = 1.0 / (d_r * d_c) as f64;
    let (rows, cols) = (cfg.big_r / d_r, cfg.big_c / d_c);
    let w_grad = &grads[&w_star];
    let mut sharing_max_error: f64 = 0.0;
    let mut blocks = 0;
    let mut block_draws = 0;
    while blocks < gc.sharing_blocks {
        block_draws += 1;
        if block_draws > 50 * gc.sharing_blocks {
            return Err(Error::invalid("no kink-free W* block found for the sharing check"));
        }
        let (br, bc) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        let (i, j) = (rng.gen_range(0..d_h), rng.gen_range(0..d_v));
        let members: Vec<usize> = (0..d_r)
            .flat_map(|a| (0..d_c).map(move |b| (br * d_r + a, bc * d_c + b)))
            .map(|(r, c)| ((r * big_c + c) * d_h + i) * d_v + j)
            .collect();
        let Some(block) = stencil(&problem, &model, w_star, &members, gc.step, &base)? else {
            kink_skips += 1;
            continue;
        };
        blocks += 1;
        for &m in &members {
            sharing_max_error = sharing_max_error.max(relative_error(w_grad.data()[m], factor * block, gc.floor));
        }
    }

    let max_relative_error = entries.iter().map(|e| e.relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        w_star_checked: w_checked,
        entries,
        kink_skips,
        max_relative_error,
        sharing_max_error,
        sharing_factor: factor,
        tolerance: gc.tolerance,
    })
}
