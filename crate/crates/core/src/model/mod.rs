//! The SCAR network: panel encoder, SAL-based reasoner, score decoder, and
//! per-task rule heads.

mod config;
pub mod layers;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{Aggregator, Preset, ScarConfig};
use layers::{ChannelMixer, ConvBnRelu, Linear, Mlp, TokenMixer};

use crate::avr::{EmbeddingGroup, ProblemInstance, TaskKind, TaskStructure};
use crate::error::{Error, Result};
use crate::sal::{sal_graph, StructureSpec};
use crate::tensor::checkpoint::{decode_checkpoint, encode_stored, StoredTensor};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Checkpoint entry holding the flat [`ScarConfig`] record.
pub const CONFIG_ENTRY: &str = "meta.config";

/// Scores, probabilities, prediction and optional rule logits for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub scores: Vec<T>,
    pub probs: Vec<T>,
    pub prediction: usize,
    /// Rule logits for every answer group, when a rule head exists for the task.
    pub rule_logits: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> ModelOutput<T> {
    /// Softmax and argmax (lowest index on ties) over `scores`.
    pub fn from_scores(scores: Vec<T>, rule_logits: Option<Vec<Vec<T>>>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("model output needs at least one score"));
        }
        let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|&e| e / total).collect();
        let prediction = argmax(&probs);
        Ok(Self {
            scores,
            probs,
            prediction,
            rule_logits,
        })
    }
}

/// Index of the largest value; the lowest index wins ties, NaN never wins.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] || v[best].is_nan() && !x.is_nan() {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
struct Encoder {
    convs: Vec<ConvBnRelu>,
    spatial: Linear,
    mixer1: TokenMixer,
    channel: ChannelMixer,
    mixer2: TokenMixer,
}

#[derive(Clone, Debug)]
enum AggregatorLayer {
    Sal { w_star: ParamId, bias: Option<ParamId> },
    Rn { mlp: Mlp },
}

#[derive(Clone, Debug)]
struct Reasoner {
    aggregator: AggregatorLayer,
    channel: ChannelMixer,
    mixer: TokenMixer,
    out: Linear,
}

/// Graph handles produced by [`ScarModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[N, A]` answer scores.
    pub scores: Var,
    /// `[N·A, d_g]` group representations, instance-major.
    pub features: Var,
}

/// SCAR with a shared decoder and lazily created per-task rule heads.
#[derive(Clone, Debug)]
pub struct ScarModel<T> {
    config: ScarConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    reasoner: Reasoner,
    decoder: Mlp,
    rule_heads: BTreeMap<TaskKind, Mlp>,
    seed: u64,
}

impl<T: Scalar> ScarModel<T> {
    pub fn new(config: ScarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;

        let mut convs = Vec::with_capacity(4);
        let mut inputs = 1;
        for (i, &out) in c.conv_channels.iter().enumerate() {
            let stride = if i == 0 { 2 } else { 1 };
            convs.push(ConvBnRelu::new(
                &mut store,
                &format!("encoder.conv{i}"),
                inputs,
                out,
                stride,
                c.bn_momentum,
                c.bn_eps,
                &mut rng,
            )?);
            inputs = out;
        }
        let (hc, wc) = c.conv_hw();
        let c4 = c.conv_channels[3];
        let encoder = Encoder {
            convs,
            spatial: Linear::new(&mut store, "encoder.spatial", hc * wc, c.d_e, &mut rng)?,
            mixer1: TokenMixer::new(&mut store, "encoder.mixer1", c.d_e, c.encoder_mixer_hidden, c.ln_eps, &mut rng)?,
            channel: ChannelMixer::new(
                &mut store,
                "encoder.channel",
                (c4, c.encoder_channel_hidden, c.encoder_channel_out),
                c.encoder_channel_kernel,
                &mut rng,
            )?,
            mixer2: TokenMixer::new(&mut store, "encoder.mixer2", c.d_h, c.encoder_mixer_hidden, c.ln_eps, &mut rng)?,
        };

        let width = c.heads * c.d_v;
        let aggregator = match c.aggregator {
            Aggregator::Sal => {
                let bound = crate::sal::glorot_bound(c.d_h / c.heads, c.d_v);
                let w = Tensor::from_fn(vec![c.big_r, c.big_c, c.d_h, c.d_v], |_| {
                    T::lit(rng.gen_range(-bound..bound))
                });
                let w_star = store.add("reasoner.sal.w_star", w)?;
                let bias = if c.sal_bias {
                    Some(store.add("reasoner.sal.bias", Tensor::zeros(vec![c.heads, c.d_v]))?)
                } else {
                    None
                };
                AggregatorLayer::Sal { w_star, bias }
            }
            Aggregator::Rn { hidden } => AggregatorLayer::Rn {
                mlp: Mlp::new(&mut store, "reasoner.rn", 2 * c.d_h, hidden, width, &mut rng)?,
            },
        };
        let rw = c.reasoner_width();
        let reasoner = Reasoner {
            aggregator,
            channel: ChannelMixer::new(
                &mut store,
                "reasoner.channel",
                (c.d_v, c.reasoner_channel_hidden, c.reasoner_channel_out),
                1,
                &mut rng,
            )?,
            mixer: TokenMixer::new(&mut store, "reasoner.mixer", rw, c.reasoner_mixer_hidden, c.ln_eps, &mut rng)?,
            out: Linear::new(&mut store, "reasoner.out", rw, c.d_g, &mut rng)?,
        };
        let decoder = Mlp::new(&mut store, "decoder", c.d_g, c.d_g, 1, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            reasoner,
            decoder,
            rule_heads: BTreeMap::new(),
            seed,
        })
    }

    pub fn config(&self) -> &ScarConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Parameter id of `W*`, when the SAL aggregator is in use.
    pub fn w_star_id(&self) -> Option<ParamId> {
        match self.reasoner.aggregator {
            AggregatorLayer::Sal { w_star, .. } => Some(w_star),
            AggregatorLayer::Rn { .. } => None,
        }
    }

    pub fn rule_head_width(&self, task: TaskKind) -> Option<usize> {
        self.rule_heads.get(&task).map(|h| h.fc2.outputs)
    }

    pub fn rule_head_tasks(&self) -> impl Iterator<Item = TaskKind> + '_ {
        self.rule_heads.keys().copied()
    }

    /// Creates the rule head for `task` on first use.
    pub fn ensure_rule_head(&mut self, task: TaskKind, width: usize) -> Result<()> {
        if width == 0 {
            return Err(Error::invalid("rule head width must be positive"));
        }
        if let Some(existing) = self.rule_head_width(task) {
            if existing != width {
                return Err(Error::invalid(format!(
                    "rule head for {task} has width {existing}, requested {width}"
                )));
            }
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + u64::from(task.code()));
        let d_g = self.config.d_g;
        let head = Mlp::new(&mut self.store, &format!("rule_head.{task}"), d_g, d_g, width, &mut rng)?;
        self.rule_heads.insert(task, head);
        Ok(())
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> ScarModel<U> {
        ScarModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            reasoner: self.reasoner.clone(),
            decoder: self.decoder.clone(),
            rule_heads: self.rule_heads.clone(),
            seed: self.seed,
        }
    }

    /// Applies running-statistic refreshes queued during a train-mode pass.
    pub fn apply_stat_updates(&mut self, g: &mut Graph<T>) -> Result<()> {
        for (id, value) in g.take_stat_updates() {
            self.store.set(id, value)?;
        }
        Ok(())
    }

    // ---- graph builders -------------------------------------------------

    /// `[M, 1, h, w]` panels to `[M, d_h]` embeddings.
    pub fn encode(&self, g: &mut Graph<T>, x: Var, train: bool) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != c.panel_h || s[3] != c.panel_w {
            return Err(Error::shape(
                "encoder",
                format!("panels {s:?}, expected [M, 1, {}, {}]", c.panel_h, c.panel_w),
            ));
        }
        let m = s[0];
        let mut h = x;
        for conv in &self.encoder.convs {
            h = conv.forward(g, &self.store, h, train)?;
        }
        let hs = g.shape(h).to_vec();
        let h = g.reshape(h, &[m, hs[1], hs[2] * hs[3]])?;
        let h = self.encoder.spatial.forward(g, &self.store, h)?;
        let h = g.relu(h);
        let h = self.encoder.mixer1.forward(g, &self.store, h)?;
        let h = self.encoder.channel.forward(g, &self.store, h)?;
        let h = g.reshape(h, &[m, c.d_h])?;
        self.encoder.mixer2.forward(g, &self.store, h)
    }

    /// `[G, r·c, d_h]` groups to `[G, L·d_v]` through SAL or the RN ablation.
    pub fn aggregate(&self, g: &mut Graph<T>, groups: Var, structure: &TaskStructure) -> Result<Var> {
        match &self.reasoner.aggregator {
            AggregatorLayer::Sal { w_star, bias } => {
                let w = g.param(&self.store, *w_star);
                let b = bias.map(|b| g.param(&self.store, b));
                sal_graph(g, groups, w, b, self.config.heads, StructureSpec::from(structure))
            }
            AggregatorLayer::Rn { mlp } => self.rn_graph(g, mlp, groups),
        }
    }

    fn rn_graph(&self, g: &mut Graph<T>, mlp: &Mlp, groups: Var) -> Result<Var> {
        let s = g.shape(groups).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::shape("rn", format!("groups {s:?}, expected [G, I, d_h]")));
        }
        let n = s[1];
        if n < 2 {
            let z = g.constant(Tensor::zeros(vec![s[0], self.config.heads * self.config.d_v]));
            return Ok(z);
        }
        let (left, right): (Vec<usize>, Vec<usize>) = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .unzip();
        let a = g.gather(groups, 1, &left)?;
        let b = g.gather(groups, 1, &right)?;
        let pairs = g.concat(&[a, b], 2)?;
        let out = mlp.forward(g, &self.store, pairs)?;
        g.sum_axes(out, &[1])
    }

    /// `[G, r·c, d_h]` groups to `[G, d_g]` representations.
    pub fn reason(&self, g: &mut Graph<T>, groups: Var, structure: &TaskStructure) -> Result<Var> {
        let c = &self.config;
        let n = g.shape(groups)[0];
        let v = self.aggregate(g, groups, structure)?;
        let v = g.reshape(v, &[n, c.heads, c.d_v])?;
        let v = g.permute(v, &[0, 2, 1])?;
        let v = g.gelu(v);
        let v = self.reasoner.channel.forward(g, &self.store, v)?;
        let v = g.reshape(v, &[n, c.reasoner_width()])?;
        let v = self.reasoner.mixer.forward(g, &self.store, v)?;
        self.reasoner.out.forward(g, &self.store, v)
    }

    /// Full pass over a batch of panels `[N, P, h, w]` from one task.
    pub fn forward(&self, g: &mut Graph<T>, panels: &Tensor<T>, structure: &TaskStructure, train: bool) -> Result<ForwardVars> {
        let s = panels.shape();
        let p = structure.panels();
        if s.len() != 4 || s[1] != p {
            return Err(Error::shape(
                "scar",
                format!("batch {s:?}, expected [N, {p}, h, w] for {}", structure.kind),
            ));
        }
        let n = s[0];
        let x = g.constant(panels.reshape(vec![n * p, 1, s[2], s[3]])?);
        let h = self.encode(g, x, train)?;
        let arrangement = structure.arrangement();
        let a = arrangement.len();
        let cells = structure.group_size();
        let indices: Vec<usize> = (0..n)
            .flat_map(|i| arrangement.iter().flat_map(move |grp| grp.iter().map(move |&j| i * p + j)))
            .collect();
        let groups = g.gather(h, 0, &indices)?;
        let groups = g.reshape(groups, &[n * a, cells, self.config.d_h])?;
        let features = self.reason(g, groups, structure)?;
        let scores = self.decoder.forward(g, &self.store, features)?;
        let scores = g.reshape(scores, &[n, a])?;
        Ok(ForwardVars { scores, features })
    }

    /// Rule logits `[rows, |r|]` for selected rows of `features`.
    pub fn rule_logits(&self, g: &mut Graph<T>, task: TaskKind, features: Var, rows: Option<&[usize]>) -> Result<Var> {
        let head = self
            .rule_heads
            .get(&task)
            .ok_or_else(|| Error::invalid(format!("no rule head for {task}")))?;
        let f = match rows {
            Some(r) => g.gather(features, 0, r)?,
            None => features,
        };
        head.forward(g, &self.store, f)
    }

    // ---- value-level API ------------------------------------------------

    /// Eval-mode embedding of one `[h, w]` panel.
    pub fn encode_panel(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::shape("encoder", format!("panel {s:?}, expected [h, w]")));
        }
        let mut g = Graph::inference();
        let xv = g.constant(x.reshape(vec![1, 1, s[0], s[1]])?);
        let h = self.encode(&mut g, xv, false)?;
        Ok(g.value(h).data().to_vec())
    }

    fn group_var(&self, g: &mut Graph<T>, group: &EmbeddingGroup<T>) -> Result<Var> {
        if group.is_empty() {
            return Err(Error::invalid("empty embedding group"));
        }
        let t = group.to_tensor()?;
        let s = t.shape().to_vec();
        Ok(g.constant(t.reshape(vec![1, s[0], s[1]])?))
    }

    /// Eval-mode representation `g` of one candidate group.
    pub fn reason_group(&self, group: &EmbeddingGroup<T>, structure: &TaskStructure) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let x = self.group_var(&mut g, group)?;
        let out = self.reason(&mut g, x, structure)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Relation-network aggregation of one group (RN ablation models only).
    pub fn rn_aggregate(&self, group: &EmbeddingGroup<T>) -> Result<Vec<T>> {
        let AggregatorLayer::Rn { mlp } = &self.reasoner.aggregator else {
            return Err(Error::invalid("model was built with the SAL aggregator"));
        };
        let mut g = Graph::inference();
        let x = self.group_var(&mut g, group)?;
        let out = self.rn_graph(&mut g, mlp, x)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Eval-mode output for a single instance.
    pub fn scar_forward(&self, instance: &ProblemInstance<T>, structure: &TaskStructure) -> Result<ModelOutput<T>> {
        Ok(self.predict(std::slice::from_ref(instance), structure)?.remove(0))
    }

    /// Eval-mode outputs for instances of one task, batched.
    pub fn predict(&self, instances: &[ProblemInstance<T>], structure: &TaskStructure) -> Result<Vec<ModelOutput<T>>> {
        if instances.is_empty() {
            return Ok(Vec::new());
        }
        for inst in instances {
            inst.validate(structure)?;
        }
        let panels = stack_instances(instances)?;
        let mut g = Graph::inference();
        let vars = self.forward(&mut g, &panels, structure, false)?;
        let a = structure.answers;
        let rules = if self.rule_heads.contains_key(&structure.kind) {
            let r = self.rule_logits(&mut g, structure.kind, vars.features, None)?;
            let width = g.shape(r)[1];
            Some(g.value(r).data().chunks(width).map(<[T]>::to_vec).collect::<Vec<_>>())
        } else {
            None
        };
        let scores = g.value(vars.scores).data();
        (0..instances.len())
            .map(|i| {
                let rl = rules.as_ref().map(|r| r[i * a..(i + 1) * a].to_vec());
                ModelOutput::from_scores(scores[i * a..(i + 1) * a].to_vec(), rl)
            })
            .collect()
    }

    // ---- checkpoints ----------------------------------------------------

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, StoredTensor)> = self
            .store
            .iter()
            .map(|(name, t)| (name.to_owned(), StoredTensor::from_tensor(t)))
            .collect();
        let cfg = self.config.to_vec();
        entries.push((
            CONFIG_ENTRY.to_owned(),
            StoredTensor::Double(Tensor::new(vec![cfg.len()], cfg)?),
        ));
        encode_stored(&entries)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = decode_checkpoint(bytes)?;
        let config = entries
            .iter()
            .find(|(n, _)| n == CONFIG_ENTRY)
            .map(|(_, t)| ScarConfig::from_slice(t.to_precision::<f64>().data()))
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{CONFIG_ENTRY}`")))??;
        let mut model = Self::new(config, 0)?;
        for (name, t) in &entries {
            if let Some(rest) = name.strip_prefix("rule_head.") {
                if let Some(task) = rest.strip_suffix(".fc2.bias") {
                    model.ensure_rule_head(task.parse()?, t.shape()[0])?;
                }
            }
        }
        let mut seen = vec![false; model.store.len()];
        for (name, t) in &entries {
            if name == CONFIG_ENTRY {
                continue;
            }
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::invalid(format!("unexpected checkpoint entry `{name}`")))?;
            model.store.set(id, t.to_precision())?;
            seen[id.index()] = true;
        }
        if let Some(missing) = model.store.ids().find(|id| !seen[id.index()]) {
            return Err(Error::invalid(format!(
                "checkpoint lacks `{}`",
                model.store.name(missing)
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tensor::checkpoint::write_checkpoint_bytes(path, &self.to_checkpoint_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Stacks instances into a `[N, P, h, w]` batch.
pub fn stack_instances<T: Scalar>(instances: &[ProblemInstance<T>]) -> Result<Tensor<T>> {
    let first = instances
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let p = first.panels.len();
    let (h, w) = first.panel_hw().ok_or_else(|| Error::invalid("instance without panels"))?;
    let mut data = Vec::with_capacity(instances.len() * p * h * w);
    for inst in instances {
        if inst.panels.len() != p || inst.panels.iter().any(|x| x.shape() != [h, w]) {
            return Err(Error::shape("batch", "instances differ in panel count or size"));
        }
        for x in &inst.panels {
            data.extend_from_slice(x.data());
        }
    }
    Tensor::new(vec![instances.len(), p, h, w], data)
}
