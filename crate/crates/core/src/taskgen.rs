//! Procedural toy RPM / VAP / O3 instances.
//!
//! Every panel shows `count` copies of one shape at one size and shade. Rows
//! of a matrix follow per-attribute relations; attributes no rule governs
//! hold one value across the whole instance, answers included. Each instance
//! draws from its own ChaCha8
//! stream keyed by `(seed, instance index)`, so output is independent of the
//! worker count.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avr::{ProblemInstance, TaskKind, TaskStructure};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attempts per instance before giving up on a rule combination.
pub const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Shape,
    Size,
    Shade,
    Count,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Shape, Attribute::Size, Attribute::Shade, Attribute::Count];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Number of levels: 5 shapes, 3 sizes, 4 shades, counts 1..=4.
    pub fn levels(self) -> usize {
        match self {
            Attribute::Shape => 5,
            Attribute::Size => 3,
            Attribute::Shade => 4,
            Attribute::Count => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Size => "size",
            Attribute::Shade => "shade",
            Attribute::Count => "count",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Constant,
    Progression,
    DistributeThree,
    /// One panel deviates from an otherwise shared value (O3 only).
    Odd,
}

impl Relation {
    pub fn name(self) -> &'static str {
        match self {
            Relation::Constant => "constant",
            Relation::Progression => "progression",
            Relation::DistributeThree => "distribute_three",
            Relation::Odd => "odd",
        }
    }
}

/// An `(attribute, relation)` pair, written `attribute:relation`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rule {
    pub attribute: Attribute,
    pub relation: Relation,
}

impl Rule {
    pub fn new(attribute: Attribute, relation: Relation) -> Self {
        Self { attribute, relation }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.attribute.name(), self.relation.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, r) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("rule `{s}` is not of the form attribute:relation")))?;
        let attribute = Attribute::ALL
            .into_iter()
            .find(|x| x.name() == a.trim())
            .ok_or_else(|| Error::invalid(format!("unknown attribute `{a}`")))?;
        let relation = [
            Relation::Constant,
            Relation::Progression,
            Relation::DistributeThree,
            Relation::Odd,
        ]
        .into_iter()
        .find(|x| x.name() == r.trim())
        .ok_or_else(|| Error::invalid(format!("unknown relation `{r}`")))?;
        Ok(Rule::new(attribute, relation))
    }
}

/// Ordered rule vocabulary for a task kind: 12 pairs for grids, 4 for O3.
pub fn vocabulary(kind: TaskKind) -> Vec<Rule> {
    match kind {
        TaskKind::O3 => Attribute::ALL.iter().map(|&a| Rule::new(a, Relation::Odd)).collect(),
        _ => Attribute::ALL
            .iter()
            .flat_map(|&a| {
                [Relation::Constant, Relation::Progression, Relation::DistributeThree]
                    .into_iter()
                    .map(move |r| Rule::new(a, r))
            })
            .collect(),
    }
}

/// Active rules of one instance; O3 also records the deviant level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleSpec {
    pub rules: Vec<Rule>,
    pub deviant: Option<usize>,
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.rules.iter().map(Rule::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Multi-hot encoding of `spec` over `vocabulary`.
pub fn encode_rules(spec: &RuleSpec, vocabulary: &[Rule]) -> Result<Vec<u8>> {
    let mut bits = vec![0u8; vocabulary.len()];
    for rule in &spec.rules {
        let i = vocabulary
            .iter()
            .position(|v| v == rule)
            .ok_or_else(|| Error::invalid(format!("rule {rule} is not in the vocabulary")))?;
        bits[i] = 1;
    }
    Ok(bits)
}

/// Inverse of [`encode_rules`]; rules come back in vocabulary order.
pub fn decode_rules(bits: &[u8], vocabulary: &[Rule]) -> Result<RuleSpec> {
    if bits.len() != vocabulary.len() {
        return Err(Error::invalid(format!(
            "rule vector has {} bits, vocabulary has {}",
            bits.len(),
            vocabulary.len()
        )));
    }
    let mut rules = Vec::new();
    for (&b, &rule) in bits.iter().zip(vocabulary) {
        match b {
            0 => {}
            1 => rules.push(rule),
            other => return Err(Error::invalid(format!("rule bit {other} is not 0 or 1"))),
        }
    }
    Ok(RuleSpec { rules, deviant: None })
}

/// Attribute levels of one panel. `count` is stored as `count − 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PanelSpec {
    levels: [usize; 4],
}

impl PanelSpec {
    /// `count` is the number of objects, `1..=4`.
    pub fn new(shape: usize, size: usize, shade: usize, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("object count must be at least 1"));
        }
        Self::from_levels([shape, size, shade, count - 1])
    }

    pub fn from_levels(levels: [usize; 4]) -> Result<Self> {
        for a in Attribute::ALL {
            if levels[a.index()] >= a.levels() {
                return Err(Error::invalid(format!(
                    "{} level {} outside 0..{}",
                    a.name(),
                    levels[a.index()],
                    a.levels()
                )));
            }
        }
        Ok(Self { levels })
    }

    fn random(rng: &mut impl Rng) -> Self {
        Self {
            levels: Attribute::ALL.map(|a| rng.gen_range(0..a.levels())),
        }
    }

    pub fn level(&self, a: Attribute) -> usize {
        self.levels[a.index()]
    }

    fn set(&mut self, a: Attribute, level: usize) {
        self.levels[a.index()] = level;
    }

    pub fn shape(&self) -> usize {
        self.levels[0]
    }

    pub fn size(&self) -> usize {
        self.levels[1]
    }

    pub fn shade(&self) -> usize {
        self.levels[2]
    }

    pub fn count(&self) -> usize {
        self.levels[3] + 1
    }
}

/// Grey level of a shade: `1 − 0.25·(shade + 1)` on a white background.
pub fn shade_intensity(shade: usize) -> f32 {
    1.0 - 0.25 * (shade as f32 + 1.0)
}

/// Object centres `(y, x)` as fractions of the panel, per count.
fn centres(count: usize) -> &'static [(f64, f64)] {
    match count {
        1 => &[(0.5, 0.5)],
        2 => &[(0.5, 0.25), (0.5, 0.75)],
        3 => &[(0.25, 0.25), (0.25, 0.75), (0.75, 0.5)],
        _ => &[(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)],
    }
}

const RADIUS_FRACTION: [f64; 3] = [0.14, 0.19, 0.24];

/// Outline of a shape of circumradius `r` centred at the origin, as `(y, x)`
/// vertices in counter-clockwise order; `None` for the circle.
fn outline(shape: usize, r: f64) -> Option<Vec<(f64, f64)>> {
    if shape == 0 {
        return None;
    }
    let sides = shape + 2;
    // Squares are drawn axis-aligned; other polygons point upwards.
    let offset = if sides == 4 {
        std::f64::consts::FRAC_PI_4
    } else {
        -std::f64::consts::FRAC_PI_2
    };
    Some(
        (0..sides)
            .map(|i| {
                let t = offset + std::f64::consts::TAU * i as f64 / sides as f64;
                (r * t.sin(), r * t.cos())
            })
            .collect(),
    )
}

fn inside(outline: Option<&[(f64, f64)]>, dy: f64, dx: f64, r: f64) -> bool {
    if dy.abs() > r || dx.abs() > r {
        return false;
    }
    match outline {
        None => dy * dy + dx * dx <= r * r,
        Some(v) => (0..v.len()).all(|i| {
            let (ay, ax) = v[i];
            let (by, bx) = v[(i + 1) % v.len()];
            (bx - ax) * (dy - ay) - (by - ay) * (dx - ax) >= 0.0
        }),
    }
}

/// Rasterises `spec` into an `[h, w]` image with crisp edges.
pub fn render_panel(spec: &PanelSpec, h: usize, w: usize) -> Tensor<f32> {
    let ink = shade_intensity(spec.shade());
    let r = RADIUS_FRACTION[spec.size()] * h.min(w) as f64;
    let poly = outline(spec.shape(), r);
    let objects: Vec<(f64, f64)> = centres(spec.count())
        .iter()
        .map(|&(fy, fx)| (fy * h as f64, fx * w as f64))
        .collect();
    Tensor::from_fn(vec![h, w], |i| {
        let (py, px) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        let hit = objects
            .iter()
            .any(|&(cy, cx)| inside(poly.as_deref(), py - cy, px - cx, r));
        if hit {
            ink
        } else {
            1.0
        }
    })
}

/// Generator settings for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub kind: TaskKind,
    /// Panel count for O3 (5..=7 in the toy suite); ignored for grids.
    pub o3_panels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub count: usize,
    /// Rules an instance may draw from.
    pub allowed: Vec<Rule>,
    /// Upper bound on simultaneously active rules (grids only).
    pub max_rules: usize,
    /// Reserved for distracting background features; must stay off.
    pub distractor_features: bool,
}

impl GeneratorConfig {
    /// Every vocabulary rule allowed, up to two active at once, 32×32 panels.
    pub fn new(kind: TaskKind, count: usize, seed: u64) -> Self {
        Self {
            kind,
            o3_panels: 5,
            height: 32,
            width: 32,
            seed,
            count,
            allowed: vocabulary(kind),
            max_rules: 2,
            distractor_features: false,
        }
    }

    pub fn with_rules(mut self, rules: Vec<Rule>) -> Self {
        self.allowed = rules;
        self
    }

    pub fn structure(&self) -> Result<TaskStructure> {
        match self.kind {
            TaskKind::Rpm => Ok(TaskStructure::rpm()),
            TaskKind::Vap => Ok(TaskStructure::vap()),
            TaskKind::O3 => TaskStructure::o3(self.o3_panels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.structure()?;
        if self.count == 0 {
            return Err(Error::invalid("instance count must be positive"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "panels must be at least 8×8, got {}×{}",
                self.height, self.width
            )));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::invalid("panel size exceeds 65535"));
        }
        if self.allowed.is_empty() {
            return Err(Error::invalid("at least one rule must be allowed"));
        }
        let vocab = vocabulary(self.kind);
        if let Some(bad) = self.allowed.iter().find(|r| !vocab.contains(r)) {
            return Err(Error::invalid(format!("rule {bad} is not valid for {}", self.kind)));
        }
        if self.max_rules == 0 {
            return Err(Error::invalid("max_rules must be positive"));
        }
        if self.distractor_features {
            return Err(Error::invalid("distractor features are not supported"));
        }
        Ok(())
    }
}

/// A rendered instance together with its symbolic description.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedInstance {
    pub instance: ProblemInstance<f32>,
    pub spec: RuleSpec,
    pub panels: Vec<PanelSpec>,
}

/// Worker threads from `SAL_LAB_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var("SAL_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Generates `config.count` instances using [`worker_threads`] workers.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<GeneratedInstance>> {
    generate_with_threads(config, worker_threads())
}

pub fn generate_with_threads(config: &GeneratorConfig, threads: usize) -> Result<Vec<GeneratedInstance>> {
    config.validate()?;
    let threads = threads.clamp(1, config.count.max(1));
    if threads == 1 {
        return (0..config.count).map(|i| generate_one(config, i as u64)).collect();
    }
    let per = config.count.div_ceil(threads);
    let chunks: Vec<Result<Vec<GeneratedInstance>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = (t * per).min(config.count)..((t + 1) * per).min(config.count);
                scope.spawn(move || range.map(|i| generate_one(config, i as u64)).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(config.count);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Instance `index` of the dataset described by `config`.
pub fn generate_one(config: &GeneratorConfig, index: u64) -> Result<GeneratedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let structure = config.structure()?;
    let mut last_spec = None;
    for _ in 0..MAX_ATTEMPTS {
        let spec = sample_rules(config, &mut rng);
        let attempt = match config.kind {
            TaskKind::O3 => build_o3(&spec, &structure, &mut rng),
            _ => build_grid(&spec, &structure, &mut rng),
        };
        if let Some((mut spec, panels, label)) = attempt {
            if let TaskKind::O3 = config.kind {
                spec.deviant = Some(panels[label].level(spec.rules[0].attribute));
            }
            let rules = encode_rules(&spec, &vocabulary(config.kind))?;
            let images = panels
                .iter()
                .map(|p| render_panel(p, config.height, config.width))
                .collect();
            return Ok(GeneratedInstance {
                instance: ProblemInstance {
                    panels: images,
                    label,
                    rules: Some(rules),
                },
                spec,
                panels,
            });
        }
        last_spec = Some(spec);
    }
    Err(Error::Infeasible {
        rules: last_spec.map(|s| s.to_string()).unwrap_or_default(),
        attempts: MAX_ATTEMPTS,
    })
}

fn sample_rules(config: &GeneratorConfig, rng: &mut impl Rng) -> RuleSpec {
    let mut attrs: Vec<Attribute> = Attribute::ALL
        .into_iter()
        .filter(|a| config.allowed.iter().any(|r| r.attribute == *a))
        .collect();
    let limit = match config.kind {
        TaskKind::O3 => 1,
        _ => config.max_rules.min(attrs.len()),
    };
    let k = rng.gen_range(1..=limit);
    attrs.shuffle(rng);
    let mut rules: Vec<Rule> = attrs[..k]
        .iter()
        .map(|&a| {
            let options: Vec<Rule> = config.allowed.iter().copied().filter(|r| r.attribute == a).collect();
            *options.choose(rng).expect("attribute has an allowed rule")
        })
        .collect();
    rules.sort();
    RuleSpec { rules, deviant: None }
}

/// Values of one governed attribute over a `rows × 3` grid.
fn row_values(relation: Relation, levels: usize, rows: usize, rng: &mut impl Rng) -> Vec<[usize; 3]> {
    match relation {
        Relation::Constant => (0..rows)
            .map(|_| {
                let v = rng.gen_range(0..levels);
                [v, v, v]
            })
            .collect(),
        Relation::Progression => {
            let up = rng.gen_bool(0.5);
            (0..rows)
                .map(|_| {
                    let a = rng.gen_range(0..levels - 2);
                    if up {
                        [a, a + 1, a + 2]
                    } else {
                        [a + 2, a + 1, a]
                    }
                })
                .collect()
        }
        Relation::DistributeThree => {
            let mut all: Vec<usize> = (0..levels).collect();
            all.shuffle(rng);
            let v = [all[0], all[1], all[2]];
            (0..rows).map(|r| [v[r % 3], v[(r + 1) % 3], v[(r + 2) % 3]]).collect()
        }
        Relation::Odd => unreachable!("odd-one-out rules only apply to O3"),
    }
}

fn build_grid(spec: &RuleSpec, s: &TaskStructure, rng: &mut impl Rng) -> Option<(RuleSpec, Vec<PanelSpec>, usize)> {
    let cells = s.rows * s.cols;
    // Attributes no rule governs keep one value across the whole instance.
    let mut grid = vec![PanelSpec::random(rng); cells];
    for rule in &spec.rules {
        let values = row_values(rule.relation, rule.attribute.levels(), s.rows, rng);
        for (r, row) in values.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                grid[r * s.cols + c].set(rule.attribute, v);
            }
        }
    }
    let correct = grid[cells - 1];
    let label = rng.gen_range(0..s.answers);
    let mut answers = Vec::with_capacity(s.answers);
    for k in 0..s.answers {
        if k == label {
            answers.push(correct);
            continue;
        }
        let mut d = correct;
        let n = spec.rules.len();
        let mask = rng.gen_range(1..(1u32 << n));
        for (i, rule) in spec.rules.iter().enumerate() {
            if mask & (1 << i) != 0 {
                let a = rule.attribute;
                let shift = rng.gen_range(1..a.levels());
                d.set(a, (correct.level(a) + shift) % a.levels());
            }
        }
        answers.push(d);
    }
    let mut panels: Vec<PanelSpec> = grid[..s.context].to_vec();
    panels.extend(answers);
    Some((spec.clone(), panels, label))
}

fn build_o3(spec: &RuleSpec, s: &TaskStructure, rng: &mut impl Rng) -> Option<(RuleSpec, Vec<PanelSpec>, usize)> {
    let p = s.answers;
    let odd = spec.rules[0].attribute;
    let shared = rng.gen_range(0..odd.levels());
    let deviant = (shared + rng.gen_range(1..odd.levels())) % odd.levels();
    let label = rng.gen_range(0..p);
    let base = PanelSpec::random(rng);
    let panels: Vec<PanelSpec> = (0..p)
        .map(|j| {
            let mut x = base;
            x.set(odd, if j == label { deviant } else { shared });
            x
        })
        .collect();
    let ambiguous = Attribute::ALL
        .into_iter()
        .filter(|&a| a != odd)
        .any(|a| odd_index(&panels, a).is_some());
    (!ambiguous).then(|| (spec.clone(), panels, label))
}

/// Index of the single panel whose `a` differs from all others, which share one value.
fn odd_index(panels: &[PanelSpec], a: Attribute) -> Option<usize> {
    let p = panels.len();
    (0..p).find(|&k| {
        let others: Vec<usize> = (0..p).filter(|&j| j != k).map(|j| panels[j].level(a)).collect();
        others.iter().all(|&v| v == others[0]) && panels[k].level(a) != others[0]
    })
}

fn row_satisfies(rule: Rule, rows: &[[usize; 3]]) -> bool {
    match rule.relation {
        Relation::Constant => rows.iter().all(|r| r[0] == r[1] && r[1] == r[2]),
        Relation::Progression => {
            let d = rows[0][1] as isize - rows[0][0] as isize;
            d.abs() == 1
                && rows.iter().all(|r| {
                    r[1] as isize - r[0] as isize == d && r[2] as isize - r[1] as isize == d
                })
        }
        Relation::DistributeThree => {
            let v = rows[0];
            v[0] != v[1] && v[1] != v[2] && v[0] != v[2]
                && rows
                    .iter()
                    .enumerate()
                    .all(|(i, r)| (0..3).all(|j| r[j] == v[(j + i) % 3]))
        }
        Relation::Odd => false,
    }
}

/// Answers whose completion satisfies every active rule.
///
/// Grids: each candidate completes the `r × c` grid and is checked row by
/// row. O3: the panel whose odd attribute is the lone deviant.
pub fn satisfying_answers(spec: &RuleSpec, panels: &[PanelSpec], structure: &TaskStructure) -> Vec<usize> {
    if structure.kind == TaskKind::O3 {
        let Some(rule) = spec.rules.first() else {
            return Vec::new();
        };
        let others_clear = Attribute::ALL
            .into_iter()
            .filter(|&a| a != rule.attribute)
            .all(|a| odd_index(panels, a).is_none());
        return match odd_index(panels, rule.attribute) {
            Some(k) if others_clear => vec![k],
            _ => Vec::new(),
        };
    }
    (0..structure.answers)
        .filter(|&k| {
            let mut grid: Vec<PanelSpec> = panels[..structure.context].to_vec();
            grid.push(panels[structure.context + k]);
            spec.rules.iter().all(|&rule| {
                let rows: Vec<[usize; 3]> = (0..structure.rows)
                    .map(|r| {
                        let at = |c: usize| grid[r * structure.cols + c].level(rule.attribute);
                        [at(0), at(1), at(2)]
                    })
                    .collect();
                row_satisfies(rule, &rows)
            })
        })
        .collect()
}

/// The unique rule-consistent answer, or `None` when there is not exactly one.
pub fn solve(generated: &GeneratedInstance, structure: &TaskStructure) -> Option<usize> {
    match satisfying_answers(&generated.spec, &generated.panels, structure).as_slice() {
        [k] => Some(*k),
        _ => None,
    }
}

/// Plain problem instances of a generated set.
pub fn instances(generated: Vec<GeneratedInstance>) -> Vec<ProblemInstance<f32>> {
    generated.into_iter().map(|g| g.instance).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_sizes() {
        assert_eq!(vocabulary(TaskKind::Rpm).len(), 12);
        assert_eq!(vocabulary(TaskKind::Vap).len(), 12);
        assert_eq!(vocabulary(TaskKind::O3).len(), 4);
    }

    #[test]
    fn rule_parsing() {
        let r: Rule = "shape:distribute_three".parse().unwrap();
        assert_eq!(r, Rule::new(Attribute::Shape, Relation::DistributeThree));
        assert_eq!(r.to_string(), "shape:distribute_three");
        assert!("colour:constant".parse::<Rule>().is_err());
        assert!("shape".parse::<Rule>().is_err());
    }

    #[test]
    fn zero_count_rejected() {
        assert!(PanelSpec::new(0, 0, 0, 0).is_err());
        assert!(PanelSpec::new(0, 0, 0, 5).is_err());
        assert!(PanelSpec::new(5, 0, 0, 1).is_err());
        assert_eq!(PanelSpec::new(4, 2, 3, 4).unwrap().count(), 4);
    }

    #[test]
    fn shapes_are_distinct_when_rendered() {
        let imgs: Vec<Tensor<f32>> = (0..5)
            .map(|s| render_panel(&PanelSpec::new(s, 2, 3, 1).unwrap(), 32, 32))
            .collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(imgs[i], imgs[j], "shapes {i} and {j} render identically");
            }
        }
    }
}
