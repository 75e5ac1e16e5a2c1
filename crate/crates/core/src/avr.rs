//! Task structures, problem instances, and the arrangement of panel
//! embeddings into per-answer candidate groups.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Rpm,
    Vap,
    O3,
}

impl TaskKind {
    pub fn code(self) -> u8 {
        match self {
            TaskKind::Rpm => 0,
            TaskKind::Vap => 1,
            TaskKind::O3 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TaskKind::Rpm),
            1 => Some(TaskKind::Vap),
            2 => Some(TaskKind::O3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Rpm => "rpm",
            TaskKind::Vap => "vap",
            TaskKind::O3 => "o3",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rpm" => Ok(TaskKind::Rpm),
            "vap" => Ok(TaskKind::Vap),
            "o3" => Ok(TaskKind::O3),
            other => Err(Error::invalid(format!("unknown task kind `{other}`"))),
        }
    }
}

/// Layout of one task: grid geometry plus context/answer counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TaskStructure {
    pub kind: TaskKind,
    pub rows: usize,
    pub cols: usize,
    pub context: usize,
    pub answers: usize,
}

impl TaskStructure {
    /// 3×3 matrix, 8 context panels, 8 answers.
    pub fn rpm() -> Self {
        Self {
            kind: TaskKind::Rpm,
            rows: 3,
            cols: 3,
            context: 8,
            answers: 8,
        }
    }

    /// 2×3 analogy, 5 context panels, 4 answers.
    pub fn vap() -> Self {
        Self {
            kind: TaskKind::Vap,
            rows: 2,
            cols: 3,
            context: 5,
            answers: 4,
        }
    }

    /// Odd-one-out over `panels` images; each group leaves one out.
    pub fn o3(panels: usize) -> Result<Self> {
        if panels < 3 {
            return Err(Error::invalid(format!("o3 needs at least 3 panels, got {panels}")));
        }
        Ok(Self {
            kind: TaskKind::O3,
            rows: 1,
            cols: panels - 1,
            context: 0,
            answers: panels,
        })
    }

    /// Rebuilds and validates a structure from its stored fields.
    pub fn from_parts(kind: TaskKind, rows: usize, cols: usize, context: usize, answers: usize) -> Result<Self> {
        let s = match kind {
            TaskKind::Rpm => Self::rpm(),
            TaskKind::Vap => Self::vap(),
            TaskKind::O3 => Self::o3(answers)?,
        };
        if (s.rows, s.cols, s.context, s.answers) != (rows, cols, context, answers) {
            return Err(Error::invalid(format!(
                "inconsistent {kind} structure: r={rows} c={cols} context={context} answers={answers}"
            )));
        }
        Ok(s)
    }

    /// Panels per instance, `P_t`.
    pub fn panels(&self) -> usize {
        match self.kind {
            TaskKind::O3 => self.answers,
            _ => self.context + self.answers,
        }
    }

    /// Embeddings per candidate group, `I_t = r·c`.
    pub fn group_size(&self) -> usize {
        self.rows * self.cols
    }

    /// Panel indices forming each candidate group, in grid reading order.
    pub fn arrangement(&self) -> Vec<Vec<usize>> {
        match self.kind {
            TaskKind::O3 => (0..self.answers)
                .map(|k| (0..self.answers).filter(|&j| j != k).collect())
                .collect(),
            _ => (0..self.answers)
                .map(|k| (0..self.context).chain(std::iter::once(self.context + k)).collect())
                .collect(),
        }
    }
}

/// One matrix: panels, the correct answer, and optional multi-hot rules.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemInstance<T> {
    /// `P_t` greyscale panels of shape `[h, w]`, values in `[0, 1]`.
    pub panels: Vec<Tensor<T>>,
    pub label: usize,
    pub rules: Option<Vec<u8>>,
}

impl<T: Scalar> ProblemInstance<T> {
    pub fn panel_hw(&self) -> Option<(usize, usize)> {
        self.panels.first().map(|p| (p.shape()[0], p.shape()[1]))
    }

    /// Checks panel count, panel shapes, and label range against `s`.
    pub fn validate(&self, s: &TaskStructure) -> Result<()> {
        if self.panels.len() != s.panels() {
            return Err(Error::invalid(format!(
                "{} instance has {} panels, expected {}",
                s.kind,
                self.panels.len(),
                s.panels()
            )));
        }
        let hw = self.panels[0].shape();
        if hw.len() != 2 || self.panels.iter().any(|p| p.shape() != hw) {
            return Err(Error::invalid("panels must all be 2-D images of one size"));
        }
        if self.label >= s.answers {
            return Err(Error::invalid(format!(
                "label {} out of range for {} answers",
                self.label, s.answers
            )));
        }
        Ok(())
    }

    /// Stacks panels into `[P, h, w]`.
    pub fn stacked(&self) -> Tensor<T> {
        let (h, w) = self.panel_hw().expect("non-empty instance");
        let data = self.panels.iter().flat_map(|p| p.data().iter().copied()).collect();
        Tensor::new(vec![self.panels.len(), h, w], data).expect("uniform panels")
    }
}

/// The `r·c` embeddings of one candidate group in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGroup<T> {
    pub embeddings: Vec<Vec<T>>,
}

impl<T: Scalar> EmbeddingGroup<T> {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    /// `[len, width]` tensor of the group.
    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        let data = self.embeddings.iter().flatten().copied().collect();
        Tensor::new(vec![self.len(), self.width()], data)
    }
}

/// Forms the `A_t` candidate groups from `P_t` panel embeddings.
pub fn arrange_groups<T: Scalar>(embeddings: &[Vec<T>], structure: &TaskStructure) -> Result<Vec<EmbeddingGroup<T>>> {
    if embeddings.len() != structure.panels() {
        return Err(Error::invalid(format!(
            "{} arrangement needs {} embeddings, got {}",
            structure.kind,
            structure.panels(),
            embeddings.len()
        )));
    }
    let width = embeddings[0].len();
    if let Some((i, e)) = embeddings.iter().enumerate().find(|(_, e)| e.len() != width) {
        return Err(Error::invalid(format!(
            "embedding {i} has width {}, expected {width}",
            e.len()
        )));
    }
    Ok(structure
        .arrangement()
        .into_iter()
        .map(|idx| EmbeddingGroup {
            embeddings: idx.into_iter().map(|j| embeddings[j].clone()).collect(),
        })
        .collect())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Smallest `(R, C)` divisible by every structure's rows and columns.
pub fn structure_registry(structures: &[TaskStructure]) -> Result<(usize, usize)> {
    if structures.is_empty() {
        return Err(Error::invalid("structure registry needs at least one task structure"));
    }
    Ok(structures
        .iter()
        .fold((1, 1), |(r, c), s| (lcm(r, s.rows), lcm(c, s.cols))))
}
