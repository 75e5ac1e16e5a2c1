//! The structure-aware dynamic layer.
//!
//! A single underlying tensor `W*` of shape `[R, C, d_h, d_v]` is block-mean
//! pooled to `[r, c, d_h, d_v]` for a task with an `r × c` grid, flattened to
//! `(r·c·d_h) × d_v`, and applied as `Wᵀ G + B` to the concatenated group.

use rand::Rng;

use crate::avr::{EmbeddingGroup, TaskStructure};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Grid geometry `(r, c)` a SAL is adapted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StructureSpec {
    pub rows: usize,
    pub cols: usize,
}

impl StructureSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("structure ({rows}, {cols}) must be positive")));
        }
        Ok(Self { rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Window extents `(d_r, d_c)` over an `R × C` weight grid.
    pub fn windows(&self, big_r: usize, big_c: usize) -> Result<(usize, usize)> {
        if !big_r.is_multiple_of(self.rows) || !big_c.is_multiple_of(self.cols) {
            return Err(Error::Indivisible {
                big_r,
                big_c,
                r: self.rows,
                c: self.cols,
            });
        }
        Ok((big_r / self.rows, big_c / self.cols))
    }
}

impl From<&TaskStructure> for StructureSpec {
    fn from(s: &TaskStructure) -> Self {
        Self {
            rows: s.rows,
            cols: s.cols,
        }
    }
}

impl From<TaskStructure> for StructureSpec {
    fn from(s: TaskStructure) -> Self {
        Self::from(&s)
    }
}

/// Underlying weights `W*`, optional per-head biases `[L, d_v]`, head count.
#[derive(Clone, Debug, PartialEq)]
pub struct SalWeights<T> {
    w_star: Tensor<T>,
    bias: Option<Tensor<T>>,
    heads: usize,
}

impl<T: Scalar> SalWeights<T> {
    pub fn new(w_star: Tensor<T>, bias: Option<Tensor<T>>, heads: usize) -> Result<Self> {
        let s = w_star.shape();
        if s.len() != 4 {
            return Err(Error::shape("sal", format!("W* must be [R, C, d_h, d_v], got {s:?}")));
        }
        if heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::invalid(format!("{heads} heads do not divide d_h = {}", s[2])));
        }
        if let Some(b) = &bias {
            if b.shape() != [heads, s[3]] {
                return Err(Error::shape(
                    "sal",
                    format!("bias {:?}, expected [{heads}, {}]", b.shape(), s[3]),
                ));
            }
        }
        Ok(Self { w_star, bias, heads })
    }

    /// Glorot-uniform `W*` with fan-in `3·3·d_l` and fan-out `d_v`; zero bias.
    pub fn init(
        big_r: usize,
        big_c: usize,
        d_h: usize,
        d_v: usize,
        heads: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_h.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{heads} heads do not divide d_h = {d_h}")));
        }
        let bound = glorot_bound(d_h / heads, d_v);
        let w_star = Tensor::from_fn(vec![big_r, big_c, d_h, d_v], |_| T::lit(rng.gen_range(-bound..bound)));
        let bias = with_bias.then(|| Tensor::zeros(vec![heads, d_v]));
        Self::new(w_star, bias, heads)
    }

    pub fn w_star(&self) -> &Tensor<T> {
        &self.w_star
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.w_star.shape()[0], self.w_star.shape()[1])
    }

    pub fn d_h(&self) -> usize {
        self.w_star.shape()[2]
    }

    pub fn d_v(&self) -> usize {
        self.w_star.shape()[3]
    }

    pub fn d_l(&self) -> usize {
        self.d_h() / self.heads
    }

    /// Single-head weights for head `l`: the `d_h` slice of `W*` and row `l` of the bias.
    pub fn head(&self, l: usize) -> Result<Self> {
        if l >= self.heads {
            return Err(Error::invalid(format!("head {l} out of range for {} heads", self.heads)));
        }
        let (big_r, big_c) = self.grid();
        let (d_h, d_v, d_l) = (self.d_h(), self.d_v(), self.d_l());
        let src = self.w_star.data();
        let mut data = Vec::with_capacity(big_r * big_c * d_l * d_v);
        for cell in 0..big_r * big_c {
            let start = (cell * d_h + l * d_l) * d_v;
            data.extend_from_slice(&src[start..start + d_l * d_v]);
        }
        let w_star = Tensor::new(vec![big_r, big_c, d_l, d_v], data)?;
        let bias = match &self.bias {
            Some(b) => Some(Tensor::new(vec![1, d_v], b.data()[l * d_v..(l + 1) * d_v].to_vec())?),
            None => None,
        };
        Self::new(w_star, bias, 1)
    }
}

/// Glorot bound for `W*`, with fan-in taken over a reference 3×3 grid.
pub fn glorot_bound(d_l: usize, d_v: usize) -> f64 {
    (6.0 / (9 * d_l + d_v) as f64).sqrt()
}

/// Flattened adapted matrix `W` of shape `(r·c·d_h) × d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedWeights<T> {
    pub w: Tensor<T>,
    pub structure: StructureSpec,
}

/// Pools a `[R, C, d_h, d_v]` node to `[r, c, d_h, d_v]` by contiguous block means.
pub fn adapt_graph<T: Scalar>(g: &mut Graph<T>, w_star: Var, structure: StructureSpec) -> Result<Var> {
    let s = g.shape(w_star).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("sal", format!("W* must be [R, C, d_h, d_v], got {s:?}")));
    }
    let (d_r, d_c) = structure.windows(s[0], s[1])?;
    let (r, c) = (structure.rows, structure.cols);
    if d_r == 1 && d_c == 1 {
        return Ok(w_star);
    }
    let blocks = g.reshape(w_star, &[r, d_r, c, d_c, s[2] * s[3]])?;
    let pooled = g.mean_axes(blocks, &[1, 3])?;
    g.reshape(pooled, &[r, c, s[2], s[3]])
}

/// Block-mean adaptation of `W*` to `structure`.
pub fn adapt_weights<T: Scalar>(weights: &SalWeights<T>, structure: StructureSpec) -> Result<AdaptedWeights<T>> {
    let mut g = Graph::inference();
    let w = g.constant(weights.w_star.clone());
    let pooled = adapt_graph(&mut g, w, structure)?;
    let (d_h, d_v) = (weights.d_h(), weights.d_v());
    let w = g.value(pooled).reshape(vec![structure.cells() * d_h, d_v])?;
    Ok(AdaptedWeights { w, structure })
}

fn check_group<T: Scalar>(group: &EmbeddingGroup<T>, structure: StructureSpec, d_h: usize) -> Result<()> {
    if group.len() != structure.cells() {
        return Err(Error::shape(
            "sal",
            format!("group has {} embeddings, expected {}", group.len(), structure.cells()),
        ));
    }
    if let Some((i, e)) = group.embeddings.iter().enumerate().find(|(_, e)| e.len() != d_h) {
        return Err(Error::shape(
            "sal",
            format!("embedding {i} has width {}, expected {d_h}", e.len()),
        ));
    }
    Ok(())
}

/// Single-head SAL: `Wᵀ G + B` with `G` the concatenated group.
pub fn sal_forward<T: Scalar>(group: &EmbeddingGroup<T>, weights: &SalWeights<T>, structure: StructureSpec) -> Result<Vec<T>> {
    if weights.heads != 1 {
        return Err(Error::invalid(format!(
            "sal_forward takes single-head weights, got {} heads",
            weights.heads
        )));
    }
    check_group(group, structure, weights.d_h())?;
    let adapted = adapt_weights(weights, structure)?;
    let d_v = weights.d_v();
    let mut out = match &weights.bias {
        Some(b) => b.data().to_vec(),
        None => vec![T::zero(); d_v],
    };
    let w = adapted.w.data();
    for (row, &x) in group.embeddings.iter().flatten().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[row * d_v..(row + 1) * d_v]) {
            *o += wv * x;
        }
    }
    Ok(out)
}

/// Multi-head SAL: head `l` sees slice `l` of every embedding and of `W*`;
/// outputs are concatenated head by head into a vector of length `d_v·L`.
pub fn multi_head_sal<T: Scalar>(
    group: &EmbeddingGroup<T>,
    weights: &SalWeights<T>,
    structure: StructureSpec,
) -> Result<Vec<T>> {
    check_group(group, structure, weights.d_h())?;
    let d_l = weights.d_l();
    let mut out = Vec::with_capacity(weights.d_v() * weights.heads);
    for l in 0..weights.heads {
        let slice = EmbeddingGroup {
            embeddings: group
                .embeddings
                .iter()
                .map(|e| e[l * d_l..(l + 1) * d_l].to_vec())
                .collect(),
        };
        out.extend(sal_forward(&slice, &weights.head(l)?, structure)?);
    }
    Ok(out)
}

/// Batched multi-head SAL on a graph.
///
/// `groups` is `[N, r·c, d_h]`, `w_star` is `[R, C, d_h, d_v]`, `bias` is
/// `[L, d_v]`. Returns `[N, L·d_v]` in head-major order.
pub fn sal_graph<T: Scalar>(
    g: &mut Graph<T>,
    groups: Var,
    w_star: Var,
    bias: Option<Var>,
    heads: usize,
    structure: StructureSpec,
) -> Result<Var> {
    let ws = g.shape(w_star).to_vec();
    let gs = g.shape(groups).to_vec();
    if ws.len() != 4 {
        return Err(Error::shape("sal", format!("W* must be [R, C, d_h, d_v], got {ws:?}")));
    }
    let (d_h, d_v) = (ws[2], ws[3]);
    let cells = structure.cells();
    if gs.len() != 3 || gs[1] != cells || gs[2] != d_h {
        return Err(Error::shape(
            "sal",
            format!("groups {gs:?}, expected [N, {cells}, {d_h}]"),
        ));
    }
    if heads == 0 || d_h % heads != 0 {
        return Err(Error::invalid(format!("{heads} heads do not divide d_h = {d_h}")));
    }
    let n = gs[0];
    let d_l = d_h / heads;
    let adapted = adapt_graph(g, w_star, structure)?;
    let out = if heads == 1 {
        let w = g.reshape(adapted, &[cells * d_h, d_v])?;
        let x = g.reshape(groups, &[n, cells * d_h])?;
        let y = g.matmul(x, w)?;
        match bias {
            Some(b) => g.add(y, b)?,
            None => y,
        }
    } else {
        let w = g.reshape(adapted, &[cells, heads, d_l, d_v])?;
        let w = g.permute(w, &[1, 0, 2, 3])?;
        let w = g.reshape(w, &[heads, cells * d_l, d_v])?;
        let x = g.reshape(groups, &[n, cells, heads, d_l])?;
        let x = g.permute(x, &[2, 0, 1, 3])?;
        let x = g.reshape(x, &[heads, n, cells * d_l])?;
        let mut y = g.matmul(x, w)?;
        if let Some(b) = bias {
            let b = g.reshape(b, &[heads, 1, d_v])?;
            y = g.add(y, b)?;
        }
        let y = g.permute(y, &[1, 0, 2])?;
        g.reshape(y, &[n, heads * d_v])?
    };
    Ok(out)
}
