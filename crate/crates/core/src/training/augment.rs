use rand::Rng;

use crate::avr::ProblemInstance;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Pixel-exact panel transforms, listed in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    VerticalFlip,
    HorizontalFlip,
    Rotate90,
    /// Rotation by 180° or 270° counter-clockwise.
    Rotate { quarter_turns: u8 },
    Transpose,
}

impl Transform {
    pub fn needs_square(self) -> bool {
        matches!(self, Transform::Rotate90 | Transform::Rotate { .. } | Transform::Transpose)
    }

    /// Applies the transform to an `[h, w]` panel.
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::shape("augment", format!("panel {s:?}, expected [h, w]")));
        }
        let (h, w) = (s[0], s[1]);
        if self.needs_square() && h != w {
            return Err(Error::invalid(format!("{self:?} needs square panels, got {h}×{w}")));
        }
        let d = x.data();
        let out = match self {
            Transform::VerticalFlip => Tensor::from_fn(vec![h, w], |i| d[(h - 1 - i / w) * w + i % w]),
            Transform::HorizontalFlip => Tensor::from_fn(vec![h, w], |i| d[(i / w) * w + (w - 1 - i % w)]),
            Transform::Transpose => Tensor::from_fn(vec![h, w], |i| d[(i % w) * w + i / w]),
            Transform::Rotate90 => rotate_ccw(x, 1),
            Transform::Rotate { quarter_turns } => rotate_ccw(x, quarter_turns),
        };
        Ok(out)
    }
}

fn rotate_ccw<T: Scalar>(x: &Tensor<T>, turns: u8) -> Tensor<T> {
    let n = x.shape()[0];
    let mut cur = x.clone();
    for _ in 0..turns % 4 {
        let d = cur.data();
        // out[i][j] = in[j][n − 1 − i]
        cur = Tensor::from_fn(vec![n, n], |k| d[(k % n) * n + (n - 1 - k / n)]);
    }
    cur
}

/// Augmentation probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Chance of augmenting an instance at all.
    pub probability: f64,
    /// Independent inclusion chance of each transform.
    pub transform_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            transform_probability: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            probability: 0.0,
            transform_probability: 0.0,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.probability > 0.0 && self.transform_probability > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.probability, self.transform_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("augmentation probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draws a pipeline; empty when the instance is left untouched.
pub fn sample_pipeline(config: &AugmentConfig, rng: &mut impl Rng) -> Vec<Transform> {
    if !rng.gen_bool(config.probability) {
        return Vec::new();
    }
    let q = config.transform_probability;
    let mut out = Vec::new();
    if rng.gen_bool(q) {
        out.push(Transform::VerticalFlip);
    }
    if rng.gen_bool(q) {
        out.push(Transform::HorizontalFlip);
    }
    if rng.gen_bool(q) {
        out.push(Transform::Rotate90);
    }
    if rng.gen_bool(q) {
        let quarter_turns = if rng.gen_bool(0.5) { 2 } else { 3 };
        out.push(Transform::Rotate { quarter_turns });
    }
    if rng.gen_bool(q) {
        out.push(Transform::Transpose);
    }
    out
}

/// Applies `pipeline` identically to every panel; label and rules are kept.
pub fn apply_pipeline<T: Scalar>(instance: &ProblemInstance<T>, pipeline: &[Transform]) -> Result<ProblemInstance<T>> {
    let panels = instance
        .panels
        .iter()
        .map(|p| pipeline.iter().try_fold(p.clone(), |x, t| t.apply(&x)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProblemInstance {
        panels,
        label: instance.label,
        rules: instance.rules.clone(),
    })
}

pub fn augment<T: Scalar>(instance: &ProblemInstance<T>, config: &AugmentConfig, rng: &mut impl Rng) -> Result<ProblemInstance<T>> {
    let pipeline = sample_pipeline(config, rng);
    if pipeline.is_empty() {
        return Ok(instance.clone());
    }
    apply_pipeline(instance, &pipeline)
}
