//! Parameter-holding building blocks. Each layer keeps only [`ParamId`]s;
//! values live in the model's [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// `x · W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_glorot(&format!("{name}.weight"), &[inputs, outputs], inputs, outputs, rng)?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(vec![outputs]))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let width = g.shape(x).last().copied().unwrap_or(0);
        if width != self.inputs {
            return Err(Error::shape(
                "linear",
                format!("input width {width}, expected {}", self.inputs),
            ));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Two linear layers with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), inputs, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, outputs, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm residual MLP over the last axis: `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TokenMixer {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub mlp: Mlp,
    pub eps: f64,
}

impl TokenMixer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_gamma: store.add(&format!("{name}.ln.gamma"), Tensor::ones(vec![width]))?,
            ln_beta: store.add(&format!("{name}.ln.beta"), Tensor::zeros(vec![width]))?,
            mlp: Mlp::new(store, name, width, hidden, width, rng)?,
            eps,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.ln_gamma);
        let beta = g.param(store, self.ln_beta);
        let h = g.layer_norm(x, gamma, beta, self.eps)?;
        let h = self.mlp.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// 1-D convolution with bias over `[N, C, len]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_glorot(
            &format!("{name}.weight"),
            &[outputs, inputs, kernel],
            inputs * kernel,
            outputs * kernel,
            rng,
        )?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(vec![outputs]))?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, Some(b), self.stride, 0)
    }
}

/// Two 1-D convolutions with GELU in between, mixing the channel axis.
#[derive(Clone, Debug)]
pub struct ChannelMixer {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
}

impl ChannelMixer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        (inputs, hidden, outputs): (usize, usize, usize),
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), inputs, hidden, kernel, kernel, rng)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), hidden, outputs, 1, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.conv2.forward(g, store, h)
    }
}

/// 3×3 convolution (no bias), batch normalisation, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        stride: usize,
        momentum: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_glorot(
                &format!("{name}.conv.weight"),
                &[outputs, inputs, 3, 3],
                inputs * 9,
                outputs * 9,
                rng,
            )?,
            gamma: store.add(&format!("{name}.bn.gamma"), Tensor::ones(vec![outputs]))?,
            beta: store.add(&format!("{name}.bn.beta"), Tensor::zeros(vec![outputs]))?,
            running_mean: store.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(vec![outputs]))?,
            running_var: store.add_buffer(&format!("{name}.bn.running_var"), Tensor::ones(vec![outputs]))?,
            stride,
            momentum,
            eps,
        })
    }

    /// In train mode the refreshed running statistics are queued on `g`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, train: bool) -> Result<Var> {
        let w = g.param(store, self.weight);
        let h = g.conv2d(x, w, None, (self.stride, self.stride), (1, 1))?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let state = BatchNormState {
            running_mean: store.get(self.running_mean),
            running_var: store.get(self.running_var),
            momentum: self.momentum,
            eps: self.eps,
        };
        let (h, update) = g.batch_norm2d(h, gamma, beta, state, train)?;
        if let Some((mean, var)) = update {
            g.record_stat_update(self.running_mean, mean);
            g.record_stat_update(self.running_var, var);
        }
        Ok(g.relu(h))
    }
}
