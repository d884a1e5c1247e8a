//! Layers over the tape and the [`Graph`] forward context that binds a tape to
//! a parameter store.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{NormStats, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh tape, the model's parameters, the layer mode and
/// an explicit random stream for stochastic layers.
pub struct Graph<'s, F: Real> {
    pub tape: Tape<F>,
    pub store: &'s mut ParamStore<F>,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    bound: HashMap<ParamId, Var>,
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn new(store: &'s mut ParamStore<F>, mode: Mode, seed: u64) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: HashMap::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Binds a parameter onto the tape once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.tape.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tape.value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tape.shape(v)
    }

    /// Accumulates gradients of `loss` into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward_into(loss, self.store)
    }
}

fn uniform<F: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::of(rng.random_range(-bound..bound)))
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[out_dim, in_dim], bound), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true)?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.linear(x, w, b)
    }
}

/// Shared per-position affine map (a 1×1 convolution).
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1x1 {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_ch as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[out_ch, in_ch], bound), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true)?;
        Ok(Conv1x1 { weight, bias, in_ch, out_ch })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.conv1x1(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[in_ch, out_ch, kernel, kernel], bound),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true)?;
        Ok(ConvTranspose2d { weight, bias, kernel, stride, padding })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.conv_transpose2d(x, w, b, self.stride, self.padding)
    }
}

/// Batch normalization with running statistics kept as non-trainable
/// parameters.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let eps = F::of(BN_EPS);
        match g.mode {
            Mode::Train => {
                let (y, moments) = g.tape.batchnorm(x, gamma, beta, NormStats::Batch { eps })?;
                if let Some(m) = moments {
                    let mom = F::of(BN_MOMENTUM);
                    let keep = F::one() - mom;
                    let rm = g.store.get_mut(self.running_mean).tensor.data_mut();
                    rm.iter_mut().zip(&m.mean).for_each(|(r, &v)| *r = keep * *r + mom * v);
                    let rv = g.store.get_mut(self.running_var).tensor.data_mut();
                    rv.iter_mut().zip(&m.var_unbiased).for_each(|(r, &v)| *r = keep * *r + mom * v);
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = g.store.tensor(self.running_mean).data().to_vec();
                let var = g.store.tensor(self.running_var).data().to_vec();
                let (y, _) = g.tape.batchnorm(x, gamma, beta, NormStats::Fixed { mean: &mean, var: &var, eps })?;
                Ok(y)
            }
        }
    }
}

/// 1×1 convolution → batch norm → ReLU, the per-point building block used by
/// every encoder and decoder.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv1x1,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv1x1::new(store, &format!("{name}.conv"), in_ch, out_ch, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_ch)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        g.tape.relu(y)
    }
}

/// Stack of [`ConvBnRelu`] blocks with the given output widths.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub layers: Vec<ConvBnRelu>,
}

impl SharedMlp {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut c = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(ConvBnRelu::new(store, &format!("{name}.{i}"), c, w, rng)?);
            c = w;
        }
        Ok(SharedMlp { layers })
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.layers.last().map(|l| l.conv.out_ch)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }
}
