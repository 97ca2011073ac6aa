//! Layers built from tape primitives.

use rand::Rng;

use super::graph::{AttnMask, AttnShape, Graph, ParamId, ParamSet, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Train mode enables dropout; eval mode is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier(fan_in, fan_out, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias, fan_in, fan_out }
    }

    /// Re-binds a layer to parameters already present in `params` (checkpoint load).
    pub fn bind(params: &ParamSet, name: &str) -> Result<Self, NumericsError> {
        let weight = find(params, &format!("{name}.weight"))?;
        let bias = find(params, &format!("{name}.bias"))?;
        let (fan_in, fan_out) = params.get(weight).dims2();
        Ok(Linear { weight, bias, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn forward_frozen(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let w = g.frozen_param(self.weight);
        let b = g.frozen_param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

pub(crate) fn find(params: &ParamSet, name: &str) -> Result<ParamId, NumericsError> {
    params
        .find(name)
        .ok_or_else(|| NumericsError::Parameter(format!("missing parameter {name}")))
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f32 = 1e-5;

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, width: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), Tensor::full(&[width], 1.0));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[width]));
        LayerNorm { gain, bias }
    }

    pub fn bind(params: &ParamSet, name: &str) -> Result<Self, NumericsError> {
        Ok(LayerNorm { gain: find(params, &format!("{name}.gain"))?, bias: find(params, &format!("{name}.bias"))? })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, frozen: bool) -> Result<Var, NumericsError> {
        let (gain, bias) = if frozen {
            (g.frozen_param(self.gain), g.frozen_param(self.bias))
        } else {
            (g.param(self.gain), g.param(self.bias))
        };
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head attention with separate query and key/value streams; used
/// for both self-attention (same stream) and cross-attention.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        MultiHeadAttention {
            query: Linear::new(params, &format!("{name}.q"), width, width, rng),
            key: Linear::new(params, &format!("{name}.k"), kv_width, width, rng),
            value: Linear::new(params, &format!("{name}.v"), kv_width, width, rng),
            output: Linear::new(params, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }

    pub fn bind(params: &ParamSet, name: &str, heads: usize) -> Result<Self, NumericsError> {
        Ok(MultiHeadAttention {
            query: Linear::bind(params, &format!("{name}.q"))?,
            key: Linear::bind(params, &format!("{name}.k"))?,
            value: Linear::bind(params, &format!("{name}.v"))?,
            output: Linear::bind(params, &format!("{name}.o"))?,
            heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        xq: Var,
        xkv: Var,
        batch: usize,
        len_q: usize,
        len_k: usize,
        mask: &AttnMask,
        frozen: bool,
    ) -> Result<Var, NumericsError> {
        let lin = |l: &Linear, g: &mut Graph, x: Var| if frozen { l.forward_frozen(g, x) } else { l.forward(g, x) };
        let q = lin(&self.query, g, xq)?;
        let k = lin(&self.key, g, xkv)?;
        let v = lin(&self.value, g, xkv)?;
        let shape = AttnShape { batch, heads: self.heads, len_q, len_k };
        let a = g.attention(q, k, v, shape, mask)?;
        lin(&self.output, g, a)
    }
}

/// Two-layer ReLU feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(params, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(params, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn bind(params: &ParamSet, name: &str) -> Result<Self, NumericsError> {
        Ok(FeedForward { up: Linear::bind(params, &format!("{name}.up"))?, down: Linear::bind(params, &format!("{name}.down"))? })
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, p_drop: f32, rng: &mut R, mode: Mode, frozen: bool) -> Result<Var, NumericsError> {
        let h = if frozen { self.up.forward_frozen(g, x)? } else { self.up.forward(g, x)? };
        let h = g.relu(h)?;
        let h = dropout(g, h, p_drop, rng, mode)?;
        if frozen {
            self.down.forward_frozen(g, h)
        } else {
            self.down.forward(g, h)
        }
    }
}

/// Inverted dropout: in train mode each element survives with probability
/// `1 - p` and is scaled by `1 / (1 - p)`.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f32, rng: &mut R, mode: Mode) -> Result<Var, NumericsError> {
    if mode == Mode::Eval || p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(NumericsError::Parameter(format!("dropout rate {p} must be below 1")));
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f32> = (0..n).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }).collect();
    let m = g.constant(Tensor::from_parts(shape, mask));
    g.mul(x, m)
}

/// Sinusoidal table `[len, d]`: column `2i` is `sin(pos / 10000^(2i/d))`,
/// column `2i+1` the matching cosine.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor, NumericsError> {
    if d % 2 != 0 || d == 0 {
        return Err(NumericsError::Parameter(format!("encoding width must be even, got {d}")));
    }
    if len == 0 {
        return Err(NumericsError::Parameter("encoding length must be positive".into()));
    }
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        data.extend(sinusoid(pos as f64, d));
    }
    Ok(Tensor::from_parts(vec![len, d], data))
}

/// The same sinusoid family evaluated at a scalar diffusion step.
pub fn timestep_encoding(t: f64, d: usize) -> Result<Tensor, NumericsError> {
    if d % 2 != 0 || d == 0 {
        return Err(NumericsError::Parameter(format!("encoding width must be even, got {d}")));
    }
    Ok(Tensor::from_parts(vec![d], sinusoid(t, d).collect()))
}

fn sinusoid(pos: f64, d: usize) -> impl Iterator<Item = f32> {
    (0..d / 2).flat_map(move |i| {
        let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
        let a = pos * freq;
        [a.sin() as f32, a.cos() as f32]
    })
}
