//! Parameterized building blocks shared by the fusion modules.

use ainet_tensor::{CustomOp, Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::error::{CoreError, Result};

/// `y = x W + b` over the last axis, with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(in)`, bias zero.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::fan_in(in_dim), bias.then_some(Init::Zeros))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Option<Init>,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), &[in_dim, out_dim], weight_init)?;
        let bias = bias_init
            .map(|init| store.register(format!("{name}.bias"), &[out_dim], init))
            .transpose()?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(CoreError::Shape(format!(
                "linear expects last dimension {}, got {shape:?}",
                self.in_dim
            )));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = g.reshape(x, &[rows, self.in_dim])?;
        let w = g.param(store, self.weight);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_dim;
        Ok(g.reshape(y, &out_shape)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::Config("layer norm over zero channels".into()));
        }
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: store.register(format!("{name}.beta"), &[dim], Init::Zeros)?,
            dim,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta, self.eps)?)
    }
}

/// Depthwise causal 1-D convolution over the token axis of `[B, L, D]`.
///
/// `y[b,t,d] = bias[d] + sum_j w[d,j] * x[b, t-(K-1)+j, d]`, with zero
/// left padding, so output `t` only sees inputs `..=t`.
/// Cost: `B*L*D*(K+1)` multiply-adds.
#[derive(Clone, Debug)]
pub struct CausalConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub width: usize,
}

impl CausalConv1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(CoreError::Config("convolution width must be positive".into()));
        }
        Ok(Self {
            weight: store.register(format!("{name}.weight"), &[channels, width], Init::fan_in(width))?,
            bias: store.register(format!("{name}.bias"), &[channels], Init::Zeros)?,
            channels,
            width,
        })
    }

    pub fn num_params(&self) -> usize {
        self.channels * (self.width + 1)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        causal_conv1d(g, x, w, b)
    }
}

/// Graph op for [`CausalConv1d`] with explicit weight and bias nodes.
pub fn causal_conv1d(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(weight).to_vec();
    if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || g.shape(bias) != [xs[2]] {
        return Err(CoreError::Shape(format!(
            "causal conv: input {xs:?}, weight {ws:?}, bias {:?}",
            g.shape(bias)
        )));
    }
    let (bsz, len, ch) = (xs[0], xs[1], xs[2]);
    let k = ws[1];
    let (xv, wv, bv) = (g.value(x).data(), g.value(weight).data(), g.value(bias).data());
    let mut out = vec![0.0; bsz * len * ch];
    for b in 0..bsz {
        for t in 0..len {
            let orow = &mut out[(b * len + t) * ch..(b * len + t + 1) * ch];
            orow.copy_from_slice(bv);
            for j in 0..k {
                let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                let xrow = &xv[(b * len + src_t) * ch..(b * len + src_t + 1) * ch];
                for d in 0..ch {
                    orow[d] += wv[d * k + j] * xrow[d];
                }
            }
        }
    }
    let output = Tensor::new(vec![bsz, len, ch], out)?;
    let op = CausalConvOp {
        cost: (bsz * len * ch * (k + 1)) as u64,
    };
    Ok(g.custom(&[x, weight, bias], output, Box::new(op)))
}

#[derive(Debug)]
struct CausalConvOp {
    cost: u64,
}

impl CustomOp for CausalConvOp {
    fn name(&self) -> &'static str {
        "causal_conv1d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (bsz, len, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = w.shape()[1];
        let (xv, wv) = (x.data(), w.data());
        let mut gx = needs[0].then(|| vec![0.0; xv.len()]);
        let mut gw = needs[1].then(|| vec![0.0; wv.len()]);
        let mut gb = needs[2].then(|| vec![0.0; ch]);
        for b in 0..bsz {
            for t in 0..len {
                let grow = &grad[(b * len + t) * ch..(b * len + t + 1) * ch];
                if let Some(gb) = gb.as_mut() {
                    for d in 0..ch {
                        gb[d] += grow[d];
                    }
                }
                for j in 0..k {
                    let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                    let base = (b * len + src_t) * ch;
                    for d in 0..ch {
                        if let Some(gx) = gx.as_mut() {
                            gx[base + d] += grow[d] * wv[d * k + j];
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[d * k + j] += grow[d] * xv[base + d];
                        }
                    }
                }
            }
        }
        vec![gx, gw, gb]
    }

    fn mults_adds(&self) -> u64 {
        self.cost
    }
}
