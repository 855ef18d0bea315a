//! Reusable building blocks on the autodiff tape.

use ndarray::Array2;
use rand::Rng as _;

use super::params::{ParamId, Parameters};
use crate::autograd::{Tape, Var};
use crate::rng::Rng;

/// Forward-pass state: training flag and the dropout RNG.
pub struct Ctx {
    pub train: bool,
    pub dropout: f64,
    pub rng: Rng,
}

impl Ctx {
    pub fn eval(rng: Rng) -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng,
        }
    }

    pub fn train(dropout: f64, rng: Rng) -> Self {
        Self {
            train: true,
            dropout,
            rng,
        }
    }
}

pub fn dropout(tape: &mut Tape, x: Var, ctx: &mut Ctx) -> Var {
    if !ctx.train || ctx.dropout <= 0.0 {
        return x;
    }
    let keep = 1.0 - ctx.dropout;
    let shape = tape.shape(x);
    let mask = Array2::from_shape_simple_fn(shape, || {
        if ctx.rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul_const(x, mask)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(params: &mut Parameters, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            w: params.add_scaled_normal(format!("{name}.w"), d_in, d_out, rng),
            b: Some(params.add_zeros(format!("{name}.b"), 1, d_out)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Parameters, x: Var) -> Var {
        let w = tape.param(self.w, params.value(self.w));
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(b, params.value(b));
                tape.add(y, b)
            }
            None => y,
        }
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Parameters, name: &str, dim: usize) -> Self {
        Self {
            gain: params.add_filled(format!("{name}.gain"), 1, dim, 1.0),
            bias: params.add_zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Parameters, x: Var) -> Var {
        let n = tape.layer_norm(x, 1e-5);
        let g = tape.param(self.gain, params.value(self.gain));
        let b = tape.param(self.bias, params.value(self.bias));
        let y = tape.mul(n, g);
        tape.add(y, b)
    }
}

/// Same-padded 1-D convolution over rows (time) with `kernel` taps.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub taps: Vec<ParamId>,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new(params: &mut Parameters, name: &str, d_in: usize, d_out: usize, kernel: usize, rng: &mut Rng) -> Self {
        assert!(kernel >= 1, "kernel width must be positive");
        let taps = (0..kernel)
            .map(|k| {
                let id = params.add_scaled_normal(format!("{name}.tap{k}"), d_in, d_out, rng);
                params.value_mut(id).mapv_inplace(|v| v / (kernel as f64).sqrt());
                id
            })
            .collect();
        Self {
            taps,
            bias: params.add_zeros(format!("{name}.b"), 1, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Parameters, x: Var) -> Var {
        let half = (self.taps.len() / 2) as isize;
        let mut acc: Option<Var> = None;
        for (k, &tap) in self.taps.iter().enumerate() {
            // output row i reads input row i + (k - half)
            let offset = half - k as isize;
            let shifted = if offset == 0 { x } else { tape.shift_rows(x, offset) };
            let w = tape.param(tap, params.value(tap));
            let y = tape.matmul(shifted, w);
            acc = Some(match acc {
                Some(a) => tape.add(a, y),
                None => y,
            });
        }
        let b = tape.param(self.bias, params.value(self.bias));
        let acc = acc.expect("kernel >= 1");
        tape.add(acc, b)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(params: &mut Parameters, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "hidden size must divide into heads");
        Self {
            query: Linear::new(params, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(params, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(params, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(params, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Parameters, x: Var) -> Var {
        let q = self.query.forward(tape, params, x);
        let k = self.key.forward(tape, params, x);
        let v = self.value.forward(tape, params, x);
        let dim = tape.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, a, b), tape.slice_cols(k, a, b), tape.slice_cols(v, a, b))
            };
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.out.forward(tape, params, joined)
    }
}

/// Pre-norm encoder block: optional local convolution, self-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub conv: Option<(LayerNorm, Conv1d)>,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderBlock {
    pub fn new(
        params: &mut Parameters,
        name: &str,
        dim: usize,
        heads: usize,
        conv_kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        let conv = (conv_kernel > 0).then(|| {
            (
                LayerNorm::new(params, &format!("{name}.conv_norm"), dim),
                Conv1d::new(params, &format!("{name}.conv"), dim, dim, conv_kernel, rng),
            )
        });
        Self {
            conv,
            attn_norm: LayerNorm::new(params, &format!("{name}.attn_norm"), dim),
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads, rng),
            ffn_norm: LayerNorm::new(params, &format!("{name}.ffn_norm"), dim),
            ffn_in: Linear::new(params, &format!("{name}.ffn_in"), dim, 2 * dim, rng),
            ffn_out: Linear::new(params, &format!("{name}.ffn_out"), 2 * dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Parameters, mut x: Var, ctx: &mut Ctx) -> Var {
        if let Some((norm, conv)) = &self.conv {
            let y = norm.forward(tape, params, x);
            let y = conv.forward(tape, params, y);
            let y = tape.relu(y);
            x = tape.add(x, y);
        }
        let y = self.attn_norm.forward(tape, params, x);
        let y = self.attn.forward(tape, params, y);
        let y = dropout(tape, y, ctx);
        x = tape.add(x, y);
        let y = self.ffn_norm.forward(tape, params, x);
        let y = self.ffn_in.forward(tape, params, y);
        let y = tape.relu(y);
        let y = self.ffn_out.forward(tape, params, y);
        let y = dropout(tape, y, ctx);
        tape.add(x, y)
    }
}

/// Fixed sinusoidal position table, `rows × dim`.
pub fn sinusoidal_positions(rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(params: &mut Parameters, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(params, &format!("{name}.hidden"), d_in, d_hidden, rng),
            out: Linear::new(params, &format!("{name}.out"), d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Parameters, x: Var) -> Var {
        let h = self.hidden.forward(tape, params, x);
        let h = tape.relu(h);
        self.out.forward(tape, params, h)
    }
}
