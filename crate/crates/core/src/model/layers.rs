//! Parameter containers and their forward passes on a [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Matrix;
use crate::encoders::seeded_rng;

/// Visits named parameter tensors. Names are stable and used as checkpoint
/// keys, gradient keys and optimizer-state keys.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix));
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in ±1/sqrt(fan_in), seeded by the tensor name.
fn init_weight(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Matrix {
    let mut rng = seeded_rng(seed, "init", name.as_bytes());
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
}

/// Inverted dropout; identity when `rng` is absent or `rate` is zero.
pub(crate) fn dropout(g: &mut Graph<'_>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let n = g.value(x).data().len();
    let mask = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    g.mask(x, mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: init_weight(seed, &join_name(name, "weight"), fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, prefix: &str, x: Var) -> Var {
        let w = g.param(&join_name(prefix, "weight"), &self.weight);
        let b = g.param(&join_name(prefix, "bias"), &self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join_name(prefix, "weight"), &self.weight);
        f(join_name(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join_name(prefix, "weight"), &mut self.weight);
        f(join_name(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, dim, 1.0),
            beta: Matrix::zeros(1, dim),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, prefix: &str, x: Var) -> Var {
        let gamma = g.param(&join_name(prefix, "gamma"), &self.gamma);
        let beta = g.param(&join_name(prefix, "beta"), &self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join_name(prefix, "gamma"), &self.gamma);
        f(join_name(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join_name(prefix, "gamma"), &mut self.gamma);
        f(join_name(prefix, "beta"), &mut self.beta);
    }
}

/// Post-norm transformer encoder layer with a GELU feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn new(seed: u64, name: &str, hidden: usize, heads: usize, ffn: usize) -> Self {
        let lin = |part: &str, i, o| Linear::new(seed, &join_name(name, part), i, o);
        Self {
            query: lin("query", hidden, hidden),
            key: lin("key", hidden, hidden),
            value: lin("value", hidden, hidden),
            output: lin("output", hidden, hidden),
            norm1: LayerNorm::new(hidden),
            ffn_in: lin("ffn_in", hidden, ffn),
            ffn_out: lin("ffn_out", ffn, hidden),
            norm2: LayerNorm::new(hidden),
            heads,
        }
    }

    /// `x` holds consecutive sequences of `seq_len` rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        prefix: &str,
        x: Var,
        seq_len: usize,
        key_valid: &[bool],
        dropout_rate: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let q = self.query.forward(g, &join_name(prefix, "query"), x);
        let k = self.key.forward(g, &join_name(prefix, "key"), x);
        let v = self.value.forward(g, &join_name(prefix, "value"), x);
        let a = g.attention(q, k, v, seq_len, self.heads, key_valid.to_vec());
        let a = self.output.forward(g, &join_name(prefix, "output"), a);
        let a = dropout(g, a, dropout_rate, rng.as_deref_mut());
        let x = g.add(x, a);
        let x = self.norm1.forward(g, &join_name(prefix, "norm1"), x);

        let h = self.ffn_in.forward(g, &join_name(prefix, "ffn_in"), x);
        let h = g.gelu(h);
        let h = self.ffn_out.forward(g, &join_name(prefix, "ffn_out"), h);
        let h = dropout(g, h, dropout_rate, rng);
        let x = g.add(x, h);
        self.norm2.forward(g, &join_name(prefix, "norm2"), x)
    }
}

impl Params for EncoderLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.query.visit(&join_name(prefix, "query"), f);
        self.key.visit(&join_name(prefix, "key"), f);
        self.value.visit(&join_name(prefix, "value"), f);
        self.output.visit(&join_name(prefix, "output"), f);
        self.norm1.visit(&join_name(prefix, "norm1"), f);
        self.ffn_in.visit(&join_name(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join_name(prefix, "ffn_out"), f);
        self.norm2.visit(&join_name(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.query.visit_mut(&join_name(prefix, "query"), f);
        self.key.visit_mut(&join_name(prefix, "key"), f);
        self.value.visit_mut(&join_name(prefix, "value"), f);
        self.output.visit_mut(&join_name(prefix, "output"), f);
        self.norm1.visit_mut(&join_name(prefix, "norm1"), f);
        self.ffn_in.visit_mut(&join_name(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join_name(prefix, "ffn_out"), f);
        self.norm2.visit_mut(&join_name(prefix, "norm2"), f);
    }
}

/// Two-layer perceptron: linear, GELU, dropout, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(seed: u64, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::new(seed, &join_name(name, "fc1"), input, hidden),
            fc2: Linear::new(seed, &join_name(name, "fc2"), hidden, output),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::zeros(input, hidden),
            fc2: Linear::zeros(hidden, output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        prefix: &str,
        x: Var,
        dropout_rate: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let h = self.fc1.forward(g, &join_name(prefix, "fc1"), x);
        let h = g.gelu(h);
        let h = dropout(g, h, dropout_rate, rng);
        self.fc2.forward(g, &join_name(prefix, "fc2"), h)
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.fc1.visit(&join_name(prefix, "fc1"), f);
        self.fc2.visit(&join_name(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.fc1.visit_mut(&join_name(prefix, "fc1"), f);
        self.fc2.visit_mut(&join_name(prefix, "fc2"), f);
    }
}
