//! Dense feed-forward networks with a hand-written backward pass, and Adam.
//!
//! Parameters of a network live in one flat vector: for each layer the
//! weight matrix (row-major, `out × in`) followed by its bias.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Network shape. `hidden` may be empty, which gives an affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    #[serde(default = "default_hidden_activation")]
    pub activation: Activation,
    #[serde(default = "default_output_activation")]
    pub output_activation: Activation,
}

fn default_hidden_activation() -> Activation {
    Activation::Relu
}

fn default_output_activation() -> Activation {
    Activation::Identity
}

impl MlpSpec {
    pub fn new(hidden: Vec<usize>) -> Self {
        Self {
            hidden,
            activation: Activation::Relu,
            output_activation: Activation::Identity,
        }
    }

    pub fn with_output(mut self, act: Activation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden_act: Activation,
    output_act: Activation,
    params: Vec<f64>,
}

/// Per-layer pre-activations and outputs from a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, |v| v)
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(input: usize, output: usize, spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        if input == 0 || output == 0 {
            return Err(Error::invalid("network input and output sizes must be ≥ 1"));
        }
        let mut sizes = vec![input];
        sizes.extend(&spec.hidden);
        sizes.push(output);
        let n = Self::count(&sizes);
        let mut params = Vec::with_capacity(n);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            sizes,
            hidden_act: spec.activation,
            output_act: spec.output_activation,
            params,
        })
    }

    pub fn from_params(sizes: Vec<usize>, spec: &MlpSpec, params: Vec<f64>) -> Result<Self> {
        if sizes.len() != spec.hidden.len() + 2 || sizes[1..sizes.len() - 1] != spec.hidden[..] {
            return Err(Error::shape(format!("{:?}", spec.hidden), format!("{sizes:?}")));
        }
        if params.len() != Self::count(&sizes) {
            return Err(Error::shape(Self::count(&sizes), params.len()));
        }
        Ok(Self {
            sizes,
            hidden_act: spec.activation,
            output_act: spec.output_activation,
            params,
        })
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Hidden widths and activations; with `sizes()` this rebuilds the shape.
    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            hidden: self.sizes[1..self.sizes.len() - 1].to_vec(),
            activation: self.hidden_act,
            output_activation: self.output_act,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of the bias vector of the last layer inside [`Mlp::params`].
    pub fn output_bias_offset(&self) -> usize {
        self.params.len() - self.output_dim()
    }

    fn act(&self, layer: usize) -> Activation {
        if layer + 2 == self.sizes.len() {
            self.output_act
        } else {
            self.hidden_act
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).post.pop().unwrap()
    }

    pub fn forward_cached(&self, x: &[f64]) -> Cache {
        debug_assert_eq!(x.len(), self.sizes[0]);
        let layers = self.sizes.len() - 1;
        let mut pre = Vec::with_capacity(layers);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = if l == 0 { x } else { &post[l - 1] };
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let act = self.act(l);
            let y = z.iter().map(|&v| act.apply(v)).collect();
            pre.push(z);
            post.push(y);
            off += n_in * n_out + n_out;
        }
        Cache {
            input: x.to_vec(),
            pre,
            post,
        }
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output`, and returns
    /// `∂L/∂input`.
    pub fn backward(&self, cache: &Cache, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta: Vec<f64> = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let act = self.act(l);
            for o in 0..n_out {
                delta[o] *= act.derivative(cache.pre[l][o], cache.post[l][o]);
            }
            let input = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let off = offsets[l];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let w = &self.params[off..off + n_in * n_out];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * input[i];
                    next[i] += d * row[i];
                }
            }
            delta = next;
        }
        delta
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn fd_check(spec: MlpSpec) {
        let mut rng = rng_from(3, &[]);
        let net = Mlp::new(3, 2, &spec, &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        let loss = |n: &Mlp| -> f64 { n.forward(&x).iter().enumerate().map(|(i, y)| (i as f64 + 1.0) * y * y).sum() };
        let cache = net.forward_cached(&x);
        let gout: Vec<f64> = cache.output().iter().enumerate().map(|(i, y)| 2.0 * (i as f64 + 1.0) * y).collect();
        let mut grad = vec![0.0; net.num_params()];
        let gin = net.backward(&cache, &gout, &mut grad);
        let eps = 1e-6;
        for k in 0..net.num_params() {
            let mut p = net.clone();
            p.params_mut()[k] += eps;
            let mut m = net.clone();
            m.params_mut()[k] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!((fd - grad[k]).abs() < 1e-7, "param {k}: {fd} vs {}", grad[k]);
        }
        for i in 0..3 {
            let mut xp = x;
            xp[i] += eps;
            let mut xm = x;
            xm[i] -= eps;
            let f = |v: &[f64]| -> f64 { net.forward(v).iter().enumerate().map(|(j, y)| (j as f64 + 1.0) * y * y).sum() };
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((fd - gin[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(MlpSpec::new(vec![5, 4]));
        fd_check(MlpSpec::new(vec![4]).with_output(Activation::Tanh));
        fd_check(MlpSpec::new(vec![]));
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = rng_from(0, &[]);
        let net = Mlp::new(10, 6, &MlpSpec::new(vec![]), &mut rng).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(net.params()[..60].iter().all(|w| w.abs() <= limit));
        assert!(net.params()[60..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_zero_width() {
        let mut rng = rng_from(0, &[]);
        assert!(Mlp::new(2, 2, &MlpSpec::new(vec![0]), &mut rng).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
