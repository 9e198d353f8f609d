//! Dense networks with hand-written backpropagation.
//!
//! Everything runs in `f64` on single samples; batching is a loop with
//! gradient accumulation. The scope is deliberately narrow: fully connected
//! layers, ReLU/tanh/identity activations, and an Adam optimizer, which is
//! all the actor-critic learner needs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activated output `h`.
    fn derivative(&self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub activation: Activation,
}

/// Multilayer perceptron. `dims` are layer widths input-first; the hidden
/// activations and the output activation are fixed at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Forward-pass bookkeeping needed for backpropagation: the input and every
/// layer's pre-activation and output.
#[derive(Debug, Clone)]
pub struct Trace {
    input: DVector<f64>,
    pre: Vec<DVector<f64>>,
    out: Vec<DVector<f64>>,
}

impl Trace {
    pub fn output(&self) -> &DVector<f64> {
        self.out.last().expect("trace from a non-empty network")
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            w: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            b: net.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.w {
            *w *= factor;
        }
        for b in &mut self.b {
            *b *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut worst = 0.0f64;
        for w in &self.w {
            worst = worst.max(w.amax());
        }
        for b in &self.b {
            worst = worst.max(b.amax());
        }
        worst
    }
}

impl Mlp {
    /// Uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer.
    pub fn new<R: Rng>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "network needs at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..bound));
            let b = DVector::from_fn(fan_out, |_, _| rng.gen_range(-bound..bound));
            let activation = if k + 1 == dims.len() - 1 { output } else { hidden };
            layers.push(Layer { w, b, activation });
        }
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("non-empty network").w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty network").w.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        for layer in &self.layers {
            let z = &layer.w * h + &layer.b;
            h = z.map(|zi| layer.activation.apply(zi));
        }
        h
    }

    /// Forward pass that records everything backpropagation needs.
    pub fn forward_trace(&self, x: &DVector<f64>) -> Trace {
        assert_eq!(x.len(), self.input_dim(), "input has wrong dimension");
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = &layer.w * &h + &layer.b;
            h = z.map(|zi| layer.activation.apply(zi));
            pre.push(z);
            out.push(h.clone());
        }
        Trace {
            input: x.clone(),
            pre,
            out,
        }
    }

    /// Backpropagates `upstream` (dL/d output) through the trace. Returns
    /// parameter gradients and the gradient with respect to the input,
    /// which the actor update needs from the critic.
    pub fn backward(&self, trace: &Trace, upstream: &DVector<f64>) -> (Gradients, DVector<f64>) {
        assert_eq!(upstream.len(), self.output_dim(), "upstream has wrong dimension");
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[k];
            let h = &trace.out[k];
            for i in 0..delta.len() {
                delta[i] *= layer.activation.derivative(z[i], h[i]);
            }
            let below: &DVector<f64> = if k == 0 { &trace.input } else { &trace.out[k - 1] };
            grads.w[k] = &delta * below.transpose();
            grads.b[k] = delta.clone();
            delta = layer.w.transpose() * &delta;
        }
        (grads, delta)
    }

    /// In-place soft update toward `online`: theta <- tau*online + (1-tau)*theta.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.w = &o.w * tau + &t.w * (1.0 - tau);
            t.b = &o.b * tau + &t.b * (1.0 - tau);
        }
    }

    /// First NaN or infinite parameter, if any. Losses alone cannot flag a
    /// poisoned network: a dead ReLU maps a NaN pre-activation to zero and
    /// the forward pass comes out clean.
    pub fn first_non_finite(&self) -> Option<f64> {
        for layer in &self.layers {
            if let Some(&bad) = layer.w.iter().find(|v| !v.is_finite()) {
                return Some(bad);
            }
            if let Some(&bad) = layer.b.iter().find(|v| !v.is_finite()) {
                return Some(bad);
            }
        }
        None
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }
}

/// Adam optimizer holding first/second-moment state shaped like one network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_w: Vec<DMatrix<f64>>,
    v_b: Vec<DVector<f64>>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let zeros = Gradients::zeros_like(net);
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m_w: zeros.w.clone(),
            m_b: zeros.b.clone(),
            v_w: zeros.w,
            v_b: zeros.b,
        }
    }

    /// Applies one descent step along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..net.layers.len() {
            let w = &mut net.layers[k].w;
            for i in 0..w.len() {
                let g = grads.w[k][i];
                self.m_w[k][i] = self.beta1 * self.m_w[k][i] + (1.0 - self.beta1) * g;
                self.v_w[k][i] = self.beta2 * self.v_w[k][i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m_w[k][i] / bc1;
                let v_hat = self.v_w[k][i] / bc2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let b = &mut net.layers[k].b;
            for i in 0..b.len() {
                let g = grads.b[k][i];
                self.m_b[k][i] = self.beta1 * self.m_b[k][i] + (1.0 - self.beta1) * g;
                self.v_b[k][i] = self.beta2 * self.v_b[k][i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m_b[k][i] / bc1;
                let v_hat = self.v_b[k][i] / bc2;
                b[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Finite-difference verification helpers for the analytic gradients.
pub mod gradcheck {
    use super::*;

    /// Central finite-difference gradient of `loss` with respect to every
    /// parameter of `net`.
    pub fn numeric_gradients<F: FnMut(&Mlp) -> f64>(
        net: &Mlp,
        mut loss: F,
        eps: f64,
    ) -> Gradients {
        let mut grads = Gradients::zeros_like(net);
        let mut work = net.clone();
        for k in 0..net.layers.len() {
            for idx in 0..net.layers[k].w.len() {
                let orig = work.layers[k].w[idx];
                work.layers[k].w[idx] = orig + eps;
                let up = loss(&work);
                work.layers[k].w[idx] = orig - eps;
                let down = loss(&work);
                work.layers[k].w[idx] = orig;
                grads.w[k][idx] = (up - down) / (2.0 * eps);
            }
            for idx in 0..net.layers[k].b.len() {
                let orig = work.layers[k].b[idx];
                work.layers[k].b[idx] = orig + eps;
                let up = loss(&work);
                work.layers[k].b[idx] = orig - eps;
                let down = loss(&work);
                work.layers[k].b[idx] = orig;
                grads.b[k][idx] = (up - down) / (2.0 * eps);
            }
        }
        grads
    }

    /// Worst relative error between analytic and numeric gradients, with a
    /// floor that keeps near-zero entries from exploding the ratio.
    pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
        let mut worst = 0.0f64;
        let compare = |a: f64, n: f64, worst: &mut f64| {
            let denominator = a.abs().max(n.abs()).max(1e-6);
            *worst = worst.max((a - n).abs() / denominator);
        };
        for (aw, nw) in analytic.w.iter().zip(&numeric.w) {
            for i in 0..aw.len() {
                compare(aw[i], nw[i], &mut worst);
            }
        }
        for (ab, nb) in analytic.b.iter().zip(&numeric.b) {
            for i in 0..ab.len() {
                compare(ab[i], nb[i], &mut worst);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(rng: &mut ChaCha8Rng, dims: &[usize], out: Activation) -> Mlp {
        Mlp::new(dims, Activation::Relu, out, rng)
    }

    #[test]
    fn forward_matches_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_net(&mut rng, &[3, 5, 2], Activation::Identity);
        let x = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let direct = net.forward(&x);
        let trace = net.forward_trace(&x);
        assert_eq!(&direct, trace.output());
    }

    #[test]
    fn zero_weight_tanh_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = random_net(&mut rng, &[4, 6, 3], Activation::Tanh);
        for layer in &mut net.layers {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        let y = net.forward(&DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (dims, out) in [
            (vec![2usize, 4, 1], Activation::Identity),
            (vec![3, 5, 4, 2], Activation::Tanh),
            (vec![1, 3, 1], Activation::Identity),
        ] {
            let net = random_net(&mut rng, &dims, out);
            let x = DVector::from_fn(dims[0], |_, _| rng.gen_range(-1.0..1.0));
            let target = DVector::from_fn(*dims.last().unwrap(), |_, _| rng.gen_range(-1.0..1.0));

            let trace = net.forward_trace(&x);
            let diff = trace.output() - &target;
            let (analytic, _) = net.backward(&trace, &diff);

            let numeric = gradcheck::numeric_gradients(
                &net,
                |candidate| {
                    let y = candidate.forward(&x);
                    0.5 * (&y - &target).norm_squared()
                },
                1e-6,
            );
            let err = gradcheck::max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "dims {dims:?}: relative error {err}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = random_net(&mut rng, &[4, 8, 8, 1], Activation::Identity);
        let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let trace = net.forward_trace(&x);
        let (_, dx) = net.backward(&trace, &DVector::from_vec(vec![1.0]));
        let eps = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (net.forward(&xp)[0] - net.forward(&xm)[0]) / (2.0 * eps);
            let denominator = dx[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (dx[i] - fd).abs() / denominator < 1e-4,
                "input {i}: analytic {} vs numeric {fd}",
                dx[i]
            );
        }
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = random_net(&mut rng, &[2, 8, 1], Activation::Identity);
        let mut adam = Adam::new(&net, 1e-2);
        let x = DVector::from_vec(vec![0.5, -0.25]);
        let target = DVector::from_vec(vec![0.7]);
        let loss = |n: &Mlp| 0.5 * (n.forward(&x) - &target).norm_squared();
        let initial = loss(&net);
        for _ in 0..200 {
            let trace = net.forward_trace(&x);
            let diff = trace.output() - &target;
            let (grads, _) = net.backward(&trace, &diff);
            adam.step(&mut net, &grads);
        }
        let l = loss(&net);
        assert!(l < initial * 1e-3, "loss went {initial} -> {l}");
    }

    #[test]
    fn soft_update_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let online = random_net(&mut rng, &[2, 3, 1], Activation::Identity);
        let mut target = random_net(&mut rng, &[2, 3, 1], Activation::Identity);
        let before = target.layers[0].w[(0, 0)];
        let online_val = online.layers[0].w[(0, 0)];
        target.soft_update_from(&online, 0.1);
        let after = target.layers[0].w[(0, 0)];
        assert!((after - (0.1 * online_val + 0.9 * before)).abs() < 1e-15);

        let mut hard = random_net(&mut rng, &[2, 3, 1], Activation::Identity);
        hard.soft_update_from(&online, 1.0);
        for (h, o) in hard.layers.iter().zip(&online.layers) {
            assert_eq!(h.w, o.w);
            assert_eq!(h.b, o.b);
        }
    }

    #[test]
    fn serde_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = random_net(&mut rng, &[3, 4, 2], Activation::Tanh);
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&json).unwrap();
        for (a, b) in net.layers.iter().zip(&back.layers) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
            assert_eq!(a.activation, b.activation);
        }
    }
}
