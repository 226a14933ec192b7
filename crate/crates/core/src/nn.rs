//! Multilayer perceptrons over a [`ParamStore`] and diagonal-Gaussian
//! log-densities, both as plain evaluations and as tape compositions.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Xavier-uniform weight matrix.
pub fn xavier_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = libm::sqrt(6.0 / (rows + cols) as f64);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new([rows, cols].to_vec(), data).expect("finite init")
}

/// Affine layers with tanh hidden activations and a linear output layer.
/// Parameters are registered as `{prefix}.w{i}` / `{prefix}.b{i}`.
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        dims: &[usize],
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(String::from(
                "mlp needs at least input and output dims",
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let w = store.add(&format!("{prefix}.w{i}"), xavier_uniform(rng, fan_out, fan_in))?;
            let b = store.add(&format!("{prefix}.b{i}"), Tensor::zeros([fan_out].to_vec()))?;
            weights.push(w);
            biases.push(b);
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.value(x).rank() != 1 || tape.value(x).len() != self.dims[0] {
            return Err(shape_err("mlp input", self.dims[0], tape.value(x).len()));
        }
        let mut h = x;
        for i in 0..self.weights.len() {
            let w = tape.param(store, self.weights[i]);
            let b = tape.param(store, self.biases[i]);
            let lin = tape.matvec(w, h)?;
            h = tape.add(lin, b)?;
            if i + 1 < self.weights.len() {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass on a throwaway tape, returning plain values.
    pub fn forward_value(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant_vec(x)?;
        let out = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Log-density of `x` under a diagonal Gaussian:
/// `sum_k [ -1/2 ln(2 pi sigma2_k) - (x_k - mu_k)^2 / (2 sigma2_k) ]`.
pub fn gaussian_logprob(x: &[f64], mu: &[f64], sigma2: &[f64]) -> Result<f64> {
    if x.len() != mu.len() || x.len() != sigma2.len() {
        return Err(shape_err("gaussian_logprob", x.len(), mu.len()));
    }
    if sigma2.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument(String::from(
            "gaussian variance must be positive",
        )));
    }
    let mut lp = 0.0;
    for k in 0..x.len() {
        let d = x[k] - mu[k];
        lp += -0.5 * (LN_2PI + libm::log(sigma2[k])) - d * d / (2.0 * sigma2[k]);
    }
    Ok(lp)
}

/// Tape composition of [`gaussian_logprob`] with `x` held constant, for
/// differentiating through `mu` and `sigma2`.
pub fn gaussian_logprob_var(tape: &mut Tape, x: &[f64], mu: Var, sigma2: Var) -> Result<Var> {
    if tape.value(mu).len() != x.len() || tape.value(sigma2).len() != x.len() {
        return Err(shape_err("gaussian_logprob_var", x.len(), tape.value(mu).len()));
    }
    let xv = tape.constant_vec(x)?;
    let diff = tape.sub(xv, mu)?;
    let sq = tape.mul(diff, diff)?;
    let quad = tape.div(sq, sigma2)?;
    let ln_s2 = tape.ln(sigma2)?;
    let ln_term = tape.add_scalar(ln_s2, LN_2PI)?;
    let per_coord = tape.add(ln_term, quad)?;
    let total = tape.sum(per_coord)?;
    tape.scale(total, -0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_forward_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::init(&mut store, &mut rng, "net", &[3, 2]).unwrap();
        let w = store.id("net.w0").unwrap();
        let b = store.id("net.b0").unwrap();
        store.set_value(w, Tensor::zeros([2, 3].to_vec())).unwrap();
        store.set_value(b, Tensor::vector([0.7, -1.2].to_vec()).unwrap()).unwrap();
        let out = mlp.forward_value(&store, &[5.0, -3.0, 9.0]).unwrap();
        assert_eq!(out, [0.7, -1.2]);
    }

    #[test]
    fn identity_single_layer_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::init(&mut store, &mut rng, "net", &[2, 2]).unwrap();
        store
            .set_value(
                store.id("net.w0").unwrap(),
                Tensor::new([2, 2].to_vec(), [1.0, 0.0, 0.0, 1.0].to_vec()).unwrap(),
            )
            .unwrap();
        let x = [0.4, -2.5];
        assert_eq!(mlp.forward_value(&store, &x).unwrap(), x);
    }

    #[test]
    fn two_layer_forward_matches_hand_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::init(&mut store, &mut rng, "net", &[2, 2, 1]).unwrap();
        store
            .set_value(
                store.id("net.w0").unwrap(),
                Tensor::new([2, 2].to_vec(), [0.5, -0.25, 1.0, 2.0].to_vec()).unwrap(),
            )
            .unwrap();
        store
            .set_value(store.id("net.b0").unwrap(), Tensor::vector([0.1, -0.2].to_vec()).unwrap())
            .unwrap();
        store
            .set_value(
                store.id("net.w1").unwrap(),
                Tensor::new([1, 2].to_vec(), [2.0, -1.0].to_vec()).unwrap(),
            )
            .unwrap();
        store
            .set_value(store.id("net.b1").unwrap(), Tensor::vector([0.05].to_vec()).unwrap())
            .unwrap();
        let x = [0.3, -0.8];
        let h0 = libm::tanh(0.5 * 0.3 + (-0.25) * (-0.8) + 0.1);
        let h1 = libm::tanh(1.0 * 0.3 + 2.0 * (-0.8) - 0.2);
        let expected = 2.0 * h0 - 1.0 * h1 + 0.05;
        let out = mlp.forward_value(&store, &x).unwrap();
        assert_relative_eq!(out[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::init(&mut store, &mut rng, "net", &[3, 1]).unwrap();
        assert!(mlp.forward_value(&store, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gaussian_logprob_at_mean_unit_variance() {
        let mu = [0.3, -1.1];
        let lp = gaussian_logprob(&mu, &mu, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(lp, -LN_2PI, epsilon = 1e-14);
    }

    #[test]
    fn gaussian_logprob_one_sigma_offset() {
        let mu = [0.5, -2.0, 1.0];
        let sigma2 = [0.25, 4.0, 1.0];
        let x: Vec<f64> = mu
            .iter()
            .zip(&sigma2)
            .map(|(m, s2)| m + libm::sqrt(*s2))
            .collect();
        let at_mu = gaussian_logprob(&mu, &mu, &sigma2).unwrap();
        let at_x = gaussian_logprob(&x, &mu, &sigma2).unwrap();
        assert_relative_eq!(at_x, at_mu - 1.5, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_logprob_matches_naive_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 5;
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma2: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        // naive product-of-densities oracle
        let mut density = 1.0;
        for k in 0..d {
            let diff = x[k] - mu[k];
            density *= libm::exp(-diff * diff / (2.0 * sigma2[k]))
                / libm::sqrt(2.0 * core::f64::consts::PI * sigma2[k]);
        }
        let lp = gaussian_logprob(&x, &mu, &sigma2).unwrap();
        assert_relative_eq!(lp, libm::log(density), epsilon = 1e-10);
    }

    #[test]
    fn gaussian_logprob_rejects_nonpositive_variance() {
        assert!(gaussian_logprob(&[0.0], &[0.0], &[0.0]).is_err());
        assert!(gaussian_logprob(&[0.0], &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn tape_gaussian_logprob_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma2: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..2.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let mu_v = tape.constant_vec(&mu).unwrap();
        let s2_v = tape.constant_vec(&sigma2).unwrap();
        let lp = gaussian_logprob_var(&mut tape, &x, mu_v, s2_v).unwrap();
        assert_relative_eq!(
            tape.value(lp).item().unwrap(),
            gaussian_logprob(&x, &mu, &sigma2).unwrap(),
            epsilon = 1e-12
        );
    }
}
