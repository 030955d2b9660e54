//! Small fully connected network with exact GELU activations and a
//! hand-written reverse pass.
//!
//! Parameters live in one flat vector so the optimizer can treat every model
//! family alike. Layer `l` (with `n_in` inputs and `n_out` outputs) stores its
//! weights row-major as an `n_out × n_in` block followed by `n_out` biases.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::math::{normal_cdf, normal_pdf};
use crate::{rng, Error, Result};

/// Inputs: scaled elapsed time and three meal covariates.
pub const INPUTS: usize = 4;
pub const HIDDEN: usize = 64;
/// Layer widths of the absorption network.
pub const ARCHITECTURE: [usize; 4] = [INPUTS, HIDDEN, HIDDEN, 1];

/// `x Φ(x)` with the Gaussian CDF.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Map applied to the raw network output to make it nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OutputTransform {
    #[default]
    Softplus,
}

impl OutputTransform {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            OutputTransform::Softplus => crate::math::softplus(z),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            OutputTransform::Softplus => crate::math::sigmoid(z),
        }
    }
}

/// Input and output scaling wrapped around the network.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ScalingSpec {
    /// Multipliers for (elapsed minutes, covariate 1..3).
    pub input_scale: [f64; INPUTS],
    /// Rate (1/min) corresponding to a unit transformed output.
    pub output_scale: f64,
    pub transform: OutputTransform,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            input_scale: [1.0 / 240.0, 1.0, 1.0, 1.0],
            output_scale: 1.0 / 240.0,
            transform: OutputTransform::Softplus,
        }
    }
}

impl ScalingSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .input_scale
            .iter()
            .chain(core::iter::once(&self.output_scale))
            .all(|s| s.is_finite() && *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "scaling factors must be positive and finite",
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_cached`] for the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the input; `acts[l]` the output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f64>>,
    /// `Φ(z)` of every hidden pre-activation, reused by the reverse pass.
    cdf: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// A network of the given widths with every parameter zero.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) || *sizes.last().unwrap() != 1 {
            return Err(Error::invalid(
                "network needs at least two layers, nonzero widths and a scalar output",
            ));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    pub fn from_parts(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: net.params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        net.params = params;
        Ok(net)
    }

    /// Fan-in scaled uniform weights `U(-1/√n_in, 1/√n_in)` and zero biases,
    /// deterministic in `seed`.
    pub fn init(seed: u64) -> Self {
        Self::init_with(&ARCHITECTURE, seed).expect("fixed architecture is valid")
    }

    pub fn init_with(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(n_in as f64);
            for p in &mut net.params[offset..offset + n_in * n_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += n_in * n_out + n_out;
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Flat parameter view.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// Weights (row-major `n_out × n_in`) and biases of one layer.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.params[off..].split_at(n_in * n_out);
        (w, &rest[..n_out])
    }

    /// Scalar output before the nonnegativity transform.
    pub fn forward(&self, input: &[f64]) -> f64 {
        let mut cache = ForwardCache::default();
        self.forward_cached(input, &mut cache)
    }

    pub fn forward_cached(&self, input: &[f64], cache: &mut ForwardCache) -> f64 {
        assert_eq!(input.len(), self.input_dim(), "input width");
        let layers = self.sizes.len() - 1;
        cache.acts.resize_with(layers, Vec::new);
        cache.pre.resize_with(layers, Vec::new);
        cache.cdf.resize_with(layers, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);

        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;

            let pre = &mut cache.pre[l];
            pre.clear();
            let a = &cache.acts[l];
            pre.extend(
                w.chunks_exact(n_in)
                    .zip(b)
                    .map(|(row, bias)| bias + dot(row, a)),
            );
            if l + 1 < layers {
                let cdf = &mut cache.cdf[l];
                cdf.clear();
                cdf.extend(cache.pre[l].iter().map(|&z| normal_cdf(z)));
                let next = &mut cache.acts[l + 1];
                next.clear();
                next.extend(cache.pre[l].iter().zip(cdf.iter()).map(|(&z, &c)| z * c));
            }
        }
        cache.pre[layers - 1][0]
    }

    /// Accumulates `cotangent · ∂output/∂θ` into `grad_params` and writes
    /// `cotangent · ∂output/∂input` to `grad_input`. `cache` must come from
    /// [`Mlp::forward_cached`] on the same parameters.
    pub fn backward(
        &self,
        cache: &mut ForwardCache,
        cotangent: f64,
        grad_params: &mut [f64],
        grad_input: &mut [f64],
    ) {
        assert_eq!(grad_params.len(), self.params.len(), "gradient length");
        assert_eq!(grad_input.len(), self.input_dim(), "input gradient width");
        let layers = self.sizes.len() - 1;
        let ForwardCache {
            acts,
            pre,
            cdf,
            delta,
            delta_prev,
        } = cache;
        delta.clear();
        delta.push(cotangent);

        let mut end = self.params.len();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let start = end - (n_in * n_out + n_out);
            let w = &self.params[start..start + n_in * n_out];
            let (gw, gb) = grad_params[start..end].split_at_mut(n_in * n_out);
            let a = &acts[l];
            for ((row, gbias), &d) in gw
                .chunks_exact_mut(n_in)
                .zip(gb.iter_mut())
                .zip(delta.iter())
            {
                *gbias += d;
                for (g, &ai) in row.iter_mut().zip(a) {
                    *g += d * ai;
                }
            }
            delta_prev.clear();
            delta_prev.resize(n_in, 0.0);
            for (row, &d) in w.chunks_exact(n_in).zip(delta.iter()) {
                for (dp, &wij) in delta_prev.iter_mut().zip(row) {
                    *dp += wij * d;
                }
            }
            if l == 0 {
                grad_input.copy_from_slice(delta_prev);
            } else {
                for ((dp, &z), &c) in delta_prev.iter_mut().zip(&pre[l - 1]).zip(&cdf[l - 1]) {
                    *dp *= c + z * normal_pdf(z);
                }
                core::mem::swap(delta, delta_prev);
            }
            end = start;
        }
    }
}

/// Dot product with four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Erf from its Maclaurin series, summed until terms vanish.
    fn erf_series(z: f64) -> f64 {
        let mut sum = 0.0;
        let mut term = z; // (-1)^n z^(2n+1) / n!
        for n in 0..200 {
            sum += term / (2 * n + 1) as f64;
            term *= -z * z / (n + 1) as f64;
        }
        sum * 2.0 / core::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        let oracle = 1.0 * 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((gelu(1.0) - oracle).abs() < 1e-10);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.4, 0.0, 0.9, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&ARCHITECTURE).unwrap();
        assert_eq!(net.forward(&[0.3, 0.2, 0.5, 0.3]), 0.0);
    }

    #[test]
    fn final_bias_passes_through_zero_hidden_weights() {
        let mut net = Mlp::zeros(&ARCHITECTURE).unwrap();
        let n = net.num_params();
        net.params_mut()[n - 1] = 0.37;
        assert_eq!(net.forward(&[5.0, -1.0, 2.0, 0.0]), 0.37);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = Mlp::init(3);
        let mut cache = ForwardCache::default();
        net.forward_cached(&[0.4, 0.1, 0.7, 0.2], &mut cache);
        let mut gp = vec![0.0; net.num_params()];
        let mut gi = [1.0; INPUTS];
        net.backward(&mut cache, 0.0, &mut gp, &mut gi);
        assert!(gp.iter().all(|&g| g == 0.0));
        assert!(gi.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_network_has_zero_input_gradient() {
        let net = Mlp::zeros(&ARCHITECTURE).unwrap();
        let mut cache = ForwardCache::default();
        net.forward_cached(&[0.4, 0.1, 0.7, 0.2], &mut cache);
        let mut gp = vec![0.0; net.num_params()];
        let mut gi = [1.0; INPUTS];
        net.backward(&mut cache, 1.0, &mut gp, &mut gi);
        assert_eq!(gi, [0.0; INPUTS]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        assert_eq!(Mlp::init(11), Mlp::init(11));
        assert_ne!(Mlp::init(11), Mlp::init(12));
        let net = Mlp::init(11);
        let (_, b) = net.layer(1);
        assert!(b.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Mlp::zeros(&[4]).is_err());
        assert!(Mlp::zeros(&[4, 0, 1]).is_err());
        assert!(Mlp::zeros(&[4, 8, 2]).is_err());
        assert!(Mlp::from_parts(&[2, 1], vec![0.0; 2]).is_err());
        assert!(Mlp::from_parts(&[2, 1], vec![0.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn scaling_must_be_positive() {
        let mut s = ScalingSpec::default();
        assert!(s.validate().is_ok());
        s.output_scale = 0.0;
        assert!(s.validate().is_err());
    }
}
