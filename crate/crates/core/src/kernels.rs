//! Triggering kernels and their exact integrals.
//!
//! Three kernel families drive the excitation term of the intensity:
//! the exponential temporal kernel `omega * exp(-omega * dt)`, the Gaussian
//! text kernel `exp(-||x_a - x_b||^2 / (2 sigma^2))`, and a small feedforward
//! network over `[x_past, x_now, dt]` with a softplus output so the kernel
//! value stays strictly positive.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Exponentially decaying temporal kernel `omega * exp(-omega * dt)`.
///
/// `dt` must be non-negative and `omega` positive; violations are
/// programming errors and panic. Underflows to exactly 0 for huge `dt`.
pub fn exp_kernel(dt: f64, omega: f64) -> f64 {
    assert!(dt >= 0.0, "exp_kernel called with negative dt {dt}");
    assert!(omega > 0.0, "exp_kernel called with non-positive omega {omega}");
    omega * (-omega * dt).exp()
}

/// Exact integral of [`exp_kernel`] over `[0, delta]`: `1 - exp(-omega * delta)`.
pub fn exp_kernel_integral(delta: f64, omega: f64) -> f64 {
    assert!(delta >= 0.0, "exp_kernel_integral called with negative delta {delta}");
    assert!(omega > 0.0, "exp_kernel_integral called with non-positive omega {omega}");
    -(-omega * delta).exp_m1()
}

/// Gaussian text kernel `exp(-||x_a - x_b||^2 / (2 sigma^2))`.
///
/// Symmetric in its arguments and exactly 1 when `x_a == x_b`.
pub fn gaussian_text_kernel(x_a: ArrayView1<f64>, x_b: ArrayView1<f64>, sigma: f64) -> Result<f64> {
    if x_a.len() != x_b.len() {
        return Err(Error::Dimension(format!(
            "text kernel arguments have dimensions {} and {}",
            x_a.len(),
            x_b.len()
        )));
    }
    assert!(sigma > 0.0, "gaussian_text_kernel called with non-positive sigma {sigma}");
    let mut sq = 0.0;
    for (a, b) in x_a.iter().zip(x_b.iter()) {
        let d = a - b;
        sq += d * d;
    }
    Ok((-sq / (2.0 * sigma * sigma)).exp())
}

/// Numerically stable `ln(1 + exp(z))`.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Numerically stable logistic function, the derivative of [`softplus`].
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Feedforward triggering kernel over `[x_past, x_now, dt]`.
///
/// Hidden layers use tanh; the scalar output passes through softplus, so the
/// kernel value is strictly positive for all finite inputs. The forward pass
/// is a pure function of the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralKernelNet {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Intermediate activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-activation values per layer, starting with the input itself.
    activations: Vec<Array1<f64>>,
    /// Pre-softplus output.
    z_out: f64,
    /// Kernel value softplus(z_out).
    pub value: f64,
}

impl NeuralKernelNet {
    /// Initialize with uniform weights in `[-s, s]`, `s = 1/sqrt(fan_in)`,
    /// drawn from a ChaCha stream seeded with `seed`.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input_dim);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(1);

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let s = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-s..=s));
            let b = Array1::from_shape_fn(fan_out, |_| rng.random_range(-s..=s));
            weights.push(w);
            biases.push(b);
        }
        NeuralKernelNet {
            layer_sizes,
            weights,
            biases,
        }
    }

    /// Rebuild a network from its layer-size header and flat parameter vector.
    pub fn from_flat(layer_sizes: Vec<usize>, flat: &[f64]) -> Result<Self> {
        if layer_sizes.len() < 2 || *layer_sizes.last().unwrap() != 1 {
            return Err(Error::InvalidParams(format!(
                "neural kernel layer sizes {layer_sizes:?} must end in an output of 1"
            )));
        }
        let expected: usize = layer_sizes
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum();
        if flat.len() != expected {
            return Err(Error::Dimension(format!(
                "neural kernel expects {} parameters for layers {:?}, got {}",
                expected,
                layer_sizes,
                flat.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut off = 0;
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = Array2::from_shape_vec(
                (fan_out, fan_in),
                flat[off..off + fan_out * fan_in].to_vec(),
            )
            .expect("shape checked above");
            off += fan_out * fan_in;
            let b = Array1::from_vec(flat[off..off + fan_out].to_vec());
            off += fan_out;
            weights.push(w);
            biases.push(b);
        }
        Ok(NeuralKernelNet {
            layer_sizes,
            weights,
            biases,
        })
    }

    /// Flatten all parameters: per layer, row-major weights then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Concatenate `[x_past, x_now, dt]` into the network input layout.
    fn assemble_input(
        &self,
        x_past: ArrayView1<f64>,
        x_now: ArrayView1<f64>,
        dt: f64,
    ) -> Result<Array1<f64>> {
        if x_past.len() != x_now.len() || 2 * x_past.len() + 1 != self.input_dim() {
            return Err(Error::Dimension(format!(
                "neural kernel input wants dimension {}, got embeddings of {} and {}",
                self.input_dim(),
                x_past.len(),
                x_now.len()
            )));
        }
        let mut input = Array1::zeros(self.input_dim());
        let v = x_past.len();
        input.slice_mut(ndarray::s![..v]).assign(&x_past);
        input.slice_mut(ndarray::s![v..2 * v]).assign(&x_now);
        input[2 * v] = dt;
        Ok(input)
    }

    /// Kernel value for a past event at `t_past` seen from `t_now >= t_past`.
    pub fn forward(
        &self,
        x_past: ArrayView1<f64>,
        t_past: f64,
        x_now: ArrayView1<f64>,
        t_now: f64,
    ) -> Result<f64> {
        Ok(self.forward_traced(x_past, t_past, x_now, t_now)?.value)
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_traced(
        &self,
        x_past: ArrayView1<f64>,
        t_past: f64,
        x_now: ArrayView1<f64>,
        t_now: f64,
    ) -> Result<ForwardTrace> {
        let input = self.assemble_input(x_past, x_now, t_now - t_past)?;
        let n = self.weights.len();
        let mut activations = Vec::with_capacity(n + 1);
        activations.push(input);
        for i in 0..n {
            let mut z = self.weights[i].dot(activations.last().unwrap()) + &self.biases[i];
            if i + 1 < n {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        let z_out = activations.last().unwrap()[0];
        Ok(ForwardTrace {
            activations,
            z_out,
            value: softplus(z_out),
        })
    }

    /// Accumulate `upstream * dF/dtheta` into `grad`, laid out as [`Self::to_flat`].
    pub fn backward(&self, trace: &ForwardTrace, upstream: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.num_params());
        let n = self.weights.len();
        // delta over the output layer's pre-activation.
        let mut delta = Array1::from_elem(1, upstream * sigmoid(trace.z_out));
        // Flat offsets of each layer's weight block.
        let mut offsets = Vec::with_capacity(n);
        let mut off = 0;
        for pair in self.layer_sizes.windows(2) {
            offsets.push(off);
            off += pair[0] * pair[1] + pair[1];
        }
        for i in (0..n).rev() {
            let a_in = &trace.activations[i];
            let (fan_in, fan_out) = (self.layer_sizes[i], self.layer_sizes[i + 1]);
            let base = offsets[i];
            for r in 0..fan_out {
                let d = delta[r];
                let row = &mut grad[base + r * fan_in..base + (r + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(a_in.iter()) {
                    *g += d * a;
                }
                grad[base + fan_out * fan_in + r] += d;
            }
            if i > 0 {
                // a_in is tanh(z); its derivative is 1 - a_in^2.
                let mut next = self.weights[i].t().dot(&delta);
                for (v, a) in next.iter_mut().zip(a_in.iter()) {
                    *v *= 1.0 - a * a;
                }
                delta = next;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use proptest::prelude::*;

    /// Composite Simpson integration, independent of the closed form.
    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn exp_kernel_at_zero_is_omega() {
        assert_eq!(exp_kernel(0.0, 0.05), 0.05);
    }

    #[test]
    fn exp_kernel_one_efold() {
        // dt = 20, omega = 0.05: 0.05 * exp(-1).
        let expected = 0.018393972058572117;
        assert!((exp_kernel(20.0, 0.05) - expected).abs() < 1e-15);
    }

    #[test]
    fn exp_kernel_underflows_to_zero() {
        assert!(exp_kernel(1e6, 0.05) < 1e-300);
    }

    #[test]
    #[should_panic]
    fn exp_kernel_rejects_negative_dt() {
        exp_kernel(-1.0, 0.05);
    }

    #[test]
    fn exp_kernel_integral_examples() {
        assert_eq!(exp_kernel_integral(0.0, 0.05), 0.0);
        let expected = 0.6321205588285577; // 1 - exp(-1)
        assert!((exp_kernel_integral(20.0, 0.05) - expected).abs() < 1e-10);
        assert!((exp_kernel_integral(1e9, 0.05) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_text_kernel_examples() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        assert_eq!(gaussian_text_kernel(a.view(), a.view(), 1.0).unwrap(), 1.0);
        let got = gaussian_text_kernel(a.view(), b.view(), 1.0).unwrap();
        assert!((got - (-1.0f64).exp()).abs() < 1e-15);
        // Bandwidth limit: huge sigma sends every pair to 1.
        let far = arr1(&[100.0, -50.0]);
        assert!((gaussian_text_kernel(a.view(), far.view(), 1e12).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_text_kernel_dimension_mismatch() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0]);
        assert!(gaussian_text_kernel(a.view(), b.view(), 1.0).is_err());
    }

    #[test]
    fn zero_network_outputs_ln_two() {
        let zeros = [0.0; 5 * 3 + 3 + 3 + 1];
        let net = NeuralKernelNet::from_flat(vec![5, 3, 1], &zeros).unwrap();
        let x = arr1(&[0.3, -0.2]);
        let y = arr1(&[0.1, 0.4]);
        let got = net.forward(x.view(), 0.0, y.view(), 1.5).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = NeuralKernelNet::new(5, &[4, 4], 42);
        let x = arr1(&[0.5, -1.0]);
        let y = arr1(&[0.0, 2.0]);
        let a = net.forward(x.view(), 1.0, y.view(), 3.0).unwrap();
        let b = net.forward(x.view(), 1.0, y.view(), 3.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = NeuralKernelNet::new(7, &[20, 20], 9);
        let b = NeuralKernelNet::new(7, &[20, 20], 9);
        assert_eq!(a.to_flat(), b.to_flat());
        let c = NeuralKernelNet::new(7, &[20, 20], 10);
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn forward_positive_over_random_draws() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for trial in 0..10_000 {
            let net = NeuralKernelNet::new(5, &[4], trial);
            let x = Array1::from_shape_fn(2, |_| rng.random_range(-5.0..5.0));
            let y = Array1::from_shape_fn(2, |_| rng.random_range(-5.0..5.0));
            let dt = rng.random_range(0.0..10.0);
            let v = net.forward(x.view(), 0.0, y.view(), dt).unwrap();
            assert!(v > 0.0, "trial {trial}: kernel value {v} not positive");
        }
    }

    #[test]
    fn flat_roundtrip() {
        let net = NeuralKernelNet::new(11, &[20, 20], 3);
        let rebuilt =
            NeuralKernelNet::from_flat(net.layer_sizes().to_vec(), &net.to_flat()).unwrap();
        assert_eq!(net, rebuilt);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradient() {
        let net = NeuralKernelNet::new(5, &[8, 8], 1);
        let x = arr1(&[0.5, -0.5]);
        let trace = net.forward_traced(x.view(), 0.0, x.view(), 2.0).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&trace, 0.0, &mut grad);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let net = NeuralKernelNet::new(5, &[8, 8], 2);
        let x = arr1(&[0.5, -0.5]);
        let y = arr1(&[1.0, 0.25]);
        let trace = net.forward_traced(x.view(), 0.5, y.view(), 2.0).unwrap();
        let mut g1 = vec![0.0; net.num_params()];
        let mut g2 = vec![0.0; net.num_params()];
        net.backward(&trace, 1.5, &mut g1);
        net.backward(&trace, 3.0, &mut g2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn backward_matches_central_finite_differences() {
        // Every weight of a [5 -> 8 -> 8 -> 1] net, step 1e-5, rel err <= 1e-5.
        let net = NeuralKernelNet::new(5, &[8, 8], 11);
        let x = arr1(&[0.7, -0.3]);
        let y = arr1(&[0.2, 1.1]);
        let (tp, tn) = (0.25, 1.75);
        let trace = net.forward_traced(x.view(), tp, y.view(), tn).unwrap();
        let mut analytic = vec![0.0; net.num_params()];
        net.backward(&trace, 1.0, &mut analytic);

        let flat = net.to_flat();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let f_plus = NeuralKernelNet::from_flat(net.layer_sizes().to_vec(), &plus)
                .unwrap()
                .forward(x.view(), tp, y.view(), tn)
                .unwrap();
            let f_minus = NeuralKernelNet::from_flat(net.layer_sizes().to_vec(), &minus)
                .unwrap()
                .forward(x.view(), tp, y.view(), tn)
                .unwrap();
            let fd = (f_plus - f_minus) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic[i] - fd).abs() / denom <= 1e-5,
                "param {i}: analytic {} vs fd {}",
                analytic[i],
                fd
            );
        }
    }

    proptest! {
        #[test]
        fn quadrature_matches_exp_kernel_integral(
            omega in 0.01f64..5.0,
            delta in 0.0f64..100.0,
        ) {
            // Truncate where the kernel tail is below 1e-17 so a fixed grid
            // resolves the decay scale at every omega.
            let upper = delta.min(40.0 / omega);
            let tail = (-omega * upper).exp() - (-omega * delta).exp();
            let numeric = simpson(|s| exp_kernel(s, omega), 0.0, upper, 20_000) + tail;
            let exact = exp_kernel_integral(delta, omega);
            prop_assert!((numeric - exact).abs() <= 1e-8, "omega {omega} delta {delta}: {numeric} vs {exact}");
        }

        #[test]
        fn gaussian_kernel_is_symmetric(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            sigma in 0.05f64..5.0,
        ) {
            let xa = Array1::from_vec(a);
            let xb = Array1::from_vec(b);
            let ab = gaussian_text_kernel(xa.view(), xb.view(), sigma).unwrap();
            let ba = gaussian_text_kernel(xb.view(), xa.view(), sigma).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }
}
