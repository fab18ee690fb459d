use rand::Rng;

use super::Activation;
use crate::error::{Error, Result};
use crate::params::{join, Parameterized};

/// Fully connected layer `y = act(W x + b)` with row-major `W` (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs, activation);
        for w in layer.weights.iter_mut() {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs, self.outputs, self.activation)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(Error::ShapeMismatch {
                context: "dense layer input",
                expected: self.inputs,
                got: x.len(),
            });
        }
        let mut y = vec![0.0; self.outputs];
        self.forward_into(x, &mut y);
        Ok(y)
    }

    pub fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.inputs, "dense layer input");
        assert_eq!(y.len(), self.outputs, "dense layer output");
        for ((yo, row), b) in y
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs))
            .zip(&self.bias)
        {
            *yo = b + dot(row, x);
        }
        self.activation.apply(y);
    }

    /// Accumulates parameter gradients into `grad` and, when requested,
    /// writes the input gradient into `dx`.
    ///
    /// `y` is this layer's output for input `x`; `dy` is consumed as scratch.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        y: &[f64],
        dy: &mut [f64],
        grad: &mut DenseLayer,
        dx: Option<&mut [f64]>,
    ) {
        self.activation.backward_in_place(y, dy);
        for ((grow, gb), &d) in grad
            .weights
            .chunks_exact_mut(self.inputs)
            .zip(grad.bias.iter_mut())
            .zip(dy.iter())
        {
            *gb += d;
            if d != 0.0 {
                for (g, &xi) in grow.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            for (row, &d) in self.weights.chunks_exact(self.inputs).zip(dy.iter()) {
                if d != 0.0 {
                    for (v, &w) in dx.iter_mut().zip(row) {
                        *v += d * w;
                    }
                }
            }
        }
    }

    /// Gradients of `<dy, forward(x)>` w.r.t. the parameters and the input.
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<(DenseLayer, Vec<f64>)> {
        let y = self.forward(x)?;
        if dy.len() != self.outputs {
            return Err(Error::ShapeMismatch {
                context: "dense layer output gradient",
                expected: self.outputs,
                got: dy.len(),
            });
        }
        let mut grad = self.zeros_like();
        let mut dx = vec![0.0; self.inputs];
        let mut scratch = dy.to_vec();
        self.backward_accumulate(x, &y, &mut scratch, &mut grad, Some(&mut dx));
        Ok((grad, dx))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize the reduction
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

impl Parameterized for DenseLayer {
    fn visit_blocks(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weights"), &self.weights);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_blocks_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weights"), &mut self.weights);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Activations recorded during [`Mlp::forward_traced`]; `acts[0]` is the
/// input and `acts[layers.len()]` the output.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    pub acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("empty trace")
    }
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last `output`.
    pub fn glorot<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { output } else { hidden };
                DenseLayer::glorot(sizes[l], sizes[l + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn forward_traced(&self, x: &[f64]) -> MlpTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let mut y = vec![0.0; layer.outputs];
            layer.forward_into(acts.last().unwrap(), &mut y);
            acts.push(y);
        }
        MlpTrace { acts }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x).acts.pop().unwrap()
    }

    /// Backpropagates `dy` (gradient w.r.t. the output) through the stack,
    /// accumulating into `grad`; returns the input gradient.
    pub fn backward(&self, trace: &MlpTrace, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = dy.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let mut dx = vec![0.0; layer.inputs];
            layer.backward_accumulate(
                &trace.acts[l],
                &trace.acts[l + 1],
                &mut d,
                &mut grad.layers[l],
                Some(&mut dx),
            );
            d = dx;
        }
        d
    }
}

impl Parameterized for Mlp {
    fn visit_blocks(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit_blocks(&join(prefix, &format!("layer{l}")), f);
        }
    }

    fn visit_blocks_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_blocks_mut(&join(prefix, &format!("layer{l}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input() {
        let mut layer = DenseLayer::zeros(3, 3, Activation::Linear);
        for i in 0..3 {
            layer.weights[i * 3 + i] = 1.0;
        }
        let x = [0.5, -2.0, 7.0];
        assert_eq!(layer.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let layer = DenseLayer::zeros(3, 2, Activation::Relu);
        assert!(matches!(
            layer.forward(&[1.0, 2.0]),
            Err(Error::ShapeMismatch { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn relu_gradient_blocked_at_zero_preactivation() {
        // pre-activation exactly zero in output 0, positive in output 1
        let mut layer = DenseLayer::zeros(1, 2, Activation::Relu);
        layer.weights = vec![0.0, 1.0];
        let (grad, dx) = layer.backward(&[2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(grad.bias, vec![0.0, 1.0]);
        assert_eq!(grad.weights, vec![0.0, 2.0]);
        assert_eq!(dx, vec![1.0]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let acts = [
            Activation::Linear,
            Activation::Relu,
            Activation::Sigmoid,
            Activation::EluPlusOne,
            Activation::Softmax,
        ];
        for seed in 0..10u64 {
            for &act in &acts {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut layer = DenseLayer::glorot(4, 3, act, &mut rng);
                layer.bias = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let dy: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (grad, dx) = layer.backward(&x, &dy).unwrap();

                let probe = |l: &DenseLayer, x: &[f64]| -> f64 {
                    l.forward(x).unwrap().iter().zip(&dy).map(|(a, b)| a * b).sum()
                };
                let params = layer.to_flat();
                let report = finite_diff_check(
                    |p| {
                        let mut l = layer.clone();
                        l.set_flat(p);
                        probe(&l, &x)
                    },
                    &params,
                    &grad.to_flat(),
                    1e-6,
                );
                assert!(report.max_rel_err < 1e-6, "{act:?} seed {seed}: {report:?}");
                let report = finite_diff_check(|xp| probe(&layer, xp), &x, &dx, 1e-6);
                assert!(report.max_rel_err < 1e-6, "{act:?} seed {seed} dx: {report:?}");
            }
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::glorot(&[5, 7, 2], Activation::Relu, Activation::EluPlusOne, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy = [0.3, -1.2];
        let trace = mlp.forward_traced(&x);
        let mut grad = mlp.zeros_like();
        let dx = mlp.backward(&trace, &dy, &mut grad);
        let f = |m: &Mlp, x: &[f64]| -> f64 {
            m.forward(x).iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let report = finite_diff_check(
            |p| {
                let mut m = mlp.clone();
                m.set_flat(p);
                f(&m, &x)
            },
            &mlp.to_flat(),
            &grad.to_flat(),
            1e-6,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
        let report = finite_diff_check(|xp| f(&mlp, xp), &x, &dx, 1e-6);
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
