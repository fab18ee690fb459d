//! Locally linear transition: a softmax-weighted mix of banded basis matrices.

use rand::Rng;

use crate::banded::{band_entries, BandedBlock};
use crate::error::{Error, Result};
use crate::nn::{elu_plus_one, Activation, Mlp, MlpTrace};
use crate::params::{join, Parameterized};

/// Off-diagonal coupling of the default basis: `B12 = 0.2 I`, `B21 = -0.2 I`.
pub const DEFAULT_COUPLING: f64 = 0.2;
/// Initial transition noise, `elu(raw) + 1 = 0.1`.
pub const DEFAULT_TRANS_NOISE: f64 = 0.1;

/// A `2m x 2m` matrix made of four banded `m x m` blocks
/// `[[b11, b12], [b21, b22]]`, all with the same bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTransition {
    pub b11: BandedBlock,
    pub b12: BandedBlock,
    pub b21: BandedBlock,
    pub b22: BandedBlock,
}

impl BlockTransition {
    pub fn zeros(m: usize, bandwidth: usize) -> Self {
        let z = BandedBlock::zeros(m, bandwidth);
        Self {
            b11: z.clone(),
            b12: z.clone(),
            b21: z.clone(),
            b22: z,
        }
    }

    /// `B11 = B22 = I`, `B12 = 0.2 I`, `B21 = -0.2 I`.
    pub fn default_init(m: usize, bandwidth: usize) -> Self {
        Self {
            b11: BandedBlock::scaled_identity(m, bandwidth, 1.0),
            b12: BandedBlock::scaled_identity(m, bandwidth, DEFAULT_COUPLING),
            b21: BandedBlock::scaled_identity(m, bandwidth, -DEFAULT_COUPLING),
            b22: BandedBlock::scaled_identity(m, bandwidth, 1.0),
        }
    }

    pub fn m(&self) -> usize {
        self.b11.dim()
    }

    pub fn blocks(&self) -> [&BandedBlock; 4] {
        [&self.b11, &self.b12, &self.b21, &self.b22]
    }

    pub fn blocks_mut(&mut self) -> [&mut BandedBlock; 4] {
        [&mut self.b11, &mut self.b12, &mut self.b21, &mut self.b22]
    }

    /// `A * x` for a state vector of length `2m`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let m = self.m();
        let (xu, xl) = x.split_at(m);
        let mut out = vec![0.0; 2 * m];
        let (ou, ol) = out.split_at_mut(m);
        self.b11.mul_vec_add(xu, ou);
        self.b12.mul_vec_add(xl, ou);
        self.b21.mul_vec_add(xu, ol);
        self.b22.mul_vec_add(xl, ol);
        out
    }

    /// `A^T * y`
    pub fn mul_vec_transpose(&self, y: &[f64]) -> Vec<f64> {
        let m = self.m();
        let (yu, yl) = y.split_at(m);
        let mut out = vec![0.0; 2 * m];
        let (ou, ol) = out.split_at_mut(m);
        self.b11.mul_vec_transpose_add(yu, ou);
        self.b21.mul_vec_transpose_add(yl, ou);
        self.b12.mul_vec_transpose_add(yu, ol);
        self.b22.mul_vec_transpose_add(yl, ol);
        out
    }

    /// `self += scale * other`; both must share dimensions and bandwidth.
    pub fn add_scaled(&mut self, scale: f64, other: &BlockTransition) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += scale * s;
            }
        }
    }

    /// Sum over all stored entries of `self ⊙ other`.
    pub fn inner(&self, other: &BlockTransition) -> f64 {
        self.blocks()
            .into_iter()
            .zip(other.blocks())
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = self.m();
        let mut out = vec![vec![0.0; 2 * m]; 2 * m];
        for (bi, block) in self.blocks().into_iter().enumerate() {
            let (r0, c0) = ((bi / 2) * m, (bi % 2) * m);
            for (i, row) in block.to_dense().into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    out[r0 + i][c0 + j] = v;
                }
            }
        }
        out
    }
}

/// Learned transition: `K` basis matrices, the coefficient network that mixes
/// them, and the raw transition-noise parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub basis: Vec<BlockTransition>,
    /// Maps the previous posterior mean (length `2m`) to `K` softmax weights.
    pub coeff_net: Mlp,
    /// Transition noise variance is `elu(raw) + 1`, elementwise, length `2m`.
    pub trans_noise_raw: Vec<f64>,
}

/// Result of [`assemble_transition`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AssembledTransition {
    pub matrix: BlockTransition,
    pub coeff_trace: MlpTrace,
}

impl AssembledTransition {
    pub fn alpha(&self) -> &[f64] {
        self.coeff_trace.output()
    }
}

/// `m, b, K` basis matrices all set to the default initialization.
pub fn default_basis_init(m: usize, bandwidth: usize, num_basis: usize) -> Vec<BlockTransition> {
    vec![BlockTransition::default_init(m, bandwidth); num_basis]
}

/// Learnable scalars in a [`TransitionModel`]; `coeff_hidden = 0` means the
/// coefficient network is a single affine layer followed by softmax.
pub fn parameter_count(m: usize, bandwidth: usize, num_basis: usize, coeff_hidden: usize) -> usize {
    let n = 2 * m;
    let basis = num_basis * 4 * band_entries(m, bandwidth);
    let coeff = if coeff_hidden == 0 {
        n * num_basis + num_basis
    } else {
        n * coeff_hidden + coeff_hidden + coeff_hidden * num_basis + num_basis
    };
    basis + coeff + n
}

impl TransitionModel {
    pub fn new<R: Rng + ?Sized>(
        m: usize,
        bandwidth: usize,
        num_basis: usize,
        coeff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if m == 0 || num_basis == 0 {
            return Err(Error::InvalidDimension(format!(
                "transition needs m >= 1 and K >= 1 (got m={m}, K={num_basis})"
            )));
        }
        let n = 2 * m;
        let sizes: Vec<usize> = if coeff_hidden == 0 {
            vec![n, num_basis]
        } else {
            vec![n, coeff_hidden, num_basis]
        };
        Ok(Self {
            basis: default_basis_init(m, bandwidth, num_basis),
            coeff_net: Mlp::glorot(&sizes, Activation::Relu, Activation::Softmax, rng),
            trans_noise_raw: vec![DEFAULT_TRANS_NOISE.ln(); n],
        })
    }

    pub fn m(&self) -> usize {
        self.basis[0].m()
    }

    pub fn bandwidth(&self) -> usize {
        self.basis[0].b11.bandwidth()
    }

    pub fn num_basis(&self) -> usize {
        self.basis.len()
    }

    /// Positive transition-noise variances, length `2m`.
    pub fn trans_noise(&self) -> Vec<f64> {
        self.trans_noise_raw.iter().map(|&r| elu_plus_one(r)).collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

impl Parameterized for TransitionModel {
    fn visit_blocks(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (k, a) in self.basis.iter().enumerate() {
            let p = join(prefix, &format!("basis{k}"));
            for (name, block) in ["b11", "b12", "b21", "b22"].into_iter().zip(a.blocks()) {
                f(&join(&p, name), block.data());
            }
        }
        self.coeff_net.visit_blocks(&join(prefix, "coeff_net"), f);
        f(&join(prefix, "trans_noise_raw"), &self.trans_noise_raw);
    }

    fn visit_blocks_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (k, a) in self.basis.iter_mut().enumerate() {
            let p = join(prefix, &format!("basis{k}"));
            for (name, block) in ["b11", "b12", "b21", "b22"].into_iter().zip(a.blocks_mut()) {
                f(&join(&p, name), block.data_mut());
            }
        }
        self.coeff_net.visit_blocks_mut(&join(prefix, "coeff_net"), f);
        f(&join(prefix, "trans_noise_raw"), &mut self.trans_noise_raw);
    }
}

/// `A_t = sum_k alpha_k(mean) A^(k)`, computed block by block.
pub fn assemble_transition(model: &TransitionModel, mean: &[f64]) -> Result<AssembledTransition> {
    let n = 2 * model.m();
    if mean.len() != n {
        return Err(Error::ShapeMismatch {
            context: "transition coefficient input",
            expected: n,
            got: mean.len(),
        });
    }
    let coeff_trace = model.coeff_net.forward_traced(mean);
    let alpha = coeff_trace.output();
    if let Some(k) = alpha.iter().position(|a| !a.is_finite()) {
        return Err(Error::non_finite(
            format!("transition coefficient {k} (input mean norm {:.3e})", l2(mean)),
            None,
        ));
    }
    let mut matrix = BlockTransition::zeros(model.m(), model.bandwidth());
    for (a, basis) in alpha.iter().zip(&model.basis) {
        matrix.add_scaled(*a, basis);
    }
    Ok(AssembledTransition {
        matrix,
        coeff_trace,
    })
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Backward of [`assemble_transition`]: accumulates basis and coefficient
/// network gradients into `grad` and returns the gradient w.r.t. `mean`.
pub fn assemble_transition_backward(
    model: &TransitionModel,
    assembled: &AssembledTransition,
    d_matrix: &BlockTransition,
    grad: &mut TransitionModel,
) -> Vec<f64> {
    let alpha = assembled.alpha();
    let mut d_alpha = vec![0.0; alpha.len()];
    for k in 0..alpha.len() {
        grad.basis[k].add_scaled(alpha[k], d_matrix);
        d_alpha[k] = d_matrix.inner(&model.basis[k]);
    }
    model
        .coeff_net
        .backward(&assembled.coeff_trace, &d_alpha, &mut grad.coeff_net)
}
