//! Named parameter blocks and their flat-vector view.
//!
//! Every learnable structure exposes its scalars as an ordered list of named
//! blocks. Gradients use the same type as the parameters they belong to, so
//! flattening a model and its gradient yields aligned vectors.

/// A structure with learnable scalars grouped into named blocks.
///
/// Block order must be fixed for a given architecture; checkpoints and the
/// optimizer rely on it.
pub trait Parameterized {
    fn visit_blocks(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));

    fn visit_blocks_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_blocks("", &mut |_, b| n += b.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_blocks("", &mut |_, b| out.extend_from_slice(b));
        out
    }

    /// Overwrites all parameters from `flat`, which must have `num_params()` entries.
    fn set_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_blocks_mut("", &mut |_, b| {
            b.copy_from_slice(&flat[pos..pos + b.len()]);
            pos += b.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter vector has wrong length");
    }

    /// `(name, len)` for every block, in visiting order.
    fn block_layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit_blocks("", &mut |name, b| out.push((name.to_string(), b.len())));
        out
    }

    fn fill_zero(&mut self) {
        self.visit_blocks_mut("", &mut |_, b| b.iter_mut().for_each(|x| *x = 0.0));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
