//! Square banded blocks stored diagonal by diagonal.

/// An `m x m` matrix whose entries outside `|i - j| <= bandwidth` are
/// structurally zero.
///
/// Diagonals are stored contiguously from offset `-bandwidth` to
/// `+bandwidth`; diagonal `d` holds `m - |d|` entries ordered by
/// `min(i, j)`. A bandwidth of `m - 1` or more stores the full block.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedBlock {
    dim: usize,
    bandwidth: usize,
    starts: Vec<usize>,
    data: Vec<f64>,
}

/// Number of stored entries of an `m x m` block with bandwidth `b`.
pub fn band_entries(m: usize, b: usize) -> usize {
    let b = effective_bandwidth(m, b);
    m + 2 * (1..=b).map(|d| m - d).sum::<usize>()
}

fn effective_bandwidth(m: usize, b: usize) -> usize {
    b.min(m.saturating_sub(1))
}

impl BandedBlock {
    pub fn zeros(dim: usize, bandwidth: usize) -> Self {
        let bandwidth = effective_bandwidth(dim, bandwidth);
        let mut starts = Vec::with_capacity(2 * bandwidth + 1);
        let mut pos = 0;
        for d in 0..=2 * bandwidth {
            starts.push(pos);
            pos += dim - d.abs_diff(bandwidth);
        }
        Self {
            dim,
            bandwidth,
            starts,
            data: vec![0.0; pos],
        }
    }

    /// `value * I` with the given band structure.
    pub fn scaled_identity(dim: usize, bandwidth: usize, value: f64) -> Self {
        let mut block = Self::zeros(dim, bandwidth);
        for i in 0..dim {
            block.set(i, i, value);
        }
        block
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bandwidth after clamping to `dim - 1`.
    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Column range `lo..hi` of the stored entries in row `i`.
    #[inline]
    pub fn row_span(&self, i: usize) -> (usize, usize) {
        (
            i.saturating_sub(self.bandwidth),
            (i + self.bandwidth + 1).min(self.dim),
        )
    }

    /// Flat storage index of entry `(i, j)`; caller guarantees it is in band.
    #[inline]
    pub fn index_unchecked(&self, i: usize, j: usize) -> usize {
        self.starts[j + self.bandwidth - i] + i.min(j)
    }

    pub fn index(&self, i: usize, j: usize) -> Option<usize> {
        (i < self.dim && j < self.dim && i.abs_diff(j) <= self.bandwidth)
            .then(|| self.index_unchecked(i, j))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.index(i, j).map_or(0.0, |k| self.data[k])
    }

    /// Panics if `(i, j)` lies outside the band.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let k = self
            .index(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside band {}", self.bandwidth));
        self.data[k] = value;
    }

    /// `out += self * x`
    pub fn mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        for (i, o) in out.iter_mut().enumerate().take(self.dim) {
            let (lo, hi) = self.row_span(i);
            let mut acc = 0.0;
            for j in lo..hi {
                acc += self.data[self.index_unchecked(i, j)] * x[j];
            }
            *o += acc;
        }
    }

    /// `out += self^T * y`
    pub fn mul_vec_transpose_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.dim);
        for (i, &yi) in y.iter().enumerate().take(self.dim) {
            let (lo, hi) = self.row_span(i);
            for j in lo..hi {
                out[j] += self.data[self.index_unchecked(i, j)] * yi;
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j)).collect())
            .collect()
    }
}
