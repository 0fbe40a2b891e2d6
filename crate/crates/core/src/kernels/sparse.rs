use std::collections::{HashMap, HashSet};

use super::{Matrix, SeededRng};
use crate::error::{Error, Result};

/// Sorted, duplicate-free flat (row-major) positions inside a `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSet {
    rows: usize,
    cols: usize,
    indices: Vec<usize>,
}

impl IndexSet {
    /// Validates that `indices` are strictly increasing and in range.
    pub fn new(rows: usize, cols: usize, indices: Vec<usize>) -> Result<Self> {
        let bound = rows * cols;
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(format!(
                    "index set not strictly increasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= bound {
                return Err(Error::IndexOutOfRange { index: last, bound });
            }
        }
        Ok(Self {
            rows,
            cols,
            indices,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indices: Vec::new(),
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indices: (0..rows * cols).collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    /// Iterates `(row, col)` pairs in index order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.indices.iter().map(move |&i| (i / cols, i % cols))
    }
}

fn check_shape(op: &'static str, w: &Matrix, support: &IndexSet) -> Result<()> {
    if w.shape() != support.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: w.shape(),
            right: support.shape(),
        });
    }
    Ok(())
}

/// Adds `values[k]` to `w` at flat position `support[k]`, in place.
pub fn scatter_add_in_place(w: &mut Matrix, support: &IndexSet, values: &[f64]) -> Result<()> {
    check_shape("scatter_add", w, support)?;
    if values.len() != support.len() {
        return Err(Error::LengthMismatch {
            what: "scatter_add values",
            expected: support.len(),
            actual: values.len(),
        });
    }
    let data = w.as_mut_slice();
    for (&i, &v) in support.as_slice().iter().zip(values) {
        data[i] += v;
    }
    Ok(())
}

/// Returns `w` with `values` scatter-added at `support`.
pub fn scatter_add(w: &Matrix, support: &IndexSet, values: &[f64]) -> Result<Matrix> {
    let mut out = w.clone();
    scatter_add_in_place(&mut out, support, values)?;
    Ok(out)
}

/// Reads `w` at every position of `support`, in index order.
pub fn gather(w: &Matrix, support: &IndexSet) -> Result<Vec<f64>> {
    check_shape("gather", w, support)?;
    let data = w.as_slice();
    Ok(support.as_slice().iter().map(|&i| data[i]).collect())
}

/// Draws a uniformly random `nnz`-subset of the `rows * cols` flat positions.
///
/// Dense requests use a partial Fisher–Yates shuffle over a sparse swap map,
/// very sparse ones use rejection sampling; both keep memory at O(nnz).
pub fn sample_support(rows: usize, cols: usize, nnz: usize, rng: &mut SeededRng) -> Result<IndexSet> {
    let total = rows * cols;
    if nnz > total {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {nnz} entries from a {rows}x{cols} matrix"
        )));
    }
    if nnz == total {
        return Ok(IndexSet::full(rows, cols));
    }
    let mut picked: Vec<usize> = if nnz * 64 > total {
        let mut swaps: HashMap<usize, usize> = HashMap::with_capacity(2 * nnz);
        let mut out = Vec::with_capacity(nnz);
        for i in 0..nnz {
            let j = rng.range(i as u64, total as u64) as usize;
            let at_j = *swaps.get(&j).unwrap_or(&j);
            let at_i = *swaps.get(&i).unwrap_or(&i);
            swaps.insert(j, at_i);
            out.push(at_j);
        }
        out
    } else {
        let mut seen: HashSet<usize> = HashSet::with_capacity(2 * nnz);
        let mut out = Vec::with_capacity(nnz);
        while out.len() < nnz {
            let j = rng.below(total as u64) as usize;
            if seen.insert(j) {
                out.push(j);
            }
        }
        out
    };
    picked.sort_unstable();
    Ok(IndexSet {
        rows,
        cols,
        indices: picked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scatter_single_entry() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let i = IndexSet::new(2, 2, vec![1]).unwrap();
        let out = scatter_add(&w, &i, &[10.0]).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 12.0, 3.0, 4.0]);
    }

    #[test]
    fn scatter_empty_support_is_identity() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(scatter_add(&w, &IndexSet::empty(2, 2), &[]).unwrap(), w);
    }

    #[test]
    fn scatter_negated_full_support_is_zero() {
        let mut rng = SeededRng::new(5);
        let w = Matrix::from_fn(4, 3, |_, _| rng.uniform(-2.0, 2.0));
        let full = IndexSet::full(4, 3);
        let neg: Vec<f64> = gather(&w, &full).unwrap().iter().map(|v| -v).collect();
        let z = scatter_add(&w, &full, &neg).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_definition() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let i = IndexSet::new(2, 2, vec![0, 3]).unwrap();
        assert_eq!(gather(&w, &i).unwrap(), vec![1.0, 4.0]);
    }

    #[test]
    fn gather_matches_index_loop() {
        let mut rng = SeededRng::new(9);
        let w = Matrix::from_fn(6, 6, |_, _| rng.uniform(-1.0, 1.0));
        let i = sample_support(6, 6, 13, &mut rng).unwrap();
        let mut expect = Vec::new();
        for r in 0..6 {
            for c in 0..6 {
                if i.as_slice().contains(&(r * 6 + c)) {
                    expect.push(w.get(r, c));
                }
            }
        }
        assert_eq!(gather(&w, &i).unwrap(), expect);
    }

    #[test]
    fn errors() {
        let w = Matrix::zeros(2, 2);
        let i = IndexSet::new(2, 2, vec![0, 1]).unwrap();
        assert!(matches!(
            scatter_add(&w, &i, &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            IndexSet::new(2, 2, vec![4]),
            Err(Error::IndexOutOfRange { index: 4, bound: 4 })
        ));
        assert!(IndexSet::new(2, 2, vec![1, 1]).is_err());
        assert!(gather(&Matrix::zeros(3, 2), &i).is_err());
        let mut rng = SeededRng::new(0);
        assert!(sample_support(2, 2, 5, &mut rng).is_err());
    }

    #[test]
    fn support_extremes() {
        let mut rng = SeededRng::new(1);
        assert_eq!(sample_support(3, 4, 12, &mut rng).unwrap(), IndexSet::full(3, 4));
        assert!(sample_support(3, 4, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn support_inclusion_is_uniform() {
        // 64x64 grid, 123 draws per sample, 10^4 samples: each cell's count is
        // Binomial(10^4, q) with q = 123/4096.
        let (rows, cols, nnz, trials) = (64usize, 64usize, 123usize, 10_000usize);
        let mut counts = vec![0u32; rows * cols];
        let mut rng = SeededRng::new(2024);
        for _ in 0..trials {
            for &i in sample_support(rows, cols, nnz, &mut rng).unwrap().as_slice() {
                counts[i] += 1;
            }
        }
        let q = nnz as f64 / (rows * cols) as f64;
        let mean = trials as f64 * q;
        let sigma = (trials as f64 * q * (1.0 - q)).sqrt();
        for &c in &counts {
            assert!((c as f64 - mean).abs() <= 5.0 * sigma, "count {c} vs mean {mean}");
        }
    }

    #[test]
    fn dense_branch_also_uniform() {
        // nnz/total > 1/64 exercises the Fisher–Yates branch.
        let (rows, cols, nnz, trials) = (8usize, 8usize, 20usize, 20_000usize);
        let mut counts = vec![0u32; rows * cols];
        let mut rng = SeededRng::new(77);
        for _ in 0..trials {
            for &i in sample_support(rows, cols, nnz, &mut rng).unwrap().as_slice() {
                counts[i] += 1;
            }
        }
        let q = nnz as f64 / (rows * cols) as f64;
        let mean = trials as f64 * q;
        let sigma = (trials as f64 * q * (1.0 - q)).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - mean).abs() <= 5.0 * sigma));
    }

    #[test]
    fn support_strictly_increasing_over_random_draws() {
        let mut meta = SeededRng::new(31337);
        for _ in 0..1000 {
            let rows = 1 + meta.below(40) as usize;
            let cols = 1 + meta.below(40) as usize;
            let nnz = meta.below((rows * cols) as u64 + 1) as usize;
            let mut rng = SeededRng::new(meta.next_u64());
            let s = sample_support(rows, cols, nnz, &mut rng).unwrap();
            assert_eq!(s.len(), nnz);
            assert!(s.as_slice().windows(2).all(|w| w[0] < w[1]));
            assert!(s.as_slice().iter().all(|&i| i < rows * cols));
        }
    }

    proptest! {
        #[test]
        fn scatter_then_gather_on_zero_returns_values(
            rows in 1usize..12, cols in 1usize..12, seed in any::<u64>(), frac in 0.0f64..1.0
        ) {
            let mut rng = SeededRng::new(seed);
            let nnz = ((rows * cols) as f64 * frac) as usize;
            let i = sample_support(rows, cols, nnz, &mut rng).unwrap();
            let v: Vec<f64> = (0..nnz).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let w = scatter_add(&Matrix::zeros(rows, cols), &i, &v).unwrap();
            prop_assert_eq!(gather(&w, &i).unwrap(), v);
        }
    }
}
