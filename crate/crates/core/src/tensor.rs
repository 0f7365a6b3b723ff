//! Dense tensor numerics and the seeded random generator.
//!
//! Everything downstream (layers, models, training) is expressed over this
//! substrate: flat row-major `f64` storage, explicit shapes, no views and no
//! broadcasting. Slicing copies. Gradients are hand-written per layer, so the
//! only "autodiff" here is [`numeric_gradient`], the finite-difference oracle
//! used by the test suites.

use crate::error::{Error, Result};
use rand_core::{RngCore, SeedableRng};

/// Dense n-dimensional array of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor::new",
                msg: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape.clone())
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// 1-d tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-d tensor from nested rows. Rows must be rectangular.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument {
                op: "tensor::from_rows",
                msg: "ragged rows".into(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row count of a 2-d tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count of a 2-d tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    /// Borrow row `r` of a 2-d tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Standard matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        // i-k-j order keeps the inner loop contiguous over both operands.
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Transpose of a 2-d tensor (copies).
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// Accumulate `other` into `self` in place.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Numerically stable softmax of a 1-d tensor.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() != 1 || self.data.is_empty() {
            return Err(Error::InvalidArgument {
                op: "softmax",
                msg: format!(
                    "expected non-empty rank-1 tensor, got shape {:?}",
                    self.shape
                ),
            });
        }
        let max = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.data.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: exps.into_iter().map(|e| e / sum).collect(),
        })
    }

    /// Concatenate tensors along `axis`. All other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidArgument {
            op: "concat",
            msg: "no tensors given".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidArgument {
                op: "concat",
                msg: format!("axis {} out of range for rank {}", axis, rank),
            });
        }
        for p in parts.iter().skip(1) {
            let compatible = p.rank() == rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();

        // Row-major: iterate over the outer block index, copying each part's
        // contiguous inner chunk in turn.
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(shape, data)
    }

    /// Tensor with each element drawn i.i.d. uniform on `[lo, hi)`.
    pub fn rand_uniform(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Result<Tensor> {
        if lo >= hi {
            return Err(Error::InvalidArgument {
                op: "rand_uniform",
                msg: format!("degenerate range [{lo}, {hi})"),
            });
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::new(shape, data)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Central-difference gradient of a scalar function, the verification oracle
/// for every hand-written backward pass.
///
/// Element i of the result is `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)`.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "numeric_gradient: eps must be positive");
    let mut grad = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Deterministic seeded generator.
///
/// Backed by ChaCha8, a portable stream cipher whose output is fully specified
/// by the seed; identical seed and call sequence reproduce identical values on
/// any platform. Child streams are derived from (seed, stream index) with a
/// SplitMix64 finalizer so parallel consumers get independent, reproducible
/// sequences regardless of scheduling.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: rand_chacha::ChaCha8Rng,
}

/// SplitMix64 finalizer (Steele, Lea & Flood 2014).
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from (parent seed, stream index).
    pub fn child(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in [0, n) via widening multiply (no modulo bias worth
    /// caring about at our n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn matmul_identity() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(id.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        // 1*3 + 2*4 = 11
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_fixed_points() {
        assert_eq!(Tensor::from_vec(vec![0.0]).sigmoid().data()[0], 0.5);
        assert_eq!(Tensor::from_vec(vec![0.0]).tanh().data()[0], 0.0);
        let r = Tensor::from_vec(vec![-1.0, 2.0]).relu();
        assert_eq!(r.data(), &[0.0, 2.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros(vec![2]);
        let b = Tensor::zeros(vec![3]);
        assert!(a.add(&b).is_err());
        assert!(a.sub(&b).is_err());
        assert!(a.hadamard(&b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let s = Tensor::from_vec(vec![0.0, 0.0]).softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = Tensor::from_vec(vec![1000.0, 0.0]).softmax().unwrap();
        assert!(s.is_all_finite());
        assert!(s.data()[0] > 1.0 - 1e-9 && s.data()[1] < 1e-9);
    }

    #[test]
    fn softmax_exp_ratio() {
        // exp(ln 1) : exp(ln 3) = 1 : 3
        let s = Tensor::from_vec(vec![1.0f64.ln(), 3.0f64.ln()])
            .softmax()
            .unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn concat_axis0() {
        let a = Tensor::zeros(vec![100]);
        let out = Tensor::concat(&[&a, &a, &a], 0).unwrap();
        assert_eq!(out.shape(), &[300]);

        let single = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(Tensor::concat(&[&single], 0).unwrap(), single);

        let m = Tensor::zeros(vec![2, 3]);
        let n = Tensor::zeros(vec![4, 3]);
        assert_eq!(Tensor::concat(&[&m, &n], 0).unwrap().shape(), &[6, 3]);
    }

    #[test]
    fn concat_axis1_order_preserved() {
        let a = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let out = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_incompatible() {
        let m = Tensor::zeros(vec![2, 3]);
        let n = Tensor::zeros(vec![4, 2]);
        assert!(Tensor::concat(&[&m, &n], 0).is_err());
    }

    #[test]
    fn rand_uniform_deterministic() {
        let mut r1 = Rng::new(42);
        let mut r2 = Rng::new(42);
        let a = Tensor::rand_uniform(&mut r1, vec![4], -0.25, 0.25).unwrap();
        let b = Tensor::rand_uniform(&mut r2, vec![4], -0.25, 0.25).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-0.25..0.25).contains(v)));
    }

    #[test]
    fn rand_uniform_degenerate_range() {
        let mut rng = Rng::new(1);
        assert!(Tensor::rand_uniform(&mut rng, vec![2], 0.5, 0.5).is_err());
    }

    #[test]
    fn rand_uniform_law_of_large_numbers() {
        let mut rng = Rng::new(7);
        let t = Tensor::rand_uniform(&mut rng, vec![100_000], 0.0, 1.0).unwrap();
        let mean: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn numeric_gradient_quadratic() {
        let f = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = numeric_gradient(f, &x, 1e-4);
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn numeric_gradient_constant() {
        let g = numeric_gradient(|_| 3.5, &Tensor::from_vec(vec![1.0, -2.0]), 1e-4);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn numeric_gradient_product() {
        let f = |t: &Tensor| t.data()[0] * t.data()[1];
        let g = numeric_gradient(f, &Tensor::from_vec(vec![3.0, 5.0]), 1e-4);
        assert!((g.data()[0] - 5.0).abs() < 1e-6);
        assert!((g.data()[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn rng_streams_reproduce_byte_identical() {
        let mut a = Rng::new(99);
        let seq_a: Vec<u64> = (0..32).map(|_| a.next_u64()).collect();
        let mut b = Rng::new(99);
        let seq_b: Vec<u64> = (0..32).map(|_| b.next_u64()).collect();
        assert_eq!(seq_a, seq_b);

        // distinct children diverge from the parent and from each other
        let mut c0 = Rng::new(99).child(0);
        let mut c1 = Rng::new(99).child(1);
        assert_ne!(c0.next_u64(), c1.next_u64());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-1000.0f64..1000.0, 1..64)) {
            let s = Tensor::from_vec(logits).softmax().unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn matmul_associative(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let a = Tensor::rand_uniform(&mut rng, vec![3, 4], -1.0, 1.0).unwrap();
            let b = Tensor::rand_uniform(&mut rng, vec![4, 2], -1.0, 1.0).unwrap();
            let c = Tensor::rand_uniform(&mut rng, vec![2, 5], -1.0, 1.0).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let denom = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() / denom < 1e-9);
            }
        }

        #[test]
        fn concat_shape_algebra(n0 in 1usize..5, n1 in 1usize..5, cols in 1usize..4) {
            let a = Tensor::zeros(vec![n0, cols]);
            let b = Tensor::zeros(vec![n1, cols]);
            let out = Tensor::concat(&[&a, &b], 0).unwrap();
            prop_assert_eq!(out.shape(), &[n0 + n1, cols]);
        }
    }
}
