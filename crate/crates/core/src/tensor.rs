//! Dense row-major tensors, the seeded generator, and the linear-algebra
//! primitives the layers are built on.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};

const MAX_RANK: usize = 4;

/// Dense row-major array of `f64` with an explicit shape of one to four
/// positive extents.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Shape(format!("rank must be 1..={MAX_RANK}, got shape {shape:?}")));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(Error::Shape(format!("shape {shape:?} needs {len} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// # Panics
    /// Panics on an invalid shape; use [`Tensor::new`] for fallible construction.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = check_shape(shape).expect("invalid tensor shape");
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len = check_shape(shape).expect("invalid tensor shape");
        Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
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

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data })
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::Shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Seeded xoshiro256** generator. The 256-bit state is expanded from a
/// 64-bit seed with splitmix64.
#[derive(Clone, Debug)]
pub struct Prng {
    inner: Xoshiro256StarStar,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256StarStar::seed_from_u64(seed) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` without modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// `c = a · b` for rank-2 tensors. Every output element is accumulated
/// in ascending inner index starting from zero, so the result is
/// bit-identical to the textbook triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner extents differ: {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a.data[i * k + t];
            let brow = &b.data[t * n..(t + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], c)
}

/// Glorot/Xavier uniform initialisation on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform_init(rng: &mut Prng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Parameter(format!(
            "glorot init needs positive fans, got fan_in={fan_in} fan_out={fan_out}"
        )));
    }
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = check_shape(shape)?;
    let data = (0..len).map(|_| rng.uniform(-limit, limit)).collect();
    Tensor::new(shape, data)
}

/// Fisher-Yates permutation of `0..n`.
pub fn shuffle_indices(rng: &mut Prng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        idx.swap(i, j);
    }
    idx
}

static NUM_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Worker threads used by the blocked GEMM. Results do not depend on this
/// value: each output element is computed by exactly one thread with the
/// same kernel.
pub fn set_num_threads(n: usize) {
    NUM_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn num_threads() -> usize {
    NUM_THREADS.load(Ordering::Relaxed)
}

/// Row-major operand description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) enum Op {
    N,
    T,
}

const PAR_MIN_WORK: usize = 1 << 18;

/// `c = alpha · op(a) · op(b) + beta · c` where `op(a)` is `m × k`,
/// `op(b)` is `k × n` and `c` is row-major `m × n`. With `Op::T` the
/// operand is stored transposed (row-major `k × m` / `n × k`).
///
/// This is the fast path behind convolution and dense layers; it uses the
/// cache-blocked `matrixmultiply` kernels rather than [`matmul`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    op_a: Op,
    op_b: Op,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };

    let threads = num_threads().min(m);
    if threads <= 1 || m * n * k < PAR_MIN_WORK {
        // SAFETY: strides describe in-bounds views of the checked slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    // Partition output rows; each chunk runs the identical kernel.
    let rows_per = m.div_ceil(threads);
    let a_addr = a.as_ptr() as usize;
    let b_addr = b.as_ptr() as usize;
    std::thread::scope(|scope| {
        for (chunk_idx, c_chunk) in c.chunks_mut(rows_per * n).enumerate() {
            let r0 = chunk_idx * rows_per;
            let rows = c_chunk.len() / n;
            scope.spawn(move || {
                let a_ptr = (a_addr as *const f64).wrapping_offset(r0 as isize * rsa);
                // SAFETY: the row offset stays within `a`; the chunk of `c`
                // is exclusively owned by this thread.
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        k,
                        n,
                        alpha,
                        a_ptr,
                        rsa,
                        csa,
                        b_addr as *const f64,
                        rsb,
                        csb,
                        beta,
                        c_chunk.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rng: &mut Prng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let id = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);
        assert_eq!(matmul(&m, &id).unwrap(), m);

        let mut rng = Prng::new(1);
        let z = Tensor::zeros(&[2, 3]);
        let any = random(&mut rng, &[3, 4]);
        assert_eq!(matmul(&z, &any).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = Prng::new(99);
        for _ in 0..20 {
            let a = random(&mut rng, &[3, 3]);
            let b = random(&mut rng, &[3, 3]);
            assert_eq!(matmul(&a, &b).unwrap().data(), &naive(&a, &b)[..]);
        }
        let a = random(&mut rng, &[7, 11]);
        let b = random(&mut rng, &[11, 5]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &naive(&a, &b)[..]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_does_not_mutate_inputs() {
        let mut rng = Prng::new(5);
        let a = random(&mut rng, &[4, 4]);
        let b = random(&mut rng, &[4, 4]);
        let (a0, b0) = (a.clone(), b.clone());
        let _ = matmul(&a, &b).unwrap();
        assert_eq!(a, a0);
        assert_eq!(b, b0);
    }

    #[test]
    fn gemm_agrees_with_matmul() {
        let mut rng = Prng::new(3);
        let a = random(&mut rng, &[13, 17]);
        let b = random(&mut rng, &[17, 9]);
        let reference = matmul(&a, &b).unwrap();
        let mut c = vec![0.0; 13 * 9];
        gemm(Op::N, Op::N, 13, 9, 17, 1.0, a.data(), b.data(), 0.0, &mut c);
        for (x, y) in c.iter().zip(reference.data()) {
            assert!((x - y).abs() < 1e-13);
        }

        // transposed operands
        let at = Tensor::from_fn(&[17, 13], |i| a.data()[(i % 13) * 17 + i / 13]);
        let bt = Tensor::from_fn(&[9, 17], |i| b.data()[(i % 17) * 9 + i / 17]);
        let mut c2 = vec![0.0; 13 * 9];
        gemm(Op::T, Op::T, 13, 9, 17, 1.0, at.data(), bt.data(), 0.0, &mut c2);
        for (x, y) in c2.iter().zip(reference.data()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn threaded_gemm_is_bitwise_serial() {
        let mut rng = Prng::new(11);
        let (m, k, n) = (70, 300, 150);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let mut serial = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        gemm(Op::N, Op::N, m, n, k, 1.0, a.data(), b.data(), 0.0, &mut serial);
        set_num_threads(4);
        gemm(Op::N, Op::N, m, n, k, 1.0, a.data(), b.data(), 0.0, &mut par);
        set_num_threads(1);
        assert_eq!(serial, par);
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut r1 = Prng::new(8);
        let t = glorot_uniform_init(&mut r1, 3, 3, &[100]).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));

        let a = glorot_uniform_init(&mut Prng::new(4), 5, 7, &[5, 7]).unwrap();
        let b = glorot_uniform_init(&mut Prng::new(4), 5, 7, &[5, 7]).unwrap();
        assert_eq!(a, b);

        assert!(matches!(glorot_uniform_init(&mut Prng::new(0), 0, 3, &[3]), Err(Error::Parameter(_))));
    }

    #[test]
    fn glorot_statistics() {
        let mut rng = Prng::new(2024);
        let t = glorot_uniform_init(&mut rng, 50, 50, &[100_000]).unwrap();
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!(t.max_abs() <= (6.0f64 / 100.0).sqrt());
    }

    #[test]
    fn shuffle_small_cases() {
        let mut rng = Prng::new(0);
        assert!(shuffle_indices(&mut rng, 0).is_empty());
        assert_eq!(shuffle_indices(&mut rng, 1), vec![0]);
        let mut p = shuffle_indices(&mut Prng::new(42), 10);
        p.sort_unstable();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }

    /// Reference splitmix64 + xoshiro256** written out longhand.
    fn reference_stream(seed: u64, n: usize) -> Vec<u64> {
        let mut sm = seed;
        let mut split = || {
            sm = sm.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        let mut s = [split(), split(), split(), split()];
        (0..n)
            .map(|_| {
                let out = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
                let t = s[1] << 17;
                s[2] ^= s[0];
                s[3] ^= s[1];
                s[1] ^= s[2];
                s[0] ^= s[3];
                s[2] ^= t;
                s[3] = s[3].rotate_left(45);
                out
            })
            .collect()
    }

    #[test]
    fn prng_matches_reference_algorithm() {
        for seed in [0, 1, 42, u64::MAX] {
            let mut rng = Prng::new(seed);
            let got: Vec<u64> = (0..32).map(|_| rng.next_u64()).collect();
            assert_eq!(got, reference_stream(seed, 32), "seed {seed}");
        }
    }

    #[test]
    fn prng_seed_42_golden() {
        let mut rng = Prng::new(42);
        let got: Vec<u64> = (0..8).map(|_| rng.next_u64()).collect();
        assert_eq!(got, GOLDEN_SEED_42);
    }

    const GOLDEN_SEED_42: [u64; 8] = [
        1546998764402558742,
        6990951692964543102,
        12544586762248559009,
        17057574109182124193,
        18295552978065317476,
        14199186830065750584,
        13267978908934200754,
        15679888225317814407,
    ];
}
