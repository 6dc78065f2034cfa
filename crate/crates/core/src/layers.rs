//! Forward and backward passes for the layer types used by the network:
//! 3×3 valid convolution, 2×2 max-pooling, dense, ReLU, inverted dropout
//! and row-wise softmax.
//!
//! Backward functions take the cache produced by the matching forward call
//! and return gradients; nothing here mutates its inputs.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Op, Prng, Tensor};

/// Spatial kernel extent; convolutions are always 3×3.
pub const KERNEL: usize = 3;
const KK: usize = KERNEL * KERNEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2DParams {
    /// `[out_c, in_c, 3, 3]`
    pub weights: Tensor,
    /// `[out_c]`
    pub bias: Tensor,
}

impl Conv2DParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let (out_c, _, kh, kw) = weights.dims4()?;
        if kh != KERNEL || kw != KERNEL {
            return Err(Error::Shape(format!("conv kernel must be 3x3, got {:?}", weights.shape())));
        }
        if bias.shape() != [out_c] {
            return Err(Error::Shape(format!("conv bias {:?} does not match {out_c} filters", bias.shape())));
        }
        Ok(Self { weights, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `[in, out]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let (_, out) = weights.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::Shape(format!("dense bias {:?} does not match {out} outputs", bias.shape())));
        }
        Ok(Self { weights, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    input: Tensor,
}

impl ConvCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: [usize; 4],
    /// Flat input index of each output's window maximum.
    argmax: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Tensor,
}

#[derive(Clone, Debug)]
pub struct ReluCache {
    shape: Vec<usize>,
    active: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct DropoutCache {
    shape: Vec<usize>,
    /// Per-element multiplier (0 or 1/(1-rate)); `None` means identity.
    scale: Option<Vec<f64>>,
}

/// Gradients of a parameterised layer.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

fn conv_out_dims(h: usize, w: usize) -> Result<(usize, usize)> {
    if h < KERNEL || w < KERNEL {
        return Err(Error::Shape(format!("input {h}x{w} is smaller than the {KERNEL}x{KERNEL} kernel")));
    }
    Ok((h - KERNEL + 1, w - KERNEL + 1))
}

/// Unfold one sample `[c, h, w]` into `[c·9, ho·wo]` patch columns.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let (ho, wo) = (h - KERNEL + 1, w - KERNEL + 1);
    let p = ho * wo;
    for ch in 0..c {
        for u in 0..KERNEL {
            for v in 0..KERNEL {
                let row = (ch * KK + u * KERNEL + v) * p;
                for i in 0..ho {
                    let src = ch * h * w + (i + u) * w + v;
                    cols[row + i * wo..row + (i + 1) * wo].copy_from_slice(&x[src..src + wo]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[c, h, w]`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (ho, wo) = (h - KERNEL + 1, w - KERNEL + 1);
    let p = ho * wo;
    for ch in 0..c {
        for u in 0..KERNEL {
            for v in 0..KERNEL {
                let row = (ch * KK + u * KERNEL + v) * p;
                for i in 0..ho {
                    let dst = ch * h * w + (i + u) * w + v;
                    let src = &cols[row + i * wo..row + (i + 1) * wo];
                    for (d, s) in dx[dst..dst + wo].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Valid 3×3 convolution, stride 1:
/// `y[b,o,i,j] = bias[o] + Σ_{c,u,v} x[b,c,i+u,j+v] · w[o,c,u,v]`.
///
/// Lowered to one GEMM per sample over im2col patches.
pub fn conv2d_forward(x: &Tensor, p: &Conv2DParams) -> Result<(Tensor, ConvCache)> {
    let (b, c, h, w) = x.dims4()?;
    if c != p.in_channels() {
        return Err(Error::Shape(format!("conv input has {c} channels, kernel expects {}", p.in_channels())));
    }
    let (ho, wo) = conv_out_dims(h, w)?;
    let oc = p.out_channels();
    let (k, pix) = (c * KK, ho * wo);
    let mut cols = vec![0.0; k * pix];
    let mut y = vec![0.0; b * oc * pix];
    let in_stride = c * h * w;
    for (s, ys) in y.chunks_mut(oc * pix).enumerate() {
        im2col(&x.data()[s * in_stride..(s + 1) * in_stride], c, h, w, &mut cols);
        for (o, row) in ys.chunks_mut(pix).enumerate() {
            row.fill(p.bias.data()[o]);
        }
        gemm(Op::N, Op::N, oc, pix, k, 1.0, p.weights.data(), &cols, 1.0, ys);
    }
    Ok((Tensor::new(&[b, oc, ho, wo], y)?, ConvCache { input: x.clone() }))
}

/// Exact gradients of [`conv2d_forward`]. Weight and bias gradients are
/// accumulated over the batch in ascending sample order.
pub fn conv2d_backward(dy: &Tensor, cache: &ConvCache, p: &Conv2DParams) -> Result<ParamGrads> {
    let (b, c, h, w) = cache.input.dims4()?;
    let (ho, wo) = conv_out_dims(h, w)?;
    let oc = p.out_channels();
    if dy.shape() != [b, oc, ho, wo] {
        return Err(Error::Shape(format!(
            "conv output gradient {:?} does not match forward output {:?}",
            dy.shape(),
            [b, oc, ho, wo]
        )));
    }
    if c != p.in_channels() {
        return Err(Error::Shape("conv cache does not match parameters".into()));
    }
    let (k, pix) = (c * KK, ho * wo);
    let in_stride = c * h * w;
    let mut cols = vec![0.0; k * pix];
    let mut dcols = vec![0.0; k * pix];
    let mut dx = vec![0.0; b * in_stride];
    let mut dw = vec![0.0; oc * k];
    let mut db = vec![0.0; oc];
    for s in 0..b {
        let dys = &dy.data()[s * oc * pix..(s + 1) * oc * pix];
        for (o, row) in dys.chunks(pix).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        im2col(&cache.input.data()[s * in_stride..(s + 1) * in_stride], c, h, w, &mut cols);
        let beta = if s == 0 { 0.0 } else { 1.0 };
        gemm(Op::N, Op::T, oc, k, pix, 1.0, dys, &cols, beta, &mut dw);
        gemm(Op::T, Op::N, k, pix, oc, 1.0, p.weights.data(), dys, 0.0, &mut dcols);
        col2im(&dcols, c, h, w, &mut dx[s * in_stride..(s + 1) * in_stride]);
    }
    Ok(ParamGrads {
        dx: Tensor::new(cache.input.shape(), dx)?,
        dw: Tensor::new(p.weights.shape(), dw)?,
        db: Tensor::new(&[oc], db)?,
    })
}

/// 2×2 max-pooling with stride 2. A trailing odd row or column is dropped;
/// ties resolve to the first maximum in row-major window order.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, PoolCache)> {
    let (b, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("max-pool needs at least 2x2 input, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut y = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                y.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[b, c, ho, wo], y)?, PoolCache { input_shape: [b, c, h, w], argmax }))
}

pub fn maxpool2_backward(dy: &Tensor, cache: &PoolCache) -> Result<Tensor> {
    let [b, c, h, w] = cache.input_shape;
    let expected = [b, c, h / 2, w / 2];
    if dy.shape() != expected {
        return Err(Error::Shape(format!(
            "pool output gradient {:?} does not match forward output {expected:?}",
            dy.shape()
        )));
    }
    let mut dx = vec![0.0; b * c * h * w];
    for (&g, &idx) in dy.data().iter().zip(&cache.argmax) {
        dx[idx] += g;
    }
    Tensor::new(&cache.input_shape, dx)
}

/// `y = x · W + bias` with `x` of shape `[batch, in]`.
pub fn dense_forward(x: &Tensor, p: &DenseParams) -> Result<(Tensor, DenseCache)> {
    let (b, inf) = x.dims2()?;
    if inf != p.in_features() {
        return Err(Error::Shape(format!(
            "dense input {:?} does not match weights {:?}",
            x.shape(),
            p.weights.shape()
        )));
    }
    let out = p.out_features();
    let mut y = Vec::with_capacity(b * out);
    for _ in 0..b {
        y.extend_from_slice(p.bias.data());
    }
    gemm(Op::N, Op::N, b, out, inf, 1.0, x.data(), p.weights.data(), 1.0, &mut y);
    Ok((Tensor::new(&[b, out], y)?, DenseCache { input: x.clone() }))
}

/// `dX = dY · Wᵀ`, `dW = xᵀ · dY`, `db` = column sums of `dY`.
pub fn dense_backward(dy: &Tensor, cache: &DenseCache, p: &DenseParams) -> Result<ParamGrads> {
    let (b, inf) = cache.input.dims2()?;
    let out = p.out_features();
    if dy.shape() != [b, out] || inf != p.in_features() {
        return Err(Error::Shape(format!(
            "dense output gradient {:?} does not match forward output {:?}",
            dy.shape(),
            [b, out]
        )));
    }
    let mut dx = vec![0.0; b * inf];
    gemm(Op::N, Op::T, b, inf, out, 1.0, dy.data(), p.weights.data(), 0.0, &mut dx);
    let mut dw = vec![0.0; inf * out];
    gemm(Op::T, Op::N, inf, out, b, 1.0, cache.input.data(), dy.data(), 0.0, &mut dw);
    let mut db = vec![0.0; out];
    for row in dy.data().chunks(out) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(ParamGrads {
        dx: Tensor::new(&[b, inf], dx)?,
        dw: Tensor::new(p.weights.shape(), dw)?,
        db: Tensor::new(&[out], db)?,
    })
}

pub fn relu(x: &Tensor) -> (Tensor, ReluCache) {
    let active: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
    (y, ReluCache { shape: x.shape().to_vec(), active })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(dy: &Tensor, cache: &ReluCache) -> Result<Tensor> {
    if dy.shape() != cache.shape.as_slice() {
        return Err(Error::Shape(format!(
            "relu gradient {:?} does not match forward input {:?}",
            dy.shape(),
            cache.shape
        )));
    }
    let dx = dy.data().iter().zip(&cache.active).map(|(&g, &on)| if on { g } else { 0.0 }).collect();
    Tensor::new(&cache.shape, dx)
}

/// Inverted dropout: in training each element survives with probability
/// `1 - rate` and is scaled by `1 / (1 - rate)`; evaluation is the identity.
pub fn dropout_forward(x: &Tensor, rate: f64, mode: Mode, rng: &mut Prng) -> Result<(Tensor, DropoutCache)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let shape = x.shape().to_vec();
    if mode == Mode::Eval {
        return Ok((x.clone(), DropoutCache { shape, scale: None }));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..x.len()).map(|_| if rng.next_f64() >= rate { keep } else { 0.0 }).collect();
    let y = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
    Ok((Tensor::new(&shape, y)?, DropoutCache { shape, scale: Some(scale) }))
}

pub fn dropout_backward(dy: &Tensor, cache: &DropoutCache) -> Result<Tensor> {
    if dy.shape() != cache.shape.as_slice() {
        return Err(Error::Shape(format!(
            "dropout gradient {:?} does not match forward input {:?}",
            dy.shape(),
            cache.shape
        )));
    }
    match &cache.scale {
        None => Ok(dy.clone()),
        Some(scale) => Tensor::new(&cache.shape, dy.data().iter().zip(scale).map(|(g, s)| g * s).collect()),
    }
}

/// Row-wise softmax over `[batch, classes]` with max subtraction.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    let (_, k) = z.dims2()?;
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    Tensor::new(z.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rng: &mut Prng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    fn conv_oracle(x: &Tensor, p: &Conv2DParams) -> Vec<f64> {
        let (b, c, h, w) = x.dims4().unwrap();
        let oc = p.out_channels();
        let (ho, wo) = (h - 2, w - 2);
        let xw = |bb, cc, i, j| x.data()[((bb * c + cc) * h + i) * w + j];
        let ww = |o, cc, u, v| p.weights.data()[((o * c + cc) * 3 + u) * 3 + v];
        let mut out = Vec::new();
        for bb in 0..b {
            for o in 0..oc {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = p.bias.data()[o];
                        for cc in 0..c {
                            for u in 0..3 {
                                for v in 0..3 {
                                    s += xw(bb, cc, i + u, j + v) * ww(o, cc, u, v);
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    /// Central-difference check of `Σ y ⊙ r` for a fixed random projection `r`.
    fn fd_check(input: &Tensor, analytic: &Tensor, mut loss: impl FnMut(&Tensor) -> f64, h: f64, tol: f64) {
        for idx in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < tol, "index {idx}: analytic {a} numeric {numeric} rel {rel}");
        }
    }

    fn project(y: &Tensor, r: &Tensor) -> f64 {
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_sum_kernel() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let p = Conv2DParams::new(Tensor::filled(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1])).unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), [9.0]);
    }

    #[test]
    fn conv_delta_kernel_crops_interior() {
        let mut rng = Prng::new(1);
        let x = rand_tensor(&mut rng, &[1, 1, 5, 6]);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let p = Conv2DParams::new(w, Tensor::zeros(&[1])).unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(y.data()[i * 4 + j], x.data()[(i + 1) * 6 + j + 1]);
            }
        }
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = Prng::new(2);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let p = Conv2DParams::new(rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])).unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(conv_oracle(&x, &p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_small_input_and_bad_grad() {
        let p = Conv2DParams::new(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1])).unwrap();
        assert!(matches!(conv2d_forward(&Tensor::zeros(&[1, 1, 2, 5]), &p), Err(Error::Shape(_))));
        let (_, cache) = conv2d_forward(&Tensor::zeros(&[1, 1, 4, 4]), &p).unwrap();
        assert!(matches!(conv2d_backward(&Tensor::zeros(&[1, 1, 3, 3]), &cache, &p), Err(Error::Shape(_))));
        assert!(Conv2DParams::new(Tensor::zeros(&[1, 1, 5, 5]), Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn conv_backward_zero_and_single_pixel() {
        let mut rng = Prng::new(3);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let p = Conv2DParams::new(rand_tensor(&mut rng, &[2, 2, 3, 3]), rand_tensor(&mut rng, &[2])).unwrap();
        let (y, cache) = conv2d_forward(&x, &p).unwrap();
        let g = conv2d_backward(&Tensor::zeros(y.shape()), &cache, &p).unwrap();
        assert!(g.dx.data().iter().chain(g.dw.data()).chain(g.db.data()).all(|&v| v == 0.0));

        // dY = 1 at output (o=1, i=1, j=2): dW[1] is the input patch under it.
        let mut dy = Tensor::zeros(y.shape());
        dy.data_mut()[9 + 3 + 2] = 1.0;
        let g = conv2d_backward(&dy, &cache, &p).unwrap();
        for c in 0..2 {
            for u in 0..3 {
                for v in 0..3 {
                    let patch = x.data()[(c * 5 + 1 + u) * 5 + 2 + v];
                    assert_eq!(g.dw.data()[18 + c * 9 + u * 3 + v], patch);
                    assert_eq!(g.dw.data()[(c * 9 + u * 3) + v], 0.0);
                }
            }
        }
        assert_eq!(g.db.data(), [0.0, 1.0]);
    }

    #[test]
    fn conv_backward_finite_differences() {
        let mut rng = Prng::new(4);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 4]);
        let p = Conv2DParams::new(rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])).unwrap();
        let (y, cache) = conv2d_forward(&x, &p).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let g = conv2d_backward(&r, &cache, &p).unwrap();
        assert_eq!(cache.input(), &x);

        fd_check(&x, &g.dx, |xx| project(&conv2d_forward(xx, &p).unwrap().0, &r), 1e-6, 1e-6);
        fd_check(
            &p.weights,
            &g.dw,
            |w| {
                let q = Conv2DParams::new(w.clone(), p.bias.clone()).unwrap();
                project(&conv2d_forward(&x, &q).unwrap().0, &r)
            },
            1e-6,
            1e-6,
        );
        fd_check(
            &p.bias,
            &g.db,
            |bias| {
                let q = Conv2DParams::new(p.weights.clone(), bias.clone()).unwrap();
                project(&conv2d_forward(&x, &q).unwrap().0, &r)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), [4.0]);
        let dx = maxpool2_backward(&Tensor::filled(&[1, 1, 1, 1], 1.0), &cache).unwrap();
        assert_eq!(dx.data(), [0.0, 0.0, 0.0, 1.0]);

        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64);
        assert_eq!(maxpool2_forward(&x).unwrap().0.data(), [6.0, 8.0, 14.0, 16.0]);

        let x = Tensor::zeros(&[1, 1, 5, 5]);
        assert_eq!(maxpool2_forward(&x).unwrap().0.shape(), [1, 1, 2, 2]);

        assert!(matches!(maxpool2_forward(&Tensor::zeros(&[1, 1, 1, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_tie_goes_to_top_left() {
        let x = Tensor::filled(&[1, 1, 2, 2], 7.0);
        let (_, cache) = maxpool2_forward(&x).unwrap();
        let dx = maxpool2_backward(&Tensor::filled(&[1, 1, 1, 1], 1.0), &cache).unwrap();
        assert_eq!(dx.data(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_finite_differences() {
        let mut rng = Prng::new(6);
        // Distinct values spaced well beyond the step keep windows tie-free.
        let mut vals: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| i as f64 * 0.01).collect();
        let perm = crate::tensor::shuffle_indices(&mut rng, vals.len());
        vals = perm.iter().map(|&i| vals[i]).collect();
        let x = Tensor::new(&[2, 3, 5, 4], vals).unwrap();
        let (y, cache) = maxpool2_forward(&x).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let dx = maxpool2_backward(&r, &cache).unwrap();
        assert!((dx.sum() - r.sum()).abs() < 1e-12);
        fd_check(&x, &dx, |xx| project(&maxpool2_forward(xx).unwrap().0, &r), 1e-6, 1e-6);
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let p = DenseParams::new(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), Tensor::zeros(&[2])).unwrap();
        assert_eq!(dense_forward(&x, &p).unwrap().0.data(), [1.0, 0.0]);

        let p = DenseParams::new(Tensor::filled(&[3, 2], 0.5), Tensor::new(&[2], vec![0.25, -1.0]).unwrap()).unwrap();
        let (y, _) = dense_forward(&Tensor::zeros(&[2, 3]), &p).unwrap();
        assert_eq!(y.data(), [0.25, -1.0, 0.25, -1.0]);

        assert!(matches!(dense_forward(&Tensor::zeros(&[2, 4]), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_backward_rank_one_and_zero() {
        let x = Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let p = DenseParams::new(Tensor::filled(&[3, 1], 0.3), Tensor::zeros(&[1])).unwrap();
        let (_, cache) = dense_forward(&x, &p).unwrap();
        let g = dense_backward(&Tensor::filled(&[1, 1], 2.0), &cache, &p).unwrap();
        assert_eq!(g.dw.data(), [2.0, -4.0, 1.0]);
        assert_eq!(g.db.data(), [2.0]);

        let g = dense_backward(&Tensor::zeros(&[1, 1]), &cache, &p).unwrap();
        assert!(g.dx.data().iter().chain(g.dw.data()).chain(g.db.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn dense_backward_finite_differences() {
        let mut rng = Prng::new(7);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let p = DenseParams::new(rand_tensor(&mut rng, &[6, 3]), rand_tensor(&mut rng, &[3])).unwrap();
        let (y, cache) = dense_forward(&x, &p).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let g = dense_backward(&r, &cache, &p).unwrap();
        fd_check(&x, &g.dx, |xx| project(&dense_forward(xx, &p).unwrap().0, &r), 1e-6, 1e-7);
        fd_check(
            &p.weights,
            &g.dw,
            |w| {
                let q = DenseParams::new(w.clone(), p.bias.clone()).unwrap();
                project(&dense_forward(&x, &q).unwrap().0, &r)
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, cache) = relu(&x);
        assert_eq!(y.data(), [0.0, 0.0, 2.0]);
        let dx = relu_backward(&Tensor::filled(&[3], 1.0), &cache).unwrap();
        assert_eq!(dx.data(), [0.0, 0.0, 1.0]);

        let neg = Tensor::filled(&[4], -3.0);
        let (y, cache) = relu(&neg);
        assert_eq!(y, Tensor::zeros(&[4]));
        assert_eq!(relu_backward(&Tensor::filled(&[4], 5.0), &cache).unwrap(), Tensor::zeros(&[4]));
    }

    #[test]
    fn relu_finite_differences_away_from_zero() {
        let mut rng = Prng::new(8);
        let x = Tensor::from_fn(&[20], |_| {
            let v = rng.uniform(0.1, 1.0);
            if rng.next_f64() < 0.5 {
                -v
            } else {
                v
            }
        });
        let r = rand_tensor(&mut rng, &[20]);
        let (_, cache) = relu(&x);
        let dx = relu_backward(&r, &cache).unwrap();
        fd_check(&x, &dx, |xx| project(&relu(xx).0, &r), 1e-6, 1e-7);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = Prng::new(9);
        let x = rand_tensor(&mut rng, &[3, 5]);
        assert_eq!(dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout_forward(&x, 0.5, Mode::Eval, &mut rng).unwrap().0, x);
        assert!(matches!(dropout_forward(&x, 1.0, Mode::Train, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_inverted_scaling_keeps_mean() {
        let mut rng = Prng::new(10);
        let x = Tensor::filled(&[100_000], 1.0);
        let (y, cache) = dropout_forward(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        let dx = dropout_backward(&Tensor::filled(&[100_000], 1.0), &cache).unwrap();
        assert_eq!(dx, y);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p.data(), [0.5, 0.5]);

        let p = softmax(&Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(p.is_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-15);

        let mut rng = Prng::new(12);
        let z = rand_tensor(&mut rng, &[4, 3]);
        let shifted = z.map(|v| v + 37.5);
        let (a, b) = (softmax(&z).unwrap(), softmax(&shifted).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in a.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
