//! Forward and backward kernels for each layer kind.
//!
//! Convolution is cross-correlation (no kernel flip). Max pooling keeps the
//! first maximum in row-major order, and that element alone receives the
//! backward gradient. ReLU's derivative at exactly zero is taken as zero.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output extent of a sliding window, `None` when it is not integral or
/// would be empty.
pub fn window_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::ShapeMismatch(format!("{what} must be [C,H,W], got {s:?}"))),
    }
}

/// Range of output positions `o` for which `o*stride + k - padding` lands in
/// `[0, len)`.
fn valid_range(k: usize, len: usize, out: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + padding > k {
        ((len - 1 + padding - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

fn conv_geometry(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (c, h, w) = chw(input, "conv input")?;
    let [f, wc, kh, kw] = *weights.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "conv weights must be [F,C,kh,kw], got {:?}",
            weights.shape()
        )));
    };
    if wc != c {
        return Err(Error::ShapeMismatch(format!(
            "conv weights expect {wc} channels, input has {c}"
        )));
    }
    let oh = window_extent(h, kh, stride, padding);
    let ow = window_extent(w, kw, stride, padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::ShapeMismatch(format!(
            "{kh}x{kw} kernel, stride {stride}, padding {padding} does not tile {h}x{w}"
        )));
    };
    Ok(ConvGeom {
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
    })
}

/// Row-major `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`,
/// each given with explicit (row, column) strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2));
    assert!(b.0.len() >= span(k, n, b.1, b.2));
    assert!(c.len() >= m * n);
    // SAFETY: the assertions above keep every strided access in bounds, and
    // `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds the input into a `(C·kh·kw) × (oh·ow)` patch matrix, zero where
/// the window overhangs the padding.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * p];
    for c in 0..g.c {
        let x_c = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.h, g.oh, g.stride, g.padding);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.w, g.ow, g.stride, g.padding);
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let x_row = &x_c[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        row[oy * g.ow + ox] = x_row[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        let x_c = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.h, g.oh, g.stride, g.padding);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.w, g.ow, g.stride, g.padding);
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let x_row = &mut x_c[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        x_row[ox * g.stride + kx - g.padding] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
    x
}

pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input, weights, stride, padding)?;
    if bias.shape() != [g.f] {
        return Err(Error::ShapeMismatch(format!(
            "conv bias must be [{}], got {:?}",
            g.f,
            bias.shape()
        )));
    }
    let (k, p) = (g.c * g.kh * g.kw, g.oh * g.ow);
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0; g.f * p];
    for (row, b) in out.chunks_mut(p.max(1)).zip(bias.data()) {
        row.fill(*b);
    }
    gemm(g.f, k, p, (weights.data(), k, 1), (&cols, p, 1), 1.0, &mut out);
    Ok(Tensor::from_raw(vec![g.f, g.oh, g.ow], out))
}

/// Gradients of a convolution: `(d input, d weights, d bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geometry(input, weights, stride, padding)?;
    if grad_out.shape() != [g.f, g.oh, g.ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv output gradient must be [{}, {}, {}], got {:?}",
            g.f,
            g.oh,
            g.ow,
            grad_out.shape()
        )));
    }
    let (k, p) = (g.c * g.kh * g.kw, g.oh * g.ow);
    let go = grad_out.data();
    let cols = im2col(input.data(), &g);
    let mut gw = vec![0.0; g.f * k];
    gemm(g.f, p, k, (go, p, 1), (&cols, 1, p), 0.0, &mut gw);
    let mut gcols = vec![0.0; k * p];
    gemm(k, g.f, p, (weights.data(), 1, k), (go, p, 1), 0.0, &mut gcols);
    let gb = go.chunks(p.max(1)).map(|r| r.iter().sum()).collect();
    Ok((
        Tensor::from_raw(input.shape().to_vec(), col2im(&gcols, &g)),
        Tensor::from_raw(weights.shape().to_vec(), gw),
        Tensor::from_raw(vec![g.f], gb),
    ))
}

/// Max pooling without padding. Returns the pooled tensor and, per output
/// element, the flat input index of the winning element.
pub fn maxpool2d_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = chw(input, "pool input")?;
    let (Some(oh), Some(ow)) = (
        window_extent(h, window, stride, 0),
        window_extent(w, window, stride, 0),
    ) else {
        return Err(Error::ShapeMismatch(format!(
            "{window}x{window} pool with stride {stride} does not tile {h}x{w}"
        )));
    };
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for wy in 0..window {
                    let row = base + (oy * stride + wy) * w + ox * stride;
                    for idx in row..row + window {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_raw(vec![c, oh, ow], out), arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch(
            "pool gradient does not match the recorded argmax".into(),
        ));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor::from_raw(
        input.shape().to_vec(),
        input.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("relu gradient shape".into()));
    }
    Ok(Tensor::from_raw(
        input.shape().to_vec(),
        input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

/// `weights · flatten(input) + bias`; any input shape is flattened.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [m, n] = *weights.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "dense weights must be [m,n], got {:?}",
            weights.shape()
        )));
    };
    if input.len() != n || bias.shape() != [m] {
        return Err(Error::ShapeMismatch(format!(
            "dense [{m},{n}] with input of {} values and bias {:?}",
            input.len(),
            bias.shape()
        )));
    }
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    Ok(Tensor::vector(out))
}

/// Gradients of a dense layer: `(d input, d weights, d bias)`; the input
/// gradient keeps the input's shape.
pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [m, n] = *weights.shape() else {
        return Err(Error::ShapeMismatch("dense weights must be [m,n]".into()));
    };
    if input.len() != n || grad_out.len() != m {
        return Err(Error::ShapeMismatch("dense gradient shapes".into()));
    }
    let x = input.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; n];
    let mut gw = vec![0.0; m * n];
    for ((row, gw_row), &g) in weights
        .data()
        .chunks_exact(n)
        .zip(gw.chunks_exact_mut(n))
        .zip(go)
    {
        for ((d, w), (gwv, xv)) in gx.iter_mut().zip(row).zip(gw_row.iter_mut().zip(x)) {
            *d += w * g;
            *gwv = g * xv;
        }
    }
    Ok((
        Tensor::from_raw(input.shape().to_vec(), gx),
        Tensor::from_raw(vec![m, n], gw),
        Tensor::vector(go.to_vec()),
    ))
}

/// Inverted-dropout mask: each entry is 0 with probability `drop`, else
/// `1 / (1 - drop)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, drop: f64, rng: &mut R) -> Vec<f64> {
    let keep_scale = 1.0 / (1.0 - drop);
    (0..len)
        .map(|_| if rng.gen::<f64>() < drop { 0.0 } else { keep_scale })
        .collect()
}

/// Inverted dropout. In inference mode (or with `drop == 0`) the input is
/// returned unchanged and no mask is produced.
pub fn dropout_forward<R: Rng + ?Sized>(
    input: &Tensor,
    drop: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&drop) {
        return Err(Error::InvalidConfig(format!(
            "dropout probability {drop} outside [0, 1)"
        )));
    }
    if !training || drop == 0.0 {
        return Ok((input.clone(), None));
    }
    let mask = dropout_mask(input.len(), drop, rng);
    Ok((apply_mask(input, &mask)?, Some(mask)))
}

pub fn apply_mask(input: &Tensor, mask: &[f64]) -> Result<Tensor> {
    if mask.len() != input.len() {
        return Err(Error::ShapeMismatch("dropout mask length".into()));
    }
    Ok(Tensor::from_raw(
        input.shape().to_vec(),
        input.data().iter().zip(mask).map(|(x, m)| x * m).collect(),
    ))
}

pub fn mse_loss(prediction: &Tensor, label: &Tensor) -> Result<f64> {
    if prediction.shape() != label.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs label {:?}",
            prediction.shape(),
            label.shape()
        )));
    }
    let n = prediction.len() as f64;
    Ok(prediction
        .data()
        .iter()
        .zip(label.data())
        .map(|(p, l)| (p - l) * (p - l))
        .sum::<f64>()
        / n)
}

/// Derivative of [`mse_loss`] with respect to the prediction.
pub fn mse_grad(prediction: &Tensor, label: &Tensor) -> Result<Tensor> {
    if prediction.shape() != label.shape() {
        return Err(Error::ShapeMismatch("mse gradient shapes".into()));
    }
    let k = 2.0 / prediction.len() as f64;
    Ok(Tensor::from_raw(
        prediction.shape().to_vec(),
        prediction
            .data()
            .iter()
            .zip(label.data())
            .map(|(p, l)| k * (p - l))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = conv2d_forward(&x, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_weights_gives_bias() {
        let x = t(&[2, 3, 3], &[0.7; 18]);
        let y = conv2d_forward(&x, &Tensor::zeros(&[2, 2, 3, 3]), &t(&[2], &[1.5, -2.0]), 1, 1)
            .unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.data()[..9].iter().all(|&v| v == 1.5));
        assert!(y.data()[9..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv_sums_window() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d_forward(&x, &Tensor::filled(&[1, 1, 2, 2], 1.0), &t(&[1], &[0.0]), 1, 0)
            .unwrap();
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_strided_padded_matches_direct_sum() {
        let (c, h, w, f, k, s, p) = (2, 5, 7, 3, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let (x, wt, b) = (draw(c * h * w), draw(f * c * k * k), draw(f));
        let y = conv2d_forward(&t(&[c, h, w], &x), &t(&[f, c, k, k], &wt), &t(&[f], &b), s, p)
            .unwrap();
        let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        assert_eq!(y.shape(), &[f, oh, ow]);
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((fi * c + ci) * k + ky) * k + kx]
                                    * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    let got = y.data()[(fi * oh + oy) * ow + ox];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
        // (6 + 2 - 3) / 2 is not integral
        let x6 = Tensor::zeros(&[c, h, 6]);
        assert!(conv2d_forward(&x6, &t(&[f, c, k, k], &wt), &t(&[f], &b), s, p).is_err());
    }

    #[test]
    fn pool_examples() {
        let (y, arg) = maxpool2d_forward(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!((y.data(), arg.as_slice()), (&[4.0][..], &[3][..]));
        let (y, _) = maxpool2d_forward(&Tensor::filled(&[2, 4, 4], 0.3), 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
        let (y, arg) = maxpool2d_forward(&Tensor::filled(&[1, 2, 2], 5.0), 2, 2).unwrap();
        assert_eq!((y.data(), arg.as_slice()), (&[5.0][..], &[0][..]));
        let g = maxpool2d_backward(&[1, 2, 2], &arg, &t(&[1, 1, 1], &[2.0])).unwrap();
        assert_eq!(g.data(), &[2.0, 0.0, 0.0, 0.0]);
        assert!(maxpool2d_forward(&Tensor::zeros(&[1, 3, 3]), 2, 2).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = t(&[3], &[-1.0, 2.0, 0.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0, 0.0]);
        let g = relu_backward(&x, &t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn dense_examples() {
        let x = t(&[2], &[1.0, 1.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let b = t(&[2], &[0.5, -0.5]);
        assert_eq!(dense_forward(&x, &Tensor::zeros(&[2, 2]), &b).unwrap(), b);
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(dense_forward(&x, &w, &Tensor::zeros(&[2])).unwrap().data(), &[3.0, 7.0]);
        assert!(dense_forward(&t(&[3], &[0.0; 3]), &w, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let (y, m) = dropout_forward(&x, 0.5, false, &mut rng).unwrap();
        assert_eq!((y, m), (x.clone(), None));
        let (y, _) = dropout_forward(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(dropout_forward(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_rate_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::filled(&[100_000], 1.0);
        let (y, _) = dropout_forward(&x, 0.5, true, &mut rng).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.5).abs() < 0.01, "zero fraction {zeros}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn mse_examples() {
        let p = t(&[2], &[1.0, 1.0]);
        assert_eq!(mse_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(mse_loss(&p, &Tensor::zeros(&[2])).unwrap(), 1.0);
        let a = t(&[3], &[0.3, -1.0, 2.0]);
        let l = t(&[3], &[1.0, 0.5, 0.0]);
        let ap = t(&[3], &[2.0, 0.3, -1.0]);
        let lp = t(&[3], &[0.0, 1.0, 0.5]);
        assert!((mse_loss(&a, &l).unwrap() - mse_loss(&ap, &lp).unwrap()).abs() < 1e-15);
        assert!(mse_loss(&p, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn extents() {
        assert_eq!(window_extent(224, 12, 4, 2), Some(55));
        assert_eq!(window_extent(224, 11, 4, 2), None);
        assert_eq!(window_extent(1, 2, 2, 0), None);
        assert_eq!(window_extent(64, 5, 1, 2), Some(64));
    }
}
