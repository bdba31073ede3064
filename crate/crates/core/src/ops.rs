//! Forward and adjoint kernels for the fixed primitive set.
//!
//! Every reduction runs in a fixed index order so that results are
//! bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::tensor::{expect_ndim, Scalar, Tensor};

fn dims4<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// Unfold one `[cin, h, w]` image into `[cin * 9, h * w]` patch columns for a
/// 3x3 kernel with zero padding 1.
fn im2col<T: Scalar>(img: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image.
fn col2im<T: Scalar>(cols: &[T], cin: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    // column x reads pixel x + kx - 1
                    let (d, s) = match kx {
                        0 => (&mut dst[..w - 1], &src[1..]),
                        1 => (&mut dst[..], src),
                        _ => (&mut dst[1..], &src[..w - 1]),
                    };
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
}

fn check_conv<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    expect_ndim("conv2d", "input", input, 4)?;
    expect_ndim("conv2d", "weight", weight, 4)?;
    let ws = weight.shape();
    if ws[2] != 3 || ws[3] != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("only 3x3 kernels are supported, weight shape {ws:?}"),
        ));
    }
    if input.shape()[2] == 0 || input.shape()[3] == 0 {
        return Err(Error::shape("conv2d", format!("empty spatial extent {:?}", input.shape())));
    }
    if ws[1] != input.shape()[1] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight expects {} input channels, input {:?} has {}",
                ws[1],
                input.shape(),
                input.shape()[1]
            ),
        ));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {} output channels", bias.shape(), ws[0]),
        ));
    }
    Ok(())
}

/// 3x3 cross-correlation, stride 1, zero padding 1, plus per-channel bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    check_conv(input, weight, bias)?;
    let (b, cin, h, w) = dims4(input);
    let cout = weight.shape()[0];
    let hw = h * w;
    let kdim = cin * 9;
    let mut out = Tensor::zeros([b, cout, h, w]);
    let mut cols = vec![T::zero(); kdim * hw];
    for n in 0..b {
        im2col(input.item(n), cin, h, w, &mut cols);
        let dst = &mut out.data_mut()[n * cout * hw..(n + 1) * cout * hw];
        for (o, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias.data()[o]);
        }
        T::gemm(
            cout,
            kdim,
            hw,
            T::one(),
            weight.data(),
            (kdim as isize, 1),
            &cols,
            (hw as isize, 1),
            T::one(),
            dst,
            (hw as isize, 1),
        );
    }
    Ok(out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> ConvGrads<T> {
    let (b, cin, h, w) = dims4(input);
    let cout = weight.shape()[0];
    let hw = h * w;
    let kdim = cin * 9;
    let mut d_input = Tensor::zeros(input.shape().to_vec());
    let mut d_weight = Tensor::zeros(weight.shape().to_vec());
    let mut d_bias = Tensor::zeros([cout]);
    let mut cols = vec![T::zero(); kdim * hw];
    let mut d_cols = vec![T::zero(); kdim * hw];
    for n in 0..b {
        let g = grad_out.item(n);
        for (o, plane) in g.chunks(hw).enumerate() {
            let s = plane.iter().fold(T::zero(), |acc, &v| acc + v);
            d_bias.data_mut()[o] = d_bias.data()[o] + s;
        }
        im2col(input.item(n), cin, h, w, &mut cols);
        // dW += dY [cout, hw] * cols^T [hw, kdim]
        T::gemm(
            cout,
            hw,
            kdim,
            T::one(),
            g,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            T::one(),
            d_weight.data_mut(),
            (kdim as isize, 1),
        );
        // dcols = W^T [kdim, cout] * dY [cout, hw]
        T::gemm(
            kdim,
            cout,
            hw,
            T::one(),
            weight.data(),
            (1, kdim as isize),
            g,
            (hw as isize, 1),
            T::zero(),
            &mut d_cols,
            (hw as isize, 1),
        );
        let stride = cin * hw;
        col2im(&d_cols, cin, h, w, &mut d_input.data_mut()[n * stride..(n + 1) * stride]);
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// Affine map `input * weight^T + bias` over a batch of row vectors.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim("linear", "input", input, 2)?;
    expect_ndim("linear", "weight", weight, 2)?;
    let (b, din) = (input.shape()[0], input.shape()[1]);
    let (dout, wdin) = (weight.shape()[0], weight.shape()[1]);
    if din != wdin {
        return Err(Error::shape(
            "linear",
            format!("input width {din} does not match weight {:?}", weight.shape()),
        ));
    }
    if bias.shape() != [dout] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?} does not match output width {dout}", bias.shape()),
        ));
    }
    let mut out = Tensor::zeros([b, dout]);
    for row in out.data_mut().chunks_mut(dout) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        b,
        din,
        dout,
        T::one(),
        input.data(),
        (din as isize, 1),
        weight.data(),
        (1, din as isize),
        T::one(),
        out.data_mut(),
        (dout as isize, 1),
    );
    Ok(out)
}

pub struct LinearGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> LinearGrads<T> {
    let (b, din) = (input.shape()[0], input.shape()[1]);
    let dout = weight.shape()[0];
    let mut d_input = Tensor::zeros([b, din]);
    T::gemm(
        b,
        dout,
        din,
        T::one(),
        grad_out.data(),
        (dout as isize, 1),
        weight.data(),
        (din as isize, 1),
        T::zero(),
        d_input.data_mut(),
        (din as isize, 1),
    );
    let mut d_weight = Tensor::zeros([dout, din]);
    T::gemm(
        dout,
        b,
        din,
        T::one(),
        grad_out.data(),
        (1, dout as isize),
        input.data(),
        (din as isize, 1),
        T::zero(),
        d_weight.data_mut(),
        (din as isize, 1),
    );
    let mut d_bias = Tensor::zeros([dout]);
    for row in grad_out.data().chunks(dout) {
        for (acc, &g) in d_bias.data_mut().iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    LinearGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Broadcast-add a `[B, C]` table over the spatial axes of `[B, C, H, W]`.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim("add_channel_bias", "input", x, 4)?;
    let (b, c, h, w) = dims4(x);
    if bias.shape() != [b, c] {
        return Err(Error::shape(
            "add_channel_bias",
            format!("bias {:?} does not broadcast over {:?}", bias.shape(), x.shape()),
        ));
    }
    let hw = h * w;
    let mut out = x.clone();
    for (plane, &v) in out.data_mut().chunks_mut(hw).zip(bias.data()) {
        for p in plane {
            *p = *p + v;
        }
    }
    Ok(out)
}

pub fn add_channel_bias_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = dims4(grad_out);
    let hw = h * w;
    let data = grad_out
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v))
        .collect();
    Tensor::new([b, c], data).expect("bias grad shape")
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim("concat_channels", "lhs", a, 4)?;
    expect_ndim("concat_channels", "rhs", b, 4)?;
    let (na, ca, ha, wa) = dims4(a);
    let (nb, cb, hb, wb) = dims4(b);
    if na != nb || ha != hb || wa != wb {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::new([na, ca + cb, ha, wa], data)
}

pub fn concat_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    ca: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = dims4(grad_out);
    let cb = c - ca;
    let mut ga = Vec::with_capacity(n * ca * h * w);
    let mut gb = Vec::with_capacity(n * cb * h * w);
    for i in 0..n {
        let item = grad_out.item(i);
        ga.extend_from_slice(&item[..ca * h * w]);
        gb.extend_from_slice(&item[ca * h * w..]);
    }
    (
        Tensor::new([n, ca, h, w], ga).expect("shape"),
        Tensor::new([n, cb, h, w], gb).expect("shape"),
    )
}

/// 2x2 average pooling.
pub fn downsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim("downsample2", "input", x, 4)?;
    let (b, c, h, w) = dims4(x);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "downsample2",
            format!("spatial size {h}x{w} must be even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for (dst, src) in out.data_mut().chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = s * quarter;
            }
        }
    }
    Ok(out)
}

pub fn downsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c, oh, ow) = dims4(grad_out);
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros([b, c, h, w]);
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim("upsample2", "input", x, 4)?;
    let (b, c, h, w) = dims4(x);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for (dst, src) in out.data_mut().chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c, oh, ow) = dims4(grad_out);
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros([b, c, h, w]);
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[2 * y * ow + 2 * x]
                    + src[2 * y * ow + 2 * x + 1]
                    + src[(2 * y + 1) * ow + 2 * x]
                    + src[(2 * y + 1) * ow + 2 * x + 1];
            }
        }
    }
    out
}

/// Mean of squared differences.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = T::from_usize(pred.len()).expect("count");
    let s = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
    Ok(s / n)
}

/// Gradient of [`mse_loss`] with respect to the prediction, scaled by the
/// upstream scalar gradient.
pub fn mse_loss_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    let scale = upstream * T::lit(2.0) / T::from_usize(pred.len()).expect("count");
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * scale)
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("same shape")
}

/// Sinusoidal timestep features: `dim/2` sines followed by `dim/2` cosines
/// at geometrically spaced frequencies `10000^(-k / (dim/2))`.
pub fn sinusoidal_embedding<T: Scalar>(timesteps: &[usize], dim: usize) -> Result<Tensor<T>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::shape(
            "sinusoidal_embedding",
            format!("embedding width {dim} must be even and >= 2"),
        ));
    }
    if timesteps.is_empty() {
        return Err(Error::shape("sinusoidal_embedding", "empty timestep batch"));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t * f).collect();
        data.extend(args.iter().map(|a| T::lit(a.sin())));
        data.extend(args.iter().map(|a| T::lit(a.cos())));
    }
    Tensor::new([timesteps.len(), dim], data)
}
