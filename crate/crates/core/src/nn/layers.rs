//! Feature-map layers on `[channels, height, width]` tensors with their
//! reverse-mode counterparts.

use super::tensor::{Scalar, Tensor};
use super::NnError;

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> NnError {
    NnError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Kernel side of a `[cout, cin, k, k]` weight, checked against the input.
fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize), NnError> {
    let (cin, h, w) = input.chw()?;
    let (cout, wcin, k) = match weight.shape()[..] {
        [co, ci, k1, k2] if k1 == k2 && k1 % 2 == 1 => (co, ci, k1),
        _ => return Err(shape_err("conv2d weight", weight.shape(), &[])),
    };
    if wcin != cin {
        return Err(shape_err("conv2d", input.shape(), weight.shape()));
    }
    if bias.shape() != [cout] {
        return Err(shape_err("conv2d bias", bias.shape(), weight.shape()));
    }
    Ok((cin, h, w, cout, k))
}

/// Zero-padded patch matrix: row `(ci·k + ky)·k + kx`, column `y·w + x`.
fn im2col<T: Scalar>(src: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut col = vec![T::zero(); cin * k * k * hw];
    for ci in 0..cin {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for x in x_lo..x_hi {
                        row[y * w + x] = plane[sy * w + (x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut dst = vec![T::zero(); cin * hw];
    for ci in 0..cin {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for x in x_lo..x_hi {
                        let d = &mut plane[sy * w + (x as isize + dx) as usize];
                        *d = *d + row[y * w + x];
                    }
                }
            }
        }
    }
    dst
}

/// Same-padded stride-1 convolution (cross-correlation) with bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (cin, h, w, cout, k) = conv_dims(input, weight, bias)?;
    let hw = h * w;
    let kk = cin * k * k;
    let col_buf;
    let col: &[T] = if k == 1 {
        input.data()
    } else {
        col_buf = im2col(input.data(), cin, h, w, k);
        &col_buf
    };
    let mut out = vec![T::zero(); cout * hw];
    for (co, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(bias.data()[co]);
    }
    // out[cout, hw] += W[cout, kk] · col[kk, hw]
    unsafe {
        T::gemm(
            cout,
            kk,
            hw,
            T::one(),
            weight.data().as_ptr(),
            kk as isize,
            1,
            col.as_ptr(),
            hw as isize,
            1,
            T::one(),
            out.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    Tensor::from_vec(&[cout, h, w], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, NnError> {
    let bias_shape = Tensor::<T>::zeros(&[weight.shape()[0]]);
    let (cin, h, w, cout, k) = conv_dims(input, weight, &bias_shape)?;
    if grad_out.shape() != [cout, h, w] {
        return Err(shape_err("conv2d backward", grad_out.shape(), &[cout, h, w]));
    }
    let hw = h * w;
    let kk = cin * k * k;
    let col_buf;
    let col: &[T] = if k == 1 {
        input.data()
    } else {
        col_buf = im2col(input.data(), cin, h, w, k);
        &col_buf
    };
    let g = grad_out.data();

    let grad_bias: Vec<T> = g.chunks(hw).map(|c| c.iter().copied().sum()).collect();

    // dW[cout, kk] = dOut[cout, hw] · colᵀ[hw, kk]
    let mut grad_w = vec![T::zero(); cout * kk];
    unsafe {
        T::gemm(
            cout,
            hw,
            kk,
            T::one(),
            g.as_ptr(),
            hw as isize,
            1,
            col.as_ptr(),
            1,
            hw as isize,
            T::zero(),
            grad_w.as_mut_ptr(),
            kk as isize,
            1,
        );
    }

    // dcol[kk, hw] = Wᵀ[kk, cout] · dOut[cout, hw]
    let mut dcol = vec![T::zero(); kk * hw];
    unsafe {
        T::gemm(
            kk,
            cout,
            hw,
            T::one(),
            weight.data().as_ptr(),
            1,
            kk as isize,
            g.as_ptr(),
            hw as isize,
            1,
            T::zero(),
            dcol.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    let grad_in = if k == 1 { dcol } else { col2im(&dcol, cin, h, w, k) };

    Ok(ConvGrads {
        input: Tensor::from_vec(&[cin, h, w], grad_in)?,
        weight: Tensor::from_vec(weight.shape(), grad_w)?,
        bias: Tensor::from_vec(&[cout], grad_bias)?,
    })
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    y
}

/// Passes gradient where the activation was strictly positive; the
/// derivative at exactly 0 is taken as 0.
pub fn relu_backward<T: Scalar>(activation: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if !(a > T::zero()) {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling; returns the flat argmax index inside each input plane.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>), NnError> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("maxpool2", x.shape(), &[2, 2]));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ci in 0..c {
        let plane = &d[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                for idx in [(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1] {
                    // first maximum wins ties
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                out.push(plane[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(
    argmax: &[u32],
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>, NnError> {
    let (c, oh, ow) = grad_out.chw()?;
    if input_shape != [c, 2 * oh, 2 * ow] || argmax.len() != c * oh * ow {
        return Err(shape_err("maxpool2 backward", grad_out.shape(), input_shape));
    }
    let plane = 4 * oh * ow;
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for ci in 0..c {
        for j in 0..oh * ow {
            let o = ci * oh * ow + j;
            let dst = &mut gd[ci * plane + argmax[o] as usize];
            *dst = *dst + grad_out.data()[o];
        }
    }
    Ok(g)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    let d = x.data();
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ci * oh + y) * ow + xx] = d[(ci * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (c, oh, ow) = grad_out.chw()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(shape_err("upsample2 backward", grad_out.shape(), &[2, 2]));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut g = vec![T::zero(); c * h * w];
    let d = grad_out.data();
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let dst = &mut g[(ci * h + y / 2) * w + xx / 2];
                *dst = *dst + d[(ci * oh + y) * ow + xx];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], g)
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(shape_err("concat", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, ha, wa], data)
}

/// Splits a concatenated gradient back into its first `ca` channels and the rest.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    let (c, h, w) = g.chw()?;
    if ca > c {
        return Err(shape_err("split", g.shape(), &[ca]));
    }
    let cut = ca * h * w;
    Ok((
        Tensor::from_vec(&[ca, h, w], g.data()[..cut].to_vec())?,
        Tensor::from_vec(&[c - ca, h, w], g.data()[cut..].to_vec())?,
    ))
}
