//! Differentiable tensor helpers that the layer code builds on.
//!
//! Resampling (bilinear resize, adaptive average pooling) is expressed as a
//! pair of small interpolation matrices applied along each spatial axis, so
//! gradients flow through ordinary matrix products.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Rotates the spatial plane of a `(B, C, H, W)` tensor by 90 degrees
/// counterclockwise `d` times. Negative `d` rotates clockwise.
///
/// With rows indexed top to bottom, `[[a, b], [c, d]]` rotated once becomes
/// `[[b, d], [a, c]]`.
pub fn rot90(x: &Tensor, d: i32) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::input(format!("rot90 expects rank 4, got {:?}", x.dims())));
    }
    Ok(match d.rem_euclid(4) {
        0 => x.clone(),
        1 => x.transpose(2, 3)?.contiguous()?.flip(&[2])?,
        2 => x.contiguous()?.flip(&[2, 3])?,
        _ => x.contiguous()?.flip(&[2])?.transpose(2, 3)?,
    })
}

/// Numerically stable logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Row-stochastic `(out, in)` matrix of bilinear weights with half-pixel
/// centers (`align_corners = false`).
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let w1 = src - i0 as f64;
        m[o * input + i0] += 1.0 - w1;
        m[o * input + i1] += w1;
    }
    m
}

/// `(out, in)` averaging matrix of adaptive average pooling: output cell `o`
/// covers `[floor(o * in / out), ceil((o + 1) * in / out))`.
pub fn adaptive_pool_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    for o in 0..output {
        let start = o * input / output;
        let end = ((o + 1) * input).div_ceil(output);
        let w = 1.0 / (end - start) as f64;
        for i in start..end {
            m[o * input + i] = w;
        }
    }
    m
}

fn matrix(values: Vec<f64>, rows: usize, cols: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (rows, cols), like.device())?.to_dtype(like.dtype())?)
}

/// Applies `rows` (shape `(oh, h)`) along height and `cols` (shape `(ow, w)`)
/// along width of a `(B, C, h, w)` tensor.
fn separable(x: &Tensor, rows: &Tensor, cols: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, _) = rows.dims2()?;
    let (ow, _) = cols.dims2()?;
    let y = x
        .contiguous()?
        .reshape((b * c * h, w))?
        .matmul(&cols.t()?)?
        .reshape((b, c, h, ow))?;
    let y = y
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * c * ow, h))?
        .matmul(&rows.t()?)?
        .reshape((b, c, ow, oh))?
        .transpose(2, 3)?
        .contiguous()?;
    Ok(y)
}

/// Bilinear resize of a `(B, C, H, W)` tensor to `(B, C, oh, ow)`.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    if oh == 0 || ow == 0 {
        return Err(Error::input("resize target must be non-empty"));
    }
    let rows = matrix(bilinear_matrix(h, oh), oh, h, x)?;
    let cols = matrix(bilinear_matrix(w, ow), ow, w, x)?;
    separable(x, &rows, &cols)
}

/// Adaptive average pooling of a `(B, C, H, W)` tensor to `(B, C, oh, ow)`.
pub fn adaptive_avg_pool(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::input(format!(
            "adaptive pooling from {h}x{w} to {oh}x{ow} is not supported"
        )));
    }
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let rows = matrix(adaptive_pool_matrix(h, oh), oh, h, x)?;
    let cols = matrix(adaptive_pool_matrix(w, ow), ow, w, x)?;
    separable(x, &rows, &cols)
}

/// `(n, n)` matrix averaging a window of `2 * radius + 1` around each index,
/// counting only positions inside the signal.
pub fn box_average_matrix(n: usize, radius: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(n - 1);
        let w = 1.0 / (hi - lo + 1) as f64;
        for j in lo..=hi {
            m[i * n + j] = w;
        }
    }
    m
}

/// Local mean over a `(2r+1) x (2r+1)` window with stride 1, averaging only
/// in-bounds pixels so a constant map stays constant up to the border.
pub fn box_average(x: &Tensor, radius: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rows = matrix(box_average_matrix(h, radius), h, h, x)?;
    let cols = matrix(box_average_matrix(w, radius), w, w, x)?;
    separable(x, &rows, &cols)
}

/// Resizes a binary mask with bilinear interpolation and re-binarizes it at
/// 0.5, keeping the `{0, 1}` invariant at every scale.
pub fn resize_mask(mask: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = mask.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(mask.clone());
    }
    let r = resize_bilinear(mask, oh, ow)?;
    Ok(r.ge(0.5)?.to_dtype(mask.dtype())?)
}

/// Converts a tensor of any float dtype to a flat `Vec<f64>`.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Reads a scalar tensor as `f64`.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.reshape(())?.to_scalar::<f64>()?)
}
