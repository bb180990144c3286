//! Dense compute kernels: affine maps, 3×3 "same" convolution and 2×2 average
//! pooling, forward and backward. The autodiff graph and the inference
//! runtime both call into these, so their arithmetic is shared bit for bit.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Rows handled per sgemm call in the affine map. Fixed so that results do
/// not depend on how many workers split the batch.
const FC_ROW_CHUNK: usize = 32;
/// Samples per partial sum when reducing weight gradients over a batch.
const GRAD_SAMPLE_CHUNK: usize = 8;

/// `c = a · b + beta · c` with explicit strides, `a` is `m×k` and `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    let extent = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows.saturating_sub(1)) as isize * rs + (cols.saturating_sub(1)) as isize * cs + 1
    };
    assert!(k == 0 || a.len() as isize >= extent(m, k, a_strides));
    assert!(k == 0 || b.len() as isize >= extent(k, n, b_strides));
    // SAFETY: extents checked above; `c` is a dense row-major m×n block.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn expect_rank(t: &Tensor, rank: usize, op: &'static str, name: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::dim(
            op,
            format!("{name} must be rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// `input[batch, in] · weights[in, out] + bias[out]`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    expect_rank(input, 2, "fc", "input")?;
    expect_rank(weights, 2, "fc", "weights")?;
    let (batch, fan_in) = (input.shape()[0], input.shape()[1]);
    let (w_in, fan_out) = (weights.shape()[0], weights.shape()[1]);
    if fan_in != w_in {
        return Err(Error::dim(
            "fc",
            format!(
                "input {:?} does not conform to weights {:?}",
                input.shape(),
                weights.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [fan_out] {
            return Err(Error::dim(
                "fc",
                format!("bias {:?} does not match weights {:?}", b.shape(), weights.shape()),
            ));
        }
    }
    let mut out = vec![0.0f32; batch * fan_out];
    let x = input.data();
    let w = weights.data();
    exec::for_each_chunk_mut(&mut out, FC_ROW_CHUNK * fan_out, |ci, chunk| {
        let rows = chunk.len() / fan_out;
        let r0 = ci * FC_ROW_CHUNK;
        if let Some(b) = bias {
            for row in chunk.chunks_mut(fan_out) {
                row.copy_from_slice(b.data());
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        sgemm(
            rows,
            fan_in,
            fan_out,
            &x[r0 * fan_in..(r0 + rows) * fan_in],
            (fan_in as isize, 1),
            w,
            (fan_out as isize, 1),
            chunk,
            beta,
        );
    });
    Tensor::new(&[batch, fan_out], out)
}

pub struct FcGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fc_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor, need_input: bool) -> FcGrads {
    let (batch, fan_in) = (input.shape()[0], input.shape()[1]);
    let fan_out = weights.shape()[1];
    let g = grad_out.data();

    // dW = xᵀ · dY, a single call so the batch reduction order is fixed.
    let mut dw = vec![0.0f32; fan_in * fan_out];
    sgemm(
        fan_in,
        batch,
        fan_out,
        input.data(),
        (1, fan_in as isize),
        g,
        (fan_out as isize, 1),
        &mut dw,
        0.0,
    );
    let mut db = vec![0.0f32; fan_out];
    for row in g.chunks(fan_out) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let dx = need_input.then(|| {
        let mut dx = vec![0.0f32; batch * fan_in];
        let w = weights.data();
        exec::for_each_chunk_mut(&mut dx, FC_ROW_CHUNK * fan_in, |ci, chunk| {
            let rows = chunk.len() / fan_in;
            let r0 = ci * FC_ROW_CHUNK;
            sgemm(
                rows,
                fan_out,
                fan_in,
                &g[r0 * fan_out..(r0 + rows) * fan_out],
                (fan_out as isize, 1),
                w,
                (1, fan_out as isize),
                chunk,
                0.0,
            );
        });
        Tensor::new(input.shape(), dx).expect("shape preserved")
    });
    FcGrads {
        input: dx,
        weights: Tensor::new(weights.shape(), dw).expect("shape preserved"),
        bias: Tensor::new(&[fan_out], db).expect("shape preserved"),
    }
}

/// Unfolds one `[c, h, w]` image into `[c·9, h·w]` patches with zero padding 1.
fn im2col(img: &[f32], c: usize, h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, img: &mut [f32]) {
    let hw = h * w;
    img.fill(0.0);
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

fn conv_dims(input: &Tensor, kernels: &Tensor) -> Result<ConvDims> {
    expect_rank(input, 4, "conv2d", "input")?;
    expect_rank(kernels, 4, "conv2d", "kernels")?;
    let s = input.shape();
    let k = kernels.shape();
    if k[2] != 3 || k[3] != 3 {
        return Err(Error::dim(
            "conv2d",
            format!("only 3x3 kernels are supported, got {k:?}"),
        ));
    }
    if k[1] != s[1] {
        return Err(Error::dim(
            "conv2d",
            format!("input {s:?} has {} channels but kernels {k:?} expect {}", s[1], k[1]),
        ));
    }
    Ok(ConvDims {
        batch: s[0],
        cin: s[1],
        cout: k[0],
        h: s[2],
        w: s[3],
    })
}

/// 3×3 convolution, stride 1, zero padding 1; spatial size is preserved.
pub fn conv3_forward(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let d = conv_dims(input, kernels)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias {:?} does not match {} output channels", b.shape(), d.cout),
            ));
        }
    }
    let hw = d.h * d.w;
    let kdim = d.cin * 9;
    let x = input.data();
    let kern = kernels.data();
    let mut out = vec![0.0f32; d.batch * d.cout * hw];
    exec::for_each_chunk_mut(&mut out, d.cout * hw, |b, chunk| {
        let mut col = vec![0.0f32; kdim * hw];
        im2col(&x[b * d.cin * hw..(b + 1) * d.cin * hw], d.cin, d.h, d.w, &mut col);
        if let Some(bias) = bias {
            for (plane, &bv) in chunk.chunks_mut(hw).zip(bias.data()) {
                plane.fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        sgemm(
            d.cout,
            kdim,
            hw,
            kern,
            (kdim as isize, 1),
            &col,
            (hw as isize, 1),
            chunk,
            beta,
        );
    });
    Tensor::new(&[d.batch, d.cout, d.h, d.w], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv3_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let d = conv_dims(input, kernels)?;
    let hw = d.h * d.w;
    let kdim = d.cin * 9;
    let x = input.data();
    let g = grad_out.data();
    let kern = kernels.data();

    let groups = d.batch.div_ceil(GRAD_SAMPLE_CHUNK);
    let partials = exec::map_indices(groups, |gi| {
        let mut dk = vec![0.0f32; d.cout * kdim + d.cout];
        let (dk_w, dk_b) = dk.split_at_mut(d.cout * kdim);
        let mut col = vec![0.0f32; kdim * hw];
        let end = ((gi + 1) * GRAD_SAMPLE_CHUNK).min(d.batch);
        for b in gi * GRAD_SAMPLE_CHUNK..end {
            im2col(&x[b * d.cin * hw..(b + 1) * d.cin * hw], d.cin, d.h, d.w, &mut col);
            let gb = &g[b * d.cout * hw..(b + 1) * d.cout * hw];
            sgemm(
                d.cout,
                hw,
                kdim,
                gb,
                (hw as isize, 1),
                &col,
                (1, hw as isize),
                dk_w,
                1.0,
            );
            for (db, plane) in dk_b.iter_mut().zip(gb.chunks(hw)) {
                *db += plane.iter().sum::<f32>();
            }
        }
        dk
    });
    let mut summed = exec::sum_partials(partials, d.cout * kdim + d.cout);
    let db = summed.split_off(d.cout * kdim);

    let dx = if need_input {
        let mut dx = vec![0.0f32; d.batch * d.cin * hw];
        exec::for_each_chunk_mut(&mut dx, d.cin * hw, |b, chunk| {
            let mut dcol = vec![0.0f32; kdim * hw];
            sgemm(
                kdim,
                d.cout,
                hw,
                kern,
                (1, kdim as isize),
                &g[b * d.cout * hw..(b + 1) * d.cout * hw],
                (hw as isize, 1),
                &mut dcol,
                0.0,
            );
            col2im(&dcol, d.cin, d.h, d.w, chunk);
        });
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: dx,
        kernels: Tensor::new(kernels.shape(), summed)?,
        bias: Tensor::new(&[d.cout], db)?,
    })
}

pub fn avgpool2_output_shape(shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() != 4 {
        return Err(Error::dim(
            "avgpool2",
            format!("input must be rank 4, got {shape:?}"),
        ));
    }
    if shape[2] < 2 || shape[3] < 2 {
        return Err(Error::dim(
            "avgpool2",
            format!("spatial size must be at least 2x2, got {shape:?}"),
        ));
    }
    Ok(vec![shape[0], shape[1], shape[2] / 2, shape[3] / 2])
}

/// Non-overlapping 2×2 mean; odd trailing rows and columns are dropped.
pub fn avgpool2_forward(input: &Tensor) -> Result<Tensor> {
    let out_shape = avgpool2_output_shape(input.shape())?;
    let (h, w) = (input.shape()[2], input.shape()[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut out = vec![0.0f32; out_shape.iter().product()];
    exec::for_each_chunk_mut(&mut out, oh * ow, |plane, o| {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            let r0 = &src[2 * i * w..];
            let r1 = &src[(2 * i + 1) * w..];
            for j in 0..ow {
                o[i * ow + j] = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * 0.25;
            }
        }
    });
    Tensor::new(&out_shape, out)
}

pub fn avgpool2_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let g = grad_out.data();
    let mut dx = vec![0.0f32; input_shape.iter().product()];
    exec::for_each_chunk_mut(&mut dx, h * w, |plane, d| {
        let go = &g[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let v = go[i * ow + j] * 0.25;
                d[2 * i * w + 2 * j] = v;
                d[2 * i * w + 2 * j + 1] = v;
                d[(2 * i + 1) * w + 2 * j] = v;
                d[(2 * i + 1) * w + 2 * j + 1] = v;
            }
        }
    });
    Tensor::new(input_shape, dx).expect("shape preserved")
}
