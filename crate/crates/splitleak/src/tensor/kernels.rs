//! Forward and backward kernels shared by the tape and by plain inference.
//!
//! All kernels are single-threaded with fixed loop order, so identical
//! inputs produce bit-identical outputs.

use super::{Elem, Tensor, TensorError};

pub fn conv2d_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize), TensorError> {
    let span_h = h + 2 * padding;
    let span_w = w + 2 * padding;
    if stride == 0 || span_h < kh || span_w < kw {
        return Err(TensorError::ShapeMismatch(format!(
            "conv kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )));
    }
    if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "conv output dims not integral: input {h}x{w}, kernel {kh}x{kw}, \
             stride {stride}, padding {padding}"
        )));
    }
    Ok(((span_h - kh) / stride + 1, (span_w - kw) / stride + 1))
}

/// Cross-correlation with zero padding, NCHW input, [Cout,Cin,kh,kw] weight.
pub fn conv2d<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, cin, h, ww) = x.dims4()?;
    let (cout, cin_w, kh, kw) = w.dims4()?;
    if cin != cin_w {
        return Err(TensorError::ShapeMismatch(format!(
            "conv input has {cin} channels, weight expects {cin_w}"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv bias shape {:?}, expected [{cout}]",
                b.shape()
            )));
        }
    }
    let (oh, ow) = conv2d_out_dims(h, ww, kh, kw, stride, padding)?;
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for co in 0..cout {
            let bias = b.map_or(T::ZERO, |b| b.data()[co]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ci in 0..cin {
                        let x_base = ((ni * cin + ci) * h) * ww;
                        let w_base = ((co * cin + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                acc += xd[x_base + iy as usize * ww + ix as usize]
                                    * wd[w_base + ky * kw + kx];
                            }
                        }
                    }
                    od[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight and bias.
pub fn conv2d_bwd<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    padding: usize,
    want_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Vec<T>>) {
    let (n, cin, h, ww) = x.dims4().expect("checked in forward");
    let (cout, _, kh, kw) = w.dims4().expect("checked in forward");
    let (oh, ow) = conv2d_out_dims(h, ww, kh, kw, stride, padding).expect("checked in forward");
    let mut dx = Tensor::zeros(vec![n, cin, h, ww]);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = if want_bias {
        Some(vec![T::ZERO; cout])
    } else {
        None
    };
    let xd = x.data();
    let wd = w.data();
    let dxd = dx.data_mut();
    {
        let dwd = dw.data_mut();
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out[((ni * cout + co) * oh + oy) * ow + ox];
                        if let Some(db) = db.as_mut() {
                            db[co] += g;
                        }
                        for ci in 0..cin {
                            let x_base = ((ni * cin + ci) * h) * ww;
                            let w_base = ((co * cin + ci) * kh) * kw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= ww as isize {
                                        continue;
                                    }
                                    let xi = x_base + iy as usize * ww + ix as usize;
                                    let wi = w_base + ky * kw + kx;
                                    dxd[xi] += g * wd[wi];
                                    dwd[wi] += g * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution ("kernel stamp"), weight layout [Cin,Cout,kh,kw].
/// Adjoint of `conv2d` with the same stride and zero padding.
pub fn conv_transpose2d<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, cin, h, ww) = x.dims4()?;
    let (cin_w, cout, kh, kw) = w.dims4()?;
    if cin != cin_w {
        return Err(TensorError::ShapeMismatch(format!(
            "conv_transpose input has {cin} channels, weight expects {cin_w}"
        )));
    }
    if stride == 0 {
        return Err(TensorError::ShapeMismatch("stride must be positive".into()));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (ww - 1) * stride + kw;
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..ww {
                    let v = xd[((ni * cin + ci) * h + iy) * ww + ix];
                    for co in 0..cout {
                        let w_base = ((ci * cout + co) * kh) * kw;
                        let o_base = (ni * cout + co) * oh;
                        for ky in 0..kh {
                            let oy = iy * stride + ky;
                            for kx in 0..kw {
                                let ox = ix * stride + kx;
                                od[(o_base + oy) * ow + ox] += v * wd[w_base + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_bwd<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (n, cin, h, ww) = x.dims4().expect("checked in forward");
    let (_, cout, kh, kw) = w.dims4().expect("checked in forward");
    let oh = (h - 1) * stride + kh;
    let ow = (ww - 1) * stride + kw;
    let mut dx = Tensor::zeros(vec![n, cin, h, ww]);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let xd = x.data();
    let wd = w.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for ni in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..ww {
                    let xi = ((ni * cin + ci) * h + iy) * ww + ix;
                    let xv = xd[xi];
                    let mut acc = T::ZERO;
                    for co in 0..cout {
                        let w_base = ((ci * cout + co) * kh) * kw;
                        let o_base = (ni * cout + co) * oh;
                        for ky in 0..kh {
                            let oy = iy * stride + ky;
                            for kx in 0..kw {
                                let ox = ix * stride + kx;
                                let g = grad_out[(o_base + oy) * ow + ox];
                                acc += g * wd[w_base + ky * kw + kx];
                                dwd[w_base + ky * kw + kx] += g * xv;
                            }
                        }
                    }
                    dxd[xi] += acc;
                }
            }
        }
    }
    (dx, dw)
}

/// Per-output-pixel source interpolation: left index and fractional weight.
/// Half-pixel-center convention with clamping.
fn bilinear_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
            let src = src.clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn interpolate_bilinear<T: Elem>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::ShapeMismatch(
            "interpolation target must be at least 1x1".into(),
        ));
    }
    // Exact identity at equal sizes, including -0.0 bit patterns.
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ys = bilinear_axis(out_h, h);
    let xs = bilinear_axis(out_w, w);
    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * out_h * out_w;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = xd[base + y0 * w + x0];
                let v01 = xd[base + y0 * w + x1];
                let v10 = xd[base + y1 * w + x0];
                let v11 = xd[base + y1 * w + x1];
                let fx = T::from_f64(fx);
                let fy = T::from_f64(fy);
                // lerp form keeps constants exactly constant
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                od[obase + oy * out_w + ox] = top + fy * (bot - top);
            }
        }
    }
    Ok(out)
}

pub fn interpolate_bilinear_bwd<T: Elem>(
    in_shape: (usize, usize, usize, usize),
    grad_out: &[T],
    out_h: usize,
    out_w: usize,
) -> Tensor<T> {
    let (n, c, h, w) = in_shape;
    let mut dx = Tensor::zeros(vec![n, c, h, w]);
    if out_h == h && out_w == w {
        dx.data_mut().copy_from_slice(grad_out);
        return dx;
    }
    let ys = bilinear_axis(out_h, h);
    let xs = bilinear_axis(out_w, w);
    let dxd = dx.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * out_h * out_w;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = grad_out[obase + oy * out_w + ox];
                let fx = T::from_f64(fx);
                let fy = T::from_f64(fy);
                dxd[base + y0 * w + x0] += g * (T::ONE - fy) * (T::ONE - fx);
                dxd[base + y0 * w + x1] += g * (T::ONE - fy) * fx;
                dxd[base + y1 * w + x0] += g * fy * (T::ONE - fx);
                dxd[base + y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

pub fn relu<T: Elem>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
    out
}

pub fn relu_bwd<T: Elem>(x: &Tensor<T>, grad_out: &[T]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let xd = x.data();
    let dxd = dx.data_mut();
    for i in 0..xd.len() {
        if xd[i] > T::ZERO {
            dxd[i] = grad_out[i];
        }
    }
    dx
}

/// y = x W^T + b with x:[N,Din], W:[Dout,Din], b:[Dout].
pub fn affine<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, din) = x.dims2()?;
    let (dout, din_w) = w.dims2()?;
    if din != din_w || b.shape() != [dout] {
        return Err(TensorError::ShapeMismatch(format!(
            "affine: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(vec![n, dout]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let od = out.data_mut();
    for ni in 0..n {
        for o in 0..dout {
            let mut acc = bd[o];
            let xb = ni * din;
            let wb = o * din;
            for i in 0..din {
                acc += xd[xb + i] * wd[wb + i];
            }
            od[ni * dout + o] = acc;
        }
    }
    Ok(out)
}

pub fn affine_bwd<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (n, din) = x.dims2().expect("checked in forward");
    let (dout, _) = w.dims2().expect("checked in forward");
    let mut dx = Tensor::zeros(vec![n, din]);
    let mut dw = Tensor::zeros(vec![dout, din]);
    let mut db = vec![T::ZERO; dout];
    let xd = x.data();
    let wd = w.data();
    let dxd = dx.data_mut();
    {
        let dwd = dw.data_mut();
        for ni in 0..n {
            for o in 0..dout {
                let g = grad_out[ni * dout + o];
                db[o] += g;
                let xb = ni * din;
                let wb = o * din;
                for i in 0..din {
                    dxd[xb + i] += g * wd[wb + i];
                    dwd[wb + i] += g * xd[xb + i];
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Ties go to the first element in
/// row-major window scan order, so the gradient routing is deterministic.
pub fn maxpool2<T: Elem>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + (2 * oy) * w + 2 * ox;
                let mut best = xd[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > best {
                        best = xd[i];
                        best_i = i;
                    }
                }
                od[obase + oy * ow + ox] = best;
                argmax[obase + oy * ow + ox] = best_i;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_bwd<T: Elem>(in_shape: &[usize], argmax: &[usize], grad_out: &[T]) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let dxd = dx.data_mut();
    for (o, &i) in argmax.iter().enumerate() {
        dxd[i] += grad_out[o];
    }
    dx
}

/// Row-wise softmax with max-subtraction stabilization.
pub fn softmax_rows<T: Elem>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, k) = logits.dims2().expect("softmax expects [N,K]");
    let mut out = Tensor::zeros(vec![n, k]);
    let ld = logits.data();
    let od = out.data_mut();
    for ni in 0..n {
        let row = &ld[ni * k..(ni + 1) * k];
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::ZERO;
        for j in 0..k {
            let e = (row[j] - m).exp();
            od[ni * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            od[ni * k + j] = od[ni * k + j] / sum;
        }
    }
    out
}

/// Mean over the batch of -log softmax(logits)[label]. Returns the loss
/// and the softmax matrix saved for the backward pass.
pub fn softmax_cross_entropy<T: Elem>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>), TensorError> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    for &y in labels {
        if y >= k {
            return Err(TensorError::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
    }
    let sm = softmax_rows(logits);
    let ld = logits.data();
    let mut loss = T::ZERO;
    for (ni, &y) in labels.iter().enumerate() {
        let row = &ld[ni * k..(ni + 1) * k];
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut lse = T::ZERO;
        for &v in row {
            lse += (v - m).exp();
        }
        loss += lse.ln() + m - row[y];
    }
    Ok((loss / T::from_f64(n as f64), sm))
}

pub fn softmax_cross_entropy_bwd<T: Elem>(softmax: &Tensor<T>, labels: &[usize], g: T) -> Tensor<T> {
    let (n, k) = softmax.dims2().expect("saved softmax is [N,K]");
    let mut dl = softmax.clone();
    let dld = dl.data_mut();
    let scale = g / T::from_f64(n as f64);
    for (ni, &y) in labels.iter().enumerate() {
        dld[ni * k + y] = dld[ni * k + y] - T::ONE;
        for j in 0..k {
            dld[ni * k + j] = dld[ni * k + j] * scale;
        }
    }
    dl
}

/// Mean over batch of sum_i p_i log(p_i / softmax(q)_i), with 0 log 0 := 0.
/// Differentiable w.r.t. `q_logits` only.
pub fn kl_divergence<T: Elem>(
    p: &Tensor<T>,
    q_logits: &Tensor<T>,
) -> Result<(T, Tensor<T>), TensorError> {
    let (n, k) = q_logits.dims2()?;
    if p.shape() != q_logits.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "p {:?} vs q_logits {:?}",
            p.shape(),
            q_logits.shape()
        )));
    }
    let pd = p.data();
    for ni in 0..n {
        let mut sum = T::ZERO;
        for j in 0..k {
            let v = pd[ni * k + j];
            if v < T::ZERO {
                return Err(TensorError::NotADistribution(format!(
                    "negative probability {:?} in row {ni}",
                    v
                )));
            }
            sum += v;
        }
        if (sum - T::ONE).abs().to_f64() > 1e-5 {
            return Err(TensorError::NotADistribution(format!(
                "row {ni} sums to {:?}",
                sum
            )));
        }
    }
    let smq = softmax_rows(q_logits);
    let smqd = smq.data();
    let mut loss = T::ZERO;
    for ni in 0..n {
        for j in 0..k {
            let pv = pd[ni * k + j];
            if pv > T::ZERO {
                loss += pv * (pv.ln() - smqd[ni * k + j].ln());
            }
        }
    }
    Ok((loss / T::from_f64(n as f64), smq))
}

pub fn kl_divergence_bwd<T: Elem>(p: &Tensor<T>, softmax_q: &Tensor<T>, g: T) -> Tensor<T> {
    let (n, k) = softmax_q.dims2().expect("saved softmax is [N,K]");
    let mut dq = Tensor::zeros(vec![n, k]);
    let pd = p.data();
    let sd = softmax_q.data();
    let dqd = dq.data_mut();
    let scale = g / T::from_f64(n as f64);
    for ni in 0..n {
        let mut row_sum = T::ZERO;
        for j in 0..k {
            row_sum += pd[ni * k + j];
        }
        for j in 0..k {
            dqd[ni * k + j] = (sd[ni * k + j] * row_sum - pd[ni * k + j]) * scale;
        }
    }
    dq
}

/// Mean of squared elementwise differences.
pub fn mse<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "mse shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut acc = T::ZERO;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x - *y;
        acc += d * d;
    }
    Ok(acc / T::from_f64(a.numel() as f64))
}

pub fn mse_bwd<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, g: T) -> (Tensor<T>, Tensor<T>) {
    let mut da = Tensor::zeros(a.shape().to_vec());
    let mut db = Tensor::zeros(b.shape().to_vec());
    let scale = (g + g) / T::from_f64(a.numel() as f64);
    {
        let dad = da.data_mut();
        let dbd = db.data_mut();
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let d = (*x - *y) * scale;
            dad[i] = d;
            dbd[i] = -d;
        }
    }
    (da, db)
}
