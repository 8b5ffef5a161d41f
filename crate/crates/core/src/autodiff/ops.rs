//! Operator set for the toy network: convolution, transposed convolution,
//! activation, the two losses, and elementwise plumbing. Each op records an
//! exact backward closure on the tape.

use super::tape::{Tape, VarId};
use super::tensor::Tensor;
use super::AutodiffError;
use crate::num::Real;

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Plain same-padding convolution: x [Ci,H,W], w [Co,Ci,k,k] ->
/// [Co, ceil(H/s), ceil(W/s)].
pub(crate) fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (ci, h, width) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k - 1) / 2;
    let (oh, ow) = (ceil_div(h, stride), ceil_div(width, stride));
    let mut out = Tensor::zeros(&[co, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for oc in 0..co {
        for ic in 0..ci {
            let wbase = ((oc * ci) + ic) * k * k;
            for oy in 0..oh {
                for dy in 0..k {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let xrow = (ic * h + iy as usize) * width;
                    let orow = (oc * oh + oy) * ow;
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        for dx in 0..k {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= width {
                                continue;
                            }
                            acc = acc + xd[xrow + ix as usize] * wd[wbase + dy * k + dx];
                        }
                        od[orow + ox] = od[orow + ox] + acc;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`] in its input: scatters gy [Co,Oh,Ow] back to
/// the input layout `in_shape`.
pub(crate) fn conv_input_adjoint<T: Real>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    in_shape: (usize, usize, usize),
) -> Tensor<T> {
    let (ci, h, width) = in_shape;
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k - 1) / 2;
    let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
    let mut gx = Tensor::zeros(&[ci, h, width]);
    let gyd = gy.data();
    let wd = w.data();
    let gxd = gx.data_mut();
    for oc in 0..co {
        for ic in 0..ci {
            let wbase = ((oc * ci) + ic) * k * k;
            for oy in 0..oh {
                for dy in 0..k {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let xrow = (ic * h + iy as usize) * width;
                    let orow = (oc * oh + oy) * ow;
                    for ox in 0..ow {
                        let g = gyd[orow + ox];
                        if g == T::zero() {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= width {
                                continue;
                            }
                            gxd[xrow + ix as usize] =
                                gxd[xrow + ix as usize] + g * wd[wbase + dy * k + dx];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Weight gradient of [`conv_forward`]: x [Ci,H,W], gy [Co,Oh,Ow] ->
/// [Co,Ci,k,k].
pub(crate) fn conv_weight_grad<T: Real>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    k: usize,
) -> Tensor<T> {
    let (ci, h, width) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = gy.shape()[0];
    let pad = (k - 1) / 2;
    let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
    let mut gw = Tensor::zeros(&[co, ci, k, k]);
    let xd = x.data();
    let gyd = gy.data();
    let gwd = gw.data_mut();
    for oc in 0..co {
        for ic in 0..ci {
            let wbase = ((oc * ci) + ic) * k * k;
            for dy in 0..k {
                for dx in 0..k {
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let xrow = (ic * h + iy as usize) * width;
                        let orow = (oc * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= width {
                                continue;
                            }
                            acc = acc + xd[xrow + ix as usize] * gyd[orow + ox];
                        }
                    }
                    gwd[wbase + dy * k + dx] = acc;
                }
            }
        }
    }
    gw
}

fn spatial_channel_sum<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut acc = T::zero();
        for i in 0..h * w {
            acc = acc + t.data()[ch * h * w + i];
        }
        out.data_mut()[ch] = acc;
    }
    out
}

fn check_conv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    transpose: bool,
) -> Result<(), AutodiffError> {
    if x.shape().len() != 3 || w.shape().len() != 4 || b.shape().len() != 1 {
        return Err(AutodiffError::ShapeMismatch(format!(
            "conv expects x rank 3, w rank 4, b rank 1; got {:?} {:?} {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let k = w.shape()[2];
    if k != w.shape()[3] || k % 2 == 0 {
        return Err(AutodiffError::ShapeMismatch(format!(
            "kernel must be square with odd size, got {:?}",
            &w.shape()[2..]
        )));
    }
    // conv weight is [c_out, c_in, k, k]; transposed conv weight is
    // [c_in, c_out, k, k]
    let (x_ch, b_ch) = if transpose {
        (w.shape()[0], w.shape()[1])
    } else {
        (w.shape()[1], w.shape()[0])
    };
    if x.shape()[0] != x_ch || b.shape()[0] != b_ch {
        return Err(AutodiffError::ShapeMismatch(format!(
            "channel mismatch: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Same-padding strided convolution with bias, recorded on the tape.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    x: VarId,
    w: VarId,
    b: VarId,
    stride: usize,
) -> Result<VarId, AutodiffError> {
    let (xv, wv, bv) = (tape.value(x), tape.value(w), tape.value(b));
    check_conv_shapes(xv, wv, bv, false)?;
    let k = wv.shape()[2];
    let mut out = conv_forward(xv, wv, stride);
    let (co, oh, ow) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    for c in 0..co {
        let bias = bv.data()[c];
        for i in 0..oh * ow {
            out.data_mut()[c * oh * ow + i] = out.data()[c * oh * ow + i] + bias;
        }
    }
    Ok(tape.record(vec![x, w, b], out, move |gy, inputs| {
        let (xv, wv) = (inputs[0], inputs[1]);
        let in_shape = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        vec![
            conv_input_adjoint(gy, wv, stride, in_shape),
            conv_weight_grad(xv, gy, stride, k),
            spatial_channel_sum(gy),
        ]
    }))
}

/// Transposed (fractionally-strided) convolution: the exact adjoint of
/// [`conv2d`]'s linear part with the same weight, plus a bias. Weight layout
/// is [c_in, c_out, k, k]; output spatial size is stride times the input's.
pub fn conv2d_transpose<T: Real>(
    tape: &mut Tape<T>,
    x: VarId,
    w: VarId,
    b: VarId,
    stride: usize,
) -> Result<VarId, AutodiffError> {
    let (xv, wv, bv) = (tape.value(x), tape.value(w), tape.value(b));
    check_conv_shapes(xv, wv, bv, true)?;
    let k = wv.shape()[2];
    let (h, width) = (xv.shape()[1], xv.shape()[2]);
    let out_shape = (wv.shape()[1], h * stride, width * stride);
    let mut out = conv_input_adjoint(xv, wv, stride, out_shape);
    let (co, oh, ow) = out_shape;
    for c in 0..co {
        let bias = bv.data()[c];
        for i in 0..oh * ow {
            out.data_mut()[c * oh * ow + i] = out.data()[c * oh * ow + i] + bias;
        }
    }
    Ok(tape.record(vec![x, w, b], out, move |gy, inputs| {
        let xv = inputs[0];
        let wv = inputs[1];
        vec![
            conv_forward(gy, wv, stride),
            conv_weight_grad(gy, xv, stride, k),
            spatial_channel_sum(gy),
        ]
    }))
}

/// Elementwise max(0, x); the backward masks by x > 0.
pub fn relu<T: Real>(tape: &mut Tape<T>, x: VarId) -> VarId {
    let out = Tensor::from_vec(
        tape.value(x).shape(),
        tape.value(x).data().iter().map(|&v| v.max(T::zero())).collect(),
    );
    tape.record(vec![x], out, |gy, inputs| {
        let x = inputs[0];
        vec![Tensor::from_vec(
            x.shape(),
            x.data()
                .iter()
                .zip(gy.data())
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect(),
        )]
    })
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Real>(tape: &mut Tape<T>, a: VarId, b: VarId) -> Result<VarId, AutodiffError> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape() != bv.shape() {
        return Err(AutodiffError::ShapeMismatch(format!(
            "add: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        )));
    }
    let out = Tensor::from_vec(
        av.shape(),
        av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect(),
    );
    Ok(tape.record(vec![a, b], out, |gy, _| vec![gy.clone(), gy.clone()]))
}

/// Multiplies by a fixed scalar.
pub fn scale<T: Real>(tape: &mut Tape<T>, x: VarId, s: T) -> VarId {
    let out = Tensor::from_vec(
        tape.value(x).shape(),
        tape.value(x).data().iter().map(|&v| v * s).collect(),
    );
    tape.record(vec![x], out, move |gy, _| {
        vec![Tensor::from_vec(gy.shape(), gy.data().iter().map(|&g| g * s).collect())]
    })
}

/// Label id that [`softmax_cross_entropy`] skips.
pub const IGNORE_LABEL: i32 = -1;

/// Mean cross-entropy over non-ignored pixels, with an optional per-class
/// weight vector (defaults to uniform).
pub fn softmax_cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: VarId,
    labels: &[i32],
    class_weights: Option<&[T]>,
) -> Result<VarId, AutodiffError> {
    let lv = tape.value(logits);
    if lv.shape().len() != 3 {
        return Err(AutodiffError::ShapeMismatch(format!(
            "logits must be [K,H,W], got {:?}",
            lv.shape()
        )));
    }
    let (k, h, w) = (lv.shape()[0], lv.shape()[1], lv.shape()[2]);
    if labels.len() != h * w {
        return Err(AutodiffError::ShapeMismatch(format!(
            "labels length {} vs {} pixels",
            labels.len(),
            h * w
        )));
    }
    let weights: Vec<T> = match class_weights {
        Some(ws) => {
            if ws.len() != k {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "class weights length {} vs {} classes",
                    ws.len(),
                    k
                )));
            }
            ws.to_vec()
        }
        None => vec![T::one(); k],
    };

    let npix = h * w;
    let mut softmax = vec![T::zero(); k * npix];
    let mut loss = T::zero();
    let mut weight_total = T::zero();
    let ld = lv.data();
    for p in 0..npix {
        let mut maxv = T::neg_infinity();
        for c in 0..k {
            maxv = maxv.max(ld[c * npix + p]);
        }
        let mut z = T::zero();
        for c in 0..k {
            let e = (ld[c * npix + p] - maxv).exp();
            softmax[c * npix + p] = e;
            z = z + e;
        }
        for c in 0..k {
            softmax[c * npix + p] = softmax[c * npix + p] / z;
        }
        let label = labels[p];
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= k {
            return Err(AutodiffError::ShapeMismatch(format!(
                "label {} out of range for {} classes",
                label, k
            )));
        }
        let wgt = weights[label];
        loss = loss - wgt * softmax[label * npix + p].max(T::of(1e-300)).ln();
        weight_total = weight_total + wgt;
    }
    if weight_total == T::zero() {
        return Err(AutodiffError::EmptyLabelSet);
    }
    loss = loss / weight_total;

    let labels: Vec<i32> = labels.to_vec();
    let shape = vec![k, h, w];
    Ok(tape.record(vec![logits], Tensor::scalar(loss), move |gy, _| {
        let g = gy.item();
        let mut grad = vec![T::zero(); k * npix];
        for p in 0..npix {
            let label = labels[p];
            if label == IGNORE_LABEL {
                continue;
            }
            let label = label as usize;
            let wgt = weights[label];
            for c in 0..k {
                let indicator = if c == label { T::one() } else { T::zero() };
                grad[c * npix + p] =
                    g * wgt * (softmax[c * npix + p] - indicator) / weight_total;
            }
        }
        vec![Tensor::from_vec(&shape, grad)]
    }))
}

/// LaneNet-style discriminative embedding loss: a hinged intra-instance
/// variance pull plus a hinged inter-instance mean push.
///
/// `instance_map` assigns each pixel an instance id; id 0 is background and
/// takes no part in the loss.
pub fn discriminative_loss<T: Real>(
    tape: &mut Tape<T>,
    embeddings: VarId,
    instance_map: &[u32],
    delta_v: T,
    delta_d: T,
) -> Result<VarId, AutodiffError> {
    let ev = tape.value(embeddings);
    if ev.shape().len() != 3 {
        return Err(AutodiffError::ShapeMismatch(format!(
            "embeddings must be [N,H,W], got {:?}",
            ev.shape()
        )));
    }
    let (ne, h, w) = (ev.shape()[0], ev.shape()[1], ev.shape()[2]);
    let npix = h * w;
    if instance_map.len() != npix {
        return Err(AutodiffError::ShapeMismatch(format!(
            "instance map length {} vs {} pixels",
            instance_map.len(),
            npix
        )));
    }

    // cluster pixel lists in ascending id order for determinism
    let mut ids: Vec<u32> = instance_map.iter().copied().filter(|&i| i > 0).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(AutodiffError::NoInstances);
    }
    let clusters: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| (0..npix).filter(|&p| instance_map[p] == id).collect())
        .collect();
    let instance_map: Vec<u32> = instance_map.to_vec();
    let _ = instance_map;

    let eval_loss = |ed: &[T]| -> (T, Vec<Vec<T>>) {
        let c_count = clusters.len();
        let mut means: Vec<Vec<T>> = Vec::with_capacity(c_count);
        for members in &clusters {
            let inv = T::one() / T::from_usize(members.len()).unwrap();
            let mut mu = vec![T::zero(); ne];
            for &p in members {
                for (d, m) in mu.iter_mut().enumerate() {
                    *m = *m + ed[d * npix + p] * inv;
                }
            }
            means.push(mu);
        }
        let mut var_term = T::zero();
        for (ci, members) in clusters.iter().enumerate() {
            let inv_n = T::one() / T::from_usize(members.len()).unwrap();
            let mut acc = T::zero();
            for &p in members {
                let mut sq = T::zero();
                for d in 0..ne {
                    let diff = ed[d * npix + p] - means[ci][d];
                    sq = sq + diff * diff;
                }
                let hinge = (sq.sqrt() - delta_v).max(T::zero());
                acc = acc + hinge * hinge;
            }
            var_term = var_term + acc * inv_n;
        }
        var_term = var_term / T::from_usize(c_count).unwrap();

        let mut dist_term = T::zero();
        if c_count > 1 {
            let pairs = c_count * (c_count - 1) / 2;
            for a in 0..c_count {
                for b in (a + 1)..c_count {
                    let mut sq = T::zero();
                    for d in 0..ne {
                        let diff = means[a][d] - means[b][d];
                        sq = sq + diff * diff;
                    }
                    let hinge = (delta_d + delta_d - sq.sqrt()).max(T::zero());
                    dist_term = dist_term + hinge * hinge;
                }
            }
            dist_term = dist_term / T::from_usize(pairs).unwrap();
        }
        (var_term + dist_term, means)
    };

    let (loss, _) = eval_loss(ev.data());
    let shape = vec![ne, h, w];
    let clusters_b = clusters.clone();
    Ok(tape.record(vec![embeddings], Tensor::scalar(loss), move |gy, inputs| {
        let g = gy.item();
        let ed = inputs[0].data();
        let c_count = clusters_b.len();
        let eps = T::of(1e-12);

        let mut means: Vec<Vec<T>> = Vec::with_capacity(c_count);
        for members in &clusters_b {
            let inv = T::one() / T::from_usize(members.len()).unwrap();
            let mut mu = vec![T::zero(); ne];
            for &p in members {
                for (d, m) in mu.iter_mut().enumerate() {
                    *m = *m + ed[d * npix + p] * inv;
                }
            }
            means.push(mu);
        }

        let mut grad = vec![T::zero(); ne * npix];
        let mut mean_grads = vec![vec![T::zero(); ne]; c_count];
        let inv_c = T::one() / T::from_usize(c_count).unwrap();

        // variance pull: route through both the pixel and its cluster mean
        for (ci, members) in clusters_b.iter().enumerate() {
            let inv_n = T::one() / T::from_usize(members.len()).unwrap();
            for &p in members {
                let mut sq = T::zero();
                for d in 0..ne {
                    let diff = ed[d * npix + p] - means[ci][d];
                    sq = sq + diff * diff;
                }
                let norm = sq.sqrt();
                let hinge = norm - delta_v;
                if hinge <= T::zero() || norm < eps {
                    continue;
                }
                let coeff = (T::one() + T::one()) * hinge * inv_c * inv_n / norm;
                for d in 0..ne {
                    let diff = ed[d * npix + p] - means[ci][d];
                    grad[d * npix + p] = grad[d * npix + p] + coeff * diff;
                    mean_grads[ci][d] = mean_grads[ci][d] - coeff * diff;
                }
            }
        }

        // distance push between cluster means
        if c_count > 1 {
            let inv_pairs = T::one() / T::from_usize(c_count * (c_count - 1) / 2).unwrap();
            for a in 0..c_count {
                for b in (a + 1)..c_count {
                    let mut sq = T::zero();
                    for d in 0..ne {
                        let diff = means[a][d] - means[b][d];
                        sq = sq + diff * diff;
                    }
                    let norm = sq.sqrt();
                    let hinge = delta_d + delta_d - norm;
                    if hinge <= T::zero() || norm < eps {
                        continue;
                    }
                    let coeff = -(T::one() + T::one()) * hinge * inv_pairs / norm;
                    for d in 0..ne {
                        let diff = means[a][d] - means[b][d];
                        mean_grads[a][d] = mean_grads[a][d] + coeff * diff;
                        mean_grads[b][d] = mean_grads[b][d] - coeff * diff;
                    }
                }
            }
        }

        // distribute mean gradients to members
        for (ci, members) in clusters_b.iter().enumerate() {
            let inv_n = T::one() / T::from_usize(members.len()).unwrap();
            for &p in members {
                for d in 0..ne {
                    grad[d * npix + p] = grad[d * npix + p] + mean_grads[ci][d] * inv_n;
                }
            }
        }

        for v in grad.iter_mut() {
            *v = *v * g;
        }
        vec![Tensor::from_vec(&shape, grad)]
    }))
}
