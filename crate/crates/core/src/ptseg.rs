//! The toy encoder-decoder segmentation network with perspective
//! transformer layers interleaved between stages.
//!
//! Encoder stage i halves resolution with a small residual block; the first
//! `ptl_steps` stages are each followed by one PTL (the step homography
//! rescaled to the stage's stride). The decoder mirrors: inverse PTL, then a
//! stride-2 transposed conv, then an additive skip from the same-view
//! encoder feature. Heads (semantic logits, instance embeddings) read the
//! full-resolution trunk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    add, conv2d, conv2d_transpose, discriminative_loss, relu, scale, softmax_cross_entropy,
    AutodiffError, Tape, Tensor, VarId,
};
use crate::geometry::{GeometryError, Homography, PTLChain, ViewSpec};
use crate::num::Real;
use crate::warp::{scale_homography_for_stride, warp_backward, warp_forward, FeatureMap, WarpError};

#[derive(Debug, thiserror::Error)]
pub enum PtsegError {
    #[error("chain incompatible with network: {0}")]
    IncompatibleChain(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug)]
pub struct NetworkConfig<T> {
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    /// Channels of the first stage; stage i has base_channels << i.
    pub base_channels: usize,
    /// Input channel count (3 for rendered scenes).
    pub in_channels: usize,
    /// How many leading encoder stages carry a PTL; must not exceed depth.
    pub ptl_steps: usize,
    /// Semantic class count.
    pub classes: usize,
    /// Instance-embedding dimensionality; the head is skipped when
    /// `instance_head` is off.
    pub embedding_dims: usize,
    pub instance_head: bool,
    /// Weight of the discriminative term in the combined loss.
    pub lambda_instance: T,
    pub delta_v: T,
    pub delta_d: T,
    pub input: ViewSpec<T>,
    /// Perspective chain; required (with exactly `ptl_steps` steps, built on
    /// `input`) when `ptl_steps` > 0.
    pub chain: Option<PTLChain<T>>,
}

impl<T: Real> NetworkConfig<T> {
    /// Sensible toy defaults; callers override fields as needed.
    pub fn toy(input: ViewSpec<T>, classes: usize, chain: Option<PTLChain<T>>) -> Self {
        let ptl_steps = chain.as_ref().map_or(0, |c| c.len());
        Self {
            depth: 3,
            base_channels: 16,
            in_channels: 3,
            ptl_steps,
            classes,
            embedding_dims: 4,
            instance_head: true,
            lambda_instance: T::one(),
            delta_v: T::of(0.5),
            delta_d: T::of(3.0),
            input,
            chain,
        }
    }
}

/// Built network: flat parameter list plus the per-stage warp homographies
/// frozen at build time.
#[derive(Clone, Debug)]
pub struct PTSegModel<T> {
    pub cfg: NetworkConfig<T>,
    /// Per encoder stage [w1,b1,w2,b2,wp,bp], per decoder stage [wt,bt],
    /// semantic head [w,b], then instance head [w,b] when enabled.
    pub params: Vec<Tensor<T>>,
    enc_warps: Vec<Homography<T>>,
    dec_warps: Vec<Homography<T>>,
}

/// One recorded forward: the tape plus handles into it.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub image: VarId,
    pub param_vars: Vec<VarId>,
    pub semantic: VarId,
    pub embeddings: Option<VarId>,
    /// Number of warp ops recorded (0 iff ptl_steps = 0).
    pub warp_ops: usize,
    /// Labeled per-stage feature snapshots for visualization.
    pub trace: Vec<(String, Tensor<T>)>,
}

fn enc_channels(cfg_in: usize, base: usize, stage: usize) -> (usize, usize) {
    let ci = if stage == 0 { cfg_in } else { base << (stage - 1) };
    (ci, base << stage)
}

fn he_conv<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller on (0,1] uniforms
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            T::of((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Records a fixed-homography warp on the tape; backward is the exact
/// scatter adjoint.
fn warp_var<T: Real>(tape: &mut Tape<T>, x: VarId, h: Homography<T>) -> Result<VarId, PtsegError> {
    let xv = tape.value(x);
    let in_shape = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let fm = FeatureMap::from_vec(in_shape.0, in_shape.1, in_shape.2, xv.data().to_vec());
    let out = warp_forward(&fm, &h)?;
    let (c, oh, ow) = out.shape();
    let out_t = Tensor::from_vec(&[c, oh, ow], out.into_vec());
    Ok(tape.record(vec![x], out_t, move |gy, _| {
        let g = FeatureMap::from_vec(gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.data().to_vec());
        let gi = warp_backward(&g, &h, in_shape).expect("shapes fixed at record time");
        let (c, ih, iw) = gi.shape();
        vec![Tensor::from_vec(&[c, ih, iw], gi.into_vec())]
    }))
}

/// Top-left crop to (h, w); backward zero-pads. Identity when already sized.
fn crop_var<T: Real>(tape: &mut Tape<T>, x: VarId, h: usize, w: usize) -> VarId {
    let xv = tape.value(x);
    let (c, ih, iw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    if (ih, iw) == (h, w) {
        return x;
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.data_mut()[(ch * h + y) * w + xx] = xv.data()[(ch * ih + y) * iw + xx];
            }
        }
    }
    tape.record(vec![x], out, move |gy, _| {
        let mut gx = Tensor::zeros(&[c, ih, iw]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    gx.data_mut()[(ch * ih + y) * iw + xx] = gy.data()[(ch * h + y) * w + xx];
                }
            }
        }
        vec![gx]
    })
}

pub fn build_model<T: Real>(cfg: NetworkConfig<T>, seed: u64) -> Result<PTSegModel<T>, PtsegError> {
    if cfg.depth == 0 || cfg.base_channels == 0 || cfg.classes == 0 {
        return Err(PtsegError::ShapeMismatch(
            "depth, base_channels and classes must be positive".into(),
        ));
    }
    if cfg.ptl_steps > cfg.depth {
        return Err(PtsegError::IncompatibleChain(format!(
            "{} PTL steps but only {} encoder stages",
            cfg.ptl_steps, cfg.depth
        )));
    }
    let mut enc_warps = Vec::new();
    let mut dec_warps = Vec::new();
    if cfg.ptl_steps > 0 {
        let chain = cfg
            .chain
            .as_ref()
            .ok_or_else(|| PtsegError::IncompatibleChain("ptl_steps > 0 but no chain".into()))?;
        if chain.len() != cfg.ptl_steps {
            return Err(PtsegError::IncompatibleChain(format!(
                "chain has {} steps, network wants {}",
                chain.len(),
                cfg.ptl_steps
            )));
        }
        if chain.source_view() != cfg.input {
            return Err(PtsegError::IncompatibleChain(
                "chain source view differs from the network input view".into(),
            ));
        }
        for (i, step) in chain.steps.iter().enumerate() {
            let stride = 1u32 << (i as u32 + 1);
            let scaled = scale_homography_for_stride(&step.homography, stride)?;
            dec_warps.push(scaled.inverse()?);
            enc_warps.push(scaled);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for i in 0..cfg.depth {
        let (ci, co) = enc_channels(cfg.in_channels, cfg.base_channels, i);
        params.push(he_conv(&mut rng, &[co, ci, 3, 3], ci * 9));
        params.push(Tensor::zeros(&[co]));
        params.push(he_conv(&mut rng, &[co, co, 3, 3], co * 9));
        params.push(Tensor::zeros(&[co]));
        params.push(he_conv(&mut rng, &[co, ci, 1, 1], ci));
        params.push(Tensor::zeros(&[co]));
    }
    for j in 0..cfg.depth {
        let (_, cj) = enc_channels(cfg.in_channels, cfg.base_channels, j);
        let target = if j == 0 {
            cfg.base_channels
        } else {
            cfg.base_channels << (j - 1)
        };
        // transposed-conv weight layout is [c_in, c_out, k, k]
        params.push(he_conv(&mut rng, &[cj, target, 3, 3], cj * 9));
        params.push(Tensor::zeros(&[target]));
    }
    params.push(he_conv(&mut rng, &[cfg.classes, cfg.base_channels, 1, 1], cfg.base_channels));
    params.push(Tensor::zeros(&[cfg.classes]));
    if cfg.instance_head {
        params.push(he_conv(
            &mut rng,
            &[cfg.embedding_dims, cfg.base_channels, 1, 1],
            cfg.base_channels,
        ));
        params.push(Tensor::zeros(&[cfg.embedding_dims]));
    }
    Ok(PTSegModel { cfg, params, enc_warps, dec_warps })
}

impl<T: Real> PTSegModel<T> {
    /// Replaces the parameters after validating shapes (checkpoint load).
    pub fn load_params(&mut self, params: Vec<Tensor<T>>) -> Result<(), PtsegError> {
        if params.len() != self.params.len() {
            return Err(PtsegError::ShapeMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.shape() != old.shape() {
                return Err(PtsegError::ShapeMismatch(format!(
                    "parameter {i}: checkpoint {:?} vs model {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, image: &FeatureMap<T>) -> Result<ForwardPass<T>, PtsegError> {
        let cfg = &self.cfg;
        let expect = (cfg.in_channels, cfg.input.height as usize, cfg.input.width as usize);
        if image.shape() != expect {
            return Err(PtsegError::ShapeMismatch(format!(
                "image is {:?}, network input is {:?} (c,h,w)",
                image.shape(),
                expect
            )));
        }
        let mut tape = Tape::new();
        let (c, h, w) = image.shape();
        let img = tape.leaf(Tensor::from_vec(&[c, h, w], image.data().to_vec()), true);
        let param_vars: Vec<VarId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect();

        let mut trace: Vec<(String, Tensor<T>)> = vec![("input".into(), tape.value(img).clone())];
        let mut warp_ops = 0usize;

        // encoder; keep post-PTL stage outputs for skips
        let mut feat = img;
        let mut enc_feats: Vec<VarId> = Vec::with_capacity(cfg.depth);
        // spatial dims the decoder must restore at each stage boundary
        let mut stage_in_dims: Vec<(usize, usize)> = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = 6 * i;
            let fv = tape.value(feat);
            stage_in_dims.push((fv.shape()[1], fv.shape()[2]));
            let c1 = conv2d(&mut tape, feat, param_vars[p], param_vars[p + 1], 2)?;
            let a1 = relu(&mut tape, c1);
            let c2 = conv2d(&mut tape, a1, param_vars[p + 2], param_vars[p + 3], 1)?;
            let proj = conv2d(&mut tape, feat, param_vars[p + 4], param_vars[p + 5], 2)?;
            let sum = add(&mut tape, c2, proj)?;
            feat = relu(&mut tape, sum);
            trace.push((format!("enc{i}"), tape.value(feat).clone()));
            if i < cfg.ptl_steps {
                feat = warp_var(&mut tape, feat, self.enc_warps[i])?;
                warp_ops += 1;
                trace.push((format!("enc{i}.ptl"), tape.value(feat).clone()));
            }
            enc_feats.push(feat);
        }

        // decoder, mirrored
        for j in (0..cfg.depth).rev() {
            if j < cfg.ptl_steps {
                feat = warp_var(&mut tape, feat, self.dec_warps[j])?;
                warp_ops += 1;
                trace.push((format!("dec{j}.ptl"), tape.value(feat).clone()));
            }
            let p = 6 * cfg.depth + 2 * j;
            let up = conv2d_transpose(&mut tape, feat, param_vars[p], param_vars[p + 1], 2)?;
            let (eh, ew) = stage_in_dims[j];
            let cropped = crop_var(&mut tape, up, eh, ew);
            feat = relu(&mut tape, cropped);
            if j > 0 {
                feat = add(&mut tape, feat, enc_feats[j - 1])?;
            }
            trace.push((format!("dec{j}"), tape.value(feat).clone()));
        }

        let hp = 6 * cfg.depth + 2 * cfg.depth;
        let semantic = conv2d(&mut tape, feat, param_vars[hp], param_vars[hp + 1], 1)?;
        let embeddings = if cfg.instance_head {
            Some(conv2d(&mut tape, feat, param_vars[hp + 2], param_vars[hp + 3], 1)?)
        } else {
            None
        };

        Ok(ForwardPass { tape, image: img, param_vars, semantic, embeddings, warp_ops, trace })
    }

    /// Combined loss on a recorded pass: cross-entropy plus
    /// lambda * discriminative embedding loss (when the head is on).
    pub fn loss(
        &self,
        pass: &mut ForwardPass<T>,
        semantic_labels: &[i32],
        instance_labels: &[u32],
        class_weights: Option<&[T]>,
    ) -> Result<VarId, PtsegError> {
        combined_loss(
            &mut pass.tape,
            pass.semantic,
            pass.embeddings,
            semantic_labels,
            instance_labels,
            class_weights,
            self.cfg.lambda_instance,
            self.cfg.delta_v,
            self.cfg.delta_d,
        )
    }

    /// Gradients for every parameter after `tape.backward(loss)`; parameters
    /// untouched by the loss get zeros.
    pub fn grads(&self, pass: &ForwardPass<T>) -> Vec<Tensor<T>> {
        pass.param_vars
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| {
                pass.tape
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect()
    }

    /// Argmax semantic map plus clustered instance map. `lane_class` selects
    /// the semantic class whose pixels feed the embedding clustering.
    pub fn predict(
        &self,
        image: &FeatureMap<T>,
        lane_class: usize,
    ) -> Result<(Vec<u8>, Vec<u32>), PtsegError> {
        let pass = self.forward(image)?;
        let sem = argmax_map(pass.tape.value(pass.semantic));
        let npix = sem.len();
        let instances = match pass.embeddings {
            Some(emb) => {
                let mask: Vec<bool> = sem.iter().map(|&c| c as usize == lane_class).collect();
                cluster_embeddings(pass.tape.value(emb), &mask, self.cfg.delta_d)
            }
            None => vec![0; npix],
        };
        Ok((sem, instances))
    }
}

/// Per-pixel argmax over the leading (class) dimension of a [K,H,W] tensor.
/// Ties go to the lowest class id.
pub fn argmax_map<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let npix = h * w;
    let mut out = vec![0u8; npix];
    for p in 0..npix {
        let mut best = logits.data()[p];
        for c in 1..k {
            let v = logits.data()[c * npix + p];
            if v > best {
                best = v;
                out[p] = c as u8;
            }
        }
    }
    out
}

/// The loss combination used by [`PTSegModel::loss`], exposed for direct
/// testing on hand-built logits/embeddings.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    semantic: VarId,
    embeddings: Option<VarId>,
    semantic_labels: &[i32],
    instance_labels: &[u32],
    class_weights: Option<&[T]>,
    lambda: T,
    delta_v: T,
    delta_d: T,
) -> Result<VarId, PtsegError> {
    let ce = softmax_cross_entropy(tape, semantic, semantic_labels, class_weights)?;
    match embeddings {
        Some(emb) => {
            let disc = discriminative_loss(tape, emb, instance_labels, delta_v, delta_d)?;
            let weighted = scale(tape, disc, lambda);
            Ok(add(tape, ce, weighted)?)
        }
        None => Ok(ce),
    }
}

/// Greedy threshold clustering of masked embedding pixels: seed from the
/// first unassigned pixel in raster order, gather pixels within `delta_d` of
/// the running mean, re-estimate the mean to fixation (at most 10 rounds),
/// label the members, repeat. Instance ids start at 1; background stays 0.
pub fn cluster_embeddings<T: Real>(
    embeddings: &Tensor<T>,
    mask: &[bool],
    delta_d: T,
) -> Vec<u32> {
    let (ne, h, w) = (embeddings.shape()[0], embeddings.shape()[1], embeddings.shape()[2]);
    let npix = h * w;
    assert_eq!(mask.len(), npix, "mask length must match the pixel count");
    let ed = embeddings.data();
    let mut labels = vec![0u32; npix];
    let mut next_id = 1u32;
    for seed in 0..npix {
        if !mask[seed] || labels[seed] != 0 {
            continue;
        }
        let mut mean: Vec<T> = (0..ne).map(|d| ed[d * npix + seed]).collect();
        let mut members: Vec<usize> = Vec::new();
        for _ in 0..10 {
            let mut new_members: Vec<usize> = Vec::new();
            for p in 0..npix {
                if !mask[p] || labels[p] != 0 {
                    continue;
                }
                let mut dist2 = T::zero();
                for d in 0..ne {
                    let diff = ed[d * npix + p] - mean[d];
                    dist2 = dist2 + diff * diff;
                }
                if dist2.sqrt() < delta_d {
                    new_members.push(p);
                }
            }
            if new_members.is_empty() {
                new_members.push(seed);
            }
            let converged = new_members == members;
            members = new_members;
            let inv = T::one() / T::from_usize(members.len()).unwrap();
            for (d, m) in mean.iter_mut().enumerate() {
                *m = members.iter().map(|&p| ed[d * npix + p]).sum::<T>() * inv;
            }
            if converged {
                break;
            }
        }
        if !members.contains(&seed) {
            members.push(seed);
        }
        for &p in &members {
            labels[p] = next_id;
        }
        next_id += 1;
    }
    labels
}
