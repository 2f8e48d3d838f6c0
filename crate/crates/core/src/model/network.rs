//! Batched forward pass and exact reverse-mode backward pass.
//!
//! A batch of clouds is stacked into one `P x 3` matrix (P = total points);
//! normalization statistics are taken over all P rows, max-pooling and the
//! softmax run per cloud.

use ndarray::{s, Array1, Array2, Axis};

use super::{Gradients, ModelParams, ParamId, ParamSubsetMask, PointCloud, WeightMap};
use super::{LEAKY_SLOPE, NORM_EPS, NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::skeleton::Pose;

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// Normalized, scaled and shifted output (input of the leaky rectifier).
    out: Array2<f64>,
}

/// Intermediates kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    training: bool,
    offsets: Vec<usize>,
    x: Array2<f64>,
    norms: [NormCache; 3],
    a1: Array2<f64>,
    a2: Array2<f64>,
    a3: Array2<f64>,
    argmax: Array2<usize>,
    global: Array2<f64>,
    weights: Array2<f64>,
    num_joints: usize,
    num_params: usize,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_training(&self) -> bool {
        self.training
    }
}

/// Batch statistics to fold into the running buffers after a training-mode pass.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    mean: [Array1<f64>; 3],
    var: [Array1<f64>; 3],
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub poses: Vec<Pose>,
    pub weights: Vec<WeightMap>,
    pub cache: ForwardCache,
    /// Present in training mode; apply with [`ModelParams::update_running`].
    pub running_update: Option<RunningUpdate>,
}

impl ModelParams {
    /// Exponential running average of the normalization statistics.
    pub fn update_running(&mut self, update: &RunningUpdate) {
        for l in 0..3 {
            let m = NORM_MOMENTUM;
            let mean = &mut self.buffers[2 * l];
            for (r, &b) in mean.iter_mut().zip(update.mean[l].iter()) {
                *r = (1.0 - m) * *r + m * b;
            }
            let var = &mut self.buffers[2 * l + 1];
            for (r, &b) in var.iter_mut().zip(update.var[l].iter()) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

/// Runs the network on a batch of clouds.
///
/// In training mode the normalization layers use the batch statistics and the
/// returned [`RunningUpdate`] carries them; in inference mode the running
/// buffers are used and the pass is a pure function of `params` and `clouds`.
pub fn forward(params: &ModelParams, clouds: &[&PointCloud], training: bool) -> Result<ForwardOutput> {
    if clouds.is_empty() {
        return Err(Error::Empty("forward needs at least one cloud".into()));
    }
    let mut offsets = Vec::with_capacity(clouds.len() + 1);
    offsets.push(0);
    for c in clouds {
        c.check()?;
        offsets.push(offsets.last().unwrap() + c.len());
    }
    let total = *offsets.last().unwrap();
    let mut x = Array2::<f64>::zeros((total, 3));
    for (row, p) in clouds.iter().flat_map(|c| c.points.iter()).enumerate() {
        x[[row, 0]] = p[0];
        x[[row, 1]] = p[1];
        x[[row, 2]] = p[2];
    }

    let p = |id: ParamId| params.param(id);
    let mut stats_mean: Vec<Array1<f64>> = Vec::new();
    let mut stats_var: Vec<Array1<f64>> = Vec::new();
    let mut norm_layer = |h: Array2<f64>, layer: usize, scale: ParamId, shift: ParamId| -> Result<NormCache> {
        let cache = if training {
            let (cache, mean, var) = norm_train(h, p(scale), p(shift));
            stats_mean.push(mean);
            stats_var.push(var);
            cache
        } else {
            norm_infer(h, p(scale), p(shift), &params.buffers[2 * layer], &params.buffers[2 * layer + 1])
        };
        check_finite(&cache.out, layer * 2 + 1)?;
        Ok(cache)
    };

    // encoder
    let mut h1 = x.dot(p(ParamId::Enc1W));
    add_bias(&mut h1, p(ParamId::Enc1B));
    check_finite(&h1, 0)?;
    let n1 = norm_layer(h1, 0, ParamId::Norm1Scale, ParamId::Norm1Shift)?;
    let a1 = leaky(&n1.out);

    let mut h2 = a1.dot(p(ParamId::Enc2W));
    add_bias(&mut h2, p(ParamId::Enc2B));
    check_finite(&h2, 2)?;
    let n2 = norm_layer(h2, 1, ParamId::Norm2Scale, ParamId::Norm2Shift)?;
    let a2 = leaky(&n2.out);

    // per-cloud max pool, ties to the lowest point index
    let c2 = a2.ncols();
    let nb = clouds.len();
    let mut global = Array2::<f64>::zeros((nb, c2));
    let mut argmax = Array2::<usize>::zeros((nb, c2));
    for b in 0..nb {
        let (r0, r1) = (offsets[b], offsets[b + 1]);
        let mut best: Vec<f64> = a2.row(r0).to_vec();
        let mut idx = vec![r0; c2];
        for r in r0 + 1..r1 {
            for (c, &v) in a2.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    idx[c] = r;
                }
            }
        }
        global.row_mut(b).assign(&Array1::from(best));
        argmax.row_mut(b).assign(&Array1::from(idx));
    }

    // decoder on [local | global]
    let w3 = p(ParamId::Dec1W);
    let (w3_local, w3_global) = (w3.slice(s![..c2, ..]), w3.slice(s![c2.., ..]));
    let mut h3 = a2.dot(&w3_local);
    let g3 = global.dot(&w3_global);
    for b in 0..nb {
        let gb = g3.row(b);
        for r in offsets[b]..offsets[b + 1] {
            let mut row = h3.row_mut(r);
            row += &gb;
        }
    }
    add_bias(&mut h3, p(ParamId::Dec1B));
    check_finite(&h3, 4)?;
    let n3 = norm_layer(h3, 2, ParamId::Norm3Scale, ParamId::Norm3Shift)?;
    let a3 = leaky(&n3.out);

    let mut logits = a3.dot(p(ParamId::Dec2W));
    add_bias(&mut logits, p(ParamId::Dec2B));
    check_finite(&logits, 6)?;

    // softmax over the points of each cloud, per joint
    let k = params.arch.joints;
    let mut weights = logits;
    for b in 0..nb {
        let mut block = weights.slice_mut(s![offsets[b]..offsets[b + 1], ..]);
        for mut col in block.columns_mut() {
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in col.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            col.mapv_inplace(|v| v / sum);
        }
    }

    let mut poses = Vec::with_capacity(nb);
    let mut maps = Vec::with_capacity(nb);
    for b in 0..nb {
        let (r0, r1) = (offsets[b], offsets[b + 1]);
        let wb = weights.slice(s![r0..r1, ..]);
        let xb = x.slice(s![r0..r1, ..]);
        let y = wb.t().dot(&xb); // K x 3
        let joints: Vec<Vec3> = (0..k).map(|j| [y[[j, 0]], y[[j, 1]], y[[j, 2]]]).collect();
        poses.push(Pose::new(joints));
        maps.push(WeightMap {
            weights: wb.to_owned(),
        });
    }
    if !poses.iter().all(Pose::is_finite) {
        return Err(Error::NonFinite("predicted pose (layer 7)".into()));
    }

    let running_update = training.then(|| RunningUpdate {
        mean: [stats_mean[0].clone(), stats_mean[1].clone(), stats_mean[2].clone()],
        var: [stats_var[0].clone(), stats_var[1].clone(), stats_var[2].clone()],
    });

    Ok(ForwardOutput {
        poses,
        weights: maps,
        cache: ForwardCache {
            training,
            offsets,
            x,
            norms: [n1, n2, n3],
            a1,
            a2,
            a3,
            argmax,
            global,
            weights,
            num_joints: k,
            num_params: params.num_scalars(),
        },
        running_update,
    })
}

/// Gradients of `sum_b <grad_wrt_pose[b], pose[b]>` with respect to every
/// trainable parameter; masked parameters get exact zeros.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_wrt_pose: &[Vec<Vec3>],
    mask: &ParamSubsetMask,
) -> Result<Gradients> {
    let nb = cache.batch_size();
    let k = cache.num_joints;
    if params.arch.joints != k || params.num_scalars() != cache.num_params {
        return Err(Error::Shape("cache was produced by a different architecture".into()));
    }
    if grad_wrt_pose.len() != nb || grad_wrt_pose.iter().any(|g| g.len() != k) {
        return Err(Error::Shape(format!(
            "pose gradient must be {nb} x {k} x 3 to match the forward batch"
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    if !mask.any() {
        return Ok(grads);
    }
    let p = |id: ParamId| params.param(id);
    let on = |id: ParamId| mask.is_trainable(id);
    let offsets = &cache.offsets;

    // weighted sum and softmax
    let mut dlogits = Array2::<f64>::zeros(cache.weights.dim());
    for b in 0..nb {
        let (r0, r1) = (offsets[b], offsets[b + 1]);
        let gy = Array2::from_shape_fn((3, k), |(c, j)| grad_wrt_pose[b][j][c]);
        let dw = cache.x.slice(s![r0..r1, ..]).dot(&gy); // N_b x K
        let wb = cache.weights.slice(s![r0..r1, ..]);
        let mut dl = dlogits.slice_mut(s![r0..r1, ..]);
        for j in 0..k {
            let inner: f64 = (0..r1 - r0).map(|i| wb[[i, j]] * dw[[i, j]]).sum();
            for i in 0..r1 - r0 {
                dl[[i, j]] = wb[[i, j]] * (dw[[i, j]] - inner);
            }
        }
    }

    // dec2
    if on(ParamId::Dec2W) {
        grads.tensors[ParamId::Dec2W as usize] = cache.a3.t().dot(&dlogits);
    }
    if on(ParamId::Dec2B) {
        grads.tensors[ParamId::Dec2B as usize] = dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let need_dec1 = [ParamId::Dec1W, ParamId::Dec1B, ParamId::Norm3Scale, ParamId::Norm3Shift]
        .iter()
        .any(|&id| on(id));
    let need_encoder = ParamId::ALL.iter().any(|&id| id.is_encoder() && on(id));
    if !need_dec1 && !need_encoder {
        return Ok(grads);
    }
    let mut da3 = dlogits.dot(&p(ParamId::Dec2W).t());
    leaky_backward(&mut da3, &cache.norms[2].out);
    let dh3 = norm_backward(
        da3,
        &cache.norms[2],
        p(ParamId::Norm3Scale),
        cache.training,
        &mut grads,
        (ParamId::Norm3Scale, ParamId::Norm3Shift),
        mask,
    );

    // dec1: split into per-point and per-cloud (global) parts
    let c2 = cache.a2.ncols();
    let mut dh3_sum = Array2::<f64>::zeros((nb, dh3.ncols()));
    for b in 0..nb {
        dh3_sum
            .row_mut(b)
            .assign(&dh3.slice(s![offsets[b]..offsets[b + 1], ..]).sum_axis(Axis(0)));
    }
    if on(ParamId::Dec1W) {
        let mut g = Array2::<f64>::zeros(p(ParamId::Dec1W).dim());
        g.slice_mut(s![..c2, ..]).assign(&cache.a2.t().dot(&dh3));
        g.slice_mut(s![c2.., ..]).assign(&cache.global.t().dot(&dh3_sum));
        grads.tensors[ParamId::Dec1W as usize] = g;
    }
    if on(ParamId::Dec1B) {
        grads.tensors[ParamId::Dec1B as usize] = dh3.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if !need_encoder {
        return Ok(grads);
    }
    let w3 = p(ParamId::Dec1W);
    let mut da2 = dh3.dot(&w3.slice(s![..c2, ..]).t());
    let dglobal = dh3_sum.dot(&w3.slice(s![c2.., ..]).t());
    for b in 0..nb {
        for c in 0..c2 {
            da2[[cache.argmax[[b, c]], c]] += dglobal[[b, c]];
        }
    }
    leaky_backward(&mut da2, &cache.norms[1].out);
    let dh2 = norm_backward(
        da2,
        &cache.norms[1],
        p(ParamId::Norm2Scale),
        cache.training,
        &mut grads,
        (ParamId::Norm2Scale, ParamId::Norm2Shift),
        mask,
    );
    if on(ParamId::Enc2W) {
        grads.tensors[ParamId::Enc2W as usize] = cache.a1.t().dot(&dh2);
    }
    if on(ParamId::Enc2B) {
        grads.tensors[ParamId::Enc2B as usize] = dh2.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let need_layer1 = [ParamId::Enc1W, ParamId::Enc1B, ParamId::Norm1Scale, ParamId::Norm1Shift]
        .iter()
        .any(|&id| on(id));
    if !need_layer1 {
        return Ok(grads);
    }
    let mut da1 = dh2.dot(&p(ParamId::Enc2W).t());
    leaky_backward(&mut da1, &cache.norms[0].out);
    let dh1 = norm_backward(
        da1,
        &cache.norms[0],
        p(ParamId::Norm1Scale),
        cache.training,
        &mut grads,
        (ParamId::Norm1Scale, ParamId::Norm1Shift),
        mask,
    );
    if on(ParamId::Enc1W) {
        grads.tensors[ParamId::Enc1W as usize] = cache.x.t().dot(&dh1);
    }
    if on(ParamId::Enc1B) {
        grads.tensors[ParamId::Enc1B as usize] = dh1.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    Ok(grads)
}

fn add_bias(m: &mut Array2<f64>, bias: &Array2<f64>) {
    let b = bias.row(0);
    for mut row in m.rows_mut() {
        row += &b;
    }
}

fn check_finite(m: &Array2<f64>, layer: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activations of layer {layer}")))
    }
}

fn leaky(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

fn leaky_backward(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &x| {
        if x <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
}

/// Training-mode normalization. Returns the cache plus the batch mean and the
/// unbiased batch variance for the running buffers.
fn norm_train(h: Array2<f64>, scale: &Array2<f64>, shift: &Array2<f64>) -> (NormCache, Array1<f64>, Array1<f64>) {
    let rows = h.nrows() as f64;
    let mean = h.mean_axis(Axis(0)).expect("non-empty batch");
    let mut xhat = h;
    for mut row in xhat.rows_mut() {
        row -= &mean;
    }
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(0)) / rows;
    let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    for mut row in xhat.rows_mut() {
        row *= &inv_std;
    }
    let out = affine(&xhat, scale, shift);
    let unbiased = if rows > 1.0 {
        &var * (rows / (rows - 1.0))
    } else {
        var.clone()
    };
    (NormCache { xhat, inv_std, out }, mean, unbiased)
}

fn norm_infer(
    h: Array2<f64>,
    scale: &Array2<f64>,
    shift: &Array2<f64>,
    running_mean: &Array2<f64>,
    running_var: &Array2<f64>,
) -> NormCache {
    let mean = running_mean.row(0);
    let inv_std = running_var.row(0).mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    let mut xhat = h;
    for mut row in xhat.rows_mut() {
        row -= &mean;
        row *= &inv_std;
    }
    let out = affine(&xhat, scale, shift);
    NormCache { xhat, inv_std, out }
}

fn affine(xhat: &Array2<f64>, scale: &Array2<f64>, shift: &Array2<f64>) -> Array2<f64> {
    let mut out = xhat.clone();
    let (g, b) = (scale.row(0), shift.row(0));
    for mut row in out.rows_mut() {
        row *= &g;
        row += &b;
    }
    out
}

/// Gradient through a normalization layer; writes scale/shift gradients into
/// `grads` where trainable and returns the gradient of the layer input.
fn norm_backward(
    dout: Array2<f64>,
    cache: &NormCache,
    scale: &Array2<f64>,
    training: bool,
    grads: &mut Gradients,
    ids: (ParamId, ParamId),
    mask: &ParamSubsetMask,
) -> Array2<f64> {
    if mask.is_trainable(ids.0) {
        grads.tensors[ids.0 as usize] = (&dout * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if mask.is_trainable(ids.1) {
        grads.tensors[ids.1 as usize] = dout.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let mut dxhat = dout;
    let g = scale.row(0);
    for mut row in dxhat.rows_mut() {
        row *= &g;
    }
    if training {
        let rows = dxhat.nrows() as f64;
        let mean_d = dxhat.sum_axis(Axis(0)) / rows;
        let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0)) / rows;
        let mut dh = dxhat;
        ndarray::Zip::from(dh.rows_mut())
            .and(cache.xhat.rows())
            .for_each(|mut d, xh| {
                for c in 0..d.len() {
                    d[c] = cache.inv_std[c] * (d[c] - mean_d[c] - xh[c] * mean_dx[c]);
                }
            });
        dh
    } else {
        for mut row in dxhat.rows_mut() {
            row *= &cache.inv_std;
        }
        dxhat
    }
}
