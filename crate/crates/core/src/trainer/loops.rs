//! The three training loops.
//!
//! Every random draw of epoch `e` comes from generators seeded by
//! `(seed, e, stream)`, so a run resumed from a checkpoint continues exactly
//! where the uninterrupted run would have been.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::augment::{augment, reverse_pose, AugmentConfig, AugmentationRecord};
use super::losses::{consistency_filter_baseline, consistency_loss, ema_update, ramp_weight_with, task_loss};
use super::TrainConfig;
use crate::anatomy::{Anatomy, FilterMode};
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::model::{
    adam_step, backward, forward, select_mask, Gradients, MaskMode, ModelParams, ModelState, PointCloud, Stage,
};
use crate::skeleton::{AnatomicalBounds, Pose, SkeletonSpec};

const STREAM_SOURCE_ORDER: u64 = 1;
const STREAM_SOURCE_AUG: u64 = 2;
const STREAM_TARGET_ORDER: u64 = 3;
const STREAM_STUDENT_AUG: u64 = 4;
const STREAM_TEACHER_AUG: u64 = 5;
const STREAM_EXTRA_AUG: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, epoch: usize, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ id))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub stage: Stage,
    /// 1-based number of the finished epoch.
    pub epoch: usize,
    /// Mean per-sample losses over the epoch.
    pub task: f64,
    pub anat: f64,
    pub con: f64,
    /// Fraction of target samples whose pseudo label passed the filter.
    pub accept_rate: f64,
    pub ramp: f64,
    pub wall_s: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage {
            Stage::Source => "source",
            Stage::Uda => "uda",
            Stage::Sfda => "sfda",
        };
        write!(
            f,
            "stage={stage} epoch={} task={:.6} anat={:.6} con={:.6} accept={:.4} ramp={:.6} wall_s={:.3}",
            self.epoch, self.task, self.anat, self.con, self.accept_rate, self.ramp, self.wall_s
        )
    }
}

#[derive(Default)]
struct Totals {
    task: f64,
    task_n: usize,
    anat: f64,
    con: f64,
    accepted: usize,
    target_n: usize,
}

impl Totals {
    fn log(&self, stage: Stage, epoch: usize, ramp: f64, start: Instant) -> EpochLog {
        let mean = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
        EpochLog {
            stage,
            epoch,
            task: mean(self.task, self.task_n),
            anat: mean(self.anat, self.target_n),
            con: mean(self.con, self.target_n),
            accept_rate: mean(self.accepted as f64, self.target_n),
            ramp,
            wall_s: start.elapsed().as_secs_f64(),
        }
    }
}

/// Index batches for one epoch. The dataset with the most batches sets the
/// epoch length and ends with a partial batch; the other one cycles.
fn batches(n: usize, batch: usize, steps: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if n.div_ceil(batch) == steps {
        order.chunks(batch).map(<[usize]>::to_vec).collect()
    } else {
        (0..steps)
            .map(|s| (0..batch).map(|j| order[(s * batch + j) % n]).collect())
            .collect()
    }
}

#[derive(Serialize)]
struct Replay<'a> {
    stage: Stage,
    epoch: usize,
    step: usize,
    seed: u64,
    source_indices: &'a [usize],
    target_indices: &'a [usize],
    error: String,
}

fn diverged(cfg: &TrainConfig, replay: Replay<'_>) -> Error {
    let path = cfg.replay_dir.as_ref().and_then(|dir| {
        let path = dir.join(format!("replay-epoch{}-step{}.json", replay.epoch, replay.step));
        let json = serde_json::to_vec_pretty(&replay).ok()?;
        std::fs::create_dir_all(dir).ok()?;
        std::fs::write(&path, json).ok()?;
        Some(path)
    });
    Error::Diverged {
        epoch: replay.epoch,
        step: replay.step,
        replay: path,
    }
}

fn scaled(grad: &[Vec3], s: f64) -> Vec<Vec3> {
    grad.iter().map(|&g| geom::scale(g, s)).collect()
}

fn add_into(acc: &mut [Vec3], g: &[Vec3]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for c in 0..3 {
            a[c] += b[c];
        }
    }
}

/// Supervised term on one source batch. Returns the summed per-sample loss.
fn source_terms(
    student: &mut ModelParams,
    samples: &[&Sample],
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut Gradients,
) -> Result<f64> {
    let mut clouds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let (c, rec) = augment(&s.cloud, aug, rng)?;
        labels.push(rec.apply_pose(&s.pose));
        clouds.push(c);
    }
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let out = forward(student, &refs, true)?;
    let inv_b = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut pose_grads = Vec::with_capacity(samples.len());
    for (pred, gt) in out.poses.iter().zip(&labels) {
        let l = task_loss(pred, gt)?;
        total += l.value;
        pose_grads.push(scaled(&l.grad, inv_b));
    }
    grads.add_assign(&backward(student, &out.cache, &pose_grads, &select_mask(MaskMode::All))?);
    if let Some(update) = &out.running_update {
        student.update_running(update);
    }
    Ok(total)
}

struct TargetStreams {
    student: ChaCha8Rng,
    teacher: ChaCha8Rng,
    extra: ChaCha8Rng,
}

struct TargetWeights {
    anat: f64,
    con: f64,
    anat_mask: MaskMode,
    con_mask: MaskMode,
}

/// Anatomical and consistency terms on one target batch.
#[allow(clippy::too_many_arguments)]
fn target_terms(
    student: &mut ModelParams,
    teacher: &ModelParams,
    clouds: &[&PointCloud],
    cfg: &TrainConfig,
    anatomy: &Anatomy<'_>,
    w: &TargetWeights,
    rngs: &mut TargetStreams,
    grads: &mut Gradients,
    totals: &mut Totals,
) -> Result<()> {
    let aug = cfg.augment_config();
    let mut s_views = Vec::with_capacity(clouds.len());
    let mut t_views = Vec::with_capacity(clouds.len());
    for c in clouds {
        s_views.push(augment(c, &aug, &mut rngs.student)?);
        t_views.push(augment(c, &aug, &mut rngs.teacher)?);
    }
    let s_refs: Vec<&PointCloud> = s_views.iter().map(|(c, _)| c).collect();
    let t_refs: Vec<&PointCloud> = t_views.iter().map(|(c, _)| c).collect();
    let s_out = forward(student, &s_refs, true)?;
    let t_out = forward(teacher, &t_refs, false)?;
    let unrotate = |poses: &[Pose], views: &[(PointCloud, AugmentationRecord)]| -> Vec<Pose> {
        poses.iter().zip(views).map(|(p, (_, r))| reverse_pose(p, r)).collect()
    };
    let s_canon = unrotate(&s_out.poses, &s_views);
    let t_canon = unrotate(&t_out.poses, &t_views);

    let accepted: Vec<bool> = if cfg.filter_mode == FilterMode::Consistency {
        let mut second = Vec::with_capacity(clouds.len());
        for c in clouds {
            second.push(augment(c, &aug, &mut rngs.extra)?);
        }
        let refs: Vec<&PointCloud> = second.iter().map(|(c, _)| c).collect();
        let s_pair: Vec<&PointCloud> = s_refs.iter().chain(&refs).copied().collect();
        let s_inf = forward(student, &s_pair, false)?;
        let t2 = forward(teacher, &refs, false)?;
        let n = clouds.len();
        let s_a = unrotate(&s_inf.poses[..n], &s_views);
        let s_b = unrotate(&s_inf.poses[n..], &second);
        let t_b = unrotate(&t2.poses, &second);
        (0..n)
            .map(|i| consistency_filter_baseline([&s_a[i], &s_b[i]], [&t_canon[i], &t_b[i]]))
            .collect::<Result<_>>()?
    } else {
        s_canon
            .iter()
            .zip(&t_canon)
            .map(|(s, t)| anatomy.filter_variant(t, s, cfg.filter_mode))
            .collect::<Result<_>>()?
    };

    let k = student.arch.joints;
    let inv_b = 1.0 / clouds.len() as f64;
    let mut anat_grads = Vec::with_capacity(clouds.len());
    let mut con_grads = Vec::with_capacity(clouds.len());
    for i in 0..clouds.len() {
        let rec = &s_views[i].1;
        if w.anat != 0.0 {
            let l = anatomy.anat_loss(&s_canon[i])?;
            totals.anat += l.value;
            anat_grads.push(rec.forward_gradient(&scaled(&l.grad, w.anat * inv_b)));
        } else {
            totals.anat += anatomy.plausibility_triple(&s_canon[i])?.anat();
            anat_grads.push(vec![[0.0; 3]; k]);
        }
        let l = consistency_loss(&s_canon[i], &t_canon[i], accepted[i])?;
        totals.con += l.value;
        con_grads.push(rec.forward_gradient(&scaled(&l.grad, w.con * inv_b)));
        totals.accepted += accepted[i] as usize;
        totals.target_n += 1;
    }

    if w.anat_mask == w.con_mask {
        for (c, a) in con_grads.iter_mut().zip(&anat_grads) {
            add_into(c, a);
        }
        grads.add_assign(&backward(student, &s_out.cache, &con_grads, &select_mask(w.con_mask))?);
    } else {
        grads.add_assign(&backward(student, &s_out.cache, &con_grads, &select_mask(w.con_mask))?);
        if w.anat != 0.0 {
            grads.add_assign(&backward(student, &s_out.cache, &anat_grads, &select_mask(w.anat_mask))?);
        }
    }
    if let Some(update) = &s_out.running_update {
        student.update_running(update);
    }
    Ok(())
}

fn check_state(state: &ModelState, cfg: &TrainConfig, spec: &SkeletonSpec, stage: Stage) -> Result<()> {
    let want = cfg.widths.arch(spec.num_joints());
    if state.arch() != want {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match the configured {:?}",
            state.arch(),
            want
        )));
    }
    if state.stage != stage {
        return Err(Error::Checkpoint(format!(
            "cannot resume a {:?} run from a {:?} checkpoint",
            stage, state.stage
        )));
    }
    Ok(())
}

fn finish_step(state: &mut ModelState, grads: &Gradients, cfg: &TrainConfig, update: MaskMode) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    adam_step(
        &mut state.student,
        grads,
        &mut state.optimizer,
        &cfg.adam_config(),
        &select_mask(update),
    );
    ema_update(&mut state.teacher, &state.student, cfg.ema_momentum)
}

/// Wraps numeric failures of one step into a divergence report.
fn guard(
    result: Result<f64>,
    cfg: &TrainConfig,
    stage: Stage,
    epoch: usize,
    step: usize,
    src: &[usize],
    tgt: &[usize],
) -> Result<()> {
    let err = match result {
        Ok(loss) if loss.is_finite() => return Ok(()),
        Ok(loss) => format!("loss {loss}"),
        Err(Error::NonFinite(what)) => format!("non-finite {what}"),
        Err(e) => return Err(e),
    };
    Err(diverged(
        cfg,
        Replay {
            stage,
            epoch,
            step,
            seed: cfg.seed,
            source_indices: src,
            target_indices: tgt,
            error: err,
        },
    ))
}

/// Supervised training on labeled source data. Passing a source-stage
/// checkpoint resumes it; the run stops once `cfg.epochs` epochs are done.
pub fn train_source(
    source: &[Sample],
    spec: &SkeletonSpec,
    cfg: &TrainConfig,
    resume: Option<ModelState>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<ModelState> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("source dataset is empty".into()));
    }
    for s in source {
        spec.check_pose(&s.pose)?;
    }
    let mut state = match resume {
        Some(st) => {
            check_state(&st, cfg, spec, Stage::Source)?;
            st
        }
        None => ModelState::init(cfg.widths.arch(spec.num_joints()), cfg.seed),
    };
    let aug = cfg.augment_config();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let start = Instant::now();
        let mut order_rng = stream(state.seed, epoch, STREAM_SOURCE_ORDER);
        let mut aug_rng = stream(state.seed, epoch, STREAM_SOURCE_AUG);
        let steps = source.len().div_ceil(cfg.batch_source);
        let mut totals = Totals::default();
        for (step, idx) in batches(source.len(), cfg.batch_source, steps, &mut order_rng)
            .into_iter()
            .enumerate()
        {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &source[i]).collect();
            let mut grads = Gradients::zeros_like(&state.student);
            let result = source_terms(&mut state.student, &batch, &aug, &mut aug_rng, &mut grads).and_then(|loss| {
                finish_step(&mut state, &grads, cfg, MaskMode::All)?;
                Ok(loss / batch.len() as f64)
            });
            let loss_sum = result.as_ref().map(|l| l * batch.len() as f64).unwrap_or(0.0);
            guard(result, cfg, Stage::Source, epoch, step, &idx, &[])?;
            totals.task += loss_sum;
            totals.task_n += batch.len();
        }
        state.epoch = epoch;
        log(&totals.log(Stage::Source, epoch, 0.0, start));
    }
    Ok(state)
}

/// Joint training on labeled source and unlabeled target data.
///
/// Starts from fresh weights (student and teacher differ) unless a UDA-stage
/// checkpoint is passed to resume.
pub fn adapt_uda(
    source: &[Sample],
    target: &[PointCloud],
    spec: &SkeletonSpec,
    bounds: &AnatomicalBounds,
    cfg: &TrainConfig,
    resume: Option<ModelState>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<ModelState> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("UDA needs non-empty source and target datasets".into()));
    }
    for s in source {
        spec.check_pose(&s.pose)?;
    }
    let anatomy = Anatomy::new(spec, bounds)?.with_penalty(cfg.penalty);
    let mut state = match resume {
        Some(st) => {
            check_state(&st, cfg, spec, Stage::Uda)?;
            st
        }
        None => ModelState {
            stage: Stage::Uda,
            ..ModelState::init(cfg.widths.arch(spec.num_joints()), cfg.seed)
        },
    };
    let aug = cfg.augment_config();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let start = Instant::now();
        let ramp = ramp_weight_with(cfg.ramp, epoch - 1, cfg.ramp_epochs);
        let weights = TargetWeights {
            anat: ramp * cfg.lambda1,
            con: ramp * cfg.lambda2,
            anat_mask: cfg.mask_mode,
            con_mask: MaskMode::All,
        };
        let steps = source
            .len()
            .div_ceil(cfg.batch_source)
            .max(target.len().div_ceil(cfg.batch_target));
        let src_batches = batches(
            source.len(),
            cfg.batch_source,
            steps,
            &mut stream(state.seed, epoch, STREAM_SOURCE_ORDER),
        );
        let tgt_batches = batches(
            target.len(),
            cfg.batch_target,
            steps,
            &mut stream(state.seed, epoch, STREAM_TARGET_ORDER),
        );
        let mut src_rng = stream(state.seed, epoch, STREAM_SOURCE_AUG);
        let mut rngs = TargetStreams {
            student: stream(state.seed, epoch, STREAM_STUDENT_AUG),
            teacher: stream(state.seed, epoch, STREAM_TEACHER_AUG),
            extra: stream(state.seed, epoch, STREAM_EXTRA_AUG),
        };
        let mut totals = Totals::default();
        for (step, (si, ti)) in src_batches.iter().zip(&tgt_batches).enumerate() {
            let src: Vec<&Sample> = si.iter().map(|&i| &source[i]).collect();
            let tgt: Vec<&PointCloud> = ti.iter().map(|&i| &target[i]).collect();
            let mut grads = Gradients::zeros_like(&state.student);
            let before = (totals.anat, totals.con, totals.target_n);
            let result = (|| {
                let task = source_terms(&mut state.student, &src, &aug, &mut src_rng, &mut grads)?;
                target_terms(
                    &mut state.student,
                    &state.teacher,
                    &tgt,
                    cfg,
                    &anatomy,
                    &weights,
                    &mut rngs,
                    &mut grads,
                    &mut totals,
                )?;
                let n_t = (totals.target_n - before.2) as f64;
                let loss = task / src.len() as f64
                    + weights.anat * (totals.anat - before.0) / n_t
                    + weights.con * (totals.con - before.1) / n_t;
                if loss.is_finite() {
                    finish_step(&mut state, &grads, cfg, MaskMode::All)?;
                }
                totals.task += task;
                totals.task_n += src.len();
                Ok(loss)
            })();
            guard(result, cfg, Stage::Uda, epoch, step, si, ti)?;
        }
        state.epoch = epoch;
        log(&totals.log(Stage::Uda, epoch, ramp, start));
    }
    Ok(state)
}

/// Source-free adaptation of a pretrained model on unlabeled target data.
///
/// A source or UDA checkpoint starts a new run with student and teacher both
/// set to its student weights; an SFDA checkpoint is resumed. With nothing
/// left to do the input is returned unchanged.
pub fn adapt_sfda(
    pretrained: &ModelState,
    target: &[PointCloud],
    spec: &SkeletonSpec,
    bounds: &AnatomicalBounds,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<ModelState> {
    cfg.validate()?;
    let want = cfg.widths.arch(spec.num_joints());
    if pretrained.arch() != want {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match the configured {:?}",
            pretrained.arch(),
            want
        )));
    }
    if target.is_empty() {
        return Err(Error::Empty("target dataset is empty".into()));
    }
    let anatomy = Anatomy::new(spec, bounds)?.with_penalty(cfg.penalty);
    let start_epoch = if pretrained.stage == Stage::Sfda {
        pretrained.epoch
    } else {
        0
    };
    if start_epoch >= cfg.epochs {
        return Ok(pretrained.clone());
    }
    let mut state = if pretrained.stage == Stage::Sfda {
        pretrained.clone()
    } else {
        ModelState {
            student: pretrained.student.clone(),
            teacher: pretrained.student.clone(),
            optimizer: crate::model::AdamState::new(&pretrained.student),
            epoch: 0,
            seed: cfg.seed,
            stage: Stage::Sfda,
        }
    };
    let weights = TargetWeights {
        anat: cfg.lambda1,
        con: cfg.lambda2,
        anat_mask: cfg.mask_mode,
        con_mask: cfg.mask_mode,
    };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let start = Instant::now();
        let steps = target.len().div_ceil(cfg.batch_target);
        let tgt_batches = batches(
            target.len(),
            cfg.batch_target,
            steps,
            &mut stream(state.seed, epoch, STREAM_TARGET_ORDER),
        );
        let mut rngs = TargetStreams {
            student: stream(state.seed, epoch, STREAM_STUDENT_AUG),
            teacher: stream(state.seed, epoch, STREAM_TEACHER_AUG),
            extra: stream(state.seed, epoch, STREAM_EXTRA_AUG),
        };
        let mut totals = Totals::default();
        for (step, ti) in tgt_batches.iter().enumerate() {
            let tgt: Vec<&PointCloud> = ti.iter().map(|&i| &target[i]).collect();
            let mut grads = Gradients::zeros_like(&state.student);
            let before = (totals.anat, totals.con);
            let result = (|| {
                target_terms(
                    &mut state.student,
                    &state.teacher,
                    &tgt,
                    cfg,
                    &anatomy,
                    &weights,
                    &mut rngs,
                    &mut grads,
                    &mut totals,
                )?;
                let n = tgt.len() as f64;
                let loss = weights.anat * (totals.anat - before.0) / n + weights.con * (totals.con - before.1) / n;
                if loss.is_finite() {
                    finish_step(&mut state, &grads, cfg, cfg.mask_mode)?;
                }
                Ok(loss)
            })();
            guard(result, cfg, Stage::Sfda, epoch, step, &[], ti)?;
        }
        state.epoch = epoch;
        log(&totals.log(Stage::Sfda, epoch, 1.0, start));
    }
    Ok(state)
}
