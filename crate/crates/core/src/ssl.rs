//! Self-distillation objectives and the moving-average teacher.
//!
//! Three terms: an image-level distillation loss over ordered
//! (teacher global, student view) pairs, a masked-patch prediction loss over
//! masked positions only, and a nearest-neighbor spread regularizer on the
//! student's class embedding. The teacher is never updated by gradient;
//! [`ema_update`] moves it toward the student after each optimizer step, and
//! its output distributions are centered by a running mean that the loss
//! reads before it is updated.

use crate::augment::CropSet;
use crate::encoder::{BoundEncoder, EncoderConfig, EncoderParams, HeadKind};
use crate::error::{Error, Result};
use crate::numerics::{r, CosineSchedule, LinearRamp, Real, Tape, Tensor, Var};

/// Floor inside the spread regularizer's logarithm.
pub const KOLEO_EPS: f64 = 1e-8;
/// Epsilon for l2-normalizing embeddings before the spread regularizer.
pub const L2_EPS: f64 = 1e-8;
/// Student softmax temperature, fixed for the whole run.
pub const STUDENT_TEMP: f64 = 0.1;
/// Teacher temperature ramps linearly from start to end over the first
/// tenth of training, then stays at the end value.
pub const TEACHER_TEMP_START: f64 = 0.04;
pub const TEACHER_TEMP_END: f64 = 0.07;
/// Momentum of the running center over teacher logits.
pub const CENTER_MOMENTUM: f64 = 0.9;
/// Teacher EMA momentum follows a cosine from start to 1.0 over the run.
pub const EMA_MOMENTUM_START: f64 = 0.992;

/// Weights of the three loss terms in the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dino: f32,
    pub ibot: f32,
    pub koleo: f32,
}

impl LossWeights {
    pub fn desk_default() -> LossWeights {
        LossWeights { dino: 1.0, ibot: 1.0, koleo: 0.1 }
    }

    /// Masked patch prediction off. The weight is exactly zero, the patch
    /// heads are never evaluated, and masks are ignored, so the total loss
    /// does not depend on them.
    pub fn no_mim() -> LossWeights {
        LossWeights { dino: 1.0, ibot: 0.0, koleo: 0.1 }
    }
}

/// Loss values of one step, recorded after the weighted total has been
/// checked against its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f32,
    pub dino: f32,
    pub ibot: f32,
    pub koleo: f32,
    pub teacher_temp: f32,
    /// Mean entropy of the teacher's image distributions, in nats. The
    /// collapse alarm watches this value.
    pub teacher_entropy: f32,
}

/// Teacher-side values a step needs after the loss graph is built: raw image
/// logits per global view, and the masked-position patch logits when masked
/// prediction ran. Both feed the center updates.
pub struct TeacherLogits<T: Real> {
    /// One [B, K] tensor per global view.
    pub image: Vec<Tensor<T>>,
    /// [M, K] rows gathered at masked positions across all global views.
    pub masked_patch: Option<Tensor<T>>,
}

/// The three loss nodes and the weighted total on one tape.
pub struct ComposedLoss<T: Real> {
    pub total: Var,
    pub dino: Var,
    pub ibot: Var,
    pub koleo: Var,
    pub teacher: TeacherLogits<T>,
}

/// Centered, temperature-sharpened teacher rows as probabilities.
pub fn teacher_probs<T: Real>(logits: &Tensor<T>, center: &[T], tau: T) -> Result<Tensor<T>> {
    let (rows, k) = logits.dims2()?;
    if center.len() != k {
        return Err(Error::Shape(format!(
            "center length {} does not match prototype count {k}",
            center.len()
        )));
    }
    let mut out = Vec::with_capacity(rows * k);
    for row in logits.data().chunks_exact(k) {
        let shifted: Vec<T> = row.iter().zip(center).map(|(&z, &c)| z - c).collect();
        out.extend(crate::numerics::softmax_temp(&shifted, tau)?);
    }
    Tensor::from_vec(&[rows, k], out)
}

/// Mean Shannon entropy over probability rows, in nats.
pub fn mean_row_entropy<T: Real>(probs: &Tensor<T>) -> Result<T> {
    let (rows, k) = probs.dims2()?;
    let mut s = T::zero();
    for row in probs.data().chunks_exact(k) {
        s += crate::numerics::entropy(row);
    }
    Ok(s / r::<T>(rows as f64))
}

/// Image-level distillation: mean over ordered pairs of one teacher global
/// view against every other student view of the soft cross-entropy between
/// the centered teacher distribution and the student's tempered softmax.
/// Student views are ordered globals first, so view `g` of the student is
/// the same crop the teacher saw as global `g` and is excluded from its own
/// pair.
pub fn dino_image_loss<T: Real>(
    tape: &mut Tape<T>,
    teacher_global_logits: &[Tensor<T>],
    student_view_logits: &[Var],
    image_center: &[T],
    tau_teacher: T,
    tau_student: T,
) -> Result<Var> {
    let globals = teacher_global_logits.len();
    if globals < 2 {
        return Err(Error::Shape(format!(
            "image distillation needs at least two global views, got {globals}"
        )));
    }
    let views = student_view_logits.len();
    if views < globals {
        return Err(Error::Shape(format!(
            "student views {views} fewer than teacher globals {globals}"
        )));
    }
    let (batch, k) = teacher_global_logits[0].dims2()?;
    for t in teacher_global_logits {
        if t.dims2()? != (batch, k) {
            return Err(Error::Shape("teacher view logit shapes differ".into()));
        }
    }
    for &v in student_view_logits {
        if tape.value(v).dims2()? != (batch, k) {
            return Err(Error::Shape("student view logit shapes differ from teacher".into()));
        }
    }
    let mut terms = Vec::new();
    for (g, logits) in teacher_global_logits.iter().enumerate() {
        let probs = teacher_probs(logits, image_center, tau_teacher)?;
        for (v, &z) in student_view_logits.iter().enumerate() {
            if v == g {
                continue;
            }
            terms.push(tape.soft_ce(&probs, z, tau_student));
        }
    }
    let w = r::<T>(1.0 / terms.len() as f64);
    let weighted: Vec<(Var, T)> = terms.into_iter().map(|t| (t, w)).collect();
    Ok(tape.affine_combine(&weighted))
}

/// Masked-patch prediction: soft cross-entropy between the teacher's
/// centered patch distribution and the student's, averaged over masked
/// positions only. Returns the raw teacher logit rows gathered at those
/// positions so the caller can update the patch center, or a constant zero
/// and no rows when nothing is masked.
pub fn ibot_patch_loss<T: Real>(
    tape: &mut Tape<T>,
    teacher_patch_logits: &[Tensor<T>],
    student_patch_logits: &[Var],
    masks: &[Vec<bool>],
    patch_center: &[T],
    tau_teacher: T,
    tau_student: T,
) -> Result<(Var, Option<Tensor<T>>)> {
    if teacher_patch_logits.len() != masks.len() || student_patch_logits.len() != masks.len() {
        return Err(Error::Shape(format!(
            "masked prediction views disagree: {} teacher, {} student, {} masks",
            teacher_patch_logits.len(),
            student_patch_logits.len(),
            masks.len()
        )));
    }
    let k = patch_center.len();
    let mut gathered = Vec::new();
    let mut student_rows = Vec::new();
    for ((teacher, &student), mask) in
        teacher_patch_logits.iter().zip(student_patch_logits).zip(masks)
    {
        let (rows, kt) = teacher.dims2()?;
        if kt != k {
            return Err(Error::Shape(format!(
                "teacher patch logits have {kt} prototypes, center has {k}"
            )));
        }
        if tape.value(student).dims2()? != (rows, k) {
            return Err(Error::Shape("student patch logits differ from teacher in shape".into()));
        }
        if mask.len() != rows {
            return Err(Error::Shape(format!(
                "mask length {} does not match {rows} patch positions",
                mask.len()
            )));
        }
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        if idx.is_empty() {
            continue;
        }
        for &i in &idx {
            gathered.extend_from_slice(&teacher.data()[i * k..(i + 1) * k]);
        }
        student_rows.push(tape.select_rows(student, idx));
    }
    if gathered.is_empty() {
        return Ok((tape.scalar_const(T::zero()), None));
    }
    let teacher_rows = Tensor::from_vec(&[gathered.len() / k, k], gathered)?;
    let probs = teacher_probs(&teacher_rows, patch_center, tau_teacher)?;
    let student_all = tape.concat0(&student_rows);
    let loss = tape.soft_ce(&probs, student_all, tau_student);
    Ok((loss, Some(teacher_rows)))
}

/// Spread regularizer on embedding rows: rows are l2-normalized, then the
/// negated mean log nearest-neighbor distance is taken. More negative means
/// better spread; it is minimized alongside the distillation terms.
pub fn koleo_loss<T: Real>(tape: &mut Tape<T>, rows: Var) -> Result<Var> {
    let (n, _) = tape.value(rows).dims2()?;
    if n < 2 {
        return Err(Error::Shape(format!(
            "spread regularizer needs at least two rows, got {n}"
        )));
    }
    let unit = tape.l2norm_rows(rows, r(L2_EPS));
    Ok(tape.koleo(unit, r(KOLEO_EPS)))
}

/// Move a running center toward the batch mean of fresh teacher logit rows:
/// c <- m c + (1 - m) mean(rows). No rows is a no-op.
pub fn update_center<T: Real>(
    center: &mut [T],
    logit_rows: &[&Tensor<T>],
    momentum: T,
) -> Result<()> {
    if momentum < T::zero() || momentum > T::one() {
        return Err(Error::Numeric(format!(
            "center momentum {} outside [0, 1]",
            momentum.as_f64()
        )));
    }
    let k = center.len();
    let mut sum = vec![T::zero(); k];
    let mut rows = 0usize;
    for t in logit_rows {
        let (m, kt) = t.dims2()?;
        if kt != k {
            return Err(Error::Shape(format!(
                "center update rows have {kt} prototypes, center has {k}"
            )));
        }
        for row in t.data().chunks_exact(k) {
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        rows += m;
    }
    if rows == 0 {
        return Ok(());
    }
    let inv = r::<T>(1.0 / rows as f64);
    for (c, s) in center.iter_mut().zip(&sum) {
        *c = momentum * *c + (T::one() - momentum) * *s * inv;
    }
    Ok(())
}

/// Move every teacher parameter toward the student: t <- m t + (1 - m) s.
/// The inventories must agree exactly in names and shapes.
pub fn ema_update<T: Real>(
    teacher: &mut EncoderParams<T>,
    student: &EncoderParams<T>,
    momentum: T,
) -> Result<()> {
    if momentum < T::zero() || momentum > T::one() {
        return Err(Error::Numeric(format!(
            "EMA momentum {} outside [0, 1]",
            momentum.as_f64()
        )));
    }
    let teacher_names: Vec<String> = teacher.iter().map(|(n, _)| n.clone()).collect();
    let student_names: Vec<&String> = student.iter().map(|(n, _)| n).collect();
    if teacher_names.len() != student_names.len()
        || !teacher_names.iter().zip(&student_names).all(|(a, b)| &a == b)
    {
        return Err(Error::Shape(
            "teacher and student parameter inventories differ".into(),
        ));
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name);
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?} in teacher but {:?} in student",
                t.shape(),
                s.shape()
            )));
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (T::one() - momentum) * sv;
        }
    }
    Ok(())
}

/// Build the full objective on one tape. `masks` carries one flat [B * N]
/// flag vector per global view; when the patch weight is exactly zero the
/// masks are ignored outright, the student sees unmasked globals, and the
/// patch heads are never evaluated, so the result is independent of them.
/// The spread regularizer runs on the student's class embedding of the
/// first global view, from the same forward the distillation terms use.
#[allow(clippy::too_many_arguments)]
pub fn composed_loss<T: Real>(
    tape: &mut Tape<T>,
    student: &BoundEncoder,
    teacher: &BoundEncoder,
    crops: &[CropSet],
    masks: &[Vec<bool>],
    image_center: &[T],
    patch_center: &[T],
    tau_teacher: T,
    tau_student: T,
    weights: &LossWeights,
) -> Result<ComposedLoss<T>> {
    let batch = crops.len();
    if batch < 2 {
        return Err(Error::Shape(format!(
            "composed loss needs a batch of at least 2, got {batch}"
        )));
    }
    let globals = crops[0].globals.len();
    let locals = crops[0].locals.len();
    for set in crops {
        if set.globals.len() != globals || set.locals.len() != locals {
            return Err(Error::Shape("crop sets disagree on view counts".into()));
        }
    }
    let use_mim = weights.ibot != 0.0;
    if use_mim && masks.len() != globals {
        return Err(Error::Shape(format!(
            "need one mask vector per global view: {} masks, {globals} globals",
            masks.len()
        )));
    }

    let mut teacher_image = Vec::with_capacity(globals);
    let mut teacher_patch = Vec::with_capacity(globals);
    let mut student_image = Vec::new();
    let mut student_patch = Vec::with_capacity(globals);
    let mut first_global_cls = None;
    for g in 0..globals {
        let views: Vec<&crate::image::GrayImage> =
            crops.iter().map(|set| &set.globals[g]).collect();
        let t_toks = teacher.encode_batch(tape, &views, None, false)?;
        let t_logits = teacher.head(tape, t_toks.cls, HeadKind::Image);
        teacher_image.push(tape.value(t_logits).clone());

        let mask = if use_mim { Some(masks[g].as_slice()) } else { None };
        let s_toks = student.encode_batch(tape, &views, mask, false)?;
        if g == 0 {
            first_global_cls = Some(s_toks.cls);
        }
        student_image.push(student.head(tape, s_toks.cls, HeadKind::Image));

        if use_mim {
            let (_, n, d) = tape.value(t_toks.patches).dims3()?;
            let t_rows = tape.reshape(t_toks.patches, &[batch * n, d]);
            let t_patch = teacher.head(tape, t_rows, HeadKind::Patch);
            teacher_patch.push(tape.value(t_patch).clone());
            let s_rows = tape.reshape(s_toks.patches, &[batch * n, d]);
            student_patch.push(student.head(tape, s_rows, HeadKind::Patch));
        }
    }
    for l in 0..locals {
        let views: Vec<&crate::image::GrayImage> =
            crops.iter().map(|set| &set.locals[l]).collect();
        let s_toks = student.encode_batch(tape, &views, None, false)?;
        student_image.push(student.head(tape, s_toks.cls, HeadKind::Image));
    }

    let dino = dino_image_loss(
        tape,
        &teacher_image,
        &student_image,
        image_center,
        tau_teacher,
        tau_student,
    )?;
    let (ibot, masked_patch) = if use_mim {
        ibot_patch_loss(
            tape,
            &teacher_patch,
            &student_patch,
            masks,
            patch_center,
            tau_teacher,
            tau_student,
        )?
    } else {
        (tape.scalar_const(T::zero()), None)
    };
    let koleo = koleo_loss(tape, first_global_cls.expect("at least two globals"))?;
    let total = tape.affine_combine(&[
        (dino, r(weights.dino as f64)),
        (ibot, r(weights.ibot as f64)),
        (koleo, r(weights.koleo as f64)),
    ]);
    Ok(ComposedLoss {
        total,
        dino,
        ibot,
        koleo,
        teacher: TeacherLogits { image: teacher_image, masked_patch },
    })
}

/// The teacher branch of a run: EMA parameters, running centers, and the
/// temperature and momentum schedules. Step indices are 0-based.
pub struct TeacherState {
    pub params: EncoderParams<f32>,
    pub image_center: Vec<f32>,
    pub patch_center: Vec<f32>,
    pub center_momentum: f32,
    pub teacher_temp: LinearRamp,
    pub student_temp: f32,
    pub ema_momentum: CosineSchedule,
    /// Set once the image center has absorbed a batch. Until then the first
    /// loss call jumps the center to its batch's teacher mean, so early
    /// losses are measured against a centered teacher instead of tracking
    /// the center's convergence from zero. Restored as true on resumption.
    pub image_center_warm: bool,
    /// Same for the patch center; stays false until a batch has at least
    /// one masked position (never, under the no-MIM ablation).
    pub patch_center_warm: bool,
}

impl TeacherState {
    /// Start a teacher as a copy of the student. The temperature ramp covers
    /// the first tenth of training; the EMA momentum runs its cosine over
    /// all of it.
    pub fn new(student: &EncoderParams<f32>, cfg: &EncoderConfig, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        student.check_inventory(cfg)?;
        Ok(TeacherState {
            params: student.clone(),
            image_center: vec![0.0; cfg.prototypes],
            patch_center: vec![0.0; cfg.prototypes],
            center_momentum: CENTER_MOMENTUM as f32,
            teacher_temp: LinearRamp::new(
                TEACHER_TEMP_START,
                TEACHER_TEMP_END,
                (total_steps / 10).max(1),
            ),
            student_temp: STUDENT_TEMP as f32,
            ema_momentum: CosineSchedule::new(EMA_MOMENTUM_START, 1.0, 0, total_steps)?,
            image_center_warm: false,
            patch_center_warm: false,
        })
    }

    /// Jump not-yet-warm centers to the current batch's teacher means. Runs
    /// one throwaway forward; a frozen center (momentum 1) never absorbs
    /// data, so it is left at its initial value.
    fn warm_start_centers(
        &mut self,
        student: &BoundEncoder,
        crops: &[CropSet],
        masks: &[Vec<bool>],
        tau_teacher: f32,
        weights: &LossWeights,
    ) -> Result<()> {
        let want_patch = weights.ibot != 0.0 && !self.patch_center_warm;
        if self.center_momentum >= 1.0 || (self.image_center_warm && !want_patch) {
            return Ok(());
        }
        let mut scratch = Tape::<f32>::new();
        // The student branch's outputs are unused; binding the teacher's
        // parameters on both sides avoids needing the student's.
        let frozen = BoundEncoder::bind(&mut scratch, &self.params, student.config(), false)?;
        let harvested = composed_loss(
            &mut scratch,
            &frozen,
            &frozen,
            crops,
            masks,
            &self.image_center,
            &self.patch_center,
            tau_teacher,
            self.student_temp,
            weights,
        )?;
        if !self.image_center_warm {
            let refs: Vec<&Tensor<f32>> = harvested.teacher.image.iter().collect();
            update_center(&mut self.image_center, &refs, 0.0)?;
            self.image_center_warm = true;
        }
        if let Some(rows) = &harvested.teacher.masked_patch {
            if !self.patch_center_warm {
                update_center(&mut self.patch_center, &[rows], 0.0)?;
                self.patch_center_warm = true;
            }
        }
        Ok(())
    }

    /// Build the loss for one step against an already-bound student, using
    /// the centers as they stand, then fold this step's teacher logits into
    /// them. Verifies that the weighted total matches its parts before
    /// reporting the breakdown.
    pub fn total_loss(
        &mut self,
        tape: &mut Tape<f32>,
        student: &BoundEncoder,
        crops: &[CropSet],
        masks: &[Vec<bool>],
        step: u64,
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        let tau_teacher = self.teacher_temp.at(step) as f32;
        self.warm_start_centers(student, crops, masks, tau_teacher, weights)?;
        let teacher = BoundEncoder::bind(tape, &self.params, student.config(), false)?;
        let composed = composed_loss(
            tape,
            student,
            &teacher,
            crops,
            masks,
            &self.image_center,
            &self.patch_center,
            tau_teacher,
            self.student_temp,
            weights,
        )?;
        let total = tape.value(composed.total).item();
        let dino = tape.value(composed.dino).item();
        let ibot = tape.value(composed.ibot).item();
        let koleo = tape.value(composed.koleo).item();
        let recombined = weights.dino * dino + weights.ibot * ibot + weights.koleo * koleo;
        if !total.is_finite() || (total - recombined).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "loss total {total} diverges from weighted parts {recombined}"
            )));
        }
        let mut entropy_sum = 0.0;
        for logits in &composed.teacher.image {
            let probs = teacher_probs(logits, &self.image_center, tau_teacher)?;
            entropy_sum += mean_row_entropy(&probs)?;
        }
        let teacher_entropy = entropy_sum / composed.teacher.image.len() as f32;

        let image_refs: Vec<&Tensor<f32>> = composed.teacher.image.iter().collect();
        update_center(&mut self.image_center, &image_refs, self.center_momentum)?;
        if let Some(rows) = &composed.teacher.masked_patch {
            update_center(&mut self.patch_center, &[rows], self.center_momentum)?;
        }
        Ok((
            composed.total,
            LossBreakdown {
                total,
                dino,
                ibot,
                koleo,
                teacher_temp: tau_teacher,
                teacher_entropy,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{sample_multicrop, sample_mask, CropPolicy, MaskPolicy};
    use crate::image::GrayImage;
    use crate::numerics::{
        adamw_step, cross_entropy, softmax_temp, AdamHyper, AdamState, Tape,
    };
    use crate::rng;
    use crate::synthcxr::{self, Findings, ScaleClass};
    use std::collections::BTreeMap;

    fn logits_tensor<T: Real>(rows: &[&[f64]]) -> Tensor<T> {
        let k = rows[0].len();
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().map(|&v| super::r(v))).collect();
        Tensor::from_vec(&[rows.len(), k], data).unwrap()
    }

    #[test]
    fn dino_uniform_teacher_and_student_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let teacher = vec![
            logits_tensor::<f64>(&[&[0.0, 0.0]]),
            logits_tensor::<f64>(&[&[0.0, 0.0]]),
        ];
        let z = tape.constant(logits_tensor::<f64>(&[&[0.0, 0.0]]));
        let loss = dino_image_loss(&mut tape, &teacher, &[z, z], &[0.0, 0.0], 0.04, 0.1).unwrap();
        assert!((tape.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dino_averages_ordered_pairs() {
        // Two globals and one local make 2 * (3 - 1) = 4 ordered pairs.
        let t0 = [0.3, -0.1, 0.8];
        let t1 = [-0.4, 0.2, 0.1];
        let views = [[0.5, 0.0, -0.2], [0.1, 0.9, -0.3], [-0.6, 0.2, 0.4]];
        let center = [0.05, -0.1, 0.2];
        let (tau_t, tau_s) = (0.05, 0.1);

        let mut tape = Tape::<f64>::new();
        let teacher = vec![logits_tensor::<f64>(&[&t0]), logits_tensor::<f64>(&[&t1])];
        let students: Vec<Var> = views
            .iter()
            .map(|v| tape.constant(logits_tensor::<f64>(&[v])))
            .collect();
        let loss =
            dino_image_loss(&mut tape, &teacher, &students, &center, tau_t, tau_s).unwrap();

        let mut expected = 0.0;
        let mut pairs = 0.0;
        for (g, t) in [t0, t1].iter().enumerate() {
            let shifted: Vec<f64> = t.iter().zip(&center).map(|(z, c)| z - c).collect();
            let p = softmax_temp(&shifted, tau_t).unwrap();
            for (v, z) in views.iter().enumerate() {
                if v == g {
                    continue;
                }
                let q = softmax_temp(z, tau_s).unwrap();
                expected += cross_entropy(&p, &q).unwrap();
                pairs += 1.0;
            }
        }
        expected /= pairs;
        assert_eq!(pairs, 4.0);
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn dino_attains_teacher_entropy_when_student_matches() {
        // With z_v = tau_s * ln p the student softmax reproduces the teacher
        // distribution exactly, so every pair's cross-entropy is H(p).
        let mut stream = rng::stream(3, "ssl/test", 0, 0);
        let logits: Vec<f64> = (0..8).map(|_| rand::Rng::random_range(&mut stream, -1.0..1.0)).collect();
        let t = logits_tensor::<f64>(&[&logits[..4], &logits[4..]]);
        let center = vec![0.0; 4];
        let tau_t = 0.07;
        let tau_s = 0.1;
        let probs = teacher_probs(&t, &center, tau_t).unwrap();
        let matched: Vec<f64> = probs.data().iter().map(|p| tau_s * p.ln()).collect();

        let mut tape = Tape::<f64>::new();
        let teacher = vec![t.clone(), t.clone()];
        let z = tape.constant(Tensor::from_vec(&[2, 4], matched).unwrap());
        let loss = dino_image_loss(&mut tape, &teacher, &[z, z], &center, tau_t, tau_s).unwrap();
        let bound = mean_row_entropy(&probs).unwrap();
        assert!((tape.value(loss).item() - bound).abs() < 1e-9);

        // Any other student stays at or above the entropy bound.
        let mut tape = Tape::<f64>::new();
        let other: Vec<f64> = (0..8).map(|_| rand::Rng::random_range(&mut stream, -2.0..2.0)).collect();
        let z = tape.constant(Tensor::from_vec(&[2, 4], other).unwrap());
        let loss = dino_image_loss(&mut tape, &teacher, &[z, z], &center, tau_t, tau_s).unwrap();
        assert!(tape.value(loss).item() + 1e-9 >= bound);
    }

    #[test]
    fn dino_rejects_fewer_than_two_globals() {
        let mut tape = Tape::<f64>::new();
        let t = vec![logits_tensor::<f64>(&[&[0.0, 0.0]])];
        let z = tape.constant(logits_tensor::<f64>(&[&[0.0, 0.0]]));
        assert!(dino_image_loss(&mut tape, &t, &[z, z], &[0.0, 0.0], 0.04, 0.1).is_err());
    }

    #[test]
    fn ibot_single_uniform_position_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let teacher = vec![logits_tensor::<f64>(&[&[0.0; 4], &[3.0, -1.0, 0.5, 2.0]])];
        let z = tape.constant(logits_tensor::<f64>(&[&[0.0; 4], &[9.0, 9.0, 9.0, 9.0]]));
        let masks = vec![vec![true, false]];
        let (loss, rows) =
            ibot_patch_loss(&mut tape, &teacher, &[z], &masks, &[0.0; 4], 0.04, 0.1).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
        let rows = rows.unwrap();
        assert_eq!(rows.shape(), &[1, 4]);
        assert_eq!(rows.data(), &[0.0; 4]);
    }

    #[test]
    fn ibot_without_masked_positions_is_zero() {
        let mut tape = Tape::<f64>::new();
        let teacher = vec![logits_tensor::<f64>(&[&[1.0, 2.0], &[0.0, 1.0]])];
        let z = tape.constant(logits_tensor::<f64>(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let masks = vec![vec![false, false]];
        let (loss, rows) =
            ibot_patch_loss(&mut tape, &teacher, &[z], &masks, &[0.0, 0.0], 0.04, 0.1).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        assert!(rows.is_none());
    }

    #[test]
    fn ibot_rejects_misaligned_masks() {
        let mut tape = Tape::<f64>::new();
        let teacher = vec![logits_tensor::<f64>(&[&[1.0, 2.0], &[0.0, 1.0]])];
        let z = tape.constant(logits_tensor::<f64>(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let short = vec![vec![true]];
        assert!(
            ibot_patch_loss(&mut tape, &teacher, &[z], &short, &[0.0, 0.0], 0.04, 0.1).is_err()
        );
        let extra_view = vec![vec![true, false], vec![true, false]];
        assert!(
            ibot_patch_loss(&mut tape, &teacher, &[z], &extra_view, &[0.0, 0.0], 0.04, 0.1)
                .is_err()
        );
    }

    #[test]
    fn koleo_two_orthonormal_rows() {
        // Both rows have nearest-neighbor distance sqrt(2), so the loss is
        // -ln sqrt(2).
        let mut tape = Tape::<f64>::new();
        let rows = tape.constant(logits_tensor::<f64>(&[&[3.0, 0.0], &[0.0, 5.0]]));
        let loss = koleo_loss(&mut tape, rows).unwrap();
        assert!((tape.value(loss).item() + 0.5 * 2.0f64.ln()).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let single = tape.constant(logits_tensor::<f64>(&[&[1.0, 0.0]]));
        assert!(koleo_loss(&mut tape, single).is_err());
    }

    #[test]
    fn center_update_worked_examples() {
        let mut center = vec![0.0f64];
        let rows = logits_tensor::<f64>(&[&[2.0]]);
        update_center(&mut center, &[&rows], 0.9).unwrap();
        assert!((center[0] - 0.2).abs() < 1e-12);

        let mut center = vec![0.0f64];
        let rows = logits_tensor::<f64>(&[&[0.0], &[2.0]]);
        update_center(&mut center, &[&rows], 0.9).unwrap();
        assert!((center[0] - 0.1).abs() < 1e-12);

        // Momentum 1 freezes the center; momentum 0 jumps to the batch mean.
        let mut center = vec![0.5f64];
        update_center(&mut center, &[&rows], 1.0).unwrap();
        assert_eq!(center[0], 0.5);
        update_center(&mut center, &[&rows], 0.0).unwrap();
        assert!((center[0] - 1.0).abs() < 1e-12);

        // No rows at all leaves the center untouched.
        let mut center = vec![0.7f64];
        update_center(&mut center, &[], 0.9).unwrap();
        assert_eq!(center[0], 0.7);
        assert!(update_center(&mut center, &[&rows], 1.5).is_err());
    }

    fn tiny_cfg() -> EncoderConfig {
        // Side 32 is the smallest the scene renderer accepts.
        EncoderConfig {
            image_side: 32,
            patch_side: 8,
            dim: 12,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            prototypes: 8,
            bottleneck: 6,
            share_heads: false,
        }
    }

    #[test]
    fn ema_moves_teacher_toward_student() {
        let cfg = tiny_cfg();
        let student = EncoderParams::<f32>::init(&cfg, 1).unwrap();
        let mut teacher = EncoderParams::<f32>::init(&cfg, 2).unwrap();
        let before: f32 = teacher.get("cls_token").data()[0];
        let target: f32 = student.get("cls_token").data()[0];
        ema_update(&mut teacher, &student, 0.9).unwrap();
        let after: f32 = teacher.get("cls_token").data()[0];
        assert!((after - (0.9 * before + 0.1 * target)).abs() < 1e-7);

        // Each update contracts the worst-case gap by the momentum factor.
        let max_gap = |t: &EncoderParams<f32>| {
            let mut gap = 0.0f32;
            for (name, tt) in t.iter() {
                for (tv, sv) in tt.data().iter().zip(student.get(name).data()) {
                    gap = gap.max((tv - sv).abs());
                }
            }
            gap
        };
        let gap = max_gap(&teacher);
        ema_update(&mut teacher, &student, 0.9).unwrap();
        assert!(max_gap(&teacher) <= 0.9 * gap + 1e-6);

        // Momentum 1 leaves the teacher fixed.
        let frozen = teacher.get("cls_token").data().to_vec();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.get("cls_token").data(), &frozen[..]);

        let mut other_cfg = cfg;
        other_cfg.depth = 2;
        let mut wrong = EncoderParams::<f32>::init(&other_cfg, 3).unwrap();
        assert!(ema_update(&mut wrong, &student, 0.9).is_err());
        assert!(ema_update(&mut teacher, &student, -0.1).is_err());
    }

    fn toy_batch(cfg: &EncoderConfig, seed: u64) -> (Vec<CropSet>, Vec<Vec<bool>>) {
        let mut policy = CropPolicy::for_resolution(cfg.image_side, cfg.patch_side);
        policy.local_count = 2;
        let mask_policy = MaskPolicy::desk_default();
        let n = (cfg.image_side / cfg.patch_side).pow(2);
        let mut crops = Vec::new();
        let mut masks = vec![Vec::new(), Vec::new()];
        for b in 0..2u64 {
            let img = toy_images(cfg.image_side)[b as usize].clone();
            crops.push(
                sample_multicrop(&img, &policy, &mut rng::stream(seed, "ssl/crop", 0, b)).unwrap(),
            );
            for (view, mask) in masks.iter_mut().enumerate() {
                mask.extend(sample_mask(
                    n,
                    &mask_policy,
                    &mut rng::stream(seed, "ssl/mask", view as u64, b),
                ));
            }
        }
        (crops, masks)
    }

    fn toy_images(side: usize) -> Vec<GrayImage> {
        (0..8u64)
            .map(|i| {
                let mut stream = rng::stream(50 + i, "ssl/scene", 0, 0);
                let findings = Findings {
                    blob: i % 2 == 0,
                    tube: i % 3 == 0,
                    pneumo: false,
                };
                let scene = synthcxr::sample_scene(
                    &format!("s{i}"),
                    ScaleClass::Medium,
                    1.0 + 0.02 * i as f32,
                    findings,
                    &mut stream,
                );
                synthcxr::render(&scene, side).unwrap().image
            })
            .collect()
    }

    #[test]
    fn teacher_branch_receives_no_gradient() {
        let cfg = tiny_cfg();
        let params = EncoderParams::<f32>::init(&cfg, 1).unwrap();
        let mut state = TeacherState::new(&params, &cfg, 100).unwrap();
        let (crops, masks) = toy_batch(&cfg, 7);
        let mut tape = Tape::<f32>::new();
        let student = BoundEncoder::bind(&mut tape, &params, &cfg, true).unwrap();
        let teacher = BoundEncoder::bind(&mut tape, &state.params, &cfg, false).unwrap();
        let composed = composed_loss(
            &mut tape,
            &student,
            &teacher,
            &crops,
            &masks,
            &state.image_center,
            &state.patch_center,
            0.04,
            state.student_temp,
            &LossWeights::desk_default(),
        )
        .unwrap();
        let grads = tape.backward_scalar(composed.total);
        for (name, &var) in teacher.vars() {
            assert!(grads.get(var).is_none(), "teacher {name} received gradient");
        }
        let mut student_hit = 0;
        for (_, &var) in student.vars() {
            if grads.get(var).is_some() {
                student_hit += 1;
            }
        }
        assert!(student_hit > 0);
        let _ = &mut state;
    }

    #[test]
    fn total_is_the_weighted_sum_of_terms() {
        let cfg = tiny_cfg();
        let params = EncoderParams::<f32>::init(&cfg, 5).unwrap();
        let mut state = TeacherState::new(&params, &cfg, 100).unwrap();
        let (crops, masks) = toy_batch(&cfg, 9);
        let mut tape = Tape::<f32>::new();
        let student = BoundEncoder::bind(&mut tape, &params, &cfg, true).unwrap();
        let weights = LossWeights::desk_default();
        let (total, breakdown) = state
            .total_loss(&mut tape, &student, &crops, &masks, 0, &weights)
            .unwrap();
        let recombined = weights.dino * breakdown.dino
            + weights.ibot * breakdown.ibot
            + weights.koleo * breakdown.koleo;
        assert!((tape.value(total).item() - recombined).abs() <= 1e-6);
        assert!(breakdown.ibot > 0.0);
        assert!(breakdown.teacher_entropy > 0.0);
        // The image center moved toward this step's teacher logits.
        assert!(state.image_center.iter().any(|c| *c != 0.0));
        assert!(state.patch_center.iter().any(|c| *c != 0.0));
    }

    #[test]
    fn zero_patch_weight_ignores_masks_entirely() {
        let cfg = tiny_cfg();
        let params = EncoderParams::<f32>::init(&cfg, 5).unwrap();
        let (crops, masks) = toy_batch(&cfg, 9);
        let all_false = vec![vec![false; masks[0].len()], vec![false; masks[1].len()]];
        let weights = LossWeights::no_mim();

        let mut totals = Vec::new();
        for mask_choice in [&masks, &all_false] {
            let mut state = TeacherState::new(&params, &cfg, 100).unwrap();
            let mut tape = Tape::<f32>::new();
            let student = BoundEncoder::bind(&mut tape, &params, &cfg, true).unwrap();
            let (total, breakdown) = state
                .total_loss(&mut tape, &student, &crops, mask_choice, 3, &weights)
                .unwrap();
            assert_eq!(breakdown.ibot, 0.0);
            totals.push(tape.value(total).item());
        }
        assert_eq!(totals[0].to_bits(), totals[1].to_bits());
    }

    fn toy_run(center_momentum: f32, steps: u64) -> f32 {
        let cfg = EncoderConfig {
            image_side: 32,
            patch_side: 8,
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            prototypes: 16,
            bottleneck: 8,
            share_heads: false,
        };
        let images = toy_images(cfg.image_side);
        let mut policy = CropPolicy::for_resolution(cfg.image_side, cfg.patch_side);
        policy.local_count = 2;
        let mask_policy = MaskPolicy::desk_default();
        let n = (cfg.image_side / cfg.patch_side).pow(2);
        let batch = 4usize;

        let mut student = EncoderParams::<f32>::init(&cfg, 11).unwrap();
        let mut state = TeacherState::new(&student, &cfg, steps).unwrap();
        state.center_momentum = center_momentum;
        let weights = LossWeights::desk_default();
        let hyper = AdamHyper::with_decay(3e-3, 0.04);
        let mut opt: BTreeMap<String, AdamState<f32>> = student
            .iter()
            .map(|(name, t)| (name.clone(), AdamState::new(t.data().len())))
            .collect();

        let mut last_entropy = 0.0;
        for step in 0..steps {
            let mut tape = Tape::<f32>::new();
            let bound = BoundEncoder::bind(&mut tape, &student, &cfg, true).unwrap();
            let mut crops = Vec::with_capacity(batch);
            let mut masks = vec![Vec::new(), Vec::new()];
            for b in 0..batch {
                let img = &images[(step as usize * batch + b) % images.len()];
                let draw = step * batch as u64 + b as u64;
                crops.push(
                    sample_multicrop(img, &policy, &mut rng::stream(21, "toy/crop", 0, draw))
                        .unwrap(),
                );
                for (view, mask) in masks.iter_mut().enumerate() {
                    mask.extend(sample_mask(
                        n,
                        &mask_policy,
                        &mut rng::stream(21, "toy/mask", view as u64, draw),
                    ));
                }
            }
            let (total, breakdown) = state
                .total_loss(&mut tape, &bound, &crops, &masks, step, &weights)
                .unwrap();
            last_entropy = breakdown.teacher_entropy;
            let grads = tape.backward_scalar(total);
            for (name, &var) in bound.vars() {
                if let Some(g) = grads.get(var) {
                    adamw_step(
                        student.get_mut(name).data_mut(),
                        g,
                        opt.get_mut(name).unwrap(),
                        &hyper,
                        step + 1,
                    )
                    .unwrap();
                }
            }
            student.renorm_prototypes();
            let momentum = state.ema_momentum.at(step).unwrap() as f32;
            let snapshot = student.clone();
            ema_update(&mut state.params, &snapshot, momentum).unwrap();
        }
        last_entropy
    }

    #[test]
    fn centering_holds_teacher_entropy_up() {
        // A frozen center (momentum 1 keeps it at its zero start) removes
        // the collapse defense; the same run with the running center must
        // keep the teacher's image distributions visibly spread.
        let steps = 200;
        let with_centering = toy_run(CENTER_MOMENTUM as f32, steps);
        let without_centering = toy_run(1.0, steps);
        let floor = 0.2 * (16.0f32).ln();
        assert!(
            with_centering >= floor,
            "teacher entropy {with_centering} fell below {floor}"
        );
        assert!(
            without_centering < with_centering,
            "disabling the center did not lower entropy: {without_centering} vs {with_centering}"
        );
    }
}
