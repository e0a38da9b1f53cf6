use serde::{Deserialize, Serialize};

use crate::adapt::{self, AdaptorSet, Discriminator};
use crate::error::{Error, Result};
use crate::nn::{ema_update, ema_update_trainable, Bound, poly_lr, reduce, Mode, OptKind, OptState, ParamSet, Tape, Tensor, Var};
use crate::seeds::{self, tag};
use crate::segnet::{self, build_segnet, SegNetConfig};
use crate::synth::{augment_batch, BatchPair};

use super::RunConfig;

/// Sub-steps of one iteration, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Segmentation,
    Ema,
    Adversarial,
    Discriminator,
    Consistency,
}

/// Losses and learning rates of one iteration. Loss fields of skipped
/// sub-steps are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub epoch: u64,
    pub l_seg: Option<f64>,
    pub l_adv_e: Option<f64>,
    pub l_adv_d: Option<f64>,
    pub l_dis_e: Option<f64>,
    pub l_dis_d: Option<f64>,
    pub l_mse_e: Option<f64>,
    pub l_mse_d: Option<f64>,
    pub lr_seg: f64,
    pub lr_disc: f64,
}

impl IterRecord {
    pub fn losses(&self) -> [Option<f64>; 7] {
        [
            self.l_seg,
            self.l_adv_e,
            self.l_adv_d,
            self.l_dis_e,
            self.l_dis_d,
            self.l_mse_e,
            self.l_mse_d,
        ]
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: SegNetConfig,
    /// Shared weights of the source and target student networks.
    pub student: ParamSet<f32>,
    /// Exponential moving average of `student`.
    pub teacher: ParamSet<f32>,
    pub seg_opt: OptState<f32>,
    pub adaptors: AdaptorSet<f32>,
    /// Completed iterations.
    pub iter: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.segnet();
        let student = build_segnet(&net, seeds::derive(&[cfg.seed, tag::INIT_SEGNET]))?;
        Ok(TrainState {
            net,
            teacher: student.clone(),
            student,
            seg_opt: OptState::new(OptKind::sgd(cfg.seg_momentum)),
            adaptors: AdaptorSet::new(
                cfg.lambdas(),
                cfg.flags(),
                cfg.disc_widths(),
                seeds::derive(&[cfg.seed, tag::INIT_DISCS]),
            )?,
            iter: 0,
            epoch: 0,
        })
    }

    /// Weights the run returns: the teacher when self-ensembling is on,
    /// otherwise the student (the teacher is then never updated).
    pub fn returned(&self) -> &ParamSet<f32> {
        if self.adaptors.flags.se_enabled {
            &self.teacher
        } else {
            &self.student
        }
    }

    /// Replaces student and teacher weights, keeping optimizer state fresh.
    pub fn init_from(&mut self, weights: &ParamSet<f32>) -> Result<()> {
        ema_update(&mut self.student, weights, 0.0)?;
        ema_update(&mut self.teacher, weights, 0.0)?;
        self.student.set_step(0);
        self.teacher.set_step(0);
        Ok(())
    }
}

fn seg_update(
    state: &mut TrainState,
    loss: Var<'_, f32>,
    bound: &Bound<'_, f32>,
    lr: f64,
) -> Result<f64> {
    let value = loss.item() as f64;
    let mut grads = loss.tape().backward(loss)?;
    state.student.accumulate(bound, &mut grads)?;
    state.seg_opt.step(&mut state.student, lr)?;
    state.student.zero_grad();
    Ok(value)
}

fn disc_update(d: &mut Discriminator<f32>, src: &Tensor<f32>, tgt: &Tensor<f32>, lr: f64) -> Result<f64> {
    let tape = Tape::new();
    let (loss, bound) = adapt::disc_loss(&d.params, tape.constant(src.clone()), tape.constant(tgt.clone()))?;
    let value = loss.item() as f64;
    let mut grads = tape.backward(loss)?;
    d.params.accumulate(&bound, &mut grads)?;
    d.opt.step(&mut d.params, lr)?;
    d.params.zero_grad();
    Ok(value)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn finite(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !x.is_finite() => Err(Error::NonFinite(name.to_string())),
        _ => Ok(()),
    }
}

/// One iteration: segmentation, EMA, adversarial, discriminator and
/// consistency sub-steps. A sub-step whose switch is off or whose weights
/// are all zero is skipped entirely. `observe` is called as each sub-step
/// starts.
pub fn train_step(
    state: &mut TrainState,
    cfg: &RunConfig,
    batch: &BatchPair,
    observe: &mut dyn FnMut(Phase),
) -> Result<IterRecord> {
    let max_iter = cfg.max_iter();
    if state.iter >= max_iter {
        return Err(Error::InvalidArgument(format!(
            "iteration {} beyond max_iter {max_iter}",
            state.iter
        )));
    }
    let lr_seg = poly_lr(cfg.seg_lr, state.iter, max_iter, cfg.poly_power)?;
    let lr_disc = poly_lr(cfg.disc_lr, state.iter, max_iter, cfg.poly_power)?;
    let net = state.net;
    let lambdas = state.adaptors.lambdas;
    let flags = state.adaptors.flags;
    let mut rec = IterRecord {
        iter: state.iter,
        epoch: state.epoch,
        lr_seg,
        lr_disc,
        ..Default::default()
    };

    observe(Phase::Segmentation);
    {
        let tape = Tape::new();
        let images = tape.constant(batch.source_images.clone());
        let (out, bound) = segnet::forward(&net, &mut state.student, images, Mode::Train, true)?;
        let loss = segnet::seg_loss(&out, &batch.source_masks)?;
        rec.l_seg = Some(loss.item() as f64);
        seg_update(state, reduce::scale(loss, lambdas.seg), &bound, lr_seg)?;
    }

    let target = batch.target_images.as_ref();
    let (mse_e_on, mse_d_on) = (state.adaptors.mse_enc_active(), state.adaptors.mse_dec_active());
    let consistency = target.is_some() && (mse_e_on || mse_d_on);

    if flags.se_enabled {
        observe(Phase::Ema);
        // When the teacher sees target batches below, its normalisation
        // statistics come from those passes rather than from the student.
        if consistency {
            ema_update_trainable(&mut state.teacher, &state.student, cfg.ema_alpha)?;
        } else {
            ema_update(&mut state.teacher, &state.student, cfg.ema_alpha)?;
        }
    }

    if let Some(target) = target.filter(|_| state.adaptors.any_adv_active()) {
        observe(Phase::Adversarial);
        let tape = Tape::new();
        let (out_s, bound) =
            segnet::forward(&net, &mut state.student, tape.constant(batch.source_images.clone()), Mode::Train, true)?;
        let (out_t, _) = segnet::forward(&net, &mut state.student, tape.constant(target.clone()), Mode::Train, false)?;

        let mut terms: Vec<(Var<'_, f32>, f64)> = Vec::new();
        let mut features: Vec<(Option<usize>, Tensor<f32>, Tensor<f32>)> = Vec::new();
        if state.adaptors.enc_adv_active() {
            let src = adapt::enc_disc_input(&out_s)?;
            let l = adapt::adv_loss(&state.adaptors.enc.params, src)?;
            rec.l_adv_e = Some(l.item() as f64);
            terms.push((l, lambdas.adv_enc));
            let tgt = adapt::enc_disc_input(&out_t)?;
            features.push((None, (*src.value()).clone(), (*tgt.value()).clone()));
        }
        if state.adaptors.dec_adv_active() {
            let levels = flags.dec_levels();
            let weight = lambdas.adv_dec / levels.len() as f64;
            let mut values = Vec::new();
            for level in levels {
                let src = adapt::dec_disc_input(&out_s, level)?;
                let l = adapt::adv_loss(&state.adaptors.dec[level].params, src)?;
                values.push(l.item() as f64);
                terms.push((l, weight));
                let tgt = adapt::dec_disc_input(&out_t, level)?;
                features.push((Some(level), (*src.value()).clone(), (*tgt.value()).clone()));
            }
            rec.l_adv_d = mean(&values);
        }
        let loss = reduce::combine(&terms)?;
        seg_update(state, loss, &bound, lr_seg)?;

        observe(Phase::Discriminator);
        let mut dec_values = Vec::new();
        for (slot, src, tgt) in &features {
            match slot {
                None => rec.l_dis_e = Some(disc_update(&mut state.adaptors.enc, src, tgt, lr_disc)?),
                Some(level) => {
                    dec_values.push(disc_update(&mut state.adaptors.dec[*level], src, tgt, lr_disc)?)
                }
            }
        }
        rec.l_dis_d = mean(&dec_values);
    }

    if let Some(target) = target.filter(|_| consistency) {
        observe(Phase::Consistency);
        let (student_in, teacher_in) = consistency_inputs(cfg, state.iter, target)?;
        let tape = Tape::new();
        let (out_s, bound) =
            segnet::forward(&net, &mut state.student, tape.constant(student_in), Mode::Train, true)?;
        let (out_t, _) =
            segnet::forward(&net, &mut state.teacher, tape.constant(teacher_in), Mode::Train, false)?;
        let (mse_e, mse_d) = adapt::consistency_loss(&out_s, &out_t)?;
        let mut terms = Vec::new();
        if mse_e_on {
            rec.l_mse_e = Some(mse_e.item() as f64);
            terms.push((mse_e, lambdas.mse_enc));
        }
        if mse_d_on {
            rec.l_mse_d = Some(mse_d.item() as f64);
            terms.push((mse_d, lambdas.mse_dec));
        }
        let loss = reduce::combine(&terms)?;
        seg_update(state, loss, &bound, lr_seg)?;
    }

    let names = ["l_seg", "l_adv_e", "l_adv_d", "l_dis_e", "l_dis_d", "l_mse_e", "l_mse_d"];
    for (name, v) in names.iter().zip(rec.losses()) {
        finite(name, v)?;
    }
    state.iter += 1;
    Ok(rec)
}

/// Augmentation used by the consistency sub-step for a given iteration.
pub fn consistency_inputs(cfg: &RunConfig, iter: u64, target: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let aug = cfg.augment();
    Ok((
        augment_batch(target, seeds::derive(&[cfg.seed, iter, tag::AUGMENT_STUDENT]), &aug)?,
        augment_batch(target, seeds::derive(&[cfg.seed, iter, tag::AUGMENT_TEACHER]), &aug)?,
    ))
}
