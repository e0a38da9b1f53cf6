//! Patch discriminators and the adversarial, discriminator and consistency
//! losses that tie the segmentation network to the unlabeled domain.
//!
//! Label convention: a discriminator emits the logit of "this came from the
//! target domain". The segmentation network is pushed to make source
//! features score as [`TARGET`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    bce_logits_loss, conv2d, leaky_relu, mse_loss, reduce, Bound, OptKind, OptState, ParamKind,
    ParamSet, Real, Tensor, Var,
};
use crate::segnet::{self, SegOutput, NUM_CLASSES, NUM_SCALES};

pub const TARGET: f64 = 1.0;
pub const SOURCE: f64 = 0.0;

/// Channel widths of the four hidden discriminator layers.
pub const FULL_DISC_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Each layer halves the extent, so inputs below this size vanish.
pub const MIN_DISC_EXTENT: usize = 32;

pub fn disc_widths(base: usize) -> [usize; 4] {
    [base, 2 * base, 4 * base, 8 * base]
}

/// Five 4×4 stride-2 convolutions `in → w0 → w1 → w2 → w3 → 1`, He-initialised
/// weights and zero biases.
pub fn build_discriminator<T: Real>(in_channels: usize, seed: u64) -> Result<ParamSet<T>> {
    build_discriminator_with(in_channels, seed, FULL_DISC_WIDTHS)
}

pub fn build_discriminator_with<T: Real>(
    in_channels: usize,
    seed: u64,
    widths: [usize; 4],
) -> Result<ParamSet<T>> {
    if in_channels == 0 || widths.contains(&0) {
        return Err(Error::InvalidArgument(
            "discriminator channel counts must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let chans = [in_channels, widths[0], widths[1], widths[2], widths[3], 1];
    for i in 0..5 {
        let (cin, cout) = (chans[i], chans[i + 1]);
        let std = (2.0 / (cin * 16) as f64).sqrt();
        ps.insert(
            format!("conv{i}.weight"),
            Tensor::randn([cout, cin, 4, 4], std, &mut rng),
            ParamKind::Trainable,
        )?;
        ps.insert(format!("conv{i}.bias"), Tensor::zeros([cout]), ParamKind::Trainable)?;
    }
    Ok(ps)
}

/// Patch logits `[N,1,h,w]` with `h = extent / 32`.
pub fn disc_forward<'t, T: Real>(disc: &Bound<'t, T>, feature: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = feature.shape();
    if shape.len() != 4 || shape[2] < MIN_DISC_EXTENT || shape[3] < MIN_DISC_EXTENT {
        return Err(Error::shape(
            "disc_forward",
            format!("need [N,C,H,W] with H,W >= {MIN_DISC_EXTENT}, got {shape:?}"),
        ));
    }
    let mut h = feature;
    for i in 0..5 {
        h = conv2d(
            h,
            disc.get(&format!("conv{i}.weight"))?,
            disc.get(&format!("conv{i}.bias"))?,
            2,
            1,
        )?;
        if i < 4 {
            h = leaky_relu(h);
        }
    }
    Ok(h)
}

/// Generator-side loss: BCE of `D(source_feature)` against [`TARGET`].
/// The discriminator enters as constants, so it receives no gradient.
pub fn adv_loss<'t, T: Real>(disc: &ParamSet<T>, source_feature: Var<'t, T>) -> Result<Var<'t, T>> {
    let bound = disc.bind(source_feature.tape(), false);
    bce_logits_loss(disc_forward(&bound, source_feature)?, TARGET)
}

/// Discriminator loss `BCE(D(t), TARGET) + BCE(D(s), SOURCE)` on detached
/// features. Returns the bound discriminator for gradient collection.
pub fn disc_loss<'t, T: Real>(
    disc: &ParamSet<T>,
    source_feature: Var<'t, T>,
    target_feature: Var<'t, T>,
) -> Result<(Var<'t, T>, Bound<'t, T>)> {
    let bound = disc.bind(source_feature.tape(), true);
    let on_target = bce_logits_loss(disc_forward(&bound, target_feature.detach())?, TARGET)?;
    let on_source = bce_logits_loss(disc_forward(&bound, source_feature.detach())?, SOURCE)?;
    Ok((reduce::combine(&[(on_target, 1.0), (on_source, 1.0)])?, bound))
}

/// `(mse_E, mse_D)` between student and teacher outputs. The teacher side is
/// detached. `mse_D` averages five terms: the softmax of each scale and the
/// softmax of the averaged logits.
pub fn consistency_loss<'t, T: Real>(
    student: &SegOutput<'t, T>,
    teacher: &SegOutput<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let teacher = teacher.detach();
    let mse_e = mse_loss(student.enc_feature, teacher.enc_feature)?;
    let ps = segnet::probabilities(student)?;
    let pt = segnet::probabilities(&teacher)?;
    let terms = ps
        .iter()
        .zip(&pt)
        .map(|(&s, &t)| Ok((mse_loss(s, t)?, 1.0 / ps.len() as f64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((mse_e, reduce::combine(&terms)?))
}

/// Loss weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lambdas {
    pub seg: f64,
    pub adv_enc: f64,
    pub adv_dec: f64,
    pub mse_enc: f64,
    pub mse_dec: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            seg: 1.0,
            adv_enc: 0.002,
            adv_dec: 0.018,
            mse_enc: 0.057,
            mse_dec: 0.79,
        }
    }
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        let all = [self.seg, self.adv_enc, self.adv_dec, self.mse_enc, self.mse_dec];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("lambdas must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptFlags {
    /// Encoder adversarial and encoder consistency terms.
    pub enc_enabled: bool,
    /// Teacher, EMA and both consistency terms.
    pub se_enabled: bool,
    /// Decoder discriminators engaged, counted from the full-resolution
    /// level toward the deepest. Zero disables decoder adaptation.
    pub num_dec_discs: usize,
}

impl Default for AdaptFlags {
    fn default() -> Self {
        AdaptFlags {
            enc_enabled: true,
            se_enabled: true,
            num_dec_discs: NUM_SCALES,
        }
    }
}

impl AdaptFlags {
    pub fn validate(&self) -> Result<()> {
        if self.num_dec_discs > NUM_SCALES {
            return Err(Error::Config(format!(
                "num_dec_discs must be at most {NUM_SCALES}, got {}",
                self.num_dec_discs
            )));
        }
        Ok(())
    }

    /// Indices into `scale_logits` whose discriminators are engaged.
    pub fn dec_levels(&self) -> std::ops::Range<usize> {
        NUM_SCALES - self.num_dec_discs..NUM_SCALES
    }

    /// No adversarial or consistency term at all.
    pub fn supervised_only(&self) -> bool {
        !self.enc_enabled && !self.se_enabled && self.num_dec_discs == 0
    }
}

/// Scalar parts of the total objective. `adv_dec` and `mse_dec` hold one
/// entry per engaged term; they are averaged before weighting.
pub struct LossParts<'t, T> {
    pub seg: Var<'t, T>,
    pub adv_enc: Option<Var<'t, T>>,
    pub adv_dec: Vec<Var<'t, T>>,
    pub mse_enc: Option<Var<'t, T>>,
    pub mse_dec: Option<Var<'t, T>>,
}

/// `seg·L_seg + adv_E·L_adv^E + adv_D·mean(L_adv^D) + mse_E·L_mse^E + mse_D·L_mse^D`,
/// absent parts contributing nothing.
pub fn total_loss<'t, T: Real>(parts: &LossParts<'t, T>, lambdas: &Lambdas) -> Result<Var<'t, T>> {
    lambdas.validate()?;
    let mut terms = vec![(parts.seg, lambdas.seg)];
    if let Some(v) = parts.adv_enc {
        terms.push((v, lambdas.adv_enc));
    }
    let k = parts.adv_dec.len();
    for &v in &parts.adv_dec {
        terms.push((v, lambdas.adv_dec / k as f64));
    }
    if let Some(v) = parts.mse_enc {
        terms.push((v, lambdas.mse_enc));
    }
    if let Some(v) = parts.mse_dec {
        terms.push((v, lambdas.mse_dec));
    }
    reduce::combine(&terms)
}

/// A discriminator with its optimizer.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub params: ParamSet<T>,
    pub opt: OptState<T>,
}

/// The encoder discriminator, one discriminator per decoder level (deepest
/// first, aligned with `scale_logits`), weights and switches.
#[derive(Clone, Debug)]
pub struct AdaptorSet<T> {
    pub enc: Discriminator<T>,
    pub dec: Vec<Discriminator<T>>,
    pub lambdas: Lambdas,
    pub flags: AdaptFlags,
}

impl<T: Real> AdaptorSet<T> {
    /// All five discriminators are built regardless of the flags, so
    /// checkpoints of different ablations share one layout.
    pub fn new(lambdas: Lambdas, flags: AdaptFlags, widths: [usize; 4], seed: u64) -> Result<Self> {
        lambdas.validate()?;
        flags.validate()?;
        let disc = |in_ch, offset| -> Result<Discriminator<T>> {
            Ok(Discriminator {
                params: build_discriminator_with(in_ch, seed.wrapping_add(offset), widths)?,
                opt: OptState::new(OptKind::adam()),
            })
        };
        Ok(AdaptorSet {
            enc: disc(1, 0)?,
            dec: (0..NUM_SCALES)
                .map(|i| disc(NUM_CLASSES, 1 + i as u64))
                .collect::<Result<_>>()?,
            lambdas,
            flags,
        })
    }

    pub fn enc_adv_active(&self) -> bool {
        self.flags.enc_enabled && self.lambdas.adv_enc > 0.0
    }

    pub fn dec_adv_active(&self) -> bool {
        self.flags.num_dec_discs > 0 && self.lambdas.adv_dec > 0.0
    }

    pub fn any_adv_active(&self) -> bool {
        self.enc_adv_active() || self.dec_adv_active()
    }

    pub fn mse_enc_active(&self) -> bool {
        self.flags.se_enabled && self.flags.enc_enabled && self.lambdas.mse_enc > 0.0
    }

    pub fn mse_dec_active(&self) -> bool {
        self.flags.se_enabled && self.lambdas.mse_dec > 0.0
    }
}

/// The encoder feature is upsampled to full resolution so that the
/// discriminator stack sees the same extent at every adaptor.
pub fn enc_disc_input<'t, T: Real>(out: &SegOutput<'t, T>) -> Result<Var<'t, T>> {
    crate::nn::upsample2d(out.enc_feature, 8)
}

/// Decoder discriminators see class probabilities.
pub fn dec_disc_input<'t, T: Real>(out: &SegOutput<'t, T>, level: usize) -> Result<Var<'t, T>> {
    crate::nn::softmax(out.scale_logits[level])
}
