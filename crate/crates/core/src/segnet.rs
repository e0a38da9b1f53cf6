//! Multi-scale-input, multi-scale-output encoder-decoder.
//!
//! Channel widths per level are `[c, 2c, 4c, 8c]` for `c = base_channels`.
//!
//! ```text
//! image ─┬─ enc0 (S)    ─ pool ─┐
//!        ├─ avgpool 2 ─ stem1 ──┴─ enc1 (S/2) ─ pool ─┐
//!        ├─ avgpool 4 ─ stem2 ────────────────────────┴─ enc2 (S/4) ─ pool ─┐
//!        └─ avgpool 8 ─ stem3 ──────────────────────────────────────────────┴─ enc3 (S/8)
//!
//! enc3 ─ 1×1 ─ enc_feature [N,1,S/8,S/8]
//! enc3 ─ dec0 (S/8) ─ up ⧺ enc2 ─ dec1 (S/4) ─ up ⧺ enc1 ─ dec2 (S/2) ─ up ⧺ enc0 ─ dec3 (S)
//! dec_i ─ 1×1 head ─ nearest ×2^(3−i) ─ scale_logits[i]      avg_logits = mean_i
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, batch_norm2d, concat, conv2d, pool2d, reduce, relu, softmax_ce_loss, upsample2d, Bound,
    IntTensor, Mode, ParamKind, ParamSet, PoolMode, Real, RunningStats, Tape, Tensor, Var,
};

pub const NUM_SCALES: usize = 4;
pub const NUM_CLASSES: usize = 3;
/// Weight of each per-scale cross-entropy term in [`seg_loss`].
pub const DEEP_SUPERVISION_WEIGHT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    pub base_channels: usize,
    pub num_scales: usize,
    pub num_classes: usize,
    pub input_size: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            base_channels: 8,
            num_scales: NUM_SCALES,
            num_classes: NUM_CLASSES,
            input_size: 64,
        }
    }
}

impl SegNetConfig {
    pub fn new(base_channels: usize, input_size: usize) -> Result<Self> {
        let c = SegNetConfig {
            base_channels,
            input_size,
            ..Default::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.num_scales != NUM_SCALES {
            return Err(Error::Config(format!(
                "num_scales must be {NUM_SCALES}, got {}",
                self.num_scales
            )));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; NUM_SCALES] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }
}

/// Products of one forward pass.
#[derive(Clone, Copy)]
pub struct SegOutput<'t, T> {
    /// Bottleneck compressed to one channel, `[N,1,S/8,S/8]`.
    pub enc_feature: Var<'t, T>,
    /// Per-level logits at full resolution, deepest level first.
    pub scale_logits: [Var<'t, T>; NUM_SCALES],
    pub avg_logits: Var<'t, T>,
}

impl<'t, T: Real> SegOutput<'t, T> {
    pub fn detach(&self) -> Self {
        SegOutput {
            enc_feature: self.enc_feature.detach(),
            scale_logits: self.scale_logits.map(|v| v.detach()),
            avg_logits: self.avg_logits.detach(),
        }
    }
}

fn he_init<T: Real>(
    ps: &mut ParamSet<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let fan_in = (cin * k * k) as f64;
    let w = Tensor::randn([cout, cin, k, k], (2.0 / fan_in).sqrt(), rng);
    ps.insert(format!("{name}.weight"), w, ParamKind::Trainable)?;
    ps.insert(format!("{name}.bias"), Tensor::zeros([cout]), ParamKind::Trainable)
}

fn add_bn<T: Real>(ps: &mut ParamSet<T>, name: &str, c: usize) -> Result<()> {
    ps.insert(format!("{name}.gamma"), Tensor::ones([c]), ParamKind::Trainable)?;
    ps.insert(format!("{name}.beta"), Tensor::zeros([c]), ParamKind::Trainable)?;
    ps.insert(format!("{name}.running_mean"), Tensor::zeros([c]), ParamKind::Buffer)?;
    ps.insert(format!("{name}.running_var"), Tensor::ones([c]), ParamKind::Buffer)
}

fn add_block<T: Real>(
    ps: &mut ParamSet<T>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    he_init(ps, &format!("{name}.conv0"), cout, cin, 3, rng)?;
    add_bn(ps, &format!("{name}.bn0"), cout)?;
    he_init(ps, &format!("{name}.conv1"), cout, cout, 3, rng)?;
    add_bn(ps, &format!("{name}.bn1"), cout)
}

/// Input channels of decoder level `i`: the upsampled deeper level plus the skip.
fn decoder_in(ch: &[usize; NUM_SCALES], level: usize) -> usize {
    if level == 0 {
        ch[3]
    } else {
        ch[4 - level] + ch[3 - level]
    }
}

/// Seeded construction of every weight, bias and batch-norm buffer.
pub fn build_segnet<T: Real>(config: &SegNetConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let ch = config.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for i in 1..NUM_SCALES {
        he_init(&mut ps, &format!("stem{i}"), ch[i - 1], 3, 3, &mut rng)?;
    }
    for i in 0..NUM_SCALES {
        let cin = if i == 0 { 3 } else { 2 * ch[i - 1] };
        add_block(&mut ps, &format!("enc{i}"), cin, ch[i], &mut rng)?;
    }
    he_init(&mut ps, "bottleneck", 1, ch[3], 1, &mut rng)?;
    for level in 0..NUM_SCALES {
        let cout = ch[3 - level];
        add_block(&mut ps, &format!("dec{level}"), decoder_in(&ch, level), cout, &mut rng)?;
        he_init(&mut ps, &format!("head{level}"), NUM_CLASSES, cout, 1, &mut rng)?;
    }
    Ok(ps)
}

/// Where batch-norm statistics come from during a pass. Eval passes only
/// read them, so they can run on a shared reference.
enum Stats<'p, T> {
    Update(&'p mut ParamSet<T>),
    Read(&'p ParamSet<T>),
}

struct Pass<'p, 't, T> {
    bound: Bound<'t, T>,
    stats: Stats<'p, T>,
    mode: Mode,
}

impl<'t, T: Real> Pass<'_, 't, T> {
    fn conv(&self, x: Var<'t, T>, name: &str, pad: usize) -> Result<Var<'t, T>> {
        conv2d(
            x,
            self.bound.get(&format!("{name}.weight"))?,
            self.bound.get(&format!("{name}.bias"))?,
            1,
            pad,
        )
    }

    fn bn(&mut self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        let gamma = self.bound.get(&format!("{name}.gamma"))?;
        let beta = self.bound.get(&format!("{name}.beta"))?;
        match &mut self.stats {
            Stats::Update(ps) => batch_norm2d(x, gamma, beta, ps.running_stats(name)?, self.mode),
            Stats::Read(ps) => {
                let mut mean = ps.value(&format!("{name}.running_mean"))?.clone();
                let mut var = ps.value(&format!("{name}.running_var"))?.clone();
                let stats = RunningStats {
                    mean: &mut mean,
                    var: &mut var,
                };
                batch_norm2d(x, gamma, beta, stats, self.mode)
            }
        }
    }

    fn block(&mut self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        let h = self.conv(x, &format!("{name}.conv0"), 1)?;
        let h = relu(self.bn(h, &format!("{name}.bn0"))?);
        let h = self.conv(h, &format!("{name}.conv1"), 1)?;
        Ok(relu(self.bn(h, &format!("{name}.bn1"))?))
    }

    fn run(&mut self, config: &SegNetConfig, images: Var<'t, T>) -> Result<SegOutput<'t, T>> {
        let (_, c, h, w) = images.borrow_value().dims4("segnet forward")?;
        let s = config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(
                "segnet forward",
                format!("expected [N,3,{s},{s}], got {:?}", images.shape()),
            ));
        }

        let mut enc: Vec<Var<'t, T>> = Vec::with_capacity(NUM_SCALES);
        for i in 0..NUM_SCALES {
            let x = if i == 0 {
                images
            } else {
                let scaled = pool2d(images, 1 << i, PoolMode::Avg)?;
                let stem = relu(self.conv(scaled, &format!("stem{i}"), 1)?);
                let down = pool2d(enc[i - 1], 2, PoolMode::Max)?;
                concat(&[down, stem])?
            };
            enc.push(self.block(x, &format!("enc{i}"))?);
        }
        let enc_feature = self.conv(enc[3], "bottleneck", 0)?;

        let mut logits = Vec::with_capacity(NUM_SCALES);
        let mut d = enc[3];
        for level in 0..NUM_SCALES {
            let x = if level == 0 {
                d
            } else {
                concat(&[upsample2d(d, 2)?, enc[3 - level]])?
            };
            d = self.block(x, &format!("dec{level}"))?;
            let head = self.conv(d, &format!("head{level}"), 0)?;
            logits.push(upsample2d(head, 1 << (3 - level))?);
        }
        let avg_logits = reduce::mean_of(&logits)?;
        Ok(SegOutput {
            enc_feature,
            scale_logits: [logits[0], logits[1], logits[2], logits[3]],
            avg_logits,
        })
    }
}

/// Forward pass that may update batch-norm running statistics (train mode).
///
/// Returns the bound parameters so the caller can collect gradients with
/// [`ParamSet::accumulate`]. With `track == false` no gradient reaches `params`.
pub fn forward<'t, T: Real>(
    config: &SegNetConfig,
    params: &mut ParamSet<T>,
    images: Var<'t, T>,
    mode: Mode,
    track: bool,
) -> Result<(SegOutput<'t, T>, Bound<'t, T>)> {
    let bound = params.bind(images.tape(), track);
    let mut pass = Pass {
        bound,
        stats: Stats::Update(params),
        mode,
    };
    let out = pass.run(config, images)?;
    Ok((out, pass.bound))
}

/// Eval-mode forward on a shared snapshot with every parameter constant.
pub fn forward_eval<'t, T: Real>(
    config: &SegNetConfig,
    params: &ParamSet<T>,
    images: Var<'t, T>,
) -> Result<SegOutput<'t, T>> {
    let mut pass = Pass {
        bound: params.bind(images.tape(), false),
        stats: Stats::Read(params),
        mode: Mode::Eval,
    };
    pass.run(config, images)
}

/// `CE(avg_logits) + 0.25 · Σ CE(scale_logits[i])`.
pub fn seg_loss<'t, T: Real>(out: &SegOutput<'t, T>, labels: &IntTensor) -> Result<Var<'t, T>> {
    let mut terms = vec![(softmax_ce_loss(out.avg_logits, labels)?, 1.0)];
    for l in out.scale_logits {
        terms.push((softmax_ce_loss(l, labels)?, DEEP_SUPERVISION_WEIGHT));
    }
    reduce::combine(&terms)
}

/// Per-pixel argmax over classes; ties go to the lowest class index.
pub fn predict_mask<T: Real>(logits: &Tensor<T>) -> Result<IntTensor> {
    let (n, k, h, w) = logits.dims4("predict_mask")?;
    if k != NUM_CLASSES {
        return Err(Error::shape(
            "predict_mask",
            format!("expected {NUM_CLASSES} classes, got {k}"),
        ));
    }
    let plane = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if x[(b * k + c) * plane + p] > x[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    IntTensor::new([n, h, w], out)
}

/// Convenience: eval-mode masks for a batch of images.
pub fn predict<T: Real>(config: &SegNetConfig, params: &ParamSet<T>, images: &Tensor<T>) -> Result<IntTensor> {
    let tape = Tape::new();
    let out = forward_eval(config, params, tape.constant(images.clone()))?;
    predict_mask(&out.avg_logits.value())
}

/// Softmax of each scale's logits followed by the softmax of the average.
pub fn probabilities<'t, T: Real>(out: &SegOutput<'t, T>) -> Result<[Var<'t, T>; NUM_SCALES + 1]> {
    Ok([
        nn::softmax(out.scale_logits[0])?,
        nn::softmax(out.scale_logits[1])?,
        nn::softmax(out.scale_logits[2])?,
        nn::softmax(out.scale_logits[3])?,
        nn::softmax(out.avg_logits)?,
    ])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn config_guards() {
        assert!(SegNetConfig::new(8, 64).is_ok());
        assert!(SegNetConfig::new(8, 48).is_err());
        assert!(SegNetConfig::new(0, 64).is_err());
        for bad in [3, 5] {
            let c = SegNetConfig {
                num_scales: bad,
                ..Default::default()
            };
            assert!(build_segnet::<f32>(&c, 0).is_err());
        }
        let c = SegNetConfig {
            num_classes: 2,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let c = SegNetConfig::default();
        let a = build_segnet::<f32>(&c, 5).unwrap();
        let b = build_segnet::<f32>(&c, 5).unwrap();
        assert!(a.values_equal(&b));
        let other = build_segnet::<f32>(&c, 6).unwrap();
        assert!(!a.values_equal(&other));
    }

    /// Counts conv weights from the layer table independently of `build_segnet`.
    fn conv_weight_count(c: usize) -> usize {
        let ch = [c, 2 * c, 4 * c, 8 * c];
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
        let mut total = 0;
        for i in 1..4 {
            total += conv(3, ch[i - 1], 3);
        }
        total += conv(3, ch[0], 3) + conv(ch[0], ch[0], 3);
        for i in 1..4 {
            total += conv(2 * ch[i - 1], ch[i], 3) + conv(ch[i], ch[i], 3);
        }
        total += conv(ch[3], 1, 1);
        let dec_in = [ch[3], ch[3] + ch[2], ch[2] + ch[1], ch[1] + ch[0]];
        for l in 0..4 {
            let out = ch[3 - l];
            total += conv(dec_in[l], out, 3) + conv(out, out, 3) + conv(out, 3, 1);
        }
        total
    }

    fn weight_count(ps: &ParamSet<f32>) -> usize {
        ps.iter()
            .filter(|(n, _)| n.ends_with(".weight"))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    #[test]
    fn parameter_count_scales_quadratically() {
        let p8 = build_segnet::<f32>(&SegNetConfig::new(8, 64).unwrap(), 0).unwrap();
        let p16 = build_segnet::<f32>(&SegNetConfig::new(16, 64).unwrap(), 0).unwrap();
        assert_eq!(weight_count(&p8), conv_weight_count(8));
        assert_eq!(weight_count(&p16), conv_weight_count(16));
        let ratio = p16.num_trainable() as f64 / p8.num_trainable() as f64;
        assert!((3.8..=4.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn forward_shapes_and_average() {
        let c = SegNetConfig::new(4, 64).unwrap();
        let mut ps = build_segnet::<f64>(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform([2, 3, 64, 64], 0.0, 1.0, &mut rng));
        let (out, _) = forward(&c, &mut ps, x, Mode::Train, true).unwrap();
        assert_eq!(out.enc_feature.shape(), vec![2, 1, 8, 8]);
        for l in out.scale_logits {
            assert_eq!(l.shape(), vec![2, 3, 64, 64]);
        }
        let avg = out.avg_logits.value();
        let parts: Vec<_> = out.scale_logits.iter().map(|v| v.value()).collect();
        for i in 0..avg.len() {
            let m = parts.iter().map(|p| p.data()[i]).sum::<f64>() / 4.0;
            assert!((avg.data()[i] - m).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let c = SegNetConfig::new(2, 32).unwrap();
        let ps = build_segnet::<f32>(&c, 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 64, 64]));
        assert!(forward_eval(&c, &ps, x).is_err());
    }

    #[test]
    fn eval_mode_is_repeatable_and_train_mode_moves_stats() {
        let c = SegNetConfig::new(2, 32).unwrap();
        let mut ps = build_segnet::<f32>(&c, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);
        let before = ps.clone();
        let run = |ps: &ParamSet<f32>| {
            let tape = Tape::new();
            let out = forward_eval(&c, ps, tape.constant(img.clone())).unwrap();
            (*out.avg_logits.value()).clone()
        };
        assert_eq!(run(&ps), run(&ps));
        assert!(ps.values_equal(&before));

        let tape = Tape::new();
        forward(&c, &mut ps, tape.constant(img.clone()), Mode::Train, false).unwrap();
        assert!(!ps.values_equal(&before));
    }

    #[test]
    fn predict_mask_rules() {
        let equal = Tensor::<f32>::zeros([1, 3, 2, 2]);
        assert!(predict_mask(&equal).unwrap().data().iter().all(|&v| v == 0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn([2, 3, 4, 5], 1.0, &mut rng);
        let m = predict_mask(&x).unwrap();
        for b in 0..2 {
            for p in 0..20 {
                let vals: Vec<f32> = (0..3).map(|c| x.data()[(b * 3 + c) * 20 + p]).collect();
                let best = (0..3)
                    .fold(0, |best, c| if vals[c] > vals[best] { c } else { best });
                assert_eq!(m.data()[b * 20 + p] as usize, best);
            }
        }

        let one_hot = Tensor::<f32>::from_f64([1, 3, 1, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(predict_mask(&one_hot).unwrap().data(), &[0, 1, 2]);
    }
}
