//! Finite-difference helpers shared by the gradient and acceptance suites.

use cada::nn::gradcheck::{check_input, check_params, GradCheckReport};
use cada::nn::{self, reduce, IntTensor, Mode, PoolMode, RunningStats, Tape, Tensor, Var};
use cada::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-3;
/// Step for whole-network checks. Thousands of ReLU and max-pool units make
/// a 1e-4 stencil likely to straddle some kink.
pub const NET_H: f64 = 1e-6;

pub type Build<'a> = dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;

/// Checks the gradient of `Σ r ⊙ f(inputs)` for each input in turn.
pub fn check_op(inputs: &[Tensor<f64>], f: &Build<'_>, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).unwrap().shape()
    };
    let weights = Tensor::<f64>::randn(out_shape, 1.0, &mut rng);

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(reduce::dot(f(&vars)?, weights.clone())?.item())
    };

    let mut report = GradCheckReport::default();
    for which in 0..inputs.len() {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let loss = reduce::dot(f(&vars).unwrap(), weights.clone()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(vars[which]).unwrap().clone();
        let r = check_input(
            &inputs[which],
            &analytic,
            |x| {
                let mut xs = inputs.to_vec();
                xs[which] = x.clone();
                eval(&xs)
            },
            H,
            64,
            &mut rng,
        )
        .unwrap();
        report.merge(r);
    }
    report
}

#[allow(dead_code)]
pub fn assert_ok(name: &str, r: &GradCheckReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(
        r.max_rel_err < TOL,
        "{name}: max rel err {:e} at {}",
        r.max_rel_err,
        r.worst
    );
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}


fn named(name: impl Into<String>, r: GradCheckReport) -> (String, GradCheckReport) {
    (name.into(), r)
}

/// Every differentiable operation, each checked on random inputs.
pub fn op_suite() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (2, 0, 3), (1, 0, 1)] {
        let inputs = [randn(&[2, 3, 6, 6], 1), randn(&[4, 3, k, k], 2), randn(&[4], 3)];
        let r = check_op(&inputs, &|v| nn::conv2d(v[0], v[1], v[2], stride, pad), 10);
        out.push(named(format!("conv2d s{stride} p{pad} k{k}"), r));
    }

    let x = [randn(&[2, 2, 8, 8], 4)];
    out.push(named("max pool", check_op(&x, &|v| nn::pool2d(v[0], 2, PoolMode::Max), 11)));
    out.push(named("avg pool", check_op(&x, &|v| nn::pool2d(v[0], 4, PoolMode::Avg), 12)));
    out.push(named("upsample", check_op(&x, &|v| nn::upsample2d(v[0], 3), 13)));

    let inputs = [randn(&[3, 2, 4, 4], 5), randn(&[2], 6), randn(&[2], 7)];
    for mode in [Mode::Train, Mode::Eval] {
        let r = check_op(
            &inputs,
            &|v| {
                let mut mean = Tensor::from_f64([2], &[0.1, -0.2])?;
                let mut var = Tensor::from_f64([2], &[0.9, 1.3])?;
                nn::batch_norm2d(v[0], v[1], v[2], RunningStats { mean: &mut mean, var: &mut var }, mode)
            },
            14,
        );
        out.push(named(format!("batch norm {mode:?}"), r));
    }

    let x = [randn(&[2, 3, 3, 3], 8)];
    out.push(named("relu", check_op(&x, &|v| Ok(nn::relu(v[0])), 15)));
    out.push(named("leaky relu", check_op(&x, &|v| Ok(nn::leaky_relu(v[0])), 16)));
    out.push(named(
        "sigmoid",
        check_op(&x, &|v| Ok(nn::pointwise(v[0], nn::Activation::Sigmoid)), 17),
    ));
    out.push(named("softmax", check_op(&x, &|v| nn::softmax(v[0]), 18)));

    let inputs = [randn(&[2, 1, 3, 3], 9), randn(&[2, 2, 3, 3], 10)];
    out.push(named("concat", check_op(&inputs, &|v| nn::concat(&[v[0], v[1]]), 19)));
    let same = [randn(&[2, 2, 3, 3], 11), randn(&[2, 2, 3, 3], 12), randn(&[2, 2, 3, 3], 13)];
    out.push(named("mean_of", check_op(&same, &|v| reduce::mean_of(v), 20)));
    out.push(named("scale", check_op(&same[..1], &|v| Ok(reduce::scale(v[0], -1.7)), 21)));
    out.push(named("sum", check_op(&same[..1], &|v| Ok(reduce::sum(v[0])), 26)));

    let logits = [randn(&[2, 3, 4, 4], 14)];
    let labels: Vec<u8> = (0..32).map(|i| ((i * 5 + 1) % 3) as u8).collect();
    let labels = IntTensor::new([2, 4, 4], labels).unwrap();
    out.push(named("cross entropy", check_op(&logits, &|v| nn::softmax_ce_loss(v[0], &labels), 22)));
    let pair = [randn(&[2, 3, 2, 2], 15), randn(&[2, 3, 2, 2], 16)];
    out.push(named("mse", check_op(&pair, &|v| nn::mse_loss(v[0], v[1]), 23)));
    for y in [0.0, 1.0] {
        let x = [randn(&[1, 1, 3, 3], 17).map(|v| v * 4.0)];
        out.push(named(format!("bce target {y}"), check_op(&x, &|v| nn::bce_logits_loss(v[0], y), 24)));
    }
    let scalars = [randn(&[], 18), randn(&[], 19)];
    out.push(named(
        "combine",
        check_op(&scalars, &|v| reduce::combine(&[(v[0], 0.3), (v[1], 2.0)]), 25),
    ));
    out
}

/// Segmentation network (train-mode batch norm) at base width 2 on 32×32
/// inputs: every trainable tensor against the deep-supervision loss, plus
/// the input image.
pub fn segnet_report(per_tensor: usize) -> GradCheckReport {
    use cada::segnet::{build_segnet, forward, seg_loss, SegNetConfig};
    let cfg = SegNetConfig::new(2, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut params = build_segnet::<f64>(&cfg, 41).unwrap();
    let images = Tensor::<f64>::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let labels: Vec<u8> = (0..2 * 32 * 32).map(|i| ((i / 7 + i / 97) % 3) as u8).collect();
    let labels = IntTensor::new([2, 32, 32], labels).unwrap();

    let loss_at = |p: &mut cada::nn::ParamSet<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut scratch = p.clone();
        let tape = Tape::new();
        let (out, _) = forward(&cfg, &mut scratch, tape.constant(x.clone()), Mode::Train, false)?;
        Ok(seg_loss(&out, &labels)?.item())
    };

    let tape = Tape::new();
    let x = tape.variable(images.clone());
    let mut work = params.clone();
    let (out, bound) = forward(&cfg, &mut work, x, Mode::Train, true).unwrap();
    let loss = seg_loss(&out, &labels).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let dx = grads.get(x).unwrap().clone();
    params.accumulate(&bound, &mut grads).unwrap();

    let mut report = check_params(&params, |p| loss_at(p, &images), NET_H, per_tensor, &mut rng).unwrap();
    let mut fresh = params.clone();
    report.merge(check_input(&images, &dx, |xi| loss_at(&mut fresh, xi), NET_H, 4 * per_tensor, &mut rng).unwrap());
    report
}

/// Patch discriminator on a 32×32 three-channel map: its parameters under
/// the discriminator loss and its input under the adversarial loss.
pub fn discriminator_report(per_tensor: usize) -> GradCheckReport {
    use cada::adapt::{adv_loss, build_discriminator_with, disc_loss};
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut disc = build_discriminator_with::<f64>(3, 51, [4, 8, 8, 8]).unwrap();
    for (_, p) in disc.iter_mut() {
        let noise = Tensor::<f64>::randn(p.value.shape().to_vec(), 0.05, &mut rng);
        p.value.add_assign(&noise);
    }
    let src = Tensor::<f64>::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let tgt = Tensor::<f64>::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);

    let tape = Tape::new();
    let (loss, bound) = disc_loss(&disc, tape.constant(src.clone()), tape.constant(tgt.clone())).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    disc.accumulate(&bound, &mut grads).unwrap();
    let mut report = check_params(
        &disc,
        |p| {
            let tape = Tape::new();
            Ok(disc_loss(p, tape.constant(src.clone()), tape.constant(tgt.clone()))?.0.item())
        },
        NET_H,
        per_tensor,
        &mut rng,
    )
    .unwrap();

    let tape = Tape::new();
    let x = tape.variable(src.clone());
    let grads = tape.backward(adv_loss(&disc, x).unwrap()).unwrap();
    let dx = grads.get(x).unwrap().clone();
    report.merge(
        check_input(
            &src,
            &dx,
            |xi| {
                let tape = Tape::new();
                Ok(adv_loss(&disc, tape.constant(xi.clone()))?.item())
            },
            NET_H,
            4 * per_tensor,
            &mut rng,
        )
        .unwrap(),
    );
    report
}
