//! Central finite differences (f64, h = 1e-4) against `Tape::backward` for
//! every differentiable operation.

mod common;

use cada::nn::{self, reduce, Tape, Tensor, Var};
use common::{assert_ok, discriminator_report, op_suite, segnet_report, H};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_operation() {
    for (name, report) in op_suite() {
        assert_ok(&name, &report);
    }
}

#[test]
fn segmentation_network() {
    assert_ok("segnet", &segnet_report(6));
}

#[test]
fn discriminator_network() {
    assert_ok("discriminator", &discriminator_report(6));
}

#[test]
fn backward_simple_cases() {
    let tape = Tape::<f64>::new();
    let w = tape.variable(Tensor::from_f64([2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
    let grads = tape.backward(reduce::sum(w)).unwrap();
    assert!(grads.get(w).unwrap().data().iter().all(|&g| g == 1.0));

    let tape = Tape::<f64>::new();
    let w = tape.variable(Tensor::from_f64([1], &[2.0]).unwrap());
    let zero = tape.constant(Tensor::zeros([1]));
    let grads = tape.backward(nn::mse_loss(w, zero).unwrap()).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[4.0]);
    assert!(grads.get(zero).is_none());

    let err = tape.backward(w.detach()).is_ok();
    assert!(err, "one-element leaf is a valid scalar loss");
    let wide = tape.variable(Tensor::zeros([2]));
    assert!(tape.backward(wide).is_err());
}

#[test]
fn two_layer_conv_net_parameters() {
    use cada::nn::gradcheck::check_params;
    use cada::nn::{ParamKind, ParamSet};

    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut ps = ParamSet::<f64>::new();
    ps.insert("c1.w", Tensor::randn([4, 2, 3, 3], 0.5, &mut rng), ParamKind::Trainable).unwrap();
    ps.insert("c1.b", Tensor::randn([4], 0.1, &mut rng), ParamKind::Trainable).unwrap();
    ps.insert("c2.w", Tensor::randn([1, 4, 3, 3], 0.5, &mut rng), ParamKind::Trainable).unwrap();
    ps.insert("c2.b", Tensor::randn([1], 0.1, &mut rng), ParamKind::Trainable).unwrap();
    let x = Tensor::<f64>::randn([2, 2, 6, 6], 1.0, &mut rng);
    let target = Tensor::<f64>::randn([2, 1, 3, 3], 1.0, &mut rng);

    fn loss_of<'t>(
        ps: &ParamSet<f64>,
        tape: &'t Tape<f64>,
        x: &Tensor<f64>,
        target: &Tensor<f64>,
        track: bool,
    ) -> (Var<'t, f64>, cada::nn::Bound<'t, f64>) {
        let b = ps.bind(tape, track);
        let h = nn::conv2d(tape.constant(x.clone()), b.get("c1.w").unwrap(), b.get("c1.b").unwrap(), 1, 1).unwrap();
        let h = nn::relu(h);
        let y = nn::conv2d(h, b.get("c2.w").unwrap(), b.get("c2.b").unwrap(), 2, 1).unwrap();
        let loss = nn::mse_loss(y, tape.constant(target.clone())).unwrap();
        (loss, b)
    }

    let tape = Tape::new();
    let (loss, bound) = loss_of(&ps, &tape, &x, &target, true);
    let mut grads = tape.backward(loss).unwrap();
    ps.accumulate(&bound, &mut grads).unwrap();

    let report = check_params(
        &ps,
        |p| {
            let tape = Tape::new();
            Ok(loss_of(p, &tape, &x, &target, false).0.item())
        },
        H,
        usize::MAX,
        &mut rng,
    )
    .unwrap();
    assert_eq!(report.checked, 4 * 2 * 9 + 4 + 4 * 9 + 1);
    assert_ok("two-layer conv net", &report);
}
