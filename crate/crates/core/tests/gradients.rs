//! Central-difference checks of every analytic backward pass in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segnas_core::genome::OpCode;
use segnas_core::gradcheck::{self, random, Check};
use segnas_core::nn::units::OpUnit;
use segnas_core::nn::{Mode, ParamStore};

const TOL: f64 = 1e-4;

fn assert_all(checks: &[Check]) {
    assert!(!checks.is_empty());
    for c in checks {
        assert!(c.rel_err < TOL, "{} / {}: relative error {:e}", c.group, c.tensor, c.rel_err);
    }
}

#[test]
fn every_operation_in_train_mode() {
    let checks = gradcheck::operations(11);
    for op in OpCode::ALL {
        assert!(checks.iter().any(|c| c.group == op.abbrev()), "{op:?} unchecked");
    }
    assert_all(&checks);
}

#[test]
fn zero_op_has_no_input_gradient_and_skip_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let x = random([1, 2, 3, 3], &mut rng);
    let zero = OpUnit::new(&mut store, "z", OpCode::Zero, 2, &mut rng);
    let (y, c) = zero.forward(&mut store, &x, Mode::Train);
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(zero.backward(&mut store, &x, &c, y.clone()).is_none());
    let skip = OpUnit::new(&mut store, "s", OpCode::Skip, 2, &mut rng);
    let (y, c) = skip.forward(&mut store, &x, Mode::Train);
    assert_eq!(y.data(), x.data());
    assert_eq!(skip.backward(&mut store, &x, &c, x.clone()).unwrap().data(), x.data());
    assert!(store.is_empty());
}

#[test]
fn eval_mode_batch_norm() {
    assert_all(&gradcheck::eval_batch_norm(5));
}

#[test]
fn heads_and_strided_convs() {
    assert_all(&gradcheck::heads(7));
}

#[test]
fn shape_kernels() {
    assert_all(&gradcheck::shape_kernels(9));
}

#[test]
fn losses() {
    assert_all(&gradcheck::losses(13));
}

#[test]
fn whole_network_with_aux_and_distillation() {
    assert_all(&gradcheck::networks(17));
}
