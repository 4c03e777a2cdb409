//! Every differentiable op checked against central finite differences.

use incepformer::gradcheck::{compare_gradients, finite_diff_grad, DEFAULT_REL_FLOOR};
use incepformer::ops::{Conv2dOptions, NormMode};
use incepformer::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Op<'a> = dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;

/// Scalarizes `op` as `Σ op(inputs) ⊙ r` with a fixed random `r`, so that ops
/// whose outputs sum to a constant (softmax, normalization) still get a
/// nontrivial gradient.
fn projected_loss(op: &Op<'_>, inputs: &[Tensor<f64>], seed: u64) -> Result<(f64, Vec<Tensor<f64>>)> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op(&vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = tape.constant(Tensor::randn(out.shape(), 1.0, &mut rng));
    let loss = out.mul(r)?.sum()?;
    let grads = tape.backward(loss)?;
    let value = loss.value().item()?;
    Ok((value, vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect()))
}

fn check_op(op: &Op<'_>, inputs: Vec<Tensor<f64>>, seed: u64, tol: f64) -> std::result::Result<(), String> {
    for t in &inputs {
        assert!(t.numel() <= 64, "gradcheck inputs are capped at 64 elements");
    }
    let (_, analytic) = projected_loss(op, &inputs, seed).map_err(|e| e.to_string())?;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.clone();
                xs[i] = probe.clone();
                projected_loss(op, &xs, seed).map(|(v, _)| v)
            },
            &inputs[i],
            H,
        )
        .map_err(|e| e.to_string())?;
        let cmp = compare_gradients(a, &numeric, DEFAULT_REL_FLOOR).map_err(|e| e.to_string())?;
        if !cmp.passes(tol) {
            return Err(format!("input {i}: {cmp:?}"));
        }
    }
    Ok(())
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero so relu's kink is never straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), 0.1, 1.0, rng)
        .zip_map(&randn(shape, rng), "sign", |m, s| m.copysign(s))
        .unwrap()
}

#[test]
fn composite_conv_norm_softmax_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&[2, 2, 4, 4], &mut rng);
    let w = randn(&[3, 2, 3, 3], &mut rng);
    let op: &Op = &|v| {
        let tape = v[0].tape();
        let b = tape.constant(Tensor::zeros(vec![3]));
        let gamma = tape.constant(Tensor::ones(vec![3]));
        let beta = tape.constant(Tensor::zeros(vec![3]));
        let y = v[0].conv2d(v[1], Some(b), Conv2dOptions::default().padding(1, 1))?;
        let rm = Tensor::zeros(vec![3]);
        let rv = Tensor::ones(vec![3]);
        let (y, _) = y.batch_norm2d(gamma, beta, &rm, &rv, NormMode::Train, 1e-5)?;
        y.softmax(1)
    };
    check_op(op, vec![x, w], 1, 1e-5).unwrap();
}

fn conv_case(seed: u64, groups: usize, stride: usize, pad: usize) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2 * groups.max(1);
    let x = randn(&[1, c, 4, 4], &mut rng);
    let w = randn(&[2, c / groups, 2, 3], &mut rng);
    let b = randn(&[2], &mut rng);
    let opts = Conv2dOptions::default()
        .stride(stride, stride)
        .padding(pad, pad)
        .groups(groups);
    check_op(&move |v| v[0].conv2d(v[1], Some(v[2]), opts), vec![x, w, b], seed, TOL)
}

#[test]
fn depthwise_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&[1, 3, 4, 4], &mut rng);
    let w = randn(&[3, 1, 3, 3], &mut rng);
    let opts = Conv2dOptions::default().padding(1, 1).groups(3);
    check_op(&move |v| v[0].conv2d(v[1], None, opts), vec![x, w], 3, TOL).unwrap();
}

#[test]
fn strip_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&[1, 2, 4, 4], &mut rng);
    let wa = randn(&[2, 1, 1, 2], &mut rng);
    let wb = randn(&[2, 1, 2, 1], &mut rng);
    let op: &Op = &|v| {
        let a = v[0].conv2d(v[1], None, Conv2dOptions::default().stride(1, 2).groups(2))?;
        a.conv2d(v[2], None, Conv2dOptions::default().stride(2, 1).groups(2))
    };
    check_op(op, vec![x, wa, wb], 4, TOL).unwrap();
}

#[test]
fn batch_norm_both_modes() {
    for (seed, mode) in [(11, NormMode::Train), (12, NormMode::Eval)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[2, 3, 2, 3], &mut rng);
        let gamma = randn(&[3], &mut rng);
        let beta = randn(&[3], &mut rng);
        let rm = randn(&[3], &mut rng);
        let rv = Tensor::rand_uniform(vec![3], 0.5, 2.0, &mut rng);
        let op: &Op = &|v| Ok(v[0].batch_norm2d(v[1], v[2], &rm, &rv, mode, 1e-5)?.0);
        check_op(op, vec![x, gamma, beta], seed, TOL).unwrap();
    }
}

#[test]
fn linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = randn(&[2, 3, 4], &mut rng);
    let w = randn(&[4, 5], &mut rng);
    let b = randn(&[5], &mut rng);
    check_op(&|v| v[0].linear(v[1], Some(v[2])), vec![x, w, b], 21, TOL).unwrap();
}

#[test]
fn upsample_both_conventions() {
    for align in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = randn(&[1, 2, 3, 2], &mut rng);
        check_op(&move |v| v[0].bilinear_upsample(5, 4, align), vec![x], 31, TOL).unwrap();
    }
}

#[test]
fn relu_off_the_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = away_from_zero(&[3, 7], &mut rng);
    check_op(&|v| v[0].relu(), vec![x], 41, TOL).unwrap();
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = randn(&[2, 3, 2, 2], &mut rng);
    let y = randn(&[2, 4, 3], &mut rng);
    let op: &Op = &|v| {
        let a = v[0].img2seq()?; // [2,4,3]
        let b = v[1].seq2img(2, 2)?.img2seq()?;
        let c = Var::concat(&[a, b], 1)?; // [2,8,3]
        c.permute(&[2, 0, 1])?.reshape(vec![3, 16])?.scale(0.5)
    };
    check_op(op, vec![x, y], 51, TOL).unwrap();
}

#[test]
fn pool_then_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = randn(&[1, 2, 6, 4], &mut rng);
    check_op(&|v| v[0].avg_pool2d(2, 2)?.mean(), vec![x], 61, TOL).unwrap();
}

#[test]
fn cross_entropy_with_ignored_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let x = randn(&[2, 3, 2, 2], &mut rng);
    let labels = [0u8, 1, 2, 255, 2, 255, 1, 0];
    check_op(&move |v| v[0].cross_entropy(&labels, 255), vec![x], 71, TOL).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_matches_finite_differences(seed in 0u64..10_000, groups in 1usize..3, stride in 1usize..3, pad in 0usize..2) {
        prop_assert!(conv_case(seed, groups, stride, pad).is_ok(), "{:?}", conv_case(seed, groups, stride, pad));
    }

    #[test]
    fn attention_core_matches_finite_differences(seed in 0u64..10_000, m in 1usize..4, k in 1usize..5, p in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = randn(&[2, m, k], &mut rng);
        let kt = randn(&[2, k, p], &mut rng);
        let v = randn(&[2, p, k], &mut rng);
        let op: &Op = &|x| x[0].matmul(x[1])?.softmax(2)?.matmul(x[2]);
        prop_assert_eq!(check_op(op, vec![q, kt, v], seed, TOL), Ok(()));
    }

    #[test]
    fn layer_norm_matches_finite_differences(seed in 0u64..10_000, rows in 1usize..5, c in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[rows, c], &mut rng);
        let g = randn(&[c], &mut rng);
        let b = randn(&[c], &mut rng);
        prop_assert_eq!(check_op(&|v| v[0].layer_norm(v[1], v[2], 1e-5), vec![x, g, b], seed, TOL), Ok(()));
    }

    #[test]
    fn elementwise_matches_finite_differences(seed in 0u64..10_000, n in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&[n], &mut rng);
        let b = randn(&[n], &mut rng);
        let op: &Op = &|v| v[0].gelu()?.mul(v[1])?.add(v[0])?.scale(-1.5);
        prop_assert_eq!(check_op(op, vec![a, b], seed, TOL), Ok(()));
    }
}
