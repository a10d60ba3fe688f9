use gleet_autodiff::{
    finite_difference_check, FdSampling, Initializer, ParamGrads, ParameterSet, Result, Tape,
    Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn mlp_params(seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    p.add("l1.w", vec![6, 16], Initializer::FanInUniform, &mut rng).unwrap();
    // Non-zero biases keep ReLU kinks away from the sampled points.
    p.add("l1.b", vec![16], Initializer::FanInUniform, &mut rng).unwrap();
    p.add("l2.w", vec![16, 4], Initializer::FanInUniform, &mut rng).unwrap();
    p.add("l2.b", vec![4], Initializer::FanInUniform, &mut rng).unwrap();
    p
}

fn mlp_loss(p: &ParameterSet, x: &Tensor) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::with_params(p);
    let x = tape.leaf(x.clone());
    let w1 = tape.param_named("l1.w")?;
    let b1 = tape.param_named("l1.b")?;
    let w2 = tape.param_named("l2.w")?;
    let b2 = tape.param_named("l2.b")?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, w2)?;
    let y = tape.add_row(y, b2)?;
    let y = tape.tanh(y)?;
    let sq = tape.mul(y, y)?;
    let loss = tape.sum(sq)?;
    Ok((tape.value(loss)[0], tape.backward(loss)?))
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let p = mlp_params(1);
    let x = random_input(5, 6, 2);
    let (_, g) = mlp_loss(&p, &x).unwrap();
    let err = finite_difference_check(&p, &g, |q| Ok(mlp_loss(q, &x)?.0), 1e-5, FdSampling::All)
        .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

/// Every primitive once: attention-style block with softmax, layer norm,
/// concat, slicing, repeat, pooling and leaky ReLU.
fn block_loss(p: &ParameterSet, x: &Tensor) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::with_params(p);
    let x = tape.leaf(x.clone());
    let wq = tape.param_named("wq")?;
    let wk = tape.param_named("wk")?;
    let g = tape.param_named("ln.g")?;
    let b = tape.param_named("ln.b")?;
    let row = tape.param_named("row")?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let s = tape.matmul_bt(q, k)?;
    let s = tape.scale(s, 0.5)?;
    let a = tape.softmax_rows(s)?;
    let v = tape.matmul(a, x)?;
    let left = tape.slice_cols(v, 0, 2)?;
    let right = tape.slice_cols(v, 2, 2)?;
    let cat = tape.concat_cols(&[right, left])?;
    let r = tape.repeat_rows(row, 3)?;
    let cat = tape.add(cat, r)?;
    let n = tape.layer_norm(cat, g, b, 1e-5)?;
    let n = tape.leaky_relu(n, 0.01)?;
    let n = tape.affine(n, 0.7, 0.1)?;
    let pooled = tape.mean_rows(n)?;
    let t = tape.tanh(pooled)?;
    let loss = tape.sum(t)?;
    Ok((tape.value(loss)[0], tape.backward(loss)?))
}

#[test]
fn tanh_chain_through_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParameterSet::new();
    p.add("wq", vec![4, 4], Initializer::FanInUniform, &mut rng).unwrap();
    p.add("wk", vec![4, 4], Initializer::FanInUniform, &mut rng).unwrap();
    p.add("ln.g", vec![4], Initializer::FanInUniform, &mut rng).unwrap();
    p.add("ln.b", vec![4], Initializer::FanInUniform, &mut rng).unwrap();
    p.add("row", vec![1, 4], Initializer::FanInUniform, &mut rng).unwrap();
    let x = random_input(3, 4, 6);
    let (_, g) = block_loss(&p, &x).unwrap();
    let err =
        finite_difference_check(&p, &g, |q| Ok(block_loss(q, &x)?.0), 1e-5, FdSampling::All)
            .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn random_sampling_covers_requested_count() {
    let p = mlp_params(3);
    let x = random_input(4, 6, 4);
    let (_, g) = mlp_loss(&p, &x).unwrap();
    let mut calls = 0;
    finite_difference_check(
        &p,
        &g,
        |q| {
            calls += 1;
            Ok(mlp_loss(q, &x)?.0)
        },
        1e-5,
        FdSampling::Random { count: 100, seed: 1 },
    )
    .unwrap();
    assert_eq!(calls, 200);
}

#[test]
fn accumulating_backward_adds_into_existing_gradients() {
    let p = mlp_params(9);
    let x = random_input(3, 6, 10);
    let (_, g) = mlp_loss(&p, &x).unwrap();
    let mut tape = Tape::with_params(&p);
    let xn = tape.leaf(x.clone());
    let w1 = tape.param_named("l1.w").unwrap();
    let y = tape.matmul(xn, w1).unwrap();
    let s = tape.sum(y).unwrap();
    let mut acc = g.clone();
    tape.backward_accumulate(&[(s, &[1.0][..])], &mut acc).unwrap();
    let single = tape.backward(s).unwrap();
    let mut expected = g.clone();
    expected.add_assign(&single);
    assert_eq!(acc, expected);
    let mut wrong = ParamGrads::zeros_like(&ParameterSet::new());
    assert!(tape.backward_accumulate(&[(s, &[1.0][..])], &mut wrong).is_err());
}

#[test]
fn forward_is_bit_deterministic() {
    let p = mlp_params(7);
    let x = random_input(5, 6, 8);
    let (a, ga) = mlp_loss(&p, &x).unwrap();
    let (b, gb) = mlp_loss(&p, &x).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 4], logits.clone()).unwrap());
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let xs = tape.leaf(Tensor::new(vec![3, 4], shifted).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let ys = tape.softmax_rows(xs).unwrap();
        for row in tape.value(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for (a, b) in tape.value(y).iter().zip(tape.value(ys)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(
        data in prop::collection::vec(-100.0f64..100.0, 16),
        spread in 0.5f64..10.0,
    ) {
        let data: Vec<f64> = data.iter().enumerate().map(|(i, v)| v + spread * i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 8], data).unwrap());
        let g = tape.leaf(Tensor::filled(vec![8], 1.0));
        let b = tape.leaf(Tensor::zeros(vec![8]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-7);
            prop_assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
