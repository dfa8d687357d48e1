use ebr_core::autodiff::{AdamConfig, Graph, OptimizerState, ParamGrads, ParamSet};
use ebr_core::nn::TransformerBlock;
use ebr_core::{Error, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn embedding_bag_examples() {
    let mut g = Graph::<f64>::new();
    let table = g.constant(t(&[2, 2], &[1.0, 1.0, 3.0, 5.0]));
    let y = g.embedding_bag(table, &[vec![0, 1], vec![]]).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 3.0, 0.0, 0.0]);
    assert!(matches!(g.embedding_bag(table, &[vec![2]]), Err(Error::Index(_))));
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::<f64>::new();
    let one = g.constant(t(&[1], &[1.0]));
    let zero = g.constant(t(&[1], &[0.0]));
    let x = g.constant(t(&[2, 1], &[1.0, 3.0]));
    let y = g.batch_norm_train(x, one, zero).unwrap();
    assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-3));
    let stats = g.batch_stats(y).unwrap();
    assert_eq!((stats.mean.clone(), stats.var.clone(), stats.batch), (vec![2.0], vec![1.0], 2));

    let c = g.constant(t(&[2, 1], &[5.0, 5.0]));
    let y = g.batch_norm_train(c, one, zero).unwrap();
    assert!(close(g.value(y).data(), &[0.0, 0.0], 1e-12));

    let x = g.constant(t(&[3, 1], &[0.3, -2.0, 7.5]));
    let y = g.batch_norm_infer(x, one, zero, &[0.0], &[1.0]).unwrap();
    // off by the eps in sqrt(var + eps) only
    assert!(close(g.value(y).data(), &[0.3, -2.0, 7.5], 5e-5));

    let single = g.constant(t(&[1, 1], &[1.0]));
    assert!(matches!(g.batch_norm_train(single, one, zero), Err(Error::Batch(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3, 3], &[0.0, 0.0, f64::NEG_INFINITY, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
    let y = g.row_softmax(x).unwrap();
    let v = g.value(y).data();
    assert!(close(&v[0..2], &[0.5, 0.5], 1e-15));
    assert!(close(&v[3..6], &[1.0, 0.0, 0.0], 1e-15));
    // direct exponentiation
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|a| a.exp()).sum();
    let direct: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|a| a.exp() / z).collect();
    assert!(close(&v[6..9], &direct, 1e-12));
    assert!(close(&v[6..9], &[0.0900, 0.2447, 0.6652], 1e-4));
}

#[test]
fn adam_first_step() {
    let mut params = ParamSet::<f64>::new();
    let w = params.add("w", Tensor::scalar(0.0)).unwrap();
    let z = params.add("z", t(&[2], &[0.5, -0.25])).unwrap();
    let mut opt = OptimizerState::new(&params, AdamConfig { lr: 0.001, ..AdamConfig::default() });
    let mut grads = ParamGrads::zeros(&params);
    grads.get_mut(w).unwrap().data_mut()[0] = 1.0;
    opt.step(&mut params, &grads).unwrap();
    // bias-corrected first step is -lr * g / (|g| + eps)
    let expected = -0.001 * 1.0 / (1.0 + 1e-8);
    assert!((params.get(w).item() - expected).abs() < 1e-6);
    assert_eq!(params.get(z).data(), &[0.5, -0.25]);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut params = ParamSet::<f64>::new();
    params.add("w", Tensor::scalar(0.0)).unwrap();
    let mut opt = OptimizerState::new(&params, AdamConfig::default());
    let other = {
        let mut p = ParamSet::<f64>::new();
        p.add("a", Tensor::scalar(0.0)).unwrap();
        p.add("b", Tensor::scalar(0.0)).unwrap();
        ParamGrads::zeros(&p)
    };
    assert!(opt.step(&mut params, &other).is_err());
}

fn adam_run(seed: u64) -> Vec<u64> {
    let mut params = ParamSet::<f32>::new();
    let mut rng = ebr_core::rng::stream(seed, "adam-run");
    let w = params.add_normal("w", &[4, 3], 1.0, &mut rng).unwrap();
    let mut opt = OptimizerState::new(&params, AdamConfig::default());
    for _ in 0..20 {
        let mut g = Graph::new();
        let wv = g.param(&params, w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap().param_grads(&params);
        opt.step(&mut params, &grads).unwrap();
    }
    params.get(w).data().iter().map(|v| v.to_bits() as u64).collect()
}

#[test]
fn adam_runs_are_bitwise_reproducible() {
    assert_eq!(adam_run(3), adam_run(3));
    assert_ne!(adam_run(3), adam_run(4));
}

#[test]
fn zero_residual_branches_pass_input_through() {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ebr_core::rng::stream(1, "block");
    let block = TransformerBlock::new(&mut params, "b", 8, 16, 2, &mut rng).unwrap();
    for lin in [&block.attn_out, &block.ff_out] {
        let shape = params.get(lin.weight).shape().to_vec();
        params.set(lin.weight, Tensor::zeros(&shape)).unwrap();
        if let Some(b) = lin.bias {
            let shape = params.get(b).shape().to_vec();
            params.set(b, Tensor::zeros(&shape)).unwrap();
        }
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 8]));
    let y = block.forward(&mut g, &params, x, &[false; 3]).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn padded_positions_do_not_leak() {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ebr_core::rng::stream(2, "block");
    let block = TransformerBlock::new(&mut params, "b", 8, 16, 2, &mut rng).unwrap();
    let run = |pad_value: f64| {
        let mut g = Graph::new();
        let mut v: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        v.extend(std::iter::repeat(pad_value).take(8));
        let x = g.constant(Tensor::new(&[1, 2, 8], v).unwrap());
        let y = block.forward(&mut g, &params, x, &[false, true]).unwrap();
        g.value(y).data()[..8].to_vec()
    };
    assert_eq!(run(0.0), run(123.0));
    assert!(matches!(
        TransformerBlock::new(&mut ParamSet::<f64>::new(), "c", 8, 8, 3, &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut params = ParamSet::<f32>::new();
        let mut rng = ebr_core::rng::stream(5, "block");
        let block = TransformerBlock::new(&mut params, "b", 16, 32, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = params.add_normal("x", &[3, 5, 16], 1.0, &mut rng).unwrap();
        let xv = g.param(&params, x);
        let y = block.forward(&mut g, &params, xv, &[false; 15]).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1000.0f64..1000.0, 1..40), cols in 1usize..8) {
        let rows = v.len() / cols;
        prop_assume!(rows > 0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[rows, cols], v[..rows * cols].to_vec()).unwrap());
        let y = g.row_softmax(x).unwrap();
        for r in 0..rows {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_standardizes(v in proptest::collection::vec(-50.0f64..50.0, 24..96), spread in 0.5f64..10.0) {
        let d = 3;
        let b = v.len() / d;
        let data: Vec<f64> = v[..b * d].iter().enumerate().map(|(i, x)| x * spread + i as f64 % 7.0).collect();
        // skip near-constant columns, where eps dominates the variance
        for j in 0..d {
            let col: Vec<f64> = (0..b).map(|r| data[r * d + j]).collect();
            let m = col.iter().sum::<f64>() / b as f64;
            prop_assume!(col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b as f64) > 0.1);
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[b, d], data).unwrap());
        let one = g.constant(Tensor::full(&[d], 1.0));
        let zero = g.constant(Tensor::zeros(&[d]));
        let y = g.batch_norm_train(x, one, zero).unwrap();
        let out = g.value(y).data();
        for j in 0..d {
            let col: Vec<f64> = (0..b).map(|r| out[r * d + j]).collect();
            let m = col.iter().sum::<f64>() / b as f64;
            let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / b as f64;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
