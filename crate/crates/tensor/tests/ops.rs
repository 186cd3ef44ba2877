use aidmae_tensor::{Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![1, 1]);
    assert_eq!(c.value().data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn batched_matmul_matches_per_batch_products() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 2, 1], &[1.0, 1.0, 2.0, 0.5]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 8.0]);
}

#[test]
fn softmax_masked_examples() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3, 3]));
    let all = Tensor::full(&[3, 3], 1.0);
    let y = z.softmax_masked(&all).unwrap().value();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let row = tape.constant(Tensor::zeros(&[1, 3]));
    let mask = t(&[1, 3], &[1.0, 1.0, 0.0]);
    let y = row.softmax_masked(&mask).unwrap().value();
    assert_eq!(y.data(), &[0.5, 0.5, 0.0]);

    // mpmath, 40 digits
    let want = [
        0.090_030_573_170_380_46,
        0.244_728_471_054_797_64,
        0.665_240_955_774_821_9,
    ];
    let logits = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let y = logits.softmax_masked(&Tensor::full(&[1, 3], 1.0)).unwrap().value();
    for (a, b) in y.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn fully_masked_row_falls_back_to_uniform_and_is_counted() {
    let tape = Tape::new();
    let z = tape.constant(t(&[2, 2], &[5.0, -1.0, 0.3, 0.1]));
    let mask = t(&[2, 2], &[1.0, 1.0, 0.0, 0.0]);
    let y = z.softmax_masked(&mask).unwrap().value();
    assert_eq!(&y.data()[2..], &[0.5, 0.5]);
    assert_eq!(tape.fully_masked_rows(), 1);
}

#[test]
fn per_sample_mask_broadcasts_over_heads() {
    let tape = Tape::new();
    // [B=2, H=2, T=1, S=2]
    let z = tape.constant(Tensor::zeros(&[2, 2, 1, 2]));
    let mask = t(&[2, 1, 2], &[1.0, 0.0, 1.0, 1.0]);
    let y = z.softmax_masked(&mask).unwrap().value();
    assert_eq!(y.data(), &[1.0, 0.0, 1.0, 0.0, 0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(Tensor::full(&[1, 3], 7.0));
    assert_eq!(x.layer_norm(g, b, 1e-5).unwrap().value().data(), &[0.0; 3]);

    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = x.layer_norm(g, b, 0.0).unwrap().value();
    assert_eq!(y.data(), &[-1.0, 1.0]);
}

#[test]
fn backward_simple_cases() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(vec![0.3, -2.0, 5.0]), true);
    let loss = w.sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let loss = w.mul(w).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    assert!(matches!(
        tape.backward(w.scale(2.0)),
        Err(TensorError::NonScalarLoss(s)) if s == vec![2]
    ));
}

#[test]
fn shared_subexpressions_accumulate_like_a_duplicated_graph() {
    let x0 = vec![0.4, -0.7, 1.1];
    // shared: y = gelu(x); loss = sum(y*y + y)
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(x0.clone()), true);
    let y = x.gelu();
    let loss = y.mul(y).unwrap().add(y).unwrap().sum();
    let g_shared = tape.backward(loss).unwrap().wrt(x).unwrap().to_vec();

    // duplicated: three independent gelu(x) subgraphs
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(x0), true);
    let (y1, y2, y3) = (x.gelu(), x.gelu(), x.gelu());
    let loss = y1.mul(y2).unwrap().add(y3).unwrap().sum();
    let g_dup = tape.backward(loss).unwrap().wrt(x).unwrap().to_vec();
    for (a, b) in g_shared.iter().zip(&g_dup) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn repeated_backward_accumulates_into_params() {
    use aidmae_tensor::ParamStore;
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![1.0, 2.0]));
    for _ in 0..2 {
        let tape = Tape::new();
        let w = tape.param(&store, id);
        let grads = tape.backward(w.mul(w).unwrap().sum()).unwrap();
        grads.accumulate_into(&mut store);
    }
    assert_eq!(store.get(id).grad(), &[4.0, 8.0]);
    store.zero_grad();
    assert_eq!(store.get(id).grad(), &[0.0, 0.0]);
}

#[test]
fn dropout_eval_is_identity_and_train_preserves_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[n], 2.0));
    let same = x.dropout(0.1, false, &mut rng).unwrap();
    assert_eq!(same.id(), x.id());
    let y = x.dropout(0.1, true, &mut rng).unwrap().value();
    let mean = y.data().iter().sum::<f64>() / n as f64;
    assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    assert!(y.data().contains(&0.0));
}

#[test]
fn dropout_is_deterministic_under_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[64], 1.0));
        x.dropout(0.5, true, &mut rng).unwrap().value()
    };
    assert_eq!(run(), run());
}

#[test]
fn permute_and_gather_round_trip() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
    let p = x.permute(&[1, 0]).unwrap();
    assert_eq!(p.shape(), vec![3, 2]);
    assert_eq!(p.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    let back = p.permute(&[1, 0]).unwrap();
    assert_eq!(back.value(), x.value());

    let g = x.gather_rows(vec![1, 1, 0]).unwrap();
    assert_eq!(g.value().data(), &[3.0, 4.0, 5.0, 3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
    assert!(x.gather_rows(vec![2]).is_err());
}

#[test]
fn bce_examples() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::from_vec(vec![0.0]));
    let l = z.bce_with_logits(&[1.0]).unwrap().item().unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

    let z = tape.constant(Tensor::from_vec(vec![800.0]));
    assert_eq!(z.bce_with_logits(&[1.0]).unwrap().item().unwrap(), 0.0);

    // mpmath: ln(1 + e^2)
    let z = tape.constant(Tensor::from_vec(vec![2.0]));
    let l = z.bce_with_logits(&[0.0]).unwrap().item().unwrap();
    assert!((l - 2.126_928_011_042_972_5).abs() < 1e-15);
}

proptest! {
    #[test]
    fn masked_softmax_rows_normalize(
        logits in proptest::collection::vec(-5.0f64..5.0, 12),
        mask_bits in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let tape = Tape::new();
        let mut mask: Vec<f64> = mask_bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        // keep every row non-empty
        for r in 0..3 { mask[r * 4] = 1.0; }
        let z = tape.constant(t(&[3, 4], &logits));
        let y = z.softmax_masked(&t(&[3, 4], &mask)).unwrap().value();
        for r in 0..3 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for j in 0..4 {
                if mask[r * 4 + j] == 0.0 {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }
}

#[test]
fn random_inputs_produce_finite_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(vec![4, 5], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        true,
    );
    let y = x.gelu().softmax().sum();
    assert!(y.item().unwrap().is_finite());
}
