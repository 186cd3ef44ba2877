mod common;

use aidmae::data::TokenArray;
use aidmae::masking::{MaskPlan, SlotOrigin};
use aidmae::model::Model;
use aidmae::objective::batch_reconstruction_loss;
use aidmae_tensor::{Tape, Tensor};
use common::*;
use rand::Rng;

#[test]
fn pretraining_gradient_matches_finite_differences() {
    for seed in [3, 4] {
        let (worst, checked) = pretrain_gradient_error(seed, 0.3);
        assert!(checked > 1000);
        assert!(worst < 1e-4, "seed {seed}: max relative error {worst:e}");
    }
}

fn batch(seed: u64) -> (Model, Vec<TokenArray>, Vec<MaskPlan>) {
    let mut r = rng(seed);
    let model = Model::new(toy_config(0.3), seed).unwrap();
    let samples: Vec<TokenArray> = (0..3).map(|i| random_sample(&mut r, 8, 0.6, i)).collect();
    let plans = random_plans(&mut r, &samples, 0.4);
    (model, samples, plans)
}

#[test]
fn pad_token_never_reaches_real_positions() {
    for seed in 0..10 {
        let (mut model, samples, plans) = batch(seed);
        let refs: Vec<&TokenArray> = samples.iter().collect();
        let run = |m: &Model| {
            let tape = Tape::new();
            let f = m.reconstruct(&tape, &refs, &plans).unwrap();
            let h = f.hidden.data().to_vec();
            let r = f.recon.data().to_vec();
            (h, r, f.batch)
        };
        let (h0, r0, b) = run(&model);
        let pad = model.param_id("pad_token").unwrap();
        let mut r = rng(seed + 100);
        for v in model.store.get_mut(pad).value.data_mut() {
            *v = r.random_range(-50.0..50.0);
        }
        let (h1, r1, _) = run(&model);
        let d = model.config.d_embed;
        let s = b.seq_len();
        for (bi, origins) in b.origin.iter().enumerate() {
            for (pos, o) in origins.iter().enumerate() {
                let row = (bi * s + pos) * d..(bi * s + pos + 1) * d;
                if *o != SlotOrigin::Pad {
                    assert_eq!(h0[row.clone()], h1[row], "seed {seed} sample {bi} slot {pos}");
                }
            }
        }
        assert_eq!(r0, r1);
    }
}

#[test]
fn encoder_outputs_ignore_hidden_and_missing_values() {
    for seed in 0..10 {
        let (model, samples, plans) = batch(seed);
        let refs: Vec<&TokenArray> = samples.iter().collect();
        let tape = Tape::new();
        let grid: Vec<f64> = samples.iter().flat_map(|s| s.values.clone()).collect();
        let values = tape.leaf(Tensor::new(vec![3, 8], grid).unwrap(), true);
        let (h, b) = model.encode_values(&tape, values, &refs, &plans).unwrap();
        let mut r = rng(seed);
        let w: Vec<f64> = b
            .origin
            .iter()
            .flat_map(|o| o.iter())
            .flat_map(|o| {
                let real = !matches!(o, SlotOrigin::Pad);
                (0..8).map(move |_| real)
            })
            .map(|real| if real { r.random_range(-1.0..1.0) } else { 0.0 })
            .collect();
        let out = h.mul_const(w).unwrap().sum();
        let g = tape.backward(out).unwrap();
        let g = g.wrt(values).unwrap();
        for (bi, plan) in plans.iter().enumerate() {
            for i in 0..8 {
                let kept = plan.keep_bits()[i];
                let gi = g[bi * 8 + i];
                if kept {
                    assert_ne!(gi, 0.0, "kept slot {i} of sample {bi} has no influence");
                } else {
                    assert_eq!(gi, 0.0, "seed {seed}: hidden slot {i} of sample {bi} leaks");
                }
            }
        }
    }
}

#[test]
fn loss_is_invariant_to_missing_slot_contents() {
    for seed in 0..10 {
        let (model, mut samples, plans) = batch(seed);
        let base = pretrain_loss(&model, &samples.iter().collect::<Vec<_>>(), &plans);
        let mut r = rng(seed + 7);
        for s in &mut samples {
            for i in 0..s.len() {
                if !s.observed[i] {
                    s.values[i] = r.random_range(-1e6..1e6);
                    s.times[i] = r.random_range(-1e3..1e3);
                }
            }
        }
        let after = pretrain_loss(&model, &samples.iter().collect::<Vec<_>>(), &plans);
        assert_eq!(base.to_bits(), after.to_bits());
    }
}

#[test]
fn gradient_flows_to_all_pretraining_weights() {
    let (mut model, samples, plans) = batch(1);
    let refs: Vec<&TokenArray> = samples.iter().collect();
    model.store.ensure_grad_buffers();
    let tape = Tape::new();
    let f = model.reconstruct(&tape, &refs, &plans).unwrap();
    let (loss, _) = batch_reconstruction_loss(&tape, f.recon, &refs, &plans).unwrap();
    tape.backward(loss).unwrap().accumulate_into(&mut model.store);
    for (_, p) in model.store.iter() {
        let touched = p.grad().iter().any(|&g| g != 0.0);
        if p.name.starts_with("head.") {
            assert!(!touched, "{} is not part of the pretraining loss", p.name);
        } else if p.name != "pad_token" {
            assert!(touched, "{} received no gradient", p.name);
        }
    }
}

#[test]
fn classification_requires_matching_grid() {
    let model = Model::new(toy_config(0.02), 0).unwrap();
    let mut r = rng(0);
    let s = random_sample(&mut r, 5, 0.5, 0);
    let tape = Tape::new();
    assert!(model.classify(&tape, &[&s], None).is_err());
}
