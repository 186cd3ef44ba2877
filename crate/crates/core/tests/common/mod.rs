//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use aidmae::data::TokenArray;
use aidmae::masking::{sample_augmented_mask, MaskPlan};
use aidmae::model::{Model, ModelConfig};
use aidmae::objective::batch_reconstruction_loss;
use aidmae_tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Toy model: L=8, d=8, two encoder blocks, one decoder block.
pub fn toy_config(init_std: f64) -> ModelConfig {
    ModelConfig {
        grid_len: 8,
        d_embed: 8,
        enc_depth: 2,
        enc_heads: 2,
        mlp_ratio: 2.0,
        dec_embed: 8,
        dec_depth: 1,
        dec_heads: 2,
        head_hidden: 4,
        head_dropout: 0.0,
        init_std,
        ..Default::default()
    }
}

/// Random sample with each slot recorded with probability `p_obs` (at least
/// one recorded slot).
pub fn random_sample(rng: &mut ChaCha8Rng, l: usize, p_obs: f64, id: usize) -> TokenArray {
    let mut observed: Vec<bool> = (0..l).map(|_| rng.random::<f64>() < p_obs).collect();
    if !observed.iter().any(|&o| o) {
        observed[rng.random_range(0..l)] = true;
    }
    let values = observed
        .iter()
        .map(|&o| if o { rng.random::<f64>() } else { 0.0 })
        .collect();
    let times = observed
        .iter()
        .map(|&o| if o { (rng.random::<f64>() * 240.0).round() / 10.0 } else { 0.0 })
        .collect();
    TokenArray {
        subject_id: format!("s{id}"),
        stay_id: format!("st{id}"),
        day_index: 0,
        admit_time: id as i64,
        values,
        times,
        observed,
        labels: BTreeMap::new(),
    }
}

pub fn random_plans(rng: &mut ChaCha8Rng, samples: &[TokenArray], rate: f64) -> Vec<MaskPlan> {
    samples
        .iter()
        .map(|s| sample_augmented_mask(&s.mask(), &vec![rate; s.len()], rng))
        .collect()
}

pub fn pretrain_loss(model: &Model, samples: &[&TokenArray], plans: &[MaskPlan]) -> f64 {
    let tape = Tape::new();
    let fwd = model.reconstruct(&tape, samples, plans).unwrap();
    let (loss, _) = batch_reconstruction_loss(&tape, fwd.recon, samples, plans).unwrap();
    loss.item().unwrap()
}

/// Relative error with a floor on the scale: structurally zero gradients
/// (such as attention key biases) compare at the finite-difference noise
/// level, about `eps * |loss| / h`, instead of dividing noise by noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

pub const GRAD_FLOOR: f64 = 1e-6;

/// Largest relative error between the analytic gradient of the pretraining
/// loss and central finite differences over every model weight.
pub fn pretrain_gradient_error(seed: u64, init_std: f64) -> (f64, usize) {
    let mut r = rng(seed);
    let mut model = Model::new(toy_config(init_std), seed).unwrap();
    let samples: Vec<TokenArray> = (0..2).map(|i| random_sample(&mut r, 8, 0.7, i)).collect();
    let plans = random_plans(&mut r, &samples, 0.3);
    let refs: Vec<&TokenArray> = samples.iter().collect();

    model.store.ensure_grad_buffers();
    let tape = Tape::new();
    let fwd = model.reconstruct(&tape, &refs, &plans).unwrap();
    let (loss, _) = batch_reconstruction_loss(&tape, fwd.recon, &refs, &plans).unwrap();
    tape.backward(loss).unwrap().accumulate_into(&mut model.store);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in ids {
        let analytic = model.store.get(id).grad().to_vec();
        for k in 0..analytic.len() {
            let orig = model.store.get(id).value.data()[k];
            model.store.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let plus = pretrain_loss(&model, &refs, &plans);
            model.store.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let minus = pretrain_loss(&model, &refs, &plans);
            model.store.get_mut(id).value.data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k], fd));
            checked += 1;
        }
    }
    (worst, checked)
}
