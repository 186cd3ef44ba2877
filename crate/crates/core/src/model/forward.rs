use aidmae_tensor::{Tape, Tensor, Var};

use super::layers::{block, layer_norm, linear};
use super::Model;
use crate::data::TokenArray;
use crate::masking::{build_padded_batch, MaskPlan, PaddedBatch, SlotOrigin};
use crate::rng::Rng;
use crate::{Error, Result};

/// Outputs of one reconstruction pass.
pub struct Forward<'t> {
    /// Encoder output `[B, S, d_embed]`, slot 0 is CLS.
    pub hidden: Var<'t>,
    /// Per-slot reconstruction `[B, L]`.
    pub recon: Var<'t>,
    pub batch: PaddedBatch,
}

impl Model {
    fn check_samples(&self, samples: &[&TokenArray]) -> Result<()> {
        let l = self.config.grid_len;
        for s in samples {
            if s.len() != l || s.times.len() != l || s.observed.len() != l {
                return Err(Error::Contract(format!(
                    "sample {}/{} has length {} but the model grid is {l}",
                    s.stay_id,
                    s.day_index,
                    s.len()
                )));
            }
        }
        Ok(())
    }

    /// Token embeddings `value_proj(x) + time_proj(t) + P` for the listed grid
    /// positions, stacked as `[N, d_embed]`; `values` is `[N, 1]`.
    pub fn embed_tokens<'t>(
        &self,
        tape: &'t Tape,
        values: Var<'t>,
        times: &[f64],
        positions: &[usize],
    ) -> Result<Var<'t>> {
        let ids = self.ids();
        let (pe, _) = self.positional_tables()?;
        let n = positions.len();
        let scale = self.config.time_scale;
        let t = tape.constant(Tensor::new(
            vec![n, 1],
            times.iter().map(|t| t * scale).collect(),
        )?);
        let p = tape.constant(pe.clone()).gather_rows(positions.to_vec())?;
        let zx = linear(tape, &self.store, &ids.value_proj, values)?;
        let zt = linear(tape, &self.store, &ids.time_proj, t)?;
        Ok(zx.add(zt)?.add(p)?)
    }

    /// Full-grid values of `samples` as a `[B, L]` constant.
    pub fn grid_values<'t>(&self, tape: &'t Tape, samples: &[&TokenArray]) -> Result<Var<'t>> {
        let l = self.config.grid_len;
        let data: Vec<f64> = samples.iter().flat_map(|s| s.values.iter().copied()).collect();
        Ok(tape.constant(Tensor::new(vec![samples.len(), l], data)?))
    }

    /// Runs the encoder on the kept tokens of each sample.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        samples: &[&TokenArray],
        plans: &[MaskPlan],
    ) -> Result<(Var<'t>, PaddedBatch)> {
        self.check_samples(samples)?;
        let values = self.grid_values(tape, samples)?;
        self.encode_values(tape, values, samples, plans)
    }

    /// [`Model::encode`] with the grid values supplied as a `[B, L]` variable;
    /// only the kept entries are read.
    pub fn encode_values<'t>(
        &self,
        tape: &'t Tape,
        values: Var<'t>,
        samples: &[&TokenArray],
        plans: &[MaskPlan],
    ) -> Result<(Var<'t>, PaddedBatch)> {
        self.check_samples(samples)?;
        let l = self.config.grid_len;
        if values.shape() != [samples.len(), l] {
            return Err(Error::Contract(format!(
                "values {:?} do not match {} samples of length {l}",
                values.shape(),
                samples.len()
            )));
        }
        if samples.len() != plans.len() {
            return Err(Error::Contract(format!(
                "{} samples but {} mask plans",
                samples.len(),
                plans.len()
            )));
        }
        let kept: Vec<&[usize]> = plans.iter().map(|p| p.kept()).collect();
        let batch = build_padded_batch(&kept)?;
        let ids = self.ids();
        let d = self.config.d_embed;

        let (mut flat, mut times, mut positions) = (Vec::new(), Vec::new(), Vec::new());
        let mut row_of = Vec::with_capacity(samples.len());
        for (b, (s, k)) in samples.iter().zip(&kept).enumerate() {
            row_of.push(positions.len());
            for &i in *k {
                flat.push(b * l + i);
                times.push(s.times[i]);
                positions.push(i);
            }
        }
        let n = positions.len();
        let x = values.reshape(&[samples.len() * l, 1])?.gather_rows(flat)?;
        let z = self.embed_tokens(tape, x, &times, &positions)?;
        let cls = tape.param(&self.store, ids.cls_token);
        let pad = tape.param(&self.store, ids.pad_token);
        let table = tape.concat_rows(&[z, cls, pad])?;

        let s = batch.seq_len();
        let mut index = Vec::with_capacity(samples.len() * s);
        for (b, origins) in batch.origin.iter().enumerate() {
            let mut next = row_of[b];
            for o in origins {
                index.push(match o {
                    SlotOrigin::Cls => n,
                    SlotOrigin::Pad => n + 1,
                    SlotOrigin::Token(_) => {
                        next += 1;
                        next - 1
                    }
                });
            }
        }
        let mut h = table
            .gather_rows(index)?
            .reshape(&[samples.len(), s, d])?;
        for blk in &ids.encoder {
            h = block(tape, &self.store, blk, h, Some(&batch.gamma), self.config.ln_eps)?;
        }
        if !ids.encoder.is_empty() {
            h = layer_norm(tape, &self.store, &ids.enc_norm, h, self.config.ln_eps)?;
        }
        Ok((h, batch))
    }

    /// Scatters encoder outputs back onto the full grid, fills every other slot
    /// with the mask token and predicts one value per slot: `[B, L]`.
    pub fn decode<'t>(
        &self,
        tape: &'t Tape,
        hidden: Var<'t>,
        batch: &PaddedBatch,
        plans: &[MaskPlan],
    ) -> Result<Var<'t>> {
        let ids = self.ids();
        let l = self.config.grid_len;
        let dd = self.config.dec_embed;
        let bsz = batch.batch_size();
        let s = batch.seq_len();
        if plans.len() != bsz || hidden.shape() != [bsz, s, self.config.d_embed] {
            return Err(Error::Contract(format!(
                "decoder input {:?} does not match a batch of {bsz} with {s} slots",
                hidden.shape()
            )));
        }

        let mask_row = bsz * s;
        let mut index = Vec::with_capacity(bsz * (l + 1));
        for (b, plan) in plans.iter().enumerate() {
            let origins = &batch.origin[b];
            let aligned = plan.len() == l
                && origins[0] == SlotOrigin::Cls
                && plan.kept().len() == batch.lengths[b]
                && plan
                    .kept()
                    .iter()
                    .enumerate()
                    .all(|(j, &i)| origins[j + 1] == SlotOrigin::Token(i));
            if !aligned {
                return Err(Error::Contract(format!(
                    "mask plan of sample {b} is not aligned with the encoder layout"
                )));
            }
            index.push(b * s);
            let mut slot = vec![mask_row; l];
            for (j, &i) in plan.kept().iter().enumerate() {
                slot[i] = b * s + j + 1;
            }
            index.extend(slot);
        }

        let mut rows = hidden.reshape(&[bsz * s, self.config.d_embed])?;
        if let Some(proj) = &ids.dec_proj {
            rows = linear(tape, &self.store, proj, rows)?;
        }
        let mask = tape.param(&self.store, ids.mask_token);
        let (_, dec_pe) = self.positional_tables()?;
        let mut h = tape
            .concat_rows(&[rows, mask])?
            .gather_rows(index)?
            .reshape(&[bsz, l + 1, dd])?
            .add(tape.constant(dec_pe.clone()))?;
        for blk in &ids.decoder {
            h = block(tape, &self.store, blk, h, None, self.config.ln_eps)?;
        }
        let h = layer_norm(tape, &self.store, &ids.dec_norm, h, self.config.ln_eps)?;
        let out = linear(tape, &self.store, &ids.recon_head, h)?.reshape(&[bsz * (l + 1), 1])?;
        let grid_rows = (0..bsz)
            .flat_map(|b| (1..=l).map(move |i| b * (l + 1) + i))
            .collect();
        Ok(out.gather_rows(grid_rows)?.reshape(&[bsz, l])?)
    }

    /// Full pretraining forward under the given augmented masks.
    pub fn reconstruct<'t>(
        &self,
        tape: &'t Tape,
        samples: &[&TokenArray],
        plans: &[MaskPlan],
    ) -> Result<Forward<'t>> {
        let (hidden, batch) = self.encode(tape, samples, plans)?;
        let recon = self.decode(tape, hidden, &batch, plans)?;
        Ok(Forward {
            hidden,
            recon,
            batch,
        })
    }

    /// CLS rows `[B, d_embed]` of the encoder with every recorded token kept.
    pub fn cls_hidden<'t>(&self, tape: &'t Tape, samples: &[&TokenArray]) -> Result<Var<'t>> {
        let plans: Vec<MaskPlan> = samples
            .iter()
            .map(|s| MaskPlan::keep_all(&s.mask()))
            .collect();
        let (h, batch) = self.encode(tape, samples, &plans)?;
        let s = batch.seq_len();
        let rows = (0..samples.len()).map(|b| b * s).collect();
        Ok(h
            .reshape(&[samples.len() * s, self.config.d_embed])?
            .gather_rows(rows)?)
    }

    /// Classification logits `[B]`. Dropout in the head is active only when
    /// `dropout_rng` is given.
    pub fn classify<'t>(
        &self,
        tape: &'t Tape,
        samples: &[&TokenArray],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var<'t>> {
        let ids = self.ids();
        let cls = self.cls_hidden(tape, samples)?;
        let mut h = linear(tape, &self.store, &ids.cls_fc1, cls)?.gelu();
        if let Some(rng) = dropout_rng {
            h = h.dropout(self.config.head_dropout, true, rng)?;
        }
        let z = linear(tape, &self.store, &ids.cls_fc2, h)?;
        Ok(z.reshape(&[samples.len()])?)
    }

    /// CLS embeddings as plain vectors, one per sample.
    pub fn cls_embeddings(&self, samples: &[&TokenArray]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let h = self.cls_hidden(&tape, samples)?;
        let d = self.config.d_embed;
        let data = h.data();
        Ok(data.chunks(d).map(<[f64]>::to_vec).collect())
    }
}
