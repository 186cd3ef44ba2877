//! Encoder–decoder transformer over grid tokens.
//!
//! Each token's value and timestamp are projected to `d_embed` and summed with
//! a fixed sinusoidal positional row. Only kept tokens (plus a CLS slot) enter
//! the encoder; the decoder sees the full grid with a shared mask token at
//! every hidden or missing slot and predicts one scalar per slot.

mod forward;
mod layers;

pub use forward::Forward;

use std::sync::OnceLock;

use aidmae_tensor::{ParamId, ParamStore, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Grid length `L` (number of measurement tokens).
    pub grid_len: usize,
    pub d_embed: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub mlp_ratio: f64,
    pub dec_embed: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
    /// Multiplier applied to hour timestamps before the time projection.
    pub time_scale: f64,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_len: 0,
            d_embed: 64,
            enc_depth: 8,
            enc_heads: 8,
            mlp_ratio: 4.0,
            dec_embed: 64,
            dec_depth: 4,
            dec_heads: 4,
            head_hidden: 32,
            head_dropout: 0.1,
            time_scale: 1.0 / 24.0,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.grid_len == 0 {
            return fail("grid_len must be positive".into());
        }
        for (name, d) in [("d_embed", self.d_embed), ("dec_embed", self.dec_embed)] {
            if d == 0 || d % 2 != 0 {
                return fail(format!("{name}={d} must be positive and even"));
            }
        }
        if self.enc_heads == 0 || !self.d_embed.is_multiple_of(self.enc_heads) {
            return fail(format!(
                "d_embed={} not divisible by enc_heads={}",
                self.d_embed, self.enc_heads
            ));
        }
        if self.dec_heads == 0 || !self.dec_embed.is_multiple_of(self.dec_heads) {
            return fail(format!(
                "dec_embed={} not divisible by dec_heads={}",
                self.dec_embed, self.dec_heads
            ));
        }
        if self.mlp_hidden(self.d_embed) == 0 || self.head_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return fail(format!("head_dropout={} not in [0,1)", self.head_dropout));
        }
        Ok(())
    }

    pub(crate) fn mlp_hidden(&self, width: usize) -> usize {
        (width as f64 * self.mlp_ratio).round() as usize
    }
}

/// Fixed sinusoidal table: `P[pos, 2k] = sin(pos / 10000^(2k/d))`,
/// `P[pos, 2k+1] = cos(pos / 10000^(2k/d))`.
pub fn sinusoidal_pe(len: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding width {d} must be even")));
    }
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for k in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data[pos * d + 2 * k] = angle.sin();
            data[pos * d + 2 * k + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![len, d], data)?)
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Embeddings, encoder blocks, CLS and pad tokens.
    Encoder,
    /// Decoder blocks, mask token and reconstruction head.
    Decoder,
    /// Classification head.
    Head,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct BlockIds {
    pub norm1: LayerNormIds,
    pub query: LinearIds,
    pub key: LinearIds,
    pub value: LinearIds,
    pub out: LinearIds,
    pub norm2: LayerNormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
    pub heads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ModelIds {
    pub value_proj: LinearIds,
    pub time_proj: LinearIds,
    pub cls_token: ParamId,
    pub pad_token: ParamId,
    pub mask_token: ParamId,
    pub encoder: Vec<BlockIds>,
    pub enc_norm: LayerNormIds,
    pub dec_proj: Option<LinearIds>,
    pub decoder: Vec<BlockIds>,
    pub dec_norm: LayerNormIds,
    pub recon_head: LinearIds,
    pub cls_fc1: LinearIds,
    pub cls_fc2: LinearIds,
}

/// Model weights plus the frozen positional tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    groups: Vec<ParamGroup>,
    ids: ModelIds,
    #[serde(skip)]
    pe_cache: OnceLock<(Tensor, Tensor)>,
}

struct Builder<'r, R: Rng> {
    store: ParamStore,
    groups: Vec<ParamGroup>,
    group: ParamGroup,
    normal: Normal<f64>,
    std: f64,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.groups.push(self.group);
        self.store.add(name, t)
    }

    /// Normal(0, std) truncated at two standard deviations.
    fn trunc_normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = self.normal.sample(self.rng);
                if v.abs() <= 2.0 * self.std {
                    break v;
                }
            })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape");
        self.add(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            weight: self.trunc_normal(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: self.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> LayerNormIds {
        LayerNormIds {
            gain: self.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: self.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn block(&mut self, name: &str, d: usize, heads: usize, hidden: usize) -> BlockIds {
        BlockIds {
            norm1: self.layer_norm(&format!("{name}.norm1"), d),
            query: self.linear(&format!("{name}.attn.query"), d, d),
            key: self.linear(&format!("{name}.attn.key"), d, d),
            value: self.linear(&format!("{name}.attn.value"), d, d),
            out: self.linear(&format!("{name}.attn.out"), d, d),
            norm2: self.layer_norm(&format!("{name}.norm2"), d),
            fc1: self.linear(&format!("{name}.mlp.fc1"), d, hidden),
            fc2: self.linear(&format!("{name}.mlp.fc2"), hidden, d),
            heads,
        }
    }
}

impl Model {
    /// Fresh model with truncated-normal weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init, 0);
        let std = config.init_std;
        let mut b = Builder {
            store: ParamStore::new(),
            groups: Vec::new(),
            group: ParamGroup::Encoder,
            normal: Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?,
            std,
            rng: &mut rng,
        };
        let d = config.d_embed;
        let dd = config.dec_embed;

        let value_proj = b.linear("embed.value", 1, d);
        let time_proj = b.linear("embed.time", 1, d);
        let cls_token = b.trunc_normal("cls_token".into(), &[1, d]);
        let pad_token = b.trunc_normal("pad_token".into(), &[1, d]);
        let encoder = (0..config.enc_depth)
            .map(|i| b.block(&format!("enc.{i}"), d, config.enc_heads, config.mlp_hidden(d)))
            .collect();
        let enc_norm = b.layer_norm("enc.norm", d);

        b.group = ParamGroup::Decoder;
        let mask_token = b.trunc_normal("mask_token".into(), &[1, dd]);
        let dec_proj = (dd != d).then(|| b.linear("dec.proj", d, dd));
        let decoder = (0..config.dec_depth)
            .map(|i| b.block(&format!("dec.{i}"), dd, config.dec_heads, config.mlp_hidden(dd)))
            .collect();
        let dec_norm = b.layer_norm("dec.norm", dd);
        let recon_head = b.linear("dec.recon", dd, 1);

        b.group = ParamGroup::Head;
        let cls_fc1 = b.linear("head.fc1", d, config.head_hidden);
        let cls_fc2 = b.linear("head.fc2", config.head_hidden, 1);

        let ids = ModelIds {
            value_proj,
            time_proj,
            cls_token,
            pad_token,
            mask_token,
            encoder,
            enc_norm,
            dec_proj,
            decoder,
            dec_norm,
            recon_head,
            cls_fc1,
            cls_fc2,
        };
        let (store, groups) = (b.store, b.groups);
        Ok(Model {
            config,
            store,
            groups,
            ids,
            pe_cache: OnceLock::new(),
        })
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    /// Re-draws the classification head, leaving every other weight intact.
    pub fn reset_head(&mut self, seed: u64) -> Result<()> {
        let fresh = Model::new(self.config.clone(), seed)?;
        for (id, p) in fresh.store.iter() {
            if fresh.group_of(id) == ParamGroup::Head {
                self.store.get_mut(id).value = p.value.clone();
            }
        }
        Ok(())
    }

    /// Freezes or unfreezes every parameter of `group`.
    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .map(|(id, _)| id)
            .filter(|&id| self.group_of(id) == group)
            .collect();
        for id in ids {
            self.store.get_mut(id).requires_grad = trainable;
        }
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    fn build_positional_tables(&self) -> Result<(Tensor, Tensor)> {
        let l = self.config.grid_len;
        let enc = sinusoidal_pe(l, self.config.d_embed)?;
        let dd = self.config.dec_embed;
        let dec_rows = sinusoidal_pe(l, dd)?;
        let mut data = vec![0.0; dd];
        data.extend_from_slice(dec_rows.data());
        Ok((enc, Tensor::new(vec![l + 1, dd], data)?))
    }

    pub(crate) fn ids(&self) -> &ModelIds {
        &self.ids
    }

    /// Encoder table `[L, d_embed]` and decoder table `[L + 1, dec_embed]`
    /// whose first (CLS) row is zero. Never touched by the optimizer.
    pub fn positional_tables(&self) -> Result<&(Tensor, Tensor)> {
        if let Some(t) = self.pe_cache.get() {
            return Ok(t);
        }
        let t = self.build_positional_tables()?;
        Ok(self.pe_cache.get_or_init(|| t))
    }
}
