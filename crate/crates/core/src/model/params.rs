use super::{BoundBlock, BoundParams, ModelConfig};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Tensor,
    pub qkv: Tensor,
    pub attn_out: Tensor,
    pub mlp_norm: Tensor,
    pub mlp_in: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out: Tensor,
    pub mlp_out_bias: Tensor,
}

const BLOCK_FIELDS: [&str; 8] = [
    "attn_norm",
    "qkv",
    "attn_out",
    "mlp_norm",
    "mlp_in",
    "mlp_in_bias",
    "mlp_out",
    "mlp_out_bias",
];

impl BlockParams {
    fn fields(&self) -> [&Tensor; 8] {
        [
            &self.attn_norm,
            &self.qkv,
            &self.attn_out,
            &self.mlp_norm,
            &self.mlp_in,
            &self.mlp_in_bias,
            &self.mlp_out,
            &self.mlp_out_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.attn_norm,
            &mut self.qkv,
            &mut self.attn_out,
            &mut self.mlp_norm,
            &mut self.mlp_in,
            &mut self.mlp_in_bias,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ]
    }
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Embedding,
    /// Transformer block producing hidden layer `k` (1-based).
    Block(usize),
    FinalNorm,
    Head,
}

impl ParamGroup {
    /// True when this tensor can influence hidden layer `layer`.
    pub fn feeds_layer(self, layer: usize) -> bool {
        match self {
            ParamGroup::Embedding => true,
            ParamGroup::Block(k) => k <= layer,
            ParamGroup::FinalNorm | ParamGroup::Head => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Tensor,
    /// `d × V`; `None` when tied to the token embedding.
    pub head: Option<Tensor>,
}

/// Deterministic initialization: normal(0, 0.02) weights (residual output
/// projections scaled by 1/sqrt(2L)), zero biases, unit norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    // residual output projections are shrunk by 1/sqrt(2L)
    let residual_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
    let mut draw = |shape: &[usize], scale: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| scale * normal.sample(&mut rng)).collect()).unwrap()
    };
    let (d, v, f) = (config.hidden_size, config.vocab_size, config.ffn_size());
    let tok_emb = draw(&[v, d], 1.0);
    let pos_emb = draw(&[config.max_seq_len, d], 1.0);
    let blocks = (0..config.n_layers)
        .map(|_| BlockParams {
            attn_norm: Tensor::full(&[d], 1.0),
            qkv: draw(&[d, 3 * d], 1.0),
            attn_out: draw(&[d, d], residual_scale),
            mlp_norm: Tensor::full(&[d], 1.0),
            mlp_in: draw(&[d, f], 1.0),
            mlp_in_bias: Tensor::zeros(&[f]),
            mlp_out: draw(&[f, d], residual_scale),
            mlp_out_bias: Tensor::zeros(&[d]),
        })
        .collect();
    let final_norm = Tensor::full(&[d], 1.0);
    let head = (!config.tie_output_head).then(|| draw(&[d, v], 1.0));
    Ok(ModelParams {
        config: config.clone(),
        seed,
        tok_emb,
        pos_emb,
        blocks,
        final_norm,
        head,
    })
}

impl ModelParams {
    /// Every parameter tensor with its stable name and group, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), ParamGroup::Embedding, &self.tok_emb),
            ("pos_emb".to_string(), ParamGroup::Embedding, &self.pos_emb),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{k}.{field}"), ParamGroup::Block(k + 1), t));
            }
        }
        out.push(("final_norm".to_string(), ParamGroup::FinalNorm, &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), ParamGroup::Head, h));
        }
        out
    }

    /// Mutable tensors in [`ModelParams::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.named_tensors().into_iter().map(|(_, g, _)| g).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Records every tensor as a leaf; `trainable` selects param vs constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let blocks: Vec<BoundBlock> = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                attn_norm: leaf(&b.attn_norm),
                qkv: leaf(&b.qkv),
                attn_out: leaf(&b.attn_out),
                mlp_norm: leaf(&b.mlp_norm),
                mlp_in: leaf(&b.mlp_in),
                mlp_in_bias: leaf(&b.mlp_in_bias),
                mlp_out: leaf(&b.mlp_out),
                mlp_out_bias: leaf(&b.mlp_out_bias),
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        let explicit_head = self.head.as_ref().map(&mut leaf);
        let mut leaves = vec![tok_emb, pos_emb];
        for b in &blocks {
            leaves.extend([
                b.attn_norm,
                b.qkv,
                b.attn_out,
                b.mlp_norm,
                b.mlp_in,
                b.mlp_in_bias,
                b.mlp_out,
                b.mlp_out_bias,
            ]);
        }
        leaves.push(final_norm);
        let head = match explicit_head {
            Some(h) => {
                leaves.push(h);
                h
            }
            None => g.transpose(tok_emb).expect("embedding is 2-D"),
        };
        BoundParams {
            config: self.config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            head,
            leaves,
            frozen: None,
        }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against a freshly shaped template.
    pub fn from_named(config: &ModelConfig, seed: u64, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = init_params(config, seed)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: "load tensor",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }
}
