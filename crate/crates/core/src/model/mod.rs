//! Pre-norm decoder-only transformer with per-layer hidden-state taps.
//!
//! Layer `k` of [`LayerActivations`] is the residual stream after `k` blocks
//! (`0` is the embedding output). The output head reads a layer through the
//! final RMS norm and `W_out`; the same path serves as the logit lens for
//! intermediate layers, with norm gain and `W_out` detached there.

pub(crate) mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use params::{init_params, BlockParams, ModelParams, ParamGroup};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;

fn default_ffn_mult() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default)]
    pub tie_output_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            hidden_size: 64,
            n_heads: 4,
            vocab_size: 256,
            max_seq_len: 32,
            ffn_mult: 4,
            tie_output_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("hidden_size", self.hidden_size),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.vocab_size <= EOS_ID {
            return Err(Error::Config("vocab_size must cover pad and eos".into()));
        }
        Ok(())
    }

    pub fn ffn_size(&self) -> usize {
        self.ffn_mult * self.hidden_size
    }
}

/// Hidden states `h_0..=h_L`, each `positions × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub layers: Vec<Tensor>,
}

impl LayerActivations {
    pub fn n_layers(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Several token sequences laid end to end as rows of one matrix.
#[derive(Clone, Debug)]
pub struct Packed {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
}

impl Packed {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S], config: &ModelConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("packed batch"));
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Empty("sequence"));
            }
            if s.len() > config.max_seq_len {
                return Err(Error::Length {
                    len: s.len(),
                    max: config.max_seq_len,
                });
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::Index {
                    what: "token id",
                    index: bad,
                    bound: config.vocab_size,
                });
            }
            segments.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Ok(Packed {
            tokens,
            positions,
            segments,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Row index of position `pos` within segment `seg`.
    pub fn row(&self, seg: usize, pos: usize) -> usize {
        self.segments[seg].0 + pos
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub attn_norm: Var,
    pub qkv: Var,
    pub attn_out: Var,
    pub mlp_norm: Var,
    pub mlp_in: Var,
    pub mlp_in_bias: Var,
    pub mlp_out: Var,
    pub mlp_out_bias: Var,
}

/// Model parameters recorded as leaves of a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub config: ModelConfig,
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_norm: Var,
    /// `d × V` projection; a transpose node of `tok_emb` when tied.
    pub head: Var,
    /// Leaves in [`ModelParams::named_tensors`] order.
    pub leaves: Vec<Var>,
    frozen: Option<(Var, Var)>,
}

impl BoundParams {
    /// Detached copies of the final norm gain and output head, created once per graph.
    pub fn frozen_head(&mut self, g: &mut Graph) -> (Var, Var) {
        *self
            .frozen
            .get_or_insert_with(|| (g.detach(self.final_norm), g.detach(self.head)))
    }

    /// Gradient per parameter tensor, zeros where nothing flowed.
    pub fn gradients(&self, g: &Graph) -> Vec<Tensor> {
        self.leaves.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }
}

/// Final norm followed by the output projection.
fn apply_head(g: &mut Graph, h: Var, gain: Var, head: Var) -> Result<Var> {
    let n = g.rms_norm(h, gain)?;
    g.matmul(n, head)
}

fn block_forward(
    g: &mut Graph,
    b: &BoundBlock,
    x: Var,
    packed: &Packed,
    n_heads: usize,
) -> Result<Var> {
    let a = g.rms_norm(x, b.attn_norm)?;
    let qkv = g.matmul(a, b.qkv)?;
    let attn = g.causal_attention(qkv, &packed.segments, n_heads)?;
    let proj = g.matmul(attn, b.attn_out)?;
    let x = g.add(x, proj)?;
    let m = g.rms_norm(x, b.mlp_norm)?;
    let up = g.matmul(m, b.mlp_in)?;
    let up = g.add_bias(up, b.mlp_in_bias)?;
    let act = g.silu(up);
    let down = g.matmul(act, b.mlp_out)?;
    let down = g.add_bias(down, b.mlp_out_bias)?;
    g.add(x, down)
}

/// Hidden states `h_0..=h_upto` for a packed batch.
pub fn hidden_states(g: &mut Graph, bound: &BoundParams, packed: &Packed, upto: usize) -> Result<Vec<Var>> {
    let l = bound.config.n_layers;
    if upto > l {
        return Err(Error::LayerOutOfRange { layer: upto, max: l });
    }
    let tok = g.embedding(bound.tok_emb, &packed.tokens)?;
    let pos = g.embedding(bound.pos_emb, &packed.positions)?;
    let mut h = g.add(tok, pos)?;
    let mut layers = Vec::with_capacity(upto + 1);
    layers.push(h);
    for b in &bound.blocks[..upto] {
        h = block_forward(g, b, h, packed, bound.config.n_heads)?;
        layers.push(h);
    }
    Ok(layers)
}

/// Full forward: logits from the live head on the selected rows of `h_L`
/// (all rows when `rows` is `None`), plus every layer's hidden state.
pub fn forward_graph(
    g: &mut Graph,
    bound: &BoundParams,
    packed: &Packed,
    rows: Option<&[usize]>,
) -> Result<(Var, Vec<Var>)> {
    let layers = hidden_states(g, bound, packed, bound.config.n_layers)?;
    let top = *layers.last().unwrap();
    let h = match rows {
        Some(r) => g.gather_rows(top, r)?,
        None => top,
    };
    let logits = apply_head(g, h, bound.final_norm, bound.head)?;
    Ok((logits, layers))
}

/// Logit lens on a graph: frozen final norm and head applied to `h`.
pub fn early_exit_graph(g: &mut Graph, bound: &mut BoundParams, h: Var) -> Result<Var> {
    let (gain, head) = bound.frozen_head(g);
    apply_head(g, h, gain, head)
}

/// Parameters bound once as constants, reused across many inference passes.
pub struct Session<'a> {
    pub params: &'a ModelParams,
    graph: Graph,
    bound: BoundParams,
    base: usize,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let mut graph = Graph::new();
        let mut bound = params.bind(&mut graph, false);
        bound.frozen_head(&mut graph);
        let base = graph.len();
        Session {
            params,
            graph,
            bound,
            base,
        }
    }

    /// Runs `f` on the bound graph, then discards every node it recorded.
    pub fn run<T>(&mut self, f: impl FnOnce(&mut Graph, &mut BoundParams) -> Result<T>) -> Result<T> {
        let out = f(&mut self.graph, &mut self.bound);
        self.graph.truncate(self.base);
        out
    }

    /// Hidden states of each sequence, unpacked.
    pub fn activations<S: AsRef<[usize]>>(&mut self, seqs: &[S]) -> Result<Vec<LayerActivations>> {
        let packed = Packed::new(seqs, &self.params.config)?;
        let l = self.params.config.n_layers;
        self.run(|g, b| {
            let layers = hidden_states(g, b, &packed, l)?;
            Ok(unpack(g, &layers, &packed))
        })
    }

    /// Per-sequence logits read at `layer` (the live head path at `L`).
    pub fn logits_at<S: AsRef<[usize]>>(&mut self, seqs: &[S], layer: usize) -> Result<Vec<Tensor>> {
        let packed = Packed::new(seqs, &self.params.config)?;
        let l = self.params.config.n_layers;
        if layer > l {
            return Err(Error::LayerOutOfRange { layer, max: l });
        }
        self.run(|g, b| {
            let layers = hidden_states(g, b, &packed, layer)?;
            let logits = if layer == l {
                apply_head(g, layers[layer], b.final_norm, b.head)?
            } else {
                early_exit_graph(g, b, layers[layer])?
            };
            let t = g.value(logits);
            Ok(packed
                .segments
                .iter()
                .map(|&(s, n)| slice_rows(t, s, n))
                .collect())
        })
    }
}

fn slice_rows(t: &Tensor, start: usize, n: usize) -> Tensor {
    let w = t.row_len();
    Tensor::new(vec![n, w], t.data()[start * w..(start + n) * w].to_vec()).unwrap()
}

fn unpack(g: &Graph, layers: &[Var], packed: &Packed) -> Vec<LayerActivations> {
    packed
        .segments
        .iter()
        .map(|&(s, n)| LayerActivations {
            layers: layers.iter().map(|&v| slice_rows(g.value(v), s, n)).collect(),
        })
        .collect()
}

/// Logits for every position plus all layer activations.
pub fn forward(params: &ModelParams, tokens: &[usize]) -> Result<(Tensor, LayerActivations)> {
    let packed = Packed::new(&[tokens], &params.config)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let (logits, layers) = forward_graph(&mut g, &bound, &packed, None)?;
    let acts = LayerActivations {
        layers: layers.iter().map(|&v| g.value(v).clone()).collect(),
    };
    Ok((g.value(logits).clone(), acts))
}

/// Logit lens: final norm and `W_out` applied to `acts.layers[layer]`.
pub fn early_exit_logits(acts: &LayerActivations, layer: usize, params: &ModelParams) -> Result<Tensor> {
    let max = acts.n_layers();
    let h = acts
        .layers
        .get(layer)
        .ok_or(Error::LayerOutOfRange { layer, max })?;
    let mut g = Graph::new();
    let mut bound = params.bind(&mut g, false);
    let hv = g.constant(h.clone());
    let out = early_exit_graph(&mut g, &mut bound, hv)?;
    Ok(g.value(out).clone())
}

/// Index of the first maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for several prompts at once; each continuation stops at
/// `EOS_ID` (not emitted), at its `max_new` budget, or at `max_seq_len`.
pub fn greedy_decode_batch(
    params: &ModelParams,
    prompts: &[Vec<usize>],
    max_new: &[usize],
    at_layer: Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::Empty("prompt"));
    }
    let l = params.config.n_layers;
    let layer = at_layer.unwrap_or(l);
    if layer > l {
        return Err(Error::LayerOutOfRange { layer, max: l });
    }
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    let mut active: Vec<usize> = (0..seqs.len()).filter(|&i| max_new[i] > 0).collect();
    let mut produced = vec![0usize; seqs.len()];
    let mut session = Session::new(params);
    while !active.is_empty() {
        let batch: Vec<&[usize]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let logits = session.logits_at(&batch, layer)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, t) in active.iter().zip(&logits) {
            let next = argmax(t.row(t.rows() - 1));
            if next == EOS_ID {
                continue;
            }
            seqs[i].push(next);
            produced[i] += 1;
            if produced[i] < max_new[i] && seqs[i].len() < params.config.max_seq_len {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(seqs)
}

pub fn greedy_decode(
    params: &ModelParams,
    prompt: &[usize],
    max_new: usize,
    at_layer: Option<usize>,
) -> Result<Vec<usize>> {
    let mut out = greedy_decode_batch(params, &[prompt.to_vec()], &[max_new], at_layer)?;
    Ok(out.pop().unwrap())
}
