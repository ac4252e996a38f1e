//! Training objectives: next-token loss on the target-language answer plus
//! optional language-conversion (LC) and English-thinking (ET) terms on
//! intermediate layers.
//!
//! Row conventions for a sequence `x ⧺ y`:
//! - query rows are positions `0..|x|`;
//! - answer rows are positions `|x|-1 .. |x|+|y|-1`, the positions whose
//!   next-token prediction is an answer token.
//!
//! LC-logits reads query rows with no shift (row `t` is supervised by
//! `x_en[t]`); ET-logits reads answer rows and is supervised by `y_en`.
//! Feature terms compare mean-pooled rows against a detached English branch.
//! Intermediate logits go through the frozen head, so `W_out` and the final
//! norm only ever learn from the final-layer term.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{early_exit_graph, forward_graph, hidden_states, BoundParams, ModelParams, Packed, PAD_ID};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelExample {
    pub x_tgt: Vec<usize>,
    pub x_en: Vec<usize>,
    pub y_tgt: Vec<usize>,
    pub y_en: Vec<usize>,
}

impl ParallelExample {
    pub fn validate(&self) -> Result<()> {
        if self.x_tgt.len() != self.x_en.len() {
            return Err(Error::Alignment {
                what: "query",
                tgt: self.x_tgt.len(),
                en: self.x_en.len(),
            });
        }
        if self.y_tgt.len() != self.y_en.len() {
            return Err(Error::Alignment {
                what: "answer",
                tgt: self.y_tgt.len(),
                en: self.y_en.len(),
            });
        }
        for seg in [&self.x_tgt, &self.x_en, &self.y_tgt, &self.y_en] {
            if seg.is_empty() {
                return Err(Error::Empty("example segment"));
            }
            if seg.contains(&PAD_ID) {
                return Err(Error::Config("pad token inside example segment".into()));
            }
        }
        Ok(())
    }

    /// The same pair with the English side substituted for the target side.
    pub fn english_only(&self) -> ParallelExample {
        ParallelExample {
            x_tgt: self.x_en.clone(),
            x_en: self.x_en.clone(),
            y_tgt: self.y_en.clone(),
            y_en: self.y_en.clone(),
        }
    }

    pub fn target_sequence(&self) -> Vec<usize> {
        [self.x_tgt.as_slice(), self.y_tgt.as_slice()].concat()
    }

    pub fn english_sequence(&self) -> Vec<usize> {
        [self.x_en.as_slice(), self.y_en.as_slice()].concat()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    None,
    Logits,
    Feature,
}

impl Mode {
    pub fn is_active(self) -> bool {
        self != Mode::None
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisionSpec {
    #[serde(default)]
    pub lc_mode: Mode,
    #[serde(default)]
    pub et_mode: Mode,
    #[serde(default)]
    pub layer_i: usize,
    #[serde(default)]
    pub layer_j: usize,
    #[serde(default = "one")]
    pub weight_lc: f64,
    #[serde(default = "one")]
    pub weight_et: f64,
}

impl Default for SupervisionSpec {
    fn default() -> Self {
        SupervisionSpec::none()
    }
}

impl SupervisionSpec {
    pub fn none() -> Self {
        SupervisionSpec {
            lc_mode: Mode::None,
            et_mode: Mode::None,
            layer_i: 0,
            layer_j: 0,
            weight_lc: 1.0,
            weight_et: 1.0,
        }
    }

    /// Both stages in the same mode.
    pub fn both(mode: Mode, layer_i: usize, layer_j: usize) -> Self {
        SupervisionSpec {
            lc_mode: mode,
            et_mode: mode,
            layer_i,
            layer_j,
            ..SupervisionSpec::none()
        }
    }

    pub fn lc_only(mode: Mode, layer_i: usize) -> Self {
        SupervisionSpec {
            lc_mode: mode,
            layer_i,
            ..SupervisionSpec::none()
        }
    }

    pub fn et_only(mode: Mode, layer_j: usize) -> Self {
        SupervisionSpec {
            et_mode: mode,
            layer_j,
            ..SupervisionSpec::none()
        }
    }

    pub fn is_none(&self) -> bool {
        !self.lc_mode.is_active() && !self.et_mode.is_active()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        for (name, w) in [("weight_lc", self.weight_lc), ("weight_et", self.weight_et)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        let lc = self.lc_mode.is_active();
        let et = self.et_mode.is_active();
        if lc && et {
            if !(0 < self.layer_i && self.layer_i < self.layer_j && self.layer_j < n_layers) {
                return Err(Error::Config(format!(
                    "need 0 < layer_i ({}) < layer_j ({}) < n_layers ({n_layers})",
                    self.layer_i, self.layer_j
                )));
            }
        } else if lc || et {
            let k = if lc { self.layer_i } else { self.layer_j };
            if k == 0 || k > n_layers {
                return Err(Error::LayerOutOfRange {
                    layer: k,
                    max: n_layers,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tft: f64,
    pub l_lc: f64,
    pub l_et: f64,
    pub total: f64,
}

/// Graph handles of a composite loss.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub tft: Var,
    pub lc: Option<Var>,
    pub et: Option<Var>,
}

impl TotalLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossBreakdown {
            l_tft: g.value(self.tft).item(),
            l_lc: v(self.lc),
            l_et: v(self.et),
            total: g.value(self.total).item(),
        }
    }
}

pub fn query_rows(packed: &Packed, batch: &[&ParallelExample]) -> Vec<usize> {
    let mut rows = Vec::new();
    for (b, ex) in batch.iter().enumerate() {
        rows.extend((0..ex.x_tgt.len()).map(|p| packed.row(b, p)));
    }
    rows
}

pub fn answer_rows(packed: &Packed, batch: &[&ParallelExample]) -> Vec<usize> {
    let mut rows = Vec::new();
    for (b, ex) in batch.iter().enumerate() {
        let xl = ex.x_tgt.len();
        rows.extend((0..ex.y_tgt.len()).map(|t| packed.row(b, xl - 1 + t)));
    }
    rows
}

fn check_alignment(batch: &[&ParallelExample]) -> Result<()> {
    batch.iter().try_for_each(|ex| ex.validate())
}

/// Forward passes shared between terms of one composite loss.
struct Context<'b> {
    batch: &'b [&'b ParallelExample],
    tgt: Packed,
    tgt_layers: Vec<Var>,
    tgt_logits: Option<Var>,
    en: Option<(Packed, Vec<Var>)>,
}

impl<'b> Context<'b> {
    fn target(
        g: &mut Graph,
        bound: &BoundParams,
        batch: &'b [&'b ParallelExample],
        full: bool,
        depth: usize,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        check_alignment(batch)?;
        let seqs: Vec<Vec<usize>> = batch.iter().map(|e| e.target_sequence()).collect();
        let tgt = Packed::new(&seqs, &bound.config)?;
        let (tgt_logits, tgt_layers) = if full {
            let rows = answer_rows(&tgt, batch);
            let (logits, layers) = forward_graph(g, bound, &tgt, Some(&rows))?;
            (Some(logits), layers)
        } else {
            (None, hidden_states(g, bound, &tgt, depth)?)
        };
        Ok(Context {
            batch,
            tgt,
            tgt_layers,
            tgt_logits,
            en: None,
        })
    }

    fn english(&mut self, g: &mut Graph, bound: &BoundParams, depth: usize) -> Result<&(Packed, Vec<Var>)> {
        let stale = self.en.as_ref().is_some_and(|(_, l)| l.len() <= depth);
        if self.en.is_none() || stale {
            let seqs: Vec<Vec<usize>> = self.batch.iter().map(|e| e.english_sequence()).collect();
            let packed = Packed::new(&seqs, &bound.config)?;
            let layers = hidden_states(g, bound, &packed, depth)?;
            self.en = Some((packed, layers));
        }
        Ok(self.en.as_ref().unwrap())
    }
}

fn all_true(n: usize) -> Vec<bool> {
    vec![true; n]
}

fn tft_term(g: &mut Graph, ctx: &Context) -> Result<Var> {
    let logits = ctx.tgt_logits.expect("full forward");
    let targets: Vec<usize> = ctx.batch.iter().flat_map(|e| e.y_tgt.iter().copied()).collect();
    g.cross_entropy(logits, &targets, &all_true(targets.len()))
}

fn lens_term(
    g: &mut Graph,
    bound: &mut BoundParams,
    ctx: &Context,
    layer: usize,
    rows: &[usize],
    targets: &[usize],
) -> Result<Var> {
    let h = g.gather_rows(ctx.tgt_layers[layer], rows)?;
    let logits = early_exit_graph(g, bound, h)?;
    g.cross_entropy(logits, targets, &all_true(targets.len()))
}

fn lc_logits_term(g: &mut Graph, bound: &mut BoundParams, ctx: &Context, layer: usize) -> Result<Var> {
    let rows = query_rows(&ctx.tgt, ctx.batch);
    let targets: Vec<usize> = ctx.batch.iter().flat_map(|e| e.x_en.iter().copied()).collect();
    lens_term(g, bound, ctx, layer, &rows, &targets)
}

fn et_logits_term(g: &mut Graph, bound: &mut BoundParams, ctx: &Context, layer: usize) -> Result<Var> {
    let rows = answer_rows(&ctx.tgt, ctx.batch);
    let targets: Vec<usize> = ctx.batch.iter().flat_map(|e| e.y_en.iter().copied()).collect();
    lens_term(g, bound, ctx, layer, &rows, &targets)
}

fn pool(g: &mut Graph, h: Var, rows: impl Iterator<Item = usize>) -> Result<Var> {
    let mut mask = vec![false; g.value(h).rows()];
    for r in rows {
        mask[r] = true;
    }
    g.mean_pool(h, &mask)
}

#[derive(Clone, Copy)]
enum Span {
    Query,
    Answer,
}

fn span_rows(packed: &Packed, b: usize, ex: &ParallelExample, span: Span) -> std::ops::Range<usize> {
    let xl = ex.x_tgt.len();
    match span {
        Span::Query => packed.row(b, 0)..packed.row(b, xl),
        Span::Answer => packed.row(b, xl - 1)..packed.row(b, xl - 1 + ex.y_tgt.len()),
    }
}

/// Mean over examples of `1 - cos(detach(pool(h_en[en_layer])), pool(h_tgt[tgt_layer]))`.
fn feature_term(
    g: &mut Graph,
    bound: &BoundParams,
    ctx: &mut Context,
    en_layer: usize,
    tgt_layer: usize,
    span: Span,
) -> Result<Var> {
    let (en_packed, en_layers) = ctx.english(g, bound, en_layer)?.clone();
    let mut losses = Vec::with_capacity(ctx.batch.len());
    for (b, ex) in ctx.batch.iter().enumerate() {
        let en = pool(g, en_layers[en_layer], span_rows(&en_packed, b, ex, span))?;
        let en = g.detach(en);
        let tgt = pool(g, ctx.tgt_layers[tgt_layer], span_rows(&ctx.tgt, b, ex, span))?;
        losses.push(g.cosine_loss(en, tgt)?);
    }
    let stacked = g.concat_rows(&losses)?;
    let s = g.sum(stacked);
    Ok(g.scale(s, 1.0 / losses.len() as f64))
}

/// Next-token cross-entropy on `x_tgt ⧺ y_tgt`, answer rows only.
pub fn loss_tft(g: &mut Graph, bound: &BoundParams, batch: &[&ParallelExample]) -> Result<Var> {
    let ctx = Context::target(g, bound, batch, true, bound.config.n_layers)?;
    tft_term(g, &ctx)
}

/// Logit-lens cross-entropy at `layer_i` on query rows against `x_en`.
pub fn loss_lc_logits(
    g: &mut Graph,
    bound: &mut BoundParams,
    batch: &[&ParallelExample],
    layer_i: usize,
) -> Result<Var> {
    let ctx = Context::target(g, bound, batch, false, layer_i)?;
    lc_logits_term(g, bound, &ctx, layer_i)
}

/// Cosine loss between pooled query rows at `layer_i` of both branches.
pub fn loss_lc_feature(g: &mut Graph, bound: &BoundParams, batch: &[&ParallelExample], layer_i: usize) -> Result<Var> {
    let mut ctx = Context::target(g, bound, batch, false, layer_i)?;
    feature_term(g, bound, &mut ctx, layer_i, layer_i, Span::Query)
}

/// Logit-lens cross-entropy at `layer_j` on answer rows against `y_en`.
pub fn loss_et_logits(
    g: &mut Graph,
    bound: &mut BoundParams,
    batch: &[&ParallelExample],
    layer_j: usize,
) -> Result<Var> {
    let ctx = Context::target(g, bound, batch, false, layer_j)?;
    et_logits_term(g, bound, &ctx, layer_j)
}

/// Cosine loss between pooled answer rows of English `h_L` and target `h_j`.
pub fn loss_et_feature(g: &mut Graph, bound: &BoundParams, batch: &[&ParallelExample], layer_j: usize) -> Result<Var> {
    let l = bound.config.n_layers;
    let mut ctx = Context::target(g, bound, batch, false, layer_j)?;
    feature_term(g, bound, &mut ctx, l, layer_j, Span::Answer)
}

/// `l_tft + λ_LC·l_lc + λ_ET·l_et` with one target forward and at most one
/// English forward.
pub fn loss_total(
    g: &mut Graph,
    bound: &mut BoundParams,
    batch: &[&ParallelExample],
    spec: &SupervisionSpec,
) -> Result<TotalLoss> {
    let l = bound.config.n_layers;
    spec.validate(l)?;
    let mut ctx = Context::target(g, bound, batch, true, l)?;
    let tft = tft_term(g, &ctx)?;
    // English depth: L when ET-feature is on, otherwise layer_i.
    let en_depth = if spec.et_mode == Mode::Feature { l } else { spec.layer_i };
    let lc = match spec.lc_mode {
        Mode::None => None,
        Mode::Logits => Some(lc_logits_term(g, bound, &ctx, spec.layer_i)?),
        Mode::Feature => {
            ctx.english(g, bound, en_depth)?;
            Some(feature_term(g, bound, &mut ctx, spec.layer_i, spec.layer_i, Span::Query)?)
        }
    };
    let et = match spec.et_mode {
        Mode::None => None,
        Mode::Logits => Some(et_logits_term(g, bound, &ctx, spec.layer_j)?),
        Mode::Feature => Some(feature_term(g, bound, &mut ctx, l, spec.layer_j, Span::Answer)?),
    };
    let mut total = tft;
    if let Some(v) = lc {
        let w = g.scale(v, spec.weight_lc);
        total = g.add(total, w)?;
    }
    if let Some(v) = et {
        let w = g.scale(v, spec.weight_et);
        total = g.add(total, w)?;
    }
    Ok(TotalLoss { total, tft, lc, et })
}

/// Loss values without gradients.
pub fn evaluate_losses(params: &ModelParams, batch: &[&ParallelExample], spec: &SupervisionSpec) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let mut bound = params.bind(&mut g, false);
    let t = loss_total(&mut g, &mut bound, batch, spec)?;
    Ok(t.breakdown(&g))
}

/// Per-parameter gradients of the composite loss, in canonical order.
pub fn loss_gradients(
    params: &ModelParams,
    batch: &[&ParallelExample],
    spec: &SupervisionSpec,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mut bound = params.bind(&mut g, true);
    let t = loss_total(&mut g, &mut bound, batch, spec)?;
    g.backward(t.total)?;
    Ok((t.breakdown(&g), bound.gradients(&g)))
}

#[cfg(test)]
mod tests;
