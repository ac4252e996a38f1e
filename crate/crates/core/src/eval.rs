//! Evaluation: answer accuracy, logit-lens decoding, representation
//! alignment, a PCA projection and the ablation / layer-sweep harness.
//!
//! Token accuracy is the mean over examples of the fraction of correct
//! answer tokens, so an exact-match example always counts as 1.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{argmax, greedy_decode_batch, hidden_states, write_checkpoint, ModelParams, Packed, Session};
use crate::plot;
use crate::supervision::ParallelExample;
use crate::syndata::{Dataset, Split};
use crate::trainer::{train, TrainConfig, TrainMetrics};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write;

const BATCH: usize = 64;

/// SHA-256 of the serialized checkpoint.
pub fn params_hash(params: &ModelParams) -> String {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params).expect("in-memory write");
    hex::encode(Sha256::digest(&buf))
}

fn fraction_correct(pred: &[usize], gold: &[usize]) -> f64 {
    let hits = gold.iter().enumerate().filter(|&(k, g)| pred.get(k) == Some(g)).count();
    hits as f64 / gold.len() as f64
}

/// Layers at which the logit-lens readouts are taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LensLayers {
    pub layer_i: Option<usize>,
    pub layer_j: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub task: String,
    pub split: String,
    pub examples: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub layer_i: Option<usize>,
    /// Lens at `layer_i` over query positions, against `x_en`.
    pub lens_accuracy_i: Option<f64>,
    pub layer_j: Option<usize>,
    /// Lens at `layer_j` over answer positions (teacher forced), against `y_en`.
    pub lens_accuracy_j: Option<f64>,
    /// Mean pooled-query cosine between parallel inputs, layers `0..=L`.
    pub cosine_per_layer: Vec<f64>,
    pub checkpoint_hash: String,
    pub dataset_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn opt_layer(v: Option<usize>) -> String {
    v.map_or("-".into(), |x| x.to_string())
}

impl EvalReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = [
            "method", "task", "split", "n", "em", "tok_acc", "i", "lens_i", "j", "lens_j", "cos@i", "checkpoint", "dataset",
        ];
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let cos_i = r.layer_i.and_then(|i| r.cosine_per_layer.get(i).copied());
            table.push(vec![
                r.method.clone(),
                r.task.clone(),
                r.split.clone(),
                r.examples.to_string(),
                format!("{:.4}", r.exact_match),
                format!("{:.4}", r.token_accuracy),
                opt_layer(r.layer_i),
                opt(r.lens_accuracy_i),
                opt_layer(r.layer_j),
                opt(r.lens_accuracy_j),
                opt(cos_i),
                r.checkpoint_hash[..12.min(r.checkpoint_hash.len())].to_string(),
                r.dataset_hash[..12.min(r.dataset_hash.len())].to_string(),
            ]);
        }
        aligned(&table)
    }
}

/// Left-aligned columns separated by two spaces.
pub fn aligned(table: &[Vec<String>]) -> String {
    let cols = table.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| table.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in table {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn check_vocab(params: &ModelParams, data: &[ParallelExample]) -> Result<()> {
    let v = params.config.vocab_size;
    let bound = data
        .iter()
        .flat_map(|e| e.x_tgt.iter().chain(&e.x_en).chain(&e.y_tgt).chain(&e.y_en))
        .max()
        .map_or(0, |m| m + 1);
    if bound > v {
        return Err(Error::Config(format!("vocab mismatch: data uses id {} but model has {v}", bound - 1)));
    }
    Ok(())
}

/// `(exact-match rate, token accuracy)` of predicted against gold answers.
pub fn score_answers<P: AsRef<[usize]>, G: AsRef<[usize]>>(pred: &[P], gold: &[G]) -> Result<(f64, f64)> {
    if gold.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if pred.len() != gold.len() {
        return Err(Error::Config(format!("{} predictions for {} answers", pred.len(), gold.len())));
    }
    let mut em = 0.0;
    let mut tok = 0.0;
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (p.as_ref(), g.as_ref());
        if g.is_empty() {
            return Err(Error::Empty("gold answer"));
        }
        em += f64::from(u8::from(p == g));
        tok += fraction_correct(p, g);
    }
    let n = gold.len() as f64;
    Ok((em / n, tok / n))
}

/// Greedy answers for the target queries, `|y_tgt|` new tokens each.
pub fn decode_answers(params: &ModelParams, data: &[ParallelExample]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(BATCH) {
        let prompts: Vec<Vec<usize>> = chunk.iter().map(|e| e.x_tgt.clone()).collect();
        let budget: Vec<usize> = chunk.iter().map(|e| e.y_tgt.len()).collect();
        let full = greedy_decode_batch(params, &prompts, &budget, None)?;
        out.extend(full.into_iter().zip(chunk).map(|(s, e)| s[e.x_tgt.len()..].to_vec()));
    }
    Ok(out)
}

/// Mean fraction of `x_en` tokens recovered by the lens at `layer` on the target query.
pub fn lens_query_accuracy(params: &ModelParams, data: &[ParallelExample], layer: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut session = Session::new(params);
    let mut sum = 0.0;
    for chunk in data.chunks(BATCH) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.x_tgt.as_slice()).collect();
        for (t, e) in session.logits_at(&seqs, layer)?.iter().zip(chunk) {
            let pred: Vec<usize> = (0..e.x_en.len()).map(|r| argmax(t.row(r))).collect();
            sum += fraction_correct(&pred, &e.x_en);
        }
    }
    Ok(sum / data.len() as f64)
}

/// Mean fraction of `y_en` tokens predicted by the lens at `layer` over the
/// answer positions of the teacher-forced target sequence.
pub fn lens_answer_accuracy(params: &ModelParams, data: &[ParallelExample], layer: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut session = Session::new(params);
    let mut sum = 0.0;
    for chunk in data.chunks(BATCH) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.target_sequence()).collect();
        for (t, e) in session.logits_at(&seqs, layer)?.iter().zip(chunk) {
            let start = e.x_tgt.len() - 1;
            let pred: Vec<usize> = (0..e.y_en.len()).map(|k| argmax(t.row(start + k))).collect();
            sum += fraction_correct(&pred, &e.y_en);
        }
    }
    Ok(sum / data.len() as f64)
}

/// Mean-pooled query hidden states, `[layer][sequence]`.
pub fn pooled_queries<S: AsRef<[usize]>>(params: &ModelParams, queries: &[S]) -> Result<Vec<Vec<Vec<f64>>>> {
    let l = params.config.n_layers;
    let mut out = vec![Vec::with_capacity(queries.len()); l + 1];
    let mut session = Session::new(params);
    for chunk in queries.chunks(BATCH) {
        let packed = Packed::new(chunk, &params.config)?;
        let layer_values: Vec<Tensor> = session.run(|g, b| {
            let layers = hidden_states(g, b, &packed, l)?;
            Ok(layers.iter().map(|&v| g.value(v).clone()).collect())
        })?;
        for (k, h) in layer_values.iter().enumerate() {
            for &(start, n) in &packed.segments {
                let mut acc = vec![0.0; h.row_len()];
                for r in start..start + n {
                    for (a, b) in acc.iter_mut().zip(h.row(r)) {
                        *a += b;
                    }
                }
                out[k].push(acc.iter().map(|a| a / n as f64).collect());
            }
        }
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let sa: f64 = a.iter().map(|v| v * v).sum();
    let sb: f64 = b.iter().map(|v| v * v).sum();
    if sa == 0.0 || sb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCurve {
    pub per_layer: Vec<f64>,
    /// Pairs dropped at some layer because a pooled vector had zero norm.
    pub skipped: usize,
}

/// Per-layer mean cosine between pooled `x_en` and pooled `x_tgt` states.
pub fn alignment_curve(params: &ModelParams, data: &[ParallelExample]) -> Result<AlignmentCurve> {
    if data.is_empty() {
        return Err(Error::Empty("parallel corpus"));
    }
    let en: Vec<&[usize]> = data.iter().map(|e| e.x_en.as_slice()).collect();
    let tgt: Vec<&[usize]> = data.iter().map(|e| e.x_tgt.as_slice()).collect();
    let pe = pooled_queries(params, &en)?;
    let pt = pooled_queries(params, &tgt)?;
    let mut skipped = 0;
    let per_layer = pe
        .iter()
        .zip(&pt)
        .map(|(le, lt)| {
            let vals: Vec<f64> = le.iter().zip(lt).filter_map(|(a, b)| cosine(a, b)).collect();
            skipped += le.len() - vals.len();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    Ok(AlignmentCurve { per_layer, skipped })
}

/// Full evaluation of one checkpoint on one split.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    split: Split,
    lens: LensLayers,
    method: &str,
    task: &str,
) -> Result<EvalRow> {
    let subset = data.subset(split);
    if subset.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let ex = &subset.examples;
    check_vocab(params, ex)?;
    let l = params.config.n_layers;
    for layer in [lens.layer_i, lens.layer_j].into_iter().flatten() {
        if layer > l {
            return Err(Error::LayerOutOfRange { layer, max: l });
        }
    }
    let answers = decode_answers(params, ex)?;
    let gold: Vec<&[usize]> = ex.iter().map(|e| e.y_tgt.as_slice()).collect();
    let (exact_match, token_accuracy) = score_answers(&answers, &gold)?;
    Ok(EvalRow {
        method: method.to_string(),
        task: task.to_string(),
        split: split.name().to_string(),
        examples: ex.len(),
        exact_match,
        token_accuracy,
        layer_i: lens.layer_i,
        lens_accuracy_i: lens.layer_i.map(|i| lens_query_accuracy(params, ex, i)).transpose()?,
        layer_j: lens.layer_j,
        lens_accuracy_j: lens.layer_j.map(|j| lens_answer_accuracy(params, ex, j)).transpose()?,
        cosine_per_layer: alignment_curve(params, ex)?.per_layer,
        checkpoint_hash: params_hash(params),
        dataset_hash: data.hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub language: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionOutput {
    pub points: Vec<ProjectedPoint>,
    /// Variance captured by each axis.
    pub variance: [f64; 2],
}

/// Mean, the two leading unit axes, and their variances.
pub type PrincipalAxes = (Vec<f64>, [Vec<f64>; 2], [f64; 2]);

/// Top-two principal axes of the centred covariance, each with its
/// largest-magnitude component made positive.
pub fn principal_axes(vectors: &[Vec<f64>]) -> Result<PrincipalAxes> {
    if vectors.len() < 3 {
        return Err(Error::TooShort {
            what: "projection input",
            len: vectors.len(),
            min: 3,
        });
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Config("projection vectors must share a positive dimension".into()));
    }
    let n = vectors.len() as f64;
    let mean: Vec<f64> = (0..d).map(|c| vectors.iter().map(|v| v[c]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for v in vectors {
        for a in 0..d {
            let da = v[a] - mean[a];
            for b in 0..d {
                cov[(a, b)] += da * (v[b] - mean[b]);
            }
        }
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let axis = |rank: usize| -> (Vec<f64>, f64) {
        let Some(&k) = order.get(rank) else {
            return (vec![0.0; d], 0.0);
        };
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-12 * scale {
            return (vec![0.0; d], 0.0);
        }
        let mut u: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let big = (0..d).max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs()).then(b.cmp(&a))).unwrap();
        if u[big] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        (u, lambda)
    };
    let (u1, l1) = axis(0);
    let (u2, l2) = axis(1);
    Ok((mean, [u1, u2], [l1, l2]))
}

pub fn project_2d(vectors: &[Vec<f64>], languages: &[String]) -> Result<ProjectionOutput> {
    if languages.len() != vectors.len() {
        return Err(Error::Config("one language tag per vector".into()));
    }
    let (mean, axes, variance) = principal_axes(vectors)?;
    let dot = |v: &[f64], u: &[f64]| -> f64 { v.iter().zip(&mean).zip(u).map(|((x, m), w)| (x - m) * w).sum() };
    let points = vectors
        .iter()
        .zip(languages)
        .map(|(v, lang)| ProjectedPoint {
            x: dot(v, &axes[0]),
            y: dot(v, &axes[1]),
            language: lang.clone(),
        })
        .collect();
    Ok(ProjectionOutput { points, variance })
}

impl ProjectionOutput {
    pub fn svg(&self, title: &str) -> String {
        let mut classes: Vec<&str> = Vec::new();
        for p in &self.points {
            if !classes.contains(&p.language.as_str()) {
                classes.push(&p.language);
            }
        }
        let pts: Vec<(f64, f64, usize)> = self
            .points
            .iter()
            .map(|p| (p.x, p.y, classes.iter().position(|c| *c == p.language).unwrap()))
            .collect();
        plot::scatter(title, &pts, &classes)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&serde_json::to_string(p).expect("point serializes"));
            out.push('\n');
        }
        out
    }
}

/// Pooled query states at `layer` for English and target inputs of a split.
pub fn project_layer(params: &ModelParams, data: &[ParallelExample], layer: usize) -> Result<ProjectionOutput> {
    let l = params.config.n_layers;
    if layer > l {
        return Err(Error::LayerOutOfRange { layer, max: l });
    }
    let en: Vec<&[usize]> = data.iter().map(|e| e.x_en.as_slice()).collect();
    let tgt: Vec<&[usize]> = data.iter().map(|e| e.x_tgt.as_slice()).collect();
    let mut vectors = pooled_queries(params, &en)?.swap_remove(layer);
    vectors.extend(pooled_queries(params, &tgt)?.swap_remove(layer));
    let mut langs = vec!["en".to_string(); data.len()];
    langs.extend(vec!["tgt".to_string(); data.len()]);
    project_2d(&vectors, &langs)
}

/// One ablation row: a name and the training config to run from the shared init.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub name: String,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub report: EvalReport,
    pub init_hash: String,
    pub params: Vec<ModelParams>,
    pub metrics: Vec<TrainMetrics>,
}

/// Trains every entry from the same initial parameters and evaluates each
/// result on `split`, with lens layers taken from the entry's supervision
/// when set and from `lens` otherwise.
pub fn run_ablation(
    init: &ModelParams,
    entries: &[AblationEntry],
    data: &Dataset,
    split: Split,
    lens: LensLayers,
    task: &str,
) -> Result<AblationOutcome> {
    if entries.is_empty() {
        return Err(Error::Empty("ablation"));
    }
    let l = init.config.n_layers;
    for e in entries {
        e.train.validate(l)?;
    }
    let train_set = data.subset(Split::Train);
    let mut outcome = AblationOutcome {
        report: EvalReport::default(),
        init_hash: params_hash(init),
        params: Vec::new(),
        metrics: Vec::new(),
    };
    for e in entries {
        let (params, metrics) = train(&e.train, &train_set.examples, init.clone())?;
        let row = evaluate(&params, data, split, lens, &e.name, task)?;
        outcome.report.rows.push(row);
        outcome.params.push(params);
        outcome.metrics.push(metrics);
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub layer: usize,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub lens_accuracy: f64,
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub label: String,
    pub init_hash: String,
    pub dataset_hash: String,
    pub baseline_token_accuracy: Option<f64>,
    pub points: Vec<SweepPoint>,
    /// Best layer below the top beats ET at the top layer on token accuracy;
    /// `None` when the sweep does not include both.
    pub mid_beats_last: Option<bool>,
}

/// Trains one ET run per layer in `layers` from `init` and reads the final
/// answer accuracy and the lens accuracy at that layer.
pub fn sweep_et(
    init: &ModelParams,
    base: &TrainConfig,
    layers: &[usize],
    data: &Dataset,
    split: Split,
    label: &str,
) -> Result<SweepReport> {
    if layers.is_empty() {
        return Err(Error::Empty("sweep layers"));
    }
    let l = init.config.n_layers;
    let train_set = data.subset(Split::Train);
    let mut points = Vec::with_capacity(layers.len());
    for &j in layers {
        let mut cfg = base.clone();
        cfg.method = crate::trainer::Method::Dft;
        cfg.supervision.layer_j = j;
        if !cfg.supervision.et_mode.is_active() {
            return Err(Error::Config("sweep base config must enable ET".into()));
        }
        cfg.validate(l)?;
        let (params, _) = train(&cfg, &train_set.examples, init.clone())?;
        let row = evaluate(
            &params,
            data,
            split,
            LensLayers {
                layer_i: None,
                layer_j: Some(j),
            },
            label,
            "",
        )?;
        points.push(SweepPoint {
            layer: j,
            token_accuracy: row.token_accuracy,
            exact_match: row.exact_match,
            lens_accuracy: row.lens_accuracy_j.unwrap_or(0.0),
            checkpoint_hash: row.checkpoint_hash,
        });
    }
    let last = points.iter().find(|p| p.layer == l).map(|p| p.token_accuracy);
    let best_mid = points
        .iter()
        .filter(|p| p.layer < l)
        .map(|p| p.token_accuracy)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let mid_beats_last = match (best_mid, last) {
        (Some(m), Some(t)) => Some(m > t),
        _ => None,
    };
    Ok(SweepReport {
        label: label.to_string(),
        init_hash: params_hash(init),
        dataset_hash: data.hash(),
        baseline_token_accuracy: None,
        points,
        mid_beats_last,
    })
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut table = vec![vec![
            "layer".to_string(),
            "tok_acc".into(),
            "em".into(),
            "lens_acc".into(),
            "checkpoint".into(),
        ]];
        for p in &self.points {
            table.push(vec![
                p.layer.to_string(),
                format!("{:.4}", p.token_accuracy),
                format!("{:.4}", p.exact_match),
                format!("{:.4}", p.lens_accuracy),
                p.checkpoint_hash[..12.min(p.checkpoint_hash.len())].to_string(),
            ]);
        }
        let mut out = format!("sweep: {}\ninit: {}\ndataset: {}\n", self.label, self.init_hash, self.dataset_hash);
        if let Some(b) = self.baseline_token_accuracy {
            let _ = writeln!(out, "baseline tok_acc: {b:.4}");
        }
        out.push_str(&aligned(&table));
        let flag = match self.mid_beats_last {
            Some(true) => "observed",
            Some(false) => "not observed",
            None => "undetermined",
        };
        let _ = writeln!(out, "mid-layer ET beats last-layer ET: {flag}");
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            let mut v = serde_json::to_value(p).expect("point serializes");
            v["label"] = self.label.clone().into();
            v["init_hash"] = self.init_hash.clone().into();
            v["dataset_hash"] = self.dataset_hash.clone().into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "label": self.label,
            "mid_beats_last": self.mid_beats_last,
            "baseline_token_accuracy": self.baseline_token_accuracy,
        });
        let _ = writeln!(out, "{summary}");
        out
    }

    /// Bar chart with one bar per swept layer, optionally beside the TFT baseline.
    pub fn svg(&self) -> String {
        let cats: Vec<String> = self.points.iter().map(|p| format!("ET@{}", p.layer)).collect();
        let acc: Vec<f64> = self.points.iter().map(|p| p.token_accuracy).collect();
        let lens: Vec<f64> = self.points.iter().map(|p| p.lens_accuracy).collect();
        plot::bar_chart(
            &format!("ET layer sweep ({})", self.label),
            "accuracy",
            &cats,
            &[("answer token accuracy", acc), ("lens accuracy at j", lens)],
        )
    }
}
