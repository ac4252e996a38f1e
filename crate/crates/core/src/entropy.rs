//! Logit-lens entropy per layer and the two-drop critical layer heuristic.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{early_exit_graph, hidden_states, ModelParams, Packed, Session, PAD_ID};
use crate::plot;
use serde::Serialize;
use std::fmt::Write;

pub const DEFAULT_WINDOW: usize = 1;
pub const DEFAULT_MIN_DROP_FRACTION: f64 = 0.1;
const BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Drop {
    pub layer: usize,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyProfile {
    /// Mean entropy in nats for layers `0..=L`.
    pub per_layer: Vec<f64>,
    /// `[layer][position]` mean over the sequences long enough to reach that position.
    pub per_layer_per_position: Option<Vec<Vec<f64>>>,
    pub drops: Vec<Drop>,
    pub suggested_i: Option<usize>,
    pub suggested_j: Option<usize>,
}

/// Shannon entropy of `softmax(row)` in nats, clamped to `[0, ln V]`.
pub fn row_entropy(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + z.ln();
    let h: f64 = row
        .iter()
        .map(|&v| {
            let lp = v - lse;
            -lp.exp() * lp
        })
        .sum();
    h.clamp(0.0, (row.len() as f64).ln())
}

fn trim_padding(seq: &[usize]) -> &[usize] {
    let end = seq.iter().rposition(|&t| t != PAD_ID).map_or(0, |p| p + 1);
    &seq[..end]
}

/// Profiles every layer's logit-lens entropy over `corpus`.
///
/// Trailing padding is trimmed and any remaining pad position is skipped.
/// Sequences are sorted before the reduction, so corpus order never changes
/// the result.
pub fn profile<S: AsRef<[usize]>>(params: &ModelParams, corpus: &[S]) -> Result<EntropyProfile> {
    let mut seqs: Vec<&[usize]> = corpus
        .iter()
        .map(|s| trim_padding(s.as_ref()))
        .filter(|s| !s.is_empty())
        .collect();
    if seqs.is_empty() {
        return Err(Error::Empty("entropy corpus"));
    }
    seqs.sort();
    let l = params.config.n_layers;
    let width = seqs.iter().map(|s| s.len()).max().unwrap();
    let mut pos_sum = vec![vec![0.0; width]; l + 1];
    let mut pos_count = vec![0usize; width];
    let mut session = Session::new(params);
    for chunk in seqs.chunks(BATCH) {
        let packed = Packed::new(chunk, &params.config)?;
        let per_layer: Vec<Tensor> = session.run(|g, b| {
            let layers = hidden_states(g, b, &packed, l)?;
            layers
                .iter()
                .map(|&h| early_exit_graph(g, b, h).map(|v| g.value(v).clone()))
                .collect()
        })?;
        for (s, seq) in chunk.iter().enumerate() {
            for (t, &tok) in seq.iter().enumerate() {
                if tok == PAD_ID {
                    continue;
                }
                let r = packed.row(s, t);
                for (k, logits) in per_layer.iter().enumerate() {
                    pos_sum[k][t] += row_entropy(logits.row(r));
                }
                pos_count[t] += 1;
            }
        }
    }
    let total: usize = pos_count.iter().sum();
    if total == 0 {
        return Err(Error::Empty("entropy corpus"));
    }
    let per_layer: Vec<f64> = pos_sum.iter().map(|row| row.iter().sum::<f64>() / total as f64).collect();
    let per_position = pos_sum
        .iter()
        .map(|row| {
            row.iter()
                .zip(&pos_count)
                .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect()
        })
        .collect();
    Ok(EntropyProfile::from_curve(per_layer, Some(per_position)))
}

impl EntropyProfile {
    /// Wraps a curve, running the drop detector and layer suggestion with defaults.
    pub fn from_curve(per_layer: Vec<f64>, per_layer_per_position: Option<Vec<Vec<f64>>>) -> Self {
        let drops = detect_drops(&per_layer, DEFAULT_WINDOW, DEFAULT_MIN_DROP_FRACTION).unwrap_or_default();
        let suggestion = suggest_from_drops(&per_layer, &drops, DEFAULT_WINDOW).ok();
        EntropyProfile {
            per_layer,
            per_layer_per_position,
            drops,
            suggested_i: suggestion.map(|s| s.0),
            suggested_j: suggestion.map(|s| s.1),
        }
    }

    /// `e[k - window] - e[k]`, or `None` for the first `window` layers.
    pub fn drop_magnitude(&self, layer: usize) -> Option<f64> {
        (layer >= DEFAULT_WINDOW).then(|| self.per_layer[layer - DEFAULT_WINDOW] - self.per_layer[layer])
    }

    /// One JSON record per layer.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for (k, &e) in self.per_layer.iter().enumerate() {
            let rec = serde_json::json!({
                "layer": k,
                "mean_entropy": e,
                "drop_magnitude": self.drop_magnitude(k),
            });
            let _ = writeln!(out, "{rec}");
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::from("layer  mean_entropy  drop_magnitude\n");
        for (k, &e) in self.per_layer.iter().enumerate() {
            let drop = self.drop_magnitude(k).map_or("-".to_string(), |d| format!("{d:.6}"));
            let _ = writeln!(out, "{k:>5}  {e:>12.6}  {drop:>14}");
        }
        let layers: Vec<String> = self.drops.iter().map(|d| d.layer.to_string()).collect();
        let _ = writeln!(out, "drops: [{}]", layers.join(", "));
        match (self.suggested_i, self.suggested_j) {
            (Some(i), Some(j)) => {
                let _ = writeln!(out, "suggested: i={i} j={j}");
            }
            _ => match suggest_lc_layer(self) {
                Ok(i) => {
                    let _ = writeln!(out, "suggested: i={i} j=none (fewer than two usable drops)");
                }
                Err(_) => out.push_str("suggested: none (no drops)\n"),
            },
        }
        out
    }

    pub fn svg(&self) -> String {
        let pts = self.per_layer.iter().enumerate().map(|(k, &e)| (k as f64, e)).collect();
        plot::line_chart("Logit-lens entropy per layer", "layer", "mean entropy (nats)", &[("entropy", pts)])
    }

    /// Layer × position heatmap as CSV.
    pub fn heatmap_csv(&self) -> Option<String> {
        let m = self.per_layer_per_position.as_ref()?;
        let width = m.first().map_or(0, |r| r.len());
        let mut out = String::from("layer");
        for t in 0..width {
            let _ = write!(out, ",pos{t}");
        }
        out.push('\n');
        for (k, row) in m.iter().enumerate() {
            let _ = write!(out, "{k}");
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        Some(out)
    }
}

/// Local maxima of `e[k - window] - e[k]` that exceed `min_drop_fraction`
/// of the curve's range, largest first.
///
/// A layer counts as a local maximum when its magnitude is at least that of
/// both neighbours and strictly greater than at least one of them.
pub fn detect_drops(curve: &[f64], window: usize, min_drop_fraction: f64) -> Result<Vec<Drop>> {
    if curve.len() < 3 {
        return Err(Error::TooShort {
            what: "entropy curve",
            len: curve.len(),
            min: 3,
        });
    }
    if window == 0 || window >= curve.len() {
        return Err(Error::Config(format!("drop window {window} for {} layers", curve.len())));
    }
    let (lo, hi) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let threshold = min_drop_fraction * (hi - lo);
    let mag: Vec<f64> = (window..curve.len()).map(|k| curve[k - window] - curve[k]).collect();
    let mut drops = Vec::new();
    for (idx, &m) in mag.iter().enumerate() {
        let left = idx.checked_sub(1).map(|p| mag[p]);
        let right = mag.get(idx + 1).copied();
        let geq = left.is_none_or(|v| m >= v) && right.is_none_or(|v| m >= v);
        let strict = left.is_some_and(|v| m > v) || right.is_some_and(|v| m > v);
        if geq && strict && m > threshold {
            drops.push(Drop {
                layer: idx + window,
                magnitude: m,
            });
        }
    }
    drops.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then(a.layer.cmp(&b.layer)));
    Ok(drops)
}

fn suggest_from_drops(curve: &[f64], drops: &[Drop], window: usize) -> Result<(usize, usize)> {
    let insufficient = || Error::InsufficientStructure {
        found: drops.len(),
        profile: curve.to_vec(),
    };
    if drops.len() < 2 {
        return Err(insufficient());
    }
    let (first, second) = if drops[0].layer < drops[1].layer {
        (&drops[0], &drops[1])
    } else {
        (&drops[1], &drops[0])
    };
    let i = first.layer;
    let j = second.layer - window;
    if j <= i {
        return Err(insufficient());
    }
    Ok((i, j))
}

/// `(i, j)`: `i` is where the earlier of the two largest drops completes,
/// `j` the last layer before the later one begins.
pub fn suggest_critical_layers(profile: &EntropyProfile) -> Result<(usize, usize)> {
    suggest_from_drops(&profile.per_layer, &profile.drops, DEFAULT_WINDOW)
}

/// `i` alone: where the earlier of the two largest drops completes, or the
/// only drop when there is one. Needs no second drop, since `j` is the part
/// a single-drop profile leaves undetermined.
pub fn suggest_lc_layer(profile: &EntropyProfile) -> Result<usize> {
    match profile.drops.as_slice() {
        [] => Err(Error::InsufficientStructure {
            found: 0,
            profile: profile.per_layer.clone(),
        }),
        [only] => Ok(only.layer),
        [a, b, ..] => Ok(a.layer.min(b.layer)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FIXTURE: [f64; 7] = [5.0, 5.0, 2.0, 2.0, 2.0, 0.5, 0.5];

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            hidden_size: 16,
            n_heads: 2,
            vocab_size: 64,
            max_seq_len: 24,
            ffn_mult: 2,
            tie_output_head: false,
        }
    }

    fn random_corpus(n: usize, v: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(4..=20);
                (0..len).map(|_| rng.random_range(1..v)).collect()
            })
            .collect()
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        for v in [2, 32, 256] {
            assert!((row_entropy(&vec![0.7; v]) - (v as f64).ln()).abs() < 1e-12);
        }
        assert_eq!(row_entropy(&[0.0, 1e6, 0.0]), 0.0);
    }

    #[test]
    fn fixture_drops() {
        let d = detect_drops(&FIXTURE, 1, 0.1).unwrap();
        assert_eq!(
            d,
            vec![
                Drop { layer: 2, magnitude: 3.0 },
                Drop { layer: 5, magnitude: 1.5 }
            ]
        );
        let p = EntropyProfile::from_curve(FIXTURE.to_vec(), None);
        assert_eq!(suggest_critical_layers(&p).unwrap(), (2, 4));
    }

    #[test]
    fn flat_and_linear_curves_have_no_drops() {
        assert!(detect_drops(&[3.0; 6], 1, 0.1).unwrap().is_empty());
        let linear: Vec<f64> = (0..8).map(|k| 8.0 - k as f64).collect();
        assert!(detect_drops(&linear, 1, 0.1).unwrap().is_empty());
    }

    #[test]
    fn short_plateaus_put_onset_one_before_the_drop() {
        let p = EntropyProfile::from_curve(vec![5.0, 2.0, 2.0, 0.0], None);
        assert_eq!(suggest_critical_layers(&p).unwrap(), (1, 2));
    }

    #[test]
    fn single_drop_refuses_to_guess() {
        let p = EntropyProfile::from_curve(vec![5.0, 5.0, 1.0, 1.0, 1.0], None);
        assert_eq!(p.drops.len(), 1);
        match suggest_critical_layers(&p) {
            Err(Error::InsufficientStructure { found: 1, profile }) => assert_eq!(profile, p.per_layer),
            other => panic!("expected insufficient structure, got {other:?}"),
        }
        assert_eq!(suggest_lc_layer(&p).unwrap(), 2);
        assert!(p.table().contains("i=2 j=none"));
    }

    #[test]
    fn lc_layer_agrees_with_pair() {
        let p = EntropyProfile::from_curve(FIXTURE.to_vec(), None);
        assert_eq!(suggest_lc_layer(&p).unwrap(), suggest_critical_layers(&p).unwrap().0);
        let flat = EntropyProfile::from_curve(vec![1.0; 5], None);
        assert!(suggest_lc_layer(&flat).is_err());
    }

    #[test]
    fn too_few_layers() {
        assert!(matches!(detect_drops(&[1.0, 0.0], 1, 0.1), Err(Error::TooShort { .. })));
    }

    #[test]
    fn fresh_init_is_near_uniform() {
        let p = init_params(&config(), 3).unwrap();
        let prof = profile(&p, &random_corpus(32, 64, 1)).unwrap();
        assert_eq!(prof.per_layer.len(), 4);
        for e in &prof.per_layer {
            assert!(*e > 0.9 * 64f64.ln() && *e <= 64f64.ln() + 1e-9);
        }
    }

    #[test]
    fn collapsed_head_gives_zero_entropy() {
        let mut p = init_params(&config(), 4).unwrap();
        // a large positive first coordinate survives every block, and the
        // gain keeps only that coordinate, feeding one huge column
        for t in p.tok_emb.data_mut().chunks_mut(16) {
            t[0] = 10.0;
        }
        p.final_norm = Tensor::vector((0..16).map(|k| f64::from(k == 0)).collect()).unwrap();
        let head = p.head.as_mut().unwrap();
        head.data_mut()[9] = 1e4;
        let prof = profile(&p, &random_corpus(8, 64, 2)).unwrap();
        for e in &prof.per_layer {
            assert!(*e < 1e-9, "{e}");
        }
    }

    #[test]
    fn corpus_order_is_irrelevant() {
        let p = init_params(&config(), 5).unwrap();
        let corpus = random_corpus(40, 64, 3);
        let mut rev = corpus.clone();
        rev.reverse();
        let a = profile(&p, &corpus).unwrap();
        let b = profile(&p, &rev).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_errors() {
        let p = init_params(&config(), 6).unwrap();
        assert!(matches!(profile::<Vec<usize>>(&p, &[]), Err(Error::Empty(_))));
        assert!(matches!(profile(&p, &[vec![PAD_ID, PAD_ID]]), Err(Error::Empty(_))));
    }

    #[test]
    fn exports_have_one_row_per_layer() {
        let p = init_params(&config(), 7).unwrap();
        let prof = profile(&p, &random_corpus(4, 64, 4)).unwrap();
        assert_eq!(prof.records().lines().count(), 4);
        assert_eq!(prof.heatmap_csv().unwrap().lines().count(), 5);
        assert!(prof.svg().starts_with("<svg"));
    }

    proptest! {
        #[test]
        fn increasing_curves_have_no_drops(start in -5.0f64..5.0, steps in prop::collection::vec(0.01f64..2.0, 2..12)) {
            let mut curve = vec![start];
            for s in steps {
                curve.push(curve.last().unwrap() + s);
            }
            prop_assert!(detect_drops(&curve, 1, 0.1).unwrap().is_empty());
        }

        #[test]
        fn entropy_is_bounded(row in prop::collection::vec(-30.0f64..30.0, 2..50)) {
            let h = row_entropy(&row);
            prop_assert!(h >= 0.0 && h <= (row.len() as f64).ln() + 1e-9);
        }

        #[test]
        fn drops_are_sorted_and_positive(curve in prop::collection::vec(0.0f64..6.0, 3..16)) {
            let d = detect_drops(&curve, 1, 0.1).unwrap();
            for w in d.windows(2) {
                prop_assert!(w[0].magnitude >= w[1].magnitude);
            }
            for x in &d {
                prop_assert!(x.magnitude > 0.0);
            }
        }
    }
}
