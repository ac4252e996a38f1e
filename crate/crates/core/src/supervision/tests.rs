use super::*;
use crate::autodiff::gradcheck::relative_error;
use crate::model::{init_params, ModelConfig, ParamGroup};
use crate::syndata::{generate, make_language, LanguageMap, TaskKind, TaskSpec};

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        hidden_size: 8,
        n_heads: 2,
        vocab_size: 32,
        max_seq_len: 16,
        ffn_mult: 2,
        tie_output_head: false,
    }
}

fn examples(n: usize, lang: &LanguageMap) -> Vec<ParallelExample> {
    let mut task = TaskSpec::new(TaskKind::KeyValueRecall, 32, 3);
    task.query_len = (2, 3);
    task.answer_len = (1, 2);
    generate(&task, lang, n).unwrap().examples
}

fn translated(n: usize) -> Vec<ParallelExample> {
    examples(n, &make_language(5, 32).unwrap())
}

fn grads_of(
    params: &ModelParams,
    batch: &[&ParallelExample],
    f: impl Fn(&mut Graph, &mut BoundParams, &[&ParallelExample]) -> Result<Var>,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let mut bound = params.bind(&mut g, true);
    let loss = f(&mut g, &mut bound, batch).unwrap();
    g.backward(loss).unwrap();
    (g.value(loss).item(), bound.gradients(&g))
}

fn assert_zero_outside(params: &ModelParams, grads: &[Tensor], layer: usize, what: &str) {
    let mut live = 0;
    for ((name, group, _), grad) in params.named_tensors().into_iter().zip(grads) {
        let zero = grad.data().iter().all(|&v| v == 0.0);
        if group.feeds_layer(layer) {
            live += usize::from(!zero);
        } else {
            assert!(zero, "{what}: {name} ({group:?}) has gradient");
        }
    }
    assert!(live > 0, "{what}: no gradient reached the lower layers");
}

#[test]
fn tft_uniform_model_gives_ln_v() {
    let mut p = init_params(&config(), 1).unwrap();
    p.head = Some(Tensor::zeros(&[8, 32]));
    let data = translated(4);
    let batch: Vec<&ParallelExample> = data.iter().collect();
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let l = loss_tft(&mut g, &bound, &batch).unwrap();
    assert!((g.value(l).item() - 32f64.ln()).abs() < 1e-6);
}

#[test]
fn tft_mask_is_live() {
    let p = init_params(&config(), 2).unwrap();
    let data = translated(3);
    let batch: Vec<&ParallelExample> = data.iter().collect();
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let reference = loss_tft(&mut g, &bound, &batch).unwrap();
    let reference = g.value(reference).item();

    // same next-token loss but including every query position as well
    let seqs: Vec<Vec<usize>> = batch.iter().map(|e| e.target_sequence()).collect();
    let packed = Packed::new(&seqs, &p.config).unwrap();
    let (logits, _) = forward_graph(&mut g, &bound, &packed, None).unwrap();
    let mut targets = vec![0; packed.rows()];
    let mut answer_mask = vec![false; packed.rows()];
    let mut wide_mask = vec![false; packed.rows()];
    for (b, s) in seqs.iter().enumerate() {
        let xl = batch[b].x_tgt.len();
        for t in 0..s.len() - 1 {
            let r = packed.row(b, t);
            targets[r] = s[t + 1];
            wide_mask[r] = true;
            answer_mask[r] = t + 1 >= xl;
        }
    }
    let narrow = g.cross_entropy(logits, &targets, &answer_mask).unwrap();
    let wide = g.cross_entropy(logits, &targets, &wide_mask).unwrap();
    assert!((g.value(narrow).item() - reference).abs() < 1e-12);
    assert!((g.value(wide).item() - reference).abs() > 1e-6);
}

#[test]
fn lc_logits_gradient_is_local_and_head_frozen() {
    let p = init_params(&config(), 3).unwrap();
    let data = translated(4);
    let batch: Vec<&ParallelExample> = data.iter().collect();
    for layer in 1..=2 {
        let (_, grads) = grads_of(&p, &batch, |g, b, x| loss_lc_logits(g, b, x, layer));
        assert_zero_outside(&p, &grads, layer, "lc_logits");
    }
}

#[test]
fn lc_logits_identity_language_edge() {
    let p = init_params(&config(), 4).unwrap();
    let data = examples(3, &LanguageMap::identity(32));
    let batch: Vec<&ParallelExample> = data.iter().collect();
    let mut g = Graph::new();
    let mut bound = p.bind(&mut g, false);
    let l = loss_lc_logits(&mut g, &mut bound, &batch, 1).unwrap();
    assert!(g.value(l).item() > 0.0);
}

#[test]
fn lc_feature_identical_branches_is_exactly_zero() {
    let p = init_params(&config(), 5).unwrap();
    let data = examples(4, &LanguageMap::identity(32));
    let batch: Vec<&ParallelExample> = data.iter().collect();
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let l = loss_lc_feature(&mut g, &bound, &batch, 2).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn lc_feature_english_branch_is_detached() {
    let p = init_params(&config(), 6).unwrap();
    let data = translated(3);
    let batch: Vec<&ParallelExample> = data.iter().collect();
    let (loss, grads) = grads_of(&p, &batch, |g, b, x| loss_lc_feature(g, b, x, 1));
    assert!(loss > 0.0 && loss < 2.0);
    assert_zero_outside(&p, &grads, 1, "lc_feature");

    // Rebuild the loss with the English pooled vectors as constants: the
    // target-side gradient must be unchanged, so nothing flowed through English.
    let mut g = Graph::new();
    let bound = p.bind(&mut g, true);
    let seqs: Vec<Vec<usize>> = batch.iter().map(|e| e.target_sequence()).collect();
    let packed = Packed::new(&seqs, &p.config).unwrap();
    let layers = hidden_states(&mut g, &bound, &packed, 1).unwrap();
    let mut pooled_en = Vec::new();
    for ex in &batch {
        let (_, acts) = crate::model::forward(&p, &ex.english_sequence()).unwrap();
        let h = &acts.layers[1];
        let d = h.row_len();
        let mut v = vec![0.0; d];
        for r in 0..ex.x_en.len() {
            for (a, b) in v.iter_mut().zip(h.row(r)) {
                *a += b;
            }
        }
        let k = ex.x_en.len() as f64;
        pooled_en.push(v.into_iter().map(|a| a / k).collect::<Vec<_>>());
    }
    let mut terms = Vec::new();
    for (b, ex) in batch.iter().enumerate() {
        let en = g.constant(Tensor::vector(pooled_en[b].clone()).unwrap());
        let tgt = pool(&mut g, layers[1], span_rows(&packed, b, ex, Span::Query)).unwrap();
        terms.push(g.cosine_loss(en, tgt).unwrap());
    }
    let stacked = g.concat_rows(&terms).unwrap();
    let s = g.sum(stacked);
    let root = g.scale(s, 1.0 / terms.len() as f64);
    g.backward(root).unwrap();
    let manual = bound.gradients(&g);
    for (a, b) in grads.iter().zip(&manual) {
        assert!(relative_error(a.data(), b.data()) < 1e-10);
    }
}

#[test]
fn et_logits_gradient_is_local_and_head_frozen() {
    let p = init_params(&config(), 7).unwrap();
    let data = translated(4);
    let batch: Vec<&ParallelExample> = data.iter().collect();
    for layer in 1..=2 {
        let (loss, grads) = grads_of(&p, &batch, |g, b, x| loss_et_logits(g, b, x, layer));
        assert!(loss >= 0.0);
        assert_zero_outside(&p, &grads, layer, "et_logits");
    }
}

#[test]
fn et_feature_range_and_identity() {
    let p = init_params(&config(), 8).unwrap();
    let ident = examples(3, &LanguageMap::identity(32));
    let batch: Vec<&ParallelExample> = ident.iter().collect();
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let l = loss_et_feature(&mut g, &bound, &batch, 3).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let data = translated(5);
    let batch: Vec<&ParallelExample> = data.iter().collect();
    for j in 1..=3 {
        let (loss, grads) = grads_of(&p, &batch, |g, b, x| loss_et_feature(g, b, x, j));
        assert!((0.0..=2.0).contains(&loss));
        assert_zero_outside(&p, &grads, j, "et_feature");
    }
}

#[test]
fn unequal_lengths_are_rejected() {
    let p = init_params(&config(), 9).unwrap();
    let mut ex = translated(1).pop().unwrap();
    ex.x_en.push(9);
    let mut g = Graph::new();
    let mut bound = p.bind(&mut g, false);
    assert!(matches!(
        loss_lc_logits(&mut g, &mut bound, &[&ex], 1),
        Err(Error::Alignment { what: "query", .. })
    ));
    let mut ex = translated(1).pop().unwrap();
    ex.y_en.push(9);
    assert!(matches!(
        loss_et_logits(&mut g, &mut bound, &[&ex], 1),
        Err(Error::Alignment { what: "answer", .. })
    ));
}

#[test]
fn composite_reduces_and_recombines() {
    let p = init_params(&config(), 10).unwrap();
    let data = translated(4);
    let batch: Vec<&ParallelExample> = data.iter().collect();
    let tft_only = evaluate_losses(&p, &batch, &SupervisionSpec::none()).unwrap();
    assert_eq!(tft_only.total, tft_only.l_tft);
    assert_eq!((tft_only.l_lc, tft_only.l_et), (0.0, 0.0));

    let mut zero_et = SupervisionSpec::et_only(Mode::Logits, 2);
    zero_et.weight_et = 0.0;
    let b = evaluate_losses(&p, &batch, &zero_et).unwrap();
    assert_eq!(b.total, tft_only.l_tft);
    assert!(b.l_et > 0.0);

    for mode in [Mode::Logits, Mode::Feature] {
        let spec = SupervisionSpec::both(mode, 1, 2);
        let b = evaluate_losses(&p, &batch, &spec).unwrap();
        assert_eq!(b.l_tft, tft_only.l_tft);
        assert!((b.total - (b.l_tft + b.l_lc + b.l_et)).abs() < 1e-12);
        let mut weighted = spec.clone();
        weighted.weight_lc = 0.3;
        weighted.weight_et = 2.5;
        let w = evaluate_losses(&p, &batch, &weighted).unwrap();
        assert!((w.total - (w.l_tft + 0.3 * w.l_lc + 2.5 * w.l_et)).abs() < 1e-12);
    }
}

#[test]
fn composite_gradient_is_sum_of_terms() {
    let p = init_params(&config(), 11).unwrap();
    let data = translated(3);
    let batch: Vec<&ParallelExample> = data.iter().collect();
    for mode in [Mode::Logits, Mode::Feature] {
        let spec = SupervisionSpec::both(mode, 1, 2);
        let (_, total) = loss_gradients(&p, &batch, &spec).unwrap();
        let (_, tft) = grads_of(&p, &batch, |g, b, x| loss_tft(g, b, x));
        let (_, lc) = grads_of(&p, &batch, |g, b, x| match mode {
            Mode::Logits => loss_lc_logits(g, b, x, 1),
            _ => loss_lc_feature(g, b, x, 1),
        });
        let (_, et) = grads_of(&p, &batch, |g, b, x| match mode {
            Mode::Logits => loss_et_logits(g, b, x, 2),
            _ => loss_et_feature(g, b, x, 2),
        });
        for (k, t) in total.iter().enumerate() {
            let sum: Vec<f64> = (0..t.len())
                .map(|i| tft[k].data()[i] + lc[k].data()[i] + et[k].data()[i])
                .collect();
            assert!(relative_error(t.data(), &sum) < 1e-12, "{mode:?} tensor {k}");
        }
        // intermediate terms never touch the head or final norm
        let groups = p.groups();
        for (k, g) in groups.iter().enumerate() {
            if matches!(g, ParamGroup::Head | ParamGroup::FinalNorm) {
                assert_eq!(total[k], tft[k]);
            }
        }
    }
}

#[test]
fn spec_validation() {
    assert!(SupervisionSpec::both(Mode::Logits, 1, 2).validate(3).is_ok());
    assert!(SupervisionSpec::both(Mode::Logits, 2, 2).validate(3).is_err());
    assert!(SupervisionSpec::both(Mode::Logits, 1, 3).validate(3).is_err());
    assert!(SupervisionSpec::both(Mode::Logits, 0, 2).validate(3).is_err());
    assert!(SupervisionSpec::et_only(Mode::Feature, 3).validate(3).is_ok());
    assert!(SupervisionSpec::lc_only(Mode::Logits, 4).validate(3).is_err());
    let mut neg = SupervisionSpec::lc_only(Mode::Logits, 1);
    neg.weight_lc = -1.0;
    assert!(neg.validate(3).is_err());
    assert!(SupervisionSpec::none().validate(3).is_ok());
}

#[test]
fn logits_losses_are_non_negative_and_features_bounded() {
    let p = init_params(&config(), 12).unwrap();
    let data = translated(6);
    for ex in &data {
        for mode in [Mode::Logits, Mode::Feature] {
            let b = evaluate_losses(&p, &[ex], &SupervisionSpec::both(mode, 1, 2)).unwrap();
            assert!(b.l_tft >= 0.0);
            if mode == Mode::Logits {
                assert!(b.l_lc >= 0.0 && b.l_et >= 0.0);
            } else {
                assert!((0.0..=2.0).contains(&b.l_lc) && (0.0..=2.0).contains(&b.l_et));
            }
        }
    }
}
