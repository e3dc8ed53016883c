//! Finite-difference verification of every trainable tensor, from the
//! standalone attention mechanisms up to the end-to-end BCE loss.

use std::collections::BTreeMap;

use icdex_core::attention::{kcca, lcca, lsa, AttentionParams};
use icdex_core::corpus::Chunk;
use icdex_core::encoder::EncoderConfig;
use icdex_core::gradcheck::{check_gradients, FD_STEP, FD_TOLERANCE};
use icdex_core::graph::Graph;
use icdex_core::head::BranchSwitches;
use icdex_core::model::{KnowledgeTensors, ModelConfig, ModelState};
use icdex_core::rng::{derive, normal_tensor};
use icdex_core::tensor::Tensor;

fn chunk(doc: &str, index: usize, ids: Vec<usize>, mask: Vec<bool>) -> Chunk {
    Chunk { doc_id: doc.into(), index, token_ids: ids, mask }
}

/// The spec's tiny end-to-end configuration:
/// d=16, T=8, C=2, L_n=5, M=2, F=4.
fn tiny_setup() -> (ModelState, KnowledgeTensors, Vec<Chunk>, Vec<f64>) {
    let config = ModelConfig {
        encoder: EncoderConfig {
            d: 16,
            layers: 1,
            heads: 2,
            d_ff: 32,
            max_pos: 8,
            dropout: 0.0,
            seed: 0,
        },
        d_a: 16,
        n_labels: 5,
        m: 2,
        head_filters: 4,
        head_kernel: 3,
        leaky_slope: 0.01,
        branches: BranchSwitches::default(),
        kcca_literal: false,
        train_label_matrix: false,
    };
    let mut rng = derive(1234, 0);
    let mut state = ModelState::init(config, 24, &mut rng).unwrap();
    state.label_matrix.matrix = normal_tensor(&mut rng, &[5, 16], 0.5);
    let knowledge = KnowledgeTensors {
        kbest_all: normal_tensor(&mut rng, &[5 * 2, 16], 0.5),
        kavg_all: normal_tensor(&mut rng, &[5, 16], 0.5),
        m: 2,
    };
    let chunks = vec![
        chunk("d", 0, vec![3, 7, 11, 4, 9, 15, 21, 6], vec![true; 8]),
        chunk(
            "d",
            1,
            vec![5, 13, 2, 0, 0, 0, 0, 0],
            vec![true, true, true, false, false, false, false, false],
        ),
    ];
    let gold = vec![1.0, 0.0, 1.0, 0.0, 0.0];
    (state, knowledge, chunks, gold)
}

fn model_loss(
    base: &ModelState,
    knowledge: &KnowledgeTensors,
    chunks: &[Chunk],
    gold: &[f64],
    params: &BTreeMap<String, Tensor>,
) -> f64 {
    let mut m = base.clone();
    m.set_params_map(params).unwrap();
    let fwd = m.forward_doc(knowledge, chunks, None).unwrap();
    let mut graph = fwd.graph;
    let loss = graph.bce_with_logits_mean(fwd.logits_var, gold);
    graph.value(loss).data()[0]
}

fn model_analytic_grads(
    base: &ModelState,
    knowledge: &KnowledgeTensors,
    chunks: &[Chunk],
    gold: &[f64],
) -> BTreeMap<String, Tensor> {
    let fwd = base.forward_doc(knowledge, chunks, None).unwrap();
    let mut graph = fwd.graph;
    let loss = graph.bce_with_logits_mean(fwd.logits_var, gold);
    let grads = graph.backward(loss);
    let mut out = BTreeMap::new();
    for (name, var) in &fwd.named_vars {
        if let Some(g) = grads.get(*var) {
            out.insert(name.clone(), g.clone());
        }
    }
    out
}

#[test]
fn end_to_end_bce_gradient_matches_finite_differences() {
    let (state, knowledge, chunks, gold) = tiny_setup();
    let at = state.params_map();
    let analytic = model_analytic_grads(&state, &knowledge, &chunks, &gold);
    // every trainable tensor is covered
    assert_eq!(at.len(), analytic.len());
    let mut loss = |m: &BTreeMap<String, Tensor>| model_loss(&state, &knowledge, &chunks, &gold, m);
    let report = check_gradients(&mut loss, &at, &analytic, FD_STEP, FD_TOLERANCE);
    let worst = report.worst().unwrap();
    assert!(
        report.passed(),
        "worst tensor {} relative error {}",
        worst.name,
        worst.relative_error
    );
}

#[test]
fn unfrozen_label_matrix_gradient_matches_finite_differences() {
    let (mut state, knowledge, chunks, gold) = tiny_setup();
    state.label_matrix.frozen = false;
    let at = state.params_map();
    assert!(at.contains_key("label_matrix"));
    let analytic = model_analytic_grads(&state, &knowledge, &chunks, &gold);
    let mut loss = |m: &BTreeMap<String, Tensor>| model_loss(&state, &knowledge, &chunks, &gold, m);
    let report = check_gradients(&mut loss, &at, &analytic, FD_STEP, FD_TOLERANCE);
    assert!(report.passed(), "max err {}", report.max_relative_error);
}

// Standalone mechanism checks on a (T=6, d=8, L_n=3) instance.
fn mech_setup() -> (AttentionParams, Vec<Tensor>, Vec<Vec<bool>>, Tensor, Tensor, Tensor) {
    let mut rng = derive(99, 0);
    let d = 8;
    let n_labels = 3;
    let m = 2;
    let params = AttentionParams::init(d, d, n_labels, &mut rng);
    let h0 = normal_tensor(&mut rng, &[6, d], 0.8);
    let h1 = normal_tensor(&mut rng, &[6, d], 0.8);
    let masks = vec![
        vec![true, true, true, true, false, false],
        vec![true, true, false, false, false, false],
    ];
    let labels = normal_tensor(&mut rng, &[n_labels, d], 0.8);
    let kbest = normal_tensor(&mut rng, &[n_labels * m, d], 0.8);
    let kavg = normal_tensor(&mut rng, &[n_labels, d], 0.8);
    (params, vec![h0, h1], masks, labels, kbest, kavg)
}

fn attention_param_map(params: &AttentionParams) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    params.for_each(&mut |name, t| {
        map.insert(name, t.clone());
    });
    map
}

fn params_from_map(template: &AttentionParams, map: &BTreeMap<String, Tensor>) -> AttentionParams {
    let mut p = template.clone();
    p.for_each_mut(&mut |name, t| *t = map[&name].clone());
    p
}

fn sum_squares(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// Analytic gradient of sum(rep^2) w.r.t. attention params, through the tape.
fn mech_analytic(
    params: &AttentionParams,
    run: impl Fn(&mut Graph, &icdex_core::attention::AttentionParamsT<icdex_core::graph::VarId>) -> icdex_core::graph::VarId,
) -> BTreeMap<String, Tensor> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let rep = run(&mut g, &vars);
    let n = g.value(rep).numel();
    let flat = g.reshape(rep, &[1, n]);
    let loss = g.matmul_t(flat, false, flat, true);
    let grads = g.backward(loss);
    let mut named = Vec::new();
    vars.for_each(&mut |name, id| named.push((name, *id)));
    named
        .into_iter()
        .filter_map(|(name, id)| grads.get(id).map(|t| (name, t.clone())))
        .collect()
}

#[test]
fn lsa_gradients_match_finite_differences() {
    let (params, hs, masks, _, _, _) = mech_setup();
    let analytic = mech_analytic(&params, |g, vars| {
        let h_ids: Vec<_> = hs.iter().map(|h| g.constant(h.clone())).collect();
        icdex_core::attention::lsa_vars(g, &h_ids, &masks, vars).0
    });
    let mut loss = |m: &BTreeMap<String, Tensor>| {
        let p = params_from_map(&params, m);
        sum_squares(&lsa(&hs, &masks, &p).unwrap().rep)
    };
    let at = attention_param_map(&params);
    let report = check_gradients(&mut loss, &at, &analytic, FD_STEP, FD_TOLERANCE);
    assert!(report.passed(), "max err {}", report.max_relative_error);
}

#[test]
fn lcca_gradients_match_finite_differences() {
    let (params, hs, masks, labels, _, _) = mech_setup();
    let analytic = mech_analytic(&params, |g, vars| {
        let l = g.constant(labels.clone());
        let h_ids: Vec<_> = hs.iter().map(|h| g.constant(h.clone())).collect();
        icdex_core::attention::lcca_vars(g, l, &h_ids, &masks, vars, 8).0
    });
    let mut loss = |m: &BTreeMap<String, Tensor>| {
        let p = params_from_map(&params, m);
        sum_squares(&lcca(&labels, &hs, &masks, &p).unwrap().rep)
    };
    let at = attention_param_map(&params);
    let report = check_gradients(&mut loss, &at, &analytic, FD_STEP, FD_TOLERANCE);
    assert!(report.passed(), "max err {}", report.max_relative_error);
}

#[test]
fn kcca_gradients_match_finite_differences() {
    let (params, hs, masks, _, kbest, kavg) = mech_setup();
    let analytic = mech_analytic(&params, |g, vars| {
        let kb = g.constant(kbest.clone());
        let ka = g.constant(kavg.clone());
        let h_ids: Vec<_> = hs.iter().map(|h| g.constant(h.clone())).collect();
        icdex_core::attention::kcca_vars(g, kb, ka, &h_ids, &masks, vars, 8, 2, false).0
    });
    let mut loss = |m: &BTreeMap<String, Tensor>| {
        let p = params_from_map(&params, m);
        sum_squares(&kcca(&kbest, &kavg, &hs, &masks, &p, 2, false).unwrap().rep)
    };
    let at = attention_param_map(&params);
    let report = check_gradients(&mut loss, &at, &analytic, FD_STEP, FD_TOLERANCE);
    assert!(report.passed(), "max err {}", report.max_relative_error);
}

#[test]
fn disabled_branch_parameters_receive_no_gradient_and_have_no_effect() {
    let (mut state, knowledge, chunks, gold) = tiny_setup();
    state.config.branches = BranchSwitches { lsa: true, lcca: true, kcca: false };
    let analytic = model_analytic_grads(&state, &knowledge, &chunks, &gold);
    // KCCA projections and the gate get no gradient at all
    for name in ["attention.kcca.q", "attention.kcca.k", "attention.kcca.v", "attention.wg"] {
        assert!(!analytic.contains_key(name), "{name} should be gradient-free");
    }
    // and perturbing them does not move any logit
    let base = state.predict(&knowledge, &chunks).unwrap().logits;
    let mut rng = derive(5150, 0);
    let mut perturbed = state.clone();
    perturbed.attention.kcca_q = normal_tensor(&mut rng, &[16, 16], 1.0);
    perturbed.attention.kcca_k = normal_tensor(&mut rng, &[16, 16], 1.0);
    perturbed.attention.kcca_v = normal_tensor(&mut rng, &[16, 16], 1.0);
    perturbed.attention.wg = normal_tensor(&mut rng, &[16, 16], 1.0);
    let moved = perturbed.predict(&knowledge, &chunks).unwrap().logits;
    for (a, b) in base.iter().zip(&moved) {
        assert!((a - b).abs() <= 1e-12);
    }
}
