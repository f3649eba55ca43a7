//! Per-candidate goodness scores.
//!
//! * LM score: mean token log-probability of `question ⊕ " " ⊕ candidate`.
//!   Encoder backbones use pseudo-log-likelihood (one masked pass per
//!   token); decoder backbones use one causal pass.
//! * ITM score: the text context vector is projected into visual space
//!   (`q = T·W_p`), attends over image patches
//!   (`a = softmax(q·Vᵀ/√d_v)`, `C = aᵀV`), and the score is `cos(q, C)`.
//! * Joint score: mean of the two.
//!
//! The `*_forward`/`*_backward` pairs keep the activations needed to push
//! score gradients back into the adapters.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::backend::{AdapterParams, AdapterRoute, Backbone, FeatureProvider, Mode, TokenSequence, Trace};
use crate::error::{Error, Result};
use crate::linalg::{log_softmax, softmax, vec_mat, Mat};
use crate::types::{cosine_slices, dot, joint, norm, ScoreSet, VQAInstance, VisualFeatureSet};

/// Attention of the projected text query over image patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualizedVisual {
    pub attention: Vec<f64>,
    pub context: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreFlags {
    pub use_lm: bool,
    pub use_itm: bool,
}

impl Default for ScoreFlags {
    fn default() -> Self {
        ScoreFlags { use_lm: true, use_itm: true }
    }
}

/// Which adapter each score reads through. The default sends the LM score
/// through the LM adapter and the ITM score through the ITM adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    pub lm: AdapterRoute,
    pub itm: AdapterRoute,
}

impl Default for Routing {
    fn default() -> Self {
        Routing { lm: AdapterRoute::Lm, itm: AdapterRoute::Itm }
    }
}

impl Routing {
    pub fn uniform(route: AdapterRoute) -> Self {
        Routing { lm: route, itm: route }
    }
}

pub fn candidate_text(question: &str, candidate: &str) -> String {
    format!("{question} {candidate}")
}

pub fn joint_score(s_lm: f64, s_itm: f64) -> f64 {
    joint(s_lm, s_itm)
}

struct LmPass {
    trace: Trace,
    /// (output row, target token, predicted distribution)
    targets: Vec<(usize, u32, Vec<f64>)>,
}

pub(crate) struct LmEval {
    pub score: f64,
    m: usize,
    passes: Vec<LmPass>,
}

pub(crate) fn lm_forward(
    backbone: &Backbone,
    tokens: &TokenSequence,
    route: AdapterRoute,
    params: &AdapterParams,
    keep: bool,
) -> Result<LmEval> {
    let m = tokens.len();
    if m == 0 {
        return Err(Error::EmptySequence);
    }
    if m > backbone.config().max_len {
        return Err(Error::LengthOverflow { len: m, max: backbone.config().max_len });
    }
    params.check_shape(&backbone.adapter_shape())?;
    let ids = tokens.as_slice();
    let mut total = 0.0;
    let mut passes = Vec::new();
    let mut visit = |trace: Trace, positions: &mut dyn Iterator<Item = usize>| {
        let mut targets = Vec::new();
        for t in positions {
            let row = backbone.prediction_row(t);
            let logits = backbone.logits(trace.out.row(row));
            let lp = log_softmax(&logits);
            total += lp[ids[t] as usize];
            if keep {
                targets.push((row, ids[t], lp.iter().map(|x| x.exp()).collect()));
            }
        }
        if keep {
            passes.push(LmPass { trace, targets });
        }
    };
    match backbone.mode() {
        Mode::Encoder => {
            for t in 0..m {
                let trace = backbone.trace(&backbone.input_ids(tokens, Some(t)), route, params);
                visit(trace, &mut std::iter::once(t));
            }
        }
        Mode::Decoder => {
            let trace = backbone.trace(&backbone.input_ids(tokens, None), route, params);
            visit(trace, &mut (0..m));
        }
    }
    Ok(LmEval { score: total / m as f64, m, passes })
}

/// Adds `coeff · ∂score/∂θ` into `grad` for the adapter on `route`.
pub(crate) fn lm_backward(
    backbone: &Backbone,
    eval: &LmEval,
    coeff: f64,
    route: AdapterRoute,
    params: &AdapterParams,
    grad: &mut AdapterParams,
) {
    if coeff == 0.0 || route == AdapterRoute::None {
        return;
    }
    let w = coeff / eval.m as f64;
    for pass in &eval.passes {
        let mut d_out = Mat::zeros(pass.trace.out.rows, pass.trace.out.cols);
        for (row, target, probs) in &pass.targets {
            let mut dl: Vec<f64> = probs.iter().map(|p| -w * p).collect();
            dl[*target as usize] += w;
            let dh = backbone.logits_backward(&dl);
            for (o, g) in d_out.row_mut(*row).iter_mut().zip(dh) {
                *o += g;
            }
        }
        backbone.backward(&pass.trace, &d_out, route, params, grad);
    }
}

/// Mean token log-probability of `text` (goodness, ≤ 0).
pub fn lm_score(backbone: &Backbone, text: &str, route: AdapterRoute, params: &AdapterParams) -> Result<f64> {
    let tokens = backbone.tokenize(text)?;
    Ok(lm_forward(backbone, &tokens, route, params, false)?.score)
}

/// Attention pooling of `v` by an already-projected query.
pub fn contextualize_query(query: &[f64], v: &VisualFeatureSet) -> Result<ContextualizedVisual> {
    if query.len() != v.d_v() {
        return Err(Error::DimensionMismatch { expected: v.d_v(), got: query.len() });
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projected text query"));
    }
    let scale = 1.0 / (v.d_v() as f64).sqrt();
    let logits: Vec<f64> = v.rows().map(|p| dot(query, p) * scale).collect();
    let attention = softmax(&logits);
    let mut context = vec![0.0; v.d_v()];
    for (a, p) in attention.iter().zip(v.rows()) {
        for (c, x) in context.iter_mut().zip(p) {
            *c += a * x;
        }
    }
    Ok(ContextualizedVisual { attention, context })
}

pub fn project(text_vec: &[f64], projection: &Mat) -> Result<Vec<f64>> {
    if text_vec.len() != projection.rows {
        return Err(Error::ShapeMismatch(format!(
            "text vector of width {} for projection {}x{}",
            text_vec.len(),
            projection.rows,
            projection.cols
        )));
    }
    Ok(vec_mat(text_vec, projection))
}

/// Projects `text_vec` with `projection` and pools `v` by attention.
pub fn contextualize(text_vec: &[f64], v: &VisualFeatureSet, projection: &Mat) -> Result<ContextualizedVisual> {
    if projection.cols != v.d_v() {
        return Err(Error::ShapeMismatch(format!("projection to {} for d_v {}", projection.cols, v.d_v())));
    }
    contextualize_query(&project(text_vec, projection)?, v)
}

/// ITM goodness of an already-projected query: `cos(q, C(q))`.
pub fn itm_score_query(query: &[f64], v: &VisualFeatureSet) -> Result<f64> {
    if norm(query) == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cv = contextualize_query(query, v)?;
    cosine_slices(query, &cv.context)
}

pub fn itm_score(text_vec: &[f64], v: &VisualFeatureSet, projection: &Mat) -> Result<f64> {
    if projection.cols != v.d_v() {
        return Err(Error::ShapeMismatch(format!("projection to {} for d_v {}", projection.cols, v.d_v())));
    }
    itm_score_query(&project(text_vec, projection)?, v)
}

/// Attention and pooled context for `text` against `v`.
pub fn itm_attention(
    backbone: &Backbone,
    text: &str,
    v: &VisualFeatureSet,
    route: AdapterRoute,
    params: &AdapterParams,
) -> Result<ContextualizedVisual> {
    let tokens = backbone.tokenize(text)?;
    Ok(itm_forward(backbone, &tokens, v, route, params, false)?.cv)
}

pub(crate) struct ItmEval {
    pub score: f64,
    trace: Option<Trace>,
    ctx_row: usize,
    text_vec: Vec<f64>,
    query: Vec<f64>,
    cv: ContextualizedVisual,
}

pub(crate) fn itm_forward(
    backbone: &Backbone,
    tokens: &TokenSequence,
    v: &VisualFeatureSet,
    route: AdapterRoute,
    params: &AdapterParams,
    keep: bool,
) -> Result<ItmEval> {
    if tokens.len() > backbone.config().max_len {
        return Err(Error::LengthOverflow { len: tokens.len(), max: backbone.config().max_len });
    }
    params.check_shape(&backbone.adapter_shape())?;
    if v.d_v() != params.projection.cols {
        return Err(Error::ShapeMismatch(format!(
            "features of width {} for projection to {}",
            v.d_v(),
            params.projection.cols
        )));
    }
    let trace = backbone.trace(&backbone.input_ids(tokens, None), route, params);
    let ctx_row = backbone.context_index(tokens.len());
    let text_vec = trace.out.row(ctx_row).to_vec();
    let query = project(&text_vec, &params.projection)?;
    if norm(&query) == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cv = contextualize_query(&query, v)?;
    let score = cosine_slices(&query, &cv.context)?;
    Ok(ItmEval { score, trace: keep.then_some(trace), ctx_row, text_vec, query, cv })
}

pub(crate) fn itm_backward(
    backbone: &Backbone,
    eval: &ItmEval,
    v: &VisualFeatureSet,
    coeff: f64,
    route: AdapterRoute,
    params: &AdapterParams,
    grad: &mut AdapterParams,
) {
    if coeff == 0.0 {
        return;
    }
    let q = &eval.query;
    let c = &eval.cv.context;
    let nq = norm(q);
    let nc = norm(c);
    let cos = dot(q, c) / (nq * nc);
    let mut dq: Vec<f64> = q.iter().zip(c).map(|(qi, ci)| coeff * (ci / (nq * nc) - cos * qi / (nq * nq))).collect();
    let dc: Vec<f64> = q.iter().zip(c).map(|(qi, ci)| coeff * (qi / (nq * nc) - cos * ci / (nc * nc))).collect();
    let a = &eval.cv.attention;
    let da: Vec<f64> = v.rows().map(|p| dot(&dc, p)).collect();
    let inner = dot(a, &da);
    let scale = 1.0 / (v.d_v() as f64).sqrt();
    for ((aj, daj), p) in a.iter().zip(&da).zip(v.rows()) {
        let dlogit = aj * (daj - inner) * scale;
        for (dqi, pi) in dq.iter_mut().zip(p) {
            *dqi += dlogit * pi;
        }
    }
    let w = &params.projection;
    for (i, ti) in eval.text_vec.iter().enumerate() {
        for (g, dqj) in grad.projection.row_mut(i).iter_mut().zip(&dq) {
            *g += ti * dqj;
        }
    }
    if route == AdapterRoute::None {
        return;
    }
    let d_text: Vec<f64> = (0..w.rows).map(|i| dot(w.row(i), &dq)).collect();
    let trace = eval.trace.as_ref().expect("itm trace kept for backward");
    let mut d_out = Mat::zeros(trace.out.rows, trace.out.cols);
    d_out.row_mut(eval.ctx_row).copy_from_slice(&d_text);
    backbone.backward(trace, &d_out, route, params, grad);
}

/// Features attached to the instance, or looked up by image id.
pub fn resolve_features<'a>(
    inst: &'a VQAInstance,
    provider: Option<&'a FeatureProvider>,
) -> Result<Cow<'a, VisualFeatureSet>> {
    let img = inst.image.as_ref().ok_or_else(|| Error::MissingFeatures(inst.qa.id.clone()))?;
    if let Some(f) = &img.features {
        return Ok(Cow::Borrowed(f));
    }
    match provider {
        Some(p) => p.get(&img.id).map(Cow::Borrowed).map_err(|_| Error::MissingFeatures(inst.qa.id.clone())),
        None => Err(Error::MissingFeatures(inst.qa.id.clone())),
    }
}

/// Everything needed to score an instance.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a AdapterParams,
    pub features: Option<&'a FeatureProvider>,
    pub routing: Routing,
}

impl<'a> Scorer<'a> {
    pub fn new(backbone: &'a Backbone, params: &'a AdapterParams, features: Option<&'a FeatureProvider>) -> Self {
        Scorer { backbone, params, features, routing: Routing::default() }
    }

    pub fn with_routing(mut self, routing: Routing) -> Self {
        self.routing = routing;
        self
    }

    pub fn candidate_tokens(&self, inst: &VQAInstance) -> Result<Vec<TokenSequence>> {
        inst.qa
            .candidates
            .iter()
            .map(|c| self.backbone.tokenize(&candidate_text(inst.effective_question(), c)))
            .collect()
    }

    pub fn score(&self, inst: &VQAInstance, flags: ScoreFlags) -> Result<ScoreSet> {
        score_instance(inst, self, flags)
    }
}

pub fn score_instance(inst: &VQAInstance, scorer: &Scorer<'_>, flags: ScoreFlags) -> Result<ScoreSet> {
    let n = inst.qa.candidates.len();
    if n < 2 {
        return Err(Error::TooFewCandidates(n));
    }
    if !flags.use_lm && !flags.use_itm {
        return Err(Error::NoObjective);
    }
    let features = if flags.use_itm { Some(resolve_features(inst, scorer.features)?) } else { None };
    let tokens = scorer.candidate_tokens(inst)?;
    let s_lm = if flags.use_lm {
        Some(
            tokens
                .iter()
                .map(|t| lm_forward(scorer.backbone, t, scorer.routing.lm, scorer.params, false).map(|e| e.score))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let s_itm = match &features {
        Some(v) => Some(
            tokens
                .iter()
                .map(|t| itm_forward(scorer.backbone, t, v, scorer.routing.itm, scorer.params, false).map(|e| e.score))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    ScoreSet::from_parts(s_lm, s_itm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::EncoderConfig;
    use crate::types::{ImageRef, QAPair, SourceTag};

    fn backbone(mode: Mode) -> Backbone {
        Backbone::new(EncoderConfig {
            mode,
            hidden_dim: 16,
            heads: 2,
            vocab_size: 64,
            max_len: 16,
            reduction: 4,
            visual_dim: 4,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    fn feats(rows: &[Vec<f64>]) -> VisualFeatureSet {
        VisualFeatureSet::from_rows(rows[0].len(), rows).unwrap()
    }

    #[test]
    fn singleton_and_identical_patches() {
        let v = feats(&[vec![0.3, -0.2, 1.0, 0.0]]);
        let cv = contextualize_query(&[1.0, 2.0, 3.0, 4.0], &v).unwrap();
        assert_eq!(cv.attention, vec![1.0]);
        assert_eq!(cv.context, v.patch(0).to_vec());
        let rep = feats(&vec![vec![0.5, 0.25, 0.0, -1.0]; 5]);
        for q in [[1.0, 0.0, 0.0, 0.0], [-3.0, 2.0, 0.1, 9.0]] {
            let cv = contextualize_query(&q, &rep).unwrap();
            for (c, x) in cv.context.iter().zip(rep.patch(0)) {
                assert!((c - x).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_patch_attention() {
        // softmax(10/√2, 0) evaluated with mpmath at 30 digits
        let v = feats(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cv = contextualize_query(&[10.0, 0.0], &v).unwrap();
        assert!((cv.attention[0] - 0.999_151_395_037_288_8).abs() < 1e-12);
        assert!((cv.attention[1] - 0.000_848_604_962_711_186_8).abs() < 1e-12);
        assert_eq!(cv.context, cv.attention);
        let s = itm_score_query(&[10.0, 0.0], &v).unwrap();
        assert!((s - 0.999_999_639_323_118_8).abs() < 1e-12, "{s}");
    }

    #[test]
    fn itm_self_and_orthogonal() {
        let q = [0.6, 0.8];
        assert!((itm_score_query(&q, &feats(&[q.to_vec()])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(itm_score_query(&q, &feats(&[vec![-0.8, 0.6]])).unwrap(), 0.0);
        assert!(matches!(itm_score_query(&[0.0, 0.0], &feats(&[vec![1.0, 0.0]])), Err(Error::ZeroNorm)));
    }

    #[test]
    fn query_rescaling_is_exact_for_single_patch_cosine() {
        let v = feats(&[vec![1.0, 0.5], vec![-0.2, 0.9], vec![0.3, 0.3]]);
        let q = [0.7, -0.4];
        let base = itm_score_query(&q, &v).unwrap();
        // attention depends on |q|, so only the P = 1 case is scale-free
        let single = feats(&[vec![1.0, 0.5]]);
        let a = itm_score_query(&q, &single).unwrap();
        let b = itm_score_query(&[7.0, -4.0], &single).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(base.is_finite());
    }

    #[test]
    fn joint_examples() {
        assert_eq!(joint_score(0.0, 0.0), 0.0);
        assert_eq!(joint_score(0.37, 0.37), 0.37);
        assert_eq!(joint_score(-2.0, 0.5), -0.75);
    }

    #[test]
    fn lm_single_token_decoder_matches_log_probs() {
        let b = backbone(Mode::Decoder);
        let p = b.init_adapters(2);
        let t = b.tokenize("toast").unwrap();
        assert_eq!(t.len(), 1);
        let lp = b.token_log_probs(&t, 0, AdapterRoute::Lm, &p).unwrap();
        let s = lm_score(&b, "toast", AdapterRoute::Lm, &p).unwrap();
        assert_eq!(s, lp[t.0[0] as usize]);
        assert!(matches!(lm_score(&b, "  ", AdapterRoute::Lm, &p), Err(Error::EmptySequence)));
    }

    #[test]
    fn lm_encoder_three_tokens_hand_sum() {
        let b = backbone(Mode::Encoder);
        let p = b.init_adapters(2);
        let t = b.tokenize("butter melts fast").unwrap();
        assert_eq!(t.len(), 3);
        let hand: f64 = (0..3)
            .map(|i| b.token_log_probs(&t, i, AdapterRoute::Lm, &p).unwrap()[t.0[i] as usize])
            .sum::<f64>()
            / 3.0;
        let before = b.forward_calls();
        let s = lm_score(&b, "butter melts fast", AdapterRoute::Lm, &p).unwrap();
        assert_eq!(b.forward_calls() - before, 3);
        assert!((s - hand).abs() < 1e-15);
        assert!(s <= 0.0);
    }

    fn instance(b: &Backbone, p: &AdapterParams, gold: usize) -> (VQAInstance, Vec<f64>) {
        let cands: Vec<String> = ["a red apple", "a blue car", "a green tree"].iter().map(|s| s.to_string()).collect();
        let qa = QAPair::new("t", "what is shown?", cands.clone(), gold, SourceTag::Synthetic).unwrap();
        // plant the gold candidate's projected query as the only patch
        let t = b.tokenize(&candidate_text("what is shown?", &cands[gold])).unwrap();
        let h = b.encode(&t, AdapterRoute::Itm, p).unwrap();
        let q = project(&h.context, &p.projection).unwrap();
        let inst = VQAInstance::with_image(
            qa,
            ImageRef { id: "img".into(), features: Some(feats(&[q.clone()])), embedding: None },
        );
        (inst, q)
    }

    #[test]
    fn planted_answer_wins_itm() {
        for mode in [Mode::Encoder, Mode::Decoder] {
            let b = backbone(mode);
            let p = b.init_adapters(4);
            for gold in 0..3 {
                let (inst, _) = instance(&b, &p, gold);
                let s = Scorer::new(&b, &p, None).score(&inst, ScoreFlags::default()).unwrap();
                // brute force: the gold candidate is exactly self-similar, every other is < 1
                assert!((s.s_itm[gold] - 1.0).abs() < 1e-12);
                for (i, &x) in s.s_itm.iter().enumerate() {
                    if i != gold {
                        assert!(x < s.s_itm[gold]);
                    }
                }
                assert_eq!(crate::types::argmax(&s.s_itm), gold);
            }
        }
    }

    #[test]
    fn flags_and_equivariance() {
        let b = backbone(Mode::Decoder);
        let p = b.init_adapters(4);
        let (inst, _) = instance(&b, &p, 1);
        let sc = Scorer::new(&b, &p, None);
        let lm_only = sc.score(&inst, ScoreFlags { use_lm: true, use_itm: false }).unwrap();
        assert!(lm_only.s_itm.iter().all(|&x| x == 0.0));
        assert!(!lm_only.has_itm);
        let full = sc.score(&inst, ScoreFlags::default()).unwrap();
        assert_eq!(full.s_lm, lm_only.s_lm);
        for i in 0..3 {
            assert_eq!(full.s_joint[i], 0.5 * (full.s_lm[i] + full.s_itm[i]));
        }
        let mut perm = inst.clone();
        perm.qa.candidates = vec![inst.qa.candidates[2].clone(), inst.qa.candidates[0].clone(), inst.qa.candidates[1].clone()];
        perm.qa.gold_index = 2;
        let ps = sc.score(&perm, ScoreFlags::default()).unwrap();
        assert_eq!(ps.s_lm, vec![full.s_lm[2], full.s_lm[0], full.s_lm[1]]);
        assert_eq!(ps.s_itm, vec![full.s_itm[2], full.s_itm[0], full.s_itm[1]]);
    }

    #[test]
    fn missing_features_error() {
        let b = backbone(Mode::Decoder);
        let p = b.init_adapters(4);
        let qa = QAPair::new("q9", "why?", vec!["a".into(), "b".into()], 0, SourceTag::Eval).unwrap();
        let inst = VQAInstance::text_only(qa);
        let sc = Scorer::new(&b, &p, None);
        assert!(matches!(sc.score(&inst, ScoreFlags::default()), Err(Error::MissingFeatures(_))));
        assert!(sc.score(&inst, ScoreFlags { use_lm: true, use_itm: false }).is_ok());
    }
}
