//! Training objectives, recorded on a [`Graph`] so gradients reach the query
//! encoder.
//!
//! Every contrastive term here compares unit-norm query rows against
//! constant key rows from a memory snapshot. Similarities are shifted by the
//! maximum attainable inner product (1 for unit vectors) before
//! exponentiation, so `exp` never exceeds 1 even at small temperatures:
//!
//! `term(i, j) = log(exp(s'_ij) + Σ_neg exp(s'_il)) − s'_ij`, `s' = (⟨q, k⟩ − 1) / τ`
//!
//! which equals `−log softmax` over the positive and its negatives.

use thiserror::Error;

use crate::membank::BankSnapshot;
use crate::numgrad::{GradError, Graph, NodeId, Tensor};
use crate::pseudo::PseudoLabel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    InvalidTau(f64),
    #[error("confidence threshold must lie in (0, 1), got {0}")]
    InvalidRho(f64),
    #[error("trade-off weight must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("multi-source loss needs at least one source, got {0}")]
    NoSources(usize),
    #[error("{queries} query rows but {labels} labels")]
    LabelCount { queries: usize, labels: usize },
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Which auxiliary objective is weighted by λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Cross-domain class-level contrast (per-source banks when M > 1).
    Tcl,
    /// Instance-level InfoNCE on target data only.
    Idl,
    /// Class-level contrast within each domain only.
    Icdl,
    /// No auxiliary objective.
    None,
    /// Tcl with every source pooled into one domain and one bank.
    TclSourceCombine,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Tcl, Variant::Idl, Variant::Icdl, Variant::None, Variant::TclSourceCombine];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tcl => "tcl",
            Variant::Idl => "idl",
            Variant::Icdl => "icdl",
            Variant::None => "none",
            Variant::TclSourceCombine => "tcl-source-combine",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub rho: f64,
    pub lambda: f64,
    pub variant: Variant,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        // Written negated so NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.tau > 0.0) {
            return Err(LossError::InvalidTau(self.tau));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(LossError::InvalidRho(self.rho));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::InvalidLambda(self.lambda));
        }
        Ok(())
    }
}

/// One scalar objective on the graph. `node == None` means the term is
/// exactly zero and contributes nothing to backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub node: Option<NodeId>,
    pub value: f64,
    /// Positive pairs (contrastive) or contributing samples (cross-entropy).
    pub count: usize,
    /// Un-normalized sum of per-pair terms.
    pub raw_sum: f64,
}

impl Term {
    pub const ZERO: Term = Term { node: None, value: 0.0, count: 0, raw_sum: 0.0 };

    fn from_mean(g: &Graph, node: NodeId, count: usize, raw_sum: f64) -> Term {
        Term { node: Some(node), value: g.value(node).item(), count, raw_sum }
    }
}

/// Sum of terms, skipping exact zeros.
pub fn sum_terms(g: &mut Graph, terms: &[Term]) -> Result<Term, LossError> {
    let mut acc: Option<NodeId> = None;
    let mut count = 0;
    let mut raw_sum = 0.0;
    for t in terms {
        count += t.count;
        raw_sum += t.raw_sum;
        if let Some(n) = t.node {
            acc = Some(match acc {
                Some(a) => g.add(a, n)?,
                None => n,
            });
        }
    }
    Ok(match acc {
        Some(n) => Term { node: Some(n), value: g.value(n).item(), count, raw_sum },
        None => Term { count, raw_sum, ..Term::ZERO },
    })
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(LossError::InvalidTau(tau))
    }
}

/// Shifted, temperature-scaled similarities `(⟨q, k⟩ − 1) / τ` for constant keys.
fn shifted_logits(g: &mut Graph, queries: NodeId, keys: &Tensor, tau: f64) -> Result<NodeId, LossError> {
    let k = g.constant(keys.clone())?;
    let s = g.inner_product(queries, k)?;
    let shape = g.value(s).shape().to_vec();
    let ones = g.constant(Tensor::filled(&shape, 1.0))?;
    let shifted = g.sub(s, ones)?;
    Ok(g.div_scalar(shifted, tau)?)
}

/// Class-level contrast of `queries` (labelled `query_labels`) against a bank:
/// for every query `i` and bank key `j` with the same label, one InfoNCE term
/// whose negatives are all bank keys with a different label. Returns the mean
/// over positive pairs; pairs whose query has no negatives contribute 0.
pub fn class_contrastive(
    g: &mut Graph,
    queries: NodeId,
    query_labels: &[usize],
    bank: &BankSnapshot,
    tau: f64,
) -> Result<Term, LossError> {
    check_tau(tau)?;
    let (b, _) = g.value(queries).rows_cols();
    if b != query_labels.len() {
        return Err(LossError::LabelCount { queries: b, labels: query_labels.len() });
    }
    let n = bank.len();
    let mut pair_rows = Vec::new();
    let mut pair_flat = Vec::new();
    let mut total_pairs = 0;
    for (i, &c) in query_labels.iter().enumerate() {
        let positives = bank.labels.iter().filter(|&&l| l == c).count();
        total_pairs += positives;
        if positives == n {
            continue;
        }
        for (j, &l) in bank.labels.iter().enumerate() {
            if l == c {
                pair_rows.push(i);
                pair_flat.push(i * n + j);
            }
        }
    }
    if total_pairs == 0 {
        return Ok(Term::ZERO);
    }
    if pair_rows.is_empty() {
        return Ok(Term { count: total_pairs, ..Term::ZERO });
    }
    let s = shifted_logits(g, queries, &bank.keys, tau)?;
    let e = g.exp(s)?;
    let mask: Vec<f64> = query_labels
        .iter()
        .flat_map(|&c| bank.labels.iter().map(move |&l| if l != c { 1.0 } else { 0.0 }))
        .collect();
    let mask = g.constant(Tensor::matrix(b, n, mask)?)?;
    let neg = g.mul(e, mask)?;
    let neg_sum = g.row_sum(neg)?;
    let e_flat = g.reshape(e, vec![b * n])?;
    let s_flat = g.reshape(s, vec![b * n])?;
    let e_pos = g.gather_rows(e_flat, pair_flat.clone())?;
    let s_pos = g.gather_rows(s_flat, pair_flat)?;
    let n_pos = g.gather_rows(neg_sum, pair_rows)?;
    let den = g.add(e_pos, n_pos)?;
    let log_den = g.log(den)?;
    let terms = g.sub(log_den, s_pos)?;
    let sum = g.sum(terms)?;
    let raw_sum = g.value(sum).item();
    let mean = g.div_scalar(sum, total_pairs as f64)?;
    Ok(Term::from_mean(g, mean, total_pairs, raw_sum))
}

/// Source queries against the target memory (target pseudo-labels).
pub fn loss_st(
    g: &mut Graph,
    source_queries: NodeId,
    source_labels: &[usize],
    target_bank: &BankSnapshot,
    tau: f64,
) -> Result<Term, LossError> {
    class_contrastive(g, source_queries, source_labels, target_bank, tau)
}

/// Target queries (pseudo-labelled) against the source memory.
pub fn loss_ts(
    g: &mut Graph,
    target_queries: NodeId,
    target_labels: &[usize],
    source_bank: &BankSnapshot,
    tau: f64,
) -> Result<Term, LossError> {
    class_contrastive(g, target_queries, target_labels, source_bank, tau)
}

/// Query rows of one domain with their (pseudo-)labels.
#[derive(Debug, Clone, Copy)]
pub struct DomainQueries<'a> {
    pub queries: NodeId,
    pub labels: &'a [usize],
}

/// Single-source cross-domain loss: `L(t, s) + L(s, t)`.
pub fn loss_tcl(
    g: &mut Graph,
    source: DomainQueries<'_>,
    source_bank: &BankSnapshot,
    target: DomainQueries<'_>,
    target_bank: &BankSnapshot,
    tau: f64,
) -> Result<Term, LossError> {
    let ts = loss_ts(g, target.queries, target.labels, source_bank, tau)?;
    let st = loss_st(g, source.queries, source.labels, target_bank, tau)?;
    sum_terms(g, &[ts, st])
}

/// Multi-source loss: source↔source pairs (ground truth on both sides) plus
/// both directions between every source and the target.
pub fn loss_tcl_multi(
    g: &mut Graph,
    sources: &[DomainQueries<'_>],
    source_banks: &[&BankSnapshot],
    target: DomainQueries<'_>,
    target_bank: &BankSnapshot,
    tau: f64,
) -> Result<Term, LossError> {
    check_tau(tau)?;
    if sources.is_empty() || sources.len() != source_banks.len() {
        return Err(LossError::NoSources(sources.len()));
    }
    let mut terms = Vec::new();
    for (m, src) in sources.iter().enumerate() {
        for (n, bank) in source_banks.iter().enumerate() {
            if m != n {
                terms.push(class_contrastive(g, src.queries, src.labels, bank, tau)?);
            }
        }
    }
    // Same term order as `loss_tcl` per source, so M = 1 records the
    // identical graph.
    for (src, bank) in sources.iter().zip(source_banks) {
        terms.push(loss_ts(g, target.queries, target.labels, bank, tau)?);
        terms.push(loss_st(g, src.queries, src.labels, target_bank, tau)?);
    }
    sum_terms(g, &terms)
}

/// Intra-domain variant: each domain's queries against its own bank only.
pub fn loss_icdl(
    g: &mut Graph,
    sources: &[DomainQueries<'_>],
    source_banks: &[&BankSnapshot],
    target: DomainQueries<'_>,
    target_bank: &BankSnapshot,
    tau: f64,
) -> Result<Term, LossError> {
    check_tau(tau)?;
    if sources.len() != source_banks.len() {
        return Err(LossError::NoSources(sources.len()));
    }
    let mut terms = Vec::new();
    for (src, bank) in sources.iter().zip(source_banks) {
        terms.push(class_contrastive(g, src.queries, src.labels, bank, tau)?);
    }
    terms.push(class_contrastive(g, target.queries, target.labels, target_bank, tau)?);
    sum_terms(g, &terms)
}

/// Instance-level InfoNCE: row `i` of `queries` is positive with row `i` of
/// `positive_keys`; every key in `negatives` is a negative. Mean over rows.
pub fn loss_idl(
    g: &mut Graph,
    queries: NodeId,
    positive_keys: &Tensor,
    negatives: &Tensor,
    tau: f64,
) -> Result<Term, LossError> {
    check_tau(tau)?;
    let (b, _) = g.value(queries).rows_cols();
    let (pk, _) = positive_keys.rows_cols();
    if pk != b {
        return Err(LossError::LabelCount { queries: b, labels: pk });
    }
    let k_neg = negatives.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Ok(Term::ZERO);
    }
    if k_neg == 0 {
        return Ok(Term { count: b, ..Term::ZERO });
    }
    let kp = g.constant(positive_keys.clone())?;
    let prod = g.mul(queries, kp)?;
    let pos = g.row_sum(prod)?;
    let ones = g.constant(Tensor::filled(&[b], 1.0))?;
    let pos = g.sub(pos, ones)?;
    let s_pos = g.div_scalar(pos, tau)?;
    let e_pos = g.exp(s_pos)?;
    let s_neg = shifted_logits(g, queries, negatives, tau)?;
    let e_neg = g.exp(s_neg)?;
    let n_sum = g.row_sum(e_neg)?;
    let den = g.add(e_pos, n_sum)?;
    let log_den = g.log(den)?;
    let terms = g.sub(log_den, s_pos)?;
    let sum = g.sum(terms)?;
    let raw_sum = g.value(sum).item();
    let mean = g.div_scalar(sum, b as f64)?;
    Ok(Term::from_mean(g, mean, b, raw_sum))
}

/// InfoNCE for a single query vector.
pub fn info_nce(
    g: &mut Graph,
    query: NodeId,
    positive: &Tensor,
    negatives: &Tensor,
    tau: f64,
) -> Result<Term, LossError> {
    let d = g.value(query).len();
    let q = g.reshape(query, vec![1, d])?;
    let kp = positive.reshaped(vec![1, d])?;
    loss_idl(g, q, &kp, negatives, tau)
}

/// Mean cross-entropy `−log p(y | x)` from classifier logits.
pub fn loss_src(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<Term, LossError> {
    let (b, c) = g.value(logits).rows_cols();
    if b != labels.len() {
        return Err(LossError::LabelCount { queries: b, labels: labels.len() });
    }
    if b == 0 {
        return Ok(Term::ZERO);
    }
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let n = idx.len();
    masked_cross_entropy(g, logits, idx, n)
}

fn masked_cross_entropy(g: &mut Graph, logits: NodeId, flat_idx: Vec<usize>, divisor: usize) -> Result<Term, LossError> {
    let count = flat_idx.len();
    let (b, c) = g.value(logits).rows_cols();
    let lp = g.row_log_softmax(logits)?;
    let flat = g.reshape(lp, vec![b * c])?;
    let picked = g.gather_rows(flat, flat_idx)?;
    let sum = g.sum(picked)?;
    let raw_sum = -g.value(sum).item();
    let mean = g.div_scalar(sum, -(divisor as f64))?;
    Ok(Term::from_mean(g, mean, count, raw_sum))
}

/// Cross-entropy of query logits against gated pseudo-labels; mean over the
/// gated samples, zero when none pass the gate.
pub fn loss_tar(g: &mut Graph, logits: NodeId, pseudo: &[PseudoLabel]) -> Result<Term, LossError> {
    let (b, c) = g.value(logits).rows_cols();
    if b != pseudo.len() {
        return Err(LossError::LabelCount { queries: b, labels: pseudo.len() });
    }
    let idx: Vec<usize> =
        pseudo.iter().enumerate().filter(|(_, p)| p.gated).map(|(i, p)| i * c + p.label).collect();
    if idx.is_empty() {
        return Ok(Term::ZERO);
    }
    let n = idx.len();
    masked_cross_entropy(g, logits, idx, n)
}

/// Decomposed objective of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_src: f64,
    pub l_tar: f64,
    pub l_tcl: f64,
    pub total: f64,
    /// Effective weight applied to `l_tcl`.
    pub lambda: f64,
    pub gated_count: usize,
    pub target_count: usize,
    pub positive_pair_count: usize,
    pub raw_pair_sum: f64,
}

/// `total = l_src + l_tar + λ·l_aux`. The auxiliary term is `None` when it
/// was skipped (λ = 0); with λ_eff = 0 it is reported but not backpropagated.
pub fn loss_total(
    g: &mut Graph,
    src: Term,
    tar: Term,
    aux: Option<Term>,
    lambda: f64,
    target_count: usize,
) -> Result<(Option<NodeId>, LossReport), LossError> {
    let aux = aux.unwrap_or(Term::ZERO);
    let mut parts = vec![src, tar];
    if lambda != 0.0 {
        if let Some(n) = aux.node {
            let weighted = g.scale(n, lambda)?;
            parts.push(Term { node: Some(weighted), value: g.value(weighted).item(), ..aux });
        }
    }
    let total = sum_terms(g, &parts)?;
    let report = LossReport {
        l_src: src.value,
        l_tar: tar.value,
        l_tcl: aux.value,
        total: total.value,
        lambda,
        gated_count: tar.count,
        target_count,
        positive_pair_count: aux.count,
        raw_pair_sum: aux.raw_sum,
    };
    Ok((total.node, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(keys: Vec<Vec<f64>>, labels: Vec<usize>) -> BankSnapshot {
        let d = keys.first().map_or(2, |k| k.len());
        BankSnapshot { keys: Tensor::from_rows(&keys, d).unwrap(), labels }
    }

    fn q(g: &mut Graph, rows: Vec<Vec<f64>>) -> NodeId {
        let d = rows[0].len();
        g.param(Tensor::from_rows(&rows, d).unwrap()).unwrap()
    }

    const LN_1P_EXP_NEG1: f64 = 0.313_261_687_518_222_9;

    #[test]
    fn info_nce_examples() {
        let mut g = Graph::new();
        let qn = g.param(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let none = Tensor::zeros(&[0, 2]);
        let t = info_nce(&mut g, qn, &Tensor::vector(vec![1.0, 0.0]), &none, 1.0).unwrap();
        assert_eq!(t.value, 0.0);
        let neg = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let t = info_nce(&mut g, qn, &Tensor::vector(vec![1.0, 0.0]), &neg, 1.0).unwrap();
        assert!((t.value - LN_1P_EXP_NEG1).abs() < 1e-12);
        let t = info_nce(&mut g, qn, &Tensor::vector(vec![1.0, 0.0]), &neg, 0.05).unwrap();
        assert!((t.value - 2.061_153_620_314_381e-9).abs() < 1e-15);
        assert!(matches!(
            info_nce(&mut g, qn, &Tensor::vector(vec![1.0, 0.0]), &neg, 0.0),
            Err(LossError::InvalidTau(_))
        ));
    }

    #[test]
    fn loss_src_examples() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::matrix(1, 10, vec![0.0; 10]).unwrap()).unwrap();
        let t = loss_src(&mut g, logits, &[3]).unwrap();
        assert!((t.value - 10f64.ln()).abs() < 1e-12);
        let mut big = vec![-800.0; 4];
        big[2] = 800.0;
        let logits = g.param(Tensor::matrix(1, 4, big).unwrap()).unwrap();
        assert_eq!(loss_src(&mut g, logits, &[2]).unwrap().value, 0.0);
    }

    #[test]
    fn loss_tar_examples() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, -1.0]).unwrap()).unwrap();
        let closed = [
            PseudoLabel { label: 0, confidence: 0.5, cluster_label: 0, gated: false },
            PseudoLabel { label: 1, confidence: 0.9, cluster_label: 1, gated: false },
        ];
        let t = loss_tar(&mut g, logits, &closed).unwrap();
        assert_eq!((t.value, t.count), (0.0, 0));
        let mut one = closed;
        one[0].gated = true;
        let t = loss_tar(&mut g, logits, &one).unwrap();
        assert!((t.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(t.count, 1);
    }

    #[test]
    fn loss_st_examples() {
        let mut g = Graph::new();
        let qs = q(&mut g, vec![vec![1.0, 0.0]]);
        let empty = BankSnapshot::empty(2);
        assert_eq!(loss_st(&mut g, qs, &[0], &empty, 1.0).unwrap(), Term::ZERO);
        let b = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let t = loss_st(&mut g, qs, &[0], &b, 1.0).unwrap();
        assert!((t.value - LN_1P_EXP_NEG1).abs() < 1e-12);
        assert_eq!(t.count, 1);
        let ts = loss_ts(&mut g, qs, &[0], &b, 1.0).unwrap();
        let tcl = sum_terms(&mut g, &[ts, t]).unwrap();
        assert!((tcl.value - 2.0 * LN_1P_EXP_NEG1).abs() < 1e-12);
    }

    #[test]
    fn no_negatives_means_zero() {
        let mut g = Graph::new();
        let qs = q(&mut g, vec![vec![0.6, 0.8]]);
        let b = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 0]);
        let t = loss_st(&mut g, qs, &[0], &b, 0.05).unwrap();
        assert_eq!((t.value, t.count, t.node), (0.0, 2, None));
    }

    #[test]
    fn tcl_equals_multi_with_one_source() {
        let mut g = Graph::new();
        let qs = q(&mut g, vec![vec![0.6, 0.8], vec![1.0, 0.0]]);
        let qt = q(&mut g, vec![vec![0.0, 1.0]]);
        let sb = bank(vec![vec![1.0, 0.0], vec![0.0, -1.0]], vec![0, 1]);
        let tb = bank(vec![vec![0.8, 0.6], vec![-0.6, 0.8]], vec![1, 0]);
        let s = DomainQueries { queries: qs, labels: &[0, 1] };
        let t = DomainQueries { queries: qt, labels: &[1] };
        let single = loss_tcl(&mut g, s, &sb, t, &tb, 0.5).unwrap();
        let multi = loss_tcl_multi(&mut g, &[s], &[&sb], t, &tb, 0.5).unwrap();
        assert!((single.value - multi.value).abs() < 1e-15);
        assert!(matches!(loss_tcl_multi(&mut g, &[], &[], t, &tb, 0.5), Err(LossError::NoSources(0))));
    }

    #[test]
    fn total_combinations() {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, v: f64| {
            let n = g.param(Tensor::scalar(v)).unwrap();
            Term { node: Some(n), value: v, count: 1, raw_sum: v }
        };
        let (a, b, c) = (mk(&mut g, 1.0), mk(&mut g, 0.5), mk(&mut g, 2.0));
        let (_, r) = loss_total(&mut g, a, b, Some(c), 0.3, 4).unwrap();
        assert!((r.total - 2.1).abs() < 1e-15);
        let (_, r) = loss_total(&mut g, a, b, Some(c), 1.0, 4).unwrap();
        assert_eq!(r.total, 3.5);
        let (_, r) = loss_total(&mut g, a, b, None, 0.0, 4).unwrap();
        assert_eq!(r.total, 1.5);
        assert_eq!(r.l_tcl, 0.0);
    }

    #[test]
    fn config_validation() {
        let ok = ContrastiveConfig { tau: 0.05, rho: 0.95, lambda: 0.3, variant: Variant::Tcl };
        assert!(ok.validate().is_ok());
        assert!(ContrastiveConfig { tau: 0.0, ..ok }.validate().is_err());
        assert!(ContrastiveConfig { rho: 1.0, ..ok }.validate().is_err());
        assert!(ContrastiveConfig { lambda: 1.5, ..ok }.validate().is_err());
        assert_eq!(Variant::parse("TCL-source-combine"), Some(Variant::TclSourceCombine));
    }
}
