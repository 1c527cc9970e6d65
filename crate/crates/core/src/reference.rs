//! Literal loop implementations of the class-contrastive objectives, kept
//! deliberately naive (unshifted logits, one pair at a time) to serve as
//! oracles for the vectorized graph versions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::losses::{self, DomainQueries, LossError};
use crate::membank::BankSnapshot;
use crate::numgrad::{Graph, Tensor};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows with their (pseudo-)labels.
#[derive(Debug, Clone, Default)]
pub struct Labelled {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Labelled {
    pub fn random<R: Rng>(rng: &mut R, n: usize, dim: usize, classes: usize) -> Self {
        let rows = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let norm = dot(&v, &v).sqrt();
                v.iter().map(|x| x / norm).collect()
            })
            .collect();
        Labelled { rows, labels: (0..n).map(|_| rng.gen_range(0..classes)).collect() }
    }

    pub fn tensor(&self, dim: usize) -> Tensor {
        Tensor::from_rows(&self.rows, dim).unwrap()
    }

    pub fn snapshot(&self, dim: usize) -> BankSnapshot {
        BankSnapshot { keys: self.tensor(dim), labels: self.labels.clone() }
    }
}

/// A random multi-source instance: `b ≤ 4` queries per domain, banks of at
/// most 16 keys, `C ≤ 3`, `M ≤ 3`, unit-norm rows.
#[derive(Debug, Clone)]
pub struct Problem {
    pub dim: usize,
    pub tau: f64,
    pub sources: Vec<Labelled>,
    pub source_banks: Vec<Labelled>,
    pub target: Labelled,
    pub target_bank: Labelled,
}

impl Problem {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let dim = rng.gen_range(2..=6);
        let classes = rng.gen_range(1..=3);
        let b = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=3);
        // τ ≥ 0.1 keeps the unshifted e^{1/τ} far from overflow.
        let tau = rng.gen_range(0.1..1.0);
        let bank = |rng: &mut R| {
            let n = rng.gen_range(0..=16);
            Labelled::random(rng, n, dim, classes)
        };
        let source_banks = (0..m).map(|_| bank(rng)).collect();
        let target_bank = bank(rng);
        let sources = (0..m).map(|_| Labelled::random(rng, b, dim, classes)).collect();
        let target = Labelled::random(rng, b, dim, classes);
        Problem { dim, tau, sources, source_banks, target, target_bank }
    }
}

/// Mean over same-label pairs `(i, j)` of
/// `−log(e^{q_i·k_j/τ} / (e^{q_i·k_j/τ} + Σ_{l: y_l ≠ y_i} e^{q_i·k_l/τ}))`.
/// Pairs whose query has no negatives count in the mean but add 0.
pub fn class_contrastive(queries: &Labelled, bank: &Labelled, tau: f64) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (q, &yq) in queries.rows.iter().zip(&queries.labels) {
        for (k, &yk) in bank.rows.iter().zip(&bank.labels) {
            if yk != yq {
                continue;
            }
            pairs += 1;
            let mut negatives = 0.0;
            let mut any = false;
            for (kn, &l) in bank.rows.iter().zip(&bank.labels) {
                if l != yq {
                    negatives += (dot(q, kn) / tau).exp();
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let pos = (dot(q, k) / tau).exp();
            sum += -(pos / (pos + negatives)).ln();
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Every ordered source pair plus both directions between each source and
/// the target.
pub fn tcl_multi(sources: &[Labelled], source_banks: &[Labelled], target: &Labelled, target_bank: &Labelled, tau: f64) -> f64 {
    let m = sources.len();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                total += class_contrastive(&sources[i], &source_banks[j], tau);
            }
        }
        total += class_contrastive(target, &source_banks[i], tau);
        total += class_contrastive(&sources[i], target_bank, tau);
    }
    total
}

/// `(vectorized, loop)` values of `loss_st`, `loss_ts` (first source) and
/// `loss_tcl_multi` on `p`.
pub fn compare(p: &Problem) -> Result<[(f64, f64); 3], LossError> {
    let d = p.dim;
    let mut g = Graph::new();
    let source_nodes = p.sources.iter().map(|s| g.constant(s.tensor(d))).collect::<Result<Vec<_>, _>>()?;
    let target_node = g.constant(p.target.tensor(d))?;
    let banks: Vec<BankSnapshot> = p.source_banks.iter().map(|b| b.snapshot(d)).collect();
    let bank_refs: Vec<&BankSnapshot> = banks.iter().collect();
    let target_bank = p.target_bank.snapshot(d);
    let st = losses::loss_st(&mut g, source_nodes[0], &p.sources[0].labels, &target_bank, p.tau)?;
    let ts = losses::loss_ts(&mut g, target_node, &p.target.labels, &banks[0], p.tau)?;
    let sources: Vec<DomainQueries<'_>> = source_nodes
        .iter()
        .zip(&p.sources)
        .map(|(&queries, s)| DomainQueries { queries, labels: &s.labels })
        .collect();
    let target = DomainQueries { queries: target_node, labels: &p.target.labels };
    let multi = losses::loss_tcl_multi(&mut g, &sources, &bank_refs, target, &target_bank, p.tau)?;
    Ok([
        (st.value, class_contrastive(&p.sources[0], &p.target_bank, p.tau)),
        (ts.value, class_contrastive(&p.target, &p.source_banks[0], p.tau)),
        (multi.value, tcl_multi(&p.sources, &p.source_banks, &p.target, &p.target_bank, p.tau)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_with_one_negative() {
        let q = Labelled { rows: vec![vec![1.0, 0.0]], labels: vec![0] };
        let bank = Labelled { rows: vec![vec![1.0, 0.0], vec![0.0, 1.0]], labels: vec![0, 1] };
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((class_contrastive(&q, &bank, 1.0) - want).abs() < 1e-15);
    }

    #[test]
    fn no_positive_pairs_is_zero() {
        let q = Labelled { rows: vec![vec![1.0]], labels: vec![2] };
        let bank = Labelled { rows: vec![vec![1.0]], labels: vec![0] };
        assert_eq!(class_contrastive(&q, &bank, 0.5), 0.0);
    }
}
