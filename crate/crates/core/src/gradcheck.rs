//! Finite-difference verification of every training objective.
//!
//! Each instance draws unit-norm query rows (or logits, for the
//! cross-entropies) and compares the analytic gradient of one loss with a
//! central difference. Two verdicts are reported: the plain relative error,
//! and agreement up to the rounding floor of the difference quotient, which
//! dominates for small coordinates of losses summed over many terms.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::losses::{self, DomainQueries, LossError, Term};
use crate::membank::BankSnapshot;
use crate::numgrad::{Graph, NodeId, Tensor};
use crate::pseudo::PseudoLabel;
use crate::rng::{stream_rng, Stream};

pub const FD_STEP: f64 = 1e-6;
pub const MAX_REL_ERROR: f64 = 1e-6;
/// Coordinates with a smaller analytic gradient are not compared.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Worst-case absolute error of `(f(x+h) − f(x−h)) / 2h` when both values
/// carry a few ulps of rounding, intermediates up to `scale` in magnitude.
pub fn noise_floor(scale: f64) -> f64 {
    64.0 * f64::EPSILON * scale.abs().max(1.0) / (2.0 * FD_STEP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    InfoNce,
    Src,
    Tar,
    St,
    Ts,
    TclMulti,
    Idl,
    Icdl,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::InfoNce,
        LossKind::Src,
        LossKind::Tar,
        LossKind::St,
        LossKind::Ts,
        LossKind::TclMulti,
        LossKind::Idl,
        LossKind::Icdl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::InfoNce => "info_nce",
            LossKind::Src => "loss_src",
            LossKind::Tar => "loss_tar",
            LossKind::St => "loss_st",
            LossKind::Ts => "loss_ts",
            LossKind::TclMulti => "loss_tcl_multi",
            LossKind::Idl => "loss_idl",
            LossKind::Icdl => "loss_icdl",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        LossKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub loss: LossKind,
    pub instances: usize,
    /// Coordinates compared (those above [`GRAD_FLOOR`]).
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst: (f64, f64),
    /// Coordinates whose mismatch exceeds `MAX_REL_ERROR·|analytic|` plus the
    /// rounding floor of the difference quotient.
    pub beyond_noise: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.coordinates > 0 && self.max_rel_error < MAX_REL_ERROR
    }

    /// Agreement up to what a difference quotient of a rounded loss can
    /// resolve: `|a − n| ≤ MAX_REL_ERROR·|a| + noise_floor(f)`.
    pub fn passed_above_noise(&self) -> bool {
        self.coordinates > 0 && self.beyond_noise == 0
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<15} {} instances, {} coords, max rel err {:.3e} (analytic {:.10e}, numeric {:.10e}) {}, {} beyond noise",
            self.loss.name(),
            self.instances,
            self.coordinates,
            self.max_rel_error,
            self.worst.0,
            self.worst.1,
            if self.passed() { "ok" } else { "FAIL" },
            self.beyond_noise
        )
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_matrix(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
    let mut data = gaussian(rng, rows * d);
    for row in data.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(vec![rows, d], data).unwrap()
}

fn bank(rng: &mut ChaCha8Rng, d: usize, classes: usize) -> BankSnapshot {
    let n = rng.gen_range(2..=8);
    BankSnapshot { keys: unit_matrix(rng, n, d), labels: (0..n).map(|_| rng.gen_range(0..classes)).collect() }
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

/// One random problem: its inputs and how to record the loss on a graph.
type BuildLoss = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<Term, LossError>>;

struct Instance {
    inputs: Vec<Tensor>,
    build: BuildLoss,
    /// Largest intermediate magnitude the loss passes through.
    scale: f64,
}

fn instance(kind: LossKind, rng: &mut ChaCha8Rng) -> Instance {
    let d = 4;
    let classes = rng.gen_range(2..=3);
    let tau = rng.gen_range(0.05..1.0);
    let b = rng.gen_range(1..=4);
    let raw = |rng: &mut ChaCha8Rng, rows: usize| unit_matrix(rng, rows, d);
    // Shifted logits reach 2/τ before cancelling back to O(1) terms.
    let scale = 2.0 / tau;
    match kind {
        LossKind::InfoNce => {
            let pos = unit_matrix(rng, 1, d).reshaped(vec![d]).unwrap();
            let k = rng.gen_range(1..=6);
            let neg = unit_matrix(rng, k, d);
            Instance {
                inputs: vec![unit_matrix(rng, 1, d).reshaped(vec![d]).unwrap()],
                build: Box::new(move |g, x| losses::info_nce(g, x[0], &pos, &neg, tau)),
                scale,
            }
        }
        LossKind::Src | LossKind::Tar => {
            let y = labels(rng, b, classes);
            let logits = Tensor::new(vec![b, classes], gaussian(rng, b * classes)).unwrap();
            let mut gated: Vec<bool> = (0..b).map(|_| rng.gen_bool(0.6)).collect();
            gated[0] = true;
            Instance {
                inputs: vec![logits],
                build: Box::new(move |g, x| {
                    if kind == LossKind::Src {
                        losses::loss_src(g, x[0], &y)
                    } else {
                        let pseudo: Vec<PseudoLabel> = y
                            .iter()
                            .zip(&gated)
                            .map(|(&label, &gated)| PseudoLabel { label, confidence: 0.99, cluster_label: label, gated })
                            .collect();
                        losses::loss_tar(g, x[0], &pseudo)
                    }
                }),
                scale: 1.0,
            }
        }
        LossKind::St | LossKind::Ts => {
            let y = labels(rng, b, classes);
            let bank = bank(rng, d, classes);
            Instance {
                inputs: vec![raw(rng, b)],
                build: Box::new(move |g, x| {
                    if kind == LossKind::St {
                        losses::loss_st(g, x[0], &y, &bank, tau)
                    } else {
                        losses::loss_ts(g, x[0], &y, &bank, tau)
                    }
                }),
                scale,
            }
        }
        LossKind::Idl => {
            let pos = unit_matrix(rng, b, d);
            let k = rng.gen_range(1..=8);
            let neg = unit_matrix(rng, k, d);
            Instance {
                inputs: vec![raw(rng, b)],
                build: Box::new(move |g, x| losses::loss_idl(g, x[0], &pos, &neg, tau)),
                scale,
            }
        }
        LossKind::TclMulti | LossKind::Icdl => {
            let m = rng.gen_range(1..=3);
            let source_labels: Vec<Vec<usize>> = (0..m).map(|_| labels(rng, b, classes)).collect();
            let source_banks: Vec<BankSnapshot> = (0..m).map(|_| bank(rng, d, classes)).collect();
            let target_labels = labels(rng, b, classes);
            let target_bank = bank(rng, d, classes);
            let inputs = (0..=m).map(|_| raw(rng, b)).collect();
            Instance {
                inputs,
                build: Box::new(move |g, x| {
                    let qs: Vec<NodeId> = x.to_vec();
                    let sources: Vec<DomainQueries<'_>> = source_labels
                        .iter()
                        .zip(&qs)
                        .map(|(labels, &queries)| DomainQueries { queries, labels })
                        .collect();
                    let target = DomainQueries { queries: qs[m], labels: &target_labels };
                    let banks: Vec<&BankSnapshot> = source_banks.iter().collect();
                    if kind == LossKind::TclMulti {
                        losses::loss_tcl_multi(g, &sources, &banks, target, &target_bank, tau)
                    } else {
                        losses::loss_icdl(g, &sources, &banks, target, &target_bank, tau)
                    }
                }),
                scale,
            }
        }
    }
}

fn evaluate(inst: &Instance, inputs: &[Tensor]) -> Result<(Graph, Vec<NodeId>, Term), LossError> {
    let mut g = Graph::new();
    let ids = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let term = (inst.build)(&mut g, &ids)?;
    Ok((g, ids, term))
}

/// Checks `kind` on `instances` random problems. With `sign_flip`, the
/// analytic gradient is negated before comparison (a planted fault that
/// the check must catch).
pub fn check_loss(kind: LossKind, instances: usize, seed: u64, sign_flip: bool) -> Result<CheckReport, LossError> {
    let mut rng = stream_rng(seed, Stream::Data, &[0x6AD, kind as u64]);
    let mut report =
        CheckReport { loss: kind, instances, coordinates: 0, max_rel_error: 0.0, worst: (0.0, 0.0), beyond_noise: 0 };
    for _ in 0..instances {
        let inst = instance(kind, &mut rng);
        let (g, ids, term) = evaluate(&inst, &inst.inputs)?;
        let Some(out) = term.node else { continue };
        let scale = term.value.abs().max(inst.scale);
        let grads = g.backward_scalar(out)?;
        for (k, input) in inst.inputs.iter().enumerate() {
            let analytic = match grads.get(ids[k]) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; input.len()],
            };
            for j in 0..input.len() {
                let a = if sign_flip { -analytic[j] } else { analytic[j] };
                if a.abs() <= GRAD_FLOOR {
                    continue;
                }
                let mut shifted = inst.inputs.clone();
                let f = |shifted: &mut Vec<Tensor>, delta: f64| -> Result<f64, LossError> {
                    shifted[k].data_mut()[j] = input.data()[j] + delta;
                    Ok(evaluate(&inst, shifted)?.2.value)
                };
                let numeric = (f(&mut shifted, FD_STEP)? - f(&mut shifted, -FD_STEP)?) / (2.0 * FD_STEP);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                report.coordinates += 1;
                if (a - numeric).abs() > MAX_REL_ERROR * a.abs() + noise_floor(scale) {
                    report.beyond_noise += 1;
                }
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = (a, numeric);
                }
            }
        }
    }
    Ok(report)
}

/// Every loss, `instances` problems each.
pub fn check_all(instances: usize, seed: u64, sign_flip: Option<LossKind>) -> Result<Vec<CheckReport>, LossError> {
    LossKind::ALL.into_iter().map(|k| check_loss(k, instances, seed, sign_flip == Some(k))).collect()
}
