//! The training loop: batch assembly, pseudo-labelling, the combined
//! objective, momentum updates, memory maintenance, per-epoch clustering and
//! evaluation.

mod config;
mod metrics;

pub use config::{ConfigError, SourceSet, TrainConfig};
pub use metrics::{epoch_rows, metrics_to_csv, parse_metrics_csv, MetricsError, MetricsRow, METRICS_HEADER};

use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::encoders::{Architecture, EncoderError, EncoderPair, Sgd};
use crate::losses::{self, DomainQueries, LossError, LossReport, Term, Variant};
use crate::membank::{BankError, BankSnapshot, MemoryBank};
use crate::numgrad::{GradError, Graph, NodeId, Tensor};
use crate::par::Exec;
use crate::pseudo::{self, ClusterState, PseudoError, PseudoLabel};
use crate::rng::{derive, stream_rng, Stream};
use crate::synthdata::{augment_batch, generate_suite, Dataset, Layout, ViewRole};
use metrics::Window;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error("gradient reached key parameter `{0}`")]
    KeyGradient(String),
}

impl From<GradError> for TrainError {
    fn from(e: GradError) -> Self {
        TrainError::Loss(LossError::Grad(e))
    }
}

impl TrainError {
    /// True for NaN/inf failures, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::Loss(LossError::Grad(GradError::NonFinite { .. }))
                | TrainError::Encoder(EncoderError::Grad(GradError::NonFinite { .. }))
                | TrainError::KeyGradient(_)
        )
    }
}

/// Generates the suite's domains for `config` (seeded by `config.seed`).
pub fn generate_data(config: &TrainConfig) -> Vec<Dataset> {
    generate_suite(config.suite, config.samples_per_domain, config.seed)
}

/// Argmax accuracy of the query classifier on un-augmented inputs.
pub fn evaluate(pair: &EncoderPair, data: &Dataset) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Data("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let probs = pair.predict(&data.gather(chunk))?.probs;
        for (r, &i) in chunk.iter().enumerate() {
            if pseudo::argmax(probs.row(r)) as i32 == data.samples[i].label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Row-wise L2 normalization of a value tensor.
pub fn unit_rows(t: &Tensor) -> Tensor {
    let (n, d) = t.rows_cols();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(d.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::numgrad::L2_EPS);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::matrix(n, d, data).unwrap()
}

/// What one optimizer step saw and did.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: LossReport,
    pub pseudo: Vec<PseudoLabel>,
    /// Pseudo-labels agreeing with the (never trained on) ground truth.
    pub pl_correct: usize,
    /// Largest key-classifier confidence in the target batch.
    pub max_confidence: f64,
}

/// Sample indices of one step, one slice per source then the target.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub sources: Vec<Vec<usize>>,
    pub target: Vec<usize>,
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_accuracy: f64,
    pub metrics: Vec<MetricsRow>,
    pub steps: u64,
}

pub struct Trainer {
    config: TrainConfig,
    pair: EncoderPair,
    sgd: Sgd,
    sources: Vec<Dataset>,
    target: Dataset,
    layout: Layout,
    /// One bank per source, or a single shared bank when sources are pooled.
    source_banks: Vec<MemoryBank>,
    target_bank: MemoryBank,
    cluster: Option<ClusterState>,
    multi_loss: bool,
    step: u64,
    epoch: usize,
    metrics: Vec<MetricsRow>,
    last_accuracy: f64,
    started: Instant,
}

impl Trainer {
    /// `domains` holds every domain of the suite, indexed by domain id.
    pub fn new(config: TrainConfig, domains: Vec<Dataset>) -> Result<Self, TrainError> {
        config.validate()?;
        if domains.len() != config.suite.domain_count() {
            return Err(TrainError::Data(format!(
                "expected {} domains, got {}",
                config.suite.domain_count(),
                domains.len()
            )));
        }
        let kind = config.suite.kind();
        let classes = config.suite.classes();
        for d in &domains {
            if d.dim != kind.dim() || d.classes != classes {
                return Err(TrainError::Data(format!(
                    "domain {} has dim {} and {} classes, suite wants {} and {}",
                    d.domain_id,
                    d.dim,
                    d.classes,
                    kind.dim(),
                    classes
                )));
            }
            if d.len() < config.batch_size {
                return Err(TrainError::Data(format!("domain {} has fewer samples than a batch", d.domain_id)));
            }
            if let Some(s) = d.samples.iter().find(|s| s.label < 0 || s.label as usize >= classes) {
                return Err(TrainError::Data(format!("domain {} has label {}", d.domain_id, s.label)));
            }
        }
        let arch = Architecture::new(kind.dim(), config.proj_dim, classes);
        let pair = EncoderPair::new(arch, config.alpha, &mut stream_rng(config.seed, Stream::Init, &[]))?;
        let source_ids = config.source_domains();
        let sources: Vec<Dataset> = source_ids.iter().map(|&i| domains[i].clone()).collect();
        let target = domains[config.target].clone();
        let source_banks = if config.variant == Variant::TclSourceCombine {
            vec![MemoryBank::new(source_ids[0], config.mem_capacity, config.proj_dim, classes)]
        } else {
            source_ids
                .iter()
                .map(|&i| MemoryBank::new(i, config.mem_capacity, config.proj_dim, classes))
                .collect()
        };
        let target_bank = MemoryBank::new(config.target, config.mem_capacity, config.proj_dim, classes);
        let mut t = Trainer {
            sgd: Sgd::new(config.lr, config.sgd_momentum),
            multi_loss: sources.len() > 1,
            layout: kind.layout(),
            pair,
            sources,
            target,
            source_banks,
            target_bank,
            cluster: None,
            step: 0,
            epoch: 0,
            metrics: Vec::new(),
            last_accuracy: 0.0,
            started: Instant::now(),
            config,
        };
        t.last_accuracy = evaluate(&t.pair, &t.target)?;
        Ok(t)
    }

    /// Routes the single-source case through the multi-source objective too.
    pub fn force_multi_source_loss(&mut self) {
        self.multi_loss = true;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn pair(&self) -> &EncoderPair {
        &self.pair
    }

    pub fn source_banks(&self) -> &[MemoryBank] {
        &self.source_banks
    }

    pub fn target_bank(&self) -> &MemoryBank {
        &self.target_bank
    }

    pub fn cluster(&self) -> Option<&ClusterState> {
        self.cluster.as_ref()
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn target_data(&self) -> &Dataset {
        &self.target
    }

    /// Steps per epoch: the smallest domain decides.
    pub fn steps_per_epoch(&self) -> usize {
        self.sources.iter().chain([&self.target]).map(|d| d.len() / self.config.batch_size).min().unwrap()
    }

    /// Per-domain shuffles for `epoch`, cut into batches.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<StepBatch> {
        let b = self.config.batch_size;
        let perm = |d: &Dataset| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.shuffle(&mut stream_rng(self.config.seed, Stream::Shuffle, &[epoch as u64, d.domain_id as u64]));
            idx
        };
        let source_perms: Vec<Vec<usize>> = self.sources.iter().map(perm).collect();
        let target_perm = perm(&self.target);
        (0..self.steps_per_epoch())
            .map(|s| StepBatch {
                sources: source_perms.iter().map(|p| p[s * b..(s + 1) * b].to_vec()).collect(),
                target: target_perm[s * b..(s + 1) * b].to_vec(),
            })
            .collect()
    }

    fn views(&self, data: &Dataset, idx: &[usize], role: ViewRole, step_in_epoch: usize) -> (Tensor, Tensor) {
        let (seed, epoch, domain) = (self.config.seed, self.epoch as u64, data.domain_id as u64);
        let seed_of = move |r: usize| derive(seed, Stream::Augment, &[epoch, step_in_epoch as u64, domain, r as u64]);
        augment_batch(data, idx, self.layout, role, seed_of, Exec::for_work(idx.len() * data.dim * 64))
    }

    /// One optimizer step over one batch per domain.
    pub fn train_step(&mut self, batch: &StepBatch, step_in_epoch: usize) -> Result<StepOutcome, TrainError> {
        let cfg = &self.config;
        let b = cfg.batch_size;
        let m = self.sources.len();
        if batch.sources.len() != m || batch.target.len() != b || batch.sources.iter().any(|s| s.len() != b) {
            return Err(TrainError::Data("step batch does not match the domain layout".into()));
        }
        let mut q_parts = Vec::with_capacity(m + 1);
        let mut k_parts = Vec::with_capacity(m + 1);
        for (data, idx) in self.sources.iter().zip(&batch.sources) {
            let (q, k) = self.views(data, idx, ViewRole::Source, step_in_epoch);
            q_parts.push(q);
            k_parts.push(k);
        }
        let (tq, tk) = self.views(&self.target, &batch.target, ViewRole::Target, step_in_epoch);
        q_parts.push(tq);
        k_parts.push(tk);
        let dim = self.target.dim;
        let rows = |d: usize| -> Vec<usize> { (d * b..(d + 1) * b).collect() };
        let source_labels: Vec<Vec<usize>> = self
            .sources
            .iter()
            .zip(&batch.sources)
            .map(|(data, idx)| idx.iter().map(|&i| data.samples[i].label as usize).collect())
            .collect();

        // Key side first: no graph, no gradient.
        let keys = self.pair.encode_key(&Tensor::concat_rows(&k_parts.iter().collect::<Vec<_>>(), dim))?;
        let target_rows = rows(m);
        let mut pseudo =
            pseudo::assign_from_probs(&keys.probs.select_rows(&target_rows), cfg.rho, cfg.target_loss);
        pseudo::apply_refinement(&mut pseudo, self.cluster.as_ref(), &unit_rows(&keys.z.select_rows(&target_rows)));
        let max_confidence = pseudo.iter().map(|p| p.confidence).fold(0.0, f64::max);
        let pl_correct = pseudo
            .iter()
            .zip(&batch.target)
            .filter(|(p, &i)| p.label as i32 == self.target.samples[i].label)
            .count();

        // Query side on a fresh graph.
        let mut g = Graph::new();
        let bound = self.pair.query.bind(&mut g, true)?;
        let enc = self.pair.encode_query(
            &mut g,
            &bound,
            &Tensor::concat_rows(&q_parts.iter().collect::<Vec<_>>(), dim),
        )?;
        let source_rows: Vec<usize> = (0..m * b).collect();
        let src_logits = g.gather_rows(enc.logits, source_rows)?;
        let all_source_labels: Vec<usize> = source_labels.concat();
        let l_src = losses::loss_src(&mut g, src_logits, &all_source_labels)?;
        let tgt_logits = g.gather_rows(enc.logits, target_rows.clone())?;
        // The gate follows classifier confidence; the class comes from the
        // refined (cluster) label.
        let refined: Vec<PseudoLabel> = pseudo.iter().map(|p| PseudoLabel { label: p.cluster_label, ..*p }).collect();
        let l_tar = losses::loss_tar(&mut g, tgt_logits, &refined)?;

        let lambda = cfg.lambda_at(self.epoch);
        let aux = if cfg.lambda == 0.0 || cfg.variant == Variant::None {
            None
        } else {
            let target_pl: Vec<usize> = pseudo.iter().map(|p| p.cluster_label).collect();
            Some(self.aux_loss(&mut g, enc.proj, &source_labels, &target_pl, &keys.proj.select_rows(&target_rows))?)
        };
        let (total, report) = losses::loss_total(&mut g, l_src, l_tar, aux, lambda, b)?;
        let total = total.expect("source cross-entropy is always recorded");

        let grads = g.backward_scalar(total)?;
        let previous_query = self.pair.query.clone();
        self.pair.query.attach_grads(&bound, &grads)?;
        self.sgd.step(&mut self.pair.query)?;
        if let Some((name, _)) = self.pair.key.iter().find(|(_, t)| t.grad.is_some()) {
            return Err(TrainError::KeyGradient(name.clone()));
        }
        self.pair.momentum_update(&previous_query)?;

        // Banks are written only after every loss has read them.
        if self.source_banks.len() == m {
            for (d, (bank, labels)) in self.source_banks.iter_mut().zip(&source_labels).enumerate() {
                bank.enqueue(&keys.proj.select_rows(&rows(d)), labels)?;
            }
        } else {
            let idx: Vec<usize> = (0..m * b).collect();
            self.source_banks[0].enqueue(&keys.proj.select_rows(&idx), &all_source_labels)?;
        }
        let cluster_labels: Vec<usize> = pseudo.iter().map(|p| p.cluster_label).collect();
        self.target_bank.enqueue(&keys.proj.select_rows(&target_rows), &cluster_labels)?;
        self.step += 1;
        Ok(StepOutcome { report, pseudo, pl_correct, max_confidence })
    }

    fn aux_loss(
        &self,
        g: &mut Graph,
        proj: NodeId,
        source_labels: &[Vec<usize>],
        target_labels: &[usize],
        target_keys: &Tensor,
    ) -> Result<Term, TrainError> {
        let cfg = &self.config;
        let b = cfg.batch_size;
        let m = self.sources.len();
        let tau = cfg.tau;
        let target_q = g.gather_rows(proj, (m * b..(m + 1) * b).collect())?;
        let target = DomainQueries { queries: target_q, labels: target_labels };
        let target_bank = self.target_bank.snapshot();
        let snaps: Vec<BankSnapshot> = self.source_banks.iter().map(MemoryBank::snapshot).collect();
        let snap_refs: Vec<&BankSnapshot> = snaps.iter().collect();
        let mut per_source = Vec::with_capacity(m);
        for d in 0..m {
            per_source.push(g.gather_rows(proj, (d * b..(d + 1) * b).collect())?);
        }
        let sources: Vec<DomainQueries<'_>> = per_source
            .iter()
            .zip(source_labels)
            .map(|(&queries, labels)| DomainQueries { queries, labels })
            .collect();
        let term = match cfg.variant {
            Variant::Tcl if self.multi_loss => {
                losses::loss_tcl_multi(g, &sources, &snap_refs, target, &target_bank, tau)?
            }
            Variant::Tcl => losses::loss_tcl(g, sources[0], &snaps[0], target, &target_bank, tau)?,
            Variant::TclSourceCombine => {
                let all_q = g.gather_rows(proj, (0..m * b).collect())?;
                let all_labels = source_labels.concat();
                let pooled = DomainQueries { queries: all_q, labels: &all_labels };
                losses::loss_tcl(g, pooled, &snaps[0], target, &target_bank, tau)?
            }
            Variant::Icdl => losses::loss_icdl(g, &sources, &snap_refs, target, &target_bank, tau)?,
            Variant::Idl => losses::loss_idl(g, target_q, target_keys, &target_bank.keys, tau)?,
            Variant::None => Term::ZERO,
        };
        Ok(term)
    }

    /// Re-clusters pooled target key features, anchored at source class centroids.
    pub fn refine_clusters(&mut self) -> Result<(), TrainError> {
        if self.config.kmeans_iters == 0 {
            self.cluster = None;
            return Ok(());
        }
        let pool = self.config.cluster_pool;
        let mut rng = stream_rng(self.config.seed, Stream::Pool, &[self.epoch as u64]);
        let mut pick = |n: usize| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..n).collect();
            if n > pool {
                idx.shuffle(&mut rng);
                idx.truncate(pool);
                idx.sort_unstable();
            }
            idx
        };
        let target_idx = pick(self.target.len());
        let target_z = unit_rows(&self.pair.encode_key(&self.target.gather(&target_idx))?.z);
        let flat: Vec<(usize, usize)> = self
            .sources
            .iter()
            .enumerate()
            .flat_map(|(d, data)| (0..data.len()).map(move |i| (d, i)))
            .collect();
        let source_pick = pick(flat.len());
        let mut labels = Vec::with_capacity(source_pick.len());
        let mut parts = Vec::with_capacity(self.sources.len());
        for (d, data) in self.sources.iter().enumerate() {
            let idx: Vec<usize> = source_pick.iter().map(|&j| flat[j]).filter(|p| p.0 == d).map(|p| p.1).collect();
            labels.extend(idx.iter().map(|&i| data.samples[i].label as usize));
            parts.push(data.gather(&idx));
        }
        let source_x = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>(), self.target.dim);
        let source_z = unit_rows(&self.pair.encode_key(&source_x)?.z);
        let classifier = self.pair.key.get("psi.cls.weight").expect("classifier weight");
        let centroids =
            pseudo::source_class_centroids(&source_z, &labels, self.config.suite.classes(), classifier)?;
        self.cluster = pseudo::refine_pseudo_labels(&target_z, &centroids, self.config.kmeans_iters)?;
        Ok(())
    }

    fn wall_ms(&self) -> u64 {
        if self.config.timing {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    /// One full epoch: logged steps, clustering refinement, evaluation.
    pub fn run_epoch(&mut self) -> Result<(), TrainError> {
        self.run_epoch_observed(|_| {})
    }

    /// [`Self::run_epoch`], handing every step's outcome to `observe`.
    pub fn run_epoch_observed(&mut self, mut observe: impl FnMut(&StepOutcome)) -> Result<(), TrainError> {
        let batches = self.epoch_batches(self.epoch);
        let mut window = Window::default();
        let mut whole = Window::default();
        for (s, batch) in batches.iter().enumerate() {
            let out = self.train_step(batch, s)?;
            observe(&out);
            window.add(&out.report, out.pl_correct);
            whole.add(&out.report, out.pl_correct);
            if self.step.is_multiple_of(self.config.log_interval as u64) {
                self.metrics.push(window.row(self.epoch, self.step, self.last_accuracy, self.wall_ms()));
                window = Window::default();
            }
        }
        self.refine_clusters()?;
        self.last_accuracy = evaluate(&self.pair, &self.target)?;
        if !whole.is_empty() {
            self.metrics.push(whole.row(self.epoch, self.step, self.last_accuracy, self.wall_ms()));
        }
        self.epoch += 1;
        Ok(())
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<RunSummary, TrainError> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary { final_accuracy: self.last_accuracy, metrics: self.metrics.clone(), steps: self.step }
    }

    pub fn into_pair(self) -> EncoderPair {
        self.pair
    }
}

/// Trains on freshly generated data; returns the trainer for inspection.
pub fn train(config: &TrainConfig) -> Result<Trainer, TrainError> {
    let mut t = Trainer::new(config.clone(), generate_data(config))?;
    t.run()?;
    Ok(t)
}

/// Like [`train`], but the TCL variant always uses the multi-source
/// objective, even for a single source.
pub fn run_multisource(config: &TrainConfig) -> Result<Trainer, TrainError> {
    if config.source_domains().is_empty() {
        return Err(TrainError::Config(ConfigError::Invalid {
            key: "sources".into(),
            value: config.get("sources"),
            reason: "no source domain".into(),
        }));
    }
    let mut t = Trainer::new(config.clone(), generate_data(config))?;
    t.force_multi_source_loss();
    t.run()?;
    Ok(t)
}
