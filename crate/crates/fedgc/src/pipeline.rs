//! Experiment orchestration: config, staged execution (exchange ->
//! self-train -> transform -> condense -> evaluate -> attack), ablation
//! switches, and CSV report emission.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condense::{
    condensation_round, evolve_theta, init_condensed_with, materialize, synthesize_labels,
    CondensedState, Distance, MatchConfig,
};
use crate::fedcore::{
    aggregate_weighted, client_per_class_grads, digest_f64s, fedavg_self_train, ldp_noise,
    local_block_adj, neighbor_exchange, report_class_counts, ClassCounts, ClientState,
    MessageKind, Transcript,
};
use crate::graphstore::{
    dirichlet_partition, load_bundle, normalize_adj, normalize_adj_weighted, sbm_generate,
    GraphBundle, Split,
};
use crate::ibx::transform_graph;
use crate::miaeval::{
    accuracy, build_shadow, induced_edges, run_attack, train_shadow_and_attack, ProbeView,
};
use crate::models::{eval_logits, forward, masked_ce, Arch, ModelParams};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Bundle {
        path: String,
    },
    Sbm {
        blocks: usize,
        per_block: usize,
        p_in: f64,
        p_out: f64,
        feat_dim: usize,
        feat_shift: f64,
    },
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AblateFlags {
    #[serde(default)]
    pub com: bool,
    #[serde(default)]
    pub ft: bool,
    #[serde(default)]
    pub ib: bool,
    #[serde(default)]
    pub st: bool,
}

impl AblateFlags {
    pub fn identity(&self) -> String {
        let mut parts = Vec::new();
        if self.com {
            parts.push("-com");
        }
        if self.ft {
            parts.push("-ft");
        }
        if self.ib {
            parts.push("-ib");
        }
        if self.st {
            parts.push("-st");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageEpochs {
    pub self_train: usize,
    pub ib: usize,
    pub condense: usize,
    pub theta_steps: usize,
    pub refresh: usize,
    pub eval: usize,
    pub fine_tune: usize,
    pub shadow: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs {
            self_train: 400,
            ib: 50,
            condense: 400,
            theta_steps: 10,
            refresh: 15,
            eval: 300,
            fine_tune: 50,
            shadow: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub self_train: f64,
    pub ib: f64,
    pub x: f64,
    pub phi: f64,
    pub theta: f64,
    pub eval: f64,
    pub fine_tune: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            self_train: 0.5,
            ib: 0.05,
            x: 0.3,
            phi: 0.3,
            theta: 0.3,
            eval: 0.3,
            fine_tune: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub clients: usize,
    pub beta: f64,
    pub ratio: f64,
    pub gamma: f64,
    pub distance: String,
    pub defense: String,
    pub ldp_epsilon: f64,
    pub hidden: usize,
    pub sgc_k: usize,
    pub threshold: f64,
    pub epochs: StageEpochs,
    pub lr: LearningRates,
    pub seed: u64,
    pub ablate: AblateFlags,
    pub targets: Vec<String>,
    pub out: Option<String>,
    /// Run the MIA every k condensation epochs (utility-vs-leakage curves).
    pub periodic_attack: Option<usize>,
    /// Attack probe view: star | rewire | self
    pub probe: String,
    /// Extra epochs of member-split fine-tuning applied to the attacked
    /// target, to deliberately overfit it before the MIA (0 = off).
    pub overfit_target: usize,
    /// Anchor the condensed features at per-class means of the exchanged
    /// client features (default). When false, start from pure noise so the
    /// condensed graph carries no data information before round 1.
    pub warm_start: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::Sbm {
                blocks: 4,
                per_block: 100,
                p_in: 0.1,
                p_out: 0.01,
                feat_dim: 8,
                feat_shift: 1.0,
            },
            clients: 4,
            beta: 1.0,
            ratio: 0.04,
            gamma: 0.1,
            distance: "mse".into(),
            defense: "none".into(),
            ldp_epsilon: 1.0,
            hidden: 16,
            sgc_k: 2,
            threshold: 0.5,
            epochs: StageEpochs::default(),
            lr: LearningRates::default(),
            seed: 0,
            ablate: AblateFlags::default(),
            targets: vec!["gcn".into()],
            out: None,
            periodic_attack: None,
            probe: "rewire".into(),
            overfit_target: 0,
            warm_start: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(PipelineError::Config("clients must be >= 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(PipelineError::Config("ratio must be in (0, 1]".into()));
        }
        if self.gamma < 0.0 {
            return Err(PipelineError::Config("gamma must be >= 0".into()));
        }
        if self.beta <= 0.0 {
            return Err(PipelineError::Config("beta must be > 0".into()));
        }
        match self.distance.as_str() {
            "mse" | "cosine" => {}
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown distance '{other}' (expected mse|cosine)"
                )))
            }
        }
        match self.probe.as_str() {
            "star" | "rewire" | "self" => {}
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown probe view '{other}' (expected star|rewire|self)"
                )))
            }
        }
        match self.defense.as_str() {
            "none" | "ib" | "pl" | "ldp" => {}
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown defense '{other}' (expected none|ib|pl|ldp)"
                )))
            }
        }
        for t in &self.targets {
            match t.as_str() {
                "gcn" | "sgc" | "mlp" => {}
                other => {
                    return Err(PipelineError::Config(format!(
                        "unknown target architecture '{other}' (expected gcn|sgc|mlp)"
                    )))
                }
            }
        }
        if self.targets.is_empty() {
            return Err(PipelineError::Config("at least one target required".into()));
        }
        Ok(())
    }

    pub fn distance_kind(&self) -> Distance {
        match self.distance.as_str() {
            "cosine" => Distance::Cosine,
            _ => Distance::Mse,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArchReport {
    pub arch: String,
    /// Test accuracy of the condensed-trained model on the full graph.
    pub acc: f64,
    /// Mean/std of per-client test accuracy after local fine-tuning
    /// (absent under the -ft ablation).
    pub acc_ft_mean: Option<f64>,
    pub acc_ft_std: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub matching_loss: f64,
    pub mia_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub ablation: String,
    pub defense: String,
    pub seed: u64,
    pub gamma: f64,
    pub ratio: f64,
    pub stage_seconds: BTreeMap<String, f64>,
    pub archs: Vec<ArchReport>,
    pub mia_auc: f64,
    pub matching_losses: Vec<f64>,
    pub ib_final_kl: Option<f64>,
    pub curves: Vec<CurvePoint>,
    pub transcript_digest: u64,
    pub condensed_nodes: usize,
    pub self_train_val_acc: Option<f64>,
}

fn load_dataset(cfg: &RunConfig) -> Result<GraphBundle> {
    match &cfg.dataset {
        DatasetSpec::Bundle { path } => {
            load_bundle(Path::new(path)).map_err(stage_err("load-dataset"))
        }
        DatasetSpec::Sbm {
            blocks,
            per_block,
            p_in,
            p_out,
            feat_dim,
            feat_shift,
        } => sbm_generate(
            *blocks, *per_block, *p_in, *p_out, *feat_dim, *feat_shift, cfg.seed,
        )
        .map_err(stage_err("gen-dataset")),
    }
}

fn arch_for(name: &str, cfg: &RunConfig, d: usize, classes: usize) -> Arch {
    match name {
        "sgc" => Arch::SgcK {
            input: d,
            classes,
            k: cfg.sgc_k,
        },
        "mlp" => Arch::Mlp2 {
            input: d,
            hidden: cfg.hidden,
            classes,
        },
        _ => Arch::Gcn2 {
            input: d,
            hidden: cfg.hidden,
            classes,
        },
    }
}

/// Full-batch training of an architecture on a weighted bundle (all nodes
/// are training rows in a materialized condensed graph).
pub fn train_on_bundle(
    b: &GraphBundle,
    arch: Arch,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams> {
    let adj = normalize_adj_weighted(&b.edges, b.edge_weights.as_deref(), b.n, 1.0).matrix;
    let mut params = ModelParams::init(arch, seed);
    let mask = b.mask(Split::Train);
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let w = params.leaves(&mut tape);
        let a = tape.constant(adj.clone());
        let x = tape.constant(b.features.clone());
        let logits =
            forward(&mut tape, arch, &w, a, x, None).map_err(stage_err("train-on-bundle"))?;
        let loss = masked_ce(&mut tape, logits, &b.labels, &mask)
            .map_err(stage_err("train-on-bundle"))?;
        let grads = tape
            .grad_values(loss, &w)
            .map_err(stage_err("train-on-bundle"))?;
        params.step(&grads, lr);
    }
    Ok(params)
}

/// Global feature matrix assembled from client rows; identical to the raw
/// features unless clients replaced theirs with IB latents.
fn stitch_features(states: &[ClientState], n: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(n, d);
    for s in states {
        for (local, &v) in s.sub.nodes.iter().enumerate() {
            for col in 0..d {
                out.set(v, col, s.features.get(local, col));
            }
        }
    }
    out
}

/// Mean feature row per class over labeled nodes, accumulated in global
/// node order (classes with no labeled nodes keep a zero row).
pub fn per_class_means(
    features: &Tensor,
    labels: &[usize],
    labeled: &[bool],
    num_classes: usize,
) -> Tensor {
    let d = features.cols();
    let mut sums = Tensor::zeros(num_classes, d);
    let mut counts = vec![0usize; num_classes];
    for v in 0..features.rows() {
        if labeled[v] {
            let c = labels[v];
            counts[c] += 1;
            for col in 0..d {
                sums.set(c, col, sums.get(c, col) + features.get(v, col));
            }
        }
    }
    for c in 0..num_classes {
        if counts[c] > 0 {
            for col in 0..d {
                sums.set(c, col, sums.get(c, col) / counts[c] as f64);
            }
        }
    }
    sums
}

fn stitched_test_accuracy(
    params: &ModelParams,
    g: &GraphBundle,
    global_adj: &Tensor,
    stitched: &Tensor,
) -> Result<f64> {
    let logits = eval_logits(params, global_adj, stitched, None).map_err(stage_err("evaluate"))?;
    accuracy(&logits, &g.labels, &g.mask(Split::Test)).map_err(stage_err("evaluate"))
}

struct CondensationLoop<'a> {
    cfg: &'a RunConfig,
    match_cfg: MatchConfig,
    classes: Vec<usize>,
    counts: Vec<ClassCounts>,
}

impl<'a> CondensationLoop<'a> {
    fn round(
        &self,
        states: &[ClientState],
        labels: &[usize],
        labeled: &[bool],
        state: &mut CondensedState,
        theta: &ModelParams,
        transcript: &mut Transcript,
        epoch: usize,
    ) -> Result<f64> {
        let mut per_client = Vec::with_capacity(states.len());
        for client in states {
            let mut grads =
                client_per_class_grads(client, labels, labeled, theta, &self.classes)
                    .map_err(stage_err("condense-grads"))?;
            if self.cfg.defense == "ldp" {
                grads = ldp_noise(
                    &grads,
                    self.cfg.ldp_epsilon,
                    1.0,
                    self.cfg.seed ^ (epoch as u64) << 24 ^ client.sub.client_id as u64,
                )
                .map_err(stage_err("ldp"))?;
            }
            for (c, g) in &grads {
                transcript.push(
                    epoch,
                    client.sub.client_id,
                    MessageKind::PerClassGrads,
                    digest_f64s(g.iter().map(|t| t.data())).wrapping_add(*c as u64),
                );
            }
            per_client.push(grads);
        }
        let mut agg = BTreeMap::new();
        for &c in &self.classes {
            let n_c: usize = self.counts.iter().map(|cc| cc.counts[c]).sum();
            if n_c == 0 {
                continue;
            }
            agg.insert(
                c,
                aggregate_weighted(&per_client, &self.counts, c)
                    .map_err(stage_err("aggregate"))?,
            );
        }
        condensation_round(state, &agg, theta, &self.match_cfg).map_err(stage_err("condense"))
    }
}

/// Report plus the final condensed state (needed for emission).
pub struct PipelineOutput {
    pub report: RunReport,
    pub state: CondensedState,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut stage_seconds = BTreeMap::new();
    let mut transcript = Transcript::default();
    let timed = |out: &mut BTreeMap<String, f64>, name: &str, start: Instant| {
        out.insert(name.to_string(), start.elapsed().as_secs_f64());
    };

    // dataset and partition
    let t0 = Instant::now();
    let g = load_dataset(cfg)?;
    let subs = dirichlet_partition(&g, cfg.clients, cfg.beta, cfg.seed ^ 0x5eed)
        .map_err(stage_err("partition"))?;
    let deg = g.tilde_degrees();
    let feats: Vec<Tensor> = subs.iter().map(|c| c.gather_rows(&g.features)).collect();
    timed(&mut stage_seconds, "partition", t0);

    // stage 1: one-time neighbor exchange (unless -com)
    let t0 = Instant::now();
    let cross = if cfg.ablate.com {
        None
    } else {
        Some(
            neighbor_exchange(&subs, &feats, &deg, cfg.seed ^ 0xc0, Some(&mut transcript))
                .map_err(stage_err("exchange"))?,
        )
    };
    let mut states: Vec<ClientState> = subs
        .iter()
        .cloned()
        .zip(feats)
        .enumerate()
        .map(|(j, (sub, features))| {
            let local_adj = local_block_adj(&sub, &deg);
            ClientState {
                sub,
                features,
                cross_sums: cross.as_ref().map(|c| c[j].clone()),
                local_adj,
            }
        })
        .collect();
    timed(&mut stage_seconds, "exchange", t0);

    // stage 2: federated self-training (unless -st)
    let t0 = Instant::now();
    let train_mask = g.mask(Split::Train);
    let (phi_st, labels_aug, labeled, st_val_acc) = if cfg.ablate.st {
        // random-but-shared head; only true train labels available
        let phi = ModelParams::init(
            Arch::Gcn2 {
                input: g.feat_dim(),
                hidden: cfg.hidden,
                classes: g.num_classes,
            },
            cfg.seed ^ 0x57,
        );
        (phi, g.labels.clone(), train_mask.clone(), None)
    } else {
        let out = fedavg_self_train(
            &states,
            &g.labels,
            &g.splits,
            cfg.hidden,
            g.num_classes,
            cfg.epochs.self_train,
            cfg.lr.self_train,
            cfg.seed ^ 0x57,
            Some(&mut transcript),
        )
        .map_err(stage_err("self-train"))?;
        (
            out.phi_st,
            out.labels_aug,
            out.labeled,
            Some(out.best_val_acc),
        )
    };
    timed(&mut stage_seconds, "self-train", t0);

    // stage 3: local IB transformation (defense=ib only, unless -ib)
    let t0 = Instant::now();
    let mut ib_final_kl = None;
    if cfg.defense == "ib" && !cfg.ablate.ib {
        let val_mask = g.mask(Split::Val);
        let mut kl_sum = 0.0;
        for j in 0..states.len() {
            let out = transform_graph(
                &states[j],
                &phi_st,
                &labels_aug,
                &labeled,
                &val_mask,
                cfg.gamma,
                cfg.epochs.ib,
                cfg.lr.ib,
                cfg.seed ^ 0x1b,
            )
            .map_err(stage_err("transform"))?;
            kl_sum += out.final_kl;
            states[j].features = out.z;
        }
        ib_final_kl = Some(kl_sum / states.len() as f64);
        // cross sums were exchanged in x-space; refresh them in z-space
        if !cfg.ablate.com {
            let zfeats: Vec<Tensor> = states.iter().map(|s| s.features.clone()).collect();
            let zcross = neighbor_exchange(
                &subs,
                &zfeats,
                &deg,
                cfg.seed ^ 0xc1,
                Some(&mut transcript),
            )
            .map_err(stage_err("exchange"))?;
            for (s, c) in states.iter_mut().zip(zcross) {
                s.cross_sums = Some(c);
            }
        }
    }
    timed(&mut stage_seconds, "transform", t0);

    // stage 4: condensation
    let t0 = Instant::now();
    let counts: Vec<ClassCounts> = states
        .iter()
        .map(|s| report_class_counts(&s.sub, &labels_aug, &labeled, g.num_classes))
        .collect();
    let global_counts = ClassCounts {
        counts: (0..g.num_classes)
            .map(|c| counts.iter().map(|cc| cc.counts[c]).sum())
            .collect(),
    };
    for (j, cc) in counts.iter().enumerate() {
        transcript.push(
            0,
            j,
            MessageKind::ClassCounts,
            crate::fedcore::digest_usizes(&cc.counts),
        );
    }
    let (y_prime, _) =
        synthesize_labels(&global_counts, g.n, cfg.ratio).map_err(stage_err("labels"))?;
    let condensed_nodes = y_prime.len();
    // warm-start X' at the per-class means of the (pseudo-)labeled client
    // features; an aggregate on the same footing as the one-time exchange
    let stitched = stitch_features(&states, g.n, g.feat_dim());
    let global_adj = normalize_adj(&g.edges, g.n, 1.0).matrix;
    let mut x0 = Tensor::zeros(condensed_nodes, g.feat_dim());
    if cfg.warm_start {
        let class_means = per_class_means(&stitched, &labels_aug, &labeled, g.num_classes);
        for (i, &c) in y_prime.iter().enumerate() {
            for col in 0..g.feat_dim() {
                x0.set(i, col, class_means.get(c, col));
            }
        }
    }
    let mut state = init_condensed_with(y_prime, x0, cfg.hidden, cfg.seed ^ 0xcd)
        .map_err(stage_err("init-condensed"))?;
    let classes: Vec<usize> = (0..g.num_classes)
        .filter(|&c| global_counts.counts[c] > 0)
        .collect();
    let match_cfg = MatchConfig {
        distance: cfg.distance_kind(),
        epochs: cfg.epochs.condense,
        refresh: cfg.epochs.refresh,
        lr_x: cfg.lr.x,
        lr_phi: cfg.lr.phi,
        lr_theta: cfg.lr.theta,
        ratio: cfg.ratio,
        ..MatchConfig::default()
    };
    let theta_arch = Arch::Gcn2 {
        input: g.feat_dim(),
        hidden: cfg.hidden,
        classes: g.num_classes,
    };
    let cloop = CondensationLoop {
        cfg,
        match_cfg,
        classes,
        counts,
    };
    let mut theta = ModelParams::init(theta_arch, cfg.seed ^ 0x7777);
    let mut matching_losses = Vec::with_capacity(cfg.epochs.condense);
    let mut curves = Vec::new();
    for epoch in 0..cfg.epochs.condense {
        if epoch % cloop.match_cfg.refresh == 0 {
            theta = ModelParams::init(theta_arch, cfg.seed ^ 0x7777 ^ (epoch as u64 + 1));
        }
        let loss = cloop.round(
            &states,
            &labels_aug,
            &labeled,
            &mut state,
            &theta,
            &mut transcript,
            epoch,
        )?;
        matching_losses.push(loss);
        evolve_theta(&mut theta, &state, cfg.epochs.theta_steps, cfg.lr.theta)
            .map_err(stage_err("evolve-theta"))?;
        if let Some(k) = cfg.periodic_attack {
            if k > 0 && (epoch % k == 0 || epoch + 1 == cfg.epochs.condense) {
                let auc_v = attack_current(&state, &g, &stitched, cfg)?;
                curves.push(CurvePoint {
                    epoch,
                    matching_loss: loss,
                    mia_auc: Some(auc_v),
                });
            }
        }
    }
    timed(&mut stage_seconds, "condense", t0);

    // stage 5: evaluation per target architecture; models are scored on the
    // global graph with each node's features taken from its owning client
    // (the transformed rows under the IB defense), so train and test feature
    // spaces always agree
    let t0 = Instant::now();
    let bundle = materialize(&state, cfg.threshold).map_err(stage_err("materialize"))?;
    let mut archs = Vec::new();
    for name in &cfg.targets {
        let arch = arch_for(name, cfg, g.feat_dim(), g.num_classes);
        let params = train_on_bundle(&bundle, arch, cfg.epochs.eval, cfg.lr.eval, cfg.seed ^ 0xe)?;
        let acc = stitched_test_accuracy(&params, &g, &global_adj, &stitched)?;
        let (acc_ft_mean, acc_ft_std) = if cfg.ablate.ft {
            (None, None)
        } else {
            let mut per_client = Vec::new();
            for client in &states {
                let acc_c =
                    fine_tune_and_eval(&params, client, &g, &global_adj, &stitched, cfg)?;
                if let Some(a) = acc_c {
                    per_client.push(a);
                }
            }
            if per_client.is_empty() {
                (None, None)
            } else {
                let mean = per_client.iter().sum::<f64>() / per_client.len() as f64;
                let var = per_client
                    .iter()
                    .map(|a| (a - mean) * (a - mean))
                    .sum::<f64>()
                    / per_client.len() as f64;
                (Some(mean), Some(var.sqrt()))
            }
        };
        archs.push(ArchReport {
            arch: name.clone(),
            acc,
            acc_ft_mean,
            acc_ft_std,
        });
    }
    timed(&mut stage_seconds, "evaluate", t0);

    // stage 6: membership inference against the condensed-trained GCN
    let t0 = Instant::now();
    let mia_auc = attack_current(&state, &g, &stitched, cfg)?;
    timed(&mut stage_seconds, "attack", t0);

    let report = RunReport {
        ablation: cfg.ablate.identity(),
        defense: cfg.defense.clone(),
        seed: cfg.seed,
        gamma: cfg.gamma,
        ratio: cfg.ratio,
        stage_seconds,
        archs,
        mia_auc,
        matching_losses,
        ib_final_kl,
        curves,
        transcript_digest: transcript.digest(),
        condensed_nodes,
        self_train_val_acc: st_val_acc,
    };
    Ok(PipelineOutput { report, state })
}

/// Train a GCN on the current condensed graph and attack it: members are the
/// global train nodes, non-members an equal-size sample of test nodes.
fn attack_current(
    state: &CondensedState,
    g: &GraphBundle,
    stitched: &Tensor,
    cfg: &RunConfig,
) -> Result<f64> {
    let bundle = materialize(state, cfg.threshold).map_err(stage_err("materialize"))?;
    let arch = arch_for("gcn", cfg, g.feat_dim(), g.num_classes);
    let mut target = train_on_bundle(&bundle, arch, cfg.epochs.eval, cfg.lr.eval, cfg.seed ^ 0x7a)?;
    let members = g.mask_nodes(Split::Train);
    if cfg.overfit_target > 0 {
        // deliberately overfit the target on the member-induced subgraph,
        // using whatever feature view the clients actually expose (raw
        // features normally, encoder outputs when the transform defense is on)
        let member_edges = induced_edges(g, &members);
        let mut x = Tensor::zeros(members.len(), stitched.cols());
        for (r, &v) in members.iter().enumerate() {
            for c in 0..stitched.cols() {
                x.set(r, c, stitched.get(v, c));
            }
        }
        let adj = normalize_adj(&member_edges, members.len(), 1.0).matrix;
        let labels: Vec<usize> = members.iter().map(|&v| g.labels[v]).collect();
        let mask = vec![true; members.len()];
        for _ in 0..cfg.overfit_target {
            let mut tape = Tape::new();
            let w = target.leaves(&mut tape);
            let a = tape.constant(adj.clone());
            let xn = tape.constant(x.clone());
            let logits = forward(&mut tape, target.arch, &w, a, xn, None)
                .map_err(stage_err("overfit-target"))?;
            let loss = masked_ce(&mut tape, logits, &labels, &mask)
                .map_err(stage_err("overfit-target"))?;
            let grads = tape
                .grad_values(loss, &w)
                .map_err(stage_err("overfit-target"))?;
            target.step(&grads, cfg.lr.eval);
        }
    }
    let mut nonmembers = g.mask_nodes(Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa7);
    nonmembers.shuffle(&mut rng);
    nonmembers.truncate(members.len().min(nonmembers.len()));
    let pool = g
        .splits
        .iter()
        .filter(|&&s| s != Split::Train && s != Split::Test)
        .count();
    let shadow_size = (pool / 2).min(members.len()).max(1);
    let split = build_shadow(g, shadow_size, cfg.seed ^ 0x5d).map_err(stage_err("shadow"))?;
    let view = match cfg.probe.as_str() {
        "star" => ProbeView::Star,
        "self" => ProbeView::SelfOnly,
        _ => ProbeView::StarRewired,
    };
    let model = train_shadow_and_attack(g, &split, cfg.hidden, cfg.epochs.shadow, view, cfg.seed ^ 0x5e)
        .map_err(stage_err("shadow"))?;
    let report = run_attack(
        &model,
        &target,
        g,
        &members,
        &nonmembers,
        view,
        cfg.seed ^ 0xa8,
    )
    .map_err(stage_err("attack"))?;
    Ok(report.auc)
}

/// Fine-tune the condensed-trained model on one client's labeled nodes
/// (through that client's local graph view) and report its accuracy on the
/// global test split over the stitched features (None if the client holds no
/// training nodes to tune on and no test nodes).
fn fine_tune_and_eval(
    params: &ModelParams,
    client: &ClientState,
    g: &GraphBundle,
    global_adj: &Tensor,
    stitched: &Tensor,
    cfg: &RunConfig,
) -> Result<Option<f64>> {
    let local_labels: Vec<usize> = client.sub.nodes.iter().map(|&v| g.labels[v]).collect();
    let local_train: Vec<bool> = client
        .sub
        .nodes
        .iter()
        .map(|&v| g.splits[v] == Split::Train)
        .collect();
    let mut tuned = params.clone();
    if local_train.iter().any(|&b| b) {
        for _ in 0..cfg.epochs.fine_tune {
            let mut tape = Tape::new();
            let w = tuned.leaves(&mut tape);
            let a = tape.constant(client.local_adj.clone());
            let x = tape.constant(client.features.clone());
            let cs = client.cross_sums.as_ref().map(|c| tape.constant(c.clone()));
            let logits = forward(&mut tape, tuned.arch, &w, a, x, cs)
                .map_err(stage_err("fine-tune"))?;
            let loss = masked_ce(&mut tape, logits, &local_labels, &local_train)
                .map_err(stage_err("fine-tune"))?;
            let grads = tape.grad_values(loss, &w).map_err(stage_err("fine-tune"))?;
            tuned.step(&grads, cfg.lr.fine_tune);
        }
    }
    let acc = stitched_test_accuracy(&tuned, g, global_adj, stitched)?;
    Ok(Some(acc))
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write metrics.csv, curves.csv, config.echo, and the condensed bundle.
pub fn emit_report(report: &RunReport, cfg: &RunConfig, state: &CondensedState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: e,
        })
    };

    let mut metrics =
        String::from("architecture,ablation,defense,gamma,ratio,seed,acc,acc_ft_mean,acc_ft_std,mia_auc,transcript_digest\r\n");
    for a in &report.archs {
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{},{},{:.6},{:016x}\r\n",
            csv_escape(&a.arch),
            csv_escape(&report.ablation),
            csv_escape(&report.defense),
            report.gamma,
            report.ratio,
            report.seed,
            a.acc,
            fmt_opt(a.acc_ft_mean),
            fmt_opt(a.acc_ft_std),
            report.mia_auc,
            report.transcript_digest,
        ));
    }
    write("metrics.csv", metrics)?;

    let mut curves = String::from("epoch,matching_loss,mia_auc\r\n");
    for p in &report.curves {
        curves.push_str(&format!(
            "{},{:.9},{}\r\n",
            p.epoch,
            p.matching_loss,
            p.mia_auc.map_or(String::new(), |a| format!("{a:.6}")),
        ));
    }
    write("curves.csv", curves)?;

    let echo = serde_json::to_string_pretty(cfg)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    write("config.echo", echo)?;

    let bundle = materialize(state, cfg.threshold).map_err(stage_err("materialize"))?;
    crate::graphstore::save_bundle(&bundle, &dir.join("condensed"))
        .map_err(stage_err("save-bundle"))?;
    Ok(())
}

/// Run the pipeline and, when an output directory is configured, emit the
/// report files. Returns the report.
pub fn run_and_emit(cfg: &RunConfig) -> Result<RunReport> {
    let out = run_pipeline(cfg)?;
    if let Some(dir) = &cfg.out {
        emit_report(&out.report, cfg, &out.state, Path::new(dir))?;
    }
    Ok(out.report)
}
