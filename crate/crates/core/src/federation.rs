//! Round-based federated training: local client updates under each method,
//! size-weighted server aggregation, evaluation, and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    balanced_softmax, cross_entropy, fca_client_loss, focal_loss, proximal_term, ClassPrior, LossWeights,
};
use crate::metrics::{evaluate_generalization, evaluate_specialization, MetricsRecord, Predictor};
use crate::model::{
    apply_delta_by_counts, decode_blocks, encode_blocks, forward_features, forward_head, init_model, ModelConfig,
    ModelParams, ParamBlock, ParamDelta,
};
use crate::optim::{AdamConfig, AdamState};
use crate::partition::{compute_prior, Partition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Every client trains its own model; nothing is aggregated.
    Local,
    FedavgCe,
    FedavgFocal,
    FedavgBsm,
    Fedprox,
    Fca,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Local,
        Method::FedavgCe,
        Method::FedavgFocal,
        Method::FedavgBsm,
        Method::Fedprox,
        Method::Fca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Local => "local",
            Method::FedavgCe => "fedavg_ce",
            Method::FedavgFocal => "fedavg_focal",
            Method::FedavgBsm => "fedavg_bsm",
            Method::Fedprox => "fedprox",
            Method::Fca => "fca",
        }
    }

    pub fn is_federated(self) -> bool {
        self != Method::Local
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {:?}", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub total_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub method: Method,
    pub loss_weights: LossWeights,
    pub focal_gamma: f64,
    pub prox_mu: f64,
    pub seed: u64,
    /// Evaluate after every `eval_every` rounds (and always after the last).
    pub eval_every: usize,
}

impl Default for RoundPlan {
    fn default() -> Self {
        let total_rounds = 60;
        RoundPlan {
            total_rounds,
            local_epochs: 1,
            batch_size: 64,
            base_lr: 1e-3,
            milestones: RoundPlan::scaled_milestones(total_rounds),
            lr_factor: 0.1,
            weight_decay: 5e-4,
            method: Method::Fca,
            loss_weights: LossWeights::default(),
            focal_gamma: 2.0,
            prox_mu: 0.01,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl RoundPlan {
    /// Decay points at 3/4 and 7/8 of the run.
    pub fn scaled_milestones(total_rounds: usize) -> Vec<usize> {
        let mut m: Vec<usize> = [total_rounds * 3 / 4, total_rounds * 7 / 8]
            .into_iter()
            .filter(|&r| r > 0 && r < total_rounds)
            .collect();
        m.dedup();
        m
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.total_rounds == 0 {
            return fail("total_rounds must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1");
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail("base_lr must be finite and > 0");
        }
        if !(self.lr_factor.is_finite() && self.lr_factor > 0.0) {
            return fail("lr_factor must be finite and > 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be finite and >= 0");
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return fail("focal_gamma must be finite and >= 0");
        }
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            return fail("prox_mu must be finite and >= 0");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("milestones must be strictly increasing");
        }
        if self.milestones.iter().any(|&m| m >= self.total_rounds) {
            return fail("milestones must be < total_rounds");
        }
        self.loss_weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// `base_lr · factor^(number of milestones ≤ t)`.
pub fn lr_schedule(round: usize, plan: &RoundPlan) -> f64 {
    let passed = plan.milestones.iter().filter(|&&m| m <= round).count();
    plan.base_lr * plan.lr_factor.powi(passed as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadState {
    pub head: ParamBlock,
    pub opt: AdamState,
}

/// A local-learning client's own full model.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalModelState {
    pub params: ModelParams,
    pub opt_extractor: AdamState,
    pub opt_head: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub prior: ClassPrior,
    /// Personalized head, present under `fca` only. Never uploaded.
    pub personal: Option<HeadState>,
    /// Own model, present under `local` only.
    pub local: Option<LocalModelState>,
}

/// Per-update instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalReport {
    pub steps: usize,
    pub mean_loss: f64,
    pub consistency_evals: usize,
    pub personal_steps: usize,
}

/// Optimizer loop of one client for one round, usable a step at a time.
pub struct LocalTrainer<'a> {
    dataset: &'a Dataset,
    plan: &'a RoundPlan,
    prior: &'a ClassPrior,
    adam: AdamConfig,
    anchor: Option<ModelParams>,
    start: ModelParams,
    pub model: ModelParams,
    pub opt_extractor: AdamState,
    pub opt_head: AdamState,
    pub personal: Option<HeadState>,
    loss_sum: f64,
    pub report: LocalReport,
}

impl<'a> LocalTrainer<'a> {
    /// Downloads `fed` (or resumes the client's own model under `local`).
    /// Shared-block moments start fresh every round.
    pub fn new(dataset: &'a Dataset, plan: &'a RoundPlan, client: &'a ClientState, fed: &ModelParams) -> Result<Self> {
        if client.train.is_empty() {
            return Err(Error::Contract(format!("client {} has an empty training shard", client.client_id)));
        }
        let (model, opt_extractor, opt_head) = match (&client.local, plan.method) {
            (Some(own), Method::Local) => (own.params.clone(), own.opt_extractor.clone(), own.opt_head.clone()),
            (None, Method::Local) => {
                return Err(Error::Contract(format!("client {} has no local model", client.client_id)))
            }
            _ => (fed.clone(), AdamState::new(&fed.extractor), AdamState::new(&fed.head)),
        };
        let personal = match plan.method {
            Method::Fca => Some(client.personal.clone().ok_or_else(|| {
                Error::Contract(format!("client {} has no personalized head", client.client_id))
            })?),
            _ => None,
        };
        Ok(LocalTrainer {
            dataset,
            plan,
            prior: &client.prior,
            adam: plan.adam(),
            anchor: (plan.method == Method::Fedprox).then(|| fed.clone()),
            start: model.clone(),
            model,
            opt_extractor,
            opt_head,
            personal,
            loss_sum: 0.0,
            report: LocalReport::default(),
        })
    }

    /// One optimizer step on the rows `batch`; returns the minibatch loss.
    pub fn step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let ev = self.model.extractor.register(&mut g, true);
        let hv = self.model.head.register(&mut g, true);
        let x = g.constant(self.dataset.batch(batch));
        let labels = self.dataset.batch_labels(batch);
        let feats = forward_features(&mut g, &ev, x)?;
        let logits = forward_head(&mut g, &hv, feats)?;

        let weights = &self.plan.loss_weights;
        let train_personal = weights.trains_personal_head();
        let mut pv: Vec<Var> = Vec::new();
        let loss = match self.plan.method {
            Method::FedavgCe => cross_entropy(&mut g, logits, &labels)?,
            Method::FedavgFocal => focal_loss(&mut g, logits, &labels, self.plan.focal_gamma)?,
            Method::FedavgBsm | Method::Local => balanced_softmax(&mut g, logits, &labels, self.prior)?,
            Method::Fedprox => {
                let base = balanced_softmax(&mut g, logits, &labels, self.prior)?;
                let anchor = self.anchor.as_ref().expect("fedprox anchor");
                let vars: Vec<Var> = ev.iter().chain(&hv).copied().collect();
                let params: Vec<_> = anchor.extractor.params.iter().chain(&anchor.head.params).collect();
                let prox = proximal_term(&mut g, &vars, &params, self.plan.prox_mu)?;
                g.add(base, prox)?
            }
            Method::Fca => {
                let personal = self.personal.as_ref().expect("fca personal head");
                pv = personal.head.register(&mut g, train_personal);
                let personal_logits = forward_head(&mut g, &pv, feats)?;
                let parts = fca_client_loss(&mut g, logits, personal_logits, &labels, self.prior, weights)?;
                if parts.consistency.is_some() {
                    self.report.consistency_evals += 1;
                }
                parts.total
            }
        };
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence {
                round: usize::MAX,
                client: self.prior.client_id,
                loss: value,
            });
        }
        g.backward(loss)?;

        let grads = |vars: &[Var]| -> Vec<Vec<f64>> {
            vars.iter()
                .map(|&v| match g.grad(v) {
                    Some(d) => d.to_vec(),
                    None => vec![0.0; g.value(v).len()],
                })
                .collect()
        };
        let step = |opt: &mut AdamState, block: &mut ParamBlock, grads: Vec<Vec<f64>>| {
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(block, &refs, lr, &self.adam)
        };
        step(&mut self.opt_extractor, &mut self.model.extractor, grads(&ev))?;
        step(&mut self.opt_head, &mut self.model.head, grads(&hv))?;
        if let (Some(personal), true) = (self.personal.as_mut(), train_personal) {
            let refs = grads(&pv);
            let refs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
            personal.opt.step(&mut personal.head, &refs, lr, &self.adam)?;
            self.report.personal_steps += 1;
        }
        self.report.steps += 1;
        self.loss_sum += value;
        Ok(value)
    }

    /// Delta of the shared blocks since the round started, and the client
    /// with its persistent state written back.
    pub fn finish(mut self, client: &ClientState) -> Result<(ParamDelta, ClientState, LocalReport)> {
        let delta = ParamDelta::between(&self.start, &self.model)?;
        if self.report.steps > 0 {
            self.report.mean_loss = self.loss_sum / self.report.steps as f64;
        }
        let mut next = client.clone();
        if self.plan.method == Method::Local {
            next.local = Some(LocalModelState {
                params: self.model,
                opt_extractor: self.opt_extractor,
                opt_head: self.opt_head,
            });
        }
        if let Some(personal) = self.personal.take() {
            next.personal = Some(personal);
        }
        Ok((delta, next, self.report))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minibatch order of one local epoch, fixed by (seed, round, client, epoch).
pub fn epoch_order(train: &[usize], seed: u64, round: usize, client: usize, epoch: usize) -> Vec<usize> {
    let key = [round as u64, client as u64, epoch as u64]
        .into_iter()
        .fold(splitmix64(seed), |h, x| splitmix64(h ^ x));
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    order
}

/// Train one client for `plan.local_epochs` starting from `fed`.
pub fn local_update(
    dataset: &Dataset,
    client: &ClientState,
    fed: &ModelParams,
    plan: &RoundPlan,
    round: usize,
) -> Result<(ParamDelta, ClientState, LocalReport)> {
    let run = || -> Result<_> {
        let mut trainer = LocalTrainer::new(dataset, plan, client, fed)?;
        let lr = lr_schedule(round, plan);
        for epoch in 0..plan.local_epochs {
            let order = epoch_order(&client.train, plan.seed, round, client.client_id, epoch);
            for batch in order.chunks(plan.batch_size) {
                trainer.step(batch, lr).map_err(|e| match e {
                    Error::Divergence { client, loss, .. } => Error::Divergence { round, client, loss },
                    e => e,
                })?;
            }
        }
        trainer.finish(client)
    };
    run().map_err(|e| e.in_client(round, client.client_id))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub params: ModelParams,
    pub round: usize,
    pub train_sizes: Vec<u64>,
    pub weights: Vec<f64>,
}

impl ServerState {
    pub fn new(params: ModelParams, train_sizes: Vec<u64>) -> Result<Self> {
        let total: u64 = train_sizes.iter().sum();
        if train_sizes.is_empty() || train_sizes.contains(&0) {
            return Err(Error::Contract("every client needs a non-empty training shard".into()));
        }
        let weights = train_sizes.iter().map(|&n| n as f64 / total as f64).collect();
        Ok(ServerState {
            params,
            round: 0,
            train_sizes,
            weights,
        })
    }
}

/// `φ ← φ + Σ w_k Δ_k` over all clients, reduced in client-id order.
pub fn aggregate(server: &ServerState, deltas: &[(usize, ParamDelta)]) -> Result<ServerState> {
    let k = server.train_sizes.len();
    let mut by_id: BTreeMap<usize, &ParamDelta> = BTreeMap::new();
    for (id, d) in deltas {
        if *id >= k {
            return Err(Error::Contract(format!("unknown client {}", id)));
        }
        if by_id.insert(*id, d).is_some() {
            return Err(Error::Contract(format!("duplicate delta from client {}", id)));
        }
    }
    if by_id.len() != k {
        let missing: Vec<usize> = (0..k).filter(|i| !by_id.contains_key(i)).collect();
        return Err(Error::Contract(format!("missing deltas from clients {:?}", missing)));
    }
    let weighted: Vec<(u64, &ParamDelta)> = by_id.iter().map(|(&id, &d)| (server.train_sizes[id], d)).collect();
    Ok(ServerState {
        params: apply_delta_by_counts(&server.params, &weighted)?,
        round: server.round + 1,
        train_sizes: server.train_sizes.clone(),
        weights: server.weights.clone(),
    })
}

/// A running federation over one dataset and partition.
pub struct Federation<'a> {
    dataset: &'a Dataset,
    plan: RoundPlan,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    parallel: bool,
}

pub struct ExperimentOutcome {
    pub records: Vec<MetricsRecord>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl ExperimentOutcome {
    pub fn personal_heads(&self) -> Vec<Option<&ParamBlock>> {
        self.clients.iter().map(|c| c.personal.as_ref().map(|p| &p.head)).collect()
    }
}

impl<'a> Federation<'a> {
    pub fn new(dataset: &'a Dataset, partition: &Partition, model: &ModelConfig, plan: RoundPlan) -> Result<Self> {
        plan.validate()?;
        if model.input_dim != dataset.dim() {
            return Err(Error::Config(format!(
                "model input_dim {} but data has {} features",
                model.input_dim,
                dataset.dim()
            )));
        }
        if model.num_classes != dataset.num_classes() || partition.num_classes != dataset.num_classes() {
            return Err(Error::Config(format!(
                "class counts disagree: model {}, partition {}, data {}",
                model.num_classes,
                partition.num_classes,
                dataset.num_classes()
            )));
        }
        partition.check_against(dataset.labels())?;
        let init = init_model(model)?;
        let clients = (0..partition.num_clients)
            .map(|k| {
                Ok(ClientState {
                    client_id: k,
                    train: partition.train[k].clone(),
                    test: partition.test[k].clone(),
                    prior: compute_prior(partition, k)?,
                    personal: (plan.method == Method::Fca).then(|| HeadState {
                        head: init.head.clone(),
                        opt: AdamState::new(&init.head),
                    }),
                    local: (plan.method == Method::Local).then(|| LocalModelState {
                        params: init.clone(),
                        opt_extractor: AdamState::new(&init.extractor),
                        opt_head: AdamState::new(&init.head),
                    }),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let server = ServerState::new(init, partition.train_sizes())?;
        Ok(Federation {
            dataset,
            plan,
            server,
            clients,
            parallel: true,
        })
    }

    /// Run clients of a round on the rayon pool (default) or sequentially.
    /// Results are identical either way.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    pub fn plan(&self) -> &RoundPlan {
        &self.plan
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.plan.total_rounds
    }

    /// One synchronous round: every client updates from the same snapshot,
    /// then the server aggregates.
    pub fn round(&mut self) -> Result<Vec<LocalReport>> {
        let t = self.server.round;
        let fed = &self.server.params;
        let update = |c: &ClientState| local_update(self.dataset, c, fed, &self.plan, t);
        let outcomes: Vec<Result<_>> = if self.parallel {
            self.clients.par_iter().map(update).collect()
        } else {
            self.clients.iter().map(update).collect()
        };
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        let mut deltas = Vec::with_capacity(outcomes.len());
        let mut reports = Vec::with_capacity(outcomes.len());
        let mut clients = Vec::with_capacity(outcomes.len());
        for (delta, client, report) in outcomes {
            deltas.push((client.client_id, delta));
            reports.push(report);
            clients.push(client);
        }
        self.clients = clients;
        if self.plan.method.is_federated() {
            self.server = aggregate(&self.server, &deltas)?;
        } else {
            self.server.round += 1;
        }
        Ok(reports)
    }

    fn own_model(&self, k: usize) -> Predictor<'_> {
        let c = &self.clients[k];
        match (&c.local, &c.personal) {
            (Some(own), _) => Predictor {
                extractor: &own.params.extractor,
                head: &own.params.head,
            },
            (None, Some(personal)) => Predictor {
                extractor: &self.server.params.extractor,
                head: &personal.head,
            },
            (None, None) => self.federated_model(),
        }
    }

    fn federated_model(&self) -> Predictor<'_> {
        Predictor {
            extractor: &self.server.params.extractor,
            head: &self.server.params.head,
        }
    }

    /// Specialization with each client's own predictor (personalized head
    /// under `fca`), generalization with the federated model (each local
    /// model, averaged, under `local`).
    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let spec_models: Vec<(usize, &[usize], Predictor<'_>)> = self
            .clients
            .iter()
            .enumerate()
            .map(|(k, c)| (c.client_id, c.test.as_slice(), self.own_model(k)))
            .collect();
        let (spec, per_client) = evaluate_specialization(self.dataset, &spec_models)?;
        let union: Vec<usize> = self.clients.iter().flat_map(|c| c.test.iter().copied()).collect();
        let gen_models: Vec<Predictor<'_>> = if self.plan.method.is_federated() {
            vec![self.federated_model()]
        } else {
            (0..self.clients.len()).map(|k| self.own_model(k)).collect()
        };
        let gen = evaluate_generalization(self.dataset, &union, &gen_models)?;
        Ok(MetricsRecord::new(
            self.server.round,
            self.plan.method.name(),
            self.plan.seed,
            per_client,
            spec,
            gen,
        ))
    }

    /// Rounds until `total_rounds`, evaluating on the plan's cadence.
    /// `after_round` sees the federation after every round.
    pub fn run(&mut self, mut after_round: impl FnMut(&Federation<'a>) -> Result<()>) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while !self.is_finished() {
            self.round()?;
            let t = self.server.round;
            if t % self.plan.eval_every == 0 || t == self.plan.total_rounds {
                records.push(self.evaluate().map_err(|e| e.in_client(t, usize::MAX))?);
            }
            after_round(self)?;
        }
        Ok(records)
    }

    pub fn into_outcome(self, records: Vec<MetricsRecord>) -> ExperimentOutcome {
        ExperimentOutcome {
            records,
            server: self.server,
            clients: self.clients,
        }
    }

    /// Writes `meta.json` and `state.bin` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            round: self.server.round,
            method: self.plan.method,
            seed: self.plan.seed,
            clients: self
                .clients
                .iter()
                .map(|c| ClientMeta {
                    personal_steps: c.personal.as_ref().map(|p| p.opt.steps),
                    local_steps: c.local.as_ref().map(|l| (l.opt_extractor.steps, l.opt_head.steps)),
                })
                .collect(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

        let mut blocks: Vec<(String, &ParamBlock)> = vec![
            ("server.extractor".into(), &self.server.params.extractor),
            ("server.head".into(), &self.server.params.head),
        ];
        for c in &self.clients {
            let k = c.client_id;
            if let Some(p) = &c.personal {
                blocks.push((format!("client.{}.personal.head", k), &p.head));
                blocks.push((format!("client.{}.personal.m", k), &p.opt.m));
                blocks.push((format!("client.{}.personal.v", k), &p.opt.v));
            }
            if let Some(l) = &c.local {
                blocks.push((format!("client.{}.local.extractor", k), &l.params.extractor));
                blocks.push((format!("client.{}.local.head", k), &l.params.head));
                blocks.push((format!("client.{}.local.extractor.m", k), &l.opt_extractor.m));
                blocks.push((format!("client.{}.local.extractor.v", k), &l.opt_extractor.v));
                blocks.push((format!("client.{}.local.head.m", k), &l.opt_head.m));
                blocks.push((format!("client.{}.local.head.v", k), &l.opt_head.v));
            }
        }
        let named: Vec<(&str, &ParamBlock)> = blocks.iter().map(|(n, b)| (n.as_str(), *b)).collect();
        std::fs::write(dir.join("state.bin"), encode_blocks(&named))?;
        Ok(())
    }

    /// Rebuilds a federation from [`Federation::save_checkpoint`] output;
    /// continuing it reproduces an uninterrupted run exactly.
    pub fn resume(
        dataset: &'a Dataset,
        partition: &Partition,
        model: &ModelConfig,
        plan: RoundPlan,
        dir: &Path,
    ) -> Result<Self> {
        let mut fed = Federation::new(dataset, partition, model, plan)?;
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.method != fed.plan.method || meta.seed != fed.plan.seed || meta.clients.len() != fed.clients.len() {
            return Err(Error::Format("checkpoint does not match the plan".into()));
        }
        let mut blocks: BTreeMap<String, ParamBlock> =
            decode_blocks(&std::fs::read(dir.join("state.bin"))?)?.into_iter().collect();
        let mut take = |name: String, like: &ParamBlock| -> Result<ParamBlock> {
            let b = blocks
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks block {}", name)))?;
            like.check_compatible(&b, "resume")?;
            Ok(b)
        };
        fed.server.params.extractor = take("server.extractor".into(), &fed.server.params.extractor)?;
        fed.server.params.head = take("server.head".into(), &fed.server.params.head)?;
        fed.server.round = meta.round;
        for (c, cm) in fed.clients.iter_mut().zip(&meta.clients) {
            let k = c.client_id;
            if let (Some(p), Some(steps)) = (c.personal.as_mut(), cm.personal_steps) {
                p.head = take(format!("client.{}.personal.head", k), &p.head)?;
                p.opt.m = take(format!("client.{}.personal.m", k), &p.head)?;
                p.opt.v = take(format!("client.{}.personal.v", k), &p.head)?;
                p.opt.steps = steps;
            }
            if let (Some(l), Some((se, sh))) = (c.local.as_mut(), cm.local_steps) {
                l.params.extractor = take(format!("client.{}.local.extractor", k), &l.params.extractor)?;
                l.params.head = take(format!("client.{}.local.head", k), &l.params.head)?;
                l.opt_extractor.m = take(format!("client.{}.local.extractor.m", k), &l.params.extractor)?;
                l.opt_extractor.v = take(format!("client.{}.local.extractor.v", k), &l.params.extractor)?;
                l.opt_head.m = take(format!("client.{}.local.head.m", k), &l.params.head)?;
                l.opt_head.v = take(format!("client.{}.local.head.v", k), &l.params.head)?;
                l.opt_extractor.steps = se;
                l.opt_head.steps = sh;
            }
        }
        if !blocks.is_empty() {
            return Err(Error::Format(format!("unexpected checkpoint blocks {:?}", blocks.keys())));
        }
        Ok(fed)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    round: usize,
    method: Method,
    seed: u64,
    clients: Vec<ClientMeta>,
}

#[derive(Serialize, Deserialize)]
struct ClientMeta {
    personal_steps: Option<u64>,
    local_steps: Option<(u64, u64)>,
}

/// All rounds of one (method, seed) cell; returns the metric trajectory,
/// final federated model and every client's state (personal heads included).
pub fn run_experiment(
    dataset: &Dataset,
    partition: &Partition,
    model: &ModelConfig,
    plan: &RoundPlan,
) -> Result<ExperimentOutcome> {
    let mut fed = Federation::new(dataset, partition, model, plan.clone())?;
    let records = fed.run(|_| Ok(()))?;
    Ok(fed.into_outcome(records))
}
