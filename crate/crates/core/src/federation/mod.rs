//! The round protocol between one server model and K
//! client models, and the baseline training modes it is compared against.

mod plan;
mod report;
mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::MappingCache;
use crate::config::{ConfigError, FedConfig, Mode, ParticipantConfig};
use crate::data::{encode_dataset, Dataset, DataError, EncodedDataset, EvalMetrics, World};
use crate::knowledge::{
    build_knowledge_set, deserialize_knowledge, dual_min_ce, serialize_knowledge, KnowledgeSet,
    ParticipantId, PayloadSize, SelectiveKnowledgeSet, SERVER_ID,
};
use crate::lm::{AdamWConfig, LanguageModel, LowRankAdapter, ModelError, OptimizerState};

pub use plan::{AlignmentPlan, PlanError};
pub use report::{communication_cost, CommunicationCost, ParticipantSummary, RoundRecord, RunSummary, SUMMARY_SCHEMA};
pub use train::{local_losses, run_epochs, PhaseStats, Transfer};

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("setup: {0}")]
    Setup(String),
    #[error("round {round}, participant {participant}, {phase}: {source}")]
    Aborted {
        round: usize,
        participant: ParticipantId,
        phase: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("missing knowledge set from client {0}")]
    MissingClientSet(ParticipantId),
}

fn abort<E: std::error::Error + Send + Sync + 'static>(
    round: usize,
    participant: ParticipantId,
    phase: &'static str,
) -> impl FnOnce(E) -> FedError {
    move |e| FedError::Aborted { round, participant, phase, source: Box::new(e) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Server,
    Client,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Server => "server",
            Role::Client => "client",
        }
    }
}

/// The eleven steps of one round, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    LocalTraining = 1,
    ClientKnowledge = 2,
    Upload = 3,
    ServerAlignment = 4,
    ServerSelection = 5,
    ServerTransfer = 6,
    ServerKnowledge = 7,
    Broadcast = 8,
    ClientAlignment = 9,
    ClientSelection = 10,
    ClientTransfer = 11,
}

impl Step {
    pub fn number(self) -> u8 {
        self as u8
    }
}

/// Callbacks fired during a run. Client steps may arrive from worker threads.
pub trait Observer: Sync {
    /// Called when `participant` begins `step`.
    fn step(&self, _round: usize, _step: Step, _participant: ParticipantId) {}
    /// Called with every serialized message that crosses a participant boundary.
    fn message(&self, _round: usize, _from: ParticipantId, _to: ParticipantId, _bytes: &[u8]) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

pub struct Participant {
    pub id: ParticipantId,
    pub role: Role,
    pub spec: ParticipantConfig,
    pub model: LanguageModel,
    pub optimizer: OptimizerState,
    /// Public set in this participant's tokenization.
    pub public: Arc<EncodedDataset>,
    pub private: Option<EncodedDataset>,
    pub eval: EncodedDataset,
    pub rng: ChaCha8Rng,
}

impl Participant {
    pub fn evaluate(&self) -> Result<EvalMetrics, DataError> {
        crate::data::evaluate(&self.model, &self.eval)
    }

    pub fn base_digest(&self) -> [u8; 32] {
        self.model.base().digest()
    }
}

/// 32-byte ChaCha seed from a run seed and a label.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// All participants plus the cached alignment plans between them.
pub struct Federation {
    pub config: FedConfig,
    pub server: Participant,
    pub clients: Vec<Participant>,
    /// Client k to server, index k - 1.
    upload_plans: Vec<AlignmentPlan>,
    /// Server to client k, index k - 1.
    download_plans: Vec<AlignmentPlan>,
    /// Disables distillation in transfer phases (reference path for tests).
    pub ft_only: bool,
}

fn participant(
    config: &FedConfig,
    world: &World,
    texts: &[&str],
    id: ParticipantId,
    role: Role,
    spec: &ParticipantConfig,
    private: Option<&Dataset>,
) -> Result<Participant, FedError> {
    let tokenizer = Arc::new(spec.tokenizer.build(texts.iter().copied()));
    // Participants with the same architecture and tokenizer share a base,
    // the way two clients would download the same pretrained checkpoint.
    let arch = format!("base/{}/{}", serde_json::to_string(&spec.model).expect("serializable"), tokenizer.to_text());
    let mut base_rng = derive_rng(config.seed, &arch);
    let mut model = LanguageModel::init(&spec.model, tokenizer.clone(), &mut base_rng)
        .map_err(|e| FedError::Setup(format!("participant {id}: {e}")))?;
    let mut rng = derive_rng(config.seed, &format!("participant/{id}"));
    model.adapter = LowRankAdapter::new(spec.model.hidden, spec.model.rank, spec.model.alpha, &mut rng)
        .map_err(|e| FedError::Setup(format!("participant {id}: {e}")))?;
    let lr = if role == Role::Server { config.server_lr } else { config.client_lr };
    let window = spec.model.context_window;
    let public = Arc::new(encode_dataset(&tokenizer, window, &world.public)?);
    let private = private.map(|d| encode_dataset(&tokenizer, window, d)).transpose()?;
    let eval = encode_dataset(&tokenizer, window, &world.eval_global)?;
    let optimizer = OptimizerState::new(AdamWConfig::with_lr(lr), &model.adapter);
    Ok(Participant { id, role, spec: spec.clone(), model, optimizer, public, private, eval, rng })
}

impl Federation {
    /// Builds every participant's tokenizer (from the public texts), model,
    /// encoded datasets, and the alignment plans for both directions.
    pub fn new(config: &FedConfig, world: &World) -> Result<Self, FedError> {
        config.validate()?;
        if world.clients() != config.clients {
            return Err(FedError::Setup(format!("world has {} clients, config {}", world.clients(), config.clients)));
        }
        let texts = world.public_texts();
        let texts: Vec<&str> = texts.iter().map(String::as_str).collect();
        let server = participant(config, world, &texts, SERVER_ID, Role::Server, &config.server, None)?;
        let clients = (0..config.clients)
            .map(|k| {
                let id = k as ParticipantId + 1;
                participant(config, world, &texts, id, Role::Client, config.client_config(k), Some(&world.private[k]))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if config.mode == Mode::Fedavg {
            // one global initialization, broadcast before the first round
            let init = clients[0].model.adapter.clone();
            let mut clients = clients;
            for c in &mut clients {
                c.model.adapter = init.clone();
            }
            return Ok(Federation { config: config.clone(), server, clients, upload_plans: vec![], download_plans: vec![], ft_only: false });
        }
        let cache = MappingCache::new();
        let needs_plans = matches!(config.mode, Mode::Fedmkt | Mode::Llm2slm);
        let (mut upload_plans, mut download_plans) = (Vec::new(), Vec::new());
        if needs_plans {
            for c in &clients {
                let (ct, st) = (c.model.tokenizer(), server.model.tokenizer());
                let setup = |e: PlanError| FedError::Setup(format!("alignment with client {}: {e}", c.id));
                upload_plans.push(AlignmentPlan::build(ct, &c.public, st, &server.public, &cache).map_err(setup)?);
                download_plans.push(AlignmentPlan::build(st, &server.public, ct, &c.public, &cache).map_err(setup)?);
            }
        }
        Ok(Federation { config: config.clone(), server, clients, upload_plans, download_plans, ft_only: false })
    }

    pub fn participants(&self) -> impl Iterator<Item = &Participant> {
        std::iter::once(&self.server).chain(&self.clients)
    }

    pub fn upload_plan(&self, client: ParticipantId) -> Option<&AlignmentPlan> {
        self.upload_plans.get(client as usize - 1)
    }

    pub fn download_plan(&self, client: ParticipantId) -> Option<&AlignmentPlan> {
        self.download_plans.get(client as usize - 1)
    }

    /// Runs the configured mode for all rounds.
    pub fn run(&mut self, observer: &dyn Observer) -> Result<Vec<RoundRecord>, FedError> {
        let pool = if self.config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(self.config.workers)
                    .build()
                    .map_err(|e| FedError::Setup(e.to_string()))?,
            )
        } else {
            None
        };
        let mut logs = Vec::new();
        if self.config.mode == Mode::ZeroShot {
            return Ok(logs);
        }
        for round in 0..self.config.rounds {
            let rows = match self.config.mode {
                Mode::Fedmkt | Mode::Llm2slm => self.fedmkt_round(round, pool.as_ref(), observer)?,
                Mode::Standalone => self.standalone_round(round, pool.as_ref())?,
                Mode::Centralized => self.centralized_round(round)?,
                Mode::Fedavg => self.fedavg_round(round, pool.as_ref())?,
                Mode::ZeroShot => unreachable!(),
            };
            logs.extend(rows);
        }
        Ok(logs)
    }

    fn fedmkt_round(
        &mut self,
        round: usize,
        pool: Option<&rayon::ThreadPool>,
        obs: &dyn Observer,
    ) -> Result<Vec<RoundRecord>, FedError> {
        let cfg = self.config.clone();
        let upload = cfg.mode == Mode::Fedmkt;
        let t = round as u32;

        // Steps 1-3 on every client.
        let phase1 = for_each_client(pool, &mut self.clients, |c| client_update1(c, &cfg, round, upload, obs))?;

        // Barrier passed: the server holds every client set (or none in llm2slm).
        let server = &mut self.server;
        let mut server_stats = None;
        let mut server_selected = 0;
        if upload {
            obs.step(round, Step::ServerAlignment, SERVER_ID);
            let mut aligned = Vec::with_capacity(phase1.len());
            for (k, (bytes, _, _)) in phase1.iter().enumerate() {
                let id = k as ParticipantId + 1;
                let bytes = bytes.as_ref().ok_or(FedError::MissingClientSet(id))?;
                let set = deserialize_knowledge(bytes).map_err(abort(round, SERVER_ID, "receiving client knowledge"))?;
                if set.origin != id || set.round != t {
                    return Err(FedError::MissingClientSet(id));
                }
                aligned.push(self.upload_plans[k].project(&set).map_err(abort(round, SERVER_ID, "alignment"))?);
            }
            obs.step(round, Step::ServerSelection, SERVER_ID);
            let local = local_losses(&server.model, &server.public).map_err(abort(round, SERVER_ID, "local losses"))?;
            let refs: Vec<&KnowledgeSet> = aligned.iter().collect();
            let selected = dual_min_ce(&local, &refs).map_err(abort(round, SERVER_ID, "selection"))?;
            server_selected = selected.len();
            obs.step(round, Step::ServerTransfer, SERVER_ID);
            server_stats = Some(
                transfer(server, &selected, cfg.lambda, cfg.server_epochs, cfg.batch_size, self.ft_only)
                    .map_err(abort(round, SERVER_ID, "knowledge transfer"))?,
            );
        }

        obs.step(round, Step::ServerKnowledge, SERVER_ID);
        let s0 = build_knowledge_set(&server.model, &server.public, cfg.k_top, SERVER_ID, t)
            .map_err(abort(round, SERVER_ID, "server knowledge"))?;
        let s0_bytes = serialize_knowledge(&s0);
        let s0_size = s0.payload_size();
        obs.step(round, Step::Broadcast, SERVER_ID);
        for c in &self.clients {
            obs.message(round, SERVER_ID, c.id, &s0_bytes);
        }

        // Steps 9-11 on every client.
        let plans = &self.download_plans;
        let ft_only = self.ft_only;
        let phase2 = for_each_client(pool, &mut self.clients, |c| {
            client_update2(c, &plans[c.id as usize - 1], &s0_bytes, &cfg, round, ft_only, obs)
        })?;

        let mut rows = Vec::new();
        let metrics = self.server.evaluate().map_err(abort(round, SERVER_ID, "evaluation"))?;
        rows.push(RoundRecord::new(round, &self.server, server_stats.unwrap_or_default(), None, server_selected, metrics));
        for (c, ((_, up, local), (stats, selected))) in self.clients.iter().zip(phase1.into_iter().zip(phase2)) {
            let metrics = c.evaluate().map_err(abort(round, c.id, "evaluation"))?;
            let mut row = RoundRecord::new(round, c, stats, Some(local.ft), selected, metrics);
            row.upload_floats = up.floats;
            row.upload_bytes = up.bytes;
            row.download_floats = s0_size.floats;
            row.download_bytes = s0_size.bytes;
            rows.push(row);
        }
        Ok(rows)
    }

    fn standalone_round(&mut self, round: usize, pool: Option<&rayon::ThreadPool>) -> Result<Vec<RoundRecord>, FedError> {
        let cfg = self.config.clone();
        let stats = for_each_client(pool, &mut self.clients, |c| {
            let data = c.private.as_ref().expect("clients hold private data");
            run_epochs(&mut c.model, &mut c.optimizer, &mut c.rng, data, cfg.client_epochs, cfg.batch_size, None)
                .map_err(abort(round, c.id, "local training"))
        })?;
        self.clients
            .iter()
            .zip(stats)
            .map(|(c, s)| {
                let m = c.evaluate().map_err(abort(round, c.id, "evaluation"))?;
                Ok(RoundRecord::new(round, c, s, Some(s.ft), 0, m))
            })
            .collect()
    }

    fn centralized_round(&mut self, round: usize) -> Result<Vec<RoundRecord>, FedError> {
        let s = &mut self.server;
        let stats = run_epochs(
            &mut s.model,
            &mut s.optimizer,
            &mut s.rng,
            s.private.as_ref().expect("centralized server holds the pooled data"),
            self.config.server_epochs,
            self.config.batch_size,
            None,
        )
        .map_err(abort(round, SERVER_ID, "centralized training"))?;
        let m = s.evaluate().map_err(abort(round, SERVER_ID, "evaluation"))?;
        Ok(vec![RoundRecord::new(round, s, stats, None, 0, m)])
    }

    fn fedavg_round(&mut self, round: usize, pool: Option<&rayon::ThreadPool>) -> Result<Vec<RoundRecord>, FedError> {
        let cfg = self.config.clone();
        let stats = for_each_client(pool, &mut self.clients, |c| {
            let data = c.private.as_ref().expect("clients hold private data");
            run_epochs(&mut c.model, &mut c.optimizer, &mut c.rng, data, cfg.client_epochs, cfg.batch_size, None)
                .map_err(abort(round, c.id, "local training"))
        })?;
        let adapters: Vec<&LowRankAdapter> = self.clients.iter().map(|c| &c.model.adapter).collect();
        let avg = average_adapters(&adapters).map_err(FedError::Setup)?;
        let floats = avg.num_params();
        for c in &mut self.clients {
            c.model.adapter = avg.clone();
        }
        self.clients
            .iter()
            .zip(stats)
            .map(|(c, s)| {
                let m = c.evaluate().map_err(abort(round, c.id, "evaluation"))?;
                let mut row = RoundRecord::new(round, c, s, Some(s.ft), 0, m);
                row.upload_floats = floats;
                row.download_floats = floats;
                row.upload_bytes = floats * 8;
                row.download_bytes = floats * 8;
                Ok(row)
            })
            .collect()
    }

    /// Gives the server the pooled public and private data for the
    /// centralized baseline. Called by [`run_mode`].
    fn pool_data_on_server(&mut self, world: &World) -> Result<(), FedError> {
        let all = Dataset::concat(std::iter::once(&world.public).chain(&world.private));
        let tok = self.server.model.tokenizer().clone();
        self.server.private = Some(encode_dataset(&tok, self.server.model.context_window(), &all)?);
        Ok(())
    }
}

/// Elementwise uniform mean of adapter factors.
pub fn average_adapters(adapters: &[&LowRankAdapter]) -> Result<LowRankAdapter, String> {
    let first = adapters.first().ok_or("no adapters to average")?;
    if adapters.iter().any(|a| a.a.dim() != first.a.dim() || a.b.dim() != first.b.dim() || a.alpha != first.alpha) {
        return Err("adapters differ in shape".into());
    }
    let n = adapters.len() as f64;
    let mut a = first.a.clone();
    let mut b = first.b.clone();
    for other in &adapters[1..] {
        a += &other.a;
        b += &other.b;
    }
    a /= n;
    b /= n;
    Ok(LowRankAdapter { a, b, alpha: first.alpha })
}

fn for_each_client<T, F>(pool: Option<&rayon::ThreadPool>, clients: &mut [Participant], f: F) -> Result<Vec<T>, FedError>
where
    T: Send,
    F: Fn(&mut Participant) -> Result<T, FedError> + Sync + Send,
{
    match pool {
        None => clients.iter_mut().map(f).collect(),
        Some(pool) => pool.install(|| clients.par_iter_mut().map(f).collect()),
    }
}

/// Steps 1-3: private fine-tuning, then (when uploading) the client's
/// knowledge set over the public data, serialized for the server.
fn client_update1(
    c: &mut Participant,
    cfg: &FedConfig,
    round: usize,
    upload: bool,
    obs: &dyn Observer,
) -> Result<(Option<Vec<u8>>, PayloadSize, PhaseStats), FedError> {
    obs.step(round, Step::LocalTraining, c.id);
    let data = c.private.as_ref().expect("clients hold private data");
    let stats = run_epochs(&mut c.model, &mut c.optimizer, &mut c.rng, data, cfg.client_epochs, cfg.batch_size, None)
        .map_err(abort(round, c.id, "local training"))?;
    if !upload {
        return Ok((None, PayloadSize::default(), stats));
    }
    obs.step(round, Step::ClientKnowledge, c.id);
    let set = build_knowledge_set(&c.model, &c.public, cfg.k_top, c.id, round as u32)
        .map_err(abort(round, c.id, "client knowledge"))?;
    let bytes = serialize_knowledge(&set);
    obs.step(round, Step::Upload, c.id);
    obs.message(round, c.id, SERVER_ID, &bytes);
    Ok((Some(bytes), set.payload_size(), stats))
}

/// Steps 9-11: align the server set, select against local losses, transfer.
fn client_update2(
    c: &mut Participant,
    plan: &AlignmentPlan,
    s0_bytes: &[u8],
    cfg: &FedConfig,
    round: usize,
    ft_only: bool,
    obs: &dyn Observer,
) -> Result<(PhaseStats, usize), FedError> {
    obs.step(round, Step::ClientAlignment, c.id);
    let s0 = deserialize_knowledge(s0_bytes).map_err(abort(round, c.id, "receiving server knowledge"))?;
    let aligned = plan.project(&s0).map_err(abort(round, c.id, "alignment"))?;
    obs.step(round, Step::ClientSelection, c.id);
    let local = local_losses(&c.model, &c.public).map_err(abort(round, c.id, "local losses"))?;
    let selected = dual_min_ce(&local, &[&aligned]).map_err(abort(round, c.id, "selection"))?;
    obs.step(round, Step::ClientTransfer, c.id);
    let stats = transfer(c, &selected, cfg.lambda, cfg.client_epochs, cfg.batch_size, ft_only)
        .map_err(abort(round, c.id, "knowledge transfer"))?;
    Ok((stats, selected.len()))
}

fn transfer(
    p: &mut Participant,
    selected: &SelectiveKnowledgeSet,
    lambda: f64,
    epochs: usize,
    batch_size: usize,
    ft_only: bool,
) -> Result<PhaseStats, ModelError> {
    let public = p.public.clone();
    let t = (!ft_only).then_some(Transfer { lambda, selected });
    run_epochs(&mut p.model, &mut p.optimizer, &mut p.rng, &public, epochs, batch_size, t)
}

/// What a finished run leaves behind.
pub struct RunOutcome {
    pub federation: Federation,
    pub rounds: Vec<RoundRecord>,
    /// Final evaluation of the server and then each client.
    pub eval: Vec<(ParticipantId, EvalMetrics)>,
}

impl RunOutcome {
    pub fn accuracy(&self, id: ParticipantId) -> f64 {
        self.eval.iter().find(|e| e.0 == id).map(|e| e.1.accuracy).unwrap_or(f64::NAN)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary::new(&self.federation, &self.rounds, &self.eval)
    }
}

/// Builds the federation for `config` on `world`, runs its mode, and
/// evaluates every participant at the end.
pub fn run_mode(config: &FedConfig, world: &World, observer: &dyn Observer) -> Result<RunOutcome, FedError> {
    let mut fed = Federation::new(config, world)?;
    if config.mode == Mode::Centralized {
        fed.pool_data_on_server(world)?;
    }
    let rounds = fed.run(observer)?;
    let eval = fed
        .participants()
        .map(|p| Ok((p.id, p.evaluate().map_err(abort(config.rounds, p.id, "final evaluation"))?)))
        .collect::<Result<Vec<_>, FedError>>()?;
    Ok(RunOutcome { federation: fed, rounds, eval })
}

/// Loads the world from `config.data_dir` or generates it from `config.task`.
pub fn build_world(config: &FedConfig) -> Result<World, FedError> {
    match &config.data_dir {
        Some(dir) => Ok(World::load_dir(dir, config.clients, &config.task)?),
        None => Ok(crate::data::generate_world(&config.task, config.clients)?),
    }
}
