//! Staged training: reward-free pretraining, frozen zero-shot deployment,
//! few-shot task fine-tuning, and the task-reward-only baseline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use latentdrive_autodiff::{derive_seed, seeded, Adam, Checkpoint, Dtype, ParameterSet, SeededRng};
use latentdrive_sim::{
    Action, Observation, RewardWeights, RouteId, RouteSpec, Scenario, Simulator, StepResult, TownId, NUM_ACTIONS,
};
use rand::seq::index;
use rand::Rng;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{ActionMode, Config, IntrinsicKind};
use crate::eval::{run_grid, Controller, EvalRecord, GridSpec};
use crate::imagination::{AcStats, ActorCritic, RewardSource, Role, WorldImagination};
use crate::intrinsic::{Intrinsic, IntrinsicStats, PairBatch};
use crate::replay::{ReplayBuffer, RewardMode, Transition};
use crate::world_model::{Latent, SequenceFeatures, WmDiagnostics, WorldModel};
use crate::{Error, Result};

pub const METRICS_SCHEMA: &str = "latentdrive.metrics.v1";

/// Town used for every training stage; the other town is held out.
pub const TRAIN_TOWN: TownId = TownId::A;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain,
    Zeroshot,
    Finetune,
    Baseline,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::Zeroshot, Stage::Finetune, Stage::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Zeroshot => "zeroshot",
            Stage::Finetune => "finetune",
            Stage::Baseline => "baseline",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    /// Parameter sets a stage may change.
    pub fn trainable(self, set: &str) -> bool {
        match self {
            Stage::Pretrain => {
                set == "wm" || set.starts_with("explore.") || (set.starts_with("intrinsic.") && set != "intrinsic.target")
            }
            Stage::Zeroshot => false,
            Stage::Finetune => set == "reward_head" || set.starts_with("task."),
            Stage::Baseline => set == "wm" || set == "reward_head" || set.starts_with("task."),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Keys that would carry task reward; forbidden in reward-free logs.
pub fn is_task_reward_key(key: &str) -> bool {
    key.starts_with("task_") || key.starts_with("reward_head") || key.contains("extrinsic")
}

pub fn is_intrinsic_key(key: &str) -> bool {
    key.starts_with("intrinsic_")
}

// Seed stream tags.
const INIT: u64 = 1;
const SCENARIO: u64 = 2;
const ACT: u64 = 3;
const TRAIN: u64 = 4;
const IMAGINE: u64 = 5;
const DENSITY: u64 = 6;

/// Every learned component of one agent.
pub struct Agent {
    pub wm: WorldModel,
    pub intrinsic: Intrinsic,
    pub explore: ActorCritic,
    pub task: ActorCritic,
}

fn same_layout(a: &ParameterSet, b: &ParameterSet) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
}

fn bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn from_bits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| Error::Format(format!("bad float bits `{s}`")))
}

impl Agent {
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        let wm = WorldModel::new(&cfg.wm, cfg.sim.obs_size, &mut seeded(derive_seed(seed, &[INIT, 1])))?;
        let feat = wm.feature_dim();
        let intrinsic = Intrinsic::new(&cfg.intrinsic, feat, cfg.wm.vars, cfg.wm.classes, derive_seed(seed, &[INIT, 2]))?;
        let explore = ActorCritic::new(Role::Explore, feat, NUM_ACTIONS, &cfg.ac, &mut seeded(derive_seed(seed, &[INIT, 3])));
        let task = ActorCritic::new(Role::Task, feat, NUM_ACTIONS, &cfg.ac, &mut seeded(derive_seed(seed, &[INIT, 4])));
        Ok(Self { wm, intrinsic, explore, task })
    }

    pub fn kind(&self) -> IntrinsicKind {
        self.intrinsic.kind()
    }

    pub fn policy(&self, role: Role) -> &ActorCritic {
        match role {
            Role::Explore => &self.explore,
            Role::Task => &self.task,
        }
    }

    pub fn sets(&self) -> Vec<(String, &ParameterSet)> {
        let mut out = vec![("wm".to_string(), &self.wm.params), ("reward_head".to_string(), &self.wm.reward_head)];
        out.extend(self.intrinsic.sets());
        out.push(("explore.actor".into(), &self.explore.actor));
        out.push(("explore.critic".into(), &self.explore.critic));
        out.push(("task.actor".into(), &self.task.actor));
        out.push(("task.critic".into(), &self.task.critic));
        out
    }

    fn sets_mut(&mut self) -> Vec<(String, &mut ParameterSet)> {
        let mut out = vec![("wm".to_string(), &mut self.wm.params), ("reward_head".to_string(), &mut self.wm.reward_head)];
        out.extend(self.intrinsic.sets_mut());
        out.push(("explore.actor".into(), &mut self.explore.actor));
        out.push(("explore.critic".into(), &mut self.explore.critic));
        out.push(("task.actor".into(), &mut self.task.actor));
        out.push(("task.critic".into(), &mut self.task.critic));
        out
    }

    pub fn optimizers(&self) -> Vec<(String, &Adam)> {
        let mut out = vec![("wm".to_string(), &self.wm.opt), ("reward_head".to_string(), &self.wm.reward_opt)];
        out.extend(self.intrinsic.optimizers());
        out.push(("explore.actor".into(), &self.explore.actor_opt));
        out.push(("explore.critic".into(), &self.explore.critic_opt));
        out.push(("task.actor".into(), &self.task.actor_opt));
        out.push(("task.critic".into(), &self.task.critic_opt));
        out
    }

    fn optimizers_mut(&mut self) -> Vec<(String, &mut Adam)> {
        let mut out = vec![("wm".to_string(), &mut self.wm.opt), ("reward_head".to_string(), &mut self.wm.reward_opt)];
        out.extend(self.intrinsic.optimizers_mut());
        out.push(("explore.actor".into(), &mut self.explore.actor_opt));
        out.push(("explore.critic".into(), &mut self.explore.critic_opt));
        out.push(("task.actor".into(), &mut self.task.actor_opt));
        out.push(("task.critic".into(), &mut self.task.critic_opt));
        out
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.sets().into_iter().map(|(n, s)| (n, s.checksum())).collect()
    }

    /// Checksums of the sets `stage` must leave untouched.
    pub fn guarded_checksums(&self, stage: Stage) -> BTreeMap<String, String> {
        self.sets().into_iter().filter(|(n, _)| !stage.trainable(n)).map(|(n, s)| (n, s.checksum())).collect()
    }

    /// Optimizer steps taken over the agent's lifetime.
    pub fn optimizer_steps(&self) -> u64 {
        self.optimizers().iter().map(|(_, o)| o.steps()).sum()
    }

    pub fn freeze_all(&mut self) {
        for (_, s) in self.sets_mut() {
            s.freeze();
        }
        self.wm.enable_reward(false);
    }

    pub fn to_checkpoint(&self, mut metadata: BTreeMap<String, String>) -> Checkpoint {
        metadata.insert("intrinsic.kind".into(), self.kind().name().into());
        metadata.insert("reward_head.enabled".into(), self.wm.reward_enabled().to_string());
        if let Some(n) = self.intrinsic.normalizer() {
            metadata.insert("intrinsic.norm.mean".into(), bits(n.mean));
            metadata.insert("intrinsic.norm.var".into(), bits(n.var));
        }
        Checkpoint {
            metadata,
            sets: self.sets().into_iter().map(|(n, s)| (n, s.clone())).collect(),
            optimizers: self.optimizers().into_iter().map(|(n, o)| (n, o.clone())).collect(),
        }
    }

    /// Rebuilds an agent from a checkpoint. Architecture comes from `cfg`;
    /// the intrinsic kind comes from the checkpoint.
    pub fn from_checkpoint(cfg: &Config, mut ck: Checkpoint) -> Result<Self> {
        let kind: IntrinsicKind =
            ck.metadata.get("intrinsic.kind").ok_or_else(|| Error::Format("checkpoint lacks intrinsic.kind".into()))?.parse()?;
        let mut cfg = cfg.clone();
        cfg.intrinsic.kind = kind;
        let mut agent = Agent::new(&cfg, 0)?;
        for (name, set) in agent.sets_mut() {
            let loaded = ck.sets.remove(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks set `{name}`")))?;
            if !same_layout(set, &loaded) {
                return Err(Error::Format(format!("set `{name}` does not match the configured architecture")));
            }
            *set = loaded;
        }
        if let Some(extra) = ck.sets.keys().next() {
            return Err(Error::Format(format!("unexpected set `{extra}` in checkpoint")));
        }
        for (name, opt) in agent.optimizers_mut() {
            *opt = ck.optimizers.remove(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer `{name}`")))?;
        }
        let enabled = ck.metadata.get("reward_head.enabled").is_some_and(|v| v == "true");
        agent.wm.enable_reward(enabled);
        if let Some(n) = agent.intrinsic.normalizer_mut() {
            let get = |k: &str| {
                ck.metadata.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}"))).and_then(|v| from_bits(v))
            };
            n.mean = get("intrinsic.norm.mean")?;
            n.var = get("intrinsic.norm.var")?;
        }
        Ok(agent)
    }

    pub fn save(&self, path: &Path, metadata: BTreeMap<String, String>) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.to_checkpoint(metadata).save(path, Dtype::F64)?;
        Ok(())
    }

    pub fn load(cfg: &Config, path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let ck = Checkpoint::load(path)?;
        let meta = ck.metadata.clone();
        Ok((Self::from_checkpoint(cfg, ck)?, meta))
    }
}

/// Acts with one of the agent's policies, filtering observations through
/// the world-model posterior.
pub struct PolicyController<'a> {
    pub agent: &'a Agent,
    pub role: Role,
    pub mode: ActionMode,
}

impl Controller for PolicyController<'_> {
    type Memory = (Latent, Option<usize>);

    fn begin(&self) -> Self::Memory {
        (Latent::zeros(1, &self.agent.wm.cfg), None)
    }

    fn act(&self, memory: &mut Self::Memory, obs: &Observation, rng: &mut SeededRng) -> Result<usize> {
        let latent = self.agent.wm.observe_step(&memory.0, memory.1, obs, rng)?;
        let a = self.agent.policy(self.role).act(&latent.features(), self.mode, rng)?;
        *memory = (latent, Some(a));
        Ok(a)
    }
}

/// Line-delimited JSON metrics. The first line identifies the run.
pub struct MetricsLog<W: Write> {
    out: W,
    stage: Stage,
    lines: usize,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(mut out: W, stage: Stage, cfg: &Config, seed: u64) -> Result<Self> {
        let header = json!({
            "schema": METRICS_SCHEMA,
            "config_hash": cfg.hash(),
            "seed": seed,
            "stage": stage.name(),
            "arm": cfg.intrinsic.kind.name(),
            "town": TRAIN_TOWN.name(),
        });
        writeln!(out, "{header}")?;
        Ok(Self { out, stage, lines: 1 })
    }

    /// Appends one record after checking it against the stage's key rules.
    pub fn record(&mut self, fields: Map<String, Value>) -> Result<()> {
        for k in fields.keys() {
            if self.stage == Stage::Pretrain && is_task_reward_key(k) {
                return Err(Error::Contract(format!("reward-free stage tried to log `{k}`")));
            }
            if self.stage == Stage::Baseline && is_intrinsic_key(k) {
                return Err(Error::Contract(format!("baseline tried to log `{k}`")));
            }
        }
        writeln!(self.out, "{}", Value::Object(fields))?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Budgeted environment steps.
    pub env_steps: u64,
    /// Random-policy steps collected before the budget starts.
    pub prefill_steps: u64,
    pub updates: u64,
    pub replay_writes: u64,
    pub episodes: u64,
}

pub struct RunOutput {
    pub agent: Agent,
    pub counters: Counters,
    /// Hash of the real features fed to the intrinsic module at the first update.
    pub first_feature_hash: Option<String>,
    pub freeze_checks: u64,
    pub guarded_before: BTreeMap<String, String>,
    pub guarded_after: BTreeMap<String, String>,
}

fn features_hash(p: &PairBatch) -> String {
    let mut h = Sha256::new();
    for v in p.u.iter().chain(&p.next).chain(&p.next_posterior) {
        h.update(v.to_bits().to_le_bytes());
    }
    for a in &p.actions {
        h.update((*a as u64).to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

fn pick_starts(f: &SequenceFeatures, count: usize, rng: &mut SeededRng) -> (Vec<f64>, usize) {
    let rows = f.rows();
    let feat = f.feats.len() / rows;
    let n = count.min(rows);
    let mut out = Vec::with_capacity(n * feat);
    for r in index::sample(rng, rows, n).into_iter() {
        out.extend_from_slice(&f.feats[r * feat..(r + 1) * feat]);
    }
    (out, n)
}

/// Where episodes start during collection.
enum Spawns {
    /// Random spawn points, no route.
    Free,
    /// Fixed routes visited in turn.
    Routes(Vec<RouteId>),
}

/// One environment plus the acting state of the agent driving it.
struct Collector {
    sim: Simulator,
    spawns: Spawns,
    densities: Vec<u32>,
    density: u32,
    period: u64,
    scenario_rng: SeededRng,
    density_rng: SeededRng,
    act_rng: SeededRng,
    obs: Option<Observation>,
    memory: (Latent, Option<usize>),
    route_cursor: usize,
    with_reward: bool,
    episode_steps: u64,
    episode_return: f64,
}

struct EpisodeEnd {
    steps: u64,
    cause: &'static str,
    task_return: Option<f64>,
}

impl Collector {
    fn new(cfg: &Config, stage: Stage, seed: u64, spawns: Spawns, weights: Option<RewardWeights>) -> Result<Self> {
        let mut sim = Simulator::new(cfg.sim.clone())?;
        let with_reward = weights.is_some();
        sim.set_reward_weights(weights);
        let mut density_rng = seeded(derive_seed(seed, &[DENSITY, stage.tag()]));
        let densities = cfg.protocol.densities.clone();
        let density = densities[density_rng.gen_range(0..densities.len())];
        Ok(Self {
            sim,
            spawns,
            density,
            densities,
            period: cfg.protocol.density_period,
            scenario_rng: seeded(derive_seed(seed, &[SCENARIO, stage.tag()])),
            density_rng,
            act_rng: seeded(derive_seed(seed, &[ACT, stage.tag()])),
            obs: None,
            memory: (Latent::zeros(1, &cfg.wm), None),
            route_cursor: 0,
            with_reward,
            episode_steps: 0,
            episode_return: 0.0,
        })
    }

    fn start_episode(&mut self, wm: &WorldModel, replay: &mut ReplayBuffer) -> Result<()> {
        let route = match &self.spawns {
            Spawns::Free => None,
            Spawns::Routes(r) => {
                let id = r[self.route_cursor % r.len()];
                self.route_cursor += 1;
                Some(RouteSpec::builtin(TRAIN_TOWN, id).clone())
            }
        };
        let sc = Scenario {
            town: TRAIN_TOWN,
            route,
            density: self.density,
            tm_seed: self.scenario_rng.gen(),
            spawn_seed: self.scenario_rng.gen(),
        };
        let obs = self.sim.reset(&sc)?;
        replay.append(Transition {
            obs: obs.data.clone(),
            prev_action: None,
            reward: self.with_reward.then_some(0.0),
            cont: true,
            first: true,
        })?;
        self.obs = Some(obs);
        self.memory = (Latent::zeros(1, &wm.cfg), None);
        self.episode_steps = 0;
        self.episode_return = 0.0;
        Ok(())
    }

    fn maybe_resample_density(&mut self, budget_step: u64) {
        if self.period > 0 && budget_step > 0 && budget_step.is_multiple_of(self.period) {
            self.density = self.densities[self.density_rng.gen_range(0..self.densities.len())];
        }
    }

    /// One environment step. `policy` of `None` acts uniformly at random.
    fn step(&mut self, wm: &WorldModel, policy: Option<&ActorCritic>, replay: &mut ReplayBuffer) -> Result<Option<EpisodeEnd>> {
        if self.obs.is_none() {
            self.start_episode(wm, replay)?;
        }
        let obs = self.obs.take().expect("episode started");
        let a = match policy {
            Some(p) => {
                let latent = wm.observe_step(&self.memory.0, self.memory.1, &obs, &mut self.act_rng)?;
                let a = p.act(&latent.features(), ActionMode::Sample, &mut self.act_rng)?;
                self.memory = (latent, Some(a));
                a
            }
            None => self.act_rng.gen_range(0..NUM_ACTIONS),
        };
        let r: StepResult = self.sim.step(Action::new(a)?)?;
        let reward = if self.with_reward {
            let v = r.rewards.map(|c| c.total()).ok_or_else(|| Error::Contract("task stage step without a reward".into()))?;
            Some(v)
        } else {
            None
        };
        self.episode_steps += 1;
        self.episode_return += reward.unwrap_or(0.0);
        replay.append(Transition {
            obs: r.observation.data.clone(),
            prev_action: Some(a),
            reward,
            cont: !r.terminal,
            first: false,
        })?;
        if r.terminal {
            let end = EpisodeEnd {
                steps: self.episode_steps,
                cause: r.cause.name(),
                task_return: self.with_reward.then_some(self.episode_return),
            };
            self.obs = None;
            return Ok(Some(end));
        }
        self.obs = Some(r.observation);
        Ok(None)
    }

    /// Drops the current episode so the next step starts a fresh one.
    fn end_episode(&mut self) {
        self.obs = None;
    }
}

fn wm_fields(m: &mut Map<String, Value>, d: &WmDiagnostics) {
    m.insert("wm_loss".into(), json!(d.loss));
    m.insert("wm_recon".into(), json!(d.recon));
    m.insert("wm_kl".into(), json!(d.kl));
    m.insert("wm_kl_floored".into(), json!(d.kl_floored));
    m.insert("wm_cont".into(), json!(d.cont));
}

fn ac_fields(m: &mut Map<String, Value>, s: &AcStats) {
    m.insert("actor_loss".into(), json!(s.actor_loss));
    m.insert("critic_loss".into(), json!(s.critic_loss));
    m.insert("entropy".into(), json!(s.entropy));
    m.insert("return_mean".into(), json!(s.return_mean));
    m.insert("value_mean".into(), json!(s.value_mean));
}

fn intrinsic_fields(m: &mut Map<String, Value>, s: &IntrinsicStats, imagined: f64) {
    m.insert("intrinsic_loss".into(), json!(s.loss));
    m.insert("intrinsic_batch_reward".into(), json!(s.reward_mean));
    m.insert("intrinsic_signal".into(), json!(s.signal_mean));
    m.insert("intrinsic_imagined_reward".into(), json!(imagined));
}

/// Mutable state threaded through a training loop.
struct Loop<'a, W: Write> {
    cfg: &'a Config,
    stage: Stage,
    seed: u64,
    log: &'a mut MetricsLog<W>,
    checkpoints: Option<&'a Path>,
    counters: Counters,
    train_rng: SeededRng,
    imag_rng: SeededRng,
    first_feature_hash: Option<String>,
    guarded: BTreeMap<String, String>,
    freeze_checks: u64,
}

impl<W: Write> Loop<'_, W> {
    fn episode_line(&mut self, end: EpisodeEnd) -> Result<()> {
        self.counters.episodes += 1;
        let mut m = Map::new();
        m.insert("event".into(), json!("episode"));
        m.insert("env_steps".into(), json!(self.counters.env_steps));
        m.insert("episode".into(), json!(self.counters.episodes));
        m.insert("length".into(), json!(end.steps));
        m.insert("cause".into(), json!(end.cause));
        if let Some(r) = end.task_return {
            m.insert("task_return".into(), json!(r));
        }
        self.log.record(m)
    }

    fn check_frozen(&mut self, agent: &Agent) -> Result<()> {
        self.freeze_checks += 1;
        let now = agent.guarded_checksums(self.stage);
        if now != self.guarded {
            let changed: Vec<&String> = now.iter().filter(|(k, v)| self.guarded.get(*k) != Some(v)).map(|(k, _)| k).collect();
            return Err(Error::Contract(format!("{} changed parameter sets it must not touch: {changed:?}", self.stage.name())));
        }
        Ok(())
    }

    fn after_update(&mut self, agent: &Agent, mut m: Map<String, Value>, density: u32) -> Result<()> {
        self.counters.updates += 1;
        m.insert("event".into(), json!("update"));
        m.insert("update".into(), json!(self.counters.updates));
        m.insert("env_steps".into(), json!(self.counters.env_steps));
        m.insert("density".into(), json!(density));
        self.log.record(m)?;
        let every = self.cfg.protocol.freeze_check_every;
        if every > 0 && self.counters.updates.is_multiple_of(every) {
            self.check_frozen(agent)?;
        }
        Ok(())
    }

    fn maybe_checkpoint(&self, agent: &Agent) -> Result<()> {
        let (Some(dir), every) = (self.checkpoints, self.cfg.protocol.checkpoint_every) else { return Ok(()) };
        if every > 0 && self.counters.env_steps.is_multiple_of(every) {
            let path = dir.join(format!("checkpoint_{:08}.ldck", self.counters.env_steps));
            agent.save(&path, self.metadata())?;
        }
        Ok(())
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        checkpoint_metadata(self.cfg, self.seed, self.stage, &self.counters)
    }
}

pub fn checkpoint_metadata(cfg: &Config, seed: u64, stage: Stage, c: &Counters) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("config_hash".to_string(), cfg.hash()),
        ("seed".to_string(), seed.to_string()),
        ("stage".to_string(), stage.name().to_string()),
        ("env_steps".to_string(), c.env_steps.to_string()),
        ("updates".to_string(), c.updates.to_string()),
    ])
}

/// Exploration-policy update step of the reward-free stage.
fn pretrain_update<W: Write>(agent: &mut Agent, replay: &ReplayBuffer, lp: &mut Loop<'_, W>) -> Result<Map<String, Value>> {
    let p = &lp.cfg.protocol;
    let batch = replay.sample(p.batch, p.seq_len, &mut lp.train_rng)?;
    let (diag, feats) = agent.wm.train_step(&batch, &mut lp.train_rng)?;
    let pairs = PairBatch::from_features(&feats);
    if lp.first_feature_hash.is_none() {
        lp.first_feature_hash = Some(features_hash(&pairs));
    }
    let istats = agent.intrinsic.train(&pairs)?;
    let (starts, n) = pick_starts(&feats, lp.cfg.ac.starts, &mut lp.imag_rng);
    let traj = {
        let mut model = WorldImagination { wm: &agent.wm, source: RewardSource::Intrinsic(&agent.intrinsic) };
        agent.explore.imagine(&mut model, &starts, n, &mut lp.imag_rng)?
    };
    let ac = agent.explore.update(&traj)?;
    let mut m = Map::new();
    wm_fields(&mut m, &diag);
    intrinsic_fields(&mut m, &istats, ac.reward_mean);
    ac_fields(&mut m, &ac);
    Ok(m)
}

/// Task-policy update on the frozen (finetune) or jointly trained (baseline) world model.
fn task_update<W: Write>(
    agent: &mut Agent,
    replay: &ReplayBuffer,
    lp: &mut Loop<'_, W>,
    train_wm: bool,
) -> Result<Map<String, Value>> {
    let p = &lp.cfg.protocol;
    let batch = replay.sample(p.batch, p.seq_len, &mut lp.train_rng)?;
    let mut m = Map::new();
    let feats = if train_wm {
        let (diag, feats) = agent.wm.train_step(&batch, &mut lp.train_rng)?;
        wm_fields(&mut m, &diag);
        feats
    } else {
        agent.wm.infer(&batch, &mut lp.train_rng)?
    };
    let rl = agent.wm.reward_train_step(&feats)?;
    let (starts, n) = pick_starts(&feats, lp.cfg.ac.starts, &mut lp.imag_rng);
    let traj = {
        let mut model = WorldImagination { wm: &agent.wm, source: RewardSource::TaskHead };
        agent.task.imagine(&mut model, &starts, n, &mut lp.imag_rng)?
    };
    let ac = agent.task.update(&traj)?;
    m.insert("reward_head_loss".into(), json!(rl));
    m.insert("task_imagined_reward".into(), json!(ac.reward_mean));
    ac_fields(&mut m, &ac);
    Ok(m)
}

fn run_loop<W: Write>(
    mut agent: Agent,
    mut lp: Loop<'_, W>,
    mut collector: Collector,
    mut replay: ReplayBuffer,
    budget: u64,
    prefill: u64,
    role: Role,
) -> Result<RunOutput> {
    lp.guarded = agent.guarded_checksums(lp.stage);
    let guarded_before = lp.guarded.clone();
    let writes_before = replay.writes();
    for _ in 0..prefill {
        collector.step(&agent.wm, None, &mut replay)?;
        lp.counters.prefill_steps += 1;
    }
    if prefill > 0 {
        collector.end_episode();
    }
    let p = &lp.cfg.protocol;
    let (train_every, seq_len) = (p.train_every.max(1), p.seq_len);
    for step in 0..budget {
        collector.maybe_resample_density(step);
        let end = collector.step(&agent.wm, Some(agent.policy(role)), &mut replay)?;
        lp.counters.env_steps += 1;
        if let Some(end) = end {
            lp.episode_line(end)?;
        }
        if lp.counters.env_steps.is_multiple_of(train_every) && replay.can_sample(seq_len) {
            let m = match lp.stage {
                Stage::Pretrain => pretrain_update(&mut agent, &replay, &mut lp)?,
                Stage::Finetune => task_update(&mut agent, &replay, &mut lp, false)?,
                Stage::Baseline => task_update(&mut agent, &replay, &mut lp, true)?,
                Stage::Zeroshot => return Err(Error::Contract("zero-shot deployment never trains".into())),
            };
            lp.after_update(&agent, m, collector.density)?;
        }
        lp.maybe_checkpoint(&agent)?;
    }
    if lp.counters.env_steps != budget {
        return Err(Error::Contract(format!("ran {} steps against a budget of {budget}", lp.counters.env_steps)));
    }
    lp.check_frozen(&agent)?;
    lp.counters.replay_writes = replay.writes() - writes_before;
    let mut end = Map::new();
    end.insert("event".into(), json!("end"));
    end.insert("env_steps".into(), json!(lp.counters.env_steps));
    end.insert("prefill_steps".into(), json!(lp.counters.prefill_steps));
    end.insert("updates".into(), json!(lp.counters.updates));
    end.insert("replay_writes".into(), json!(lp.counters.replay_writes));
    end.insert("episodes".into(), json!(lp.counters.episodes));
    end.insert("freeze_checks".into(), json!(lp.freeze_checks));
    lp.log.record(end)?;
    let guarded_after = agent.guarded_checksums(lp.stage);
    Ok(RunOutput {
        agent,
        counters: lp.counters,
        first_feature_hash: lp.first_feature_hash,
        freeze_checks: lp.freeze_checks,
        guarded_before,
        guarded_after,
    })
}

fn new_loop<'a, W: Write>(
    cfg: &'a Config,
    stage: Stage,
    seed: u64,
    log: &'a mut MetricsLog<W>,
    checkpoints: Option<&'a Path>,
) -> Loop<'a, W> {
    Loop {
        cfg,
        stage,
        seed,
        log,
        checkpoints,
        counters: Counters::default(),
        train_rng: seeded(derive_seed(seed, &[TRAIN, stage.tag()])),
        imag_rng: seeded(derive_seed(seed, &[IMAGINE, stage.tag()])),
        first_feature_hash: None,
        guarded: BTreeMap::new(),
        freeze_checks: 0,
    }
}

/// Reward-free pretraining in the training town from random spawns.
pub fn pretrain<W: Write>(cfg: &Config, seed: u64, log: &mut MetricsLog<W>, checkpoints: Option<&Path>) -> Result<RunOutput> {
    if cfg.intrinsic.kind == IntrinsicKind::None {
        return Err(Error::Config("pretraining needs an intrinsic module; use the baseline for kind `none`".into()));
    }
    let agent = Agent::new(cfg, seed)?;
    let lp = new_loop(cfg, Stage::Pretrain, seed, log, checkpoints);
    let collector = Collector::new(cfg, Stage::Pretrain, seed, Spawns::Free, None)?;
    let replay = ReplayBuffer::new(cfg.protocol.replay_capacity, RewardMode::Forbidden);
    run_loop(agent, lp, collector, replay, cfg.protocol.pretrain_steps, cfg.protocol.prefill, Role::Explore)
}

/// Few-shot task training on top of a pretrained agent. Only the reward
/// head and the task actor-critic learn.
pub fn finetune<W: Write>(
    cfg: &Config,
    mut agent: Agent,
    seed: u64,
    log: &mut MetricsLog<W>,
    checkpoints: Option<&Path>,
) -> Result<RunOutput> {
    if agent.kind() == IntrinsicKind::None {
        return Err(Error::Config("fine-tuning expects a pretrained intrinsic agent".into()));
    }
    agent.wm.params.freeze();
    agent.intrinsic.freeze();
    agent.explore.freeze();
    agent.task.actor.unfreeze();
    agent.task.critic.unfreeze();
    agent.wm.reward_head.unfreeze();
    agent.task.copy_from(&agent.explore)?;
    agent.wm.enable_reward(true);
    let task = cfg.protocol.task;
    let lp = new_loop(cfg, Stage::Finetune, seed, log, checkpoints);
    let collector = Collector::new(
        cfg,
        Stage::Finetune,
        seed,
        Spawns::Routes(cfg.protocol.task_routes.clone()),
        Some(cfg.protocol.weights(task).clone()),
    )?;
    let replay = ReplayBuffer::new(cfg.protocol.replay_capacity, RewardMode::Required);
    run_loop(agent, lp, collector, replay, cfg.protocol.finetune_steps, 0, Role::Task)
}

/// Single-stage task-reward training from scratch with the combined budget.
pub fn baseline<W: Write>(cfg: &Config, seed: u64, log: &mut MetricsLog<W>, checkpoints: Option<&Path>) -> Result<RunOutput> {
    if cfg.intrinsic.kind != IntrinsicKind::None {
        return Err(Error::Config("the task-reward baseline requires intrinsic.kind = \"none\"".into()));
    }
    let mut agent = Agent::new(cfg, seed)?;
    agent.wm.enable_reward(true);
    let task = cfg.protocol.task;
    let lp = new_loop(cfg, Stage::Baseline, seed, log, checkpoints);
    let collector = Collector::new(
        cfg,
        Stage::Baseline,
        seed,
        Spawns::Routes(cfg.protocol.task_routes.clone()),
        Some(cfg.protocol.weights(task).clone()),
    )?;
    let replay = ReplayBuffer::new(cfg.protocol.replay_capacity, RewardMode::Required);
    let budget = baseline_budget(cfg);
    run_loop(agent, lp, collector, replay, budget, cfg.protocol.prefill, Role::Task)
}

/// Total interaction budget matched to pretraining plus fine-tuning.
pub fn baseline_budget(cfg: &Config) -> u64 {
    cfg.protocol.pretrain_steps + cfg.protocol.finetune_steps
}

/// Result of evaluating a frozen agent.
pub struct Deployment {
    pub records: Vec<EvalRecord>,
    pub updates: u64,
    pub replay_writes: u64,
    pub before: BTreeMap<String, String>,
    pub after: BTreeMap<String, String>,
}

/// Freezes everything and runs the evaluation grid with `role`'s policy.
/// Fails if any parameter or optimizer state moves.
pub fn deploy(cfg: &Config, agent: &mut Agent, role: Role, method: &str, train_seed: u64, workers: usize) -> Result<Deployment> {
    agent.freeze_all();
    let before = agent.checksums();
    let steps_before = agent.optimizer_steps();
    let replay = ReplayBuffer::new(1, RewardMode::Forbidden);
    let grid = GridSpec { eval: &cfg.eval, sim: &cfg.sim, method, train_seed };
    let ctrl = PolicyController { agent, role, mode: cfg.eval.action_mode };
    let records = run_grid(&ctrl, &grid, workers)?;
    let after = agent.checksums();
    let updates = agent.optimizer_steps() - steps_before;
    if before != after || updates != 0 {
        return Err(Error::Contract("parameters changed during frozen deployment".into()));
    }
    Ok(Deployment { records, updates, replay_writes: replay.writes(), before, after })
}

/// Zero-shot deployment of the exploration policy.
pub fn zeroshot(cfg: &Config, agent: &mut Agent, train_seed: u64, workers: usize) -> Result<Deployment> {
    let method = agent.kind().name().to_string();
    deploy(cfg, agent, Role::Explore, &method, train_seed, workers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        Config::smoke()
    }

    fn log(cfg: &Config, stage: Stage) -> MetricsLog<Vec<u8>> {
        MetricsLog::new(Vec::new(), stage, cfg, 0).unwrap()
    }

    #[test]
    fn zero_budget_changes_nothing() {
        let mut cfg = tiny();
        cfg.protocol.pretrain_steps = 0;
        let init = Agent::new(&cfg, 3).unwrap().checksums();
        let mut l = log(&cfg, Stage::Pretrain);
        let out = pretrain(&cfg, 3, &mut l, None).unwrap();
        assert_eq!(out.agent.checksums(), init);
        assert_eq!(out.counters.updates, 0);
        assert_eq!(out.counters.prefill_steps, 64);
    }

    #[test]
    fn pretrain_log_is_reward_free_and_counts_match() {
        let cfg = tiny();
        let mut l = log(&cfg, Stage::Pretrain);
        let out = pretrain(&cfg, 1, &mut l, None).unwrap();
        assert_eq!(out.counters.env_steps, 48);
        assert_eq!(out.counters.updates, 12);
        assert_eq!(out.guarded_before, out.guarded_after);
        let text = String::from_utf8(l.into_inner().unwrap()).unwrap();
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(v.as_object().unwrap().keys().all(|k| !is_task_reward_key(k)), "{line}");
        }
        assert!(!text.contains(TownId::B.name()));
    }

    #[test]
    fn logging_a_task_key_in_pretraining_is_rejected() {
        let cfg = tiny();
        let mut l = log(&cfg, Stage::Pretrain);
        let mut m = Map::new();
        m.insert("task_return".into(), json!(1.0));
        assert!(matches!(l.record(m), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let mut cfg = tiny();
        cfg.intrinsic.kind = IntrinsicKind::Rnd;
        let mut l = log(&cfg, Stage::Pretrain);
        let out = pretrain(&cfg, 2, &mut l, None).unwrap();
        let ck = out.agent.to_checkpoint(BTreeMap::new());
        let bytes = ck.to_bytes(Dtype::F64);
        let back = Agent::from_checkpoint(&cfg, Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.checksums(), out.agent.checksums());
        assert_eq!(back.optimizer_steps(), out.agent.optimizer_steps());
        assert_eq!(back.intrinsic.normalizer(), out.agent.intrinsic.normalizer());
        assert_eq!(back.kind(), IntrinsicKind::Rnd);
    }

    #[test]
    fn finetune_hits_the_budget_and_leaves_frozen_sets() {
        let cfg = tiny();
        let mut l = log(&cfg, Stage::Pretrain);
        let pre = pretrain(&cfg, 4, &mut l, None).unwrap();
        let frozen: BTreeMap<_, _> = pre.agent.guarded_checksums(Stage::Finetune);
        let mut l = log(&cfg, Stage::Finetune);
        let out = finetune(&cfg, pre.agent, 4, &mut l, None).unwrap();
        assert_eq!(out.counters.env_steps, 40);
        assert_eq!(out.agent.guarded_checksums(Stage::Finetune), frozen);
        assert!(out.counters.updates > 0);
        assert_ne!(out.agent.task.actor.checksum(), out.agent.explore.actor.checksum());
    }

    #[test]
    fn zeroshot_is_read_only() {
        let cfg = tiny();
        let mut l = log(&cfg, Stage::Pretrain);
        let mut agent = pretrain(&cfg, 5, &mut l, None).unwrap().agent;
        let d = zeroshot(&cfg, &mut agent, 5, 2).unwrap();
        assert_eq!(d.records.len(), 2);
        assert_eq!((d.updates, d.replay_writes), (0, 0));
        assert_eq!(d.before, d.after);
        assert!(agent.wm.train_step(&[], &mut seeded(0)).is_err());
    }

    #[test]
    fn baseline_matches_the_combined_budget() {
        let mut cfg = tiny();
        cfg.intrinsic.kind = IntrinsicKind::None;
        let mut l = log(&cfg, Stage::Baseline);
        let out = baseline(&cfg, 0, &mut l, None).unwrap();
        assert_eq!(out.counters.env_steps, 88);
        let text = String::from_utf8(l.into_inner().unwrap()).unwrap();
        assert!(!text.contains("\"intrinsic_"));
        let mut bad = tiny();
        bad.intrinsic.kind = IntrinsicKind::Icm;
        assert!(baseline(&bad, 0, &mut log(&bad, Stage::Baseline), None).is_err());
    }
}
