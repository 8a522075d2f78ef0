//! Run configuration: one TOML document with sections `wm`, `intrinsic`,
//! `ac`, `sim`, `protocol` and `eval`. Every key has a default; unknown keys
//! are rejected with their full dotted paths.
//!
//! Environment overrides use `LATENTDRIVE__<SECTION>__<KEY>=<toml value>`,
//! for example `LATENTDRIVE__PROTOCOL__PRETRAIN_STEPS=5000`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use latentdrive_sim::{RewardWeights, RouteId, SimConfig, TownId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const ENV_PREFIX: &str = "LATENTDRIVE__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WmConfig {
    pub embed: usize,
    pub deter: usize,
    pub vars: usize,
    pub classes: usize,
    pub hidden: usize,
    pub decoder_hidden: usize,
    /// Share of a uniform distribution mixed into every latent categorical.
    pub unimix: f64,
    pub beta_kl: f64,
    /// Per-variable KL floor in nats; 0 disables it.
    pub free_bits: f64,
    pub cont_scale: f64,
    pub reward_scale: f64,
    pub lr: f64,
    pub reward_lr: f64,
    pub clip_norm: f64,
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            embed: 128,
            deter: 128,
            vars: 8,
            classes: 8,
            hidden: 128,
            decoder_hidden: 128,
            unimix: 0.01,
            beta_kl: 1.0,
            free_bits: 1.0,
            cont_scale: 1.0,
            reward_scale: 1.0,
            lr: 6e-4,
            reward_lr: 1e-3,
            clip_norm: 100.0,
        }
    }
}

impl WmConfig {
    pub fn stoch(&self) -> usize {
        self.vars * self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.deter + self.stoch()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntrinsicKind {
    Disagreement,
    Icm,
    Rnd,
    None,
}

impl IntrinsicKind {
    pub const ARMS: [IntrinsicKind; 3] = [IntrinsicKind::Disagreement, IntrinsicKind::Icm, IntrinsicKind::Rnd];

    pub fn name(self) -> &'static str {
        match self {
            IntrinsicKind::Disagreement => "disagreement",
            IntrinsicKind::Icm => "icm",
            IntrinsicKind::Rnd => "rnd",
            IntrinsicKind::None => "none",
        }
    }
}

impl fmt::Display for IntrinsicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntrinsicKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [IntrinsicKind::Disagreement, IntrinsicKind::Icm, IntrinsicKind::Rnd, IntrinsicKind::None]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown intrinsic kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntrinsicConfig {
    pub kind: IntrinsicKind,
    pub ensemble_size: usize,
    pub hidden: usize,
    pub icm_eta: f64,
    pub rnd_out: usize,
    pub norm_rate: f64,
    pub norm_eps: f64,
    pub lr: f64,
}

impl Default for IntrinsicConfig {
    fn default() -> Self {
        Self {
            kind: IntrinsicKind::Disagreement,
            ensemble_size: 5,
            hidden: 128,
            icm_eta: 0.5,
            rnd_out: 64,
            norm_rate: 0.01,
            norm_eps: 1e-8,
            lr: 3e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub entropy: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: usize,
    /// Imagination start states drawn from each replay batch.
    pub starts: usize,
    pub clip_norm: f64,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.99,
            entropy: 3e-3,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            hidden: 128,
            starts: 16,
            clip_norm: 100.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lf,
    Ca,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Lf => "lf",
            Task::Ca => "ca",
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lf" => Ok(Task::Lf),
            "ca" => Ok(Task::Ca),
            _ => Err(Error::Config(format!("unknown task `{s}` (expected lf or ca)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub seed: u64,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    /// Random-policy steps collected before learning, outside the budgets.
    pub prefill: u64,
    /// Environment steps per gradient update.
    pub train_every: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub replay_capacity: usize,
    /// Traffic density is redrawn every this many environment steps.
    pub density_period: u64,
    pub densities: Vec<u32>,
    pub task: Task,
    pub lf: RewardWeights,
    pub ca: RewardWeights,
    /// Town-A routes cycled by task-reward stages.
    pub task_routes: Vec<RouteId>,
    pub checkpoint_every: u64,
    pub freeze_check_every: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_steps: 20_000,
            finetune_steps: 2_000,
            prefill: 1_000,
            train_every: 4,
            batch: 8,
            seq_len: 16,
            replay_capacity: 100_000,
            density_period: 1_000,
            densities: vec![5, 10, 20],
            task: Task::Lf,
            lf: RewardWeights::lane_following(),
            ca: RewardWeights::collision_avoidance(),
            task_routes: vec![RouteId::Straight],
            checkpoint_every: 10_000,
            freeze_check_every: 100,
        }
    }
}

impl ProtocolConfig {
    pub fn weights(&self, task: Task) -> &RewardWeights {
        match task {
            Task::Lf => &self.lf,
            Task::Ca => &self.ca,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub towns: Vec<TownId>,
    pub routes: Vec<RouteId>,
    pub densities: Vec<u32>,
    pub tm_seeds: Vec<u64>,
    pub spawn_seeds: Vec<u64>,
    pub action_mode: ActionMode,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            towns: TownId::ALL.to_vec(),
            routes: RouteId::ALL.to_vec(),
            densities: vec![5, 10, 20],
            tm_seeds: vec![1001, 1002, 1003],
            spawn_seeds: vec![2001, 2002, 2003, 2004, 2005],
            action_mode: ActionMode::Sample,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub wm: WmConfig,
    pub intrinsic: IntrinsicConfig,
    pub ac: AcConfig,
    pub sim: SimConfig,
    pub protocol: ProtocolConfig,
    pub eval: EvalConfig,
}

fn unknown_keys(value: &toml::Value, reference: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (toml::Value::Table(user), toml::Value::Table(known)) = (value, reference) else { return };
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => out.push(path),
            Some(r) => unknown_keys(v, r, &path, out),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl Config {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let reference = toml::Value::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::from_toml_str(&src)
    }

    /// Applies `LATENTDRIVE__SECTION__KEY` overrides from `vars`.
    pub fn with_env<I>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value = toml::Value::try_from(&self).map_err(|e| Error::Config(e.to_string()))?;
        let mut any = false;
        for (k, v) in vars {
            let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
            let (last, parents) = path.split_last().ok_or_else(|| Error::Config(format!("empty override `{k}`")))?;
            let mut node = &mut value;
            for p in parents {
                node = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{k}` does not name a section")))?
                    .entry(p.clone())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
            node.as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{k}` does not name a section")))?
                .insert(last.clone(), parse_scalar(&v));
            any = true;
        }
        if !any {
            return Ok(self);
        }
        Self::from_value(value)
    }

    /// Switches to the full-length budgets: 500k pretraining steps, 10k
    /// fine-tuning steps, 50 evaluation episodes and a 10k density period.
    pub fn paper_scale(mut self) -> Self {
        self.protocol.pretrain_steps = 500_000;
        self.protocol.finetune_steps = 10_000;
        self.protocol.density_period = 10_000;
        self.eval.episodes = 50;
        self
    }

    /// Tiny networks and budgets for smoke runs and self-tests.
    pub fn smoke() -> Self {
        let mut c = Config::default();
        c.wm.embed = 16;
        c.wm.deter = 16;
        c.wm.vars = 4;
        c.wm.classes = 4;
        c.wm.hidden = 16;
        c.wm.decoder_hidden = 16;
        c.intrinsic.hidden = 16;
        c.intrinsic.ensemble_size = 2;
        c.intrinsic.rnd_out = 8;
        c.ac.hidden = 16;
        c.ac.horizon = 3;
        c.ac.starts = 4;
        c.protocol.prefill = 64;
        c.protocol.pretrain_steps = 48;
        c.protocol.finetune_steps = 40;
        c.protocol.batch = 2;
        c.protocol.seq_len = 8;
        c.protocol.density_period = 16;
        c.protocol.freeze_check_every = 3;
        c.eval.episodes = 1;
        c.eval.routes = vec![RouteId::Straight];
        c.eval.densities = vec![5];
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.sim.validate()?;
        let w = &self.wm;
        if w.vars == 0 || w.classes < 2 || w.deter == 0 || w.embed == 0 || w.hidden == 0 || w.decoder_hidden == 0 {
            return bad("wm sizes must be positive and classes >= 2");
        }
        if !(0.0..1.0).contains(&w.unimix) || w.free_bits < 0.0 || w.beta_kl < 0.0 {
            return bad("wm.unimix must lie in [0, 1) and wm.free_bits, wm.beta_kl must be non-negative");
        }
        let i = &self.intrinsic;
        if i.kind == IntrinsicKind::Disagreement && i.ensemble_size < 2 {
            return bad("intrinsic.ensemble_size must be at least 2");
        }
        if !(i.norm_rate > 0.0 && i.norm_rate <= 1.0) {
            return bad("intrinsic.norm_rate must lie in (0, 1]");
        }
        let a = &self.ac;
        if a.horizon == 0 || !(a.gamma > 0.0 && a.gamma < 1.0) || a.starts == 0 {
            return bad("ac.horizon >= 1, ac.gamma in (0, 1) and ac.starts >= 1 required");
        }
        let p = &self.protocol;
        if p.train_every == 0 || p.batch == 0 || p.seq_len < 2 || p.density_period == 0 || p.freeze_check_every == 0 {
            return bad("protocol.train_every, batch, density_period, freeze_check_every must be positive and seq_len >= 2");
        }
        if p.task_routes.is_empty() {
            return bad("protocol.task_routes must not be empty");
        }
        if p.densities.is_empty() {
            return bad("protocol.densities must not be empty");
        }
        for d in p.densities.iter().chain(&self.eval.densities) {
            latentdrive_sim::density_vehicles(*d)?;
        }
        let e = &self.eval;
        if e.towns.is_empty() || e.routes.is_empty() || e.densities.is_empty() {
            return bad("eval grid must name at least one town, route and density");
        }
        if e.tm_seeds.is_empty() || e.spawn_seeds.is_empty() {
            return bad("eval seed sets must not be empty");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let back = Config::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_listed_with_paths() {
        let err = Config::from_toml_str("[wm]\nembed = 64\nwidth = 3\n[protocol]\nbogus = 1\n[extra]\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("wm.width"), "{msg}");
        assert!(msg.contains("protocol.bogus"), "{msg}");
        assert!(msg.contains("extra"), "{msg}");
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = Config::from_toml_str("[intrinsic]\nkind = \"rnd\"\n").unwrap();
        assert_eq!(c.intrinsic.kind, IntrinsicKind::Rnd);
        assert_eq!(c.wm, WmConfig::default());
    }

    #[test]
    fn env_overrides_apply_and_change_the_hash() {
        let base = Config::default();
        let vars = vec![
            ("LATENTDRIVE__PROTOCOL__PRETRAIN_STEPS".to_string(), "5000".to_string()),
            ("LATENTDRIVE__INTRINSIC__KIND".to_string(), "icm".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ];
        let c = base.clone().with_env(vars).unwrap();
        assert_eq!(c.protocol.pretrain_steps, 5000);
        assert_eq!(c.intrinsic.kind, IntrinsicKind::Icm);
        assert_ne!(c.hash(), base.hash());
        let bad = base.with_env(vec![("LATENTDRIVE__WM__NOPE".to_string(), "1".to_string())]);
        assert!(bad.is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml_str("[ac]\ngamma = 1.0\n").is_err());
        assert!(Config::from_toml_str("[intrinsic]\nensemble_size = 1\n").is_err());
        assert!(Config::from_toml_str("[eval]\ndensities = [7]\n").is_err());
    }

    #[test]
    fn paper_scale_switches_budgets() {
        let c = Config::default().paper_scale();
        assert_eq!((c.protocol.pretrain_steps, c.protocol.finetune_steps), (500_000, 10_000));
        assert_eq!(c.eval.episodes, 50);
        assert_eq!(c.protocol.density_period, 10_000);
    }
}
