//! Actor-critic trained on imagined latent rollouts.
//!
//! The actor is updated with REINFORCE against a learned baseline plus an
//! entropy bonus; the critic regresses discounted bootstrapped returns.
//! Neither ever binds world-model parameters.

use latentdrive_autodiff::ops::one_hot;
use latentdrive_autodiff::{sample_index, softmax_in_place, Adam, AdamConfig, ParameterSet, SeededRng, Tape};

use crate::config::{AcConfig, ActionMode};
use crate::intrinsic::Intrinsic;
use crate::nn::{self, add_mlp, constant, mlp};
use crate::world_model::{Latent, WorldModel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Explore,
    Task,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Explore => "explore",
            Role::Task => "task",
        }
    }
}

/// `n` rollouts of `horizon` steps. Feature rows are ordered `t * n + i`
/// with `horizon + 1` time slices; the rest have `horizon` slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub role: Role,
    pub n: usize,
    pub horizon: usize,
    pub feat: usize,
    pub feats: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub conts: Vec<f64>,
}

/// A latent environment the actor can be rolled out in.
pub trait Imagination {
    fn role(&self) -> Role;
    fn feature_dim(&self) -> usize;
    fn step(&mut self, feats: &[f64], actions: &[usize], rng: &mut SeededRng) -> Result<Vec<f64>>;
    fn reward(&mut self, feats: &[f64], actions: &[usize], next: &[f64]) -> Result<Vec<f64>>;
    fn continuation(&mut self, next: &[f64], n: usize) -> Result<Vec<f64>>;
}

/// Where imagined rewards come from.
pub enum RewardSource<'a> {
    Intrinsic(&'a Intrinsic),
    TaskHead,
}

/// Prior rollouts through a world model.
pub struct WorldImagination<'a> {
    pub wm: &'a WorldModel,
    pub source: RewardSource<'a>,
}

impl Imagination for WorldImagination<'_> {
    fn role(&self) -> Role {
        match self.source {
            RewardSource::Intrinsic(_) => Role::Explore,
            RewardSource::TaskHead => Role::Task,
        }
    }

    fn feature_dim(&self) -> usize {
        self.wm.feature_dim()
    }

    fn step(&mut self, feats: &[f64], actions: &[usize], rng: &mut SeededRng) -> Result<Vec<f64>> {
        let prev = Latent::from_features(feats, actions.len(), &self.wm.cfg);
        Ok(self.wm.imagine_step(&prev, actions, rng)?.features())
    }

    fn reward(&mut self, feats: &[f64], actions: &[usize], next: &[f64]) -> Result<Vec<f64>> {
        match self.source {
            RewardSource::Intrinsic(m) => m.imagined_reward(feats, actions, next),
            RewardSource::TaskHead => self.wm.reward(next, actions.len()),
        }
    }

    fn continuation(&mut self, next: &[f64], n: usize) -> Result<Vec<f64>> {
        self.wm.continuation(next, n)
    }
}

/// `G_t = r_t + gamma * c_t * G_{t+1}` backwards from `G_H = bootstrap`.
/// All slices are time-major with `n` entries per step.
pub fn compute_returns(rewards: &[f64], conts: &[f64], bootstrap: &[f64], gamma: f64, n: usize) -> Vec<f64> {
    let horizon = rewards.len() / n.max(1);
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap.to_vec();
    for t in (0..horizon).rev() {
        for i in 0..n {
            let k = t * n + i;
            next[i] = rewards[k] + gamma * conts[k] * next[i];
            out[k] = next[i];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AcStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub return_mean: f64,
    pub value_mean: f64,
    pub reward_mean: f64,
}

pub struct ActorCritic {
    pub role: Role,
    pub cfg: AcConfig,
    pub actor: ParameterSet,
    pub critic: ParameterSet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    feat: usize,
    actions: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl ActorCritic {
    pub fn new(role: Role, feat: usize, actions: usize, cfg: &AcConfig, rng: &mut SeededRng) -> Self {
        let h = cfg.hidden;
        let mut actor = ParameterSet::new();
        add_mlp(&mut actor, "actor", &[feat, h, h, actions], true, rng);
        let mut critic = ParameterSet::new();
        add_mlp(&mut critic, "critic", &[feat, h, h, 1], true, rng);
        Self {
            role,
            cfg: cfg.clone(),
            actor,
            critic,
            actor_opt: Adam::new(AdamConfig { lr: cfg.actor_lr, clip_norm: cfg.clip_norm, ..AdamConfig::default() }),
            critic_opt: Adam::new(AdamConfig { lr: cfg.critic_lr, clip_norm: cfg.clip_norm, ..AdamConfig::default() }),
            feat,
            actions,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feat
    }

    pub fn num_actions(&self) -> usize {
        self.actions
    }

    /// Action probabilities `[n, actions]`.
    pub fn probs(&self, feats: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.actor.bind_constant(&mut tape);
        let x = constant(&mut tape, n, self.feat, feats.to_vec())?;
        let logits = mlp(&mut tape, &p, "actor", 3, x)?;
        let mut out = tape.value(logits).to_vec();
        for row in out.chunks_mut(self.actions) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("policy logits are not finite".into()));
            }
            softmax_in_place(row);
        }
        Ok(out)
    }

    pub fn values(&self, feats: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.critic.bind_constant(&mut tape);
        let x = constant(&mut tape, n, self.feat, feats.to_vec())?;
        let v = mlp(&mut tape, &p, "critic", 3, x)?;
        Ok(tape.value(v).to_vec())
    }

    pub fn act(&self, feats: &[f64], mode: ActionMode, rng: &mut SeededRng) -> Result<usize> {
        let p = self.probs(feats, 1)?;
        Ok(match mode {
            ActionMode::Sample => sample_index(&p, rng),
            ActionMode::Greedy => p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best }),
        })
    }

    pub fn sample_actions(&self, feats: &[f64], n: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
        let p = self.probs(feats, n)?;
        Ok(p.chunks(self.actions).map(|row| sample_index(row, rng)).collect())
    }

    /// Rolls the policy out for `horizon` steps from `n` start features.
    pub fn imagine<M: Imagination>(&self, model: &mut M, starts: &[f64], n: usize, rng: &mut SeededRng) -> Result<Trajectory> {
        if model.role() != self.role {
            return Err(Error::Contract(format!("{} policy rolled out with {} rewards", self.role.name(), model.role().name())));
        }
        if model.feature_dim() != self.feat || starts.len() != n * self.feat {
            return Err(Error::Contract("start features do not match the policy input".into()));
        }
        let horizon = self.cfg.horizon;
        let mut traj = Trajectory {
            role: self.role,
            n,
            horizon,
            feat: self.feat,
            feats: Vec::with_capacity((horizon + 1) * n * self.feat),
            actions: Vec::with_capacity(horizon * n),
            rewards: Vec::with_capacity(horizon * n),
            conts: Vec::with_capacity(horizon * n),
        };
        traj.feats.extend_from_slice(starts);
        let mut cur = starts.to_vec();
        for _ in 0..horizon {
            let a = self.sample_actions(&cur, n, rng)?;
            let next = model.step(&cur, &a, rng)?;
            let r = model.reward(&cur, &a, &next)?;
            let c = model.continuation(&next, n)?;
            traj.actions.extend_from_slice(&a);
            traj.rewards.extend(r);
            traj.conts.extend(c);
            traj.feats.extend_from_slice(&next);
            cur = next;
        }
        Ok(traj)
    }

    /// One actor step and one critic step on a trajectory.
    pub fn update(&mut self, traj: &Trajectory) -> Result<AcStats> {
        if traj.role != self.role {
            return Err(Error::Contract(format!(
                "{} actor-critic updated on a {} trajectory",
                self.role.name(),
                traj.role.name()
            )));
        }
        if self.actor.is_frozen() || self.critic.is_frozen() {
            return Err(Error::Contract(format!("{} actor-critic update while frozen", self.role.name())));
        }
        let (n, h) = (traj.n, traj.horizon);
        let rows = n * h;
        let all_values = self.values(&traj.feats, (h + 1) * n)?;
        let returns = compute_returns(&traj.rewards, &traj.conts, &all_values[h * n..], self.cfg.gamma, n);
        let baseline = &all_values[..rows];
        let adv: Vec<f64> = returns.iter().zip(baseline).map(|(g, v)| g - v).collect();
        let x = &traj.feats[..rows * self.feat];

        let mut tape = Tape::new();
        let p = self.actor.bind(&mut tape);
        let xv = constant(&mut tape, rows, self.feat, x.to_vec())?;
        let logits = mlp(&mut tape, &p, "actor", 3, xv)?;
        let logp = tape.log_softmax(logits)?;
        let mask = constant(&mut tape, rows, self.actions, one_hot(&traj.actions, self.actions))?;
        let picked = tape.mul(logp, mask)?;
        let picked = tape.sum_last(picked);
        let adv_v = tape.constant_from(&[rows], adv.clone())?;
        let pg = tape.mul(picked, adv_v)?;
        let pg = tape.mean(pg);
        let probs = tape.exp(logp);
        let plogp = tape.mul(probs, logp)?;
        let neg_ent = tape.sum_last(plogp);
        let neg_ent = tape.mean(neg_ent);
        let entropy = -tape.item(neg_ent);
        let pg_term = tape.neg(pg);
        let ent_term = tape.scale(neg_ent, self.cfg.entropy);
        let actor_loss = tape.add(pg_term, ent_term)?;
        let actor_value = nn::check_finite("actor loss", tape.item(actor_loss))?;
        let mut g = tape.backward(actor_loss)?;
        self.actor.accumulate(&p, &mut g);
        self.actor_opt.step(&mut self.actor)?;

        let mut tape = Tape::new();
        let p = self.critic.bind(&mut tape);
        let xv = constant(&mut tape, rows, self.feat, x.to_vec())?;
        let v = mlp(&mut tape, &p, "critic", 3, xv)?;
        let target = constant(&mut tape, rows, 1, returns.clone())?;
        let d = tape.sub(v, target)?;
        let sq = tape.square(d);
        let m = tape.mean(sq);
        let critic_loss = tape.scale(m, 0.5);
        let critic_value = nn::check_finite("critic loss", tape.item(critic_loss))?;
        let mut g = tape.backward(critic_loss)?;
        self.critic.accumulate(&p, &mut g);
        self.critic_opt.step(&mut self.critic)?;

        Ok(AcStats {
            actor_loss: actor_value,
            critic_loss: critic_value,
            entropy,
            return_mean: mean(&returns),
            value_mean: mean(baseline),
            reward_mean: mean(&traj.rewards),
        })
    }

    /// Copies actor and critic weights from `other`, keeping this role.
    pub fn copy_from(&mut self, other: &ActorCritic) -> Result<()> {
        self.actor.copy_values_from(&other.actor)?;
        self.critic.copy_values_from(&other.critic)?;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.actor.freeze();
        self.critic.freeze();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentdrive_autodiff::seeded;

    /// Features never change; action 0 pays 1, anything else 0.
    struct Bandit {
        feats: Vec<f64>,
        cont: f64,
        role: Role,
    }

    impl Imagination for Bandit {
        fn role(&self) -> Role {
            self.role
        }
        fn feature_dim(&self) -> usize {
            self.feats.len()
        }
        fn step(&mut self, _: &[f64], actions: &[usize], _: &mut SeededRng) -> Result<Vec<f64>> {
            Ok(self.feats.repeat(actions.len()))
        }
        fn reward(&mut self, _: &[f64], actions: &[usize], _: &[f64]) -> Result<Vec<f64>> {
            Ok(actions.iter().map(|&a| if a == 0 { 1.0 } else { 0.0 }).collect())
        }
        fn continuation(&mut self, _: &[f64], n: usize) -> Result<Vec<f64>> {
            Ok(vec![self.cont; n])
        }
    }

    fn cfg(horizon: usize) -> AcConfig {
        AcConfig { horizon, hidden: 16, ..AcConfig::default() }
    }

    #[test]
    fn constant_reward_discounted_sum() {
        let g = compute_returns(&[1.0; 3], &[1.0; 3], &[0.0], 0.9, 1);
        assert!((g[0] - 2.71).abs() < 1e-12);
        assert!((g[1] - 1.9).abs() < 1e-12);
        assert_eq!(g[2], 1.0);
    }

    #[test]
    fn zero_discount_and_absorbing_terminal() {
        let r = [0.5, -1.0, 2.0, 3.0];
        assert_eq!(compute_returns(&r, &[1.0; 4], &[9.0], 0.0, 1), r.to_vec());
        let g = compute_returns(&r, &[1.0, 0.0, 1.0, 1.0], &[9.0], 0.9, 1);
        assert_eq!(g[0], 0.5 + -0.9);
        assert_eq!(g[1], -1.0);
    }

    #[test]
    fn single_step_horizon_and_seeded_rollouts() {
        let mut rng = seeded(0);
        let ac = ActorCritic::new(Role::Explore, 3, 2, &cfg(1), &mut rng);
        let mut m = Bandit { feats: vec![1.0, 0.0, -1.0], cont: 1.0, role: Role::Explore };
        let starts = m.feats.repeat(4);
        let t = ac.imagine(&mut m, &starts, 4, &mut seeded(5)).unwrap();
        assert_eq!(t.actions.len(), 4);
        assert_eq!(t.feats.len(), 2 * 4 * 3);
        assert_eq!(t, ac.imagine(&mut m, &starts, 4, &mut seeded(5)).unwrap());
    }

    #[test]
    fn role_mismatch_is_a_contract_violation() {
        let mut rng = seeded(0);
        let mut ac = ActorCritic::new(Role::Task, 3, 2, &cfg(2), &mut rng);
        let mut m = Bandit { feats: vec![1.0, 0.0, -1.0], cont: 1.0, role: Role::Explore };
        let starts = m.feats.clone();
        assert!(matches!(ac.imagine(&mut m, &starts, 1, &mut rng), Err(Error::Contract(_))));
        m.role = Role::Task;
        let mut t = ac.imagine(&mut m, &starts, 1, &mut rng).unwrap();
        t.role = Role::Explore;
        assert!(matches!(ac.update(&t), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_advantage_without_entropy_leaves_the_actor() {
        let mut rng = seeded(1);
        let mut ac = ActorCritic::new(Role::Explore, 3, 2, &AcConfig { entropy: 0.0, ..cfg(2) }, &mut rng);
        let t = Trajectory {
            role: Role::Explore,
            n: 2,
            horizon: 2,
            feat: 3,
            feats: (0..18).map(|i| i as f64 * 0.1).collect(),
            actions: vec![0, 1, 1, 0],
            rewards: vec![0.0; 4],
            conts: vec![1.0; 4],
        };
        let before = ac.actor.checksum();
        ac.update(&t).unwrap();
        assert_eq!(ac.actor.checksum(), before);
    }

    #[test]
    fn critic_regresses_constant_returns() {
        let mut rng = seeded(2);
        let mut ac = ActorCritic::new(Role::Explore, 3, 2, &AcConfig { critic_lr: 1e-3, ..cfg(1) }, &mut rng);
        let mut m = Bandit { feats: vec![0.3, -0.2, 0.9], cont: 0.0, role: Role::Explore };
        let starts = m.feats.repeat(8);
        for _ in 0..1500 {
            let mut t = ac.imagine(&mut m, &starts, 8, &mut rng).unwrap();
            t.rewards.iter_mut().for_each(|r| *r = 1.0);
            ac.update(&t).unwrap();
        }
        let v = ac.values(&m.feats, 1).unwrap()[0];
        assert!((v - 1.0).abs() < 0.01, "{v}");
    }
}
