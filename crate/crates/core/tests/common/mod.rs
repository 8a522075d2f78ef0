#![allow(dead_code)]

use latentdrive::config::{AcConfig, WmConfig};
use latentdrive::imagination::{ActorCritic, Imagination, Role};
use latentdrive::intrinsic::Ensemble;
use latentdrive::replay::Transition;
use latentdrive::world_model::WorldModel;
use latentdrive::Result;
use latentdrive_autodiff::{seeded, SeededRng};
use latentdrive_sim::{Action, RouteId, RouteSpec, Scenario, SimConfig, Simulator, TownId, NUM_ACTIONS};
use rand::Rng;

/// Cruising along the Town-A straight route; the route is long enough that
/// no terminal occurs within `len` steps for `len <= 140`.
pub fn fixed_episode(len: usize) -> Vec<Transition> {
    let mut sim = Simulator::new(SimConfig::default()).unwrap();
    let obs = sim
        .reset(&Scenario {
            town: TownId::A,
            route: Some(RouteSpec::builtin(TownId::A, RouteId::Straight).clone()),
            density: 0,
            tm_seed: 3,
            spawn_seed: 4,
        })
        .unwrap();
    let mut out = vec![Transition { obs: obs.data, prev_action: None, reward: None, cont: true, first: true }];
    while out.len() < len {
        let r = sim.step(Action::CRUISE).unwrap();
        assert!(!r.terminal, "fixed episode ended after {} steps ({:?})", out.len(), r.cause);
        out.push(Transition {
            obs: r.observation.data,
            prev_action: Some(Action::CRUISE.index()),
            reward: None,
            cont: true,
            first: false,
        });
    }
    out
}

/// Reconstruction loss before and after `updates` steps on one fixed
/// 100-step episode.
pub fn overfit_world_model(updates: usize, seed: u64) -> (f64, f64) {
    let ep = fixed_episode(100);
    let cfg = WmConfig::default();
    let mut rng = seeded(seed);
    let mut wm = WorldModel::new(&cfg, SimConfig::default().obs_size, &mut rng).unwrap();
    let batch = [ep.as_slice()];
    let first = wm.evaluate_loss(&batch, &mut seeded(seed + 1)).unwrap().recon;
    for _ in 0..updates {
        wm.train_step(&batch, &mut rng).unwrap();
    }
    let last = wm.evaluate_loss(&batch, &mut seeded(seed + 1)).unwrap().recon;
    (first, last)
}

/// Latent state never changes; action 0 pays 1 and action 1 pays 0.
pub struct Bandit {
    pub feats: Vec<f64>,
}

impl Imagination for Bandit {
    fn role(&self) -> Role {
        Role::Explore
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
        Ok(vec![0.0; n])
    }
}

/// Probability of the paying arm after `updates` actor-critic updates.
pub fn bandit_preference(updates: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let cfg = AcConfig { horizon: 1, hidden: 32, ..AcConfig::default() };
    let mut ac = ActorCritic::new(Role::Explore, 4, 2, &cfg, &mut rng);
    let mut m = Bandit { feats: vec![0.5, -0.5, 1.0, 0.0] };
    let starts = m.feats.repeat(16);
    for _ in 0..updates {
        let t = ac.imagine(&mut m, &starts, 16, &mut rng).unwrap();
        ac.update(&t).unwrap();
    }
    ac.probs(&m.feats, 1).unwrap()[0]
}

/// Two-state toy: state `s` in {0, 1}, action `a` in {0, 1}, next state
/// `s xor a` when deterministic, a fair coin otherwise.
pub struct Toy {
    pub deterministic: bool,
}

impl Toy {
    pub const FEAT: usize = 2;

    pub fn batch(&self, n: usize, rng: &mut SeededRng) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
        let (mut u, mut a, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let s = rng.gen_range(0..2usize);
            let act = rng.gen_range(0..2usize);
            let next = if self.deterministic { s ^ act } else { rng.gen_range(0..2usize) };
            u.extend(if s == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
            a.push(act);
            t.extend(if next == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
        (u, a, t)
    }

    /// Every state-action pair once.
    pub fn all_pairs() -> (Vec<f64>, Vec<usize>) {
        let mut u = Vec::new();
        let mut a = Vec::new();
        for s in 0..2 {
            for act in 0..2 {
                u.extend(if s == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
                a.push(act);
            }
        }
        (u, a)
    }
}

/// Largest disagreement over the toy's state-action pairs after training a
/// `k`-member ensemble for `steps` batches.
pub fn toy_disagreement(deterministic: bool, k: usize, steps: usize, seed: u64) -> f64 {
    let toy = Toy { deterministic };
    let mut ens = Ensemble::new(k, Toy::FEAT, 1, 2, 32, 1e-3, seed).unwrap();
    let mut rng = seeded(seed ^ 0x5eed);
    for _ in 0..steps {
        let (u, a, t) = toy.batch(32, &mut rng);
        ens.train(&u, &a, &t).unwrap();
    }
    let (u, a) = Toy::all_pairs();
    ens.reward(&u, &a).unwrap().into_iter().fold(0.0, f64::max)
}

pub fn random_actions(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect()
}
