//! Intrinsic rewards on latent features `u = [h; s]`: ensemble disagreement
//! over next-state predictions, ICM forward-model error, and RND
//! distillation error, plus the running normalizer used by the latter two.

use latentdrive_autodiff::ops::{one_hot, soft_cross_entropy_rows, softmax_categorical};
use latentdrive_autodiff::{derive_seed, seeded, Adam, AdamConfig, ParameterSet, Tape, Var};
use latentdrive_sim::NUM_ACTIONS;

use crate::config::{IntrinsicConfig, IntrinsicKind};
use crate::nn::{self, add_mlp, constant, mlp};
use crate::world_model::SequenceFeatures;
use crate::{Error, Result};

/// Exponential running mean and variance of a scalar signal.
///
/// `normalize` first moves the mean, then the variance around the new
/// mean, and scales with the updated statistics. `apply` only reads them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub var: f64,
    pub rate: f64,
    pub eps: f64,
}

impl Normalizer {
    pub fn new(rate: f64, eps: f64) -> Self {
        Self { mean: 0.0, var: 1.0, rate, eps }
    }

    pub fn normalize(&mut self, g: f64) -> f64 {
        let r = self.rate;
        self.mean = (1.0 - r) * self.mean + r * g;
        let d = g - self.mean;
        self.var = (1.0 - r) * self.var + r * d * d;
        self.apply(g)
    }

    pub fn apply(&self, g: f64) -> f64 {
        (g - self.mean) / (self.var.sqrt() + self.eps)
    }
}

/// Mean over dimensions of the population variance across members.
/// `preds[k]` holds member `k`'s output for one input. Deviations are
/// taken from the first member so identical members give exactly zero.
pub fn disagreement(preds: &[&[f64]]) -> f64 {
    let k = preds.len() as f64;
    let d = preds[0].len();
    let mut total = 0.0;
    for i in 0..d {
        let x0 = preds[0][i];
        let (mut s, mut s2) = (0.0, 0.0);
        for p in preds {
            let dx = p[i] - x0;
            s += dx;
            s2 += dx * dx;
        }
        let m = s / k;
        total += (s2 / k - m * m).max(0.0);
    }
    total / d as f64
}

fn input_rows(u: &[f64], feat: usize, actions: &[usize]) -> Vec<f64> {
    let a = one_hot(actions, NUM_ACTIONS);
    nn::hcat(u, feat, &a, NUM_ACTIONS)
}

fn adam(lr: f64) -> Adam {
    Adam::new(AdamConfig::with_lr(lr))
}

/// `K` independently initialised predictors of the next posterior.
pub struct Ensemble {
    pub members: Vec<ParameterSet>,
    pub(crate) opts: Vec<Adam>,
    feat: usize,
    classes: usize,
    out: usize,
}

impl Ensemble {
    pub fn new(k: usize, feat: usize, vars: usize, classes: usize, hidden: usize, lr: f64, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("an ensemble needs at least 2 members, got {k}")));
        }
        let out = vars * classes;
        let members = (0..k)
            .map(|i| {
                let mut set = ParameterSet::new();
                let mut rng = seeded(derive_seed(seed, &[i as u64]));
                add_mlp(&mut set, "net", &[feat + NUM_ACTIONS, hidden, hidden, out], false, &mut rng);
                set
            })
            .collect();
        Ok(Self { members, opts: (0..k).map(|_| adam(lr)).collect(), feat, classes, out })
    }

    fn forward(&self, tape: &mut Tape, set: &ParameterSet, x: Var, train: bool) -> Result<(Var, latentdrive_autodiff::Bound)> {
        let p = if train { set.bind(tape) } else { set.bind_constant(tape) };
        let logits = mlp(tape, &p, "net", 3, x)?;
        Ok((logits, p))
    }

    /// Member probabilities, `[K][n * vars * classes]`.
    pub fn predict(&self, u: &[f64], actions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let n = actions.len();
        let x = input_rows(u, self.feat, actions);
        self.members
            .iter()
            .map(|m| {
                let mut tape = Tape::new();
                let xv = constant(&mut tape, n, self.feat + NUM_ACTIONS, x.clone())?;
                let (logits, _) = self.forward(&mut tape, m, xv, false)?;
                let probs = softmax_categorical(&mut tape, logits, self.classes)?;
                Ok(tape.value(probs).to_vec())
            })
            .collect()
    }

    pub fn reward(&self, u: &[f64], actions: &[usize]) -> Result<Vec<f64>> {
        let preds = self.predict(u, actions)?;
        Ok((0..actions.len())
            .map(|r| {
                let rows: Vec<&[f64]> = preds.iter().map(|p| &p[r * self.out..(r + 1) * self.out]).collect();
                disagreement(&rows)
            })
            .collect())
    }

    /// One step per member on cross-entropy to the detached targets;
    /// returns the mean member loss.
    pub fn train(&mut self, u: &[f64], actions: &[usize], targets: &[f64]) -> Result<f64> {
        let n = actions.len();
        let x = input_rows(u, self.feat, actions);
        let mut total = 0.0;
        for (m, opt) in self.members.iter_mut().zip(&mut self.opts) {
            let mut tape = Tape::new();
            let xv = constant(&mut tape, n, self.feat + NUM_ACTIONS, x.clone())?;
            let p = m.bind(&mut tape);
            let logits = mlp(&mut tape, &p, "net", 3, xv)?;
            let t = constant(&mut tape, n, self.out, targets.to_vec())?;
            let ce = soft_cross_entropy_rows(&mut tape, logits, t, self.classes)?;
            let s = tape.sum(ce);
            let loss = tape.scale(s, 1.0 / n as f64);
            total += nn::check_finite("ensemble loss", tape.item(loss))?;
            let mut g = tape.backward(loss)?;
            m.accumulate(&p, &mut g);
            opt.step(m)?;
        }
        Ok(total / self.members.len() as f64)
    }
}

/// Inverse model `(u_t, u_{t+1}) -> a_t` and forward model `(u_t, a_t) -> u_{t+1}`.
pub struct Icm {
    pub inverse: ParameterSet,
    pub forward: ParameterSet,
    pub(crate) inv_opt: Adam,
    pub(crate) fwd_opt: Adam,
    pub eta: f64,
    pub norm: Normalizer,
    feat: usize,
}

pub struct IcmTerms {
    pub inverse: Vec<f64>,
    pub forward: Vec<f64>,
}

impl Icm {
    pub fn new(feat: usize, hidden: usize, eta: f64, norm: Normalizer, lr: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut inverse = ParameterSet::new();
        add_mlp(&mut inverse, "inv", &[2 * feat, hidden, NUM_ACTIONS], false, &mut rng);
        let mut forward = ParameterSet::new();
        add_mlp(&mut forward, "fwd", &[feat + NUM_ACTIONS, hidden, feat], false, &mut rng);
        Self { inverse, forward, inv_opt: adam(lr), fwd_opt: adam(lr), eta, norm, feat }
    }

    fn terms_on(
        &self,
        tape: &mut Tape,
        train: bool,
        u: &[f64],
        a: &[usize],
        next: &[f64],
    ) -> Result<(Var, Var, [latentdrive_autodiff::Bound; 2])> {
        let n = a.len();
        let pi = if train { self.inverse.bind(tape) } else { self.inverse.bind_constant(tape) };
        let pf = if train { self.forward.bind(tape) } else { self.forward.bind_constant(tape) };
        let pair = constant(tape, n, 2 * self.feat, nn::hcat(u, self.feat, next, self.feat))?;
        let logits = mlp(tape, &pi, "inv", 2, pair)?;
        let target = constant(tape, n, NUM_ACTIONS, one_hot(a, NUM_ACTIONS))?;
        let l_inv = soft_cross_entropy_rows(tape, logits, target, NUM_ACTIONS)?;
        let x = constant(tape, n, self.feat + NUM_ACTIONS, input_rows(u, self.feat, a))?;
        let pred = mlp(tape, &pf, "fwd", 2, x)?;
        let nv = constant(tape, n, self.feat, next.to_vec())?;
        let d = tape.sub(pred, nv)?;
        let sq = tape.square(d);
        let l_fwd = tape.sum_last(sq);
        Ok((l_inv, l_fwd, [pi, pf]))
    }

    /// Per-row inverse cross-entropy and squared forward error.
    pub fn terms(&self, u: &[f64], a: &[usize], next: &[f64]) -> Result<IcmTerms> {
        let mut tape = Tape::new();
        let (li, lf, _) = self.terms_on(&mut tape, false, u, a, next)?;
        Ok(IcmTerms { inverse: tape.value(li).to_vec(), forward: tape.value(lf).to_vec() })
    }

    /// `eta * Norm(L_fwd)` reading the normalizer without updating it.
    pub fn reward(&self, u: &[f64], a: &[usize], next: &[f64]) -> Result<Vec<f64>> {
        let t = self.terms(u, a, next)?;
        Ok(t.forward.iter().map(|&l| self.eta * self.norm.apply(l)).collect())
    }

    /// Trains both models on the batch; returns `(L_inv, L_fwd, rewards)`
    /// where the rewards advance the normalizer in row order.
    pub fn train(&mut self, u: &[f64], a: &[usize], next: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
        let n = a.len() as f64;
        let mut tape = Tape::new();
        let (li, lf, [pi, pf]) = self.terms_on(&mut tape, true, u, a, next)?;
        let rewards: Vec<f64> = tape.value(lf).to_vec().into_iter().map(|l| self.eta * self.norm.normalize(l)).collect();
        let si = tape.sum(li);
        let sf = tape.sum(lf);
        let mi = tape.scale(si, 1.0 / n);
        let mf = tape.scale(sf, 1.0 / n);
        let (vi, vf) = (tape.item(mi), tape.item(mf));
        let loss = tape.add(mi, mf)?;
        nn::check_finite("icm loss", tape.item(loss))?;
        let mut g = tape.backward(loss)?;
        self.inverse.accumulate(&pi, &mut g);
        self.forward.accumulate(&pf, &mut g);
        self.inv_opt.step(&mut self.inverse)?;
        self.fwd_opt.step(&mut self.forward)?;
        Ok((vi, vf, rewards))
    }
}

/// Frozen random target network and a trained predictor.
pub struct Rnd {
    pub target: ParameterSet,
    pub predictor: ParameterSet,
    pub(crate) opt: Adam,
    pub norm: Normalizer,
    feat: usize,
}

impl Rnd {
    pub fn new(feat: usize, hidden: usize, out: usize, norm: Normalizer, lr: f64, seed: u64) -> Self {
        let mut target = ParameterSet::new();
        add_mlp(&mut target, "net", &[feat, hidden, out], false, &mut seeded(derive_seed(seed, &[0])));
        target.freeze();
        let mut predictor = ParameterSet::new();
        add_mlp(&mut predictor, "net", &[feat, hidden, out], false, &mut seeded(derive_seed(seed, &[1])));
        Self { target, predictor, opt: adam(lr), norm, feat }
    }

    pub fn target_output(&self, u: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.target.bind(&mut tape);
        let x = constant(&mut tape, n, self.feat, u.to_vec())?;
        let y = mlp(&mut tape, &p, "net", 2, x)?;
        Ok(tape.value(y).to_vec())
    }

    fn error_on(&self, tape: &mut Tape, train: bool, u: &[f64], n: usize) -> Result<(Var, latentdrive_autodiff::Bound)> {
        let pt = self.target.bind(tape);
        let pp = if train { self.predictor.bind(tape) } else { self.predictor.bind_constant(tape) };
        let x = constant(tape, n, self.feat, u.to_vec())?;
        let f = mlp(tape, &pt, "net", 2, x)?;
        let p = mlp(tape, &pp, "net", 2, x)?;
        let d = tape.sub(p, f)?;
        let sq = tape.square(d);
        Ok((tape.sum_last(sq), pp))
    }

    /// Squared distillation error per row.
    pub fn error(&self, u: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (e, _) = self.error_on(&mut tape, false, u, n)?;
        Ok(tape.value(e).to_vec())
    }

    pub fn reward(&self, u: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.error(u, n)?.into_iter().map(|l| self.norm.apply(l)).collect())
    }

    /// One predictor step; returns the mean error and the normalized
    /// rewards, advancing the normalizer in row order.
    pub fn train(&mut self, u: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (e, pp) = self.error_on(&mut tape, true, u, n)?;
        let rewards: Vec<f64> = tape.value(e).to_vec().into_iter().map(|l| self.norm.normalize(l)).collect();
        let s = tape.sum(e);
        let loss = tape.scale(s, 1.0 / n as f64);
        let v = nn::check_finite("rnd loss", tape.item(loss))?;
        let mut g = tape.backward(loss)?;
        self.predictor.accumulate(&pp, &mut g);
        self.opt.step(&mut self.predictor)?;
        Ok((v, rewards))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IntrinsicStats {
    pub loss: f64,
    /// Mean reward on the real batch, as the policy would receive it.
    pub reward_mean: f64,
    /// Mean of the signal before normalization.
    pub signal_mean: f64,
}

pub enum Intrinsic {
    Disagreement(Ensemble),
    Icm(Icm),
    Rnd(Rnd),
    None,
}

/// Real transitions gathered from a replayed batch.
pub struct PairBatch {
    pub u: Vec<f64>,
    pub actions: Vec<usize>,
    pub next: Vec<f64>,
    pub next_posterior: Vec<f64>,
}

impl PairBatch {
    pub fn from_features(f: &SequenceFeatures) -> Self {
        let feat = f.feats.len() / f.rows();
        let d = f.posterior.len() / f.rows();
        let pairs = f.pairs();
        let mut out = PairBatch {
            u: Vec::with_capacity(pairs.len() * feat),
            actions: Vec::with_capacity(pairs.len()),
            next: Vec::with_capacity(pairs.len() * feat),
            next_posterior: Vec::with_capacity(pairs.len() * d),
        };
        for (r0, r1, a) in pairs {
            out.u.extend_from_slice(&f.feats[r0 * feat..(r0 + 1) * feat]);
            out.next.extend_from_slice(&f.feats[r1 * feat..(r1 + 1) * feat]);
            out.next_posterior.extend_from_slice(&f.posterior[r1 * d..(r1 + 1) * d]);
            out.actions.push(a);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Intrinsic {
    pub fn new(cfg: &IntrinsicConfig, feat: usize, vars: usize, classes: usize, seed: u64) -> Result<Self> {
        let norm = Normalizer::new(cfg.norm_rate, cfg.norm_eps);
        Ok(match cfg.kind {
            IntrinsicKind::Disagreement => {
                Intrinsic::Disagreement(Ensemble::new(cfg.ensemble_size, feat, vars, classes, cfg.hidden, cfg.lr, seed)?)
            }
            IntrinsicKind::Icm => Intrinsic::Icm(Icm::new(feat, cfg.hidden, cfg.icm_eta, norm, cfg.lr, seed)),
            IntrinsicKind::Rnd => Intrinsic::Rnd(Rnd::new(feat, cfg.hidden, cfg.rnd_out, norm, cfg.lr, seed)),
            IntrinsicKind::None => Intrinsic::None,
        })
    }

    pub fn kind(&self) -> IntrinsicKind {
        match self {
            Intrinsic::Disagreement(_) => IntrinsicKind::Disagreement,
            Intrinsic::Icm(_) => IntrinsicKind::Icm,
            Intrinsic::Rnd(_) => IntrinsicKind::Rnd,
            Intrinsic::None => IntrinsicKind::None,
        }
    }

    /// One update on real replayed pairs.
    pub fn train(&mut self, batch: &PairBatch) -> Result<IntrinsicStats> {
        if batch.is_empty() {
            return Ok(IntrinsicStats::default());
        }
        if self.is_frozen() {
            return Err(Error::Contract("intrinsic module update while frozen".into()));
        }
        let n = batch.len();
        Ok(match self {
            Intrinsic::Disagreement(e) => {
                let r = e.reward(&batch.u, &batch.actions)?;
                let loss = e.train(&batch.u, &batch.actions, &batch.next_posterior)?;
                IntrinsicStats { loss, reward_mean: mean(&r), signal_mean: mean(&r) }
            }
            Intrinsic::Icm(m) => {
                let (li, lf, r) = m.train(&batch.u, &batch.actions, &batch.next)?;
                IntrinsicStats { loss: li + lf, reward_mean: mean(&r), signal_mean: lf }
            }
            Intrinsic::Rnd(m) => {
                let (l, r) = m.train(&batch.next, n)?;
                IntrinsicStats { loss: l, reward_mean: mean(&r), signal_mean: l }
            }
            Intrinsic::None => IntrinsicStats::default(),
        })
    }

    /// Reward for imagined transitions `(u_t, a_t) -> u_{t+1}`; never
    /// touches the normalizer.
    pub fn imagined_reward(&self, u: &[f64], actions: &[usize], next: &[f64]) -> Result<Vec<f64>> {
        match self {
            Intrinsic::Disagreement(e) => e.reward(u, actions),
            Intrinsic::Icm(m) => m.reward(u, actions, next),
            Intrinsic::Rnd(m) => m.reward(next, actions.len()),
            Intrinsic::None => Err(Error::Contract("no intrinsic module configured".into())),
        }
    }

    /// Named parameter sets, including the RND target.
    pub fn sets(&self) -> Vec<(String, &ParameterSet)> {
        match self {
            Intrinsic::Disagreement(e) => {
                e.members.iter().enumerate().map(|(i, m)| (format!("intrinsic.member{i}"), m)).collect()
            }
            Intrinsic::Icm(m) => vec![("intrinsic.inverse".into(), &m.inverse), ("intrinsic.forward".into(), &m.forward)],
            Intrinsic::Rnd(m) => vec![("intrinsic.target".into(), &m.target), ("intrinsic.predictor".into(), &m.predictor)],
            Intrinsic::None => Vec::new(),
        }
    }

    pub fn sets_mut(&mut self) -> Vec<(String, &mut ParameterSet)> {
        match self {
            Intrinsic::Disagreement(e) => {
                e.members.iter_mut().enumerate().map(|(i, m)| (format!("intrinsic.member{i}"), m)).collect()
            }
            Intrinsic::Icm(m) => vec![("intrinsic.inverse".into(), &mut m.inverse), ("intrinsic.forward".into(), &mut m.forward)],
            Intrinsic::Rnd(m) => {
                vec![("intrinsic.target".into(), &mut m.target), ("intrinsic.predictor".into(), &mut m.predictor)]
            }
            Intrinsic::None => Vec::new(),
        }
    }

    pub fn freeze(&mut self) {
        for (_, s) in self.sets_mut() {
            s.freeze();
        }
    }

    pub fn is_frozen(&self) -> bool {
        let sets = self.sets();
        !sets.is_empty() && sets.iter().filter(|(n, _)| n != "intrinsic.target").all(|(_, s)| s.is_frozen())
    }

    /// Optimizers keyed like [`Intrinsic::sets`]; the RND target has none.
    pub fn optimizers(&self) -> Vec<(String, &Adam)> {
        match self {
            Intrinsic::Disagreement(e) => e.opts.iter().enumerate().map(|(i, o)| (format!("intrinsic.member{i}"), o)).collect(),
            Intrinsic::Icm(m) => vec![("intrinsic.inverse".into(), &m.inv_opt), ("intrinsic.forward".into(), &m.fwd_opt)],
            Intrinsic::Rnd(m) => vec![("intrinsic.predictor".into(), &m.opt)],
            Intrinsic::None => Vec::new(),
        }
    }

    pub fn optimizers_mut(&mut self) -> Vec<(String, &mut Adam)> {
        match self {
            Intrinsic::Disagreement(e) => {
                e.opts.iter_mut().enumerate().map(|(i, o)| (format!("intrinsic.member{i}"), o)).collect()
            }
            Intrinsic::Icm(m) => vec![("intrinsic.inverse".into(), &mut m.inv_opt), ("intrinsic.forward".into(), &mut m.fwd_opt)],
            Intrinsic::Rnd(m) => vec![("intrinsic.predictor".into(), &mut m.opt)],
            Intrinsic::None => Vec::new(),
        }
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        match self {
            Intrinsic::Icm(m) => Some(&m.norm),
            Intrinsic::Rnd(m) => Some(&m.norm),
            _ => None,
        }
    }

    pub fn normalizer_mut(&mut self) -> Option<&mut Normalizer> {
        match self {
            Intrinsic::Icm(m) => Some(&mut m.norm),
            Intrinsic::Rnd(m) => Some(&mut m.norm),
            _ => None,
        }
    }
}
