//! Recurrent state-space world model over semantic crops.
//!
//! The deterministic state `h` evolves with a GRU over the previous
//! stochastic state and action; `s` is `vars` one-hot categoricals drawn
//! from the posterior (observation available) or the prior (imagination).
//! The reward head lives in its own parameter set and only ever sees
//! detached features.

use latentdrive_autodiff::ops::{bce_with_logits, kl_rows, one_hot, soft_cross_entropy_rows, softmax_categorical};
use latentdrive_autodiff::{sample_index, Adam, AdamConfig, Bound, ParameterSet, SeededRng, Tape, Var};
use latentdrive_sim::{Observation, CLASS_CHANNELS, EGO_CHANNEL, NUM_ACTIONS, OBS_CHANNELS, VEHICLE_CHANNEL};

use crate::config::WmConfig;
use crate::nn::{self, add_dense, add_mlp, constant, dense, mlp};
use crate::replay::Transition;
use crate::{Error, Result};

const CONV1: (usize, usize, usize) = (16, 4, 2);
const CONV2: (usize, usize, usize) = (32, 3, 2);
const OVERLAYS: [usize; 2] = [EGO_CHANNEL, VEHICLE_CHANNEL];
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A batch of `n` latent states, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub n: usize,
    pub h: Vec<f64>,
    pub s: Vec<f64>,
}

impl Latent {
    pub fn zeros(n: usize, cfg: &WmConfig) -> Self {
        Self { n, h: vec![0.0; n * cfg.deter], s: vec![0.0; n * cfg.stoch()] }
    }

    /// `u = [h; s]` per row.
    pub fn features(&self) -> Vec<f64> {
        let dh = self.h.len() / self.n.max(1);
        let ds = self.s.len() / self.n.max(1);
        nn::hcat(&self.h, dh, &self.s, ds)
    }

    pub fn from_features(feats: &[f64], n: usize, cfg: &WmConfig) -> Self {
        let (dh, ds) = (cfg.deter, cfg.stoch());
        let mut h = Vec::with_capacity(n * dh);
        let mut s = Vec::with_capacity(n * ds);
        for row in feats.chunks(dh + ds).take(n) {
            h.extend_from_slice(&row[..dh]);
            s.extend_from_slice(&row[dh..]);
        }
        Self { n, h, s }
    }
}

/// Which distribution produced `s` in an [`RssmOutput`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Posterior,
    Prior,
}

#[derive(Clone, Debug)]
pub struct RssmOutput {
    pub latent: Latent,
    pub prior: Vec<f64>,
    pub posterior: Option<Vec<f64>>,
    pub mode: SampleMode,
}

/// Loss terms of one world-model update, each averaged over the `B x L`
/// steps of the batch. `loss = recon + beta_kl * kl_floored + cont_scale * cont`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WmDiagnostics {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub kl_floored: f64,
    pub cont: f64,
}

/// Posterior features of a replayed batch, rows ordered `t * B + b`.
#[derive(Clone, Debug)]
pub struct SequenceFeatures {
    pub batch: usize,
    pub len: usize,
    pub feats: Vec<f64>,
    pub posterior: Vec<f64>,
    pub prev_actions: Vec<Option<usize>>,
    pub rewards: Vec<Option<f64>>,
    pub conts: Vec<bool>,
}

impl SequenceFeatures {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    /// Consecutive pairs `(row_t, row_{t+1})` with the action taken between them.
    pub fn pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.batch * (self.len - 1));
        for t in 0..self.len.saturating_sub(1) {
            for b in 0..self.batch {
                let (r0, r1) = (t * self.batch + b, (t + 1) * self.batch + b);
                if let Some(a) = self.prev_actions[r1] {
                    out.push((r0, r1, a));
                }
            }
        }
        out
    }
}

pub struct WorldModel {
    pub cfg: WmConfig,
    pub obs_size: usize,
    pub params: ParameterSet,
    pub reward_head: ParameterSet,
    pub opt: Adam,
    pub reward_opt: Adam,
    reward_enabled: bool,
    conv_out: usize,
}

struct SeqVars {
    feats: Var,
    post_probs: Var,
    prior_probs: Var,
}

fn conv_side(input: usize, k: usize, stride: usize) -> Result<usize> {
    if input < k {
        return Err(Error::Config(format!("observation side {input} is smaller than kernel {k}")));
    }
    Ok((input - k) / stride + 1)
}

impl WorldModel {
    pub fn new(cfg: &WmConfig, obs_size: usize, rng: &mut SeededRng) -> Result<Self> {
        let s1 = conv_side(obs_size, CONV1.1, CONV1.2)?;
        let s2 = conv_side(s1, CONV2.1, CONV2.2)?;
        let conv_out = CONV2.0 * s2 * s2;
        let (dh, d, e, hid) = (cfg.deter, cfg.stoch(), cfg.embed, cfg.hidden);
        let u = cfg.feature_dim();
        let pixels = obs_size * obs_size;
        let mut p = ParameterSet::new();
        let conv_limit = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (c1, k1, _) = CONV1;
        p.insert_uniform("enc.conv1.w", &[c1, OBS_CHANNELS, k1, k1], conv_limit(OBS_CHANNELS * k1 * k1, c1 * k1 * k1), rng);
        p.insert_zeros("enc.conv1.b", &[c1]);
        let (c2, k2, _) = CONV2;
        p.insert_uniform("enc.conv2.w", &[c2, c1, k2, k2], conv_limit(c1 * k2 * k2, c2 * k2 * k2), rng);
        p.insert_zeros("enc.conv2.b", &[c2]);
        add_dense(&mut p, "enc.fc", conv_out, e, rng);
        p.insert_glorot("gru.wx", d + NUM_ACTIONS, 3 * dh, rng);
        p.insert_glorot("gru.wh", dh, 3 * dh, rng);
        p.insert_zeros("gru.b", &[1, 3 * dh]);
        add_mlp(&mut p, "prior", &[dh, hid, d], false, rng);
        add_mlp(&mut p, "post", &[dh + e, hid, d], false, rng);
        add_mlp(&mut p, "dec", &[u, cfg.decoder_hidden, (CLASS_CHANNELS + OVERLAYS.len()) * pixels], false, rng);
        add_mlp(&mut p, "cont", &[u, hid, 1], false, rng);
        let mut r = ParameterSet::new();
        add_mlp(&mut r, "reward", &[u, hid, 1], true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            obs_size,
            params: p,
            reward_head: r,
            opt: Adam::new(AdamConfig { lr: cfg.lr, clip_norm: cfg.clip_norm, ..AdamConfig::default() }),
            reward_opt: Adam::new(AdamConfig { lr: cfg.reward_lr, clip_norm: cfg.clip_norm, ..AdamConfig::default() }),
            reward_enabled: false,
            conv_out,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    /// Allows the task-reward path; off during reward-free pretraining.
    pub fn enable_reward(&mut self, on: bool) {
        self.reward_enabled = on;
    }

    pub fn reward_enabled(&self) -> bool {
        self.reward_enabled
    }

    fn obs_len(&self) -> usize {
        OBS_CHANNELS * self.obs_size * self.obs_size
    }

    fn check_obs(&self, obs: &[u8]) -> Result<()> {
        if obs.len() != self.obs_len() {
            return Err(Error::Contract(format!(
                "observation holds {} values, expected {OBS_CHANNELS}x{}x{}",
                obs.len(),
                self.obs_size,
                self.obs_size
            )));
        }
        Ok(())
    }

    /// Encoder graph on `tape` for raw observations, `[n, embed]`.
    pub fn encode_on(&self, tape: &mut Tape, p: &Bound, obs: &[&[u8]]) -> Result<Var> {
        let n = obs.len();
        let mut data = Vec::with_capacity(n * self.obs_len());
        for o in obs {
            self.check_obs(o)?;
            data.extend(o.iter().map(|&v| f64::from(v)));
        }
        let x = tape.constant_from(&[n, OBS_CHANNELS, self.obs_size, self.obs_size], data)?;
        let y = tape.conv2d(x, p.get("enc.conv1.w"), p.get("enc.conv1.b"), CONV1.2)?;
        let y = tape.elu(y);
        let y = tape.conv2d(y, p.get("enc.conv2.w"), p.get("enc.conv2.b"), CONV2.2)?;
        let y = tape.elu(y);
        let flat = tape.reshape(y, &[n, self.conv_out])?;
        let e = dense(tape, p, "enc.fc", flat)?;
        Ok(tape.elu(e))
    }

    /// Embeddings `[n, embed]` for a batch of observations.
    pub fn encode(&self, obs: &[&Observation]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let data: Vec<&[u8]> = obs.iter().map(|o| o.data.as_slice()).collect();
        let e = self.encode_on(&mut tape, &p, &data)?;
        Ok(tape.value(e).to_vec())
    }

    fn gru(&self, tape: &mut Tape, p: &Bound, h: Var, s: Var, a: Var) -> Result<Var> {
        let dh = self.cfg.deter;
        let x = tape.concat_cols(&[s, a])?;
        let gx = tape.matmul(x, p.get("gru.wx"))?;
        let gx = tape.add(gx, p.get("gru.b"))?;
        let gh = tape.matmul(h, p.get("gru.wh"))?;
        let (xz, xr, xn) = (tape.slice_cols(gx, 0, dh)?, tape.slice_cols(gx, dh, dh)?, tape.slice_cols(gx, 2 * dh, dh)?);
        let (hz, hr, hn) = (tape.slice_cols(gh, 0, dh)?, tape.slice_cols(gh, dh, dh)?, tape.slice_cols(gh, 2 * dh, dh)?);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, hn)?;
        let n = tape.add(xn, rh)?;
        let n = tape.tanh(n);
        // h' = n + z * (h - n) = (1 - z) * n + z * h
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        Ok(tape.add(n, zd)?)
    }

    fn head_probs(&self, tape: &mut Tape, p: &Bound, head: &str, x: Var) -> Result<Var> {
        let logits = mlp(tape, p, head, 2, x)?;
        let probs = softmax_categorical(tape, logits, self.cfg.classes)?;
        Ok(nn::unimix(tape, probs, self.cfg.unimix, self.cfg.classes))
    }

    fn action_matrix(tape: &mut Tape, actions: &[Option<usize>]) -> Result<Var> {
        let mut data = vec![0.0; actions.len() * NUM_ACTIONS];
        for (i, a) in actions.iter().enumerate() {
            if let Some(a) = a {
                if *a >= NUM_ACTIONS {
                    return Err(Error::Contract(format!("action index {a} out of range")));
                }
                data[i * NUM_ACTIONS + a] = 1.0;
            }
        }
        constant(tape, actions.len(), NUM_ACTIONS, data)
    }

    /// One transition for every row of `prev`. With `embed` present the
    /// state is drawn from the posterior, otherwise from the prior.
    pub fn rssm_step(
        &self,
        prev: &Latent,
        actions: &[Option<usize>],
        embed: Option<&[f64]>,
        rng: &mut SeededRng,
    ) -> Result<RssmOutput> {
        let n = prev.n;
        if actions.len() != n {
            return Err(Error::Contract(format!("{} actions for {n} states", actions.len())));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let h0 = constant(&mut tape, n, self.cfg.deter, prev.h.clone())?;
        let s0 = constant(&mut tape, n, self.cfg.stoch(), prev.s.clone())?;
        let a = Self::action_matrix(&mut tape, actions)?;
        let h = self.gru(&mut tape, &p, h0, s0, a)?;
        let prior = self.head_probs(&mut tape, &p, "prior", h)?;
        let (dist, posterior, mode) = match embed {
            Some(e) => {
                let e = constant(&mut tape, n, self.cfg.embed, e.to_vec())?;
                let he = tape.concat_cols(&[h, e])?;
                let post = self.head_probs(&mut tape, &p, "post", he)?;
                (post, Some(tape.value(post).to_vec()), SampleMode::Posterior)
            }
            None => (prior, None, SampleMode::Prior),
        };
        let s = self.sample(tape.value(dist), rng);
        Ok(RssmOutput { latent: Latent { n, h: tape.value(h).to_vec(), s }, prior: tape.value(prior).to_vec(), posterior, mode })
    }

    fn sample(&self, probs: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        let c = self.cfg.classes;
        let mut out = vec![0.0; probs.len()];
        for (row, o) in probs.chunks(c).zip(out.chunks_mut(c)) {
            o[sample_index(row, rng)] = 1.0;
        }
        out
    }

    /// Posterior filtering step used while acting.
    pub fn observe_step(
        &self,
        prev: &Latent,
        prev_action: Option<usize>,
        obs: &Observation,
        rng: &mut SeededRng,
    ) -> Result<Latent> {
        let e = self.encode(&[obs])?;
        let out = self.rssm_step(prev, &[prev_action], Some(&e), rng)?;
        debug_assert_eq!(out.mode, SampleMode::Posterior);
        Ok(out.latent)
    }

    /// Prior step used in imagination.
    pub fn imagine_step(&self, prev: &Latent, actions: &[usize], rng: &mut SeededRng) -> Result<Latent> {
        let acts: Vec<Option<usize>> = actions.iter().copied().map(Some).collect();
        let out = self.rssm_step(prev, &acts, None, rng)?;
        debug_assert_eq!(out.mode, SampleMode::Prior);
        Ok(out.latent)
    }

    /// Continuation probabilities for `n` feature rows.
    pub fn continuation(&self, feats: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let u = constant(&mut tape, n, self.feature_dim(), feats.to_vec())?;
        let logit = mlp(&mut tape, &p, "cont", 2, u)?;
        let prob = tape.sigmoid(logit);
        Ok(tape.value(prob).to_vec())
    }

    /// Predicted task reward for `n` feature rows.
    pub fn reward(&self, feats: &[f64], n: usize) -> Result<Vec<f64>> {
        if !self.reward_enabled {
            return Err(Error::Contract("task reward head used during reward-free training".into()));
        }
        let mut tape = Tape::new();
        let p = self.reward_head.bind_constant(&mut tape);
        let u = constant(&mut tape, n, self.feature_dim(), feats.to_vec())?;
        let r = mlp(&mut tape, &p, "reward", 2, u)?;
        Ok(tape.value(r).to_vec())
    }

    fn check_batch(&self, batch: &[&[Transition]]) -> Result<usize> {
        let len = batch.first().map_or(0, |s| s.len());
        if batch.is_empty() || len == 0 || batch.iter().any(|s| s.len() != len) {
            return Err(Error::Contract("sequence batch must be non-empty with equal lengths".into()));
        }
        Ok(len)
    }

    /// Runs the posterior path over every sequence from a zero state.
    fn sequence_vars(&self, tape: &mut Tape, p: &Bound, batch: &[&[Transition]], rng: &mut SeededRng) -> Result<SeqVars> {
        let len = self.check_batch(batch)?;
        let bsz = batch.len();
        let obs: Vec<&[u8]> = (0..len).flat_map(|t| batch.iter().map(move |s| s[t].obs.as_slice())).collect();
        let embed = self.encode_on(tape, p, &obs)?;
        let mut h = constant(tape, bsz, self.cfg.deter, vec![0.0; bsz * self.cfg.deter])?;
        let mut s = constant(tape, bsz, self.cfg.stoch(), vec![0.0; bsz * self.cfg.stoch()])?;
        let (mut feats, mut posts, mut priors) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..len {
            let acts: Vec<Option<usize>> = batch.iter().map(|seq| seq[t].prev_action).collect();
            let a = Self::action_matrix(tape, &acts)?;
            h = self.gru(tape, p, h, s, a)?;
            let prior = self.head_probs(tape, p, "prior", h)?;
            let e = tape.slice_rows(embed, t * bsz, bsz)?;
            let he = tape.concat_cols(&[h, e])?;
            let post = self.head_probs(tape, p, "post", he)?;
            s = tape.sample_straight_through(post, self.cfg.classes, rng)?;
            feats.push(tape.concat_cols(&[h, s])?);
            posts.push(post);
            priors.push(prior);
        }
        Ok(SeqVars {
            feats: tape.concat_rows(&feats)?,
            post_probs: tape.concat_rows(&posts)?,
            prior_probs: tape.concat_rows(&priors)?,
        })
    }

    fn collect(&self, tape: &Tape, vars: &SeqVars, batch: &[&[Transition]]) -> SequenceFeatures {
        let len = batch[0].len();
        fn rows<T>(batch: &[&[Transition]], len: usize, f: impl Fn(&Transition) -> T) -> Vec<T> {
            (0..len).flat_map(|t| batch.iter().map(|s| &s[t]).collect::<Vec<_>>()).map(f).collect()
        }
        SequenceFeatures {
            batch: batch.len(),
            len,
            feats: tape.value(vars.feats).to_vec(),
            posterior: tape.value(vars.post_probs).to_vec(),
            prev_actions: rows(batch, len, |x| x.prev_action),
            rewards: rows(batch, len, |x| x.reward),
            conts: rows(batch, len, |x| x.cont),
        }
    }

    fn decoder_targets(&self, batch: &[&[Transition]]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let len = batch[0].len();
        let px = self.obs_size * self.obs_size;
        let mut classes = Vec::with_capacity(len * batch.len() * px * CLASS_CHANNELS);
        let mut overlay = Vec::with_capacity(len * batch.len() * px * OVERLAYS.len());
        let mut cont = Vec::with_capacity(len * batch.len());
        for t in 0..len {
            for seq in batch {
                let o = Observation { size: self.obs_size, data: seq[t].obs.clone() };
                classes.extend(one_hot(&o.class_labels(), CLASS_CHANNELS));
                for ch in OVERLAYS {
                    overlay.extend(o.channel(ch).iter().map(|&v| f64::from(v)));
                }
                cont.push(if seq[t].cont { 1.0 } else { 0.0 });
            }
        }
        (classes, overlay, cont)
    }

    /// Builds the reconstruction + KL + continuation objective on `tape`.
    fn loss_on(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[&[Transition]],
        rng: &mut SeededRng,
    ) -> Result<(Var, WmDiagnostics, SeqVars)> {
        let vars = self.sequence_vars(tape, p, batch, rng)?;
        let n = batch.len() * batch[0].len();
        let inv = 1.0 / n as f64;
        let px = self.obs_size * self.obs_size;
        let (classes, overlay, cont) = self.decoder_targets(batch);

        let logits = mlp(tape, p, "dec", 2, vars.feats)?;
        let class_logits = tape.slice_cols(logits, 0, CLASS_CHANNELS * px)?;
        let overlay_logits = tape.slice_cols(logits, CLASS_CHANNELS * px, OVERLAYS.len() * px)?;
        let class_t = constant(tape, n, CLASS_CHANNELS * px, classes)?;
        let ce = soft_cross_entropy_rows(tape, class_logits, class_t, CLASS_CHANNELS)?;
        let ce = tape.sum(ce);
        let overlay_t = constant(tape, n, OVERLAYS.len() * px, overlay)?;
        let bce = bce_with_logits(tape, overlay_logits, overlay_t)?;
        let bce = tape.sum(bce);
        let recon = tape.add(ce, bce)?;
        let recon = tape.scale(recon, inv);

        let kl = kl_rows(tape, vars.post_probs, vars.prior_probs, self.cfg.classes)?;
        let kl_raw = tape.sum(kl);
        let kl_raw = tape.scale(kl_raw, inv);
        let floored = tape.clamp_min(kl, self.cfg.free_bits);
        let kl_f = tape.sum(floored);
        let kl_f = tape.scale(kl_f, inv);

        let cont_logit = mlp(tape, p, "cont", 2, vars.feats)?;
        let cont_t = constant(tape, n, 1, cont)?;
        let cbce = bce_with_logits(tape, cont_logit, cont_t)?;
        let cbce = tape.sum(cbce);
        let cbce = tape.scale(cbce, inv);

        let wkl = tape.scale(kl_f, self.cfg.beta_kl);
        let wc = tape.scale(cbce, self.cfg.cont_scale);
        let loss = tape.add(recon, wkl)?;
        let loss = tape.add(loss, wc)?;
        let diag = WmDiagnostics {
            loss: tape.item(loss),
            recon: tape.item(recon),
            kl: tape.item(kl_raw),
            kl_floored: tape.item(kl_f),
            cont: tape.item(cbce),
        };
        if !diag.loss.is_finite() {
            return Err(Error::Numeric(format!("world-model loss is not finite: {diag:?}")));
        }
        Ok((loss, diag, vars))
    }

    /// Loss diagnostics without touching parameters.
    pub fn evaluate_loss(&self, batch: &[&[Transition]], rng: &mut SeededRng) -> Result<WmDiagnostics> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        Ok(self.loss_on(&mut tape, &p, batch, rng)?.1)
    }

    /// One optimizer step on the world-model objective. Returns the
    /// diagnostics and the posterior features of the batch.
    pub fn train_step(&mut self, batch: &[&[Transition]], rng: &mut SeededRng) -> Result<(WmDiagnostics, SequenceFeatures)> {
        if self.params.is_frozen() {
            return Err(Error::Contract("world-model update while frozen".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let (loss, diag, vars) = self.loss_on(&mut tape, &p, batch, rng)?;
        let feats = self.collect(&tape, &vars, batch);
        let mut grads = tape.backward(loss)?;
        self.params.accumulate(&p, &mut grads);
        self.opt.step(&mut self.params)?;
        Ok((diag, feats))
    }

    /// Posterior features of a batch with no parameter update.
    pub fn infer(&self, batch: &[&[Transition]], rng: &mut SeededRng) -> Result<SequenceFeatures> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let vars = self.sequence_vars(&mut tape, &p, batch, rng)?;
        Ok(self.collect(&tape, &vars, batch))
    }

    /// Gaussian negative log-likelihood with unit variance of the reward
    /// head on detached features; only the reward head is updated.
    pub fn reward_train_step(&mut self, feats: &SequenceFeatures) -> Result<f64> {
        if !self.reward_enabled {
            return Err(Error::Contract("reward-head training outside a task stage".into()));
        }
        let n = feats.rows();
        let targets: Vec<f64> = feats
            .rewards
            .iter()
            .map(|r| r.ok_or_else(|| Error::Contract("replayed step without a task reward".into())))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let p = self.reward_head.bind(&mut tape);
        let u = constant(&mut tape, n, self.feature_dim(), feats.feats.clone())?;
        let pred = mlp(&mut tape, &p, "reward", 2, u)?;
        let loss = reward_nll(&mut tape, pred, &targets, self.cfg.reward_scale)?;
        let value = nn::check_finite("reward loss", tape.item(loss))?;
        let mut grads = tape.backward(loss)?;
        self.reward_head.accumulate(&p, &mut grads);
        self.reward_opt.step(&mut self.reward_head)?;
        Ok(value)
    }
}

/// `scale * mean(0.5 (pred - target)^2 + 0.5 ln 2 pi)`.
pub fn reward_nll(tape: &mut Tape, pred: Var, targets: &[f64], scale: f64) -> Result<Var> {
    let n = targets.len();
    let t = constant(tape, n, 1, targets.to_vec())?;
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d);
    let m = tape.mean(sq);
    let half = tape.scale(m, 0.5);
    let nll = tape.add_scalar(half, HALF_LN_2PI);
    Ok(tape.scale(nll, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentdrive_autodiff::seeded;
    use latentdrive_sim::{Scenario, SimConfig, Simulator, TownId};

    fn small_cfg() -> WmConfig {
        WmConfig { embed: 32, deter: 16, vars: 4, classes: 4, hidden: 16, decoder_hidden: 32, ..WmConfig::default() }
    }

    fn episode(len: usize) -> Vec<Transition> {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        let obs = sim.reset(&Scenario { town: TownId::A, route: None, density: 5, tm_seed: 1, spawn_seed: 2 }).unwrap();
        let mut out = vec![Transition { obs: obs.data, prev_action: None, reward: None, cont: true, first: true }];
        for i in 1..len {
            let a = latentdrive_sim::Action::CRUISE.index();
            let r = sim.step(latentdrive_sim::Action::CRUISE).unwrap();
            out.push(Transition { obs: r.observation.data, prev_action: Some(a), reward: None, cont: !r.terminal, first: false });
            if r.terminal {
                assert!(i > 3);
                break;
            }
        }
        out
    }

    #[test]
    fn gru_has_a_fixed_point_at_zero() {
        let cfg = small_cfg();
        let mut wm = WorldModel::new(&cfg, 16, &mut seeded(0)).unwrap();
        for (_, t) in wm.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let prev = Latent::zeros(3, &cfg);
        let out = wm.rssm_step(&prev, &[None, None, None], None, &mut seeded(1)).unwrap();
        assert!(out.latent.h.iter().all(|&v| v == 0.0));
        assert_eq!(out.mode, SampleMode::Prior);
        assert!(out.posterior.is_none());
    }

    #[test]
    fn sampled_state_rows_are_one_hot() {
        let cfg = small_cfg();
        let wm = WorldModel::new(&cfg, 16, &mut seeded(0)).unwrap();
        let prev = Latent::zeros(2, &cfg);
        let e = vec![0.3; 2 * cfg.embed];
        let out = wm.rssm_step(&prev, &[Some(0), Some(8)], Some(&e), &mut seeded(1)).unwrap();
        assert_eq!(out.mode, SampleMode::Posterior);
        for row in out.latent.s.chunks(cfg.classes) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert_eq!(out.latent.features().len(), 2 * cfg.feature_dim());
        let again = wm.rssm_step(&prev, &[Some(0), Some(8)], Some(&e), &mut seeded(1)).unwrap();
        assert_eq!(out.latent, again.latent);
    }

    #[test]
    fn embedding_has_configured_length_and_is_deterministic() {
        let cfg = small_cfg();
        let wm = WorldModel::new(&cfg, 16, &mut seeded(0)).unwrap();
        let ep = episode(3);
        let o = Observation { size: 16, data: ep[0].obs.clone() };
        let a = wm.encode(&[&o, &o]).unwrap();
        assert_eq!(a.len(), 2 * cfg.embed);
        assert_eq!(a[..cfg.embed], a[cfg.embed..]);
        let bad = Observation { size: 15, data: vec![0; 7 * 15 * 15] };
        assert!(wm.encode(&[&bad]).is_err());
    }

    #[test]
    fn equal_heads_floor_the_kl_term() {
        let cfg = small_cfg();
        let mut wm = WorldModel::new(&cfg, 16, &mut seeded(0)).unwrap();
        // Zeroed output layers make prior and posterior both uniform.
        for name in ["prior.1.w", "prior.1.b", "post.1.w", "post.1.b"] {
            wm.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ep = episode(6);
        let d = wm.evaluate_loss(&[&ep[..]], &mut seeded(2)).unwrap();
        assert!(d.kl.abs() < 1e-12);
        assert_eq!(d.kl_floored, cfg.free_bits * cfg.vars as f64);
        assert_eq!(d.loss, d.recon + cfg.beta_kl * d.kl_floored + cfg.cont_scale * d.cont);
    }

    #[test]
    fn loss_terms_sum_to_the_reported_loss() {
        let cfg = WmConfig { beta_kl: 0.7, cont_scale: 1.3, ..small_cfg() };
        let mut wm = WorldModel::new(&cfg, 16, &mut seeded(3)).unwrap();
        let ep = episode(8);
        for _ in 0..3 {
            let (d, f) = wm.train_step(&[&ep[..4], &ep[2..6]], &mut seeded(4)).unwrap();
            assert!((d.loss - (d.recon + 0.7 * d.kl_floored + 1.3 * d.cont)).abs() <= 1e-12);
            assert!(d.kl >= 0.0);
            assert_eq!(f.rows(), 8);
            assert_eq!(f.pairs().len(), 6);
        }
    }

    #[test]
    fn frozen_model_refuses_updates_and_reward_needs_a_task_stage() {
        let cfg = small_cfg();
        let mut wm = WorldModel::new(&cfg, 16, &mut seeded(0)).unwrap();
        let ep = episode(4);
        let feats = wm.infer(&[&ep[..]], &mut seeded(1)).unwrap();
        assert!(matches!(wm.reward(&feats.feats, 4), Err(Error::Contract(_))));
        assert!(matches!(wm.reward_train_step(&feats), Err(Error::Contract(_))));
        wm.params.freeze();
        assert!(matches!(wm.train_step(&[&ep[..]], &mut seeded(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn perfect_prediction_leaves_only_the_constant() {
        let mut tape = Tape::new();
        let pred = tape.constant_from(&[3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let l = reward_nll(&mut tape, pred, &[0.5, -1.0, 2.0], 1.0).unwrap();
        assert_eq!(tape.item(l), HALF_LN_2PI);
        assert!((HALF_LN_2PI - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn continuation_is_a_probability() {
        let cfg = small_cfg();
        let mut wm = WorldModel::new(&cfg, 16, &mut seeded(0)).unwrap();
        let mut rng = seeded(9);
        use rand::Rng;
        let feats: Vec<f64> = (0..5 * cfg.feature_dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        for p in wm.continuation(&feats, 5).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
        for name in ["cont.1.w", "cont.1.b"] {
            wm.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(wm.continuation(&feats, 5).unwrap().iter().all(|&p| p == 0.5));
    }
}
