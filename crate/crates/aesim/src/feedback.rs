//! Learned feedback policy: a recurrent skip/click/purchase policy trained
//! by adversarial imitation (discriminator rewards + clipped policy
//! updates), warm-started with behavior cloning.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltr::LabelTarget;
use crate::metrics::ListEnvironment;
use crate::nn::{log_sigmoid, sigmoid, Activation, AdamConfig, AdamState, GruSpec, MlpSpec};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed, Rng};
use crate::tensor::{ParameterSet, Tensor};
use crate::world::{Action, Catalog, ExpectedFeedback, SessionLog};

pub const N_ACTIONS: usize = 3;

fn action_index(a: Action) -> usize {
    match a {
        Action::Skip => 0,
        Action::Click => 1,
        Action::Purchase => 2,
    }
}

fn action_from_index(i: usize) -> Action {
    match i {
        0 => Action::Skip,
        1 => Action::Click,
        _ => Action::Purchase,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GailConfig {
    pub gru_hidden: usize,
    pub policy_head_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    /// Return discount; 1.0 sums raw future rewards.
    pub gamma: f64,
    pub entropy_bonus: f64,
    /// Clipped-surrogate ratio bound.
    pub clip: f64,
    /// Mean KL(old || new) above which a policy step is reverted.
    pub kl_threshold: f64,
    pub policy_lr: f64,
    pub disc_lr: f64,
    /// Behavior-cloning warm-start updates before adversarial training.
    pub bc_steps: usize,
    /// Adversarial iterations (each: rollouts, disc update, policy update).
    pub iterations: usize,
    /// Expert/rollout lists per update batch.
    pub batch_lists: usize,
    pub disc_steps: usize,
    pub seed: u64,
}

impl Default for GailConfig {
    fn default() -> Self {
        GailConfig {
            gru_hidden: 32,
            policy_head_hidden: vec![32],
            disc_hidden: vec![64, 32],
            gamma: 1.0,
            entropy_bonus: 0.01,
            clip: 0.2,
            kl_threshold: 0.05,
            policy_lr: 1e-3,
            disc_lr: 1e-3,
            bc_steps: 150,
            iterations: 30,
            batch_lists: 32,
            disc_steps: 2,
            seed: 0,
        }
    }
}

impl GailConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::arg("gamma must lie in [0, 1]"));
        }
        if self.clip <= 0.0 || self.kl_threshold <= 0.0 {
            return Err(Error::arg("clip and kl_threshold must be positive"));
        }
        if self.batch_lists == 0 {
            return Err(Error::arg("batch_lists must be positive"));
        }
        Ok(())
    }
}

/// Recurrent feedback policy: a GRU consumes per-position features (item,
/// position encoding, previous action) and a softmax head emits
/// skip/click/purchase probabilities.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    pub gru: GruSpec,
    pub head: MlpSpec,
    pub params: ParameterSet,
    pub user_dim: usize,
}

/// Width of one policy input row: user, query scalar, item features,
/// user-item interaction crosses, five position features, previous-action
/// one-hot.
pub fn policy_input_width(catalog: &Catalog, user_dim: usize) -> usize {
    user_dim + 1 + catalog.feature_width() * (1 + user_dim) + 5 + N_ACTIONS
}

/// Width of one discriminator row: the policy context plus an observable
/// history summary and the action one-hot.
pub fn disc_input_width(catalog: &Catalog, user_dim: usize) -> usize {
    user_dim + 1 + catalog.feature_width() * (1 + user_dim) + 5 + 2 + N_ACTIONS + N_ACTIONS
}

/// Item features followed by the user ⊗ item outer product. The oracle's
/// attraction is bilinear in (user, item); without explicit crosses a small
/// net cannot calibrate item quality precisely enough for imitation.
fn item_cross_feats(user_vec: &[f64], item_feats: &[f64], out: &mut Vec<f64>) {
    out.extend_from_slice(item_feats);
    for &u in user_vec {
        for &f in item_feats {
            out.push(u * f);
        }
    }
}

fn query_scalar(catalog: &Catalog, query: usize) -> f64 {
    let denom = (catalog.n_categories.max(2) - 1) as f64;
    2.0 * query as f64 / denom - 1.0
}

/// Position features use a generic basis: relative rank, log depth, a
/// reciprocal-log term so slow depth decays are expressible without the
/// nets having to invert a logarithm on their own, and indicators for the
/// first two slots, whose examination drop is too sharp for a smooth basis.
fn position_feats(pos0: usize, n: usize) -> [f64; 5] {
    let k = (pos0 + 1) as f64;
    [
        k / n as f64,
        (k + 1.0).ln(),
        1.0 / (k + 1.0).ln(),
        (pos0 == 0) as u8 as f64,
        (pos0 == 1) as u8 as f64,
    ]
}

#[allow(clippy::too_many_arguments)]
fn policy_step_input(
    catalog: &Catalog,
    user_vec: &[f64],
    query: usize,
    item_feats: &[f64],
    pos0: usize,
    n: usize,
    prev_action: &[f64; N_ACTIONS],
) -> Vec<f64> {
    let mut row = Vec::with_capacity(policy_input_width(catalog, user_vec.len()));
    row.extend_from_slice(user_vec);
    row.push(query_scalar(catalog, query));
    item_cross_feats(user_vec, item_feats, &mut row);
    row.extend_from_slice(&position_feats(pos0, n));
    row.extend_from_slice(prev_action);
    row
}

/// One discriminator row for a (state, action) transition.
#[allow(clippy::too_many_arguments)]
fn disc_row(
    catalog: &Catalog,
    user_vec: &[f64],
    query: usize,
    item_feats: &[f64],
    pos0: usize,
    n: usize,
    clicks_so_far: f64,
    purchases_so_far: f64,
    prev_action: &[f64; N_ACTIONS],
    action: usize,
) -> Vec<f64> {
    let mut row = Vec::with_capacity(disc_input_width(catalog, user_vec.len()));
    row.extend_from_slice(user_vec);
    row.push(query_scalar(catalog, query));
    item_cross_feats(user_vec, item_feats, &mut row);
    row.extend_from_slice(&position_feats(pos0, n));
    let k = (pos0 + 1) as f64;
    row.push(clicks_so_far / k);
    row.push(purchases_so_far / k);
    row.extend_from_slice(prev_action);
    for a in 0..N_ACTIONS {
        row.push((a == action) as u8 as f64);
    }
    row
}

fn one_hot(a: usize) -> [f64; N_ACTIONS] {
    let mut v = [0.0; N_ACTIONS];
    v[a] = 1.0;
    v
}

fn softmax3(logits: &[f64]) -> [f64; N_ACTIONS] {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    [e[0] / z, e[1] / z, e[2] / z]
}

/// One recorded policy pass over a displayed list.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub inputs: Vec<Tensor>,
    pub actions: Vec<usize>,
    pub probs: Vec<[f64; N_ACTIONS]>,
    pub disc_rows: Vec<Vec<f64>>,
}

impl Rollout {
    pub fn trace(&self) -> Vec<Action> {
        self.actions.iter().map(|&a| action_from_index(a)).collect()
    }
}

struct PolicyForward {
    gru_cache: crate::nn::GruSeqCache,
    head_caches: Vec<crate::nn::MlpCache>,
    head_params: ParameterSet,
    probs: Vec<[f64; N_ACTIONS]>,
}

impl FeedbackPolicy {
    pub fn init(catalog: &Catalog, user_dim: usize, config: &GailConfig) -> Result<Self> {
        let gru = GruSpec::new(policy_input_width(catalog, user_dim), config.gru_hidden)?;
        let mut widths = vec![config.gru_hidden];
        widths.extend_from_slice(&config.policy_head_hidden);
        widths.push(N_ACTIONS);
        let head = MlpSpec::new(widths, Activation::Relu, Activation::Identity)?;
        let mut rng = rng_from_seed(derive_seed(config.seed, "policy-init"));
        let mut params = gru.init_params(&mut rng);
        for (name, t) in head.init_params(&mut rng).iter() {
            params.insert(format!("head.{name}"), t.clone());
        }
        Ok(FeedbackPolicy {
            gru,
            head,
            params,
            user_dim,
        })
    }

    fn head_params(&self, params: &ParameterSet) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, t) in params.iter() {
            if let Some(rest) = name.strip_prefix("head.") {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    fn forward(&self, params: &ParameterSet, inputs: &[Tensor]) -> Result<PolicyForward> {
        let h0 = Tensor::zeros(vec![1, self.gru.hidden_width]);
        let gru_cache = self.gru.sequence_cached(params, inputs, &h0)?;
        let head_params = self.head_params(params);
        let mut probs = Vec::with_capacity(inputs.len());
        let mut head_caches = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let cache = self.head.forward_cached(&head_params, gru_cache.hidden(t))?;
            probs.push(softmax3(cache.output().data()));
            head_caches.push(cache);
        }
        Ok(PolicyForward {
            gru_cache,
            head_caches,
            head_params,
            probs,
        })
    }

    /// Parameter gradients for per-step dL/dlogits rows.
    fn backward(
        &self,
        params: &ParameterSet,
        fwd: &PolicyForward,
        dlogits: &[[f64; N_ACTIONS]],
    ) -> Result<ParameterSet> {
        let n = fwd.head_caches.len();
        let mut grads = ParameterSet::new();
        let mut grad_h: Vec<Tensor> = (0..n)
            .map(|_| Tensor::zeros(vec![1, self.gru.hidden_width]))
            .collect();
        for t in 0..n {
            let gout = Tensor::matrix(1, N_ACTIONS, dlogits[t].to_vec())?;
            let (head_grads, dh) = fwd.head_caches[t].backward(&fwd.head_params, &gout)?;
            for (name, g) in head_grads.iter() {
                let key = format!("head.{name}");
                match grads.get_mut(&key) {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => grads.insert(key, g.clone()),
                }
            }
            for (a, &b) in grad_h[t].data_mut().iter_mut().zip(dh.data()) {
                *a += b;
            }
        }
        let (gru_grads, _, _) = fwd.gru_cache.backward(params, &grad_h)?;
        for (name, g) in gru_grads.iter() {
            grads.insert(name.clone(), g.clone());
        }
        Ok(grads)
    }

    /// Sampled trajectory over a displayed list; the recurrent state sees
    /// each sampled action as the next step's previous-action input.
    pub fn rollout(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        display: &[u64],
        seed: u64,
    ) -> Result<Rollout> {
        let mut rng = rng_from_seed(derive_seed(seed, "rollout"));
        let n = display.len();
        let mut inputs = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        let mut disc_rows = Vec::with_capacity(n);
        let mut prev = [0.0; N_ACTIONS];
        let mut h = Tensor::zeros(vec![1, self.gru.hidden_width]);
        let head_params = self.head_params(&self.params);
        let mut clicks = 0.0;
        let mut purchases = 0.0;
        for (pos0, &id) in display.iter().enumerate() {
            let item_feats = catalog.item_features(catalog.item(id)?);
            let row = policy_step_input(catalog, user_vec, query, &item_feats, pos0, n, &prev);
            let x = Tensor::matrix(1, row.len(), row)?;
            h = self.gru.step(&self.params, &x, &h)?;
            let logits = self.head.forward(&head_params, &h)?;
            let p = softmax3(logits.data());
            let u: f64 = rng.gen_range(0.0..1.0);
            let a = if u < p[0] {
                0
            } else if u < p[0] + p[1] {
                1
            } else {
                2
            };
            disc_rows.push(disc_row(
                catalog, user_vec, query, &item_feats, pos0, n, clicks, purchases, &prev, a,
            ));
            if a >= 1 {
                clicks += 1.0;
            }
            if a == 2 {
                purchases += 1.0;
            }
            prev = one_hot(a);
            inputs.push(x);
            actions.push(a);
            probs.push(p);
        }
        Ok(Rollout {
            inputs,
            actions,
            probs,
            disc_rows,
        })
    }

    /// Deterministic expectation pass: the previous-action input is the
    /// previous step's full action distribution rather than a sample.
    pub fn expected_probs(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        display: &[u64],
    ) -> Result<Vec<[f64; N_ACTIONS]>> {
        let n = display.len();
        let mut prev = [0.0; N_ACTIONS];
        let mut h = Tensor::zeros(vec![1, self.gru.hidden_width]);
        let head_params = self.head_params(&self.params);
        let mut out = Vec::with_capacity(n);
        for (pos0, &id) in display.iter().enumerate() {
            let item_feats = catalog.item_features(catalog.item(id)?);
            let row = policy_step_input(catalog, user_vec, query, &item_feats, pos0, n, &prev);
            let x = Tensor::matrix(1, row.len(), row)?;
            h = self.gru.step(&self.params, &x, &h)?;
            let logits = self.head.forward(&head_params, &h)?;
            let p = softmax3(logits.data());
            prev = p;
            out.push(p);
        }
        Ok(out)
    }

    /// Replay an expert trace: policy inputs/probabilities along the
    /// expert's own action sequence, plus matching discriminator rows.
    pub fn replay(
        &self,
        catalog: &Catalog,
        session: &SessionLog,
    ) -> Result<Rollout> {
        let n = session.display.len();
        let mut inputs = Vec::with_capacity(n);
        let mut disc_rows = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        let mut prev = [0.0; N_ACTIONS];
        let mut clicks = 0.0;
        let mut purchases = 0.0;
        for (pos0, (&id, &act)) in session.display.iter().zip(&session.trace).enumerate() {
            let item_feats = catalog.item_features(catalog.item(id)?);
            let a = action_index(act);
            let row = policy_step_input(
                catalog,
                &session.user_vec,
                session.query,
                &item_feats,
                pos0,
                n,
                &prev,
            );
            inputs.push(Tensor::matrix(1, row.len(), row)?);
            disc_rows.push(disc_row(
                catalog,
                &session.user_vec,
                session.query,
                &item_feats,
                pos0,
                n,
                clicks,
                purchases,
                &prev,
                a,
            ));
            if a >= 1 {
                clicks += 1.0;
            }
            if a == 2 {
                purchases += 1.0;
            }
            prev = one_hot(a);
            actions.push(a);
        }
        let fwd = self.forward(&self.params, &inputs)?;
        Ok(Rollout {
            inputs,
            actions,
            probs: fwd.probs,
            disc_rows,
        })
    }
}

impl ListEnvironment for FeedbackPolicy {
    fn expected_list_feedback(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        display: &[u64],
    ) -> Result<ExpectedFeedback> {
        let probs = self.expected_probs(catalog, user_vec, query, display)?;
        Ok(ExpectedFeedback {
            p_click: probs.iter().map(|p| p[1] + p[2]).collect(),
            p_purchase: probs.iter().map(|p| p[2]).collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Discriminator

/// Binary discriminator over transitions; expert transitions are labeled 1.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub spec: MlpSpec,
    pub params: ParameterSet,
}

impl Discriminator {
    pub fn init(catalog: &Catalog, user_dim: usize, config: &GailConfig) -> Result<Self> {
        let mut widths = vec![disc_input_width(catalog, user_dim)];
        widths.extend_from_slice(&config.disc_hidden);
        widths.push(1);
        let spec = MlpSpec::new(widths, Activation::Relu, Activation::Identity)?;
        let mut rng = rng_from_seed(derive_seed(config.seed, "disc-init"));
        let params = spec.init_params(&mut rng);
        Ok(Discriminator { spec, params })
    }

    pub fn logits(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let width = self.spec.input_width();
        let input = Tensor::matrix(
            rows.len(),
            width,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )?;
        Ok(self.spec.forward(&self.params, &input)?.data().to_vec())
    }

    /// Imitation reward for one transition: log D(s, a). An untrained
    /// discriminator at D = 1/2 gives -ln 2 everywhere.
    pub fn reward(&self, logit: f64) -> f64 {
        log_sigmoid(logit)
    }

    /// One BCE step on a mixed batch; returns the loss.
    pub fn update(
        &mut self,
        expert_rows: &[Vec<f64>],
        policy_rows: &[Vec<f64>],
        adam: &mut AdamState,
    ) -> Result<f64> {
        let total = expert_rows.len() + policy_rows.len();
        if expert_rows.is_empty() || policy_rows.is_empty() {
            return Err(Error::arg("discriminator update needs both classes"));
        }
        let width = self.spec.input_width();
        let mut data = Vec::with_capacity(total * width);
        let mut labels = Vec::with_capacity(total);
        for r in expert_rows {
            data.extend_from_slice(r);
            labels.push(1.0);
        }
        for r in policy_rows {
            data.extend_from_slice(r);
            labels.push(0.0);
        }
        let input = Tensor::matrix(total, width, data)?;
        let (loss, grads) =
            crate::nn::param_gradients(&self.spec, &self.params, &input, |out| {
                let n = total as f64;
                let mut loss = 0.0;
                let mut grad = Tensor::zeros(vec![total, 1]);
                for (b, &y) in labels.iter().enumerate() {
                    let s = out.row(b)[0];
                    loss += -(y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s)) / n;
                    grad.data_mut()[b] = (sigmoid(s) - y) / n;
                }
                Ok((loss, grad))
            })?;
        adam.step(&mut self.params, &grads)?;
        Ok(loss)
    }
}

// ---------------------------------------------------------------------------
// Policy updates

/// Behavior-cloning step: minimize mean cross-entropy of expert actions.
pub fn bc_update(
    policy: &mut FeedbackPolicy,
    catalog: &Catalog,
    batch: &[&SessionLog],
    adam: &mut AdamState,
) -> Result<f64> {
    let mut total_steps = 0usize;
    for s in batch {
        total_steps += s.display.len();
    }
    if total_steps == 0 {
        return Err(Error::arg("bc_update: empty batch"));
    }
    let scale = 1.0 / total_steps as f64;
    let mut loss = 0.0;
    let mut grads: Option<ParameterSet> = None;
    let params = policy.params.clone();
    for s in batch {
        let replay = policy.replay(catalog, s)?;
        let fwd = policy.forward(&params, &replay.inputs)?;
        let mut dlogits = Vec::with_capacity(replay.actions.len());
        for (t, &a) in replay.actions.iter().enumerate() {
            let p = fwd.probs[t];
            loss += -p[a].max(1e-300).ln() * scale;
            let mut d = [0.0; N_ACTIONS];
            for j in 0..N_ACTIONS {
                d[j] = (p[j] - (j == a) as u8 as f64) * scale;
            }
            dlogits.push(d);
        }
        let g = policy.backward(&params, &fwd, &dlogits)?;
        match &mut grads {
            Some(acc) => acc.axpy(1.0, &g)?,
            None => grads = Some(g),
        }
    }
    adam.step(&mut policy.params, &grads.unwrap())?;
    Ok(loss)
}

/// Discounted returns-to-go for one reward sequence.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct PolicyUpdateStats {
    pub surrogate_loss: f64,
    pub mean_kl: f64,
    pub reverted: bool,
}

/// One clipped-surrogate policy step over a batch of rollouts with given
/// per-step advantages. If the post-step mean KL(old || new) exceeds the
/// threshold, the step is reverted (parameters restored) and flagged.
pub fn policy_update(
    policy: &mut FeedbackPolicy,
    rollouts: &[Rollout],
    advantages: &[Vec<f64>],
    config: &GailConfig,
    adam: &mut AdamState,
) -> Result<PolicyUpdateStats> {
    config.validate()?;
    let params = policy.params.clone();
    let (loss, grads) = surrogate_loss_grads(policy, &params, rollouts, advantages, config)?;
    let snapshot = policy.params.clone();
    let adam_snapshot = adam.clone();
    adam.step(&mut policy.params, &grads)?;

    // KL(old || new) after the step.
    let total_steps: usize = rollouts.iter().map(|r| r.actions.len()).sum();
    let scale = 1.0 / total_steps.max(1) as f64;
    let mut kl = 0.0;
    for r in rollouts {
        let fwd = policy.forward(&policy.params, &r.inputs)?;
        for (t, p_old) in r.probs.iter().enumerate() {
            let p_new = fwd.probs[t];
            for j in 0..N_ACTIONS {
                if p_old[j] > 0.0 {
                    kl += p_old[j] * (p_old[j].ln() - p_new[j].max(1e-300).ln());
                }
            }
        }
    }
    kl *= scale;
    let reverted = kl > config.kl_threshold;
    if reverted {
        policy.params = snapshot;
        *adam = adam_snapshot;
    }
    Ok(PolicyUpdateStats {
        surrogate_loss: loss,
        mean_kl: kl,
        reverted,
    })
}

/// Clipped-surrogate objective (negated, plus entropy bonus) and its
/// parameter gradient for a batch of rollouts, as a pure function of
/// `params`.
pub fn surrogate_loss_grads(
    policy: &FeedbackPolicy,
    params: &ParameterSet,
    rollouts: &[Rollout],
    advantages: &[Vec<f64>],
    config: &GailConfig,
) -> Result<(f64, ParameterSet)> {
    if rollouts.len() != advantages.len() || rollouts.is_empty() {
        return Err(Error::arg("policy_update: batch shape mismatch"));
    }
    let total_steps: usize = rollouts.iter().map(|r| r.actions.len()).sum();
    let scale = 1.0 / total_steps.max(1) as f64;
    let mut loss = 0.0;
    let mut grads: Option<ParameterSet> = None;
    for (r, adv) in rollouts.iter().zip(advantages) {
        let fwd = policy.forward(params, &r.inputs)?;
        let mut dlogits = Vec::with_capacity(r.actions.len());
        for (t, &a) in r.actions.iter().enumerate() {
            let p_new = fwd.probs[t];
            let p_old = r.probs[t][a];
            let ratio = p_new[a] / p_old.max(1e-12);
            let a_t = adv[t];
            let clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
            let surrogate = (ratio * a_t).min(clipped * a_t);
            // Entropy bonus.
            let entropy: f64 = -p_new
                .iter()
                .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
                .sum::<f64>();
            loss += (-surrogate - config.entropy_bonus * entropy) * scale;
            // Gradient of -surrogate: zero when the clipped branch is
            // active, else -A * ratio * dlog pi/dlogits.
            let active = ratio * a_t <= clipped * a_t + 1e-15
                && !((a_t >= 0.0 && ratio > 1.0 + config.clip)
                    || (a_t < 0.0 && ratio < 1.0 - config.clip));
            let mut d = [0.0; N_ACTIONS];
            if active {
                let c = -a_t * ratio * scale;
                for j in 0..N_ACTIONS {
                    d[j] += c * (((j == a) as u8 as f64) - p_new[j]);
                }
            }
            for j in 0..N_ACTIONS {
                let lp = if p_new[j] > 0.0 { p_new[j].ln() } else { 0.0 };
                d[j] += config.entropy_bonus * p_new[j] * (lp + entropy) * scale;
            }
            dlogits.push(d);
        }
        let g = policy.backward(params, &fwd, &dlogits)?;
        match &mut grads {
            Some(acc) => acc.axpy(1.0, &g)?,
            None => grads = Some(g),
        }
    }
    Ok((loss, grads.unwrap()))
}

// ---------------------------------------------------------------------------
// Full training loop

#[derive(Debug, Clone, Default)]
pub struct GailCurves {
    pub bc_loss: Vec<(u64, f64)>,
    pub disc_loss: Vec<(u64, f64)>,
    pub policy_loss: Vec<(u64, f64)>,
    pub mean_kl: Vec<(u64, f64)>,
    pub reverted_steps: usize,
}

/// Behavior-cloning warm start followed by adversarial imitation against
/// the expert session logs.
pub fn train_gail(
    catalog: &Catalog,
    expert: &[SessionLog],
    user_dim: usize,
    config: &GailConfig,
) -> Result<(FeedbackPolicy, Discriminator, GailCurves)> {
    config.validate()?;
    if expert.is_empty() {
        return Err(Error::arg("train_gail: no expert sessions"));
    }
    let mut policy = FeedbackPolicy::init(catalog, user_dim, config)?;
    let mut disc = Discriminator::init(catalog, user_dim, config)?;
    let mut policy_adam = AdamState::new(
        AdamConfig {
            learning_rate: config.policy_lr,
            ..AdamConfig::default()
        },
        &policy.params,
    );
    let mut disc_adam = AdamState::new(
        AdamConfig {
            learning_rate: config.disc_lr,
            ..AdamConfig::default()
        },
        &disc.params,
    );
    let mut curves = GailCurves::default();
    let mut batch_rng = rng_from_seed(derive_seed(config.seed, "gail-batches"));
    let pick_batch = |rng: &mut Rng| -> Vec<&SessionLog> {
        (0..config.batch_lists)
            .map(|_| &expert[rng.gen_range(0..expert.len())])
            .collect()
    };

    // Linear learning-rate decay to a tenth over the cloning steps, plus
    // Polyak averaging of the last quarter: the imitation tolerance needs a
    // tighter final fit than the noise floor of constant-rate Adam allows.
    let avg_window = (config.bc_steps / 4).max(1);
    let mut polyak: Option<ParameterSet> = None;
    for step in 0..config.bc_steps as u64 {
        let frac = step as f64 / config.bc_steps.max(1) as f64;
        policy_adam.config.learning_rate = config.policy_lr * (1.0 - 0.9 * frac);
        let batch = pick_batch(&mut batch_rng);
        let loss = bc_update(&mut policy, catalog, &batch, &mut policy_adam)?;
        curves.bc_loss.push((step, loss));
        if step as usize + avg_window >= config.bc_steps {
            match &mut polyak {
                None => polyak = Some(policy.params.clone()),
                Some(sum) => sum.axpy(1.0, &policy.params)?,
            }
        }
    }
    if let Some(sum) = polyak {
        let mut avg = sum.zeros_like();
        avg.axpy(1.0 / avg_window as f64, &sum)?;
        policy.params = avg;
    }
    policy_adam.config.learning_rate = config.policy_lr * 0.1;

    for iter in 0..config.iterations as u64 {
        let batch = pick_batch(&mut batch_rng);
        // Policy rollouts on the expert contexts.
        let mut rollouts = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            rollouts.push(policy.rollout(
                catalog,
                &s.user_vec,
                s.query,
                &s.display,
                derive_seed_indexed(derive_seed(config.seed, "gail-rollout"), &iter.to_string(), i as u64),
            )?);
        }
        // Discriminator updates on expert vs policy transitions.
        let mut expert_rows = Vec::new();
        for s in &batch {
            expert_rows.extend(policy.replay(catalog, s)?.disc_rows);
        }
        let mut policy_rows = Vec::new();
        for r in &rollouts {
            policy_rows.extend(r.disc_rows.iter().cloned());
        }
        let mut disc_loss = 0.0;
        for _ in 0..config.disc_steps {
            disc_loss = disc.update(&expert_rows, &policy_rows, &mut disc_adam)?;
        }
        curves.disc_loss.push((iter, disc_loss));

        // Rewards, returns, per-position baseline, advantages.
        let mut returns: Vec<Vec<f64>> = Vec::with_capacity(rollouts.len());
        for r in &rollouts {
            let logits = disc.logits(&r.disc_rows)?;
            let rewards: Vec<f64> = logits.iter().map(|&s| disc.reward(s)).collect();
            returns.push(returns_to_go(&rewards, config.gamma));
        }
        let max_len = returns.iter().map(Vec::len).max().unwrap_or(0);
        let mut baseline = vec![0.0; max_len];
        let mut counts = vec![0.0; max_len];
        for ret in &returns {
            for (t, &v) in ret.iter().enumerate() {
                baseline[t] += v;
                counts[t] += 1.0;
            }
        }
        for (b, c) in baseline.iter_mut().zip(&counts) {
            if *c > 0.0 {
                *b /= *c;
            }
        }
        let advantages: Vec<Vec<f64>> = returns
            .iter()
            .map(|ret| ret.iter().enumerate().map(|(t, &v)| v - baseline[t]).collect())
            .collect();

        let stats = policy_update(&mut policy, &rollouts, &advantages, config, &mut policy_adam)?;
        curves.policy_loss.push((iter, stats.surrogate_loss));
        curves.mean_kl.push((iter, stats.mean_kl));
        if stats.reverted {
            curves.reverted_steps += 1;
        }
    }
    Ok((policy, disc, curves))
}

// ---------------------------------------------------------------------------
// Position trend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionTrend {
    /// Mean click probability by position (1-based order).
    pub click: Vec<f64>,
    /// Mean purchase probability by position.
    pub purchase: Vec<f64>,
}

/// Mean per-position feedback rates of an environment over logged displays.
pub fn position_trend(
    env: &dyn ListEnvironment,
    catalog: &Catalog,
    sessions: &[SessionLog],
    max_k: usize,
) -> Result<PositionTrend> {
    if sessions.is_empty() || max_k == 0 {
        return Err(Error::arg("position_trend: need sessions and max_k > 0"));
    }
    let mut click = vec![0.0; max_k];
    let mut purchase = vec![0.0; max_k];
    let mut counts = vec![0.0; max_k];
    for s in sessions {
        let fb = env.expected_list_feedback(catalog, &s.user_vec, s.query, &s.display)?;
        for t in 0..s.display.len().min(max_k) {
            click[t] += fb.p_click[t];
            purchase[t] += fb.p_purchase[t];
            counts[t] += 1.0;
        }
    }
    for t in 0..max_k {
        if counts[t] > 0.0 {
            click[t] /= counts[t];
            purchase[t] /= counts[t];
        }
    }
    Ok(PositionTrend { click, purchase })
}

/// Empirical per-position rates of logged traces (the expert's own trend).
pub fn logged_position_trend(
    sessions: &[SessionLog],
    max_k: usize,
    target: LabelTarget,
) -> Result<Vec<f64>> {
    if sessions.is_empty() || max_k == 0 {
        return Err(Error::arg("logged_position_trend: need sessions and max_k > 0"));
    }
    let mut sum = vec![0.0; max_k];
    let mut counts = vec![0.0; max_k];
    for s in sessions {
        for (t, &a) in s.trace.iter().take(max_k).enumerate() {
            let hit = match target {
                LabelTarget::Click => a.is_click(),
                LabelTarget::Purchase => a.is_purchase(),
            };
            sum[t] += hit as u8 as f64;
            counts[t] += 1.0;
        }
    }
    Ok(sum
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0.0 { s / c } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{fd_param_gradients, max_rel_error};
    use crate::world::{generate_catalog, log_sessions, DisplayServer, OracleConfig, OracleUserModel};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    struct FirstKServer(usize);
    impl DisplayServer for FirstKServer {
        fn serve(
            &self,
            catalog: &Catalog,
            _user_vec: &[f64],
            query: usize,
            _seed: u64,
        ) -> Result<Vec<u64>> {
            Ok(catalog
                .category_items(query)?
                .iter()
                .take(self.0)
                .map(|&idx| catalog.item_by_index(idx).item_id)
                .collect())
        }
    }

    fn tiny_setup(seed: u64, n_sessions: usize) -> (Catalog, OracleUserModel, Vec<SessionLog>) {
        let catalog = generate_catalog(40, 3, &[3], 4, seed).unwrap();
        let oracle = OracleUserModel::generate(
            &catalog,
            OracleConfig {
                user_dim: 4,
                seed,
                ..OracleConfig::default()
            },
        )
        .unwrap();
        let logs = log_sessions(&oracle, &catalog, &FirstKServer(6), n_sessions, seed).unwrap();
        (catalog, oracle, logs)
    }

    fn tiny_config(seed: u64) -> GailConfig {
        GailConfig {
            gru_hidden: 6,
            policy_head_hidden: vec![8],
            disc_hidden: vec![8],
            bc_steps: 3,
            iterations: 2,
            batch_lists: 8,
            seed,
            ..GailConfig::default()
        }
    }

    #[test]
    fn action_distributions_are_normalized() {
        let (catalog, _, logs) = tiny_setup(101, 5);
        let policy = FeedbackPolicy::init(&catalog, 4, &tiny_config(1)).unwrap();
        let s = &logs[0];
        let probs = policy
            .expected_probs(&catalog, &s.user_vec, s.query, &s.display)
            .unwrap();
        assert_eq!(probs.len(), s.display.len());
        for p in &probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&q| q > 0.0));
        }
        let r = policy
            .rollout(&catalog, &s.user_vec, s.query, &s.display, 7)
            .unwrap();
        for p in &r.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Rollouts are reproducible per seed and vary across seeds.
        let r2 = policy
            .rollout(&catalog, &s.user_vec, s.query, &s.display, 7)
            .unwrap();
        assert_eq!(r.actions, r2.actions);
    }

    #[test]
    fn fresh_discriminator_reward_is_near_minus_ln2() {
        // Exactly -ln 2 at logit zero; a fresh (zero-bias, small-weight)
        // net sits near there.
        let (catalog, _, logs) = tiny_setup(102, 3);
        let disc = Discriminator::init(&catalog, 4, &tiny_config(2)).unwrap();
        assert_close(disc.reward(0.0), -std::f64::consts::LN_2, 1e-12);
        let policy = FeedbackPolicy::init(&catalog, 4, &tiny_config(2)).unwrap();
        let rows = policy.replay(&catalog, &logs[0]).unwrap().disc_rows;
        for logit in disc.logits(&rows).unwrap() {
            assert!(disc.reward(logit) < 0.0, "log D is always negative");
        }
    }

    #[test]
    fn returns_to_go_hand_values() {
        assert_eq!(returns_to_go(&[1.0, 2.0, 3.0], 1.0), vec![6.0, 5.0, 3.0]);
        let r = returns_to_go(&[1.0, 1.0, 1.0], 0.5);
        assert_close(r[0], 1.75, 1e-12);
        assert_close(r[1], 1.5, 1e-12);
        assert_close(r[2], 1.0, 1e-12);
        assert!(returns_to_go(&[], 1.0).is_empty());
    }

    #[test]
    fn bc_gradient_matches_fd() {
        let (catalog, _, logs) = tiny_setup(103, 2);
        let policy = FeedbackPolicy::init(&catalog, 4, &tiny_config(3)).unwrap();
        // Build the BC loss as a pure function of parameters.
        let replay = policy.replay(&catalog, &logs[0]).unwrap();
        let total = replay.actions.len() as f64;
        let loss_fn = |params: &ParameterSet| -> f64 {
            let fwd = policy.forward(params, &replay.inputs).unwrap();
            replay
                .actions
                .iter()
                .enumerate()
                .map(|(t, &a)| -fwd.probs[t][a].ln() / total)
                .sum()
        };
        let fwd = policy.forward(&policy.params, &replay.inputs).unwrap();
        let scale = 1.0 / total;
        let dlogits: Vec<[f64; N_ACTIONS]> = replay
            .actions
            .iter()
            .enumerate()
            .map(|(t, &a)| {
                let p = fwd.probs[t];
                let mut d = [0.0; N_ACTIONS];
                for j in 0..N_ACTIONS {
                    d[j] = (p[j] - (j == a) as u8 as f64) * scale;
                }
                d
            })
            .collect();
        let grads = policy.backward(&policy.params, &fwd, &dlogits).unwrap();
        let fd = fd_param_gradients(&policy.params, 1e-5, loss_fn);
        assert!(max_rel_error(&grads, &fd, 1e-6) < 1e-3);
    }

    #[test]
    fn bc_training_fits_expert_actions() {
        let (catalog, _, logs) = tiny_setup(104, 20);
        let mut policy = FeedbackPolicy::init(&catalog, 4, &tiny_config(4)).unwrap();
        let mut adam = AdamState::new(
            AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            &policy.params,
        );
        let batch: Vec<&SessionLog> = logs.iter().collect();
        let first = bc_update(&mut policy, &catalog, &batch, &mut adam).unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = bc_update(&mut policy, &catalog, &batch, &mut adam).unwrap();
        }
        assert!(last < first, "BC loss should fall: {first} -> {last}");
    }

    #[test]
    fn policy_update_reverts_on_kl_breach() {
        let (catalog, _, logs) = tiny_setup(105, 4);
        let config = GailConfig {
            kl_threshold: 1e-12, // any movement violates it
            ..tiny_config(5)
        };
        let mut policy = FeedbackPolicy::init(&catalog, 4, &config).unwrap();
        let before = policy.params.clone();
        let mut adam = AdamState::new(
            AdamConfig {
                learning_rate: 0.5,
                ..AdamConfig::default()
            },
            &policy.params,
        );
        let s = &logs[0];
        let r = policy
            .rollout(&catalog, &s.user_vec, s.query, &s.display, 1)
            .unwrap();
        let adv = vec![vec![1.0; r.actions.len()]];
        let stats = policy_update(&mut policy, &[r], &adv, &config, &mut adam).unwrap();
        assert!(stats.reverted);
        assert_eq!(policy.params, before, "revert restores parameters");
        // With a generous threshold the same step goes through.
        let config2 = GailConfig {
            kl_threshold: 10.0,
            ..config
        };
        let s = &logs[1];
        let r = policy
            .rollout(&catalog, &s.user_vec, s.query, &s.display, 2)
            .unwrap();
        let adv = vec![vec![1.0; r.actions.len()]];
        let stats = policy_update(&mut policy, &[r], &adv, &config2, &mut adam).unwrap();
        assert!(!stats.reverted);
        assert_ne!(policy.params, before);
    }

    #[test]
    fn zero_advantage_moves_only_by_entropy() {
        let (catalog, _, logs) = tiny_setup(106, 2);
        let config = GailConfig {
            entropy_bonus: 0.0,
            kl_threshold: 10.0,
            ..tiny_config(6)
        };
        let mut policy = FeedbackPolicy::init(&catalog, 4, &config).unwrap();
        let before = policy.params.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &policy.params);
        let s = &logs[0];
        let r = policy
            .rollout(&catalog, &s.user_vec, s.query, &s.display, 1)
            .unwrap();
        let adv = vec![vec![0.0; r.actions.len()]];
        policy_update(&mut policy, &[r], &adv, &config, &mut adam).unwrap();
        assert_eq!(
            policy.params, before,
            "zero advantage and zero entropy bonus is a fixed point"
        );
    }

    #[test]
    fn train_gail_is_deterministic_and_matches_expert_trend() {
        let (catalog, oracle, logs) = tiny_setup(107, 80);
        let config = GailConfig {
            bc_steps: 250,
            iterations: 5,
            batch_lists: 16,
            policy_lr: 3e-3,
            ..tiny_config(7)
        };
        let (policy_a, _, curves_a) = train_gail(&catalog, &logs, 4, &config).unwrap();
        let (policy_b, _, curves_b) = train_gail(&catalog, &logs, 4, &config).unwrap();
        assert_eq!(policy_a.params, policy_b.params);
        assert_eq!(curves_a.bc_loss, curves_b.bc_loss);
        assert!(curves_a
            .bc_loss
            .iter()
            .chain(&curves_a.disc_loss)
            .all(|(_, v)| v.is_finite()));

        // The learned per-position click trend should roughly track the
        // oracle's (both computed over the same displays).
        let learned = position_trend(&policy_a, &catalog, &logs, 6).unwrap();
        let truth = position_trend(&oracle, &catalog, &logs, 6).unwrap();
        for t in 0..6 {
            assert!(
                (learned.click[t] - truth.click[t]).abs() < 0.25,
                "position {}: learned {} vs true {}",
                t + 1,
                learned.click[t],
                truth.click[t]
            );
        }
    }

    #[test]
    fn logged_trend_matches_manual_count() {
        let (catalog, _, logs) = tiny_setup(108, 30);
        let _ = catalog;
        let trend = logged_position_trend(&logs, 3, LabelTarget::Click).unwrap();
        for (t, &v) in trend.iter().enumerate() {
            let mut hits = 0.0;
            let mut n = 0.0;
            for s in &logs {
                if t < s.trace.len() {
                    hits += s.trace[t].is_click() as u8 as f64;
                    n += 1.0;
                }
            }
            assert_close(v, hits / n, 1e-12);
        }
    }
}
