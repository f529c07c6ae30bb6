//! Conversation policies: the max-entropy rule, a REINFORCE-trained policy
//! network, and the dual-policy scheme that keeps separate networks for
//! popular and unpopular targets.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::dataset::{AttrId, Catalog, ItemId, Tier, UserId};
use crate::error::{Error, Result};
use crate::nn::{Activation, Forward, Mlp};
use crate::recommender::FactorizationModel;
use crate::seed::{self, Rng};
use crate::simulator::{
    simulate_traced, Agent, Answer, Components, EpisodeLog, SessionConfig, TraceStep, TurnContext, TurnEvent,
};

pub const POLICY_HIDDEN: usize = 64;
pub const POLICY_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "attr", rename_all = "snake_case")]
pub enum Action {
    Ask(AttrId),
    Recommend,
}

impl Action {
    /// Ask actions occupy `0..n_attrs`, recommend is `n_attrs`.
    pub fn index(self, n_attrs: usize) -> usize {
        match self {
            Action::Ask(a) => a,
            Action::Recommend => n_attrs,
        }
    }

    pub fn from_index(index: usize, n_attrs: usize) -> Action {
        if index >= n_attrs {
            Action::Recommend
        } else {
            Action::Ask(index)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnOutcome {
    Confirmed,
    Denied,
    RecRejected,
}

impl TurnOutcome {
    pub fn code(self) -> f64 {
        match self {
            TurnOutcome::Confirmed => 1.0,
            TurnOutcome::Denied => -1.0,
            TurnOutcome::RecRejected => -2.0,
        }
    }
}

/// Evidence gathered so far in one conversation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    /// Completed agent turns.
    pub turn: usize,
    pub confirmed: Vec<AttrId>,
    pub rejected_attrs: BTreeSet<AttrId>,
    /// Attributes that can no longer be asked.
    pub asked: BTreeSet<AttrId>,
    pub rejected_items: BTreeSet<ItemId>,
    pub candidate_count: usize,
    pub history: Vec<TurnOutcome>,
}

impl BeliefState {
    /// Add a confirmed attribute without consuming a turn (session opener).
    pub fn confirm(&mut self, attr: AttrId) {
        if !self.confirmed.contains(&attr) {
            self.confirmed.push(attr);
        }
        self.asked.insert(attr);
    }

    pub fn record_answer(&mut self, catalog: &Catalog, attr: AttrId, answer: &Answer) {
        match answer {
            Answer::Yes => self.confirm(attr),
            Answer::No => {
                self.rejected_attrs.insert(attr);
                self.asked.insert(attr);
            }
            Answer::Values(values) => {
                if let Some(c) = catalog.category_of(attr) {
                    let members = &catalog.categories.as_ref().expect("category exists")[c];
                    self.asked.extend(members.iter().copied());
                }
                self.asked.insert(attr);
                for &v in values {
                    self.confirm(v);
                }
            }
        }
        self.history.push(if answer.is_positive() {
            TurnOutcome::Confirmed
        } else {
            TurnOutcome::Denied
        });
    }
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

/// Entropy of "candidate has attribute a" for every attribute; zero for
/// attributes already asked.
pub fn attribute_entropies(belief: &BeliefState, candidates: &[ItemId], catalog: &Catalog) -> Vec<f64> {
    let mut counts = vec![0usize; catalog.n_attrs];
    for &i in candidates {
        for &a in &catalog.items[i].attrs {
            counts[a] += 1;
        }
    }
    let n = candidates.len();
    counts
        .iter()
        .enumerate()
        .map(|(a, &c)| {
            if n == 0 || belief.asked.contains(&a) {
                0.0
            } else {
                binary_entropy(c as f64 / n as f64)
            }
        })
        .collect()
}

pub fn state_len(n_attrs: usize, max_turns: usize) -> usize {
    n_attrs + 2 + max_turns
}

/// `[entropy per attribute | turn/T | ln(1+|C|)/ln(1+|V|) | history code per turn]`.
pub fn encode_state(belief: &BeliefState, candidates: &[ItemId], catalog: &Catalog, max_turns: usize) -> Vec<f64> {
    let mut state = attribute_entropies(belief, candidates, catalog);
    state.reserve(2 + max_turns);
    state.push(belief.turn as f64 / max_turns.max(1) as f64);
    state.push((1.0 + candidates.len() as f64).ln() / (1.0 + catalog.n_items() as f64).ln());
    let mut history = vec![0.0; max_turns];
    for (slot, outcome) in history.iter_mut().zip(&belief.history) {
        *slot = outcome.code();
    }
    state.extend(history);
    state
}

/// Legal actions: unasked attributes, and recommend (always legal).
pub fn action_mask(belief: &BeliefState, n_attrs: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n_attrs).map(|a| !belief.asked.contains(&a)).collect();
    mask.push(true);
    mask
}

/// Recommend once the candidate set is small or no unasked attribute splits
/// it; otherwise ask the highest-entropy unasked attribute (lowest id on
/// ties).
pub fn max_entropy_action(belief: &BeliefState, candidates: &[ItemId], catalog: &Catalog, rec_threshold: usize) -> Action {
    if candidates.len() <= rec_threshold {
        return Action::Recommend;
    }
    let entropies = attribute_entropies(belief, candidates, catalog);
    let mut best: Option<(AttrId, f64)> = None;
    for (a, &h) in entropies.iter().enumerate() {
        if belief.asked.contains(&a) {
            continue;
        }
        if best.is_none_or(|(_, bh)| h > bh) {
            best = Some((a, h));
        }
    }
    match best {
        Some((a, h)) if h > 0.0 => Action::Ask(a),
        _ => Action::Recommend,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxEntropyAgent {
    pub rec_threshold: usize,
}

impl Agent for MaxEntropyAgent {
    fn decide(&self, ctx: &TurnContext<'_>, _rng: &mut Rng) -> Action {
        max_entropy_action(ctx.belief, ctx.candidates, ctx.catalog, self.rec_threshold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNetwork {
    pub net: Mlp,
    pub n_attrs: usize,
    pub max_turns: usize,
    /// Tier whose episodes trained this network, if restricted.
    pub trained_on: Option<Tier>,
}

fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    probs
}

impl PolicyNetwork {
    pub fn new(n_attrs: usize, max_turns: usize, seed: u64) -> Self {
        PolicyNetwork {
            net: Mlp::uniform(
                state_len(n_attrs, max_turns),
                POLICY_HIDDEN,
                n_attrs + 1,
                Activation::Tanh,
                POLICY_INIT_SCALE,
                seed,
            ),
            n_attrs,
            max_turns,
            trained_on: None,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_attrs + 1
    }

    pub fn logits(&self, state: &[f64]) -> Vec<f64> {
        self.net.forward(state).output
    }

    pub fn probabilities(&self, state: &[f64], mask: &[bool]) -> Vec<f64> {
        masked_softmax(&self.logits(state), mask)
    }

    fn forward_probs(&self, state: &[f64], mask: &[bool]) -> (Forward, Vec<f64>) {
        let fwd = self.net.forward(state);
        let probs = masked_softmax(&fwd.output, mask);
        (fwd, probs)
    }

    /// `ln π(action | state)` under the mask, and its gradient.
    pub fn log_prob_grad(&self, state: &[f64], mask: &[bool], action: usize) -> (f64, Vec<f64>) {
        let (fwd, probs) = self.forward_probs(state, mask);
        // d ln softmax_a / d logit_j = 1[j=a] - p_j over legal j
        let grad_logits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &p)| if j == action { 1.0 - p } else { -p })
            .collect();
        let mut grad = vec![0.0; self.net.params.len()];
        self.net.backward(state, &fwd, &grad_logits, 1.0, &mut grad);
        (probs[action].ln(), grad)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "policy_network",
            json!({
                "n_attrs": self.n_attrs,
                "max_turns": self.max_turns,
                "hidden": self.net.hidden,
                "activation": self.net.activation,
                "trained_on": self.trained_on,
            }),
        );
        ck.push("params", 1, self.net.params.len(), &self.net.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("policy_network")?;
        let meta = &ck.header.meta;
        let get = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let (n_attrs, max_turns, hidden) = (get("n_attrs")?, get("max_turns")?, get("hidden")?);
        let activation: Activation = serde_json::from_value(meta["activation"].clone())?;
        let trained_on: Option<Tier> = serde_json::from_value(meta["trained_on"].clone())?;
        let (input, output) = (state_len(n_attrs, max_turns), n_attrs + 1);
        let (_, params) = ck.array("params")?;
        if params.len() != Mlp::param_count(input, hidden, output) {
            return Err(Error::Checkpoint("policy parameter count mismatch".into()));
        }
        Ok(PolicyNetwork {
            net: Mlp {
                input,
                hidden,
                output,
                activation,
                params: params.to_vec(),
            },
            n_attrs,
            max_turns,
            trained_on,
        })
    }
}

pub enum SelectMode<'r> {
    Sample(&'r mut Rng),
    Greedy,
}

/// Pick an action from the masked softmax: sampled while training, argmax
/// (lowest index on ties) at evaluation. Returns the action index and its
/// log-probability.
pub fn select_action(policy: &PolicyNetwork, state: &[f64], mask: &[bool], mode: SelectMode<'_>) -> (usize, f64) {
    let probs = policy.probabilities(state, mask);
    let action = match mode {
        SelectMode::Greedy => {
            let mut best = policy.n_attrs;
            for (j, &p) in probs.iter().enumerate() {
                if mask[j] && (p > probs[best] || (p == probs[best] && j < best)) {
                    best = j;
                }
            }
            best
        }
        SelectMode::Sample(rng) => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = policy.n_attrs;
            for (j, &p) in probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                acc += p;
                chosen = j;
                if u < acc {
                    break;
                }
            }
            chosen
        }
    };
    (action, probs[action].ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkMode {
    Sample,
    Greedy,
}

pub struct NetworkAgent<'a> {
    pub policy: &'a PolicyNetwork,
    pub mode: NetworkMode,
}

fn network_decide(policy: &PolicyNetwork, mode: NetworkMode, ctx: &TurnContext<'_>, rng: &mut Rng) -> Action {
    let state = encode_state(ctx.belief, ctx.candidates, ctx.catalog, policy.max_turns);
    let mask = action_mask(ctx.belief, ctx.catalog.n_attrs);
    let select = match mode {
        NetworkMode::Sample => SelectMode::Sample(rng),
        NetworkMode::Greedy => SelectMode::Greedy,
    };
    Action::from_index(select_action(policy, &state, &mask, select).0, policy.n_attrs)
}

impl Agent for NetworkAgent<'_> {
    fn decide(&self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Action {
        network_decide(self.policy, self.mode, ctx, rng)
    }
}

/// One imitation example: state, mask and the teacher's action index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledState {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub label: usize,
}

/// `-ln π(label | state)` and its gradient.
pub fn cross_entropy_grad(policy: &PolicyNetwork, example: &LabeledState) -> (f64, Vec<f64>) {
    let (logp, mut grad) = policy.log_prob_grad(&example.state, &example.mask, example.label);
    grad.iter_mut().for_each(|g| *g = -*g);
    (-logp, grad)
}

pub fn accuracy(policy: &PolicyNetwork, examples: &[LabeledState]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples
        .iter()
        .filter(|e| select_action(policy, &e.state, &e.mask, SelectMode::Greedy).0 == e.label)
        .count();
    hits as f64 / examples.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Imitation of teacher actions by mini-batch SGD on cross-entropy. Returns
/// the training accuracy after the last epoch.
pub fn pretrain_classifier(policy: &mut PolicyNetwork, examples: &[LabeledState], cfg: &PretrainConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidParameter("no pretraining examples".into()));
    }
    let mut rng = seed::rng(seed::derive_named(cfg.seed, "pretrain"));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let grads: Vec<Vec<f64>> = chunk.par_iter().map(|&k| cross_entropy_grad(policy, &examples[k]).1).collect();
            let scale = cfg.learning_rate / chunk.len() as f64;
            for g in &grads {
                for (p, gk) in policy.net.params.iter_mut().zip(g) {
                    *p -= scale * gk;
                }
            }
        }
        if !policy.net.is_finite() {
            return Err(Error::Divergence(format!("policy pretraining diverged at epoch {epoch}")));
        }
    }
    Ok(accuracy(policy, examples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub gamma: f64,
    pub r_rec_success: f64,
    pub r_rec_fail_terminal: f64,
    pub r_conv_answer: f64,
    pub r_conv_reject: f64,
    pub w_rec: f64,
    pub w_conv: f64,
    pub w_bias: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            gamma: 0.7,
            r_rec_success: 1.0,
            r_rec_fail_terminal: -1.0,
            r_conv_answer: 0.1,
            r_conv_reject: -0.1,
            w_rec: 1.0,
            w_conv: 1.0,
            w_bias: -0.5,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!("gamma {} must lie in (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnReward {
    pub rec: f64,
    pub conv: f64,
    pub bias: f64,
}

impl TurnReward {
    pub fn weighted(&self, cfg: &RewardConfig) -> f64 {
        cfg.w_rec * self.rec + cfg.w_conv * self.conv + cfg.w_bias * self.bias
    }
}

/// Reward components of each turn: success or terminal failure, whether the
/// user accepted the prompt, and the exposure bias of the turn's list.
pub fn turn_rewards(log: &EpisodeLog, cfg: &RewardConfig) -> Vec<TurnReward> {
    let last = log.turns.len();
    log.turns
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut r = TurnReward {
                bias: t.exposure,
                ..TurnReward::default()
            };
            match &t.event {
                TurnEvent::Ask { answer, .. } => {
                    r.conv = if answer.is_positive() { cfg.r_conv_answer } else { cfg.r_conv_reject };
                }
                TurnEvent::Recommend { accepted: true } => r.rec = cfg.r_rec_success,
                TurnEvent::Recommend { accepted: false } => r.conv = cfg.r_conv_reject,
            }
            if k + 1 == last && !log.success {
                r.rec += cfg.r_rec_fail_terminal;
            }
            r
        })
        .collect()
}

/// `R_n = Σ_{k=n..N} γ^{k-n} (w_rec r_rec_k + w_conv r_conv_k + w_bias r_bias_k)`
/// with `n` 1-based.
pub fn episode_return(rewards: &[TurnReward], cfg: &RewardConfig, from_turn: usize) -> f64 {
    assert!(from_turn >= 1 && from_turn <= rewards.len(), "from_turn out of range");
    rewards[from_turn - 1..]
        .iter()
        .enumerate()
        .map(|(k, r)| cfg.gamma.powi(k as i32) * r.weighted(cfg))
        .sum()
}

/// `R_n` for every turn, by backward recursion.
pub fn discounted_returns(rewards: &[TurnReward], cfg: &RewardConfig) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (k, r) in rewards.iter().enumerate().rev() {
        acc = r.weighted(cfg) + cfg.gamma * acc;
        out[k] = acc;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReinforceStep {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub ret: f64,
}

/// One policy-gradient step per turn, in turn order:
/// `θ ← θ + α R_n ∇ ln π(a_n | s_n)`.
pub fn reinforce_update(policy: &mut PolicyNetwork, episode: &[ReinforceStep], alpha: f64) -> Result<()> {
    for (n, step) in episode.iter().enumerate() {
        if step.ret == 0.0 {
            continue;
        }
        let (_, grad) = policy.log_prob_grad(&step.state, &step.mask, step.action);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite policy gradient at turn {}", n + 1)));
        }
        let scale = alpha * step.ret;
        for (p, g) in policy.net.params.iter_mut().zip(&grad) {
            *p += scale * g;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub rec_threshold: usize,
    /// Teacher episodes recorded for imitation.
    pub pretrain_episodes: usize,
    pub pretrain: PretrainConfig,
    pub rl_episodes: usize,
    /// Episodes rolled out in parallel between update rounds.
    pub rl_batch: usize,
    pub alpha: f64,
    pub reward: RewardConfig,
    pub select_percentile: f64,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            rec_threshold: 10,
            pretrain_episodes: 600,
            pretrain: PretrainConfig::default(),
            rl_episodes: 1500,
            rl_batch: 16,
            alpha: 0.001,
            reward: RewardConfig::default(),
            select_percentile: 25.0,
            seed: 0,
        }
    }
}

fn sample_pairs(pool: &[(UserId, ItemId)], n: usize, rng: &mut Rng) -> Vec<(UserId, ItemId)> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// Pretrain on max-entropy demonstrations, then fine-tune with REINFORCE on
/// episodes whose targets are drawn from `pool`.
pub fn train_policy(
    catalog: &Catalog,
    model: &FactorizationModel,
    pool: &[(UserId, ItemId)],
    session: &SessionConfig,
    cfg: &PolicyTrainConfig,
    stream: &str,
) -> Result<PolicyNetwork> {
    cfg.reward.validate()?;
    let pool: Vec<(UserId, ItemId)> = pool
        .iter()
        .copied()
        .filter(|&(_, i)| !catalog.items[i].attrs.is_empty())
        .collect();
    if pool.is_empty() {
        return Err(Error::InvalidParameter(format!("no training episodes for policy {stream}")));
    }
    let base = seed::derive_named(cfg.seed, stream);
    let mut policy = PolicyNetwork::new(catalog.n_attrs, session.max_turns, seed::derive_named(base, "init"));

    // imitation of the max-entropy rule
    let teacher = MaxEntropyAgent {
        rec_threshold: cfg.rec_threshold,
    };
    let comps = Components {
        catalog,
        model,
        agent: &teacher,
    };
    let mut rng = seed::rng(seed::derive_named(base, "pretrain-pairs"));
    let demo_pairs = sample_pairs(&pool, cfg.pretrain_episodes, &mut rng);
    let demos: Vec<Vec<TraceStep>> = demo_pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(u, i))| {
            let mut trace = Vec::new();
            simulate_traced(&comps, u, i, session, seed::derive(base, k as u64), Some(&mut trace)).map(|_| trace)
        })
        .collect::<Result<_>>()?;
    let examples: Vec<LabeledState> = demos
        .into_iter()
        .flatten()
        .map(|s| LabeledState {
            state: s.state,
            mask: s.mask,
            label: s.action,
        })
        .collect();
    if !examples.is_empty() {
        let pretrain = PretrainConfig {
            seed: seed::derive_named(base, "pretrain"),
            ..cfg.pretrain.clone()
        };
        let acc = pretrain_classifier(&mut policy, &examples, &pretrain)?;
        log::info!("policy {stream}: imitation accuracy {acc:.3} on {} states", examples.len());
    }

    // REINFORCE fine-tuning
    let mut rng = seed::rng(seed::derive_named(base, "rl-pairs"));
    let rl_pairs = sample_pairs(&pool, cfg.rl_episodes, &mut rng);
    let mut successes = 0usize;
    for (round, chunk) in rl_pairs.chunks(cfg.rl_batch.max(1)).enumerate() {
        let agent = NetworkAgent {
            policy: &policy,
            mode: NetworkMode::Sample,
        };
        let comps = Components {
            catalog,
            model,
            agent: &agent,
        };
        let rollouts: Vec<(EpisodeLog, Vec<TraceStep>)> = chunk
            .par_iter()
            .enumerate()
            .map(|(k, &(u, i))| {
                let mut trace = Vec::new();
                let ep_seed = seed::derive(seed::derive_named(base, "rl"), (round * cfg.rl_batch.max(1) + k) as u64);
                simulate_traced(&comps, u, i, session, ep_seed, Some(&mut trace)).map(|log| (log, trace))
            })
            .collect::<Result<_>>()?;
        for (log, trace) in rollouts {
            successes += log.success as usize;
            let returns = discounted_returns(&turn_rewards(&log, &cfg.reward), &cfg.reward);
            let steps: Vec<ReinforceStep> = trace
                .into_iter()
                .zip(returns)
                .map(|(t, ret)| ReinforceStep {
                    state: t.state,
                    mask: t.mask,
                    action: t.action,
                    ret,
                })
                .collect();
            reinforce_update(&mut policy, &steps, cfg.alpha)?;
        }
    }
    log::info!(
        "policy {stream}: {} REINFORCE episodes, training success rate {:.3}",
        rl_pairs.len(),
        successes as f64 / rl_pairs.len().max(1) as f64
    );
    Ok(policy)
}

/// Which dual network a training episode feeds, by target tier.
pub fn route_tier(tier: Tier) -> Option<Tier> {
    match tier {
        Tier::Head => Some(Tier::Head),
        Tier::Tail => Some(Tier::Tail),
        Tier::Mid => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPolicy {
    pub pn_pop: PolicyNetwork,
    pub pn_unpop: PolicyNetwork,
    pub select_percentile: f64,
    /// Popularity at `select_percentile` over all items.
    pub select_threshold: f64,
}

/// Train one network on head-target episodes and one on tail-target
/// episodes; mid-tier targets are not used.
pub fn train_dual(
    catalog: &Catalog,
    model: &FactorizationModel,
    pool: &[(UserId, ItemId)],
    session: &SessionConfig,
    cfg: &PolicyTrainConfig,
) -> Result<DualPolicy> {
    let mut head = Vec::new();
    let mut tail = Vec::new();
    for &(u, i) in pool {
        match route_tier(catalog.items[i].tier) {
            Some(Tier::Head) => head.push((u, i)),
            Some(Tier::Tail) => tail.push((u, i)),
            _ => {}
        }
    }
    if head.is_empty() {
        return Err(Error::EmptyTier(Tier::Head));
    }
    if tail.is_empty() {
        return Err(Error::EmptyTier(Tier::Tail));
    }
    log::info!("dual policy: {} head episodes, {} tail episodes in pool", head.len(), tail.len());
    let mut pn_pop = train_policy(catalog, model, &head, session, cfg, "pn-pop")?;
    pn_pop.trained_on = Some(Tier::Head);
    let mut pn_unpop = train_policy(catalog, model, &tail, session, cfg, "pn-unpop")?;
    pn_unpop.trained_on = Some(Tier::Tail);
    Ok(DualPolicy {
        pn_pop,
        pn_unpop,
        select_percentile: cfg.select_percentile,
        select_threshold: catalog.popularity_percentile(cfg.select_percentile),
    })
}

/// The popular-item network iff the target's popularity is strictly above
/// the selection threshold.
pub fn choose_network(dual: &DualPolicy, target_popularity: f64) -> &PolicyNetwork {
    if target_popularity > dual.select_threshold {
        &dual.pn_pop
    } else {
        &dual.pn_unpop
    }
}

pub struct DualAgent<'a> {
    pub dual: &'a DualPolicy,
    pub mode: NetworkMode,
}

impl Agent for DualAgent<'_> {
    fn decide(&self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Action {
        network_decide(choose_network(self.dual, ctx.target_popularity), self.mode, ctx, rng)
    }
}
