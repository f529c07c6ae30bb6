//! System-ask/user-respond conversation loop with a truthful simulated user
//! who has one target item in mind.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttrId, Catalog, ItemId, ItemRecord, Tier, UserId};
use crate::error::{Error, Result};
use crate::metrics::exposure_bias_turn;
use crate::policy::{action_mask, encode_state, Action, BeliefState, TurnOutcome};
use crate::recommender::{top_k, FactorizationModel};
use crate::seed::{self, Rng};

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionMode {
    /// Yes/no per attribute.
    Binary,
    /// The user names every value they want within the asked attribute's
    /// category. Falls back to binary when the catalog has no categories.
    Enumerated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub max_turns: usize,
    pub top_k: usize,
    pub question_mode: QuestionMode,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            max_turns: 15,
            top_k: 10,
            question_mode: QuestionMode::Binary,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_turns == 0 || self.top_k == 0 {
            return Err(Error::InvalidParameter("max_turns and top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    /// Target's values within the asked category (possibly empty).
    Values(Vec<AttrId>),
}

impl Answer {
    pub fn is_positive(&self) -> bool {
        match self {
            Answer::Yes => true,
            Answer::No => false,
            Answer::Values(v) => !v.is_empty(),
        }
    }
}

pub fn user_respond(target: &ItemRecord, catalog: &Catalog, question: AttrId, mode: QuestionMode) -> Answer {
    if mode == QuestionMode::Enumerated {
        if let (Some(cats), Some(c)) = (&catalog.categories, catalog.category_of(question)) {
            let values = cats[c].iter().copied().filter(|&a| target.has_attr(a)).collect::<BTreeSet<_>>();
            return Answer::Values(values.into_iter().collect());
        }
    }
    if target.has_attr(question) {
        Answer::Yes
    } else {
        Answer::No
    }
}

/// Items holding every confirmed attribute, none of the rejected ones, and
/// not already turned down.
pub fn update_candidates(catalog: &Catalog, belief: &BeliefState) -> Vec<ItemId> {
    catalog
        .items
        .iter()
        .filter(|it| {
            !belief.rejected_items.contains(&it.id)
                && belief.confirmed.iter().all(|&a| it.has_attr(a))
                && !belief.rejected_attrs.iter().any(|&a| it.has_attr(a))
        })
        .map(|it| it.id)
        .collect()
}

/// What an agent sees when choosing its next move.
pub struct TurnContext<'a> {
    pub catalog: &'a Catalog,
    pub belief: &'a BeliefState,
    pub candidates: &'a [ItemId],
    pub session: &'a SessionConfig,
    /// Popularity of the target. Only routing between dual policies reads it.
    pub target_popularity: f64,
}

pub trait Agent: Sync {
    fn decide(&self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Action;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShownItem {
    pub item: ItemId,
    /// 1-based.
    pub rank: usize,
    pub popularity: f64,
    pub head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnEvent {
    Ask { attr: AttrId, answer: Answer },
    Recommend { accepted: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// 1-based.
    pub turn: usize,
    /// Candidate count when the turn started.
    pub candidates: usize,
    /// Top-K list the system would show at this turn; on recommend turns
    /// this is the list actually shown.
    pub shown: Vec<ShownItem>,
    /// Exposure bias of `shown`.
    pub exposure: f64,
    pub event: TurnEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub schema_version: u32,
    pub user: UserId,
    pub target: ItemId,
    pub target_popularity: f64,
    pub target_tier: Tier,
    pub turns: Vec<TurnRecord>,
    pub success: bool,
    pub turns_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Per-turn features recorded for policy learning.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
}

/// Everything an episode needs besides the user, target and seed.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub catalog: &'a Catalog,
    pub model: &'a FactorizationModel,
    pub agent: &'a dyn Agent,
}

pub fn simulate_episode(
    comps: &Components<'_>,
    user: UserId,
    target: ItemId,
    session: &SessionConfig,
    seed: u64,
) -> Result<EpisodeLog> {
    simulate_traced(comps, user, target, session, seed, None)
}

/// [`simulate_episode`] that also records the encoded state, action mask and
/// chosen action index of every turn into `trace`.
pub fn simulate_traced(
    comps: &Components<'_>,
    user: UserId,
    target: ItemId,
    session: &SessionConfig,
    seed: u64,
    mut trace: Option<&mut Vec<TraceStep>>,
) -> Result<EpisodeLog> {
    session.validate()?;
    let catalog = comps.catalog;
    let thresholds = catalog.require_annotated()?;
    let item = catalog
        .items
        .get(target)
        .ok_or_else(|| Error::Validation(format!("unknown target item {target}")))?;
    if item.attrs.is_empty() {
        return Err(Error::Validation(format!("target item {target} has no attributes")));
    }
    let mut rng = seed::rng(seed);

    let mut belief = BeliefState::default();
    let opener = *item.attrs.choose(&mut rng).expect("non-empty");
    belief.confirm(opener);
    let mut candidates = update_candidates(catalog, &belief);

    let mut log = EpisodeLog {
        schema_version: EPISODE_SCHEMA_VERSION,
        user,
        target,
        target_popularity: item.popularity,
        target_tier: item.tier,
        turns: Vec::with_capacity(session.max_turns),
        success: false,
        turns_used: 0,
        failure: None,
    };

    for turn in 1..=session.max_turns {
        belief.turn = turn - 1;
        belief.candidate_count = candidates.len();
        let ranked = top_k(comps.model, user, &belief.confirmed, &candidates, session.top_k);
        let shown: Vec<ShownItem> = ranked
            .iter()
            .enumerate()
            .map(|(r, &i)| ShownItem {
                item: i,
                rank: r + 1,
                popularity: catalog.items[i].popularity,
                head: catalog.items[i].tier == Tier::Head,
            })
            .collect();
        let exposure = if shown.is_empty() { 0.0 } else { exposure_bias_turn(&shown, thresholds.head) };

        let ctx = TurnContext {
            catalog,
            belief: &belief,
            candidates: &candidates,
            session,
            target_popularity: item.popularity,
        };
        let mut action = comps.agent.decide(&ctx, &mut rng);
        if let Action::Ask(a) = action {
            if a >= catalog.n_attrs || belief.asked.contains(&a) {
                log::warn!("agent asked unavailable attribute {a}; recommending instead");
                action = Action::Recommend;
            }
        }
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(TraceStep {
                state: encode_state(&belief, &candidates, catalog, session.max_turns),
                mask: action_mask(&belief, catalog.n_attrs),
                action: action.index(catalog.n_attrs),
            });
        }

        let event = match action {
            Action::Ask(attr) => {
                let answer = user_respond(item, catalog, attr, session.question_mode);
                belief.record_answer(catalog, attr, &answer);
                candidates = update_candidates(catalog, &belief);
                TurnEvent::Ask { attr, answer }
            }
            Action::Recommend => {
                let accepted = ranked.contains(&target);
                if accepted {
                    log.success = true;
                } else {
                    belief.rejected_items.extend(ranked.iter().copied());
                    belief.history.push(TurnOutcome::RecRejected);
                    candidates.retain(|i| !belief.rejected_items.contains(i));
                }
                TurnEvent::Recommend { accepted }
            }
        };
        log.turns.push(TurnRecord {
            turn,
            candidates: belief.candidate_count,
            shown,
            exposure,
            event,
        });
        log.turns_used = turn;
        if log.success {
            break;
        }
        if candidates.is_empty() {
            log.failure = Some("exhausted".into());
            break;
        }
    }
    belief.turn = log.turns_used;
    if !log.success && log.failure.is_none() {
        log.failure = Some("max_turns".into());
    }
    Ok(log)
}

/// One episode per `(user, item)` pair. Episode `k` is seeded from
/// `(seed, k)`, so output is independent of `parallelism`. Pairs whose
/// target has no attributes are skipped.
pub fn run_suite(
    pairs: &[(UserId, ItemId)],
    comps: &Components<'_>,
    session: &SessionConfig,
    parallelism: usize,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    let usable: Vec<(usize, (UserId, ItemId))> = pairs
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, (_, i))| !comps.catalog.items[*i].attrs.is_empty())
        .collect();
    if usable.len() < pairs.len() {
        log::warn!("skipping {} test pairs whose target has no attributes", pairs.len() - usable.len());
    }
    let run = |&(k, (u, i)): &(usize, (UserId, ItemId))| simulate_episode(comps, u, i, session, seed::derive(seed, k as u64));
    if parallelism <= 1 {
        return usable.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| usable.par_iter().map(run).collect())
}

pub fn write_episodes_jsonl(logs: &[EpisodeLog], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for log in logs {
        serde_json::to_writer(&mut w, log)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes_jsonl(path: &std::path::Path) -> Result<Vec<EpisodeLog>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let log: EpisodeLog = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if log.schema_version != EPISODE_SCHEMA_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("unsupported schema_version {}", log.schema_version),
            });
        }
        out.push(log);
    }
    Ok(out)
}
