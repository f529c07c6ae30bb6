//! Embedding scorer `u·v + Σ_a v·a`, trained with pairwise BPR or with the
//! popularity-aware focused variant (PAL), plus ranking, AUC evaluation and
//! the popularity/embedding-magnitude diagnostic.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::dataset::{AttrId, Catalog, DataSplit, ItemId, Tier, UserId};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationModel {
    pub dim: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
    pub attr_emb: Vec<f64>,
}

pub const INIT_SCALE: f64 = 0.01;

impl FactorizationModel {
    /// Every entry uniform in `[-0.01, 0.01]`.
    pub fn init(n_users: usize, n_items: usize, n_attrs: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut table = |rows: usize| -> Vec<f64> {
            (0..rows * dim).map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE)).collect()
        };
        let user_emb = table(n_users);
        let item_emb = table(n_items);
        let attr_emb = table(n_attrs);
        FactorizationModel {
            dim,
            n_users,
            n_items,
            n_attrs,
            user_emb,
            item_emb,
            attr_emb,
        }
    }

    pub fn for_catalog(catalog: &Catalog, dim: usize, seed: u64) -> Self {
        Self::init(catalog.n_users, catalog.n_items(), catalog.n_attrs, dim, seed)
    }

    pub fn user(&self, u: UserId) -> &[f64] {
        &self.user_emb[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: ItemId) -> &[f64] {
        &self.item_emb[i * self.dim..(i + 1) * self.dim]
    }

    pub fn attr(&self, a: AttrId) -> &[f64] {
        &self.attr_emb[a * self.dim..(a + 1) * self.dim]
    }

    pub fn user_mut(&mut self, u: UserId) -> &mut [f64] {
        &mut self.user_emb[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_mut(&mut self, i: ItemId) -> &mut [f64] {
        &mut self.item_emb[i * self.dim..(i + 1) * self.dim]
    }

    pub fn attr_mut(&mut self, a: AttrId) -> &mut [f64] {
        &mut self.attr_emb[a * self.dim..(a + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb
            .iter()
            .chain(&self.item_emb)
            .chain(&self.attr_emb)
            .all(|v| v.is_finite())
    }

    /// `u + Σ_a a`: the vector every candidate item is dotted with.
    pub fn query(&self, user: UserId, pref_attrs: &[AttrId]) -> Vec<f64> {
        let mut q = self.user(user).to_vec();
        for &a in pref_attrs {
            for (qk, ak) in q.iter_mut().zip(self.attr(a)) {
                *qk += ak;
            }
        }
        q
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "factorization_model",
            json!({ "dim": self.dim, "n_users": self.n_users, "n_items": self.n_items, "n_attrs": self.n_attrs, "config": meta }),
        );
        ck.push("user_emb", self.n_users, self.dim, &self.user_emb);
        ck.push("item_emb", self.n_items, self.dim, &self.item_emb);
        ck.push("attr_emb", self.n_attrs, self.dim, &self.attr_emb);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("factorization_model")?;
        let (u, user_emb) = ck.array("user_emb")?;
        let (i, item_emb) = ck.array("item_emb")?;
        let (a, attr_emb) = ck.array("attr_emb")?;
        if u.cols != i.cols || i.cols != a.cols {
            return Err(Error::Checkpoint("embedding tables disagree on dimension".into()));
        }
        Ok(FactorizationModel {
            dim: u.cols,
            n_users: u.rows,
            n_items: i.rows,
            n_attrs: a.rows,
            user_emb: user_emb.to_vec(),
            item_emb: item_emb.to_vec(),
            attr_emb: attr_emb.to_vec(),
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Predicted preference `u·v + Σ_{a ∈ pref_attrs} v·a`.
pub fn score(model: &FactorizationModel, user: UserId, item: ItemId, pref_attrs: &[AttrId]) -> f64 {
    dot(model.item(item), &model.query(user, pref_attrs))
}

/// Candidates sorted by descending score, ties by ascending item id.
pub fn rank_candidates(
    model: &FactorizationModel,
    user: UserId,
    pref_attrs: &[AttrId],
    candidates: &[ItemId],
) -> Vec<ItemId> {
    top_k(model, user, pref_attrs, candidates, candidates.len())
}

/// The first `k` entries of [`rank_candidates`], without sorting the rest.
pub fn top_k(
    model: &FactorizationModel,
    user: UserId,
    pref_attrs: &[AttrId],
    candidates: &[ItemId],
    k: usize,
) -> Vec<ItemId> {
    let q = model.query(user, pref_attrs);
    let mut scored: Vec<(f64, ItemId)> = candidates.iter().map(|&i| (dot(model.item(i), &q), i)).collect();
    let order = |a: &(f64, ItemId), b: &(f64, ItemId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(order);
    scored.into_iter().map(|(_, i)| i).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Leave the model at its random initialization.
    None,
    Bpr,
    Pal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PalConfig {
    pub dim: usize,
    pub n1: f64,
    pub n2: f64,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub neg_samples: usize,
    pub seed: u64,
}

impl Default for PalConfig {
    fn default() -> Self {
        PalConfig {
            dim: 64,
            n1: 7.0,
            n2: 8.0,
            lambda_reg: 1e-3,
            learning_rate: 0.01,
            epochs: 30,
            neg_samples: 1,
            seed: 0,
        }
    }
}

/// How a training triple is weighted, as a function of the positive item's
/// popularity `p`: `(sample weight, coefficient on ‖v_pos‖²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossWeighting {
    Uniform { item_norm: f64 },
    PopularityAware { n1: f64, n2: f64 },
}

impl LossWeighting {
    pub fn for_mode(mode: TrainMode, cfg: &PalConfig) -> Self {
        match mode {
            TrainMode::Pal => LossWeighting::PopularityAware { n1: cfg.n1, n2: cfg.n2 },
            TrainMode::Bpr | TrainMode::None => LossWeighting::Uniform {
                item_norm: cfg.lambda_reg,
            },
        }
    }

    pub fn weights(&self, popularity: f64) -> (f64, f64) {
        match *self {
            LossWeighting::Uniform { item_norm } => (1.0, item_norm),
            LossWeighting::PopularityAware { n1, n2 } => ((-n1 * popularity).exp(), (n2 * popularity).exp()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Triple<'a> {
    pub user: UserId,
    pub pos: ItemId,
    pub neg: ItemId,
    pub pref_attrs: &'a [AttrId],
    pub popularity: f64,
}

/// Loss of one triple and its gradient with respect to every row it touches.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub grad_user: Vec<f64>,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
    /// Aligned with `Triple::pref_attrs`.
    pub grad_attrs: Vec<Vec<f64>>,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `w·[-ln σ(ŷ_pos - ŷ_neg)] + c·‖v_pos‖² + λ(‖u‖² + ‖v_neg‖² + Σ‖a‖²)` with
/// `(w, c)` from `weighting` and analytic gradients.
///
/// `pref_attrs` must not contain duplicates.
pub fn loss_terms(model: &FactorizationModel, t: &Triple<'_>, weighting: &LossWeighting, lambda_reg: f64) -> LossTerms {
    let (w, c) = weighting.weights(t.popularity);
    let u = model.user(t.user);
    let p = model.item(t.pos);
    let n = model.item(t.neg);
    let q = model.query(t.user, t.pref_attrs);
    let diff: Vec<f64> = p.iter().zip(n).map(|(a, b)| a - b).collect();
    let x = dot(&q, &diff);

    let attr_sq: f64 = t.pref_attrs.iter().map(|&a| sq_norm(model.attr(a))).sum();
    let loss = w * softplus(-x) + c * sq_norm(p) + lambda_reg * (sq_norm(u) + sq_norm(n) + attr_sq);

    // d/dx of w·softplus(-x)
    let g = -w * sigmoid(-x);
    let grad_user = diff.iter().zip(u).map(|(d, uk)| g * d + 2.0 * lambda_reg * uk).collect();
    let grad_pos = q.iter().zip(p).map(|(qk, pk)| g * qk + 2.0 * c * pk).collect();
    let grad_neg = q.iter().zip(n).map(|(qk, nk)| -g * qk + 2.0 * lambda_reg * nk).collect();
    let grad_attrs = t
        .pref_attrs
        .iter()
        .map(|&a| diff.iter().zip(model.attr(a)).map(|(d, ak)| g * d + 2.0 * lambda_reg * ak).collect())
        .collect();
    LossTerms {
        loss,
        grad_user,
        grad_pos,
        grad_neg,
        grad_attrs,
    }
}

/// [`loss_terms`] with the popularity-aware weighting of `cfg`.
pub fn pal_loss_terms(model: &FactorizationModel, t: &Triple<'_>, cfg: &PalConfig) -> LossTerms {
    loss_terms(
        model,
        t,
        &LossWeighting::PopularityAware { n1: cfg.n1, n2: cfg.n2 },
        cfg.lambda_reg,
    )
}

fn sgd(row: &mut [f64], grad: &[f64], lr: f64) {
    for (r, g) in row.iter_mut().zip(grad) {
        *r -= lr * g;
    }
}

/// Step on `f + c‖v‖²` that takes the gradient of `f` explicitly and the
/// norm penalty implicitly: `v ← (v − lr·∇f) / (1 + 2·lr·c)`. `grad` is the
/// full gradient, penalty included. Agrees with plain SGD to first order in
/// `lr` but stays contractive however large `c` gets.
fn proximal_norm_step(row: &mut [f64], grad: &[f64], c: f64, lr: f64) {
    let shrink = 1.0 + 2.0 * lr * c;
    for (r, g) in row.iter_mut().zip(grad) {
        let smooth = g - 2.0 * c * *r;
        *r = (*r - lr * smooth) / shrink;
    }
}

/// Train a model on `split.train` with BPR or PAL.
pub fn train(catalog: &Catalog, split: &DataSplit, cfg: &PalConfig, mode: TrainMode) -> Result<FactorizationModel> {
    train_with_weighting(catalog, split, cfg, LossWeighting::for_mode(mode, cfg), mode != TrainMode::None)
}

/// Training loop with an explicit weighting. Per epoch the training pairs
/// are shuffled and each positive is paired with `neg_samples` warm items
/// the user has not interacted with; the positive item's attributes act as
/// the preferred attribute set. Cold items are never touched. The positive
/// item's norm penalty is applied as a proximal step.
pub fn train_with_weighting(
    catalog: &Catalog,
    split: &DataSplit,
    cfg: &PalConfig,
    weighting: LossWeighting,
    update: bool,
) -> Result<FactorizationModel> {
    catalog.require_annotated()?;
    if split.train.is_empty() {
        return Err(Error::InvalidParameter("train split is empty".into()));
    }
    if cfg.dim == 0 || cfg.neg_samples == 0 {
        return Err(Error::InvalidParameter("dim and neg_samples must be positive".into()));
    }
    let mut model = FactorizationModel::for_catalog(catalog, cfg.dim, seed::derive_named(cfg.seed, "model-init"));
    if !update {
        return Ok(model);
    }

    let warm: Vec<ItemId> = catalog.items.iter().filter(|i| !i.cold).map(|i| i.id).collect();
    let seen: Vec<HashSet<ItemId>> = crate::dataset::items_by_user(catalog.n_users, &split.train)
        .into_iter()
        .map(|v| v.into_iter().collect())
        .collect();
    let mut pairs = split.train.clone();
    let mut rng = seed::rng(seed::derive_named(cfg.seed, "model-train"));

    for epoch in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &(user, pos) in &pairs {
            if seen[user].len() >= warm.len() {
                continue;
            }
            let item = &catalog.items[pos];
            for _ in 0..cfg.neg_samples {
                let neg = loop {
                    let cand = warm[rng.gen_range(0..warm.len())];
                    if !seen[user].contains(&cand) {
                        break cand;
                    }
                };
                let triple = Triple {
                    user,
                    pos,
                    neg,
                    pref_attrs: &item.attrs,
                    popularity: item.popularity,
                };
                let terms = loss_terms(&model, &triple, &weighting, cfg.lambda_reg);
                if !terms.loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at epoch {epoch} (user {user}, item {pos}); lower the learning rate or n2"
                    )));
                }
                total += terms.loss;
                count += 1;
                let lr = cfg.learning_rate;
                sgd(model.user_mut(user), &terms.grad_user, lr);
                let (_, c) = weighting.weights(item.popularity);
                proximal_norm_step(model.item_mut(pos), &terms.grad_pos, c, lr);
                sgd(model.item_mut(neg), &terms.grad_neg, lr);
                for (&a, g) in item.attrs.iter().zip(&terms.grad_attrs) {
                    sgd(model.attr_mut(a), g, lr);
                }
            }
        }
        let mean = total / count.max(1) as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: mean loss {mean:.5}");
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemGroup {
    Head,
    Tail,
    Cold,
    All,
}

impl ItemGroup {
    pub fn contains(self, item: &crate::dataset::ItemRecord) -> bool {
        match self {
            ItemGroup::Head => item.tier == Tier::Head,
            ItemGroup::Tail => item.tier == Tier::Tail,
            ItemGroup::Cold => item.cold,
            ItemGroup::All => true,
        }
    }
}

pub const AUC_NEGATIVES: usize = 100;

/// Sampled AUC on test pairs whose positive item is in `group`. Each pair is
/// compared against up to 100 items the user never interacted with (all of
/// them when fewer exist); ties count one half. Scores use the positive
/// item's attributes as the preferred set, as a conversation that has
/// elicited the target's attributes would. `None` when no test pair falls in
/// the group.
pub fn auc_item_prediction(
    model: &FactorizationModel,
    catalog: &Catalog,
    split: &DataSplit,
    group: ItemGroup,
    seed: u64,
) -> Option<f64> {
    let interacted: Vec<HashSet<ItemId>> = catalog
        .items_by_user()
        .into_iter()
        .map(|v| v.into_iter().collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (idx, &(user, pos)) in split.test.iter().enumerate() {
        if !group.contains(&catalog.items[pos]) {
            continue;
        }
        let mut pool: Vec<ItemId> = (0..catalog.n_items()).filter(|i| !interacted[user].contains(i)).collect();
        if pool.is_empty() {
            continue;
        }
        if pool.len() > AUC_NEGATIVES {
            let mut rng = seed::rng(seed::derive(seed, idx as u64));
            let (chosen, _) = pool.partial_shuffle(&mut rng, AUC_NEGATIVES);
            pool = chosen.to_vec();
        }
        let pref = &catalog.items[pos].attrs;
        let pos_score = score(model, user, pos, pref);
        let wins: f64 = pool
            .iter()
            .map(|&neg| {
                let s = score(model, user, neg, pref);
                if pos_score > s {
                    1.0
                } else if pos_score == s {
                    0.5
                } else {
                    0.0
                }
            })
            .sum();
        total += wins / pool.len() as f64;
        pairs += 1;
    }
    (pairs > 0).then(|| total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMagnitude {
    pub item: ItemId,
    pub popularity: f64,
    pub sq_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeReport {
    pub rows: Vec<ItemMagnitude>,
    /// Spearman correlation over non-cold items; `None` when degenerate.
    pub spearman: Option<f64>,
}

pub fn magnitude_report(model: &FactorizationModel, catalog: &Catalog) -> MagnitudeReport {
    let rows: Vec<ItemMagnitude> = catalog
        .items
        .iter()
        .map(|it| ItemMagnitude {
            item: it.id,
            popularity: it.popularity,
            sq_norm: sq_norm(model.item(it.id)),
        })
        .collect();
    let (pops, norms): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| !catalog.items[r.item].cold)
        .map(|r| (r.popularity, r.sq_norm))
        .unzip();
    MagnitudeReport {
        spearman: spearman(&pops, &norms),
        rows,
    }
}

/// Ranks starting at 1, ties get their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation; `None` if either side is constant or empty.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
