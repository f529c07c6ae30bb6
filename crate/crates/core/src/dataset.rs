//! Users, items, attributes and interactions: loading, filtering, splitting,
//! popularity tiers, and a synthetic long-tail corpus generator.
//!
//! On-disk format is line oriented and tab separated:
//!
//! * interactions: `user<TAB>item` (extra columns are ignored)
//! * items: `item<TAB>attr,attr,...`
//! * categories (optional): `category<TAB>attr,attr,...`
//!
//! Blank lines and lines starting with `#` are skipped. Labels are arbitrary
//! tokens; they are re-indexed to dense 0-based ids on load.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type UserId = usize;
pub type ItemId = usize;
pub type AttrId = usize;

/// Head items lie above this percentile of item popularity.
pub const HEAD_PERCENTILE: f64 = 80.0;
/// Tail items lie below this percentile of item popularity.
pub const TAIL_PERCENTILE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Head,
    Mid,
    Tail,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Head => "head",
            Tier::Mid => "mid",
            Tier::Tail => "tail",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: ItemId,
    /// Sorted, deduplicated.
    pub attrs: Vec<AttrId>,
    pub popularity: f64,
    pub tier: Tier,
    pub cold: bool,
}

impl ItemRecord {
    fn unannotated(id: ItemId, mut attrs: Vec<AttrId>) -> Self {
        attrs.sort_unstable();
        attrs.dedup();
        ItemRecord {
            id,
            attrs,
            popularity: 0.0,
            tier: Tier::Tail,
            cold: true,
        }
    }

    pub fn has_attr(&self, attr: AttrId) -> bool {
        self.attrs.binary_search(&attr).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierThresholds {
    /// 80th percentile popularity; strictly greater is head.
    pub head: f64,
    /// 20th percentile popularity; strictly smaller (or cold) is tail.
    pub tail: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub n_users: usize,
    pub items: Vec<ItemRecord>,
    pub n_attrs: usize,
    pub interactions: Vec<(UserId, ItemId)>,
    /// Optional grouping of attributes into categories (enumerated questions).
    pub categories: Option<Vec<Vec<AttrId>>>,
    /// Set by [`compute_popularity_and_tiers`].
    pub thresholds: Option<TierThresholds>,
    pub user_labels: Vec<String>,
    pub item_labels: Vec<String>,
    pub attr_labels: Vec<String>,
}

impl Catalog {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn is_annotated(&self) -> bool {
        self.thresholds.is_some()
    }

    pub fn require_annotated(&self) -> Result<TierThresholds> {
        self.thresholds.ok_or_else(|| {
            Error::Validation("catalog has no popularity annotation; run compute_popularity_and_tiers".into())
        })
    }

    pub fn category_of(&self, attr: AttrId) -> Option<usize> {
        self.categories
            .as_ref()?
            .iter()
            .position(|members| members.contains(&attr))
    }

    /// Nearest-rank percentile over the popularity of every item.
    pub fn popularity_percentile(&self, p: f64) -> f64 {
        let mut pops: Vec<f64> = self.items.iter().map(|i| i.popularity).collect();
        pops.sort_by(f64::total_cmp);
        nearest_rank_percentile(&pops, p)
    }

    /// Interaction lists per user, in interaction order.
    pub fn items_by_user(&self) -> Vec<Vec<ItemId>> {
        items_by_user(self.n_users, &self.interactions)
    }

    pub fn validate(&self) -> Result<()> {
        for (u, i) in &self.interactions {
            if *u >= self.n_users {
                return Err(Error::Validation(format!("interaction references unknown user {u}")));
            }
            if *i >= self.items.len() {
                return Err(Error::Validation(format!("interaction references unknown item {i}")));
            }
        }
        for (idx, item) in self.items.iter().enumerate() {
            if item.id != idx {
                return Err(Error::Validation(format!("item at position {idx} has id {}", item.id)));
            }
            if let Some(a) = item.attrs.iter().find(|&&a| a >= self.n_attrs) {
                return Err(Error::Validation(format!(
                    "item {idx} has attribute {a} outside vocabulary of size {}",
                    self.n_attrs
                )));
            }
        }
        if let Some(cats) = &self.categories {
            let mut seen = HashSet::new();
            for members in cats {
                for &a in members {
                    if a >= self.n_attrs || !seen.insert(a) {
                        return Err(Error::Validation(format!(
                            "attribute {a} is out of range or belongs to several categories"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> CatalogStats {
        CatalogStats {
            users: self.n_users,
            items: self.items.len(),
            interactions: self.interactions.len(),
            attributes: self.n_attrs,
            head_threshold: self.thresholds.map(|t| t.head),
            tail_threshold: self.thresholds.map(|t| t.tail),
            cold_items: self.items.iter().filter(|i| i.cold).count(),
            head_items: self.items.iter().filter(|i| i.tier == Tier::Head).count(),
            tail_items: self.items.iter().filter(|i| i.tier == Tier::Tail).count(),
        }
    }
}

pub(crate) fn items_by_user(n_users: usize, pairs: &[(UserId, ItemId)]) -> Vec<Vec<ItemId>> {
    let mut out = vec![Vec::new(); n_users];
    for &(u, i) in pairs {
        out[u].push(i);
    }
    out
}

/// Summary written to `stats.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub attributes: usize,
    pub head_threshold: Option<f64>,
    pub tail_threshold: Option<f64>,
    pub cold_items: usize,
    pub head_items: usize,
    pub tail_items: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogFiles {
    pub interactions: PathBuf,
    pub items: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<PathBuf>,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .collect())
}

fn parse_list(field: &str) -> Vec<String> {
    field
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Numeric labels sort numerically, everything else lexicographically.
fn sort_labels(labels: &mut [String]) {
    labels.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        _ => a.cmp(b),
    });
}

pub fn load_catalog(files: &CatalogFiles) -> Result<Catalog> {
    let parse_err = |path: &Path, line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut item_labels = Vec::new();
    let mut item_index: HashMap<String, ItemId> = HashMap::new();
    let mut raw_attrs: Vec<Vec<String>> = Vec::new();
    for (line, text) in read_lines(&files.items)? {
        let mut fields = text.splitn(2, '\t');
        let label = fields.next().unwrap_or("").trim();
        if label.is_empty() {
            return Err(parse_err(&files.items, line, "missing item id".into()));
        }
        if item_index.insert(label.to_string(), item_labels.len()).is_some() {
            return Err(parse_err(&files.items, line, format!("duplicate item {label}")));
        }
        item_labels.push(label.to_string());
        raw_attrs.push(fields.next().map(parse_list).unwrap_or_default());
    }

    let mut raw_categories: Vec<(String, Vec<String>)> = Vec::new();
    if let Some(path) = &files.categories {
        for (line, text) in read_lines(path)? {
            let mut fields = text.splitn(2, '\t');
            let name = fields.next().unwrap_or("").trim().to_string();
            let members = fields.next().map(parse_list).unwrap_or_default();
            if name.is_empty() || members.is_empty() {
                return Err(parse_err(path, line, "expected `category<TAB>attr,...`".into()));
            }
            raw_categories.push((name, members));
        }
    }

    let mut attr_labels: Vec<String> = raw_attrs
        .iter()
        .flatten()
        .chain(raw_categories.iter().flat_map(|(_, m)| m))
        .cloned()
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    sort_labels(&mut attr_labels);
    let attr_index: HashMap<&str, AttrId> =
        attr_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    let items = raw_attrs
        .iter()
        .enumerate()
        .map(|(id, attrs)| ItemRecord::unannotated(id, attrs.iter().map(|a| attr_index[a.as_str()]).collect()))
        .collect();

    let mut raw_pairs = Vec::new();
    for (line, text) in read_lines(&files.interactions)? {
        let fields: Vec<&str> = text.split('\t').map(str::trim).collect();
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err(&files.interactions, line, "expected `user<TAB>item`".into()));
        }
        let item = *item_index.get(fields[1]).ok_or_else(|| {
            Error::Validation(format!(
                "{}:{line}: interaction names unknown item {}",
                files.interactions.display(),
                fields[1]
            ))
        })?;
        raw_pairs.push((fields[0].to_string(), item));
    }

    let mut user_labels: Vec<String> = raw_pairs
        .iter()
        .map(|(u, _)| u.clone())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    sort_labels(&mut user_labels);
    let user_index: HashMap<&str, UserId> =
        user_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    let mut seen = HashSet::new();
    let mut interactions = Vec::with_capacity(raw_pairs.len());
    let mut duplicates = 0usize;
    for (u, i) in &raw_pairs {
        let pair = (user_index[u.as_str()], *i);
        if seen.insert(pair) {
            interactions.push(pair);
        } else {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::warn!("dropped {duplicates} duplicate interactions");
    }

    let categories = if raw_categories.is_empty() {
        None
    } else {
        Some(
            raw_categories
                .iter()
                .map(|(_, m)| m.iter().map(|a| attr_index[a.as_str()]).collect())
                .collect(),
        )
    };

    let catalog = Catalog {
        n_users: user_labels.len(),
        n_attrs: attr_labels.len(),
        items,
        interactions,
        categories,
        thresholds: None,
        user_labels,
        item_labels,
        attr_labels,
    };
    catalog.validate()?;
    log::info!(
        "loaded catalog: {} users, {} items, {} interactions, {} attributes",
        catalog.n_users,
        catalog.n_items(),
        catalog.interactions.len(),
        catalog.n_attrs
    );
    Ok(catalog)
}

/// Write a catalog in the on-disk format; returns the file set.
pub fn write_catalog(catalog: &Catalog, dir: &Path) -> Result<CatalogFiles> {
    fs::create_dir_all(dir)?;
    let files = CatalogFiles {
        interactions: dir.join("interactions.tsv"),
        items: dir.join("items.tsv"),
        categories: catalog.categories.as_ref().map(|_| dir.join("categories.tsv")),
    };
    let mut w = BufWriter::new(fs::File::create(&files.items)?);
    for item in &catalog.items {
        let attrs: Vec<&str> = item.attrs.iter().map(|&a| catalog.attr_labels[a].as_str()).collect();
        writeln!(w, "{}\t{}", catalog.item_labels[item.id], attrs.join(","))?;
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(&files.interactions)?);
    for &(u, i) in &catalog.interactions {
        writeln!(w, "{}\t{}", catalog.user_labels[u], catalog.item_labels[i])?;
    }
    w.flush()?;
    if let (Some(cats), Some(path)) = (&catalog.categories, &files.categories) {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (c, members) in cats.iter().enumerate() {
            let attrs: Vec<&str> = members.iter().map(|&a| catalog.attr_labels[a].as_str()).collect();
            writeln!(w, "c{c}\t{}", attrs.join(","))?;
        }
        w.flush()?;
    }
    Ok(files)
}

/// Drop users with fewer than `k` interactions. Items are kept even if they
/// lose every interaction.
pub fn filter_min_interactions(catalog: &Catalog, k: usize) -> Catalog {
    let mut counts = vec![0usize; catalog.n_users];
    for &(u, _) in &catalog.interactions {
        counts[u] += 1;
    }
    if counts.iter().all(|&c| c >= k) {
        return catalog.clone();
    }
    let mut remap = vec![None; catalog.n_users];
    let mut user_labels = Vec::new();
    for (u, &c) in counts.iter().enumerate() {
        if c >= k {
            remap[u] = Some(user_labels.len());
            user_labels.push(catalog.user_labels[u].clone());
        }
    }
    let interactions = catalog
        .interactions
        .iter()
        .filter_map(|&(u, i)| remap[u].map(|nu| (nu, i)))
        .collect();
    let items = catalog
        .items
        .iter()
        .map(|it| ItemRecord::unannotated(it.id, it.attrs.clone()))
        .collect();
    Catalog {
        n_users: user_labels.len(),
        items,
        interactions,
        thresholds: None,
        user_labels,
        ..catalog.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<(UserId, ItemId)>,
    pub valid: Vec<(UserId, ItemId)>,
    pub test: Vec<(UserId, ItemId)>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.2, 0.1];

/// Per-user stratified split. Each user's interactions are shuffled and the
/// validation and test shares are rounded to the nearest count; whatever is
/// left goes to train. Users with fewer than three interactions go entirely
/// to train.
pub fn split_interactions(catalog: &Catalog, ratios: [f64; 3], seed: u64) -> Result<DataSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut rng = seed::rng(seed);
    let mut split = DataSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        ratios,
        seed,
    };
    let mut short_users = 0usize;
    for (user, mut items) in catalog.items_by_user().into_iter().enumerate() {
        let n = items.len();
        if n < 3 {
            if n > 0 {
                short_users += 1;
            }
            split.train.extend(items.iter().map(|&i| (user, i)));
            continue;
        }
        items.shuffle(&mut rng);
        let n_test = (n as f64 * ratios[2]).round() as usize;
        let n_valid = ((n as f64 * ratios[1]).round() as usize).min(n - n_test);
        split.test.extend(items[..n_test].iter().map(|&i| (user, i)));
        split.valid.extend(items[n_test..n_test + n_valid].iter().map(|&i| (user, i)));
        split.train.extend(items[n_test + n_valid..].iter().map(|&i| (user, i)));
    }
    if short_users > 0 {
        log::warn!("{short_users} users have fewer than 3 interactions; all assigned to train");
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)` (1-based, clamped to `[1, n]`).
pub fn nearest_rank_percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Annotate every item with train-split popularity, cold flag and tier.
pub fn compute_popularity_and_tiers(catalog: &Catalog, split: &DataSplit) -> Result<Catalog> {
    if split.train.is_empty() {
        return Err(Error::InvalidParameter("train split is empty".into()));
    }
    let mut users_per_item: Vec<HashSet<UserId>> = vec![HashSet::new(); catalog.n_items()];
    for &(u, i) in &split.train {
        users_per_item[i].insert(u);
    }
    let n_users = catalog.n_users.max(1) as f64;
    let mut out = catalog.clone();
    for (item, users) in out.items.iter_mut().zip(&users_per_item) {
        item.popularity = users.len() as f64 / n_users;
        item.cold = users.is_empty();
    }
    let mut pops: Vec<f64> = out.items.iter().map(|i| i.popularity).collect();
    pops.sort_by(f64::total_cmp);
    let thresholds = TierThresholds {
        head: nearest_rank_percentile(&pops, HEAD_PERCENTILE),
        tail: nearest_rank_percentile(&pops, TAIL_PERCENTILE),
    };
    for item in &mut out.items {
        item.tier = tier_of(item.popularity, item.cold, thresholds);
    }
    out.thresholds = Some(thresholds);
    Ok(out)
}

pub fn tier_of(popularity: f64, cold: bool, t: TierThresholds) -> Tier {
    if cold || popularity < t.tail {
        Tier::Tail
    } else if popularity > t.head {
        Tier::Head
    } else {
        Tier::Mid
    }
}

/// Parameters of the synthetic long-tail corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub attrs_per_item: usize,
    pub interactions_per_user: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
    /// Share of the attribute vocabulary forming the "popular" pool.
    pub pool_fraction: f64,
    /// Probability that the most popular item draws an attribute from the
    /// pool; decays linearly with popularity rank down to `pool_floor`.
    pub pool_bias: f64,
    /// Probability that the least popular item draws from the pool.
    pub pool_floor: f64,
    /// Attributes each user is drawn towards.
    pub liked_attrs: usize,
    /// Multiplicative pull of a liked attribute on item choice.
    pub affinity: f64,
    /// Dimension of the latent taste vectors; 0 disables personal taste.
    pub taste_dim: usize,
    /// Item choice is scaled by `exp(taste_scale · z_u·z_i)` with user and
    /// item taste vectors drawn uniformly from the unit sphere.
    pub taste_scale: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_users: 500,
            n_items: 2000,
            n_attrs: 25,
            attrs_per_item: 3,
            interactions_per_user: 30,
            zipf_exponent: 1.0,
            seed: 0,
            pool_fraction: 0.2,
            pool_bias: 0.8,
            pool_floor: 0.0,
            liked_attrs: 3,
            affinity: 4.0,
            taste_dim: 0,
            taste_scale: 0.0,
        }
    }
}

/// Generate a catalog whose item choice probability is proportional to
/// `rank^-zipf_exponent` (times a per-user attribute affinity), and whose
/// popular items preferentially share a small attribute pool.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<Catalog> {
    let p = params;
    if p.n_users == 0 || p.n_items == 0 || p.n_attrs == 0 || p.attrs_per_item == 0 || p.interactions_per_user == 0 {
        return Err(Error::InvalidParameter("synthetic counts must be positive".into()));
    }
    if p.zipf_exponent.is_nan() || p.zipf_exponent < 0.0 {
        return Err(Error::InvalidParameter("zipf_exponent must be >= 0".into()));
    }
    if p.attrs_per_item > p.n_attrs {
        return Err(Error::InvalidParameter(format!(
            "attrs_per_item {} exceeds n_attrs {}",
            p.attrs_per_item, p.n_attrs
        )));
    }
    if p.interactions_per_user > p.n_items {
        return Err(Error::InvalidParameter(format!(
            "interactions_per_user {} exceeds n_items {}",
            p.interactions_per_user, p.n_items
        )));
    }
    let mut rng = seed::rng(seed::derive_named(p.seed, "synthetic"));

    let mut by_rank: Vec<ItemId> = (0..p.n_items).collect();
    by_rank.shuffle(&mut rng);
    let mut rank_of = vec![0usize; p.n_items];
    for (r, &item) in by_rank.iter().enumerate() {
        rank_of[item] = r;
    }

    let mut attr_order: Vec<AttrId> = (0..p.n_attrs).collect();
    attr_order.shuffle(&mut rng);
    let pool_size = ((p.n_attrs as f64 * p.pool_fraction).round() as usize).clamp(1, p.n_attrs);
    let (pool, rest) = attr_order.split_at(pool_size);

    let denom = (p.n_items.max(2) - 1) as f64;
    let mut items = Vec::with_capacity(p.n_items);
    for id in 0..p.n_items {
        let q = rank_of[id] as f64 / denom;
        let pool_prob = (p.pool_floor + (p.pool_bias - p.pool_floor) * (1.0 - q)).clamp(0.0, 1.0);
        let mut attrs: Vec<AttrId> = Vec::with_capacity(p.attrs_per_item);
        while attrs.len() < p.attrs_per_item {
            let from_pool = rng.gen::<f64>() < pool_prob;
            let group = if from_pool { pool } else { rest };
            let open: Vec<AttrId> = group.iter().copied().filter(|a| !attrs.contains(a)).collect();
            let open = if open.is_empty() {
                attr_order.iter().copied().filter(|a| !attrs.contains(a)).collect()
            } else {
                open
            };
            attrs.push(*open.choose(&mut rng).expect("attrs_per_item <= n_attrs"));
        }
        items.push(ItemRecord::unannotated(id, attrs));
    }

    let unit = |rng: &mut seed::Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..p.taste_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x / norm).collect()
    };
    let item_taste: Vec<Vec<f64>> = (0..p.n_items).map(|_| unit(&mut rng)).collect();

    let base: Vec<f64> = (0..p.n_items)
        .map(|i| ((rank_of[i] + 1) as f64).powf(-p.zipf_exponent))
        .collect();
    let mut interactions = Vec::with_capacity(p.n_users * p.interactions_per_user);
    let mut keyed: Vec<(f64, ItemId)> = Vec::with_capacity(p.n_items);
    for user in 0..p.n_users {
        let liked: Vec<AttrId> = attr_order
            .choose_multiple(&mut rng, p.liked_attrs.min(p.n_attrs))
            .copied()
            .collect();
        let taste = unit(&mut rng);
        keyed.clear();
        for item in &items {
            let overlap = item.attrs.iter().filter(|a| liked.contains(a)).count() as f64;
            let fit: f64 = taste.iter().zip(&item_taste[item.id]).map(|(a, b)| a * b).sum();
            let weight = base[item.id] * (1.0 + p.affinity * overlap) * (p.taste_scale * fit).exp();
            // Efraimidis-Spirakis: the k largest ln(U)/w form a weighted sample
            // without replacement.
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            keyed.push((u.ln() / weight, item.id));
        }
        let k = p.interactions_per_user;
        keyed.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0));
        let mut chosen: Vec<ItemId> = keyed[..k].iter().map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        interactions.extend(chosen.into_iter().map(|i| (user, i)));
    }

    let catalog = Catalog {
        n_users: p.n_users,
        n_attrs: p.n_attrs,
        items,
        interactions,
        categories: None,
        thresholds: None,
        user_labels: (0..p.n_users).map(|u| u.to_string()).collect(),
        item_labels: (0..p.n_items).map(|i| i.to_string()).collect(),
        attr_labels: (0..p.n_attrs).map(|a| a.to_string()).collect(),
    };
    catalog.validate()?;
    Ok(catalog)
}

/// Count of train interactions per item; handy for diagnostics.
pub fn train_counts(n_items: usize, split: &DataSplit) -> Vec<usize> {
    let mut counts = vec![0usize; n_items];
    for &(_, i) in &split.train {
        counts[i] += 1;
    }
    counts
}

/// Ordered map from tier to item count.
pub fn tier_counts(catalog: &Catalog) -> BTreeMap<Tier, usize> {
    let mut out = BTreeMap::new();
    for item in &catalog.items {
        *out.entry(item.tier).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_catalog(pairs: &[(usize, usize)], n_users: usize, n_items: usize) -> Catalog {
        Catalog {
            n_users,
            items: (0..n_items).map(|i| ItemRecord::unannotated(i, vec![i % 3])).collect(),
            n_attrs: 3,
            interactions: pairs.to_vec(),
            categories: None,
            thresholds: None,
            user_labels: (0..n_users).map(|u| u.to_string()).collect(),
            item_labels: (0..n_items).map(|i| i.to_string()).collect(),
            attr_labels: (0..3).map(|a| a.to_string()).collect(),
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn loads_and_reindexes() {
        let dir = tempfile::tempdir().unwrap();
        let files = CatalogFiles {
            items: write(dir.path(), "items.tsv", "10\t3,1\n20\t1\n# comment\n30\t\n"),
            interactions: write(dir.path(), "inter.tsv", "7\t10\n2\t20\n7\t30\n7\t10\n"),
            categories: None,
        };
        let c = load_catalog(&files).unwrap();
        assert_eq!(c.n_users, 2);
        assert_eq!(c.n_items(), 3);
        assert_eq!(c.n_attrs, 2);
        assert_eq!(c.user_labels, vec!["2", "7"]);
        assert_eq!(c.attr_labels, vec!["1", "3"]);
        assert_eq!(c.items[0].attrs, vec![0, 1]);
        assert!(c.items[2].attrs.is_empty());
        // duplicate dropped
        assert_eq!(c.interactions, vec![(1, 0), (0, 1), (1, 2)]);
    }

    #[test]
    fn empty_interaction_file_gives_all_cold() {
        let dir = tempfile::tempdir().unwrap();
        let files = CatalogFiles {
            items: write(dir.path(), "items.tsv", "a\tx\nb\ty\n"),
            interactions: write(dir.path(), "inter.tsv", ""),
            categories: None,
        };
        let c = load_catalog(&files).unwrap();
        assert_eq!(c.interactions.len(), 0);
        assert!(c.items.iter().all(|i| i.cold));
    }

    #[test]
    fn unknown_item_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let files = CatalogFiles {
            items: write(dir.path(), "items.tsv", "a\tx\n"),
            interactions: write(dir.path(), "inter.tsv", "u1\ta\nu1\tzzz\n"),
            categories: None,
        };
        let err = load_catalog(&files).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains(":2:")), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let files = CatalogFiles {
            items: write(dir.path(), "items.tsv", "a\tx\n"),
            interactions: write(dir.path(), "inter.tsv", "u1\ta\n\nbroken\n"),
            categories: None,
        };
        match load_catalog(&files).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn categories_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let files = CatalogFiles {
            items: write(dir.path(), "items.tsv", "a\tred,rock\nb\tblue\n"),
            interactions: write(dir.path(), "inter.tsv", "u\ta\n"),
            categories: Some(write(dir.path(), "cats.tsv", "color\tred,blue\ngenre\trock,jazz\n")),
        };
        let c = load_catalog(&files).unwrap();
        assert_eq!(c.n_attrs, 4);
        let red = c.attr_labels.iter().position(|l| l == "red").unwrap();
        let jazz = c.attr_labels.iter().position(|l| l == "jazz").unwrap();
        assert_eq!(c.category_of(red), Some(0));
        assert_eq!(c.category_of(jazz), Some(1));

        let out = tempfile::tempdir().unwrap();
        let written = write_catalog(&c, out.path()).unwrap();
        let again = load_catalog(&written).unwrap();
        assert_eq!(again.items, c.items);
        assert_eq!(again.interactions, c.interactions);
        assert_eq!(again.categories, c.categories);
    }

    #[test]
    fn filter_zero_is_identity() {
        let c = tiny_catalog(&[(0, 0), (1, 1)], 2, 2);
        assert_eq!(filter_min_interactions(&c, 0), c);
    }

    #[test]
    fn filter_drops_short_user() {
        let mut pairs: Vec<(usize, usize)> = (0..9).map(|i| (0, i)).collect();
        pairs.extend((0..12).map(|i| (1, i)));
        let c = tiny_catalog(&pairs, 2, 12);
        let f = filter_min_interactions(&c, 10);
        assert_eq!(f.n_users, 1);
        assert_eq!(f.interactions.len(), 12);
        assert!(f.interactions.iter().all(|&(u, _)| u == 0));
        assert_eq!(f.user_labels, vec!["1"]);
        assert_eq!(f.n_items(), 12);
    }

    #[test]
    fn filter_counts_by_enumeration() {
        // user u has u+1 interactions
        let pairs: Vec<(usize, usize)> = (0..100).flat_map(|u| (0..=u).map(move |i| (u, i))).collect();
        let c = tiny_catalog(&pairs, 100, 100);
        let f = filter_min_interactions(&c, 10);
        let oracle = (1..=100).filter(|&n| n >= 10).count();
        assert_eq!(f.n_users, oracle);
        assert_eq!(f.n_users, 91);
        assert_eq!(filter_min_interactions(&f, 10), f);
    }

    #[test]
    fn split_ten_is_seven_two_one() {
        let c = tiny_catalog(&(0..10).map(|i| (0, i)).collect::<Vec<_>>(), 1, 10);
        let s = split_interactions(&c, DEFAULT_SPLIT, 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (7, 2, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let pairs: Vec<(usize, usize)> = (0..20).flat_map(|u| (0..15).map(move |i| (u, (u + i) % 40))).collect();
        let c = tiny_catalog(&pairs, 20, 40);
        let a = serde_json::to_vec(&split_interactions(&c, DEFAULT_SPLIT, 11).unwrap()).unwrap();
        let b = serde_json::to_vec(&split_interactions(&c, DEFAULT_SPLIT, 11).unwrap()).unwrap();
        assert_eq!(a, b);
        let d = serde_json::to_vec(&split_interactions(&c, DEFAULT_SPLIT, 12).unwrap()).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn split_of_thousand_is_near_seventy_percent() {
        // 50 users with 11..=29 interactions each, 1000 total
        let mut pairs = Vec::new();
        let sizes: Vec<usize> = (0..50).map(|u| if u % 2 == 0 { 11 + u % 19 } else { 29 - (u - 1) % 19 }).collect();
        let total: usize = sizes.iter().sum();
        assert_eq!(total, 1000);
        for (u, &n) in sizes.iter().enumerate() {
            pairs.extend((0..n).map(|i| (u, i)));
        }
        let c = tiny_catalog(&pairs, 50, 40);
        let s = split_interactions(&c, DEFAULT_SPLIT, 5).unwrap();
        let train = s.train.len() as f64;
        assert!((train - 700.0).abs() <= 14.0, "train = {train}");
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), 1000);
    }

    #[test]
    fn short_users_go_to_train() {
        let c = tiny_catalog(&[(0, 0), (0, 1)], 1, 2);
        let s = split_interactions(&c, DEFAULT_SPLIT, 0).unwrap();
        assert_eq!(s.train.len(), 2);
        assert!(s.valid.is_empty() && s.test.is_empty());
    }

    #[test]
    fn bad_ratios_rejected() {
        let c = tiny_catalog(&[(0, 0)], 1, 1);
        assert!(split_interactions(&c, [0.7, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn popularity_and_cold() {
        let mut pairs: Vec<(usize, usize)> = (0..3).map(|u| (u, 0)).collect();
        pairs.extend((0..10).map(|u| (u, 1)));
        let c = tiny_catalog(&pairs, 10, 3);
        let split = DataSplit {
            train: pairs.clone(),
            valid: vec![],
            test: vec![],
            ratios: DEFAULT_SPLIT,
            seed: 0,
        };
        let a = compute_popularity_and_tiers(&c, &split).unwrap();
        assert_eq!(a.items[0].popularity, 0.3);
        assert_eq!(a.items[1].popularity, 1.0);
        assert_eq!(a.items[2].popularity, 0.0);
        assert!(a.items[2].cold);
        assert_eq!(a.items[2].tier, Tier::Tail);
        assert!(!a.items[0].cold);
    }

    #[test]
    fn nearest_rank_tiers_by_enumeration() {
        // item r (1-based) has r users out of 1000 -> popularity 0.001 * r
        let mut pairs = Vec::new();
        for r in 1..=100usize {
            pairs.extend((0..r).map(|u| (u, r - 1)));
        }
        let c = tiny_catalog(&pairs, 1000, 100);
        let split = DataSplit {
            train: pairs.clone(),
            valid: vec![],
            test: vec![],
            ratios: DEFAULT_SPLIT,
            seed: 0,
        };
        let a = compute_popularity_and_tiers(&c, &split).unwrap();
        // oracle: sorted values v_r = 0.001 r; nearest rank ceil(0.8*100)=80, ceil(0.2*100)=20
        let head_cut = 0.001 * 80.0;
        let tail_cut = 0.001 * 20.0;
        for item in &a.items {
            let r = item.id + 1;
            let pop = item.popularity;
            assert!((pop - 0.001 * r as f64).abs() < 1e-12);
            let want = if pop > head_cut + 1e-12 {
                Tier::Head
            } else if pop < tail_cut - 1e-12 {
                Tier::Tail
            } else {
                Tier::Mid
            };
            assert_eq!(item.tier, want, "rank {r}");
            assert_eq!(item.tier == Tier::Head, r >= 81);
            assert_eq!(item.tier == Tier::Tail, r <= 19);
        }
        let counts = tier_counts(&a);
        assert_eq!(counts.values().sum::<usize>(), 100);
    }

    #[test]
    fn synthetic_rejects_bad_params() {
        let p = SyntheticParams {
            attrs_per_item: 30,
            ..SyntheticParams::default()
        };
        assert!(matches!(generate_synthetic(&p), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn synthetic_uniform_when_exponent_zero() {
        let p = SyntheticParams {
            n_users: 2000,
            n_items: 100,
            n_attrs: 10,
            attrs_per_item: 2,
            interactions_per_user: 50,
            zipf_exponent: 0.0,
            seed: 1,
            ..SyntheticParams::default()
        };
        let c = generate_synthetic(&p).unwrap();
        assert_eq!(c.interactions.len(), 100_000);
        let mut counts = vec![0usize; 100];
        for &(_, i) in &c.interactions {
            counts[i] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(max / min < 2.0, "ratio {}", max / min);
    }

    #[test]
    fn synthetic_zipf_concentrates_on_head() {
        let p = SyntheticParams {
            n_users: 500,
            n_items: 2000,
            zipf_exponent: 1.0,
            seed: 2,
            ..SyntheticParams::default()
        };
        let c = generate_synthetic(&p).unwrap();
        let mut counts = vec![0usize; 2000];
        for &(_, i) in &c.interactions {
            counts[i] += 1;
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: usize = counts[..400].iter().sum();
        let share = top as f64 / c.interactions.len() as f64;
        assert!(share > 0.6, "top-20% share {share}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let p = SyntheticParams {
            n_users: 50,
            n_items: 200,
            seed: 9,
            ..SyntheticParams::default()
        };
        assert_eq!(generate_synthetic(&p).unwrap(), generate_synthetic(&p).unwrap());
    }
}
