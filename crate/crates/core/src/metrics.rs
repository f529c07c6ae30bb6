//! Bias metrics (PER, PSR, PCU) and recommendation metrics (SR, AT, HSR,
//! TSR) over episode logs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{ItemId, Tier};
use crate::simulator::{EpisodeLog, ShownItem};

/// `E = ρ·P` where `ρ = Σ_{popular} 1/ln(rank+1)` and `P` is the popular
/// share of the list. An item is popular when its popularity exceeds
/// `head_threshold`.
pub fn exposure_bias_turn(list: &[ShownItem], head_threshold: f64) -> f64 {
    if list.is_empty() {
        return 0.0;
    }
    let mut rho = 0.0;
    let mut popular = 0usize;
    for s in list.iter().filter(|s| s.popularity > head_threshold) {
        rho += 1.0 / (s.rank as f64 + 1.0).ln();
        popular += 1;
    }
    rho * popular as f64 / list.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    NoData,
    Degenerate,
    Undefined,
}

impl fmt::Display for MetricFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricFlag::NoData => "no_data",
            MetricFlag::Degenerate => "degenerate",
            MetricFlag::Undefined => "undefined",
        })
    }
}

/// A metric value, or the reason none could be computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Value(f64),
    Flag(MetricFlag),
}

impl Metric {
    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Flag(_) => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v}"),
            Metric::Flag(flag) => write!(f, "{flag}"),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean over episodes of each episode's mean per-turn exposure bias.
pub fn per(logs: &[EpisodeLog]) -> Metric {
    let per_episode = logs.iter().filter_map(|l| mean(l.turns.iter().map(|t| t.exposure)));
    mean(per_episode).map_or(Metric::Flag(MetricFlag::NoData), Metric::Value)
}

/// Per-item (popularity, success rate) over attempted items, sorted by
/// ascending popularity then id.
pub fn item_success_rates(logs: &[EpisodeLog]) -> Vec<(ItemId, f64, f64)> {
    let mut tally: BTreeMap<ItemId, (f64, usize, usize)> = BTreeMap::new();
    for l in logs {
        let e = tally.entry(l.target).or_insert((l.target_popularity, 0, 0));
        e.1 += 1;
        e.2 += l.success as usize;
    }
    let mut rows: Vec<(ItemId, f64, f64)> = tally
        .into_iter()
        .map(|(i, (p, attempts, wins))| (i, p, wins as f64 / attempts as f64))
        .collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    rows
}

/// Gini coefficient of a non-negative sequence already in Lorenz order:
/// one minus twice the trapezoidal area under the Lorenz curve through the
/// origin.
pub fn gini(values: &[f64]) -> Option<f64> {
    let total: f64 = values.iter().sum();
    if values.is_empty() || total <= 0.0 {
        return None;
    }
    let step = 1.0 / values.len() as f64;
    let mut area = 0.0;
    let mut prev = 0.0;
    let mut cum = 0.0;
    for v in values {
        cum += v;
        let share = cum / total;
        area += step * (prev + share) / 2.0;
        prev = share;
    }
    Some(1.0 - 2.0 * area)
}

/// Gini coefficient of per-item success rates ordered by popularity.
pub fn psr(logs: &[EpisodeLog]) -> Metric {
    let rates = item_success_rates(logs);
    if rates.is_empty() {
        return Metric::Flag(MetricFlag::NoData);
    }
    let values: Vec<f64> = rates.iter().map(|r| r.2).collect();
    gini(&values).map_or(Metric::Flag(MetricFlag::Degenerate), Metric::Value)
}

/// `(mean successful turns on tail targets − same on head targets) / T`.
pub fn pcu(logs: &[EpisodeLog], max_turns: usize) -> Metric {
    let turns = |tier: Tier| {
        mean(
            logs.iter()
                .filter(|l| l.success && l.target_tier == tier)
                .map(|l| l.turns_used as f64),
        )
    };
    match (turns(Tier::Tail), turns(Tier::Head)) {
        (Some(tail), Some(head)) => Metric::Value((tail - head) / max_turns as f64),
        _ => Metric::Flag(MetricFlag::Undefined),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub sr: Metric,
    pub at: Metric,
    pub hsr: Metric,
    pub tsr: Metric,
}

/// Success rate, mean turns (failures count `max_turns`), and success rate
/// restricted to head and tail targets.
pub fn performance(logs: &[EpisodeLog], max_turns: usize) -> Performance {
    let rate = |tier: Option<Tier>| {
        mean(
            logs.iter()
                .filter(|l| tier.is_none_or(|t| l.target_tier == t))
                .map(|l| l.success as u8 as f64),
        )
        .map_or(Metric::Flag(MetricFlag::NoData), Metric::Value)
    };
    let at = mean(logs.iter().map(|l| if l.success { l.turns_used } else { max_turns } as f64))
        .map_or(Metric::Flag(MetricFlag::NoData), Metric::Value);
    Performance {
        sr: rate(None),
        at,
        hsr: rate(Some(Tier::Head)),
        tsr: rate(Some(Tier::Tail)),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeCounts {
    pub episodes: usize,
    pub successes: usize,
    pub head: usize,
    pub mid: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub head_threshold: f64,
    pub top_k: usize,
    pub max_turns: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per: Metric,
    pub psr: Metric,
    pub pcu: Metric,
    pub sr: Metric,
    pub at: Metric,
    pub hsr: Metric,
    pub tsr: Metric,
    pub counts: EpisodeCounts,
    pub config: ReportConfig,
}

pub const METRIC_COLUMNS: [&str; 7] = ["per", "psr", "pcu", "sr", "at", "hsr", "tsr"];

impl MetricsReport {
    pub fn compute(logs: &[EpisodeLog], config: ReportConfig) -> Self {
        let perf = performance(logs, config.max_turns);
        let mut counts = EpisodeCounts {
            episodes: logs.len(),
            ..EpisodeCounts::default()
        };
        for l in logs {
            counts.successes += l.success as usize;
            match l.target_tier {
                Tier::Head => counts.head += 1,
                Tier::Mid => counts.mid += 1,
                Tier::Tail => counts.tail += 1,
            }
        }
        MetricsReport {
            per: per(logs),
            psr: psr(logs),
            pcu: pcu(logs, config.max_turns),
            sr: perf.sr,
            at: perf.at,
            hsr: perf.hsr,
            tsr: perf.tsr,
            counts,
            config,
        }
    }

    pub fn metric(&self, name: &str) -> Option<Metric> {
        Some(match name {
            "per" => self.per,
            "psr" => self.psr,
            "pcu" => self.pcu,
            "sr" => self.sr,
            "at" => self.at,
            "hsr" => self.hsr,
            "tsr" => self.tsr,
            _ => return None,
        })
    }

    pub fn csv_header() -> String {
        METRIC_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        METRIC_COLUMNS
            .iter()
            .map(|c| self.metric(c).expect("known column").to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shown(ranks_pop: &[(usize, f64)]) -> Vec<ShownItem> {
        ranks_pop
            .iter()
            .map(|&(rank, popularity)| ShownItem {
                item: rank,
                rank,
                popularity,
                head: popularity > 0.5,
            })
            .collect()
    }

    #[test]
    fn exposure_hand_cases() {
        let list = shown(&[(1, 0.9), (2, 0.1), (3, 0.8), (4, 0.0), (5, 0.2)]);
        assert!((exposure_bias_turn(&list, 0.5) - 0.865617).abs() < 1e-6);
        let none = shown(&[(1, 0.1), (2, 0.2)]);
        assert_eq!(exposure_bias_turn(&none, 0.5), 0.0);
        let all = shown(&(1..=10).map(|r| (r, 0.9)).collect::<Vec<_>>());
        assert!((exposure_bias_turn(&all, 0.5) - 6.554970525).abs() < 1e-9);
    }

    #[test]
    fn gini_cases() {
        assert!((gini(&[0.0, 0.0, 1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(gini(&[0.3; 6]).unwrap().abs() < 1e-15);
        assert!(gini(&[1.0, 0.0, 0.0]).unwrap() < 0.0);
        assert_eq!(gini(&[0.0, 0.0]), None);
    }

    #[test]
    fn flags_serialize_as_strings() {
        assert_eq!(serde_json::to_string(&Metric::Flag(MetricFlag::NoData)).unwrap(), "\"no_data\"");
        assert_eq!(serde_json::to_string(&Metric::Value(0.5)).unwrap(), "0.5");
        let back: Metric = serde_json::from_str("\"undefined\"").unwrap();
        assert_eq!(back, Metric::Flag(MetricFlag::Undefined));
    }
}
