use crs_debias::dataset::*;
use crs_debias::policy::*;
use crs_debias::recommender::{train, PalConfig, TrainMode};
use crs_debias::simulator::{simulate_traced, Components, SessionConfig};

fn demonstrations(comps: &Components<'_>, pairs: &[(usize, usize)], session: &SessionConfig, seed: u64) -> Vec<LabeledState> {
    let mut out = Vec::new();
    for (k, &(u, i)) in pairs.iter().enumerate() {
        if comps.catalog.items[i].attrs.is_empty() {
            continue;
        }
        let mut trace = Vec::new();
        simulate_traced(comps, u, i, session, seed + k as u64, Some(&mut trace)).unwrap();
        out.extend(trace.into_iter().map(|s| LabeledState {
            state: s.state,
            mask: s.mask,
            label: s.action,
        }));
    }
    out
}

#[test]
fn pretrained_policy_agrees_with_teacher_on_held_out_targets() {
    let params = SyntheticParams {
        n_users: 200,
        n_items: 600,
        n_attrs: 15,
        attrs_per_item: 2,
        interactions_per_user: 15,
        seed: 11,
        ..SyntheticParams::default()
    };
    let raw = generate_synthetic(&params).unwrap();
    let split = split_interactions(&raw, DEFAULT_SPLIT, 11).unwrap();
    let catalog = compute_popularity_and_tiers(&raw, &split).unwrap();
    let model = train(&catalog, &split, &PalConfig { dim: 8, epochs: 3, ..PalConfig::default() }, TrainMode::Bpr).unwrap();
    let teacher = MaxEntropyAgent { rec_threshold: 10 };
    let comps = Components {
        catalog: &catalog,
        model: &model,
        agent: &teacher,
    };
    let session = SessionConfig::default();
    let train_set = demonstrations(&comps, &split.train[..400], &session, 0);
    let held_out = demonstrations(&comps, &split.test, &session, 10_000);
    assert!(held_out.len() > 100);

    let mut policy = PolicyNetwork::new(catalog.n_attrs, session.max_turns, 3);
    let before = accuracy(&policy, &held_out);
    pretrain_classifier(&mut policy, &train_set, &PretrainConfig { seed: 5, ..PretrainConfig::default() }).unwrap();
    let after = accuracy(&policy, &held_out);
    assert!(after > 0.6, "held-out agreement {after:.3} (untrained {before:.3})");
}
