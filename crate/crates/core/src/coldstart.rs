//! Cold-start item embeddings reconstructed from attributes (CSM): a
//! two-layer network maps an item's multi-hot attribute vector to its
//! trained embedding, fitted on warm items and applied to cold ones.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::dataset::{Catalog, ItemRecord};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::recommender::FactorizationModel;
use crate::seed;

pub const HIDDEN_UNITS: usize = 128;
pub const MAPPER_INIT_SCALE: f64 = 0.05;
const REDUCTION_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            lambda: 1e-4,
            epochs: 500,
            learning_rate: 0.01,
            batch_size: 0,
            hidden: HIDDEN_UNITS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeMapper {
    pub net: Mlp,
    pub lambda: f64,
    /// Objective after the last update.
    pub final_loss: f64,
    /// Objective before each epoch, then the final value.
    pub loss_history: Vec<f64>,
}

pub fn multi_hot(item: &ItemRecord, n_attrs: usize) -> Vec<f64> {
    let mut x = vec![0.0; n_attrs];
    for &a in &item.attrs {
        x[a] = 1.0;
    }
    x
}

/// Mean squared reconstruction error over `batch` plus `lambda·‖W‖²`
/// (biases unpenalized), and its gradient.
///
/// The batch is cut into fixed-size chunks whose partial sums are added in
/// chunk order, so the result does not depend on the thread count.
pub fn mapping_loss(net: &Mlp, batch: &[(Vec<f64>, &[f64])], lambda: f64) -> (f64, Vec<f64>) {
    let scale = 1.0 / batch.len().max(1) as f64;
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; net.params.len()];
            let mut loss = 0.0;
            for (x, target) in chunk {
                let fwd = net.forward(x);
                let resid: Vec<f64> = fwd.output.iter().zip(target.iter()).map(|(o, t)| o - t).collect();
                loss += scale * resid.iter().map(|r| r * r).sum::<f64>();
                net.backward(x, &fwd, &resid, 2.0 * scale, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut grad = vec![0.0; net.params.len()];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    for range in net.weight_ranges() {
        for k in range {
            loss += lambda * net.params[k] * net.params[k];
            grad[k] += 2.0 * lambda * net.params[k];
        }
    }
    (loss, grad)
}

/// Fit the mapper on every warm item of `catalog` against `model`'s rows.
pub fn fit_mapper(model: &FactorizationModel, catalog: &Catalog, cfg: &MapperConfig) -> Result<AttributeMapper> {
    if catalog.n_items() != model.n_items || catalog.n_attrs != model.n_attrs {
        return Err(Error::Validation("model and catalog disagree on item or attribute counts".into()));
    }
    let warm: Vec<&ItemRecord> = catalog.items.iter().filter(|i| !i.cold).collect();
    if warm.is_empty() {
        return Err(Error::NoWarmItems);
    }
    let data: Vec<(Vec<f64>, &[f64])> = warm
        .iter()
        .map(|it| (multi_hot(it, catalog.n_attrs), model.item(it.id)))
        .collect();
    let mut net = Mlp::uniform(
        catalog.n_attrs,
        cfg.hidden,
        model.dim,
        Activation::Relu,
        MAPPER_INIT_SCALE,
        seed::derive_named(cfg.seed, "mapper-init"),
    );
    let mut rng = seed::rng(seed::derive_named(cfg.seed, "mapper-batches"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch_size = if cfg.batch_size == 0 { data.len() } else { cfg.batch_size };
    let mut history = Vec::with_capacity(cfg.epochs + 1);

    for epoch in 0..cfg.epochs {
        if batch_size < data.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(Vec<f64>, &[f64])> = chunk.iter().map(|&k| (data[k].0.clone(), data[k].1)).collect();
            let (loss, grad) = mapping_loss(&net, &batch, cfg.lambda);
            epoch_loss += loss * chunk.len() as f64 / data.len() as f64;
            for (p, g) in net.params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
        if !net.is_finite() || !epoch_loss.is_finite() {
            return Err(Error::Divergence(format!("mapper parameters non-finite at epoch {epoch}")));
        }
        history.push(epoch_loss);
    }
    let (final_loss, _) = mapping_loss(&net, &data, cfg.lambda);
    history.push(final_loss);
    log::info!("CSM mapper fitted on {} warm items, final loss {final_loss:.6}", data.len());
    Ok(AttributeMapper {
        net,
        lambda: cfg.lambda,
        final_loss,
        loss_history: history,
    })
}

pub fn reconstruct(mapper: &AttributeMapper, item: &ItemRecord) -> Vec<f64> {
    mapper.net.forward(&multi_hot(item, mapper.net.input)).output
}

/// Copy of `model` with every cold item's row replaced by its reconstruction.
pub fn apply_csm(model: &FactorizationModel, mapper: &AttributeMapper, catalog: &Catalog) -> Result<FactorizationModel> {
    if mapper.net.output != model.dim || mapper.net.input != catalog.n_attrs {
        return Err(Error::Validation(format!(
            "mapper shape {}->{} does not fit model dim {} / {} attributes",
            mapper.net.input, mapper.net.output, model.dim, catalog.n_attrs
        )));
    }
    let mut out = model.clone();
    for item in catalog.items.iter().filter(|i| i.cold) {
        out.item_mut(item.id).copy_from_slice(&reconstruct(mapper, item));
    }
    Ok(out)
}

impl AttributeMapper {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "attribute_mapper",
            json!({
                "input": self.net.input,
                "hidden": self.net.hidden,
                "output": self.net.output,
                "activation": self.net.activation,
                "lambda": self.lambda,
                "final_loss": self.final_loss,
            }),
        );
        ck.push("params", 1, self.net.params.len(), &self.net.params);
        ck.push("loss_history", 1, self.loss_history.len(), &self.loss_history);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("attribute_mapper")?;
        let meta = &ck.header.meta;
        let dim = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let (input, hidden, output) = (dim("input")?, dim("hidden")?, dim("output")?);
        let activation: Activation = serde_json::from_value(meta["activation"].clone())?;
        let (_, params) = ck.array("params")?;
        if params.len() != Mlp::param_count(input, hidden, output) {
            return Err(Error::Checkpoint("mapper parameter count mismatch".into()));
        }
        let (_, history) = ck.array("loss_history")?;
        Ok(AttributeMapper {
            net: Mlp {
                input,
                hidden,
                output,
                activation,
                params: params.to_vec(),
            },
            lambda: meta["lambda"].as_f64().unwrap_or(0.0),
            final_loss: meta["final_loss"].as_f64().unwrap_or(f64::NAN),
            loss_history: history.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Tier;
    use rand::Rng as _;

    fn item(id: usize, attrs: Vec<usize>, cold: bool) -> ItemRecord {
        ItemRecord {
            id,
            attrs,
            popularity: if cold { 0.0 } else { 0.5 },
            tier: if cold { Tier::Tail } else { Tier::Mid },
            cold,
        }
    }

    fn catalog(items: Vec<ItemRecord>, n_attrs: usize) -> Catalog {
        let n = items.len();
        Catalog {
            n_users: 1,
            items,
            n_attrs,
            interactions: vec![],
            categories: None,
            thresholds: None,
            user_labels: vec!["0".into()],
            item_labels: (0..n).map(|i| i.to_string()).collect(),
            attr_labels: (0..n_attrs).map(|a| a.to_string()).collect(),
        }
    }

    fn model(n_items: usize, n_attrs: usize, dim: usize, seed: u64) -> FactorizationModel {
        let mut m = FactorizationModel::init(1, n_items, n_attrs, dim, seed);
        let mut rng = seed::rng(seed);
        m.item_emb.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        m
    }

    #[test]
    fn single_item_is_memorized() {
        let c = catalog(vec![item(0, vec![1, 2], false), item(1, vec![0], true)], 4);
        let m = model(2, 4, 3, 1);
        let cfg = MapperConfig {
            lambda: 0.0,
            epochs: 2000,
            learning_rate: 0.05,
            ..MapperConfig::default()
        };
        let mapper = fit_mapper(&m, &c, &cfg).unwrap();
        assert!(mapper.final_loss < 1e-4, "loss {}", mapper.final_loss);
    }

    #[test]
    fn needs_warm_items() {
        let c = catalog(vec![item(0, vec![1], true)], 2);
        let m = model(1, 2, 2, 0);
        assert!(matches!(fit_mapper(&m, &c, &MapperConfig::default()), Err(Error::NoWarmItems)));
    }

    #[test]
    fn heavy_ridge_collapses_weights() {
        let c = catalog((0..6).map(|i| item(i, vec![i % 3, 3 + i % 2], false)).collect(), 5);
        let m = model(6, 5, 2, 4);
        let cfg = MapperConfig {
            lambda: 10.0,
            epochs: 300,
            learning_rate: 0.02,
            hidden: 8,
            ..MapperConfig::default()
        };
        let mapper = fit_mapper(&m, &c, &cfg).unwrap();
        let max_w = mapper.net.w1().iter().chain(mapper.net.w2()).fold(0.0f64, |a, w| a.max(w.abs()));
        assert!(max_w < 1e-3, "largest weight {max_w}");
        // with first-layer weights gone every item maps to the same output
        let a = reconstruct(&mapper, &c.items[0]);
        let b = reconstruct(&mapper, &c.items[1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_mapper_gives_zero_embedding() {
        let mapper = AttributeMapper {
            net: Mlp::zeros(4, 8, 3, Activation::Relu),
            lambda: 0.0,
            final_loss: 0.0,
            loss_history: vec![],
        };
        assert_eq!(reconstruct(&mapper, &item(0, vec![1, 3], true)), vec![0.0; 3]);
    }

    #[test]
    fn apply_csm_replaces_only_cold_rows() {
        let c = catalog(
            vec![item(0, vec![0, 1], false), item(1, vec![1, 2], true), item(2, vec![0, 2], false), item(3, vec![1, 2], true)],
            3,
        );
        let m = model(4, 3, 2, 5);
        let mapper = fit_mapper(&m, &c, &MapperConfig { epochs: 20, hidden: 16, ..MapperConfig::default() }).unwrap();
        let out = apply_csm(&m, &mapper, &c).unwrap();
        assert_eq!(out.item(0), m.item(0));
        assert_eq!(out.item(2), m.item(2));
        assert_ne!(out.item(1), m.item(1));
        // same attribute set, same reconstruction
        assert_eq!(out.item(1), out.item(3));
        assert_eq!(apply_csm(&out, &mapper, &c).unwrap(), out);

        let warm_only = catalog(vec![item(0, vec![0], false), item(1, vec![1], false)], 3);
        let m2 = model(2, 3, 2, 6);
        let mapper2 = fit_mapper(&m2, &warm_only, &MapperConfig { epochs: 5, hidden: 4, ..MapperConfig::default() }).unwrap();
        assert_eq!(apply_csm(&m2, &mapper2, &warm_only).unwrap(), m2);
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let c = catalog((0..30).map(|i| item(i, vec![i % 5, 5 + i % 3], false)).collect(), 8);
        let m = model(30, 8, 4, 7);
        let mapper = fit_mapper(&m, &c, &MapperConfig { epochs: 200, hidden: 32, ..MapperConfig::default() }).unwrap();
        for w in mapper.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = catalog(vec![item(0, vec![0], false), item(1, vec![1], true)], 2);
        let m = model(2, 2, 3, 8);
        let mapper = fit_mapper(&m, &c, &MapperConfig { epochs: 3, hidden: 5, ..MapperConfig::default() }).unwrap();
        let bytes = mapper.to_checkpoint().to_bytes().unwrap();
        let back = AttributeMapper::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, mapper);
    }
}
