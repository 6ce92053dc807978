//! Stacked-block forecaster, parameter transfer from a pretrained block and
//! the supervised training loop.
//!
//! Parameters live in one name-keyed map: `embed`, `layers.{i}.ln_gain`,
//! `layers.{i}.ln_shift`, `layers.{i}.<block field>`, `head_time` and
//! `head_feat`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mamba::{block_graph, trace_from_graph, BlockOutput, BlockTrace, MambaConfig, MambaParams, PARAM_NAMES};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Forecast horizons accepted by the command line.
pub const HORIZONS: [usize; 4] = [96, 192, 336, 720];
/// Replacement fractions accepted by the command line.
pub const REPLACE_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn default_n_layer() -> usize {
    4
}

fn default_len() -> usize {
    96
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterConfig {
    #[serde(default = "default_n_layer")]
    pub n_layer: usize,
    #[serde(default)]
    pub mamba: MambaConfig,
    #[serde(default = "default_len")]
    pub t_in: usize,
    #[serde(default = "default_len")]
    pub t_out: usize,
    /// Taken from the data when left at 0.
    #[serde(default)]
    pub n_features: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            n_layer: 4,
            mamba: MambaConfig::default(),
            t_in: 96,
            t_out: 96,
            n_features: 0,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        self.mamba.validate()?;
        if self.n_layer == 0 || self.t_in == 0 || self.t_out == 0 || self.n_features == 0 {
            return Err(Error::Config(format!(
                "n_layer, t_in, t_out and n_features must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    #[default]
    None,
    FrozenA,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FreezeMode::None),
            "frozen-a" => Ok(FreezeMode::FrozenA),
            _ => Err(Error::InvalidArgument(format!("unknown freeze mode `{s}` (none, frozen-a)"))),
        }
    }
}

impl std::fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FreezeMode::None => "none",
            FreezeMode::FrozenA => "frozen-a",
        })
    }
}

/// Which pretrained arrays a replaced block receives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferScope {
    #[default]
    All,
    /// Only `a_log`, `w_x` and `b_dt`.
    Selective,
}

impl TransferScope {
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            TransferScope::All => &PARAM_NAMES,
            TransferScope::Selective => &["a_log", "w_x", "b_dt"],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferPlan {
    pub replace_fraction: f64,
    #[serde(default)]
    pub freeze_mode: FreezeMode,
    #[serde(default)]
    pub scope: TransferScope,
}

impl TransferPlan {
    pub fn new(replace_fraction: f64, freeze_mode: FreezeMode) -> Self {
        Self {
            replace_fraction,
            freeze_mode,
            scope: TransferScope::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replace_fraction) {
            return Err(Error::Config(format!(
                "replace_fraction must lie in [0, 1], got {}",
                self.replace_fraction
            )));
        }
        Ok(())
    }

    /// `round(fraction · n_layer)`.
    pub fn replaced_layers(&self, n_layer: usize) -> usize {
        ((self.replace_fraction * n_layer as f64).round() as usize).min(n_layer)
    }

    /// Label used in metric tables.
    pub fn label(&self) -> String {
        let mut s = format!("replace={}/freeze={}", self.replace_fraction, self.freeze_mode);
        if self.scope == TransferScope::Selective {
            s.push_str("/scope=selective");
        }
        s
    }
}

pub const EMBED: &str = "embed";
pub const HEAD_TIME: &str = "head_time";
pub const HEAD_FEAT: &str = "head_feat";

pub fn layer_prefix(i: usize) -> String {
    format!("layers.{i}.")
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forecaster {
    pub cfg: ForecasterConfig,
    pub params: BTreeMap<String, Tensor>,
    /// Names of parameters the optimizer must not touch.
    pub frozen: BTreeSet<String>,
}

/// Node handles of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub out: NodeId,
    /// Residual stream after the last layer, `[B, t_in, d_model]`.
    pub hidden: NodeId,
    pub blocks: Vec<BlockOutput>,
}

/// Per-layer block traces and the final residual stream for one batch.
#[derive(Clone, Debug)]
pub struct ProbeCapture {
    pub traces: Vec<BlockTrace>,
    pub hidden: Tensor,
    pub prediction: Tensor,
}

impl Forecaster {
    /// Seeded construction. The embedding, each block and the heads draw
    /// from separate streams so transfers never shift other initializations.
    pub fn build(cfg: &ForecasterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.mamba.d_model;
        let mut params = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.insert(EMBED.to_string(), uniform(&[cfg.n_features, d], cfg.n_features, &mut rng));
        for i in 0..cfg.n_layer {
            let prefix = layer_prefix(i);
            let block = MambaParams::init(&cfg.mamba, seed.wrapping_add(1 + i as u64))?;
            params.extend(block.to_named(&prefix));
            params.insert(format!("{prefix}ln_gain"), Tensor::ones(&[d]));
            params.insert(format!("{prefix}ln_shift"), Tensor::zeros(&[d]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + cfg.n_layer as u64));
        params.insert(HEAD_TIME.to_string(), uniform(&[cfg.t_in, cfg.t_out], cfg.t_in, &mut rng));
        params.insert(HEAD_FEAT.to_string(), uniform(&[d, cfg.n_features], d, &mut rng));
        Ok(Self {
            cfg: cfg.clone(),
            params,
            frozen: BTreeSet::new(),
        })
    }

    /// Rebuilds a model from a saved parameter map, checking every shape.
    pub fn from_params(cfg: &ForecasterConfig, params: BTreeMap<String, Tensor>, frozen: BTreeSet<String>) -> Result<Self> {
        let reference = Self::build(cfg, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::ShapeMismatch {
                        op: "from_params",
                        lhs: p.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            }
        }
        if let Some(bad) = frozen.iter().find(|n| !params.contains_key(*n)) {
            return Err(Error::Config(format!("frozen name `{bad}` is not a parameter")));
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
            frozen,
        })
    }

    pub fn block(&self, i: usize) -> Result<MambaParams> {
        MambaParams::from_named(&self.params, &layer_prefix(i))
    }

    /// Per-parameter frozen flags.
    pub fn frozen_mask(&self) -> BTreeMap<String, bool> {
        self.params.keys().map(|k| (k.clone(), self.frozen.contains(k))).collect()
    }

    /// Copies the pretrained block into the first `round(fraction · n_layer)`
    /// layers and applies the freeze mode to those layers.
    pub fn transfer(&self, pretrained: &MambaParams, plan: &TransferPlan) -> Result<Self> {
        plan.validate()?;
        pretrained.check_shapes(&self.cfg.mamba)?;
        let mut out = self.clone();
        let named = pretrained.to_named("");
        for i in 0..plan.replaced_layers(self.cfg.n_layer) {
            let prefix = layer_prefix(i);
            for field in plan.scope.fields() {
                out.params.insert(format!("{prefix}{field}"), named[*field].clone());
            }
            if plan.freeze_mode == FreezeMode::FrozenA {
                out.frozen.insert(format!("{prefix}a_log"));
            }
        }
        Ok(out)
    }

    /// Records the forward pass for `x [B, t_in, F]`.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> Result<ForwardNodes> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.t_in || shape[2] != self.cfg.n_features {
            return Err(Error::ShapeMismatch {
                op: "forecaster",
                lhs: shape,
                rhs: vec![0, self.cfg.t_in, self.cfg.n_features],
            });
        }
        let ids = g.params_from(&self.params)?;
        let mut y = g.matmul(x, ids[EMBED])?;
        let mut blocks = Vec::with_capacity(self.cfg.n_layer);
        for i in 0..self.cfg.n_layer {
            let prefix = layer_prefix(i);
            let id = |f: &str| ids[&format!("{prefix}{f}")];
            let nodes = crate::mamba::BlockNodes {
                w_in: id("w_in"),
                conv_w: id("conv_w"),
                conv_b: id("conv_b"),
                w_x: id("w_x"),
                w_dt: id("w_dt"),
                b_dt: id("b_dt"),
                a_log: id("a_log"),
                d_skip: id("d_skip"),
                w_out: id("w_out"),
            };
            let normed = g.layer_norm(y, id("ln_gain"), id("ln_shift"))?;
            let block = block_graph(g, &nodes, &self.cfg.mamba, normed)?;
            y = g.add(y, block.out)?;
            blocks.push(block);
        }
        let t = g.swap_last2(y)?;
        let t = g.matmul(t, ids[HEAD_TIME])?;
        let t = g.swap_last2(t)?;
        let out = g.matmul(t, ids[HEAD_FEAT])?;
        Ok(ForwardNodes { out, hidden: y, blocks })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xin = g.constant(x.clone());
        let nodes = self.forward_graph(&mut g, xin)?;
        Ok(g.value(nodes.out).clone())
    }

    /// Forward pass capturing every block's trace.
    pub fn probe(&self, x: &Tensor) -> Result<ProbeCapture> {
        let mut g = Graph::new();
        let xin = g.constant(x.clone());
        let nodes = self.forward_graph(&mut g, xin)?;
        Ok(ProbeCapture {
            traces: nodes.blocks.iter().map(|b| trace_from_graph(&g, b)).collect::<Result<_>>()?,
            hidden: g.value(nodes.hidden).clone(),
            prediction: g.value(nodes.out).clone(),
        })
    }

    /// MAE loss and gradients for one batch.
    pub fn loss_and_grad(&self, x: &Tensor, y: &Tensor) -> Result<(f64, crate::graph::Gradients)> {
        let mut g = Graph::new();
        let xin = g.constant(x.clone());
        let target = g.constant(y.clone());
        let nodes = self.forward_graph(&mut g, xin)?;
        let diff = g.sub(nodes.out, target)?;
        let abs = g.abs(diff)?;
        let loss = g.mean(abs)?;
        let value = g.value(loss).item();
        Ok((value, g.gradient(loss)?))
    }
}

fn check_same(op: &'static str, y: &Tensor, y_hat: &Tensor) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: y.shape().to_vec(),
            rhs: y_hat.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mae(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    check_same("mae", y, y_hat)?;
    Ok(y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn mse(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    check_same("mse", y, y_hat)?;
    Ok(y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
}

/// Window indices `0, s, 2s, …` keeping at most `limit` windows.
pub fn eval_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l > 0 && l < n => {
            let stride = n.div_ceil(l);
            (0..n).step_by(stride).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Metrics over the selected windows, pooled over every element.
pub fn evaluate(model: &Forecaster, windows: &WindowSet, idx: &[usize], batch_size: usize) -> Result<Metrics> {
    if idx.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = windows.batch(chunk);
        let pred = model.predict(&x)?;
        for (a, b) in y.data().iter().zip(pred.data()) {
            abs += (a - b).abs();
            sq += (a - b) * (a - b);
        }
        n += y.len();
    }
    Ok(Metrics {
        mae: abs / n as f64,
        mse: sq / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Caps the number of shuffled training batches per epoch.
    pub max_batches_per_epoch: Option<usize>,
    /// Caps validation windows (evenly strided) per epoch.
    pub max_eval_windows: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            max_epochs: 100,
            batch_size: 32,
            max_batches_per_epoch: None,
            max_eval_windows: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "lr must be positive, weight_decay non-negative and batch_size positive: {self:?}"
            )));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::Config("max_batches_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot at the epoch with the lowest validation MAE.
    pub model: Forecaster,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
}

pub fn train_forecaster(model: &Forecaster, train: &WindowSet, val: &WindowSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_forecaster_with(model, train, val, cfg, |_, _| Ok(()))
}

/// Training loop with a hook called after every epoch with the current
/// (not the best) model.
pub fn train_forecaster_with(
    model: &Forecaster,
    train: &WindowSet,
    val: &WindowSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Forecaster) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation windows must be nonempty".into()));
    }
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_val = f64::INFINITY;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_idx = eval_indices(val.len(), cfg.max_eval_windows);
    let limit = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
    let mut log = Vec::with_capacity(cfg.max_epochs);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size).take(limit) {
            let (x, y) = train.batch(idx);
            let (loss, grads) = current.loss_and_grad(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            opt.step(&mut current.params, &grads, &current.frozen);
            sum += loss;
            count += 1;
        }
        let val_metrics = evaluate(&current, val, &val_idx, cfg.batch_size)?;
        if !val_metrics.mae.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let record = EpochRecord {
            epoch,
            train_mae: sum / count as f64,
            val_mae: val_metrics.mae,
            val_mse: val_metrics.mse,
        };
        if record.val_mae < best_val {
            best_val = record.val_mae;
            best_epoch = Some(epoch);
            best = current.clone();
        }
        on_epoch(&record, &current)?;
        log.push(record);
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        log,
    })
}

pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_mae,val_mae,val_mse\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_mae, r.val_mae, r.val_mse));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One row of a metric table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub horizon: usize,
    pub plan: String,
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
}

pub const METRICS_HEADER: &str = "dataset,horizon,plan,seed,mae,mse";

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_windows;

    fn small_cfg(n_layer: usize) -> ForecasterConfig {
        ForecasterConfig {
            n_layer,
            mamba: MambaConfig::new(4, 4),
            t_in: 8,
            t_out: 4,
            n_features: 2,
        }
    }

    #[test]
    fn metric_hand_values() {
        let z = Tensor::zeros(&[2]);
        assert_eq!(mae(&z, &z).unwrap(), 0.0);
        let p = Tensor::from_vec(vec![1.0, -1.0]);
        assert_eq!((mae(&z, &p).unwrap(), mse(&z, &p).unwrap()), (1.0, 1.0));
        let p = Tensor::from_vec(vec![2.0, 0.0]);
        assert_eq!((mae(&z, &p).unwrap(), mse(&z, &p).unwrap()), (1.0, 2.0));
        assert!(mae(&z, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn build_is_deterministic_and_shapes_hold() {
        let cfg = ForecasterConfig {
            t_in: 96,
            t_out: 96,
            n_features: 7,
            ..Default::default()
        };
        let a = Forecaster::build(&cfg, 3).unwrap();
        assert_eq!(a, Forecaster::build(&cfg, 3).unwrap());
        assert_ne!(a.params, Forecaster::build(&cfg, 4).unwrap().params);
        let x = Tensor::from_fn(&[8, 96, 7], |k| ((k % 13) as f64 * 0.3).sin());
        assert_eq!(a.predict(&x).unwrap().shape(), &[8, 96, 7]);
    }

    #[test]
    fn zeroed_single_block_is_residual_identity() {
        let cfg = small_cfg(1);
        let mut m = Forecaster::build(&cfg, 0).unwrap();
        for f in PARAM_NAMES {
            let name = format!("layers.0.{f}");
            let shape = m.params[&name].shape().to_vec();
            m.params.insert(name, Tensor::zeros(&shape));
        }
        let x = Tensor::from_fn(&[2, 8, 2], |k| k as f64 * 0.1 - 0.7);
        let out = m.predict(&x).unwrap();
        assert!(out.is_finite());
        let (e, ht, hf) = (&m.params[EMBED], &m.params[HEAD_TIME], &m.params[HEAD_FEAT]);
        let want = Tensor::from_fn(&[2, 4, 2], |k| {
            let (b, s, f) = (k / 8, (k / 2) % 4, k % 2);
            let mut acc = 0.0;
            for t in 0..8 {
                for d in 0..4 {
                    let emb: f64 = (0..2).map(|c| x.data()[(b * 8 + t) * 2 + c] * e.data()[c * 4 + d]).sum();
                    acc += ht.data()[t * 4 + s] * emb * hf.data()[d * 2 + f];
                }
            }
            acc
        });
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn transfer_replaces_leading_layers_only() {
        let cfg = small_cfg(4);
        let m = Forecaster::build(&cfg, 1).unwrap();
        let pre = MambaParams::init(&cfg.mamba, 99).unwrap();
        let plan = TransferPlan::new(0.5, FreezeMode::FrozenA);
        let t = m.transfer(&pre, &plan).unwrap();
        assert_eq!(t.block(0).unwrap(), pre);
        assert_eq!(t.block(1).unwrap(), pre);
        assert_eq!(t.block(2).unwrap(), m.block(2).unwrap());
        assert_eq!(t.block(3).unwrap(), m.block(3).unwrap());
        assert_eq!(t.params[EMBED], m.params[EMBED]);
        assert_eq!(
            t.frozen,
            ["layers.0.a_log", "layers.1.a_log"].iter().map(|s| s.to_string()).collect()
        );
        assert_eq!(t.transfer(&pre, &plan).unwrap(), t);
        assert_eq!(m.transfer(&pre, &TransferPlan::new(0.0, FreezeMode::FrozenA)).unwrap(), m);
        let bad = MambaParams::init(&MambaConfig::new(8, 4), 0).unwrap();
        assert!(m.transfer(&bad, &plan).is_err());
    }

    #[test]
    fn selective_scope_copies_three_arrays() {
        let cfg = small_cfg(2);
        let m = Forecaster::build(&cfg, 1).unwrap();
        let pre = MambaParams::init(&cfg.mamba, 99).unwrap();
        let plan = TransferPlan {
            replace_fraction: 1.0,
            freeze_mode: FreezeMode::None,
            scope: TransferScope::Selective,
        };
        let t = m.transfer(&pre, &plan).unwrap();
        let b = t.block(1).unwrap();
        assert_eq!((&b.a_log, &b.w_x, &b.b_dt), (&pre.a_log, &pre.w_x, &pre.b_dt));
        assert_eq!(b.w_in, m.block(1).unwrap().w_in);
    }

    #[test]
    fn replaced_layer_rounding() {
        let counts: Vec<usize> = REPLACE_FRACTIONS
            .iter()
            .map(|&f| TransferPlan::new(f, FreezeMode::None).replaced_layers(4))
            .collect();
        assert_eq!(counts, vec![0, 1, 2, 3, 4]);
        assert!(TransferPlan::new(1.5, FreezeMode::None).validate().is_err());
    }

    #[test]
    fn every_unfrozen_array_receives_an_update() {
        let cfg = small_cfg(2);
        let m = Forecaster::build(&cfg, 5).unwrap();
        let x = Tensor::from_fn(&[3, 8, 2], |k| ((k * 7 % 11) as f64 * 0.4).cos());
        let y = Tensor::from_fn(&[3, 4, 2], |k| ((k * 5 % 7) as f64 * 0.3).sin());
        let (loss, grads) = m.loss_and_grad(&x, &y).unwrap();
        assert!(loss > 0.0);
        let mut params = m.params.clone();
        Adam::new(AdamConfig::default()).step(&mut params, &grads, &m.frozen);
        for (name, before) in &m.params {
            let zero_grad = grads[name].data().iter().all(|&v| v == 0.0);
            assert!(params[name] != *before || zero_grad, "{name}");
        }
    }

    #[test]
    fn zero_epochs_return_the_initial_model() {
        let cfg = small_cfg(1);
        let m = Forecaster::build(&cfg, 0).unwrap();
        let series = Tensor::from_fn(&[40, 2], |k| (k as f64 * 0.3).sin());
        let w = make_windows(&series, 8, 4).unwrap();
        let out = train_forecaster(
            &m,
            &w,
            &w,
            &TrainConfig {
                max_epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.model, m);
        assert!(out.log.is_empty() && out.best_epoch.is_none());
    }

    #[test]
    fn eval_subsampling_is_strided() {
        assert_eq!(eval_indices(10, Some(4)), vec![0, 3, 6, 9]);
        assert_eq!(eval_indices(3, Some(4)), vec![0, 1, 2]);
        assert_eq!(eval_indices(3, None), vec![0, 1, 2]);
    }

    #[test]
    fn plan_label_has_no_commas() {
        let l = TransferPlan::new(0.25, FreezeMode::FrozenA).label();
        assert_eq!(l, "replace=0.25/freeze=frozen-a");
    }
}
