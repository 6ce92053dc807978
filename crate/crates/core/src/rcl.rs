//! Repeated-step augmentation and the repetitive contrastive objective.
//!
//! Each time step is repeated `n_t` times; copy `k` receives Gaussian noise
//! with standard deviation `ladder[k]` (copy 0 stays clean). The same block
//! encodes the original and augmented sequences, and two InfoNCE terms are
//! summed:
//!
//! * intra: anchor is the clean copy of step `i` in the augmented output,
//!   positives are its noisy copies, the negative is the clean copy of `i+1`;
//! * inter: anchor is step `i` of the original output, positives are all
//!   copies of step `i` in the augmented output, the negative is step `i+1`
//!   of the original output.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::gather;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mamba::{block_graph, MambaConfig, MambaParams};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Noise standard deviation per repeated copy; `sigmas[0] == 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseLadder {
    sigmas: Vec<f64>,
}

impl NoiseLadder {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::Config("noise ladder needs at least two entries".into()));
        }
        if sigmas[0] != 0.0 {
            return Err(Error::Config("first ladder entry must be 0 (the clean copy)".into()));
        }
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("ladder entries must be finite and non-negative".into()));
        }
        if sigmas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("ladder must be non-decreasing".into()));
        }
        Ok(Self { sigmas })
    }

    /// `[0, base, 2·base, 4·base, …]` with `n_t` entries.
    pub fn doubling(n_t: usize, base: f64) -> Result<Self> {
        let mut sigmas = vec![0.0];
        let mut s = base;
        while sigmas.len() < n_t {
            sigmas.push(s);
            s *= 2.0;
        }
        Self::new(sigmas)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Default for NoiseLadder {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, 1e-3, 1e-2],
        }
    }
}

impl TryFrom<Vec<f64>> for NoiseLadder {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NoiseLadder> for Vec<f64> {
    fn from(l: NoiseLadder) -> Self {
        l.sigmas
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_t: usize,
    pub ladder: NoiseLadder,
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Caps optimizer steps per epoch; `None` visits every window.
    pub max_batches_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_t: 3,
            ladder: NoiseLadder::default(),
            tau: 0.1,
            epochs: 100,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            max_batches_per_epoch: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t < 2 {
            return Err(Error::Config("n_t must be at least 2".into()));
        }
        if self.ladder.len() != self.n_t {
            return Err(Error::Config(format!(
                "ladder has {} entries but n_t = {}",
                self.ladder.len(),
                self.n_t
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A batch after step repetition and noise injection.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    /// `[B, T, F]`
    pub original: Tensor,
    /// `[B, n_t·T, F]`
    pub augmented: Tensor,
    pub n_t: usize,
}

impl AugmentedBatch {
    /// Copy `k` of every step, `[B, T, F]`.
    pub fn copy(&self, k: usize) -> Tensor {
        let s = self.original.shape();
        let (b, t, f) = (s[0], s[1], s[2]);
        Tensor::from_fn(s, |idx| {
            let (bi, rest) = (idx / (t * f), idx % (t * f));
            let (ti, fi) = (rest / f, rest % f);
            self.augmented.data()[((bi * t + ti) * self.n_t + k) * f + fi]
        })
        .reshape(&[b, t, f])
        .expect("same shape")
    }
}

/// Repeats each step `ladder.len()` times and adds the ladder's noise.
///
/// Draws happen in batch, time, copy, feature order; zero-σ copies draw nothing.
pub fn repeat_augment(x: &Tensor, ladder: &NoiseLadder, rng: &mut impl Rng) -> Result<AugmentedBatch> {
    if x.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [B, T, F]".into(),
        });
    }
    let (b, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if t < 2 {
        return Err(Error::InvalidArgument("augmentation needs at least two time steps".into()));
    }
    let n_t = ladder.len();
    let mut out = Vec::with_capacity(b * t * n_t * f);
    for row in x.data().chunks(f) {
        for &sigma in ladder.sigmas() {
            if sigma == 0.0 {
                out.extend_from_slice(row);
            } else {
                for &v in row {
                    let z: f64 = rng.sample(StandardNormal);
                    out.push(v + sigma * z);
                }
            }
        }
    }
    Ok(AugmentedBatch {
        original: x.clone(),
        augmented: Tensor::new(vec![b, n_t * t, f], out)?,
        n_t,
    })
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn seq_dims(g: &Graph, h: NodeId, n_t: usize) -> Result<(usize, usize)> {
    let s = g.value(h).shape();
    if s.len() != 3 || s[1] % n_t != 0 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("expected [B, n_t·s, D] with n_t = {n_t}"),
        });
    }
    let steps = s[1] / n_t;
    if steps < 2 {
        return Err(Error::InvalidArgument("contrastive losses need s >= 2".into()));
    }
    Ok((s[0], steps))
}

/// Intra-sequence InfoNCE on `h_aug [B, n_t·s, D]`, averaged over anchors and batch.
pub fn intra_loss_graph(g: &mut Graph, h_aug: NodeId, n_t: usize, tau: f64) -> Result<NodeId> {
    if n_t < 2 {
        return Err(Error::InvalidArgument("n_t must be at least 2".into()));
    }
    let (batch, s) = seq_dims(g, h_aug, n_t)?;
    let len = n_t * s;
    let mut pairs = Vec::new();
    let mut all = Vec::new();
    let mut pos = Vec::new();
    for b in 0..batch {
        for i in 0..s - 1 {
            let anchor = b * len + i * n_t;
            let first = pairs.len();
            for z in 1..n_t {
                pairs.push((anchor, anchor + z));
            }
            pairs.push((anchor, anchor + n_t));
            pos.push((first..first + n_t - 1).collect());
            all.push((first..first + n_t).collect());
        }
    }
    let sims = g.pair_cosine(h_aug, h_aug, pairs)?;
    infonce(g, sims, all, pos, tau)
}

/// Inter-sequence InfoNCE between `h [B, s, D]` and `h_aug [B, n_t·s, D]`.
pub fn inter_loss_graph(g: &mut Graph, h: NodeId, h_aug: NodeId, n_t: usize, tau: f64) -> Result<NodeId> {
    let (batch, s) = seq_dims(g, h_aug, n_t)?;
    let hs = g.value(h).shape();
    if hs.len() != 3 || hs[0] != batch || hs[1] != s || hs[2] != g.value(h_aug).shape()[2] {
        return Err(Error::ShapeMismatch {
            op: "inter_loss",
            lhs: hs.to_vec(),
            rhs: g.value(h_aug).shape().to_vec(),
        });
    }
    let anchors = batch * (s - 1);
    let mut pos_pairs = Vec::with_capacity(anchors * n_t);
    let mut neg_pairs = Vec::with_capacity(anchors);
    let mut all = Vec::with_capacity(anchors);
    let mut pos = Vec::with_capacity(anchors);
    for b in 0..batch {
        for i in 0..s - 1 {
            let a = b * s + i;
            let first = pos_pairs.len();
            for z in 0..n_t {
                pos_pairs.push((a, b * n_t * s + i * n_t + z));
            }
            neg_pairs.push((a, a + 1));
            let p: Vec<usize> = (first..first + n_t).collect();
            let mut with_neg = p.clone();
            with_neg.push(anchors * n_t + neg_pairs.len() - 1);
            pos.push(p);
            all.push(with_neg);
        }
    }
    let ps = g.pair_cosine(h, h_aug, pos_pairs)?;
    let ns = g.pair_cosine(h, h, neg_pairs)?;
    let sims = g.concat0(ps, ns)?;
    infonce(g, sims, all, pos, tau)
}

/// `mean_a [ LSE(all_a / τ) - LSE(pos_a / τ) ]`
fn infonce(g: &mut Graph, sims: NodeId, all: Vec<Vec<usize>>, pos: Vec<Vec<usize>>, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    let logits = g.scale(sims, 1.0 / tau)?;
    let la = g.segment_logsumexp(logits, all)?;
    let lp = g.segment_logsumexp(logits, pos)?;
    let d = g.sub(la, lp)?;
    g.mean(d)
}

/// Node ids of the two terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct RclLossNodes {
    pub intra: NodeId,
    pub inter: NodeId,
    pub total: NodeId,
}

pub fn rcl_loss_graph(g: &mut Graph, h: NodeId, h_aug: NodeId, n_t: usize, tau: f64) -> Result<RclLossNodes> {
    let intra = intra_loss_graph(g, h_aug, n_t, tau)?;
    let inter = inter_loss_graph(g, h, h_aug, n_t, tau)?;
    let total = g.add(intra, inter)?;
    Ok(RclLossNodes { intra, inter, total })
}

pub fn intra_loss(h_aug: &Tensor, n_t: usize, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let ha = g.constant(h_aug.clone());
    let l = intra_loss_graph(&mut g, ha, n_t, tau)?;
    Ok(g.value(l).item())
}

pub fn inter_loss(h: &Tensor, h_aug: &Tensor, n_t: usize, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let hn = g.constant(h.clone());
    let ha = g.constant(h_aug.clone());
    let l = inter_loss_graph(&mut g, hn, ha, n_t, tau)?;
    Ok(g.value(l).item())
}

pub fn rcl_loss(h: &Tensor, h_aug: &Tensor, n_t: usize, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let hn = g.constant(h.clone());
    let ha = g.constant(h_aug.clone());
    let l = rcl_loss_graph(&mut g, hn, ha, n_t, tau)?;
    Ok(g.value(l.total).item())
}

/// Name of the pretraining input embedding in parameter maps and files.
pub const EMBED_NAME: &str = "embed";
/// Prefix of the block parameters in parameter maps and files.
pub const BLOCK_PREFIX: &str = "block.";

/// Input embedding `[F, d_model]`, uniform in `±1/√F`.
pub fn init_embedding(n_features: usize, d_model: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (n_features as f64).sqrt();
    Tensor::from_fn(&[n_features, d_model], |_| rng.random_range(-bound..bound))
}

/// Records embedding, both block passes and the loss for one batch.
pub fn pretrain_loss_graph(
    g: &mut Graph,
    block: &MambaParams,
    embed: &Tensor,
    batch: &AugmentedBatch,
    cfg: &MambaConfig,
    tau: f64,
) -> Result<RclLossNodes> {
    let nodes = block.register(g, BLOCK_PREFIX)?;
    let w = g.param(EMBED_NAME, embed.clone())?;
    let x = g.constant(batch.original.clone());
    let xa = g.constant(batch.augmented.clone());
    let e = g.matmul(x, w)?;
    let ea = g.matmul(xa, w)?;
    let h = block_graph(g, &nodes, cfg, e)?.out;
    let ha = block_graph(g, &nodes, cfg, ea)?.out;
    rcl_loss_graph(g, h, ha, batch.n_t, tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub block: MambaParams,
    pub embed: Tensor,
    pub history: Vec<EpochLoss>,
}

impl PretrainOutcome {
    /// Block arrays under `block.*` plus the embedding.
    pub fn to_named(&self) -> std::collections::BTreeMap<String, Tensor> {
        let mut named = self.block.to_named(BLOCK_PREFIX);
        named.insert(EMBED_NAME.to_string(), self.embed.clone());
        named
    }
}

/// Single-block contrastive pretraining over `windows [M, T, F]`.
pub fn pretrain(cfg: &PretrainConfig, block_cfg: &MambaConfig, windows: &Tensor) -> Result<PretrainOutcome> {
    cfg.validate()?;
    block_cfg.validate()?;
    if windows.rank() != 3 || windows.shape()[1] < 2 {
        return Err(Error::InvalidShape {
            shape: windows.shape().to_vec(),
            reason: "pretraining windows must be [M, T >= 2, F]".into(),
        });
    }
    let n_features = windows.shape()[2];
    let block = MambaParams::init(block_cfg, cfg.seed)?;
    let embed = init_embedding(n_features, block_cfg.d_model, cfg.seed.wrapping_add(1));
    let mut params = block.to_named(BLOCK_PREFIX);
    params.insert(EMBED_NAME.to_string(), embed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let frozen = BTreeSet::new();
    let mut order: Vec<usize> = (0..windows.shape()[0]).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 3];
        let mut count = 0usize;
        let batches = order.chunks(cfg.batch_size);
        let limit = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
        for idx in batches.take(limit) {
            let x = gather(windows, idx);
            let aug = repeat_augment(&x, &cfg.ladder, &mut noise_rng)?;
            let block = MambaParams::from_named(&params, BLOCK_PREFIX)?;
            let mut g = Graph::new();
            let loss = pretrain_loss_graph(&mut g, &block, &params[EMBED_NAME], &aug, block_cfg, cfg.tau)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grads = g.gradient(loss.total)?;
            opt.step(&mut params, &grads, &frozen);
            sums[0] += g.value(loss.intra).item();
            sums[1] += g.value(loss.inter).item();
            sums[2] += total;
            count += 1;
        }
        let n = count.max(1) as f64;
        history.push(EpochLoss {
            epoch,
            intra: sums[0] / n,
            inter: sums[1] / n,
            total: sums[2] / n,
        });
    }
    Ok(PretrainOutcome {
        block: MambaParams::from_named(&params, BLOCK_PREFIX)?,
        embed: params.remove(EMBED_NAME).expect("embedding present"),
        history,
    })
}

/// Loss history as CSV with header `epoch,intra,inter,total`.
pub fn write_loss_history(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut s = String::from("epoch,intra,inter,total\n");
    for e in history {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.intra, e.inter, e.total));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rows(batch: usize, len: usize, d: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[batch, len, d], |k| f(k / (len * d), (k / d) % len, k % d))
    }

    /// Direct evaluation of the intra term for one sequence.
    fn intra_direct(h: &Tensor, n_t: usize, tau: f64) -> f64 {
        let s = h.shape()[1] / n_t;
        let mut total = 0.0;
        for i in 0..s - 1 {
            let a = h.row(i * n_t);
            let pos: f64 = (1..n_t)
                .map(|z| (cosine_sim(a, h.row(i * n_t + z)).unwrap() / tau).exp())
                .sum();
            let neg = (cosine_sim(a, h.row((i + 1) * n_t)).unwrap() / tau).exp();
            total -= (pos / (pos + neg)).ln();
        }
        total / (s - 1) as f64
    }

    #[test]
    fn cosine_examples() {
        assert_relative_eq!(cosine_sim(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(
            cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            max_relative = 1e-15
        );
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn equal_similarity_closed_forms() {
        let h = rows(2, 4, 3, |_, _, d| 1.0 + d as f64);
        let ha = rows(2, 12, 3, |_, _, d| 1.0 + d as f64);
        assert_relative_eq!(intra_loss(&ha, 3, 0.1).unwrap(), 1.5f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(inter_loss(&h, &ha, 3, 0.1).unwrap(), (4.0f64 / 3.0).ln(), epsilon = 1e-12);
        // large τ washes out similarities: ln((P+1)/P) with P = n_t
        let hv = rows(1, 4, 2, |_, t, d| ((t * 3 + d) as f64).sin() + 0.1);
        let hav = rows(1, 12, 2, |_, t, d| ((t * 5 + d) as f64).cos() + 0.1);
        assert_relative_eq!(inter_loss(&hv, &hav, 3, 1e9).unwrap(), (4.0f64 / 3.0).ln(), epsilon = 1e-8);
    }

    #[test]
    fn intra_two_copies_opposed_negative() {
        // n_t = 2, s = 2: rows [a, a, -a, -a]; positive sim 1, negative sim -1
        let ha = Tensor::new(vec![1, 4, 2], vec![1.0, 2.0, 1.0, 2.0, -1.0, -2.0, -1.0, -2.0]).unwrap();
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert_relative_eq!(intra_loss(&ha, 2, 1.0).unwrap(), want, max_relative = 1e-12);
        assert_relative_eq!(want, 0.126_928_011_042_972_6, max_relative = 1e-12);
    }

    #[test]
    fn inter_perfect_case_is_tiny() {
        let v = [0.6, 0.8];
        let h = Tensor::new(vec![1, 2, 2], vec![v[0], v[1], -v[0], -v[1]]).unwrap();
        let mut aug = Vec::new();
        for _ in 0..3 {
            aug.extend_from_slice(&v);
        }
        for _ in 0..3 {
            aug.extend_from_slice(&[1.0, 0.0]);
        }
        let ha = Tensor::new(vec![1, 6, 2], aug).unwrap();
        let l = inter_loss(&h, &ha, 3, 0.1).unwrap();
        assert!(l > 0.0 && l < 1e-8, "{l}");
    }

    #[test]
    fn intra_matches_direct_evaluation() {
        let ha = rows(1, 15, 4, |_, t, d| ((t * 7 + d * 3) as f64 * 0.31).sin() + 0.05 * d as f64);
        let want = intra_direct(&ha, 3, 0.2);
        assert_relative_eq!(intra_loss(&ha, 3, 0.2).unwrap(), want, max_relative = 1e-12);
    }

    #[test]
    fn lowering_negative_similarity_lowers_loss() {
        // anchor e0, positives fixed, negative rotated away from the anchor
        let mk = |angle: f64| {
            Tensor::new(
                vec![1, 4, 2],
                vec![1.0, 0.0, 0.9, 0.1, angle.cos(), angle.sin(), 1.0, 1.0],
            )
            .unwrap()
        };
        let mut last = f64::INFINITY;
        for step in 0..6 {
            let l = intra_loss(&mk(0.3 + 0.5 * step as f64), 2, 0.5).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn rcl_is_sum_of_terms() {
        let h = rows(2, 5, 3, |b, t, d| ((b * 11 + t * 3 + d) as f64).sin() + 0.2);
        let ha = rows(2, 15, 3, |b, t, d| ((b * 13 + t * 5 + d) as f64).cos() + 0.2);
        let sum = intra_loss(&ha, 3, 0.1).unwrap() + inter_loss(&h, &ha, 3, 0.1).unwrap();
        assert!((rcl_loss(&h, &ha, 3, 0.1).unwrap() - sum).abs() <= 1e-15);
    }

    #[test]
    fn losses_are_scale_invariant() {
        let h = rows(1, 5, 3, |_, t, d| ((t * 3 + d) as f64).sin() + 0.2);
        let ha = rows(1, 15, 3, |_, t, d| ((t * 5 + d) as f64).cos() + 0.2);
        let base = rcl_loss(&h, &ha, 3, 0.1).unwrap();
        let scaled = rcl_loss(&h.map(|v| v * 7.5), &ha.map(|v| v * 7.5), 3, 0.1).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn loss_argument_errors() {
        let ha = rows(1, 3, 2, |_, _, _| 1.0);
        assert!(intra_loss(&ha, 3, 0.1).is_err());
        let ha = rows(1, 6, 2, |_, _, _| 1.0);
        assert!(inter_loss(&rows(1, 3, 2, |_, _, _| 1.0), &ha, 3, 0.1).is_err());
        assert!(intra_loss(&ha, 3, 0.0).is_err());
    }

    #[test]
    fn zero_ladder_triples_each_step() {
        let x = rows(2, 4, 3, |b, t, d| (b * 100 + t * 10 + d) as f64);
        let ladder = NoiseLadder::new(vec![0.0, 0.0, 0.0]).unwrap();
        let aug = repeat_augment(&x, &ladder, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(aug.augmented.shape(), &[2, 12, 3]);
        for k in 0..3 {
            assert_eq!(aug.copy(k), x);
        }
    }

    #[test]
    fn augment_rejects_short_sequences() {
        let x = Tensor::zeros(&[1, 1, 2]);
        assert!(repeat_augment(&x, &NoiseLadder::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn ladder_validation_and_doubling() {
        assert!(NoiseLadder::new(vec![0.1, 0.2]).is_err());
        assert!(NoiseLadder::new(vec![0.0, 0.2, 0.1]).is_err());
        assert_eq!(NoiseLadder::doubling(5, 1e-3).unwrap().sigmas(), &[0.0, 1e-3, 2e-3, 4e-3, 8e-3]);
        let cfg = PretrainConfig {
            n_t: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let block_cfg = MambaConfig::new(4, 4);
        let cfg = PretrainConfig {
            epochs: 0,
            seed: 3,
            ..Default::default()
        };
        let windows = rows(4, 6, 2, |b, t, d| (b + t + d) as f64 * 0.1);
        let out = pretrain(&cfg, &block_cfg, &windows).unwrap();
        assert_eq!(out.block, MambaParams::init(&block_cfg, 3).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let block_cfg = MambaConfig::new(4, 4);
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-2,
            seed: 5,
            ..Default::default()
        };
        let windows = rows(5, 6, 2, |b, t, d| ((b * 7 + t * 3 + d) as f64).sin());
        let a = pretrain(&cfg, &block_cfg, &windows).unwrap();
        let b = pretrain(&cfg, &block_cfg, &windows).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.block, b.block);
        assert_ne!(a.block, MambaParams::init(&block_cfg, 5).unwrap());
    }
}
