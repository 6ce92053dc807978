//! Independent numerical oracles: central-difference gradient checks, a
//! literal recurrence reference for the scan, and the stationarity analysis
//! of the single-step contrastive bound.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::mamba::{block_graph, discretize, selective_scan, MambaConfig, MambaParams};
use crate::rcl::{init_embedding, pretrain_loss_graph, repeat_augment, NoiseLadder, BLOCK_PREFIX, EMBED_NAME};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Every coordinate is checked when the parameter count is at most this;
    /// otherwise this many distinct coordinates are sampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
}

/// Compares `analytic` with central differences of `loss`.
pub fn finite_diff_against(
    params: &BTreeMap<String, Tensor>,
    analytic: &Gradients,
    loss: impl Fn(&BTreeMap<String, Tensor>) -> Result<f64>,
    opts: FdOptions,
) -> Result<FdReport> {
    let coords: Vec<(&String, usize)> = params.iter().flat_map(|(n, t)| (0..t.len()).map(move |k| (n, k))).collect();
    let picked: Vec<usize> = if coords.len() <= opts.max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, coords.len(), opts.max_coords.max(200)).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut p = params.clone();
    for &c in &picked {
        let (name, k) = coords[c];
        let orig = params[name].data()[k];
        p.get_mut(name).expect("param").data_mut()[k] = orig + opts.eps;
        let fp = loss(&p)?;
        p.get_mut(name).expect("param").data_mut()[k] = orig - opts.eps;
        let fm = loss(&p)?;
        p.get_mut(name).expect("param").data_mut()[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed `{name}`[{k}]")));
        }
        let numeric = (fp - fm) / (2.0 * opts.eps);
        let ana = analytic
            .get(name)
            .ok_or_else(|| Error::Graph(format!("no analytic gradient for `{name}`")))?
            .data()[k];
        let err = (ana - numeric).abs() / ana.abs().max(1.0);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((name.clone(), k));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check of a graph-built scalar loss.
pub fn finite_diff_check(
    params: &BTreeMap<String, Tensor>,
    build: impl Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId>,
    opts: FdOptions,
) -> Result<FdReport> {
    let eval = |p: &BTreeMap<String, Tensor>| -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let ids = g.params_from(p)?;
        let out = build(&mut g, &ids)?;
        Ok((g, out))
    };
    let (g, out) = eval(params)?;
    let analytic = g.gradient(out)?;
    finite_diff_against(params, &analytic, |p| eval(p).map(|(g, o)| g.value(o).item()), opts)
}

/// Parameters and a fixed augmented batch for checking the contrastive
/// objective through one block.
pub struct RclCheckCase {
    pub cfg: MambaConfig,
    pub params: BTreeMap<String, Tensor>,
    pub batch: crate::rcl::AugmentedBatch,
    pub tau: f64,
}

impl RclCheckCase {
    pub fn new(cfg: MambaConfig, batch: usize, steps: usize, features: usize, n_t: usize, tau: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[batch, steps, features], |_| rng.random_range(-1.0..1.0));
        let ladder = NoiseLadder::doubling(n_t, 0.05)?;
        let aug = repeat_augment(&x, &ladder, &mut rng)?;
        let mut params = MambaParams::init(&cfg, seed.wrapping_add(1))?.to_named(BLOCK_PREFIX);
        params.insert(EMBED_NAME.to_string(), init_embedding(features, cfg.d_model, seed.wrapping_add(2)));
        Ok(Self {
            cfg,
            params,
            batch: aug,
            tau,
        })
    }

    pub fn build(&self, g: &mut Graph, p: &BTreeMap<String, Tensor>) -> Result<NodeId> {
        let block = MambaParams::from_named(p, BLOCK_PREFIX)?;
        Ok(pretrain_loss_graph(g, &block, &p[EMBED_NAME], &self.batch, &self.cfg, self.tau)?.total)
    }

    pub fn loss(&self, p: &BTreeMap<String, Tensor>) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.build(&mut g, p)?;
        Ok(g.value(out).item())
    }

    pub fn analytic(&self) -> Result<Gradients> {
        let mut g = Graph::new();
        let out = self.build(&mut g, &self.params)?;
        g.gradient(out)
    }

    pub fn check(&self, opts: FdOptions) -> Result<FdReport> {
        finite_diff_against(&self.params, &self.analytic()?, |p| self.loss(p), opts)
    }
}

/// Literal recurrence for one sequence: `abar, bbar [T, D, N]`, `c [T, N]`,
/// `x [T, D]`, `skip [D]` give `o [T, D]`.
pub fn brute_scan(abar: &Tensor, bbar: &Tensor, c: &Tensor, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
    if abar.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: abar.shape().to_vec(),
            reason: "Ā must be [T, D, N]".into(),
        });
    }
    let (nt, nd, ns) = (abar.shape()[0], abar.shape()[1], abar.shape()[2]);
    let mismatch = bbar.shape() != abar.shape() || c.shape() != [nt, ns] || x.shape() != [nt, nd] || skip.shape() != [nd];
    if mismatch {
        return Err(Error::ShapeMismatch {
            op: "brute_scan",
            lhs: abar.shape().to_vec(),
            rhs: [bbar.shape(), c.shape(), x.shape(), skip.shape()].concat(),
        });
    }
    let at = |t: &Tensor, idx: [usize; 3]| t.data()[(idx[0] * nd + idx[1]) * ns + idx[2]];
    let mut h = vec![vec![0.0; ns]; nd];
    let mut o = Vec::with_capacity(nt * nd);
    for t in 0..nt {
        for i in 0..nd {
            for j in 0..ns {
                h[i][j] = at(abar, [t, i, j]) * h[i][j] + at(bbar, [t, i, j]) * x.data()[t * nd + i];
            }
        }
        for i in 0..nd {
            let mut out = skip.data()[i] * x.data()[t * nd + i];
            for j in 0..ns {
                out += c.data()[t * ns + j] * h[i][j];
            }
            o.push(out);
        }
    }
    Tensor::new(vec![nt, nd], o)
}

/// One random continuous-form scan instance.
#[derive(Clone, Debug)]
pub struct ScanInstance {
    pub u: Tensor,
    pub delta: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

impl ScanInstance {
    pub fn random(rng: &mut impl Rng, max_t: usize, max_d: usize, max_n: usize) -> Self {
        let (t, d, n) = (rng.random_range(1..=max_t), rng.random_range(1..=max_d), rng.random_range(1..=max_n));
        let mut uni = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
        let u = uni(&[t, d], -2.0, 2.0);
        let delta = uni(&[t, d], 1e-3, 1.0);
        let a = uni(&[d, n], -1.0, 2.0).map(|v| -v.exp());
        let b = uni(&[t, n], -1.5, 1.5);
        let c = uni(&[t, n], -1.5, 1.5);
        let d_skip = uni(&[d], -1.0, 1.0);
        Self {
            u,
            delta,
            a,
            b,
            c,
            d: d_skip,
        }
    }

    /// Output of the fused graph scan on this instance (batch of one).
    pub fn fused(&self) -> Result<Tensor> {
        let (t, d) = (self.u.shape()[0], self.u.shape()[1]);
        let mut g = Graph::new();
        let add3 = |g: &mut Graph, x: &Tensor| g.constant(x.reshape(&[1, x.shape()[0], x.shape()[1]]).expect("reshape"));
        let u = add3(&mut g, &self.u);
        let delta = add3(&mut g, &self.delta);
        let bm = add3(&mut g, &self.b);
        let cm = add3(&mut g, &self.c);
        let a = g.constant(self.a.clone());
        let dd = g.constant(self.d.clone());
        let o = g.selective_scan(u, delta, a, bm, cm, dd)?;
        g.value(o).reshape(&[t, d])
    }

    /// Per-step ZOH discretization, `(Ā, B̄)` each `[T, D, N]`.
    pub fn discretized(&self) -> Result<(Tensor, Tensor)> {
        let (t, d) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.a.shape()[1];
        let (mut abar, mut bbar) = (Vec::with_capacity(t * d * n), Vec::with_capacity(t * d * n));
        for s in 0..t {
            let b_t = Tensor::from_vec(self.b.row(s).to_vec());
            let d_t = Tensor::from_vec(self.delta.row(s).to_vec());
            let (ab, bb) = discretize(&self.a, &b_t, &d_t)?;
            abar.extend_from_slice(ab.data());
            bbar.extend_from_slice(bb.data());
        }
        Ok((Tensor::new(vec![t, d, n], abar)?, Tensor::new(vec![t, d, n], bbar)?))
    }

    /// Max abs difference of the fused and per-sequence scans from the
    /// literal recurrence.
    pub fn max_diff(&self) -> Result<f64> {
        let (abar, bbar) = self.discretized()?;
        let reference = brute_scan(&abar, &bbar, &self.c, &self.u, &self.d)?;
        let seq = selective_scan(&abar, &bbar, &self.c, &self.u, &self.d)?.o;
        Ok(self.fused()?.max_abs_diff(&reference).max(seq.max_abs_diff(&reference)))
    }
}

/// `(max_abs(Ā − 1), max_abs(B̄ − δB))` and their first-order bounds
/// `(2δ‖A‖∞, δ²‖A‖∞‖B‖∞)` for a uniform step `δ`.
pub fn zoh_limit(a: &Tensor, b: &Tensor, delta: f64) -> Result<[f64; 4]> {
    let nd = a.shape()[0];
    let (abar, bbar) = discretize(a, b, &Tensor::full(&[nd], delta))?;
    let ns = b.len();
    let a_inf = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let b_inf = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev_a = abar.data().iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    let dev_b = bbar
        .data()
        .iter()
        .enumerate()
        .fold(0.0f64, |m, (k, v)| m.max((v - delta * b.data()[k % ns]).abs()));
    Ok([dev_a, dev_b, 2.0 * delta * a_inf, delta * delta * a_inf * b_inf])
}

/// Scalar instance of the single-step bound analysis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AppendixCInstance {
    pub h: f64,
    pub x: f64,
    pub x_next: f64,
    pub sigma: f64,
}

pub const SWEEP_SIGMAS: [f64; 3] = [1e-3, 1e-2, 0.1];
/// Instances closer than this to a vanishing denominator are resampled.
pub const DEGENERATE_MARGIN: f64 = 0.05;

impl AppendixCInstance {
    pub fn random(rng: &mut impl Rng) -> Self {
        loop {
            let inst = Self {
                h: rng.random_range(-2.0..2.0),
                x: rng.random_range(-2.0..2.0),
                x_next: rng.random_range(-2.0..2.0),
                sigma: SWEEP_SIGMAS[rng.random_range(0..SWEEP_SIGMAS.len())],
            };
            if inst.h.abs() >= DEGENERATE_MARGIN && (inst.x + inst.sigma).abs() >= DEGENERATE_MARGIN {
                return inst;
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.h == 0.0 || self.x + self.sigma == 0.0 {
            return Err(Error::InvalidArgument(format!("degenerate instance {self:?}")));
        }
        Ok(())
    }

    /// `f(A, B) = (A²−A)h² + (AB−B)(x+σ)h + B·x_next·h`.
    pub fn f(&self, a: f64, b: f64) -> f64 {
        let (h, s) = (self.h, self.x + self.sigma);
        (a * a - a) * h * h + (a * b - b) * s * h + b * self.x_next * h
    }

    /// `(∂f/∂A, ∂f/∂B)`.
    pub fn grad(&self, a: f64, b: f64) -> (f64, f64) {
        let (h, s) = (self.h, self.x + self.sigma);
        ((2.0 * a - 1.0) * h * h + b * s * h, (a - 1.0) * s * h + self.x_next * h)
    }

    /// The published stationary point `(A*, B*)`.
    pub fn closed_form(&self) -> (f64, f64) {
        let (h, s) = (self.h, self.x + self.sigma);
        let b = h * (2.0 * self.x_next - s) / (s * s);
        let a = (h * h - b * s * h) / (2.0 * h * h);
        (a, b)
    }

    /// The published bound `((x_next² − x_next(x+σ))/(x+σ)²)·h²`.
    pub fn bound(&self) -> f64 {
        let s = self.x + self.sigma;
        (self.x_next * self.x_next - self.x_next * s) / (s * s) * self.h * self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AppendixCResult {
    pub residual_a: f64,
    pub residual_b: f64,
    /// `|f(A*, B*) − bound|`.
    pub bound_match: f64,
}

pub fn appendix_c_check(inst: &AppendixCInstance) -> Result<AppendixCResult> {
    inst.validate()?;
    let (a, b) = inst.closed_form();
    let (ga, gb) = inst.grad(a, b);
    Ok(AppendixCResult {
        residual_a: ga.abs(),
        residual_b: gb.abs(),
        bound_match: (inst.f(a, b) - inst.bound()).abs(),
    })
}

/// Newton iteration on `∇f = 0` with a central-difference Jacobian, started
/// at `start`. Returns the root it converges to.
pub fn find_stationary_point(inst: &AppendixCInstance, start: (f64, f64)) -> Result<(f64, f64)> {
    inst.validate()?;
    let (mut a, mut b) = start;
    let step = 1e-3;
    for _ in 0..100 {
        let (ga, gb) = inst.grad(a, b);
        let (ga_pa, gb_pa) = inst.grad(a + step, b);
        let (ga_ma, gb_ma) = inst.grad(a - step, b);
        let (ga_pb, gb_pb) = inst.grad(a, b + step);
        let (ga_mb, gb_mb) = inst.grad(a, b - step);
        let j = [
            [(ga_pa - ga_ma) / (2.0 * step), (ga_pb - ga_mb) / (2.0 * step)],
            [(gb_pa - gb_ma) / (2.0 * step), (gb_pb - gb_mb) / (2.0 * step)],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            return Err(Error::InvalidArgument("singular Jacobian in root search".into()));
        }
        let da = (ga * j[1][1] - gb * j[0][1]) / det;
        let db = (gb * j[0][0] - ga * j[1][0]) / det;
        a -= da;
        b -= db;
        if da.abs().max(db.abs()) <= 1e-15 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
    }
    Ok((a, b))
}

/// The published bound over a grid of noise levels for one instance.
pub fn sigma_sweep(h: f64, x: f64, x_next: f64, sigmas: &[f64]) -> Result<Vec<(f64, f64)>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let inst = AppendixCInstance { h, x, x_next, sigma };
            inst.validate()?;
            Ok((sigma, inst.bound()))
        })
        .collect()
}

/// Log-spaced noise grid from `1e-4` to `1`.
pub fn default_sigma_grid() -> Vec<f64> {
    (0..=40).map(|k| 10f64.powf(-4.0 + 0.1 * k as f64)).collect()
}

pub fn write_sigma_sweep(path: &Path, sweep: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from("sigma,bound\n");
    for (sigma, bound) in sweep {
        s.push_str(&format!("{sigma},{bound}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Grad,
    Scan,
    AppendixC,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Suite::Grad),
            "scan" => Ok(Suite::Scan),
            "appendix-c" => Ok(Suite::AppendixC),
            "all" => Ok(Suite::All),
            _ => Err(Error::InvalidArgument(format!("unknown suite `{s}` (grad, scan, appendix-c, all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    /// `"<"` when `value` must stay below `threshold`, `">"` when above.
    pub comparison: &'static str,
    pub threshold: f64,
}

impl CheckResult {
    pub fn below(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: value < threshold,
            value,
            comparison: "<",
            threshold,
        }
    }

    pub fn above(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: value > threshold,
            value,
            comparison: ">",
            threshold,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    /// `(sigma, bound)` pairs, present when the appendix-c suite ran.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sigma_sweep: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_monotone_increasing: Option<bool>,
}

impl OracleReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn quadratic_case(seed: u64, lo: f64, hi: f64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = BTreeMap::new();
    p.insert("p".to_string(), Tensor::from_fn(&[64], |_| rng.random_range(lo..hi)));
    p
}

fn half_square(g: &mut Graph, ids: &BTreeMap<String, NodeId>) -> Result<NodeId> {
    let p = ids["p"];
    let sq = g.mul(p, p)?;
    let s = g.sum(sq)?;
    g.scale(s, 0.5)
}

pub fn grad_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let quad = quadratic_case(seed, -0.1, 0.1);
    let r = finite_diff_check(&quad, half_square, FdOptions::default())?;
    out.push(CheckResult::below("grad/quadratic", r.max_rel_err, 1e-10));

    // gradients of magnitude ≥ 1 so a 1% error exceeds the detection bar
    let quad = quadratic_case(seed, 1.0, 3.0);

    let mut analytic = Gradients::new();
    analytic.insert("p".to_string(), quad["p"].clone());
    analytic.get_mut("p").expect("p").data_mut()[7] *= 1.01;
    let loss = |p: &BTreeMap<String, Tensor>| Ok(0.5 * p["p"].data().iter().map(|v| v * v).sum::<f64>());
    let r = finite_diff_against(&quad, &analytic, loss, FdOptions::default())?;
    out.push(CheckResult::above("grad/fault-injection", r.max_rel_err, 5e-3));

    let cfg = MambaConfig::new(4, 4);
    let block = MambaParams::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    let x = Tensor::from_fn(&[2, 8, 4], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[2, 8, 4], |_| rng.random_range(-1.0..1.0));
    let r = finite_diff_check(
        &block.to_named(""),
        |g, ids| {
            let nodes = crate::mamba::BlockNodes {
                w_in: ids["w_in"],
                conv_w: ids["conv_w"],
                conv_b: ids["conv_b"],
                w_x: ids["w_x"],
                w_dt: ids["w_dt"],
                b_dt: ids["b_dt"],
                a_log: ids["a_log"],
                d_skip: ids["d_skip"],
                w_out: ids["w_out"],
            };
            let xin = g.constant(x.clone());
            let out = block_graph(g, &nodes, &cfg, xin)?.out;
            let wc = g.constant(w.clone());
            let prod = g.mul(out, wc)?;
            g.sum(prod)
        },
        FdOptions {
            seed,
            ..Default::default()
        },
    )?;
    out.push(CheckResult::below("grad/block-forward", r.max_rel_err, 1e-4));

    let case = RclCheckCase::new(cfg, 2, 8, 3, 3, 0.1, seed)?;
    let r = case.check(FdOptions {
        seed,
        ..Default::default()
    })?;
    out.push(CheckResult::below("grad/rcl-loss", r.max_rel_err, 1e-4));
    Ok(out)
}

pub fn scan_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        worst = worst.max(ScanInstance::random(&mut rng, 64, 8, 8).max_diff()?);
    }
    let mut out = vec![CheckResult::below("scan/brute-force", worst, 1e-10)];
    for delta in [1e-2, 1e-3, 1e-4] {
        let a = Tensor::from_fn(&[8, 8], |_| -rng.random_range(-1.0f64..2.0).exp());
        let b = Tensor::from_fn(&[8], |_| rng.random_range(-2.0..2.0));
        let [dev_a, dev_b, bound_a, bound_b] = zoh_limit(&a, &b, delta)?;
        // ratios ≤ 1 mean the first-order bound holds
        out.push(CheckResult {
            comparison: "<=",
            passed: dev_a <= bound_a && dev_b <= bound_b,
            ..CheckResult::below(&format!("scan/zoh-limit-{delta}"), (dev_a / bound_a).max(dev_b / bound_b), 1.0)
        });
    }
    Ok(out)
}

pub fn appendix_c_suite(seed: u64) -> Result<(Vec<CheckResult>, Vec<(f64, f64)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut res, mut bound, mut root) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let inst = AppendixCInstance::random(&mut rng);
        let r = appendix_c_check(&inst)?;
        res = res.max(r.residual_a).max(r.residual_b);
        bound = bound.max(r.bound_match);
        let start = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let (a, b) = find_stationary_point(&inst, start)?;
        let (a_star, b_star) = inst.closed_form();
        root = root.max((a - a_star).abs()).max((b - b_star).abs());
    }
    let sweep = sigma_sweep(1.0, 0.5, 1.2, &default_sigma_grid())?;
    Ok((
        vec![
            CheckResult::below("appendix-c/stationarity", res, 1e-9),
            CheckResult::below("appendix-c/bound-match", bound, 1e-9),
            CheckResult::below("appendix-c/root-search", root, 1e-6),
        ],
        sweep,
    ))
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<OracleReport> {
    let mut checks = Vec::new();
    let mut sweep = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        checks.extend(grad_suite(seed)?);
    }
    if matches!(suite, Suite::Scan | Suite::All) {
        checks.extend(scan_suite(seed)?);
    }
    if matches!(suite, Suite::AppendixC | Suite::All) {
        let (c, s) = appendix_c_suite(seed)?;
        checks.extend(c);
        sweep = s;
    }
    let monotone = (!sweep.is_empty()).then(|| sweep.windows(2).all(|w| w[1].1 >= w[0].1));
    Ok(OracleReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
        sigma_sweep: sweep,
        sweep_monotone_increasing: monotone,
    })
}
