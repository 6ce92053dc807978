//! Memory scores, memory/ignore classification, Focus Ratio, Memory
//! Entropy, correlation statistics and trace emission.
//!
//! For each step `t ≥ 1` of a block trace the memory score is
//! `s_t = r_in / (r_in + r_prev)` where `r_prev = |cos(h_t, h_{t-1})|` and
//! `r_in = |cos(h_t, B̄_t x_t)|`. Both vectors flatten all (channel, state)
//! entries. A zero-norm operand contributes a correlation of 0, and
//! `s_t = 0.5` when both correlations vanish.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::mamba::BlockTrace;
use crate::tensor::Tensor;

pub const SM_THRESHOLD: f64 = 0.7;
pub const SI_THRESHOLD: f64 = 0.3;
pub const DEFAULT_BINS: usize = 20;

/// Memory scores of one sequence, one per step `t = 1..T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryScoreSeries {
    pub scores: Vec<f64>,
}

fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).abs().min(1.0)
}

/// Memory score from the two absolute correlations.
pub fn memory_score(r_in: f64, r_prev: f64) -> f64 {
    if r_in + r_prev == 0.0 {
        0.5
    } else {
        r_in / (r_in + r_prev)
    }
}

/// Per-sequence memory scores of a trace.
pub fn memory_scores(trace: &BlockTrace) -> Result<Vec<MemoryScoreSeries>> {
    if trace.steps() < 2 {
        return Err(Error::InvalidArgument("memory scores need at least two steps".into()));
    }
    Ok((0..trace.batch())
        .map(|b| MemoryScoreSeries {
            scores: (1..trace.steps())
                .map(|t| {
                    let h = trace.hidden_at(b, t);
                    let r_prev = abs_cos(h, trace.hidden_at(b, t - 1));
                    let r_in = abs_cos(h, trace.input_at(b, t));
                    memory_score(r_in, r_prev)
                })
                .collect(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepClass {
    /// Significant memory, `s > 0.7`.
    SM,
    /// Significant ignoring, `s < 0.3`.
    SI,
    /// Normal, including both boundaries.
    NR,
}

impl StepClass {
    pub fn of(score: f64) -> Self {
        if score > SM_THRESHOLD {
            StepClass::SM
        } else if score < SI_THRESHOLD {
            StepClass::SI
        } else {
            StepClass::NR
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StepClass::SM => "SM",
            StepClass::SI => "SI",
            StepClass::NR => "NR",
        }
    }
}

/// `(n_sm, n_si, n_nr)`.
pub fn classify(scores: &[f64]) -> (u64, u64, u64) {
    scores.iter().fold((0, 0, 0), |(sm, si, nr), &s| match StepClass::of(s) {
        StepClass::SM => (sm + 1, si, nr),
        StepClass::SI => (sm, si + 1, nr),
        StepClass::NR => (sm, si, nr + 1),
    })
}

pub fn focus_ratio(n_sm: u64, n_si: u64, n_nr: u64) -> Result<f64> {
    let total = n_sm + n_si + n_nr;
    if total == 0 {
        return Err(Error::InvalidArgument("focus ratio of zero steps".into()));
    }
    Ok((n_sm + n_si) as f64 / total as f64)
}

/// Shannon entropy (nats) of the `bins`-bin histogram of scores on `[0, 1]`.
pub fn memory_entropy(scores: &[f64], bins: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("memory entropy of no scores".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    let mut counts = vec![0u64; bins];
    for &s in scores {
        let k = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = scores.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub n_sm: u64,
    pub n_si: u64,
    pub n_nr: u64,
    pub fr: f64,
    pub me: f64,
    pub bins: usize,
}

impl SelectivityReport {
    pub fn from_scores(scores: &[f64], bins: usize) -> Result<Self> {
        let (n_sm, n_si, n_nr) = classify(scores);
        Ok(Self {
            n_sm,
            n_si,
            n_nr,
            fr: focus_ratio(n_sm, n_si, n_nr)?,
            me: memory_entropy(scores, bins)?,
            bins,
        })
    }

    /// Pools the scores of every sequence of every trace.
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a BlockTrace>, bins: usize) -> Result<Self> {
        let mut all = Vec::new();
        for tr in traces {
            for series in memory_scores(tr)? {
                all.extend(series.scores);
            }
        }
        Self::from_scores(&all, bins)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pearson correlation and its two-sided p-value (Student t, `n-2` dof).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidArgument("pearson needs at least 3 points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("pearson of a constant series".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (dof / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).expect("positive dof");
        2.0 * dist.sf(t.abs())
    };
    Ok((r, p))
}

/// Pairwise cosine similarity of the rows of `h [T, D]`.
pub fn similarity_heatmap(h: &Tensor) -> Result<Tensor> {
    if h.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: h.shape().to_vec(),
            reason: "heatmap input must be [T, D]".into(),
        });
    }
    let t = h.shape()[0];
    let norms: Vec<f64> = (0..t).map(|i| h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::ZeroNorm("similarity_heatmap"));
    }
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let dot: f64 = h.row(i).iter().zip(h.row(j)).map(|(a, b)| a * b).sum();
            let v = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[i * t + j] = v;
            m[j * t + i] = v;
        }
    }
    Tensor::new(vec![t, t], m)
}

/// Paths written by [`emit_traces`].
#[derive(Clone, Debug, Serialize)]
pub struct TraceFiles {
    pub delta: PathBuf,
    pub memory: PathBuf,
    pub heatmap: PathBuf,
}

fn write(path: &Path, s: String) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes `delta.csv`, `memory.csv` and `heatmap.csv` for sequence `seq` of
/// `trace` into `dir`. The heatmap is computed over the rows of
/// `embeddings [T, D]`.
pub fn emit_traces(trace: &BlockTrace, seq: usize, embeddings: &Tensor, dir: &Path) -> Result<TraceFiles> {
    if seq >= trace.batch() {
        return Err(Error::InvalidArgument(format!(
            "sequence {seq} out of range for a trace of {} sequences",
            trace.batch()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, _) = trace.plane();
    let steps = trace.steps();

    let mut delta = String::from("t,delta_mean\n");
    for t in 0..steps {
        let row = &trace.delta.data()[(seq * steps + t) * d..(seq * steps + t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        delta.push_str(&format!("{t},{mean}\n"));
    }

    let scores = &memory_scores(trace)?[seq].scores;
    let mut memory = String::from("t,score,class\n");
    for (k, &s) in scores.iter().enumerate() {
        memory.push_str(&format!("{},{s},{}\n", k + 1, StepClass::of(s).label()));
    }

    let m = similarity_heatmap(embeddings)?;
    let mut heat = String::new();
    for row in m.data().chunks(m.shape()[1]) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        heat.push_str(&cells.join(","));
        heat.push('\n');
    }

    let files = TraceFiles {
        delta: dir.join("delta.csv"),
        memory: dir.join("memory.csv"),
        heatmap: dir.join("heatmap.csv"),
    };
    write(&files.delta, delta)?;
    write(&files.memory, memory)?;
    write(&files.heatmap, heat)?;
    Ok(files)
}
