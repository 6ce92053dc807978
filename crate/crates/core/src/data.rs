//! Dataset ingestion, chronological splits, z-scoring, sliding windows and
//! synthetic corpora.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel z-score statistics fitted on the training portion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Population mean and standard deviation of each column of `rows [N, F]`.
    pub fn fit(rows: &Tensor) -> Result<Self> {
        let (n, f) = (rows.shape()[0], rows.shape()[1]);
        let mut mean = vec![0.0; f];
        let mut std = vec![0.0; f];
        for c in 0..f {
            let col = (0..n).map(|r| rows.data()[r * f + c]);
            let mu = col.clone().sum::<f64>() / n as f64;
            let var = col.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            mean[c] = mu;
            std[c] = var.sqrt();
            if !(std[c] > 0.0) {
                return Err(Error::Data(format!("channel {c} is constant in the training split")));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, rows: &Tensor) -> Tensor {
        let f = self.mean.len();
        Tensor::from_fn(rows.shape(), |k| {
            let c = k % f;
            (rows.data()[k] - self.mean[c]) / self.std[c]
        })
    }

    pub fn inverse(&self, rows: &Tensor) -> Tensor {
        let f = self.mean.len();
        Tensor::from_fn(rows.shape(), |k| {
            let c = k % f;
            rows.data()[k] * self.std[c] + self.mean[c]
        })
    }
}

/// Chronological 60/20/20 split, each part normalized with train statistics.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub columns: Vec<String>,
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
    pub scaler: Scaler,
}

pub const MIN_ROWS: usize = 10;

/// Row counts `(train, val, test)`: floor 60% for train, the rest halved.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 6 / 10;
    let rest = n - train;
    let val = rest / 2;
    (train, val, rest - val)
}

impl DatasetSplit {
    /// Splits `rows [N, F]` in time order and z-scores every part.
    pub fn from_rows(rows: &Tensor, columns: Vec<String>) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::Data(format!("expected [rows, channels], got {:?}", rows.shape())));
        }
        let (n, f) = (rows.shape()[0], rows.shape()[1]);
        if n < MIN_ROWS {
            return Err(Error::Data(format!("need at least {MIN_ROWS} rows, got {n}")));
        }
        let (tr, va, _) = split_sizes(n);
        let part = |lo: usize, hi: usize| Tensor::new(vec![hi - lo, f], rows.data()[lo * f..hi * f].to_vec());
        let train = part(0, tr)?;
        let val = part(tr, tr + va)?;
        let test = part(tr + va, n)?;
        let scaler = Scaler::fit(&train)?;
        Ok(Self {
            columns,
            train: scaler.transform(&train),
            val: scaler.transform(&val),
            test: scaler.transform(&test),
            scaler,
        })
    }

    pub fn n_features(&self) -> usize {
        self.train.shape()[1]
    }
}

/// Reads a CSV with a header row; the first column (a timestamp) is dropped
/// and the rest must be numeric.
pub fn load_csv(path: &Path) -> Result<DatasetSplit> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Data("need a timestamp column and at least one channel".into()));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let f = columns.len();
    let mut data = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if record.len() != f + 1 {
            return Err(Error::Data(format!(
                "row {} has {} fields, expected {}",
                r + 1,
                record.len(),
                f + 1
            )));
        }
        for (c, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "non-numeric cell {cell:?} at row {}, column {} ({})",
                    r + 1,
                    c + 2,
                    columns[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite cell at row {}, column {}", r + 1, c + 2)));
            }
            data.push(v);
        }
    }
    let n = data.len() / f;
    if n < MIN_ROWS {
        return Err(Error::Data(format!("need at least {MIN_ROWS} rows, got {n}")));
    }
    DatasetSplit::from_rows(&Tensor::new(vec![n, f], data)?, columns)
}

/// Writes `rows [N, F]` as a CSV with an integer `t` column first.
pub fn write_csv(path: &Path, rows: &Tensor, columns: &[String]) -> Result<()> {
    let f = rows.shape()[1];
    let mut out = String::from("t");
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (r, row) in rows.data().chunks(f).enumerate() {
        out.push_str(&r.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Stride-1 supervised windows over one split part.
#[derive(Clone, Debug)]
pub struct WindowSet {
    /// `[M, t_in, F]`
    pub inputs: Tensor,
    /// `[M, t_out, F]`
    pub targets: Tensor,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks the selected windows into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        (gather(&self.inputs, idx), gather(&self.targets, idx))
    }
}

/// Stacks `src[idx[k]]` along a new leading axis.
pub fn gather(src: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = src.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(&src.data()[i * per..(i + 1) * per]);
    }
    let mut shape = src.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered shape")
}

pub fn make_windows(part: &Tensor, t_in: usize, t_out: usize) -> Result<WindowSet> {
    let (len, f) = (part.shape()[0], part.shape()[1]);
    if t_in == 0 || t_out == 0 || len < t_in + t_out {
        return Err(Error::Data(format!(
            "split of {len} rows is too short for windows of {t_in}+{t_out}"
        )));
    }
    let m = len - t_in - t_out + 1;
    let mut inputs = Vec::with_capacity(m * t_in * f);
    let mut targets = Vec::with_capacity(m * t_out * f);
    for w in 0..m {
        inputs.extend_from_slice(&part.data()[w * f..(w + t_in) * f]);
        targets.extend_from_slice(&part.data()[(w + t_in) * f..(w + t_in + t_out) * f]);
    }
    Ok(WindowSet {
        inputs: Tensor::new(vec![m, t_in, f], inputs)?,
        targets: Tensor::new(vec![m, t_out, f], targets)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Three incommensurate sinusoids per channel plus Gaussian noise.
    MultiSine,
    /// AR(1) with coefficient 0.9 and rare ±5σ innovation spikes.
    Ar1WithSpikes,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-sine" => Ok(SynthKind::MultiSine),
            "ar1-with-spikes" => Ok(SynthKind::Ar1WithSpikes),
            other => Err(Error::Data(format!(
                "unknown synthetic corpus `{other}` (expected multi-sine or ar1-with-spikes)"
            ))),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::MultiSine => "multi-sine",
            SynthKind::Ar1WithSpikes => "ar1-with-spikes",
        })
    }
}

pub const AR1_COEF: f64 = 0.9;
pub const SPIKE_PROB: f64 = 0.02;
pub const SPIKE_SIGMAS: f64 = 5.0;

/// Base periods of the multi-sine components; pairwise ratios are irrational.
pub const SINE_PERIODS: [f64; 3] = [24.0, 24.0 * std::f64::consts::SQRT_2, 12.0 * std::f64::consts::PI];

/// Amplitude, period and phase of each multi-sine component of one channel.
#[derive(Clone, Copy, Debug)]
pub struct SineComponent {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl SineComponent {
    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * std::f64::consts::PI * t / self.period + self.phase).sin()
    }
}

/// Seeded component draw for channel `c` of a multi-sine series.
pub fn sine_components(rng: &mut ChaCha8Rng, c: usize) -> [SineComponent; 3] {
    SINE_PERIODS.map(|p| SineComponent {
        amplitude: rng.random_range(0.5..1.5),
        period: p * (1.0 + 0.07 * c as f64),
        phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
    })
}

/// `n_series` independent series of shape `[steps, features]`.
pub fn synth_corpus(
    kind: SynthKind,
    n_series: usize,
    steps: usize,
    features: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if n_series == 0 || steps == 0 || features == 0 {
        return Err(Error::InvalidArgument("synthetic corpus dimensions must be positive".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_series);
    for _ in 0..n_series {
        let mut data = vec![0.0; steps * features];
        match kind {
            SynthKind::MultiSine => {
                for c in 0..features {
                    let comps = sine_components(&mut rng, c);
                    for t in 0..steps {
                        data[t * features + c] = comps.iter().map(|s| s.at(t as f64)).sum();
                    }
                }
            }
            SynthKind::Ar1WithSpikes => {
                // unit innovations; stationary std 1/sqrt(1-φ²)
                let sigma = 1.0 / (1.0 - AR1_COEF * AR1_COEF).sqrt();
                for c in 0..features {
                    let mut x = 0.0;
                    for t in 0..steps {
                        let mut eps: f64 = rng.sample(StandardNormal);
                        if rng.random_bool(SPIKE_PROB) {
                            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                            eps += sign * SPIKE_SIGMAS * sigma;
                        }
                        x = AR1_COEF * x + eps;
                        data[t * features + c] = x;
                    }
                }
            }
        }
        if noise_std > 0.0 {
            for v in data.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += noise_std * n;
            }
        }
        out.push(Tensor::new(vec![steps, features], data)?);
    }
    Ok(out)
}

/// Column names `ch0, ch1, …`.
pub fn default_columns(f: usize) -> Vec<String> {
    (0..f).map(|c| format!("ch{c}")).collect()
}
