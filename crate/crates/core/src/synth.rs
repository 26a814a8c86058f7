//! Synthetic two-task cohorts with fixed per-task positive counts.
//!
//! Each row carries three latent factors: a shared one (`z0`) and one
//! private factor per task (`z1`, `z2`). Informative columns are noisy
//! measurements of a latent. The remaining columns are label-independent:
//! each one tracks one of a few nuisance factors plus a small independent
//! perturbation, so they are redundant with each other rather than white
//! noise. Labels come from two scores:
//!
//! * `r = s·z0 + ε` ranks rows; the lowest `n_negative` rows get no label.
//! * `d = s·(z1 − z2)/√2 + s/2·[z0 > 1] + ε` ranks the remaining rows: the
//!   top ones carry task 1 only, the bottom ones task 2 only and the middle
//!   band carries both.
//!
//! With `s = 0` labels are independent of every column.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, Cell, Cohort, Column, ColumnKind, Encoder, FeatureSchema, RawTable, Role, TableSchema,
};
use crate::error::{Error, Result};

pub const TASK_NAMES: [&str; 2] = ["rejection", "infection"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_task1_pos: usize,
    pub n_task2_pos: usize,
    pub n_negative: usize,
    pub n_features: usize,
    pub n_informative_shared: usize,
    pub n_informative_per_task: usize,
    pub signal_strength: f64,
    /// Typical noise standard deviation on informative columns; each column
    /// draws its own level uniformly in [0.67, 1.33] times this.
    pub measurement_noise: f64,
    /// Latent factors shared by the label-independent columns (0 makes them
    /// independent unit-variance noise).
    pub n_nuisance_factors: usize,
    /// Standard deviation of the per-cell perturbation on those columns.
    pub nuisance_noise: f64,
    /// Fraction of positive rows that carry both labels.
    pub label_overlap_rate: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_task1_pos: 4160,
            n_task2_pos: 3627,
            n_negative: 2000,
            n_features: 102,
            n_informative_shared: 8,
            n_informative_per_task: 6,
            signal_strength: 2.0,
            measurement_noise: 0.6,
            n_nuisance_factors: 6,
            nuisance_noise: 0.3,
            label_overlap_rate: 0.1,
            missing_rate: 0.03,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Rows carrying both labels.
    pub fn n_both(&self) -> usize {
        let pos = (self.n_task1_pos + self.n_task2_pos) as f64;
        (self.label_overlap_rate * pos / (1.0 + self.label_overlap_rate)).round() as usize
    }

    pub fn n_rows(&self) -> usize {
        self.n_task1_pos + self.n_task2_pos + self.n_negative - self.n_both()
    }

    pub fn validate(&self) -> Result<()> {
        let informative = self.n_informative_shared + 2 * self.n_informative_per_task;
        if informative > self.n_features {
            return Err(Error::Config(format!(
                "synth: {informative} informative columns exceed n_features = {}",
                self.n_features
            )));
        }
        if !(0.0..=1.0).contains(&self.label_overlap_rate) {
            return Err(Error::Config(
                "synth: label_overlap_rate must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(
                "synth: missing_rate must lie in [0, 1)".into(),
            ));
        }
        if !(self.measurement_noise >= 0.0 && self.measurement_noise.is_finite()) {
            return Err(Error::Config(
                "synth: measurement_noise must be finite and >= 0".into(),
            ));
        }
        if !(self.nuisance_noise >= 0.0 && self.nuisance_noise.is_finite()) {
            return Err(Error::Config(
                "synth: nuisance_noise must be finite and >= 0".into(),
            ));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::Config(
                "synth: signal_strength must be finite and >= 0".into(),
            ));
        }
        let both = self.n_both();
        if both > self.n_task1_pos.min(self.n_task2_pos) {
            return Err(Error::Config(format!(
                "synth: overlap needs {both} double-positive rows but a task has fewer positives"
            )));
        }
        if self.n_rows() < 10 {
            return Err(Error::Config("synth: fewer than 10 rows".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Source {
    Shared,
    Task(usize),
    Nuisance(usize),
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub schema: TableSchema,
    pub table: RawTable,
}

impl SynthData {
    /// Encoded cohort with missing cells imputed to zero.
    pub fn cohort(&self) -> Result<(Cohort, Encoder)> {
        let (cohort, encoder) = dataset::encode(&self.table, &self.schema)?;
        Ok((dataset::impute_zero(cohort), encoder))
    }
}

const LEVELS: [&str; 4] = ["A", "B", "C", "D"];

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Positions of `scores` sorted ascending (ties by index).
fn rank(scores: &[f64], subset: &[usize]) -> Vec<usize> {
    let mut idx = subset.to_vec();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let n = config.n_rows();
    let l = config.n_features;
    let s = config.signal_strength;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // column layout
    let mut perm: Vec<usize> = (0..l).collect();
    perm.shuffle(&mut rng);
    let mut sources = vec![Source::Noise; l];
    let mut cursor = perm.iter();
    for _ in 0..config.n_informative_shared {
        sources[*cursor.next().expect("validated")] = Source::Shared;
    }
    for t in 0..2 {
        for _ in 0..config.n_informative_per_task {
            sources[*cursor.next().expect("validated")] = Source::Task(t);
        }
    }
    if config.n_nuisance_factors > 0 {
        for (k, j) in cursor.enumerate() {
            sources[*j] = Source::Nuisance(k % config.n_nuisance_factors);
        }
    }
    let columns: Vec<Column> = (0..l)
        .map(|i| {
            let (role, prefix) = if i % 2 == 0 {
                (Role::Recipient, "rec")
            } else {
                (Role::Donor, "don")
            };
            let kind = if i % 6 == 5 {
                ColumnKind::Categorical
            } else {
                ColumnKind::Numerical
            };
            Column::new(format!("{prefix}_{i:03}"), kind, role)
        })
        .collect();
    let noise_sd: Vec<f64> = (0..l)
        .map(|_| config.measurement_noise * rng.random_range(2.0 / 3.0..4.0 / 3.0))
        .collect();
    let skewed: Vec<bool> = (0..l).map(|i| i % 6 == 2).collect();

    // latents and label scores
    let z: Array2<f64> = Array2::from_shape_simple_fn((n, 3), || normal(&mut rng));
    let nuisance: Array2<f64> =
        Array2::from_shape_simple_fn((n, config.n_nuisance_factors), || normal(&mut rng));
    let r: Vec<f64> = (0..n).map(|i| s * z[[i, 0]] + normal(&mut rng)).collect();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let step = if z[[i, 0]] > 1.0 { 0.5 } else { 0.0 };
            s * ((z[[i, 1]] - z[[i, 2]]) / std::f64::consts::SQRT_2 + step) + normal(&mut rng)
        })
        .collect();

    let all: Vec<usize> = (0..n).collect();
    let by_r = rank(&r, &all);
    let positives = &by_r[config.n_negative..];
    let by_d = rank(&d, positives);
    let n_both = config.n_both();
    let n2_only = config.n_task2_pos - n_both;
    let mut labels = vec![vec![0u8; 2]; n];
    for (pos, &i) in by_d.iter().enumerate() {
        if pos < n2_only {
            labels[i][1] = 1;
        } else if pos < n2_only + n_both {
            labels[i] = vec![1, 1];
        } else {
            labels[i][0] = 1;
        }
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(l);
        for j in 0..l {
            let raw = match sources[j] {
                Source::Shared => z[[i, 0]] + noise_sd[j] * normal(&mut rng),
                Source::Task(t) => z[[i, 1 + t]] + noise_sd[j] * normal(&mut rng),
                Source::Nuisance(k) => nuisance[[i, k]] + config.nuisance_noise * normal(&mut rng),
                Source::Noise => normal(&mut rng),
            };
            let missing = rng.random::<f64>() < config.missing_rate;
            let cell = match columns[j].kind {
                _ if missing => Cell::Missing,
                ColumnKind::Categorical => {
                    let level = if raw < -0.8 {
                        0
                    } else if raw < 0.0 {
                        1
                    } else if raw < 0.8 {
                        2
                    } else {
                        3
                    };
                    Cell::Text(LEVELS[level].to_string())
                }
                ColumnKind::Numerical if skewed[j] => Cell::Number(round4((0.5 * raw).exp())),
                ColumnKind::Numerical => Cell::Number(round4(raw)),
            };
            row.push(cell);
        }
        rows.push(row);
    }

    let schema = TableSchema::new(
        "id".to_string(),
        TASK_NAMES.iter().map(|t| t.to_string()).collect(),
        ',',
        FeatureSchema::new(columns)?,
    )?;
    let table = RawTable {
        ids: (0..n).map(|i| format!("P{i:05}")).collect(),
        rows,
        labels: Some(labels),
    };
    Ok(SynthData { schema, table })
}

/// `generate` followed by encoding and zero imputation.
pub fn generate_cohort(config: &SynthConfig) -> Result<Cohort> {
    Ok(generate(config)?.cohort()?.0)
}
