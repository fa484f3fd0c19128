//! Replicated Bayesian-optimization experiment runner, CSV reporting,
//! and a 2-D posterior-surface export for plotting.
//!
//! Protocol per replicate: draw a random shifted objective, evaluate a
//! uniform initial design, fit hyperparameters once, then loop: at each
//! refit boundary resample a random additive partition and refit; every
//! round draw a fresh uniform candidate grid, acquire a batch by the
//! configured method, evaluate, and record the running best observed
//! value (BOV).
//!
//! Replicates use independent streams of one seeded counter-based RNG,
//! so they can run serially or concurrently with identical output.

use std::io::{BufRead, Write};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{alcb_select, candidate_grid, ts_select, Method, SamplerKind};
use crate::model::{AdditiveGpModel, Dataset};
use crate::numerics::{factor_psd, sample_gaussian, JitterPolicy};
use crate::structure::AdditiveStructure;
use crate::testfns::{known_optimum, make_function, Kind};
use crate::{Error, Result};

/// LCB standard-deviation multiplier.
pub const DEFAULT_BETA: f64 = 2.0;
/// Adam steps per hyperparameter fit.
pub const FIT_STEPS: usize = 1000;
/// Adam step size.
pub const FIT_STEP_SIZE: f64 = 1e-4;

fn default_batch() -> usize {
    1
}
fn default_init() -> usize {
    20
}
fn default_acquisitions() -> usize {
    100
}
fn default_candidates() -> usize {
    500
}
fn default_max_group_dim() -> usize {
    5
}
fn default_replicates() -> usize {
    10
}
fn default_true() -> bool {
    true
}

/// Full description of one benchmark run; loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub function: Kind,
    pub dim: usize,
    pub method: Method,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_init")]
    pub init_count: usize,
    #[serde(default = "default_acquisitions")]
    pub total_acquisitions: usize,
    #[serde(default = "default_candidates")]
    pub candidate_count: usize,
    /// Acquisitions between hyperparameter refits. Defaults to 10 for
    /// batch size 1 and to the batch size otherwise.
    #[serde(default)]
    pub refit_every: Option<usize>,
    #[serde(default = "default_max_group_dim")]
    pub max_group_dim: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// When false, round_seconds is recorded as 0 so output bytes are
    /// reproducible across machines and execution modes.
    #[serde(default = "default_true")]
    pub record_timing: bool,
    /// Run replicates concurrently.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("init_count", self.init_count),
            ("total_acquisitions", self.total_acquisitions),
            ("candidate_count", self.candidate_count),
            ("max_group_dim", self.max_group_dim),
            ("replicates", self.replicates),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.total_acquisitions % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "total_acquisitions ({}) must be divisible by batch_size ({})",
                self.total_acquisitions, self.batch_size
            )));
        }
        if self.refit_every == Some(0) {
            return Err(Error::Config("refit_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_refit_every(&self) -> usize {
        self.refit_every.unwrap_or(if self.batch_size == 1 {
            10
        } else {
            self.batch_size
        })
    }
}

/// One objective evaluation: a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub replicate: usize,
    pub eval_index: usize,
    pub method: Method,
    pub seed: u64,
    pub point: Vec<f64>,
    pub value: f64,
    pub bov: f64,
    pub round_seconds: f64,
}

fn refit(
    data: &Dataset<f64>,
    max_group_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AdditiveGpModel<f64>> {
    let partition = AdditiveStructure::random_partition(data.p(), max_group_dim, rng)?;
    AdditiveGpModel::new(partition).fit(data, FIT_STEPS, FIT_STEP_SIZE)
}

/// Runs one replicate on its own RNG stream; `run_experiment` is a
/// loop over this, so single replicates reproduce batch-run rows.
pub fn run_single_replicate(config: &ExperimentConfig, replicate: usize) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.base_seed);
    rng.set_stream(replicate as u64);
    let seed = config.base_seed ^ replicate as u64;
    let method = config.method;
    let p = config.dim;
    let f = make_function(config.function, p, &mut rng)?;

    let mut records = Vec::with_capacity(config.init_count + config.total_acquisitions);
    let mut data = Dataset::empty(p);
    let mut bov = f64::INFINITY;
    let init = candidate_grid::<f64, _>(p, config.init_count, &mut rng)?;
    for i in 0..config.init_count {
        let point: Vec<f64> = init.row(i).iter().copied().collect();
        let value = f.eval(&point);
        data.push(&point, value)?;
        bov = bov.min(value);
        records.push(RunRecord {
            replicate,
            eval_index: i,
            method,
            seed,
            point,
            value,
            bov,
            round_seconds: 0.0,
        });
    }

    let mut model = refit(&data, config.max_group_dim, &mut rng)?;
    let refit_every = config.effective_refit_every();
    let rounds = config.total_acquisitions / config.batch_size;
    let mut acquired = 0usize;
    for _ in 0..rounds {
        let start = Instant::now();
        if acquired > 0 && acquired % refit_every == 0 {
            model = refit(&data, config.max_group_dim, &mut rng)?;
        }
        let grid = candidate_grid::<f64, _>(p, config.candidate_count, &mut rng)?;
        let batch = match method {
            Method::Ts => ts_select(
                &model,
                &data,
                SamplerKind::Joint,
                &grid,
                config.batch_size,
                &mut rng,
            )?,
            Method::Ats => ts_select(
                &model,
                &data,
                SamplerKind::Marginal,
                &grid,
                config.batch_size,
                &mut rng,
            )?,
            Method::Alcb => alcb_select(&model, &data, &grid, DEFAULT_BETA, config.batch_size)?,
        };
        let round_seconds = if config.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        for b in 0..config.batch_size {
            let point: Vec<f64> = batch.row(b).iter().copied().collect();
            let value = f.eval(&point);
            data.push(&point, value)?;
            bov = bov.min(value);
            records.push(RunRecord {
                replicate,
                eval_index: config.init_count + acquired,
                method,
                seed,
                point,
                value,
                bov,
                round_seconds,
            });
            acquired += 1;
        }
    }
    Ok(records)
}

/// All replicates, ordered by (replicate, eval_index).
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let per_replicate: Vec<Vec<RunRecord>> = if config.parallel {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| run_single_replicate(config, r))
            .collect::<Result<_>>()?
    } else {
        (0..config.replicates)
            .map(|r| run_single_replicate(config, r))
            .collect::<Result<_>>()?
    };
    Ok(per_replicate.into_iter().flatten().collect())
}

pub fn csv_header(p: usize) -> String {
    let mut h = String::from("replicate,eval_index,method,seed,value,bov,round_seconds");
    for j in 1..=p {
        h.push_str(&format!(",x_{j}"));
    }
    h
}

/// Writes records in the fixed CSV layout. All fields are numeric or
/// bare method names, so no quoting is needed.
pub fn write_csv<W: Write>(records: &[RunRecord], p: usize, w: &mut W) -> Result<()> {
    writeln!(w, "{}", csv_header(p))?;
    for r in records {
        if r.point.len() != p {
            return Err(Error::Shape(format!(
                "record has {} coordinates, expected {}",
                r.point.len(),
                p
            )));
        }
        write!(
            w,
            "{},{},{},{},{},{},{}",
            r.replicate,
            r.eval_index,
            r.method.name(),
            r.seed,
            r.value,
            r.bov,
            r.round_seconds
        )?;
        for x in &r.point {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn csv_string(records: &[RunRecord], p: usize) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, p, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is ascii"))
}

/// Parses CSV produced by [`write_csv`]; returns the records and `P`.
pub fn read_csv<R: BufRead>(reader: R) -> Result<(Vec<RunRecord>, usize)> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty CSV".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 8 || cols[..7] != csv_header(0).split(',').collect::<Vec<_>>()[..] {
        return Err(Error::InvalidArgument("unrecognized CSV header".into()));
    }
    let p = cols.len() - 7;
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 + p {
            return Err(Error::InvalidArgument(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                f.len(),
                7 + p
            )));
        }
        let parse_err =
            |e: &dyn std::fmt::Display| Error::InvalidArgument(format!("row {}: {e}", lineno + 2));
        records.push(RunRecord {
            replicate: f[0].parse().map_err(|e| parse_err(&e))?,
            eval_index: f[1].parse().map_err(|e| parse_err(&e))?,
            method: f[2].parse()?,
            seed: f[3].parse().map_err(|e| parse_err(&e))?,
            value: f[4].parse().map_err(|e| parse_err(&e))?,
            bov: f[5].parse().map_err(|e| parse_err(&e))?,
            round_seconds: f[6].parse().map_err(|e| parse_err(&e))?,
            point: f[7..]
                .iter()
                .map(|s| s.parse().map_err(|e| parse_err(&e)))
                .collect::<Result<_>>()?,
        });
    }
    Ok((records, p))
}

/// Linear-interpolation quantile of pre-sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// BOV quartile trajectory for one method.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub eval_index: Vec<usize>,
    pub q1: Vec<f64>,
    pub median: Vec<f64>,
    pub q3: Vec<f64>,
    /// Quartiles of final log10 optimality gaps when the optimum is
    /// known; gaps are floored at 1e-12 before the logarithm.
    pub final_log10_gap: Option<[f64; 3]>,
}

/// Per-method median and quartile BOV across replicates, at every
/// evaluation index; final-gap quantiles when `optimum` is known.
pub fn summarize(records: &[RunRecord], optimum: Option<f64>) -> Result<Vec<MethodSummary>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to summarize".into()));
    }
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let mut out = Vec::new();
    for method in methods {
        // bov[replicate][eval_index], indexed sparsely via maps
        let mut by_eval: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        let mut final_by_rep: std::collections::BTreeMap<usize, (usize, f64)> = Default::default();
        for r in records.iter().filter(|r| r.method == method) {
            by_eval.entry(r.eval_index).or_default().push(r.bov);
            let e = final_by_rep.entry(r.replicate).or_insert((r.eval_index, r.bov));
            if r.eval_index >= e.0 {
                *e = (r.eval_index, r.bov);
            }
        }
        let mut eval_index = Vec::new();
        let (mut q1, mut median, mut q3) = (Vec::new(), Vec::new(), Vec::new());
        for (idx, mut vals) in by_eval {
            vals.sort_by(|a, b| a.partial_cmp(b).expect("finite BOV"));
            eval_index.push(idx);
            q1.push(quantile(&vals, 0.25));
            median.push(quantile(&vals, 0.5));
            q3.push(quantile(&vals, 0.75));
        }
        let final_log10_gap = optimum.map(|opt| {
            let mut gaps: Vec<f64> = final_by_rep
                .values()
                .map(|&(_, bov)| (bov - opt).max(1e-12).log10())
                .collect();
            gaps.sort_by(|a, b| a.partial_cmp(b).expect("finite gap"));
            [
                quantile(&gaps, 0.25),
                quantile(&gaps, 0.5),
                quantile(&gaps, 0.75),
            ]
        });
        out.push(MethodSummary {
            method,
            eval_index,
            q1,
            median,
            q3,
            final_log10_gap,
        });
    }
    Ok(out)
}

/// Known optimum for a config's objective.
pub fn config_optimum(config: &ExperimentConfig) -> f64 {
    known_optimum(config.function, config.dim)
}

/// One grid point of the 2-D posterior surface comparison.
#[derive(Debug, Clone)]
pub struct SurfaceRow {
    pub x1: f64,
    pub x2: f64,
    pub mean: f64,
    pub exact_variance: f64,
    pub additive_variance: f64,
    pub exact_draw: f64,
    pub additive_draw: f64,
}

/// Evaluates the exact and cross-group-free posteriors of a 2-D model
/// with two singleton groups on a `resolution x resolution` grid, with
/// one function draw from each covariance.
pub fn export_surface(
    model: &AdditiveGpModel<f64>,
    data: &Dataset<f64>,
    resolution: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SurfaceRow>> {
    let s = model.structure();
    if s.p() != 2 || s.num_groups() != 2 {
        return Err(Error::InvalidArgument(
            "surface export requires dimension 2 with two singleton groups".into(),
        ));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument("resolution must be at least 2".into()));
    }
    let r = resolution;
    let step = 1.0 / (r - 1) as f64;
    let mut grid = DMatrix::zeros(r * r, 2);
    for i in 0..r {
        for j in 0..r {
            grid[(i * r + j, 0)] = i as f64 * step;
            grid[(i * r + j, 1)] = j as f64 * step;
        }
    }
    let exact = model.predict_exact(data, &grid)?;
    let additive = model.predict_additive(data, &grid)?;
    let fe = factor_psd(&exact.covariance, JitterPolicy::default())?;
    let exact_draw = sample_gaussian(&exact.mean, &fe, 1, rng)?;
    let fa = factor_psd(&additive.covariance, JitterPolicy::default())?;
    let additive_draw = sample_gaussian(&additive.mean, &fa, 1, rng)?;
    let ev = exact.variances();
    let av = additive.variances();
    Ok((0..r * r)
        .map(|k| SurfaceRow {
            x1: grid[(k, 0)],
            x2: grid[(k, 1)],
            mean: exact.mean[k],
            exact_variance: ev[k],
            additive_variance: av[k],
            exact_draw: exact_draw[(k, 0)],
            additive_draw: additive_draw[(k, 0)],
        })
        .collect())
}

pub fn write_surface_csv<W: Write>(rows: &[SurfaceRow], w: &mut W) -> Result<()> {
    writeln!(
        w,
        "x1,x2,mean,exact_variance,additive_variance,exact_draw,additive_draw"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.x1, r.x2, r.mean, r.exact_variance, r.additive_variance, r.exact_draw, r.additive_draw
        )?;
    }
    Ok(())
}
