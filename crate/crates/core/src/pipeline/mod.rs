//! End-to-end orchestration: reconstruction methods, fitting, evaluation
//! and the artifacts written by the command-line tool.

pub mod config;
pub mod render;
pub mod store;

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cs_solver::{solve_espirit, SolveReport, SolverError};
use crate::encoding::{ifft2c, ContrastStack, EncodingError, MultiCoilKSpace, SensitivityMaps};
use crate::espirit::{estimate_maps, EspiritError};
use crate::fitting::{fit_map, FitError, Modality, ParameterMap};
use crate::metrics::{magnitude, Metric, MetricError};
use crate::refiner::{refine_basis, NetworkWeights, RefinerError};
use crate::subspace::{decompose, prepare_basis, recombine, truncate, PreparedBasis, SubspaceBasis, SubspaceError};
use crate::tensor_io::TensorIoError;
use crate::{c64, par};

pub use config::PipelineConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("the drums method needs a weights file (set `weights` in the config or pass --weights)")]
    MissingWeights,
    #[error("data error: {0}")]
    Data(String),
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingWeights => 2,
            PipelineError::Data(_) => 3,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(EncodingError, SubspaceError, FitError, MetricError, TensorIoError, std::io::Error, csv::Error, serde_json::Error);

impl From<EspiritError> for PipelineError {
    fn from(e: EspiritError) -> Self {
        match e {
            EspiritError::InvalidConfig(_) | EspiritError::KernelTooLarge { .. } => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<SolverError> for PipelineError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<RefinerError> for PipelineError {
    fn from(e: RefinerError) -> Self {
        match e {
            RefinerError::ChannelMismatch { .. } => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Zero-filled inverse FFT with root-sum-of-squares coil combination.
    Fft,
    /// L1-wavelet SENSE with ESPIRiT maps.
    Espirit,
    /// ESPIRiT reconstruction projected onto its leading subspace.
    Lowrank,
    /// Low-rank with the spatial basis refined by the network.
    Drums,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fft, Method::Espirit, Method::Lowrank, Method::Drums];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fft => "fft",
            Method::Espirit => "espirit",
            Method::Lowrank => "lowrank",
            Method::Drums => "drums",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Wall-clock seconds per pipeline stage, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<(String, f64)>,
}

impl StageTimings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.stages.push((stage.to_string(), t0.elapsed().as_secs_f64()));
        out
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn get(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.0 == stage).map(|s| s.1)
    }

    pub fn extend(&mut self, other: &StageTimings) {
        self.stages.extend(other.stages.iter().cloned());
    }
}

/// Everything one reconstruction produced.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub method: Method,
    pub stack: ContrastStack,
    pub report: Option<SolveReport>,
    pub maps: Option<SensitivityMaps>,
    pub basis: Option<SubspaceBasis>,
    pub prepared: Option<PreparedBasis>,
    pub refined: Option<PreparedBasis>,
    pub timings: StageTimings,
}

/// Zero-filled inverse FFT of every coil, combined by root sum of squares.
pub fn rss_zero_filled(y: &MultiCoilKSpace) -> ContrastStack {
    let (nt, nc, ny, nx) = y.data.dim();
    let planes = par::map_indices(nt, |t| {
        let mask = y.mask.for_contrast(t);
        let mut sos = ndarray::Array2::<f64>::zeros((ny, nx));
        for q in 0..nc {
            let mut k = y.data.slice(ndarray::s![t, q, .., ..]).to_owned();
            k.zip_mut_with(&mask, |v, &m| {
                if !m {
                    *v = c64::new(0.0, 0.0)
                }
            });
            let img = ifft2c(k.view());
            sos.zip_mut_with(&img, |s, v| *s += v.norm_sqr());
        }
        sos
    });
    let mut out = ContrastStack::zeros((nt, ny, nx));
    for (t, p) in planes.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), t)
            .zip_mut_with(&p, |o, s| *o = c64::new(s.sqrt(), 0.0));
    }
    out
}

pub fn reconstruct(
    method: Method,
    y: &MultiCoilKSpace,
    cfg: &PipelineConfig,
    weights: Option<&NetworkWeights>,
) -> Result<Reconstruction, PipelineError> {
    let mut timings = StageTimings::default();
    let mut rec = Reconstruction {
        method,
        stack: ContrastStack::zeros((0, 0, 0)),
        report: None,
        maps: None,
        basis: None,
        prepared: None,
        refined: None,
        timings: StageTimings::default(),
    };
    if method == Method::Fft {
        rec.stack = timings.time("fft", || rss_zero_filled(y));
        rec.timings = timings;
        return Ok(rec);
    }
    if method == Method::Drums && weights.is_none() {
        return Err(PipelineError::MissingWeights);
    }
    let maps = timings.time("calibration", || estimate_maps(y, &cfg.calibration))?;
    let (x, report) = timings.time("solve", || solve_espirit(y, &maps, &y.mask, &cfg.solver))?;
    rec.maps = Some(maps);
    rec.report = Some(report);
    if method == Method::Espirit {
        rec.stack = x;
        rec.timings = timings;
        return Ok(rec);
    }
    let rank = cfg.rank.min(x.len_of(ndarray::Axis(0)));
    let basis = timings.time("svd", || decompose(&x, rank))?;
    let basis = truncate(&basis, rank)?;
    if method == Method::Lowrank {
        rec.stack = recombine(&basis, None)?;
    } else {
        let w = weights.expect("checked above");
        let prepared = prepare_basis(&basis);
        let refined = timings.time("inference", || refine_basis(&prepared, w))?;
        rec.stack = recombine(&basis, Some(&refined))?;
        rec.prepared = Some(prepared);
        rec.refined = Some(refined);
    }
    rec.basis = Some(basis);
    rec.timings = timings;
    Ok(rec)
}

/// One CSV row of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subject: String,
    pub slice: usize,
    /// `contrast{t}` or a map name such as `t1map`.
    pub target: String,
    pub metric: Metric,
    #[serde(rename = "R")]
    pub accel: usize,
    pub method: String,
    pub reference: String,
    pub value: f64,
}

/// Identifies the rows of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RowContext {
    pub subject: String,
    pub slice: usize,
    pub accel: usize,
    pub method: String,
    pub reference: String,
}

impl RowContext {
    fn row(&self, target: String, metric: Metric, value: f64) -> MetricRow {
        MetricRow {
            subject: self.subject.clone(),
            slice: self.slice,
            target,
            metric,
            accel: self.accel,
            method: self.method.clone(),
            reference: self.reference.clone(),
            value,
        }
    }
}

/// All four metrics for every contrast magnitude (full field of view) and
/// for the fitted map (inside `roi` when given).
pub fn evaluate(
    ctx: &RowContext,
    test: &ContrastStack,
    reference: &ContrastStack,
    maps: Option<(&ParameterMap, &ParameterMap)>,
    roi: Option<&ndarray::Array2<bool>>,
) -> Result<Vec<MetricRow>, PipelineError> {
    if test.dim() != reference.dim() {
        return Err(PipelineError::Data(format!(
            "reconstruction {:?} vs reference {:?}",
            test.dim(),
            reference.dim()
        )));
    }
    let mut rows = Vec::new();
    for (t, (a, b)) in test.outer_iter().zip(reference.outer_iter()).enumerate() {
        let (ma, mb) = (magnitude(a), magnitude(b));
        for m in Metric::ALL {
            rows.push(ctx.row(format!("contrast{t}"), m, m.compute(ma.view(), mb.view(), None)?));
        }
    }
    if let Some((fa, fb)) = maps {
        let name = fa.modality.map_name().to_string();
        for m in Metric::ALL {
            let v = m.compute(fa.value.view(), fb.value.view(), roi.map(|r| r.view()))?;
            rows.push(ctx.row(name.clone(), m, v));
        }
    }
    Ok(rows)
}

pub fn fit(stack: &ContrastStack, timing: &[f64], modality: Modality) -> Result<ParameterMap, PipelineError> {
    Ok(fit_map(stack, timing, modality)?)
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], w: W) -> Result<(), PipelineError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricRow>, PipelineError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Mean value of `metric` on `target` per `(method, R)`.
pub fn summarize(rows: &[MetricRow], target_prefix: &str, metric: Metric) -> Vec<(String, usize, f64)> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.accel);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .filter_map(|(m, a)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m && r.accel == a && r.metric == metric && r.target.starts_with(target_prefix))
                .map(|r| r.value)
                .collect();
            (!v.is_empty()).then(|| (m, a, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}
