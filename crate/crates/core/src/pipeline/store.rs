//! On-disk layout of phantom datasets and pipeline outputs.
//!
//! ```text
//! DIR/dataset.json
//! DIR/sub000/t1/truth.drum        truth, timing
//! DIR/sub000/t1/params.drum       value, amplitude, residual, flags, bounds, timing, labels, roi
//! DIR/sub000/t1/smaps.drum        maps, support
//! DIR/sub000/t1/kspace_full.drum  kspace, mask, accel, acs
//! DIR/sub000/t1/kspace_r4.drum
//! ```

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Ix2, Ix3, Ix4};
use serde::{Deserialize, Serialize};

use crate::encoding::{ContrastStack, MultiCoilKSpace, SamplingMask, SensitivityMaps};
use crate::fitting::{Modality, ParameterMap};
use crate::phantom::{generate_dataset, AcquisitionOptions, PhantomDataset, PhantomSpec};
use crate::tensor_io::{Tensor, TensorArchive};

use super::{PipelineError, StageTimings};

pub const DATASET_INDEX: &str = "dataset.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub subjects: usize,
    pub modalities: Vec<Modality>,
    pub accelerations: Vec<usize>,
    pub acs_lines: usize,
    pub time_varying: bool,
    pub spec: PhantomSpec,
}

impl DatasetInfo {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(DATASET_INDEX);
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn subject_name(index: usize) -> String {
    format!("sub{index:03}")
}

pub fn subject_dir(dir: &Path, subject: usize, modality: Modality) -> PathBuf {
    dir.join(subject_name(subject)).join(modality.as_str())
}

pub fn kspace_file(accel: Option<usize>) -> String {
    match accel {
        None => "kspace_full.drum".into(),
        Some(r) => format!("kspace_r{r}.drum"),
    }
}

fn real2(a: &TensorArchive, name: &str) -> Result<Array2<f64>, PipelineError> {
    let t = a.require(name)?;
    Ok(t.expect_rank(2)?.to_real()?.into_dimensionality::<Ix2>().expect("rank checked"))
}

fn values(a: &TensorArchive, name: &str) -> Result<Vec<f64>, PipelineError> {
    Ok(a.require(name)?.to_real()?.iter().copied().collect())
}

fn bool_grid<D: ndarray::Dimension>(a: &ndarray::Array<bool, D>) -> ndarray::Array<f64, D> {
    a.mapv(|b| if b { 1.0 } else { 0.0 })
}

pub fn modality_code(m: Modality) -> f64 {
    match m {
        Modality::T1 => 1.0,
        Modality::T2 => 2.0,
    }
}

pub fn modality_from_code(v: f64) -> Result<Modality, PipelineError> {
    match v as i64 {
        1 => Ok(Modality::T1),
        2 => Ok(Modality::T2),
        _ => Err(PipelineError::Data(format!("unknown modality code {v}"))),
    }
}

pub fn kspace_to_archive(y: &MultiCoilKSpace) -> Result<TensorArchive, PipelineError> {
    Ok(TensorArchive::from_entries(vec![
        Tensor::from_complex("kspace", y.data.view()),
        Tensor::from_real("mask", bool_grid(y.mask.grid()).view()),
        Tensor::from_vec("accel", &[y.mask.accel() as f64]),
        Tensor::from_vec("acs", &[y.mask.acs_lines() as f64]),
    ])?)
}

pub fn kspace_from_archive(a: &TensorArchive) -> Result<MultiCoilKSpace, PipelineError> {
    let data: Array4<_> = a
        .require("kspace")?
        .expect_rank(4)?
        .to_complex()?
        .into_dimensionality::<Ix4>()
        .expect("rank checked");
    let grid = a
        .require("mask")?
        .expect_rank(3)?
        .to_real()?
        .into_dimensionality::<Ix3>()
        .expect("rank checked")
        .mapv(|v| v > 0.5);
    let accel = values(a, "accel")?.first().copied().unwrap_or(1.0) as usize;
    let acs = values(a, "acs")?.first().copied().unwrap_or(0.0) as usize;
    let (nt, _, ny, nx) = data.dim();
    let (nm, my, mx) = grid.dim();
    if (my, mx) != (ny, nx) || (nm != 1 && nm != nt) {
        return Err(PipelineError::Data(format!(
            "mask {:?} does not match k-space {:?}",
            grid.dim(),
            data.dim()
        )));
    }
    Ok(MultiCoilKSpace {
        data,
        mask: SamplingMask::from_grid(grid, accel, acs),
    })
}

pub fn params_to_archive(p: &ParameterMap, labels: Option<&Array2<u8>>, roi: Option<&Array2<bool>>) -> Result<TensorArchive, PipelineError> {
    let mut a = TensorArchive::new();
    a.push(Tensor::from_vec("modality", &[modality_code(p.modality)]))?;
    a.push(Tensor::from_real("value", p.value.view()))?;
    a.push(Tensor::from_real("amplitude", p.amplitude.view()))?;
    if let Some(b) = &p.inversion {
        a.push(Tensor::from_real("inversion", b.view()))?;
    }
    if let Some(s) = &p.t1_star {
        a.push(Tensor::from_real("t1_star", s.view()))?;
    }
    a.push(Tensor::from_real("residual", p.residual.view()))?;
    a.push(Tensor::from_real("flags", p.flags.mapv(f64::from).view()))?;
    a.push(Tensor::from_vec("bounds", &[p.bounds.0, p.bounds.1]))?;
    a.push(Tensor::from_vec("timing", &p.timing))?;
    if let Some(l) = labels {
        a.push(Tensor::from_real("labels", l.mapv(f64::from).view()))?;
    }
    if let Some(r) = roi {
        a.push(Tensor::from_real("roi", bool_grid(r).view()))?;
    }
    Ok(a)
}

pub fn params_from_archive(a: &TensorArchive) -> Result<ParameterMap, PipelineError> {
    let modality = modality_from_code(values(a, "modality")?[0])?;
    let bounds = values(a, "bounds")?;
    if bounds.len() != 2 {
        return Err(PipelineError::Data("bounds must hold two values".into()));
    }
    let optional = |name: &str| a.get(name).map(|_| real2(a, name)).transpose();
    Ok(ParameterMap {
        modality,
        value: real2(a, "value")?,
        amplitude: real2(a, "amplitude")?,
        inversion: optional("inversion")?,
        t1_star: optional("t1_star")?,
        residual: real2(a, "residual")?,
        flags: real2(a, "flags")?.mapv(|v| v as u8),
        bounds: (bounds[0], bounds[1]),
        timing: values(a, "timing")?,
    })
}

pub fn roi_from_archive(a: &TensorArchive) -> Result<Option<Array2<bool>>, PipelineError> {
    a.get("roi").map(|_| Ok(real2(a, "roi")?.mapv(|v| v > 0.5))).transpose()
}

/// `recon` stack plus its timing vector and modality.
pub fn recon_to_archive(stack: &ContrastStack, timing: &[f64], modality: Modality) -> Result<TensorArchive, PipelineError> {
    Ok(TensorArchive::from_entries(vec![
        Tensor::from_complex("recon", stack.view()),
        Tensor::from_vec("timing", timing),
        Tensor::from_vec("modality", &[modality_code(modality)]),
    ])?)
}

pub fn recon_from_archive(a: &TensorArchive) -> Result<(ContrastStack, Vec<f64>, Modality), PipelineError> {
    let stack = a
        .require("recon")?
        .expect_rank(3)?
        .to_complex()?
        .into_dimensionality::<Ix3>()
        .expect("rank checked");
    let timing = values(a, "timing")?;
    if timing.len() != stack.dim().0 {
        return Err(PipelineError::Data(format!(
            "{} timing values for {} contrasts",
            timing.len(),
            stack.dim().0
        )));
    }
    Ok((stack, timing, modality_from_code(values(a, "modality")?[0])?))
}

fn write(a: &TensorArchive, path: PathBuf) -> Result<(), PipelineError> {
    a.write(&path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn read(path: PathBuf) -> Result<TensorArchive, PipelineError> {
    TensorArchive::read(&path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn write_subject(dir: &Path, d: &PhantomDataset) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let timing = &d.params.timing;
    write(
        &TensorArchive::from_entries(vec![Tensor::from_complex("truth", d.truth.view()), Tensor::from_vec("timing", timing)])?,
        dir.join("truth.drum"),
    )?;
    write(&params_to_archive(&d.params, Some(&d.labels), Some(&d.roi))?, dir.join("params.drum"))?;
    write(
        &TensorArchive::from_entries(vec![
            Tensor::from_complex("maps", d.maps.maps.view()),
            Tensor::from_real("support", bool_grid(&d.maps.support).view()),
        ])?,
        dir.join("smaps.drum"),
    )?;
    write(&kspace_to_archive(&d.full)?, dir.join(kspace_file(None)))?;
    for (r, y) in &d.undersampled {
        write(&kspace_to_archive(y)?, dir.join(kspace_file(Some(*r))))?;
    }
    Ok(())
}

/// Generate `subjects` phantoms for each modality and write them under `dir`.
pub fn write_dataset(
    dir: &Path,
    spec: &PhantomSpec,
    subjects: usize,
    modalities: &[Modality],
    opts: &AcquisitionOptions,
) -> Result<DatasetInfo, PipelineError> {
    if subjects == 0 {
        return Err(PipelineError::Config("at least one subject is required".into()));
    }
    std::fs::create_dir_all(dir)?;
    for s in 0..subjects {
        let subject = spec.subject(s as u64);
        for &m in modalities {
            let d = generate_dataset(&subject, m, opts)?;
            write_subject(&subject_dir(dir, s, m), &d)?;
        }
    }
    let info = DatasetInfo {
        subjects,
        modalities: modalities.to_vec(),
        accelerations: opts.accelerations.clone(),
        acs_lines: opts.acs_lines,
        time_varying: opts.time_varying,
        spec: spec.clone(),
    };
    std::fs::write(dir.join(DATASET_INDEX), serde_json::to_string_pretty(&info)?)?;
    Ok(info)
}

pub fn load_kspace(dir: &Path, subject: usize, modality: Modality, accel: Option<usize>) -> Result<MultiCoilKSpace, PipelineError> {
    kspace_from_archive(&read(subject_dir(dir, subject, modality).join(kspace_file(accel)))?)
}

pub fn load_truth(dir: &Path, subject: usize, modality: Modality) -> Result<ContrastStack, PipelineError> {
    let a = read(subject_dir(dir, subject, modality).join("truth.drum"))?;
    Ok(a.require("truth")?
        .expect_rank(3)?
        .to_complex()?
        .into_dimensionality::<Ix3>()
        .expect("rank checked"))
}

/// Ground-truth maps and the myocardium/blood ROI.
pub fn load_params(dir: &Path, subject: usize, modality: Modality) -> Result<(ParameterMap, Option<Array2<bool>>), PipelineError> {
    let a = read(subject_dir(dir, subject, modality).join("params.drum"))?;
    Ok((params_from_archive(&a)?, roi_from_archive(&a)?))
}

pub fn load_maps(dir: &Path, subject: usize, modality: Modality) -> Result<SensitivityMaps, PipelineError> {
    let a = read(subject_dir(dir, subject, modality).join("smaps.drum"))?;
    let maps: Array3<_> = a
        .require("maps")?
        .expect_rank(3)?
        .to_complex()?
        .into_dimensionality::<Ix3>()
        .expect("rank checked");
    let support = real2(&a, "support")?.mapv(|v| v > 0.5);
    Ok(SensitivityMaps::new(maps, support)?)
}

pub fn read_archive(path: &Path) -> Result<TensorArchive, PipelineError> {
    read(path.to_path_buf())
}

pub fn write_archive(a: &TensorArchive, path: &Path) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write(a, path.to_path_buf())
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub parallel: bool,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub timings: StageTimings,
    pub config: Option<super::PipelineConfig>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            parallel: crate::par::is_parallel(),
            threads: crate::par::threads(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: StageTimings::default(),
            config: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
