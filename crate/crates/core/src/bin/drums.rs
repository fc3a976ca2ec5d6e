use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drums::encoding::ContrastStack;
use drums::fitting::{Modality, ParameterMap};
use drums::metrics::{magnitude, Metric};
use drums::phantom::{AcquisitionOptions, PhantomSpec};
use drums::pipeline::render::{map_window, write_panel, M0_WINDOW};
use drums::pipeline::store::{self, DatasetInfo, Manifest};
use drums::pipeline::{
    evaluate, fit, reconstruct, summarize, write_metrics_csv, Method, MetricRow, PipelineConfig, PipelineError,
    Reconstruction, RowContext, StageTimings,
};
use drums::refiner::{load_weights, NetworkWeights};

#[derive(Parser)]
#[command(name = "drums", version, about = "Subspace reconstruction and relaxometry for undersampled cardiac mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset directory.
    Phantom(PhantomArgs),
    /// Reconstruct one subject at one acceleration.
    Recon(ReconArgs),
    /// Fit T1 or T2 maps to a reconstruction archive.
    Fit(FitArgs),
    /// Compare a reconstruction against a reference and write metrics.
    Eval(EvalArgs),
    /// Sweep methods and accelerations over a dataset.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `modality` from the config.
    #[arg(long)]
    modality: Option<Modality>,
    /// Overrides `weights` from the config.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Overrides `output` from the config.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = self.modality {
            cfg.modality = m;
        }
        if let Some(w) = &self.weights {
            cfg.weights = Some(w.clone());
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    subjects: usize,
    /// Accelerations to sample, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![4usize, 8, 10])]
    accel: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Modality::T1, Modality::T2])]
    modality: Vec<Modality>,
    #[arg(long, default_value_t = 24)]
    acs_lines: usize,
    /// Pseudo-random masks that differ per contrast.
    #[arg(long)]
    time_varying: bool,
    /// Noise standard deviation relative to the image peak.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    coils: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReconArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `phantom`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    subject: usize,
    #[arg(long, value_enum)]
    method: Method,
    /// Acceleration to load; overrides the config. 1 selects fully sampled data.
    #[arg(long)]
    accel: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    /// Reconstruction archive (`recon`, `timing`, `modality`).
    #[arg(long)]
    recon: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    recon: PathBuf,
    /// Reference reconstruction archive.
    #[arg(long)]
    reference: PathBuf,
    /// Parameter archive holding the `roi` used for map metrics.
    #[arg(long)]
    roi: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value = "sub000")]
    subject: String,
    #[arg(long, default_value_t = 0)]
    accel: usize,
    #[arg(long, default_value = "unknown")]
    method: String,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', value_enum)]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    accel: Option<Vec<usize>>,
    /// Compare against phantom truth instead of the fully sampled ESPIRiT reconstruction.
    #[arg(long)]
    truth_reference: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Recon(a) => recon(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn phantom(a: PhantomArgs) -> Result<(), PipelineError> {
    let mut spec = PhantomSpec::default();
    if let Some(n) = a.noise {
        spec.noise_std = n;
    }
    if let Some(s) = a.size {
        spec.ny = s;
        spec.nx = s;
    }
    if let Some(c) = a.coils {
        spec.coils = c;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if a.accel.iter().any(|&r| r < 1) || spec.coils == 0 || spec.ny < 8 || spec.noise_std < 0.0 {
        return Err(PipelineError::Config(
            "accelerations must be >= 1, coils >= 1, size >= 8, noise >= 0".into(),
        ));
    }
    let opts = AcquisitionOptions {
        accelerations: a.accel,
        acs_lines: a.acs_lines,
        time_varying: a.time_varying,
        ..Default::default()
    };
    let mut manifest = Manifest::new("phantom");
    let info = manifest
        .timings
        .time("generate", || store::write_dataset(&a.out, &spec, a.subjects, &a.modality, &opts))?;
    manifest.outputs.push(a.out.join(store::DATASET_INDEX));
    manifest.write(&a.out)?;
    println!(
        "wrote {} subject(s) x {:?} at R={:?} to {}",
        info.subjects,
        info.modalities,
        info.accelerations,
        a.out.display()
    );
    Ok(())
}

fn load_net(cfg: &PipelineConfig, method: Method) -> Result<Option<NetworkWeights>, PipelineError> {
    if method != Method::Drums {
        return Ok(None);
    }
    let path = cfg.weights.as_ref().ok_or(PipelineError::MissingWeights)?;
    Ok(Some(load_weights(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?))
}

fn accel_key(r: usize) -> Option<usize> {
    (r > 1).then_some(r)
}

/// Writes `recon.drum` plus the subspace and solver side products.
fn save_recon(dir: &Path, rec: &Reconstruction, timing: &[f64], modality: Modality) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let path = dir.join("recon.drum");
    store::write_archive(&store::recon_to_archive(&rec.stack, timing, modality)?, &path)?;
    out.push(path);
    if let Some(b) = &rec.basis {
        let path = dir.join("basis.drum");
        store::write_archive(&b.to_archive(), &path)?;
        out.push(path);
    }
    for (name, p) in [("prepared.drum", &rec.prepared), ("refined.drum", &rec.refined)] {
        if let Some(p) = p {
            let path = dir.join(name);
            store::write_archive(&p.to_archive(), &path)?;
            out.push(path);
        }
    }
    if let Some(r) = &rec.report {
        let path = dir.join("solver.csv");
        r.write_csv(std::fs::File::create(&path)?)?;
        out.push(path);
    }
    Ok(out)
}

fn recon(a: ReconArgs) -> Result<(), PipelineError> {
    let mut cfg = a.common.resolve()?;
    if let Some(r) = a.accel {
        cfg.acceleration = r;
    }
    cfg.validate()?;
    let net = load_net(&cfg, a.method)?;
    let y = store::load_kspace(&a.data, a.subject, cfg.modality, accel_key(cfg.acceleration))?;
    let (params, _) = store::load_params(&a.data, a.subject, cfg.modality)?;
    let rec = reconstruct(a.method, &y, &cfg, net.as_ref())?;
    let mut manifest = Manifest::new("recon");
    manifest.inputs.push(store::subject_dir(&a.data, a.subject, cfg.modality));
    manifest.outputs = save_recon(&cfg.output, &rec, &params.timing, cfg.modality)?;
    manifest.timings = rec.timings.clone();
    manifest.config = Some(cfg.clone());
    manifest.write(&cfg.output)?;
    println!(
        "{} R={} {}: {:.2}s -> {}",
        cfg.modality,
        cfg.acceleration,
        a.method,
        rec.timings.total(),
        cfg.output.join("recon.drum").display()
    );
    Ok(())
}

fn map_panels(dir: &Path, prefix: &str, maps: &[&ParameterMap]) -> Result<Vec<PathBuf>, PipelineError> {
    let modality = maps[0].modality;
    let values: Vec<_> = maps.iter().map(|m| &m.value).collect();
    let amps: Vec<_> = maps.iter().map(|m| &m.amplitude).collect();
    let a = dir.join(format!("{prefix}{}.png", modality.map_name()));
    write_panel(&a, &values, map_window(modality))?;
    let mut out = vec![a];
    if modality == Modality::T2 {
        let b = dir.join(format!("{prefix}m0.png"));
        write_panel(&b, &amps, M0_WINDOW)?;
        out.push(b);
    }
    Ok(out)
}

fn fit_cmd(a: FitArgs) -> Result<(), PipelineError> {
    let (stack, timing, modality) = store::recon_from_archive(&store::read_archive(&a.recon)?)?;
    let mut manifest = Manifest::new("fit");
    let map = manifest.timings.time("fit", || fit(&stack, &timing, modality))?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("params.drum");
    store::write_archive(&store::params_to_archive(&map, None, None)?, &path)?;
    manifest.inputs.push(a.recon);
    manifest.outputs.push(path);
    manifest.outputs.extend(map_panels(&a.out, "", &[&map])?);
    manifest.write(&a.out)?;
    Ok(())
}

fn magnitude_stack(s: &ContrastStack) -> Vec<ndarray::Array2<f64>> {
    s.outer_iter().map(magnitude).collect()
}

fn eval(a: EvalArgs) -> Result<(), PipelineError> {
    let (test, timing, modality) = store::recon_from_archive(&store::read_archive(&a.recon)?)?;
    let (reference, _, ref_modality) = store::recon_from_archive(&store::read_archive(&a.reference)?)?;
    if ref_modality != modality {
        return Err(PipelineError::Data(format!("recon is {modality}, reference is {ref_modality}")));
    }
    let roi = match &a.roi {
        Some(p) => store::roi_from_archive(&store::read_archive(p)?)?,
        None => None,
    };
    let mut manifest = Manifest::new("eval");
    let fa = manifest.timings.time("fit", || fit(&test, &timing, modality))?;
    let fb = manifest.timings.time("fit_reference", || fit(&reference, &timing, modality))?;
    let ctx = RowContext {
        subject: a.subject,
        slice: 0,
        accel: a.accel,
        method: a.method,
        reference: a.reference.display().to_string(),
    };
    let rows = evaluate(&ctx, &test, &reference, Some((&fa, &fb)), roi.as_ref())?;
    std::fs::create_dir_all(&a.out)?;
    let csv = a.out.join("metrics.csv");
    write_metrics_csv(&rows, std::fs::File::create(&csv)?)?;
    manifest.inputs = vec![a.recon, a.reference];
    manifest.outputs.push(csv);
    manifest.outputs.extend(map_panels(&a.out, "", &[&fb, &fa])?);
    manifest.write(&a.out)?;
    for r in rows.iter().filter(|r| r.metric == Metric::Nrmse) {
        println!("{} nrmse {:.5}", r.target, r.value);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), PipelineError> {
    let cfg = a.common.resolve()?;
    cfg.validate()?;
    let info = DatasetInfo::load(&a.data)?;
    let methods = a.methods.unwrap_or_else(|| {
        let mut m = vec![Method::Fft, Method::Espirit, Method::Lowrank];
        if cfg.weights.is_some() {
            m.push(Method::Drums);
        }
        m
    });
    let accels = a.accel.unwrap_or_else(|| info.accelerations.clone());
    if let Some(r) = accels.iter().find(|r| !info.accelerations.contains(r)) {
        return Err(PipelineError::Config(format!("dataset has no R={r}")));
    }
    let net = match methods.contains(&Method::Drums) {
        true => load_net(&cfg, Method::Drums)?,
        false => None,
    };
    let out = cfg.output.clone();
    std::fs::create_dir_all(&out)?;
    let mut manifest = Manifest::new("report");
    manifest.config = Some(cfg.clone());
    manifest.inputs.push(a.data.clone());
    let mut rows: Vec<MetricRow> = Vec::new();
    let modalities: Vec<Modality> = info
        .modalities
        .iter()
        .copied()
        .filter(|m| a.common.modality.is_none_or(|c| c == *m))
        .collect();
    for s in 0..info.subjects {
        for &modality in &modalities {
            let mcfg = PipelineConfig { modality, ..cfg.clone() };
            let (truth_params, roi) = store::load_params(&a.data, s, modality)?;
            let timing = truth_params.timing.clone();
            let (reference, ref_name) = if a.truth_reference {
                (store::load_truth(&a.data, s, modality)?, "truth")
            } else {
                let full = store::load_kspace(&a.data, s, modality, None)?;
                let rec = reconstruct(Method::Espirit, &full, &mcfg, None)?;
                prefix_timings(&mut manifest.timings, &format!("{}/{modality}/reference", store::subject_name(s)), &rec.timings);
                (rec.stack, "espirit_full")
            };
            let ref_map = fit(&reference, &timing, modality)?;
            let case_dir = out.join(store::subject_name(s)).join(modality.as_str());
            std::fs::create_dir_all(&case_dir)?;
            let mut panel_maps = vec![ref_map.clone()];
            let mut labels = vec!["reference".to_string()];
            for &r in &accels {
                let y = store::load_kspace(&a.data, s, modality, accel_key(r))?;
                for &method in &methods {
                    let rec = reconstruct(method, &y, &mcfg, net.as_ref())?;
                    let tag = format!("{}/{modality}/r{r}/{method}", store::subject_name(s));
                    prefix_timings(&mut manifest.timings, &tag, &rec.timings);
                    let run_dir = case_dir.join(format!("r{r}")).join(method.name());
                    manifest.outputs.extend(save_recon(&run_dir, &rec, &timing, modality)?);
                    let map = manifest.timings.time(&format!("{tag}/fit"), || fit(&rec.stack, &timing, modality))?;
                    let ctx = RowContext {
                        subject: store::subject_name(s),
                        slice: 0,
                        accel: r,
                        method: method.name().into(),
                        reference: ref_name.into(),
                    };
                    rows.extend(evaluate(&ctx, &rec.stack, &reference, Some((&map, &ref_map)), roi.as_ref())?);
                    log::info!("{tag}: {:.2}s", rec.timings.total());
                    panel_maps.push(map);
                    labels.push(format!("r{r}_{method}"));
                }
            }
            let refs: Vec<&ParameterMap> = panel_maps.iter().collect();
            manifest.outputs.extend(map_panels(&case_dir, "", &refs)?);
            let mags = magnitude_stack(&reference);
            let peak = mags.iter().flat_map(|m| m.iter()).fold(0.0f64, |a, &b| a.max(b));
            let path = case_dir.join("reference_contrasts.png");
            write_panel(&path, &mags.iter().collect::<Vec<_>>(), (0.0, peak))?;
            manifest.outputs.push(path);
            std::fs::write(case_dir.join("panel_order.txt"), labels.join("\n") + "\n")?;
        }
    }
    let csv = out.join("metrics.csv");
    write_metrics_csv(&rows, std::fs::File::create(&csv)?)?;
    manifest.outputs.push(csv);
    let summary = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(["method", "R", "target", "mean_nrmse"])?;
    for target in ["contrast", "t1map", "t2map"] {
        for (m, r, v) in summarize(&rows, target, Metric::Nrmse) {
            w.write_record([m.clone(), r.to_string(), target.to_string(), format!("{v:.6}")])?;
            println!("{target:8} R={r:<3} {m:8} nrmse {v:.5}");
        }
    }
    w.flush()?;
    manifest.outputs.push(summary);
    manifest.write(&out)?;
    Ok(())
}

fn prefix_timings(into: &mut StageTimings, prefix: &str, from: &StageTimings) {
    for (name, secs) in &from.stages {
        into.stages.push((format!("{prefix}/{name}"), *secs));
    }
}
