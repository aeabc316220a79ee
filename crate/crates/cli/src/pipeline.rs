//! Pipeline stages: simulate → correlate → fit/report, plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spdc_epr::analysis;
use spdc_epr::correlator::{self, CorrMap, VodEstimate};
use spdc_epr::detector::{self, FluenceCheck, FrameStack};
use spdc_epr::peakfit::GaussFit;
use spdc_epr::report::{self, EprReport, PlaneData};
use spdc_epr::source::Plane;
use spdc_epr::{Error, Result};

use crate::config::RunConfig;
use crate::format;

/// Exit status of a `report` or `pipeline` run.
pub const EXIT_VIOLATED: i32 = 0;
pub const EXIT_NOT_VIOLATED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

pub fn exit_code(report: &Result<EprReport>) -> i32 {
    match report {
        Ok(r) if r.violated() => EXIT_VIOLATED,
        Ok(_) => EXIT_NOT_VIOLATED,
        Err(_) => EXIT_ERROR,
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn write_file(path: &Path, data: &[u8]) -> Result<()> {
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub plane: Plane,
    pub n_frames: usize,
    pub mean_pairs_per_frame: f64,
    /// Photons that fell outside the sensor.
    pub clipped: u64,
    /// Mean fluence over both ROIs; absent for an empty stack.
    pub fluence: Option<FluenceCheck>,
}

/// Simulates one plane and writes it as a BPI1 file.
pub fn simulate(cfg: &RunConfig, plane: Plane) -> Result<(FrameStack, SimulateSummary)> {
    cfg.validate()?;
    let src = cfg.resolved_source(plane)?;
    let (stack, clipped) = detector::simulate_stack(&src, &cfg.detector(), plane, cfg.n_frames, cfg.seed)?;
    let rois = cfg.rois(plane);
    let fluence = if stack.is_empty() {
        None
    } else {
        Some(detector::check_fluence(&stack, &[rois.roi1, rois.roi2])?)
    };
    let summary = SimulateSummary {
        plane,
        n_frames: stack.len(),
        mean_pairs_per_frame: src.mean_pairs_per_frame,
        clipped,
        fluence,
    };
    Ok((stack, summary))
}

pub fn cmd_simulate(cfg: &RunConfig, plane: Plane, out_path: &Path) -> Result<SimulateSummary> {
    let (stack, summary) = simulate(cfg, plane)?;
    format::write_stack(out_path, &stack)?;
    Ok(summary)
}

/// Outputs of correlating one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    /// Intercorrelation map with the fit mask applied.
    pub map: CorrMap,
    pub witness: CorrMap,
    pub vod: VodEstimate,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub plane: Plane,
    pub n_frames: usize,
    pub mean_counts: (f64, f64),
    /// Largest |F|/σ of the unmasked witness map.
    pub witness_max_abs_z: f64,
    pub bin: usize,
    pub variance_of_difference: VodEstimate,
}

impl Correlation {
    pub fn summary(&self, bin: usize) -> CorrelationSummary {
        CorrelationSummary {
            plane: self.map.plane,
            n_frames: self.map.n_frames,
            mean_counts: self.map.mean_counts,
            witness_max_abs_z: self.witness.max_abs_z(),
            bin,
            variance_of_difference: self.vod,
        }
    }
}

/// Correlates an in-memory stack and writes the map, witness and mask files
/// under `out_prefix` (`<prefix>_corr.*`, `<prefix>_witness.*`).
pub fn correlate_stack(stack: &FrameStack, cfg: &RunConfig, out_prefix: &Path) -> Result<Correlation> {
    let rois = cfg.rois(stack.plane);
    rois.validate(stack.width, stack.height)?;
    let opts = cfg.analysis_options(stack.plane);
    let raw = correlator::intercorrelation(stack, &rois)?;
    let map = correlator::build_mask(&raw, &rois, opts.smear_axis, opts.mask_radius);
    let witness = correlator::witness(stack, &rois)?;
    let witness = correlator::build_mask(&witness, &rois, opts.smear_axis, opts.mask_radius);
    let vod = correlator::variance_of_difference(stack, &rois, cfg.analysis.bin)?;
    let mut files = format::write_map(&prefixed(out_prefix, "_corr"), &map)?;
    files.extend(format::write_map(&prefixed(out_prefix, "_witness"), &witness)?);
    Ok(Correlation {
        map,
        witness,
        vod,
        files,
    })
}

pub fn cmd_correlate(stack_path: &Path, cfg: &RunConfig, out_prefix: &Path) -> Result<Correlation> {
    cfg.validate()?;
    let stack = format::read_stack(stack_path)?;
    let (w, h) = (cfg.geometry.sensor_width, cfg.geometry.sensor_height);
    if (stack.width, stack.height) != (w, h) {
        return Err(Error::format(
            stack_path,
            format!("stack is {}×{}, configuration expects {w}×{h}", stack.width, stack.height),
        ));
    }
    correlate_stack(&stack, cfg, out_prefix)
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Written in place of a report when a fit fails.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartialReport {
    pub error: String,
    pub nf: Option<GaussFit>,
    pub ff: Option<GaussFit>,
}

fn fit_plane(map: &CorrMap, cfg: &RunConfig) -> Result<GaussFit> {
    let rois = cfg.rois(map.plane);
    Ok(analysis::fit_map(map, &rois, &cfg.analysis_options(map.plane))?.fit)
}

/// Fits both maps and builds the report. On a fit failure the partial
/// result goes to `partial_out` (when given) before the error is returned.
fn report_from_maps(nf: &CorrMap, ff: &CorrMap, cfg: &RunConfig, partial_out: Option<&Path>) -> Result<EprReport> {
    if nf.plane != Plane::NearField || ff.plane != Plane::FarField {
        return Err(Error::Estimator(format!(
            "expected a near-field and a far-field map, got {:?} and {:?}",
            nf.plane, ff.plane
        )));
    }
    let nf_fit = fit_plane(nf, cfg).map_err(|e| stage_err("fit.nf", e));
    let ff_fit = fit_plane(ff, cfg).map_err(|e| stage_err("fit.ff", e));
    let (err, nf_fit, ff_fit) = match (nf_fit, ff_fit) {
        (Ok(a), Ok(b)) => match report::build_report(&a, &b, &cfg.geometry) {
            Ok(r) => return Ok(r.with_maps(nf, ff)),
            Err(e) => (stage_err("report", e), Some(a), Some(b)),
        },
        (Err(e), b) => (e, None, b.ok()),
        (a, Err(e)) => (e, a.ok(), None),
    };
    if let Some(path) = partial_out {
        let partial = PartialReport {
            error: err.to_string(),
            nf: nf_fit,
            ff: ff_fit,
        };
        write_file(path, serde_json::to_string_pretty(&partial).unwrap().as_bytes())?;
    }
    Err(err)
}

fn stage_err(name: &'static str, e: Error) -> Error {
    Error::Stage {
        stage: name,
        source: Box::new(e),
    }
}

fn write_report(report: &EprReport, out_path: &Path) -> Result<[PathBuf; 2]> {
    write_file(out_path, report.to_json().as_bytes())?;
    let txt = out_path.with_extension("txt");
    write_file(&txt, report.summary().as_bytes())?;
    Ok([out_path.to_path_buf(), txt])
}

/// Fits the two saved maps (given by their base paths, as written by
/// `cmd_correlate`) and writes the report JSON and its text summary.
pub fn cmd_report(nf_corr: &Path, ff_corr: &Path, cfg: &RunConfig, out_path: &Path) -> Result<EprReport> {
    cfg.validate()?;
    let nf = format::read_map(nf_corr)?;
    let ff = format::read_map(ff_corr)?;
    let report = report_from_maps(&nf, &ff, cfg, Some(out_path))?;
    write_report(&report, out_path)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub created_unix: u64,
    pub seed: u64,
    pub config_sha256: String,
    pub verdict: Option<bool>,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(data: &[u8]) -> String {
    let digest = Sha256::digest(data);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn artifact(out_dir: &Path, path: &Path) -> Result<Artifact> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rel = path.strip_prefix(out_dir).unwrap_or(path);
    Ok(Artifact {
        path: rel.to_string_lossy().replace('\\', "/"),
        bytes: data.len() as u64,
        sha256: sha256_hex(&data),
    })
}

/// Per-plane diagnostics written next to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneDiagnostics {
    pub simulate: SimulateSummary,
    pub correlate: CorrelationSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub nf: PlaneDiagnostics,
    pub ff: PlaneDiagnostics,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: EprReport,
    pub diagnostics: Diagnostics,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

/// Runs every stage into `out_dir` and writes `manifest.json`, which lists
/// each output with its size and SHA-256.
pub fn cmd_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    stage("config", cfg.validate())?;
    if cfg.n_frames < 2 {
        return Err(stage_err(
            "config",
            Error::config("n_frames", format!("the pipeline needs at least 2 frames, got {}", cfg.n_frames)),
        ));
    }
    stage("output", fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e)))?;
    let mut files: Vec<PathBuf> = Vec::new();

    let cfg_text = cfg.to_toml();
    let cfg_path = out_dir.join("config.toml");
    stage("output", write_file(&cfg_path, cfg_text.as_bytes()))?;
    files.push(cfg_path);

    let mut stacks = Vec::new();
    let mut sims = Vec::new();
    for (plane, name) in [(Plane::NearField, "simulate.nf"), (Plane::FarField, "simulate.ff")] {
        let (stack, summary) = stage(name, simulate(cfg, plane))?;
        let path = out_dir.join(format!("{}.bpi", plane.short()));
        stage(name, format::write_stack(&path, &stack))?;
        files.push(path);
        stacks.push(stack);
        sims.push(summary);
    }

    let mut corrs = Vec::new();
    for (stack, name) in stacks.iter().zip(["correlate.nf", "correlate.ff"]) {
        let c = stage(name, correlate_stack(stack, cfg, &out_dir.join(stack.plane.short())))?;
        files.extend(c.files.iter().cloned());
        corrs.push(c);
    }

    let mut report = report_from_maps(&corrs[0].map, &corrs[1].map, cfg, Some(&out_dir.join("report.partial.json")))?;
    if cfg.analysis.n_resamples > 0 {
        let b = stage(
            "bootstrap",
            report::bootstrap_errors(
                PlaneData {
                    stack: &stacks[0],
                    rois: &cfg.rois(Plane::NearField),
                    opts: &cfg.analysis_options(Plane::NearField),
                },
                PlaneData {
                    stack: &stacks[1],
                    rois: &cfg.rois(Plane::FarField),
                    opts: &cfg.analysis_options(Plane::FarField),
                },
                &cfg.geometry,
                cfg.analysis.n_resamples,
                cfg.seed,
            ),
        )?;
        report = report.with_bootstrap(b);
    }
    files.extend(stage("report", write_report(&report, &out_dir.join("report.json")))?);

    let bin = cfg.analysis.bin;
    let diagnostics = Diagnostics {
        nf: PlaneDiagnostics {
            simulate: sims[0].clone(),
            correlate: corrs[0].summary(bin),
        },
        ff: PlaneDiagnostics {
            simulate: sims[1].clone(),
            correlate: corrs[1].summary(bin),
        },
    };
    let diag_path = out_dir.join("diagnostics.json");
    stage(
        "report",
        write_file(&diag_path, serde_json::to_string_pretty(&diagnostics).unwrap().as_bytes()),
    )?;
    files.push(diag_path);

    let artifacts = stage("manifest", files.iter().map(|p| artifact(out_dir, p)).collect::<Result<Vec<_>>>())?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        seed: cfg.seed,
        config_sha256: sha256_hex(cfg_text.as_bytes()),
        verdict: Some(report.violated()),
        artifacts,
    };
    let manifest_path = out_dir.join("manifest.json");
    stage(
        "manifest",
        write_file(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap().as_bytes()),
    )?;
    Ok(PipelineOutcome {
        report,
        diagnostics,
        manifest,
        manifest_path,
    })
}
