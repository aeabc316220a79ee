use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use spdc_epr::par;
use spdc_epr::source::Plane;
use spdc_epr_cli::pipeline::{self, EXIT_ERROR};
use spdc_epr_cli::RunConfig;

#[derive(Parser)]
#[command(name = "spdc-epr", version, about = "Simulate and analyze photon-counting SPDC images for EPR correlations")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Default output directory.
    #[arg(long, global = true, env = "SPDC_EPR_OUT", default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlaneArg {
    Nf,
    Ff,
}

impl From<PlaneArg> for Plane {
    fn from(p: PlaneArg) -> Self {
        match p {
            PlaneArg::Nf => Plane::NearField,
            PlaneArg::Ff => Plane::FarField,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one plane into a BPI1 frame-stack file.
    Simulate {
        #[arg(long, value_enum)]
        plane: PlaneArg,
    },
    /// Correlate a stack: map, witness and mask in CSV and binary form.
    Correlate {
        #[arg(long)]
        stack: PathBuf,
    },
    /// Fit two saved maps and write the report. Exit status 0 means the
    /// isotropic inequality is violated, 1 that it is not, 2 an error.
    Report {
        /// Base path of the near-field map (without `.bin`).
        #[arg(long)]
        nf: PathBuf,
        /// Base path of the far-field map (without `.bin`).
        #[arg(long)]
        ff: PathBuf,
    },
    /// Run every stage and write a manifest. Exit status as for `report`.
    Pipeline,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let path = cli.config.as_deref().context("--config is required")?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<i32> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate { plane } => {
            let plane = Plane::from(*plane);
            let out = cli.out.clone().unwrap_or_else(|| cli.out_dir.join(format!("{}.bpi", plane.short())));
            ensure_parent(&out)?;
            let s = pipeline::cmd_simulate(&cfg, plane, &out)?;
            println!("wrote {} ({} frames, {:.3} pairs/frame)", out.display(), s.n_frames, s.mean_pairs_per_frame);
            if let Some(f) = s.fluence {
                println!("ROI fluence {:.4}", f.fluence);
                if !f.in_regime {
                    eprintln!("warning: fluence {:.4} is outside the photon-counting regime 0.1–0.2", f.fluence);
                }
            }
            Ok(0)
        }
        Command::Correlate { stack } => {
            let prefix = match &cli.out {
                Some(p) => p.clone(),
                None => {
                    let stem = stack.file_stem().map(|s| s.to_owned()).unwrap_or_else(|| "stack".into());
                    cli.out_dir.join(stem)
                }
            };
            ensure_parent(&prefix)?;
            let c = pipeline::cmd_correlate(stack, &cfg, &prefix)?;
            for f in &c.files {
                println!("wrote {}", f.display());
            }
            println!(
                "witness max |F|/σ = {:.2}; variance of difference (bin {}) = {:.4} ± {:.4}",
                c.witness.max_abs_z(),
                cfg.analysis.bin,
                c.vod.ratio,
                c.vod.std_error
            );
            Ok(0)
        }
        Command::Report { nf, ff } => {
            let out = cli.out.clone().unwrap_or_else(|| cli.out_dir.join("report.json"));
            ensure_parent(&out)?;
            let r = pipeline::cmd_report(nf, ff, &cfg, &out);
            report_outcome(&r);
            Ok(pipeline::exit_code(&r))
        }
        Command::Pipeline => {
            let dir = cli.out.clone().unwrap_or_else(|| cli.out_dir.clone());
            let r = pipeline::cmd_pipeline(&cfg, &dir).map(|o| {
                println!("wrote {}", o.manifest_path.display());
                o.report
            });
            report_outcome(&r);
            Ok(pipeline::exit_code(&r))
        }
    }
}

fn report_outcome(r: &spdc_epr::Result<spdc_epr::report::EprReport>) {
    match r {
        Ok(r) => print!("{}", r.summary()),
        Err(e) => eprintln!("error: {e}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = par::with_workers(cli.workers, || match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    });
    ExitCode::from(code as u8)
}
