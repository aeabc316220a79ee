#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spdc_epr::detector::Roi;
use spdc_epr::source::Xy;
use spdc_epr_cli::RunConfig;

pub const DESK: &str = include_str!("../../../../configs/desk.toml");

pub fn desk() -> RunConfig {
    RunConfig::from_toml_str(DESK).unwrap()
}

/// 64×64 sensor, 32×32 ROIs, a few hundred frames, no bootstrap.
pub fn tiny(n_frames: usize) -> RunConfig {
    let mut c = desk();
    c.n_frames = n_frames;
    c.geometry.sensor_width = 64;
    c.geometry.sensor_height = 64;
    c.source.pump_sigma = Xy::new(7.0, 7.0);
    c.source.ff_marginal_sigma = Xy::new(7.0, 7.0);
    c.source.near_centers.signal = Xy::new(19.5, 31.5);
    c.source.near_centers.idler = Xy::new(35.5, 31.5);
    c.source.far_centers.signal = Xy::new(15.5, 31.5);
    c.source.far_centers.idler = Xy::new(47.5, 31.5);
    c.rois.near_field.roi1 = Roi::new(4, 16, 32, 32);
    c.rois.near_field.roi2 = Roi::new(20, 16, 32, 32);
    c.rois.far_field.roi1 = Roi::new(0, 16, 32, 32);
    c.rois.far_field.roi2 = Roi::new(32, 16, 32, 32);
    c.analysis.n_resamples = 0;
    c.validate().unwrap();
    c
}

pub fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spdc-epr"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("SPDC_EPR_OUT").output().unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
