use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::checks::{equivalence_suite, gradient_suite, EquivalenceReport};
use crate::error::{Error, Result};
use crate::network::{LayerTrace, Network, NetworkSpec};

use super::{base_config, create_dir, write_config, write_json, Globals};

fn finish<S: Serialize>(
    out: Option<&PathBuf>,
    command: &str,
    cfg: &impl Serialize,
    file: &str,
    report: &S,
) -> Result<()> {
    if let Some(dir) = out {
        create_dir(dir)?;
        write_config(dir, command, cfg)?;
        write_json(&dir.join(file), report)?;
    }
    Ok(())
}

fn millions(n: f64) -> String {
    if n >= 1e9 {
        format!("{:.2}G", n / 1e9)
    } else {
        format!("{:.2}M", n / 1e6)
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// i3d-r18, v4d-r18, i3d-r50, v4d-r50 or i3d-r18pp.
    #[arg(long)]
    pub preset: Option<String>,
    /// Network spec JSON instead of a preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Action units per video.
    #[arg(long)]
    pub units: Option<usize>,
    /// Frames per unit.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Square frame side.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub network: NetworkSpec,
    pub frames: usize,
    pub size: usize,
    pub batch: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
struct CountReport {
    schema: &'static str,
    network: NetworkSpec,
    /// `[N, C, U, T, H, W]`
    input: [usize; 6],
    layers: Vec<LayerTrace>,
    total_params: usize,
    total_macs: u64,
    /// Two operations per multiply-accumulate.
    total_flops: u64,
}

fn resolve_report(a: &ReportArgs) -> Result<ReportConfig> {
    let mut cfg = base_config(a.config.as_ref(), "report", || {
        Ok(ReportConfig {
            network: NetworkSpec::preset("v4d-r18", 200, 4)?,
            frames: 4,
            size: 224,
            batch: 1,
            out: None,
        })
    })?;
    if let Some(p) = &a.spec {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.network = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    } else if let Some(p) = &a.preset {
        let units = a.units.unwrap_or(cfg.network.units);
        cfg.network = NetworkSpec::preset(p, a.classes.unwrap_or(cfg.network.num_classes), units)?;
    }
    if let Some(c) = a.classes {
        cfg.network.num_classes = c;
    }
    if let Some(u) = a.units {
        cfg.network.units = u;
    }
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.size = a.size.unwrap_or(cfg.size);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    cfg.network.validate()?;
    Ok(cfg)
}

pub(super) fn report(a: ReportArgs, _g: Globals) -> Result<()> {
    let cfg = resolve_report(&a)?;
    let net = Network::<f32>::build(&cfg.network)?;
    let s = &cfg.network;
    let input = [
        cfg.batch,
        s.in_channels,
        s.units,
        cfg.frames,
        cfg.size,
        cfg.size,
    ];
    let layers = net.trace(input)?;
    let total_macs = layers.iter().map(|l| l.macs).sum::<u64>();
    let report = CountReport {
        schema: "v4d.report/1",
        network: cfg.network.clone(),
        input,
        total_params: net.param_count(),
        total_macs,
        total_flops: 2 * total_macs,
        layers,
    };
    println!(
        "{:<12} {:<10} {:<26} {:>12} {:>16}",
        "layer", "kind", "output", "params", "MACs"
    );
    for l in &report.layers {
        let shape = l
            .output_shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        println!(
            "{:<12} {:<10} {:<26} {:>12} {:>16}",
            l.name, l.kind, shape, l.params, l.macs
        );
    }
    println!(
        "total: {} params, {} MACs, {} FLOPs for input {:?}",
        millions(report.total_params as f64),
        millions(report.total_macs as f64),
        millions(report.total_flops as f64),
        input
    );
    finish(cfg.out.as_ref(), "report", &cfg, "report.json", &report)
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

pub(super) fn gradcheck(a: GradcheckArgs, _g: Globals) -> Result<()> {
    let mut cfg = base_config(a.config.as_ref(), "gradcheck", || {
        Ok(GradcheckConfig { seed: 3, out: None })
    })?;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    let report = gradient_suite(cfg.seed)?;
    println!(
        "{:<44} {:>12} {:>10} {:>8}",
        "gradient", "max rel err", "tolerance", "checked"
    );
    for e in &report.entries {
        let flag = if e.passed() { "" } else { "  FAIL" };
        println!(
            "{:<44} {:>12.3e} {:>10.0e} {:>8}{flag}",
            e.name, e.max_relative_error, e.tolerance, e.checked
        );
    }
    finish(
        cfg.out.as_ref(),
        "gradcheck",
        &cfg,
        "gradcheck.json",
        &report,
    )?;
    let failures = report.failures();
    if !failures.is_empty() {
        let names: Vec<&str> = failures.iter().map(|e| e.name.as_str()).collect();
        return Err(Error::Model(format!(
            "gradient check failed for {}",
            names.join(", ")
        )));
    }
    println!("all {} gradients within tolerance", report.entries.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EquivArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random direct-vs-decomposed configurations.
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivConfig {
    pub cases: usize,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn print_equivalence(r: &EquivalenceReport) {
    println!(
        "{:<12} {:>6} {:>18} {:>18}",
        "kernel", "cases", "max abs f64", "max rel f32"
    );
    for f in &r.forms {
        println!(
            "{:<12} {:>6} {:>18.3e} {:>18.3e}",
            f.form, f.cases, f.max_abs_f64, f.max_rel_f32
        );
    }
    println!("max |direct - decomposed| (f64) = {:.3e}", r.max_abs_f64);
    println!(
        "max |direct - decomposed| / max |direct| (f32) = {:.3e}",
        r.max_rel_f32
    );
    println!(
        "reference loop vs direct = {:.3e}, vs decomposed = {:.3e} ({} cases)",
        r.reference_vs_direct, r.reference_vs_decomposed, r.reference_cases
    );
    println!(
        "unit-only kernel vs dilated 3D = {:.3e} ({} cases)",
        r.dilated_vs_direct, r.dilated_cases
    );
}

pub(super) fn equiv(a: EquivArgs, _g: Globals) -> Result<()> {
    let mut cfg = base_config(a.config.as_ref(), "equiv", || {
        Ok(EquivConfig {
            cases: 100,
            seed: 0,
            out: None,
        })
    })?;
    cfg.cases = a.cases.unwrap_or(cfg.cases);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    let report = equivalence_suite(cfg.cases, cfg.seed)?;
    print_equivalence(&report);
    finish(cfg.out.as_ref(), "equiv", &cfg, "equiv.json", &report)?;
    if !report.passed() {
        return Err(Error::Model(
            "4D convolution routes disagree beyond tolerance".into(),
        ));
    }
    Ok(())
}
