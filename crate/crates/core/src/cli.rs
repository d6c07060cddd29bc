//! Command-line entry points.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, PipelineConfig};
use crate::driver::{
    generate_data, levelset_problem, reconstruct_from_tbt, simulate, DataSet, LevelSetResult, Phase, Problem,
};
use crate::error::{Error, Result};
use crate::grid::{obstacle_mask, Mask, ScalarField};
use crate::io::{
    mask_field, read_history_csv, read_raw_field, sweep_norms, write_field, write_history_csv, write_sweep_norms_csv,
    write_trace_csv, FieldFormat, RunManifest,
};
use crate::levelset::{extract_shape, jaccard, Shape};
use crate::sensitivity::{clear_layer_fraction, sensitivity_maps};
use crate::tbt::{run_tbt, TbtResult, TbtState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dot-shape", version, about = "Transport-based shape reconstruction for diffuse optical tomography")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Shipped preset (exp1, exp2, exp3); default exp1.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Sweep count of the main phase of the command.
    #[arg(long, global = true)]
    pub sweeps: Option<usize>,
    /// TBT sweep count for `pipeline` and `levelset`.
    #[arg(long, global = true)]
    pub tbt_sweeps: Option<usize>,
    /// Extra snapshots every N TBT sweeps and every N level-set steps.
    #[arg(long, global = true)]
    pub snapshot_every: Option<usize>,
    /// Accepted for compatibility; every run is deterministic.
    #[arg(long, global = true)]
    pub seedless: bool,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Truth and background fields of the phantom.
    Phantom,
    /// Boundary trace of one source on the truth.
    Forward {
        #[arg(long, default_value_t = 0)]
        source: usize,
    },
    /// Windowed traces of all sources on the truth.
    Generate,
    /// Pixel reconstruction by transport-backtransport.
    Tbt,
    /// Level-set phase, from a saved TBT field or after a fresh TBT run.
    Levelset {
        /// `a_tbt.raw` written by the `tbt` command.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Data, TBT and level-set phases.
    Pipeline,
    /// Absorption sensitivity maps and clear-layer fractions.
    Sensitivity,
    /// Per-sweep norms from a saved residual history.
    Residuals {
        /// Directory holding `history.csv`.
        #[arg(long)]
        from: PathBuf,
    },
}

/// Parses `argv`, runs the command and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_CONFIG;
        }
        let pool = match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(p) => p,
            Err(e) => {
                eprintln!("error: cannot start {n} worker threads: {e}");
                return EXIT_CONFIG;
            }
        };
        return pool.install(|| finish(run(&cli)));
    }
    finish(run(&cli))
}

fn finish(r: Result<()>) -> i32 {
    match r {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_NUMERIC
            }
        }
    }
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), _) => parse_config(path)?,
        (None, Some(name)) => PipelineConfig::preset(name)?,
        (None, None) => PipelineConfig::preset("exp1")?,
    };
    if let Some(every) = c.snapshot_every {
        if every == 0 {
            return Err(Error::config("--snapshot-every", "must be positive"));
        }
        let tbt_sweeps = c.tbt_sweeps.unwrap_or(cfg.tbt.sweeps);
        cfg.tbt.snapshot_sweeps.extend((every..=tbt_sweeps).step_by(every));
        cfg.tbt.snapshot_sweeps.sort_unstable();
        cfg.tbt.snapshot_sweeps.dedup();
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Run<'a> {
    out: &'a Path,
    manifest: RunManifest,
    cfg: PipelineConfig,
}

impl<'a> Run<'a> {
    fn start(name: &str, cli: &'a Cli, cfg: PipelineConfig) -> Result<Self> {
        let out = cli.common.out.as_path();
        std::fs::create_dir_all(out)?;
        let manifest = RunManifest::new(name, &cfg)?;
        let mut run = Run { out, manifest, cfg };
        let cfg_path = out.join("config.json");
        std::fs::write(&cfg_path, run.cfg.to_json()? + "\n")?;
        run.manifest.add(out, &cfg_path, "config");
        Ok(run)
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn field(&mut self, field: &ScalarField, units: &str, path: PathBuf, kind: &str) -> Result<()> {
        for f in write_field(field, &self.cfg.grid, units, &path.with_extension("raw"), FieldFormat::Raw)? {
            self.manifest.add(self.out, &f, kind);
        }
        let pgm = path.with_extension("pgm");
        write_field(field, &self.cfg.grid, units, &pgm, FieldFormat::Pgm)?;
        self.manifest.add(self.out, &pgm, "preview");
        Ok(())
    }

    fn mask(&mut self, mask: &[bool], path: PathBuf, kind: &str) -> Result<()> {
        let f = mask_field(mask, &self.cfg.grid);
        self.field(&f, "indicator", path, kind)
    }

    fn file(&mut self, path: &Path, kind: &str) {
        self.manifest.add(self.out, path, kind);
    }

    fn time(&mut self, stage: &str, t: Instant) {
        self.manifest.timings.insert(stage.into(), t.elapsed().as_secs_f64());
    }

    /// Writes the manifest with the outcome and passes the outcome on.
    fn close(mut self, outcome: Result<()>) -> Result<()> {
        self.manifest.status = match &outcome {
            Ok(()) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
        self.manifest.write(self.out)?;
        outcome
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Residuals { from } = &cli.command {
        return residuals(from, &cli.common.out);
    }
    let mut cfg = load_config(&cli.common)?;
    let name = match &cli.command {
        Command::Phantom => "phantom",
        Command::Forward { .. } => "forward",
        Command::Generate => "generate",
        Command::Tbt => "tbt",
        Command::Levelset { .. } => "levelset",
        Command::Pipeline => "pipeline",
        Command::Sensitivity => "sensitivity",
        Command::Residuals { .. } => unreachable!(),
    };
    match &cli.command {
        Command::Tbt => {
            if let Some(n) = cli.common.sweeps.or(cli.common.tbt_sweeps) {
                cfg.tbt.sweeps = n;
            }
        }
        Command::Levelset { .. } | Command::Pipeline => {
            if let Some(n) = cli.common.sweeps {
                cfg.levelset.sweeps = n;
            }
            if let Some(n) = cli.common.tbt_sweeps {
                cfg.tbt.sweeps = n;
            }
        }
        _ => {}
    }
    if let (Some(every), Command::Levelset { .. } | Command::Pipeline) = (cli.common.snapshot_every, &cli.command) {
        let steps = cfg.levelset.sweeps * cfg.source_list()?.len();
        cfg.levelset.snapshot_steps.extend((every..=steps).step_by(every));
        cfg.levelset.snapshot_steps.sort_unstable();
        cfg.levelset.snapshot_steps.dedup();
    }
    let mut run = Run::start(name, cli, cfg)?;
    let outcome = match &cli.command {
        Command::Phantom => phantom(&mut run),
        Command::Forward { source } => forward(&mut run, *source),
        Command::Generate => generate(&mut run).map(|_| ()),
        Command::Tbt => tbt(&mut run).map(|_| ()),
        Command::Levelset { init } => levelset(&mut run, init.as_deref()),
        Command::Pipeline => levelset(&mut run, None),
        Command::Sensitivity => sensitivity(&mut run),
        Command::Residuals { .. } => unreachable!(),
    };
    run.close(outcome)
}

fn phantom(run: &mut Run) -> Result<()> {
    let truth = run.cfg.truth()?;
    let bg = run.cfg.background()?;
    let dir = run.dir("phantom")?;
    run.field(&truth.a, "1/cm", dir.join("truth_a"), "field")?;
    run.field(&truth.b, "1/cm", dir.join("truth_b"), "field")?;
    run.field(&bg.a, "1/cm", dir.join("background_a"), "field")?;
    run.mask(&truth.clear_mask, dir.join("clear_mask"), "mask")?;
    run.mask(&obstacle_mask(&run.cfg.phantom, &run.cfg.grid), dir.join("obstacle_mask"), "mask")?;
    Ok(())
}

fn forward(run: &mut Run, source: usize) -> Result<()> {
    let t = Instant::now();
    let problem = run.cfg.problem()?;
    if source >= problem.sources.len() {
        return Err(Error::config("--source", format!("index {source} out of range ({} sources)", problem.sources.len())));
    }
    let trace = simulate(&problem, &run.cfg.truth()?, source)?;
    let path = run.out.join(format!("trace_{source:02}.csv"));
    write_trace_csv(&trace, &path)?;
    run.file(&path, "trace");
    run.time("forward", t);
    Ok(())
}

fn generate(run: &mut Run) -> Result<(Problem, DataSet)> {
    let t = Instant::now();
    let problem = run.cfg.problem()?;
    let data = generate_data(&problem, &run.cfg.truth()?)?;
    let dir = run.dir("data")?;
    for (j, trace) in data.traces.iter().enumerate() {
        let path = dir.join(format!("trace_{j:02}.csv"));
        write_trace_csv(trace, &path)?;
        run.file(&path, "trace");
    }
    run.time("generate", t);
    Ok((problem, data))
}

fn tbt(run: &mut Run) -> Result<(Problem, DataSet, TbtResult)> {
    let (problem, data) = generate(run)?;
    let t = Instant::now();
    let result = run_tbt(&problem, &data, &run.cfg.tbt)?;
    run.time("tbt", t);
    let dir = run.dir("tbt")?;
    for (sweep, a) in &result.snapshots {
        run.field(a, "1/cm", dir.join(format!("a_tbt_sweep{sweep:03}")), "snapshot")?;
    }
    let a = result.state.absorption(&problem.background.a);
    run.field(&a, "1/cm", dir.join("a_tbt"), "field")?;
    if let Some(eta) = result.state.eta {
        run.manifest.derived.insert("tbt_eta".into(), serde_json::json!(eta));
    }
    let path = run.out.join("history.csv");
    write_history_csv(&result.state.log, &path)?;
    run.file(&path, "history");
    Ok((problem, data, result))
}

fn levelset(run: &mut Run, init: Option<&Path>) -> Result<()> {
    let (problem, data, tbt_result) = match init {
        Some(path) => {
            let (_, a) = read_raw_field(path)?;
            if a.nx != run.cfg.grid.nx || a.ny != run.cfg.grid.ny {
                return Err(Error::config("--init", "field does not match the configured grid"));
            }
            let (problem, data) = generate(run)?;
            let mut state = TbtState::new(&problem, &run.cfg.tbt);
            state.a_s.data = a.data.iter().zip(&problem.background.a.data).map(|(v, b)| v - b).collect();
            (problem, data, TbtResult { state, snapshots: Vec::new() })
        }
        None => tbt(run)?,
    };
    let t = Instant::now();
    let (phi0, ls) = reconstruct_from_tbt(&problem, &data, &tbt_result, &run.cfg.levelset)?;
    run.time("levelset", t);
    write_levelset(run, &problem, &tbt_result, &phi0, &ls)
}

fn write_levelset(run: &mut Run, problem: &Problem, tbt: &TbtResult, phi0: &ScalarField, ls: &LevelSetResult) -> Result<()> {
    let dir = run.dir("levelset")?;
    run.field(phi0, "1", dir.join("phi0"), "field")?;
    let lsp = levelset_problem(problem, &run.cfg.levelset)?;
    let shape0 = extract_shape(phi0, &lsp.grid);
    run.mask(&shape0.mask, dir.join("mask_init"), "mask")?;
    for (step, shape) in &ls.snapshots {
        run.mask(&shape.mask, dir.join(format!("mask_step{step:04}")), "snapshot")?;
    }
    run.field(&ls.state.phi, "1", dir.join("phi_final"), "field")?;
    run.field(&ls.state.a, "1/cm", dir.join("a_final"), "field")?;
    run.mask(&ls.shape.mask, run.out.join("final_mask"), "mask")?;
    if let Some(eta) = ls.state.eta {
        run.manifest.derived.insert("levelset_eta".into(), serde_json::json!(eta));
    }

    let history: Vec<_> = tbt.state.log.iter().chain(&ls.state.log).copied().collect();
    let path = run.out.join("history.csv");
    write_history_csv(&history, &path)?;
    if !run.manifest.files.iter().any(|f| f.path == "history.csv") {
        run.file(&path, "history");
    }
    let rows: Vec<(Phase, usize, f64)> =
        ls.sweep_norms.iter().enumerate().map(|(s, n)| (Phase::Levelset, s, *n)).collect();
    let path = run.out.join("levelset_sweep_norms.csv");
    write_sweep_norms_csv(&rows, &path)?;
    run.file(&path, "sweep-norms");

    let truth = obstacle_mask(&run.cfg.phantom, &run.cfg.grid);
    let summary = shape_summary(&ls.shape, &truth, &shape0);
    let path = run.out.join("shape.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
    run.file(&path, "summary");
    Ok(())
}

fn shape_summary(shape: &Shape, truth: &Mask, init: &Shape) -> serde_json::Value {
    let comps = |s: &Shape| -> Vec<serde_json::Value> {
        s.components
            .iter()
            .map(|c| serde_json::json!({"area_cells": c.area_cells, "centroid_cm": [c.centroid.0, c.centroid.1]}))
            .collect()
    };
    serde_json::json!({
        "components": comps(shape),
        "jaccard_vs_truth": jaccard(&shape.mask, truth),
        "initial_components": comps(init),
        "initial_jaccard_vs_truth": jaccard(&init.mask, truth),
    })
}

fn sensitivity(run: &mut Run) -> Result<()> {
    let sc = run
        .cfg
        .sensitivity
        .clone()
        .ok_or_else(|| Error::config("sensitivity", "config has no sensitivity section"))?;
    let tg = run.cfg.sensitivity_time().expect("sensitivity section present");
    let medium = run.cfg.background()?;
    let problem = run.cfg.problem()?;
    let t = Instant::now();
    let maps = sensitivity_maps(&medium, &problem.kernel, &problem.quad, &sc.source, &sc.requests, tg)?;
    run.time("sensitivity", t);
    let dir = run.dir("sensitivity")?;
    let mut csv = String::from("receiver_ix,receiver_iy,t_r,clear_layer_fraction\n");
    for map in &maps {
        let (ix, iy) = map.receiver;
        let stem = format!("map_r{ix:02}_{iy:02}_ms{:06}", (map.t_r * 1000.0).round() as u64);
        run.field(&map.field, "sensitivity", dir.join(stem), "sensitivity")?;
        let frac = clear_layer_fraction(&map.field, &medium.clear_mask)?;
        csv.push_str(&format!("{ix},{iy},{},{frac:e}\n", map.t_r));
    }
    let path = dir.join("clear_layer_fraction.csv");
    std::fs::write(&path, csv)?;
    run.file(&path, "table");
    Ok(())
}

fn residuals(from: &Path, out: &Path) -> Result<()> {
    let history = read_history_csv(&from.join("history.csv"))?;
    std::fs::create_dir_all(out)?;
    let rows = sweep_norms(&history);
    write_sweep_norms_csv(&rows, &out.join("sweep_norms.csv"))?;
    for (phase, sweep, norm) in rows {
        println!("{phase:?} sweep {sweep}: {norm:.6e}");
    }
    Ok(())
}
