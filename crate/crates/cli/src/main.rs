use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aerloc::descriptor::{
    build_aerial_descriptors, load_descriptor_cache, save_descriptor_cache, DescriptorParams,
    ScoreField,
};
use aerloc::geo_map::load_map;
use aerloc::grid::CellPos;
use aerloc::ground::{load_observations, write_observations};
use aerloc::harness::{
    eval_runs, eval_table_csv, export_heatmap, load_summary, run_pipeline, score_observation, Mode,
    PipelineSettings, RunConfig,
};
use aerloc::sim::{simulate_scenario, write_poses_csv, ScenarioSpec};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

/// Localize a ground robot on a semantic aerial map without GPS.
#[derive(Parser)]
#[command(name = "aerloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DescriptorArgs {
    /// Scan lines per descriptor.
    #[arg(long, default_value_t = 60)]
    n_lines: usize,
    /// Maximum scan range (m).
    #[arg(long, default_value_t = 40.0)]
    max_range: f64,
    /// Range match tolerance (m).
    #[arg(long, default_value_t = 4.0)]
    range_tolerance: f64,
}

impl DescriptorArgs {
    fn params(&self) -> aerloc::Result<DescriptorParams> {
        let p = DescriptorParams {
            n_lines: self.n_lines,
            max_range: self.max_range,
            range_tolerance: self.range_tolerance,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    map: PathBuf,
    /// Precomputed descriptors; computed from the map when absent.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    observations: PathBuf,
    /// Observation time step to score.
    #[arg(long, default_value_t = 0)]
    step: usize,
    #[arg(long, default_value = "range-semantic")]
    mode: Mode,
    /// Skip the surface-type mask.
    #[arg(long)]
    no_surface_mask: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    descriptor: DescriptorArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world, a trajectory through it and its sensor data.
    GenWorld {
        /// Scenario spec (key = value); an empty file gives the defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the descriptor of every traversable map cell and store it.
    Precompute {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        descriptor: DescriptorArgs,
    },
    /// Run the localization pipeline described by a config file.
    Localize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate mean error and standard error per mode over run summaries.
    Eval {
        /// Directory searched recursively for summary.txt files.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a score field CSV over its map as a PPM image.
    Heatmap {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Truth cell to circle, as `x,y`.
        #[arg(long, value_parser = parse_cell)]
        truth: Option<CellPos>,
        #[arg(long, default_value_t = 60)]
        n_lines: usize,
    },
    /// Score one observation against the map and write the field as CSV.
    Score(ScoreArgs),
}

fn parse_cell(s: &str) -> Result<CellPos, String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok(CellPos::new(parse(x)?, parse(y)?))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_world(spec: &Path, seed: u64, out: &Path) -> anyhow::Result<()> {
    let text =
        std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let mut spec = ScenarioSpec::parse(&text).context("parsing scenario spec")?;
    spec.world.seed = seed;
    let sc = simulate_scenario(&spec.world, &spec.noise, &spec.sensor, spec.steps, seed)?;
    create_dir(out)?;
    sc.world.map.save(out.join("map.amap"))?;
    write(
        &out.join("observations.obs"),
        write_observations(&sc.observations),
    )?;
    write(
        &out.join("trajectory.csv"),
        aerloc::alignment::write_trajectory_csv(&sc.odometry),
    )?;
    write(&out.join("truth.csv"), write_poses_csv(&sc.poses))?;
    write(
        &out.join("run.cfg"),
        format!(
            "mode = range-semantic\nmap = map.amap\nobservations = observations.obs\ntrajectory = trajectory.csv\ntruth = truth.csv\nseed = {seed}\niterations = 20\ncamera_fov_deg = {}\nmax_range = {}\n",
            spec.sensor.camera_fov_deg, spec.sensor.max_range
        ),
    )?;
    eprintln!(
        "{}x{} world, {} steps written to {}",
        sc.world.map.width(),
        sc.world.map.height(),
        sc.poses.len(),
        out.display()
    );
    Ok(())
}

fn precompute(map: &Path, out: &Path, params: &DescriptorParams) -> anyhow::Result<()> {
    let map = load_map(map)?;
    let started = std::time::Instant::now();
    let set = build_aerial_descriptors(&map, params)?;
    save_descriptor_cache(&set, out)?;
    eprintln!(
        "{} cells x {} lines in {:.2} s",
        set.len(),
        set.n_lines(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn localize(config: &Path, out: &Path) -> anyhow::Result<()> {
    let text =
        std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let config = RunConfig::parse(&text, base).context("parsing run config")?;
    let reports = run_pipeline(&config)?;
    for r in &reports {
        r.write_to(out.join(format!("{}-seed{}", r.mode, r.seed)))?;
        match r.mean_error_m() {
            Some(e) => eprintln!(
                "{} seed {}: mean error {e:.3} m, scoring {:.2} s of {:.2} s",
                r.mode, r.seed, r.score_seconds, r.total_seconds
            ),
            None => eprintln!(
                "{} seed {}: done in {:.2} s",
                r.mode, r.seed, r.total_seconds
            ),
        }
    }
    Ok(())
}

fn eval(runs: &Path, out: &Path) -> anyhow::Result<()> {
    let mut results = Vec::new();
    for entry in walkdir::WalkDir::new(runs).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", runs.display()))?;
        if entry.file_name() == "summary.txt" {
            let text = std::fs::read_to_string(entry.path())
                .with_context(|| format!("reading {}", entry.path().display()))?;
            results.push(
                load_summary(&text).with_context(|| format!("in {}", entry.path().display()))?,
            );
        }
    }
    let table = eval_table_csv(&eval_runs(&results)?);
    write(out, &table)?;
    print!("{table}");
    Ok(())
}

fn score(args: &ScoreArgs) -> anyhow::Result<()> {
    let params = args.descriptor.params()?;
    let map = load_map(&args.map)?;
    let set = match &args.cache {
        Some(c) => load_descriptor_cache(c)?,
        None => build_aerial_descriptors(&map, &params)?,
    };
    let observations = load_observations(&args.observations)?;
    let obs = observations
        .iter()
        .find(|o| o.t == args.step)
        .ok_or_else(|| {
            aerloc::Error::InvalidParameter(format!("no observation at step {}", args.step))
        })?;
    let mut settings = PipelineSettings {
        descriptor: params,
        surface_mask: !args.no_surface_mask,
        ..Default::default()
    };
    settings.ground.grid_resolution = map.resolution();
    let field = score_observation(obs, &map, &set, &settings, args.mode.channels())?;
    write(&args.out, field.to_csv())
}

fn heatmap(
    field: &Path,
    map: &Path,
    out: &Path,
    truth: Option<CellPos>,
    n_lines: usize,
) -> anyhow::Result<()> {
    let map = load_map(map)?;
    let text =
        std::fs::read_to_string(field).with_context(|| format!("reading {}", field.display()))?;
    let field = ScoreField::from_csv(&text, 360.0 / n_lines as f64)?;
    if let Some(t) = truth {
        if t.x >= map.width() || t.y >= map.height() {
            return Err(aerloc::Error::InvalidParameter(format!(
                "truth cell {},{} is off the map",
                t.x, t.y
            ))
            .into());
        }
    }
    export_heatmap(&field, &map, truth, out)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenWorld { spec, seed, out } => gen_world(&spec, seed, &out),
        Command::Precompute {
            map,
            out,
            descriptor,
        } => precompute(&map, &out, &descriptor.params()?),
        Command::Localize { config, out } => localize(&config, &out),
        Command::Eval { runs, out } => eval(&runs, &out),
        Command::Heatmap {
            field,
            map,
            out,
            truth,
            n_lines,
        } => {
            if n_lines == 0 {
                return Err(anyhow!(aerloc::Error::InvalidParameter(
                    "n_lines must be positive".into()
                )));
            }
            heatmap(&field, &map, &out, truth, n_lines)
        }
        Command::Score(args) => score(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let not_localizable = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<aerloc::Error>(),
                    Some(aerloc::Error::NotLocalizable { .. })
                )
            });
            ExitCode::from(if not_localizable { 3 } else { 2 })
        }
    }
}
