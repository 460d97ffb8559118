//! End-to-end localization runs, evaluation tables and heat maps.
//!
//! A run walks the observation sequence once. Each step builds the ground
//! descriptor, scores it against the aerial descriptor set, takes the best
//! cell as the independent estimate `x̂`, fits the local trajectory to past
//! independent estimates for the prior center `x̃`, and advances the particle
//! filter to get `x̄`. Online modes report `x̄`; full modes refit the
//! trajectory transform once the whole sequence is known and report `T(x_t)`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::alignment::{predict_prior, ransac_align, RansacParams, SimilarityTransform};
use crate::descriptor::{
    independent_estimate, score_field, AerialDescriptorSet, Channels, DescriptorParams, ScoreField,
    SurfaceMask,
};
use crate::error::{Error, Result};
use crate::geo_map::AerialMap;
use crate::grid::{CellPos, Grid, Point2};
use crate::ground::{
    build_ground_descriptor, predict_surface_refined, GroundObservation, GroundParams,
};
use crate::kv::KvFile;
use crate::particle::{FilterParams, ParticleFilter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Range,
    RangeFull,
    RangeSemantic,
    RangeSemanticFull,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Range,
        Mode::RangeFull,
        Mode::RangeSemantic,
        Mode::RangeSemanticFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Range => "range",
            Mode::RangeFull => "range-full",
            Mode::RangeSemantic => "range-semantic",
            Mode::RangeSemanticFull => "range-semantic-full",
        }
    }

    pub fn channels(self) -> Channels {
        match self {
            Mode::Range | Mode::RangeFull => Channels::Range,
            Mode::RangeSemantic | Mode::RangeSemanticFull => Channels::RangeSemantic,
        }
    }

    pub fn is_full(self) -> bool {
        matches!(self, Mode::RangeFull | Mode::RangeSemanticFull)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown mode {s:?}")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every tunable of a run except the mode and seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineSettings {
    pub descriptor: DescriptorParams,
    pub ground: GroundParams,
    pub filter: FilterParams,
    pub ransac: RansacParams,
    /// Zero out cells whose surface contradicts the predicted one.
    pub surface_mask: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            descriptor: DescriptorParams::default(),
            ground: GroundParams::default(),
            filter: FilterParams::default(),
            ransac: RansacParams::default(),
            surface_mask: true,
        }
    }
}

impl PipelineSettings {
    /// Restricts RANSAC to scales a metric trajectory can plausibly have on
    /// a map of `resolution` m/cell.
    pub fn with_metric_scale_bounds(mut self, resolution: f64) -> Self {
        self.ransac.scale_bounds = Some((0.5 / resolution, 2.0 / resolution));
        self
    }
}

/// Inputs of one run, all in memory.
#[derive(Clone, Copy, Debug)]
pub struct PipelineInputs<'a> {
    pub map: &'a AerialMap,
    pub descriptors: &'a AerialDescriptorSet,
    pub observations: &'a [GroundObservation],
    /// Local trajectory (any frame, any scale), one point per observation.
    pub trajectory: &'a [Point2],
}

/// Per-step quantities of an online pass, shared by the online and full
/// variants of a mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub channels: Channels,
    pub xbar: Vec<Point2>,
    pub xhat: Vec<Point2>,
    pub xtilde: Vec<Option<Point2>>,
    /// Transform used for each prior, when one was available.
    pub transforms: Vec<Option<SimilarityTransform>>,
    pub score_seconds: f64,
    pub total_seconds: f64,
    width: usize,
    height: usize,
    seed: u64,
}

fn check_inputs(inputs: &PipelineInputs<'_>, settings: &PipelineSettings) -> Result<()> {
    if inputs.observations.is_empty() {
        return Err(Error::EmptyInput("no observations"));
    }
    if inputs.observations.len() != inputs.trajectory.len() {
        return Err(Error::LengthMismatch(
            inputs.observations.len(),
            inputs.trajectory.len(),
        ));
    }
    if inputs.descriptors.n_lines() != settings.descriptor.n_lines {
        return Err(Error::LengthMismatch(
            inputs.descriptors.n_lines(),
            settings.descriptor.n_lines,
        ));
    }
    let (w, h) = inputs.descriptors.index().bounds();
    if w > inputs.map.width() || h > inputs.map.height() {
        return Err(Error::DimensionMismatch(
            "descriptor cells fall outside the map".into(),
        ));
    }
    Ok(())
}

/// Runs the online pipeline over the whole sequence.
pub fn run_trace(
    inputs: &PipelineInputs<'_>,
    settings: &PipelineSettings,
    channels: Channels,
    seed: u64,
) -> Result<Trace> {
    check_inputs(inputs, settings)?;
    let started = Instant::now();
    let map = inputs.map;
    let (w, h) = (map.width(), map.height());
    let mut filter = ParticleFilter::new(settings.filter, map.traversable().clone(), seed)?;
    let mut ransac_rng = crate::sim::stage_rng(seed, 5);
    let n = inputs.observations.len();
    let mut trace = Trace {
        channels,
        xbar: Vec::with_capacity(n),
        xhat: Vec::with_capacity(n),
        xtilde: Vec::with_capacity(n),
        transforms: Vec::with_capacity(n),
        score_seconds: 0.0,
        total_seconds: 0.0,
        width: w,
        height: h,
        seed,
    };
    for (t, obs) in inputs.observations.iter().enumerate() {
        let score_started = Instant::now();
        let field = score_observation(obs, map, inputs.descriptors, settings, channels)?;
        trace.score_seconds += score_started.elapsed().as_secs_f64();
        let xhat = independent_estimate(&field).map_or(Point2::default(), CellPos::center);

        let mut prior = None;
        let mut transform = None;
        if t >= settings.ransac.sample_size {
            match ransac_align(
                &trace.xhat,
                &inputs.trajectory[..t],
                &settings.ransac,
                &mut ransac_rng,
            ) {
                Ok(a) => {
                    prior = Some(predict_prior(&a.transform, inputs.trajectory[t], w, h));
                    transform = Some(a.transform);
                }
                Err(Error::NotLocalizable { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let xbar = filter.step(&field, prior)?;
        trace.xhat.push(xhat);
        trace.xbar.push(xbar);
        trace.xtilde.push(prior);
        trace.transforms.push(transform);
    }
    trace.total_seconds = started.elapsed().as_secs_f64();
    Ok(trace)
}

/// Score field of one observation, with the surface mask when enabled.
pub fn score_observation(
    obs: &GroundObservation,
    map: &AerialMap,
    descriptors: &AerialDescriptorSet,
    settings: &PipelineSettings,
    channels: Channels,
) -> Result<ScoreField> {
    let ground = build_ground_descriptor(obs, &settings.ground, &settings.descriptor)?;
    let mask = settings
        .surface_mask
        .then(|| predict_surface_refined(&obs.bottom_labels))
        .flatten()
        .map(|surface| SurfaceMask {
            surface,
            labels: map.semantic(),
        });
    score_field(&ground, descriptors, &settings.descriptor, channels, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    /// Reported position per step (cells).
    pub estimates: Vec<Point2>,
    pub xbar: Vec<Point2>,
    pub xhat: Vec<Point2>,
    pub xtilde: Vec<Option<Point2>>,
    pub transforms: Vec<Option<SimilarityTransform>>,
    /// Per-step distance to the truth (cells), when truth was given.
    pub errors_cells: Option<Vec<f64>>,
    pub resolution: f64,
    pub score_seconds: f64,
    pub total_seconds: f64,
}

impl RunReport {
    pub fn mean_error_cells(&self) -> Option<f64> {
        self.errors_cells
            .as_ref()
            .filter(|e| !e.is_empty())
            .map(|e| e.iter().sum::<f64>() / e.len() as f64)
    }

    pub fn mean_error_m(&self) -> Option<f64> {
        self.mean_error_cells().map(|e| e * self.resolution)
    }

    /// CSV `t,xbar_x,xbar_y,xhat_x,xhat_y,xtilde_x,xtilde_y`; the prior
    /// columns are empty before the first prior.
    pub fn estimate_log(&self) -> String {
        let mut out = String::from("t,xbar_x,xbar_y,xhat_x,xhat_y,xtilde_x,xtilde_y\n");
        for t in 0..self.xbar.len() {
            let (b, hat) = (self.xbar[t], self.xhat[t]);
            write!(out, "{t},{},{},{},{},", b.x, b.y, hat.x, hat.y).unwrap();
            match self.xtilde[t] {
                Some(p) => writeln!(out, "{},{}", p.x, p.y).unwrap(),
                None => out.push_str(",\n"),
            }
        }
        out
    }

    /// CSV `t,est_x,est_y,error_cells,error_m` of the reported positions.
    pub fn error_log(&self) -> String {
        let mut out = String::from("t,est_x,est_y,error_cells,error_m\n");
        for (t, p) in self.estimates.iter().enumerate() {
            write!(out, "{t},{},{}", p.x, p.y).unwrap();
            match &self.errors_cells {
                Some(e) => writeln!(out, ",{},{}", e[t], e[t] * self.resolution).unwrap(),
                None => out.push_str(",,\n"),
            }
        }
        out
    }

    pub fn transform_log(&self) -> String {
        transform_log(&self.transforms)
    }

    /// Writes `estimates.csv`, `transforms.csv`, `report.csv` and
    /// `summary.txt` into `dir`, creating it if needed.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("estimates.csv", self.estimate_log()),
            ("transforms.csv", self.transform_log()),
            ("report.csv", self.error_log()),
            ("summary.txt", self.summary()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// `key = value` summary read back by [`load_summary`].
    pub fn summary(&self) -> String {
        let mut out = format!(
            "mode = {}\nseed = {}\nsteps = {}\n",
            self.mode,
            self.seed,
            self.estimates.len()
        );
        if let (Some(c), Some(m)) = (self.mean_error_cells(), self.mean_error_m()) {
            writeln!(out, "mean_error_cells = {c}\nmean_error_m = {m}").unwrap();
        }
        out
    }
}

impl Trace {
    /// Report for the online or full variant of this trace's channels.
    ///
    /// The full variant refits the trajectory transform on all independent
    /// estimates and reports `T(x_t)` for every step. It fails with
    /// [`Error::NotLocalizable`] when no fit reaches the inlier minimum;
    /// the online variant fails the same way when no step ever had a prior.
    pub fn report(
        &self,
        full: bool,
        trajectory: &[Point2],
        ransac: &RansacParams,
        truth: Option<&[Point2]>,
        resolution: f64,
    ) -> Result<RunReport> {
        let mode = match (self.channels, full) {
            (Channels::Range, false) => Mode::Range,
            (Channels::Range, true) => Mode::RangeFull,
            (Channels::RangeSemantic, false) => Mode::RangeSemantic,
            (Channels::RangeSemantic, true) => Mode::RangeSemanticFull,
        };
        let estimates = if full {
            let mut rng = crate::sim::stage_rng(self.seed, 6);
            let a =
                ransac_align(&self.xhat, trajectory, ransac, &mut rng).map_err(|e| match e {
                    Error::InvalidParameter(_) => Error::NotLocalizable {
                        found: self.xhat.len(),
                        required: ransac.sample_size,
                    },
                    e => e,
                })?;
            trajectory
                .iter()
                .map(|&p| predict_prior(&a.transform, p, self.width, self.height))
                .collect()
        } else {
            if self.xtilde.iter().all(Option::is_none) {
                return Err(Error::NotLocalizable {
                    found: 0,
                    required: ransac.min_inliers,
                });
            }
            self.xbar.clone()
        };
        let errors_cells = match truth {
            Some(truth) => {
                if truth.len() != estimates.len() {
                    return Err(Error::LengthMismatch(truth.len(), estimates.len()));
                }
                Some(
                    estimates
                        .iter()
                        .zip(truth)
                        .map(|(e, t)| e.distance(*t))
                        .collect(),
                )
            }
            None => None,
        };
        Ok(RunReport {
            mode,
            seed: self.seed,
            estimates,
            xbar: self.xbar.clone(),
            xhat: self.xhat.clone(),
            xtilde: self.xtilde.clone(),
            transforms: self.transforms.clone(),
            errors_cells,
            resolution,
            score_seconds: self.score_seconds,
            total_seconds: self.total_seconds,
        })
    }

    /// CSV `t,theta_deg,scale,tx,ty` of the per-step transforms.
    pub fn transform_log(&self) -> String {
        transform_log(&self.transforms)
    }
}

fn transform_log(transforms: &[Option<SimilarityTransform>]) -> String {
    let rows: Vec<(usize, SimilarityTransform)> = transforms
        .iter()
        .enumerate()
        .filter_map(|(t, tr)| tr.map(|tr| (t, tr)))
        .collect();
    crate::alignment::write_transform_log(&rows)
}

/// One run of one mode.
pub fn localize(
    inputs: &PipelineInputs<'_>,
    settings: &PipelineSettings,
    mode: Mode,
    seed: u64,
    truth: Option<&[Point2]>,
) -> Result<RunReport> {
    let trace = run_trace(inputs, settings, mode.channels(), seed)?;
    trace.report(
        mode.is_full(),
        inputs.trajectory,
        &settings.ransac,
        truth,
        inputs.map.resolution(),
    )
}

/// Run configuration, read from `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub map: PathBuf,
    /// Precomputed descriptors; computed in memory when absent.
    pub cache: Option<PathBuf>,
    pub observations: PathBuf,
    pub trajectory: PathBuf,
    /// Ground-truth poses CSV for error reporting.
    pub truth: Option<PathBuf>,
    pub settings: PipelineSettings,
    pub seed: u64,
    pub iterations: usize,
}

impl RunConfig {
    /// Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let path = |kv: &mut KvFile, key: &str| -> Result<Option<PathBuf>> {
            Ok(kv.take::<PathBuf>(key)?.map(|p| base.join(p)))
        };
        let required = |p: Option<PathBuf>, key: &'static str| p.ok_or(Error::EmptyInput(key));
        let d = PipelineSettings::default();
        let mode: Mode = kv.take("mode")?.unwrap_or(Mode::RangeSemantic);
        let map = required(path(&mut kv, "map")?, "map")?;
        let cache = path(&mut kv, "cache")?;
        let observations = required(path(&mut kv, "observations")?, "observations")?;
        let trajectory = required(path(&mut kv, "trajectory")?, "trajectory")?;
        let truth = path(&mut kv, "truth")?;
        let descriptor = DescriptorParams {
            n_lines: kv.take_or("n_lines", d.descriptor.n_lines)?,
            max_range: kv.take_or("max_range", d.descriptor.max_range)?,
            range_tolerance: kv.take_or("range_tolerance", d.descriptor.range_tolerance)?,
        };
        let ground = GroundParams {
            grid_round: kv.take_or("grid_round", d.ground.grid_round)?,
            height_diff_threshold: kv
                .take_or("height_diff_threshold", d.ground.height_diff_threshold)?,
            camera_fov_deg: kv.take_or("camera_fov_deg", d.ground.camera_fov_deg)?,
            grid_resolution: d.ground.grid_resolution,
        };
        let filter = FilterParams {
            n_particles: kv.take_or("n_particles", d.filter.n_particles)?,
            lambda: kv.take_or("lambda", d.filter.lambda)?,
            sigma: kv.take_or("sigma", d.filter.sigma)?,
            reinit_radius: kv.take_or("reinit_radius", d.filter.reinit_radius)?,
            ..d.filter
        };
        let scale_bounds = match (
            kv.take::<f64>("ransac_scale_min")?,
            kv.take::<f64>("ransac_scale_max")?,
        ) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (None, None) => None,
            _ => {
                return Err(Error::InvalidParameter(
                    "give both ransac_scale_min and ransac_scale_max".into(),
                ))
            }
        };
        let ransac = RansacParams {
            iterations: kv.take_or("ransac_iterations", d.ransac.iterations)?,
            sample_size: kv.take_or("ransac_sample_size", d.ransac.sample_size)?,
            inlier_threshold: kv.take_or("inlier_threshold", d.ransac.inlier_threshold)?,
            min_inliers: kv.take_or("min_inliers", d.ransac.min_inliers)?,
            scale_bounds,
        };
        let surface_mask = kv.take_or("surface_mask", true)?;
        let seed = kv.take_or("seed", 0u64)?;
        let iterations = kv.take_or("iterations", 20usize)?;
        kv.finish()?;
        descriptor.validate()?;
        ground.validate()?;
        filter.validate()?;
        ransac.validate()?;
        if iterations == 0 {
            return Err(Error::InvalidParameter(
                "iterations must be at least 1".into(),
            ));
        }
        Ok(Self {
            mode,
            map,
            cache,
            observations,
            trajectory,
            truth,
            settings: PipelineSettings {
                descriptor,
                ground,
                filter,
                ransac,
                surface_mask,
            },
            seed,
            iterations,
        })
    }
}

/// Loads every input named by `config` and runs `config.iterations` runs
/// with seeds `seed, seed + 1, ...`.
pub fn run_pipeline(config: &RunConfig) -> Result<Vec<RunReport>> {
    let map = crate::geo_map::load_map(&config.map)?;
    let mut settings = config.settings;
    settings.ground.grid_resolution = map.resolution();
    if settings.ransac.scale_bounds.is_none() {
        settings = settings.with_metric_scale_bounds(map.resolution());
    }
    let descriptors = match &config.cache {
        Some(p) => crate::descriptor::load_descriptor_cache(p)?,
        None => crate::descriptor::build_aerial_descriptors(&map, &settings.descriptor)?,
    };
    let observations = crate::ground::load_observations(&config.observations)?;
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let trajectory = crate::alignment::parse_trajectory_csv(&read(&config.trajectory)?)?;
    let truth: Option<Vec<Point2>> = match &config.truth {
        Some(p) => Some(
            crate::sim::parse_poses_csv(&read(p)?)?
                .into_iter()
                .map(|p| p.cell.center())
                .collect(),
        ),
        None => None,
    };
    let inputs = PipelineInputs {
        map: &map,
        descriptors: &descriptors,
        observations: &observations,
        trajectory: &trajectory,
    };
    (0..config.iterations as u64)
        .into_par_iter()
        .map(|i| {
            localize(
                &inputs,
                &settings,
                config.mode,
                config.seed + i,
                truth.as_deref(),
            )
        })
        .collect()
}

/// Mean and standard error of per-run mean errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeStats {
    pub mode: Mode,
    pub runs: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Groups `(mode, mean error)` pairs by mode. Modes need at least two runs.
pub fn eval_runs(runs: &[(Mode, f64)]) -> Result<Vec<ModeStats>> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("no runs to evaluate"));
    }
    let mut out = Vec::new();
    for mode in Mode::ALL {
        let v: Vec<f64> = runs
            .iter()
            .filter(|(m, _)| *m == mode)
            .map(|(_, e)| *e)
            .collect();
        if v.is_empty() {
            continue;
        }
        if v.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "mode {mode} has a single run"
            )));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        out.push(ModeStats {
            mode,
            runs: v.len(),
            mean,
            stderr: (var / n).sqrt(),
        });
    }
    Ok(out)
}

/// Table with one column per mode, in the order range, range-full,
/// range-semantic, range-semantic-full. Missing modes are left empty.
pub fn eval_table_csv(stats: &[ModeStats]) -> String {
    let mut out = String::from("metric");
    for m in Mode::ALL {
        write!(out, ",{m}").unwrap();
    }
    out.push('\n');
    type Cell = fn(&ModeStats) -> String;
    let rows: [(&str, Cell); 3] = [
        ("mean_error_m", |s| format!("{:.3}", s.mean)),
        ("stderr_m", |s| format!("{:.3}", s.stderr)),
        ("runs", |s| s.runs.to_string()),
    ];
    for (name, cell) in rows {
        out.push_str(name);
        for m in Mode::ALL {
            out.push(',');
            if let Some(s) = stats.iter().find(|s| s.mode == m) {
                out.push_str(&cell(s));
            }
        }
        out.push('\n');
    }
    out
}

/// Reads `mode` and `mean_error_m` back from a run summary.
pub fn load_summary(text: &str) -> Result<(Mode, f64)> {
    let mut kv = KvFile::parse(text)?;
    let mode = kv
        .take("mode")?
        .ok_or(Error::EmptyInput("summary has no mode"))?;
    let err = kv
        .take("mean_error_m")?
        .ok_or(Error::EmptyInput("summary has no mean_error_m"))?;
    Ok((mode, err))
}

const GRAY: [u8; 3] = [128, 128, 128];
const PINK: [u8; 3] = [255, 105, 180];

/// Dark blue at 0 through cyan and yellow to red at 1.
fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [
        [0.0, 0.0, 139.0],
        [0.0, 255.0, 255.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|k| (a[k] + (b[k] - a[k]) * f).round() as u8)
}

/// Renders a score field over the map as a binary PPM. Row `y` of the map
/// is image row `y`.
pub fn render_heatmap(field: &ScoreField, map: &AerialMap, truth: Option<CellPos>) -> Vec<u8> {
    let (w, h) = (map.width(), map.height());
    let max = field.max();
    let mut pixels = Grid::from_fn(w, h, |c| {
        if !map.is_traversable(c) {
            GRAY
        } else {
            colormap(if max > 0.0 {
                field.score_at_cell(c) / max
            } else {
                0.0
            })
        }
    });
    if let Some(t) = truth {
        let radius = 6.0;
        for (c, px) in Grid::from_fn(w, h, |c| c).cells() {
            let d = px.center().distance(t.center());
            if (d - radius).abs() <= 0.75 {
                pixels[*px] = PINK;
            }
            let _ = c;
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in pixels.iter() {
        out.extend_from_slice(p);
    }
    out
}

pub fn export_heatmap(
    field: &ScoreField,
    map: &AerialMap,
    truth: Option<CellPos>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_heatmap(field, map, truth)).map_err(|e| Error::io(path, e))
}

/// Shape of the high-score region around the best cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionStats {
    pub cells: Vec<CellPos>,
    pub bbox_width: usize,
    pub bbox_height: usize,
}

impl RegionStats {
    /// Long side over short side of the bounding box.
    pub fn aspect_ratio(&self) -> f64 {
        let (a, b) = (
            self.bbox_width.max(self.bbox_height),
            self.bbox_width.min(self.bbox_height),
        );
        a as f64 / b as f64
    }

    /// Long side of the bounding box (cells).
    pub fn diameter(&self) -> usize {
        self.bbox_width.max(self.bbox_height)
    }
}

/// The 8-connected component containing the best cell among the top
/// `fraction` of scored cells.
pub fn top_score_region(field: &ScoreField, fraction: f64) -> Option<RegionStats> {
    let best = independent_estimate(field)?;
    let mut sorted: Vec<f64> = field.scores().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((field.len() as f64 * fraction).ceil() as usize).clamp(1, field.len());
    let cutoff = sorted[k - 1];
    let (w, h) = field.index().bounds();
    let top = Grid::from_fn(w, h, |c| {
        field.index().index_of(c).is_some() && field.score_at_cell(c) >= cutoff
    });
    let mut seen = Grid::filled(w, h, false);
    let mut stack = vec![best];
    seen[best] = true;
    let mut cells = Vec::new();
    while let Some(c) = stack.pop() {
        cells.push(c);
        for n in top.neighbors8(c).collect::<Vec<_>>() {
            if top[n] && !seen[n] {
                seen[n] = true;
                stack.push(n);
            }
        }
    }
    cells.sort_by_key(|c| (c.y, c.x));
    let (x0, x1) = cells
        .iter()
        .fold((usize::MAX, 0), |(a, b), c| (a.min(c.x), b.max(c.x)));
    let (y0, y1) = cells
        .iter()
        .fold((usize::MAX, 0), |(a, b), c| (a.min(c.y), b.max(c.y)));
    Some(RegionStats {
        cells,
        bbox_width: x1 - x0 + 1,
        bbox_height: y1 - y0 + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{build_aerial_descriptors, CellIndex};
    use crate::sim::{simulate_scenario, NoiseSpec, SensorSpec, WorldSpec};
    use std::sync::Arc;

    fn field_on(map: &AerialMap, score: impl Fn(CellPos) -> f64) -> ScoreField {
        let cells = map.traversable_cells();
        let scores = cells.iter().map(|&c| score(c)).collect();
        let n = cells.len();
        ScoreField::new(Arc::new(CellIndex::new(cells)), scores, vec![0; n], 6.0).unwrap()
    }

    fn flat_map(w: usize, h: usize, blocked: impl Fn(CellPos) -> bool) -> AerialMap {
        let obstacle = Grid::from_fn(w, h, blocked);
        let semantic = obstacle.map(|&o| {
            if o {
                crate::geo_map::SemanticLabel::Building
            } else {
                crate::geo_map::SemanticLabel::Road
            }
        });
        AerialMap::new(0.34, obstacle.map(|_| 0.0), semantic, obstacle).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("gps".parse::<Mode>().is_err());
        assert_eq!(Mode::RangeFull.channels(), Channels::Range);
        assert!(Mode::RangeSemanticFull.is_full() && !Mode::RangeSemantic.is_full());
    }

    #[test]
    fn eval_arithmetic() {
        let s = eval_runs(&[(Mode::Range, 4.0), (Mode::Range, 6.0)]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].mean, s[0].stderr), (5.0, 1.0));
        let same = eval_runs(&[(Mode::RangeSemantic, 3.5); 5]).unwrap();
        assert_eq!(same[0].stderr, 0.0);
        assert!(eval_runs(&[]).is_err());
        assert!(eval_runs(&[(Mode::Range, 1.0)]).is_err());
    }

    #[test]
    fn eval_table_layout() {
        let runs: Vec<(Mode, f64)> = Mode::ALL
            .iter()
            .flat_map(|&m| [(m, 1.0), (m, 3.0)])
            .collect();
        let table = eval_table_csv(&eval_runs(&runs).unwrap());
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(
            lines[0],
            "metric,range,range-full,range-semantic,range-semantic-full"
        );
        assert_eq!(lines[1], "mean_error_m,2.000,2.000,2.000,2.000");
        assert_eq!(lines[2], "stderr_m,1.000,1.000,1.000,1.000");
        assert_eq!(lines[3], "runs,2,2,2,2");
    }

    #[test]
    fn summary_round_trip() {
        let report = RunReport {
            mode: Mode::RangeFull,
            seed: 3,
            estimates: vec![Point2::new(1.0, 1.0)],
            xbar: vec![Point2::new(1.0, 1.0)],
            xhat: vec![Point2::new(2.0, 2.0)],
            xtilde: vec![None],
            transforms: vec![None],
            errors_cells: Some(vec![10.0]),
            resolution: 0.5,
            score_seconds: 0.0,
            total_seconds: 0.0,
        };
        assert_eq!(
            load_summary(&report.summary()).unwrap(),
            (Mode::RangeFull, 5.0)
        );
        assert_eq!(
            report.estimate_log(),
            "t,xbar_x,xbar_y,xhat_x,xhat_y,xtilde_x,xtilde_y\n0,1,1,2,2,,\n"
        );
        assert_eq!(
            report.error_log(),
            "t,est_x,est_y,error_cells,error_m\n0,1,1,10,5\n"
        );
    }

    #[test]
    fn uniform_heatmap_is_one_color() {
        let map = flat_map(8, 6, |c| c.x == 0);
        let field = field_on(&map, |_| 2.0);
        let img = render_heatmap(&field, &map, None);
        let header = b"P6\n8 6\n255\n";
        assert!(img.starts_with(header));
        let px: Vec<&[u8]> = img[header.len()..].chunks(3).collect();
        assert_eq!(px.len(), 48);
        for (i, p) in px.iter().enumerate() {
            let expected: &[u8] = if i % 8 == 0 { &GRAY } else { &[255, 0, 0] };
            assert_eq!(*p, expected);
        }
    }

    #[test]
    fn heatmap_colors_and_truth_marker() {
        assert_eq!(colormap(0.0), [0, 0, 139]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
        let map = flat_map(40, 40, |_| false);
        let field = field_on(&map, |c| c.x as f64);
        let img = render_heatmap(&field, &map, Some(CellPos::new(20, 20)));
        let off = b"P6\n40 40\n255\n".len();
        let at = |x: usize, y: usize| &img[off + 3 * (y * 40 + x)..off + 3 * (y * 40 + x) + 3];
        assert_eq!(at(26, 20), &PINK);
        assert_eq!(at(20, 14), &PINK);
        assert_eq!(at(0, 0), &[0, 0, 139]);
        assert_ne!(at(20, 20), &PINK);
    }

    #[test]
    fn top_region_shapes() {
        let map = flat_map(60, 60, |_| false);
        let line = field_on(&map, |c| {
            if c.y == 30 && (10..50).contains(&c.x) {
                5.0
            } else {
                1.0
            }
        });
        let r = top_score_region(&line, 0.01).unwrap();
        // the top 1% cutoff lands on the plateau, so all 40 tie in
        assert_eq!(r.cells.len(), 40);
        assert_eq!(r.aspect_ratio(), 40.0);
        let blob = field_on(&map, |c| {
            100.0 - c.center().distance(Point2::new(30.0, 30.0))
        });
        let r = top_score_region(&blob, 0.01).unwrap();
        assert!(r.diameter() <= 8 && r.aspect_ratio() < 1.5);
    }

    #[test]
    fn config_parsing() {
        let text = "mode = range-full\nmap = m.amap\nobservations = o.obs\ntrajectory = t.csv\nn_particles = 100\nseed = 4\n";
        let c = RunConfig::parse(text, Path::new("/data")).unwrap();
        assert_eq!(c.mode, Mode::RangeFull);
        assert_eq!(c.map, Path::new("/data/m.amap"));
        assert_eq!(c.cache, None);
        assert_eq!(c.settings.filter.n_particles, 100);
        assert_eq!((c.seed, c.iterations), (4, 20));
        assert!(RunConfig::parse("map = m\n", Path::new(".")).is_err());
        assert!(RunConfig::parse(&format!("{text}bogus = 1\n"), Path::new(".")).is_err());
        assert!(
            RunConfig::parse(&format!("{text}ransac_scale_min = 1\n"), Path::new(".")).is_err()
        );
    }

    fn tiny_scenario() -> (crate::sim::Scenario, AerialDescriptorSet, PipelineSettings) {
        let spec = WorldSpec {
            width: 120,
            height: 120,
            road_pitch: 60,
            seed: 2,
            ..Default::default()
        };
        let sc =
            simulate_scenario(&spec, &NoiseSpec::none(), &SensorSpec::default(), 12, 2).unwrap();
        let settings = PipelineSettings {
            filter: FilterParams {
                n_particles: 100,
                ..Default::default()
            },
            ..Default::default()
        }
        .with_metric_scale_bounds(sc.world.map.resolution());
        let set = build_aerial_descriptors(&sc.world.map, &settings.descriptor).unwrap();
        (sc, set, settings)
    }

    #[test]
    fn range_mode_ignores_labels() {
        let (sc, set, settings) = tiny_scenario();
        let mut relabeled = sc.observations[3].clone();
        for l in &mut relabeled.ray_labels {
            l.1 = crate::geo_map::SemanticLabel::Shadow;
        }
        let a = score_observation(
            &sc.observations[3],
            &sc.world.map,
            &set,
            &settings,
            Channels::Range,
        )
        .unwrap();
        let b =
            score_observation(&relabeled, &sc.world.map, &set, &settings, Channels::Range).unwrap();
        assert_eq!(a.scores(), b.scores());
        let c = score_observation(
            &relabeled,
            &sc.world.map,
            &set,
            &settings,
            Channels::RangeSemantic,
        )
        .unwrap();
        assert_ne!(a.scores(), c.scores());
    }

    #[test]
    fn runs_are_reproducible_and_full_lengths_match() {
        let (sc, set, settings) = tiny_scenario();
        let inputs = PipelineInputs {
            map: &sc.world.map,
            descriptors: &set,
            observations: &sc.observations,
            trajectory: &sc.odometry,
        };
        let truth: Vec<Point2> = sc.poses.iter().map(|p| p.cell.center()).collect();
        let a = run_trace(&inputs, &settings, Channels::RangeSemantic, 9).unwrap();
        let b = run_trace(&inputs, &settings, Channels::RangeSemantic, 9).unwrap();
        let ra = a
            .report(false, &sc.odometry, &settings.ransac, Some(&truth), 0.34)
            .unwrap();
        let rb = b
            .report(false, &sc.odometry, &settings.ransac, Some(&truth), 0.34)
            .unwrap();
        assert_eq!(ra.estimate_log(), rb.estimate_log());
        let full = a
            .report(true, &sc.odometry, &settings.ransac, Some(&truth), 0.34)
            .unwrap();
        assert_eq!(full.estimates.len(), sc.poses.len());
        assert!(full.errors_cells.unwrap().iter().all(|&e| e >= 0.0));
        assert!(a.transform_log().starts_with("t,theta_deg,scale,tx,ty\n"));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (sc, set, settings) = tiny_scenario();
        let inputs = PipelineInputs {
            map: &sc.world.map,
            descriptors: &set,
            observations: &sc.observations,
            trajectory: &sc.odometry[..3],
        };
        assert!(run_trace(&inputs, &settings, Channels::Range, 0).is_err());
        let other = PipelineSettings {
            descriptor: DescriptorParams {
                n_lines: 30,
                ..Default::default()
            },
            ..settings
        };
        let inputs = PipelineInputs {
            trajectory: &sc.odometry,
            ..inputs
        };
        assert!(matches!(
            run_trace(&inputs, &other, Channels::Range, 0),
            Err(Error::LengthMismatch(60, 30))
        ));
    }
}
