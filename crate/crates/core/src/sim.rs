//! Synthetic urban worlds, trajectories and sensor data.
//!
//! A world is a lattice of roads with rectangular buildings and vegetation
//! blobs in the blocks between them. One horizontal road segment is always
//! flanked by two long buildings, forming a corridor where descriptors are
//! ambiguous along the road axis. Trajectories start at the far end of that
//! corridor, drive through it into an intersection and then wander along
//! road centerlines.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::descriptor::raycast::cast_ray_from;
use crate::error::{Error, Result};
use crate::geo_map::{
    refine_segmentation, AerialMap, ObstacleParams, SemanticLabel, DEFAULT_RESOLUTION,
};
use crate::grid::{CellPos, Grid, Point2};
use crate::ground::{GroundObservation, GroundPoint};
use crate::kv::KvFile;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldSpec {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    /// Target fraction of all cells covered by buildings.
    pub building_density: f64,
    /// Target fraction of all cells covered by vegetation.
    pub vegetation_density: f64,
    /// Distance between parallel road centerlines (cells).
    pub road_pitch: usize,
    /// Road width (cells).
    pub road_width: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            width: 300,
            height: 300,
            resolution: DEFAULT_RESOLUTION,
            building_density: 0.3,
            vegetation_density: 0.05,
            road_pitch: 75,
            road_width: 13,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::WorldTooSmall(format!(
                "{}x{} is below the 32x32 minimum",
                self.width, self.height
            )));
        }
        for (name, d) in [
            ("building_density", self.building_density),
            ("vegetation_density", self.vegetation_density),
        ] {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be in [0, 1], got {d}"
                )));
            }
        }
        if !(self.resolution > 0.0) {
            return Err(Error::InvalidParameter(
                "resolution must be positive".into(),
            ));
        }
        if self.road_width == 0 || self.road_pitch < self.road_width + 8 {
            return Err(Error::InvalidParameter(format!(
                "road_pitch {} leaves no room between roads of width {}",
                self.road_pitch, self.road_width
            )));
        }
        Ok(())
    }

    /// Parses `key = value` text; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let spec = Self::take(&mut kv)?;
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    fn take(kv: &mut KvFile) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            width: kv.take_or("width", d.width)?,
            height: kv.take_or("height", d.height)?,
            resolution: kv.take_or("resolution", d.resolution)?,
            building_density: kv.take_or("building_density", d.building_density)?,
            vegetation_density: kv.take_or("vegetation_density", d.vegetation_density)?,
            road_pitch: kv.take_or("road_pitch", d.road_pitch)?,
            road_width: kv.take_or("road_width", d.road_width)?,
            seed: kv.take_or("seed", d.seed)?,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "width = {}\nheight = {}\nresolution = {}\nbuilding_density = {}\nvegetation_density = {}\nroad_pitch = {}\nroad_width = {}\nseed = {}\n",
            self.width,
            self.height,
            self.resolution,
            self.building_density,
            self.vegetation_density,
            self.road_pitch,
            self.road_width,
            self.seed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Gaussian range noise (m).
    pub range_noise_std: f64,
    /// Probability that an emitted camera label is replaced by another label.
    pub label_flip_prob: f64,
    /// Heading drift of the odometry (deg per step).
    pub drift_rotation_deg: f64,
    /// Relative scale drift of the odometry per step.
    pub drift_scale: f64,
    /// Per-cell probability of swapping Grass and Vegetation after map capture.
    pub appearance_flip_prob: f64,
    /// Small obstacle blocks added after map capture.
    pub blocks_added: usize,
    /// Small patches of existing obstacles cleared after map capture.
    pub blocks_removed: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            range_noise_std: 0.1,
            label_flip_prob: 0.05,
            drift_rotation_deg: 0.02,
            drift_scale: 0.001,
            appearance_flip_prob: 0.0,
            blocks_added: 0,
            blocks_removed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            range_noise_std: 0.0,
            label_flip_prob: 0.0,
            drift_rotation_deg: 0.0,
            drift_scale: 0.0,
            appearance_flip_prob: 0.0,
            blocks_added: 0,
            blocks_removed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("label_flip_prob", self.label_flip_prob),
            ("appearance_flip_prob", self.appearance_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        if !(self.range_noise_std >= 0.0)
            || !(self.drift_scale > -1.0)
            || !self.drift_rotation_deg.is_finite()
        {
            return Err(Error::InvalidParameter(
                "noise magnitudes out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Simulated sensor geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorSpec {
    pub max_range: f64,
    pub camera_fov_deg: f64,
    pub azimuth_step_deg: f64,
    /// Spacing of ground returns along each beam (m).
    pub ground_spacing: f64,
    /// Labels sampled from the bottom of the camera image.
    pub bottom_labels: usize,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            max_range: 40.0,
            camera_fov_deg: 90.0,
            azimuth_step_deg: 1.0,
            ground_spacing: 1.0,
            bottom_labels: 20,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.max_range, self.azimuth_step_deg, self.ground_spacing];
        if positive.iter().any(|v| !(*v > 0.0))
            || !(self.camera_fov_deg > 0.0 && self.camera_fov_deg <= 360.0)
        {
            return Err(Error::InvalidParameter(
                "sensor geometry out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Everything `gen-world` needs: world layout, noise, sensor and run length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub world: WorldSpec,
    pub noise: NoiseSpec,
    pub sensor: SensorSpec,
    pub steps: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            noise: NoiseSpec::default(),
            sensor: SensorSpec::default(),
            steps: 60,
        }
    }
}

impl ScenarioSpec {
    /// One flat `key = value` file holding world, noise and sensor keys
    /// plus `steps`. `noise = none` starts from zero noise instead of the
    /// defaults; individual noise keys still override it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let world = WorldSpec::take(&mut kv)?;
        let base = match kv.take::<String>("noise")?.as_deref() {
            None | Some("default") => NoiseSpec::default(),
            Some("none") => NoiseSpec::none(),
            Some(other) => {
                return Err(Error::InvalidParameter(format!(
                    "noise must be none or default, got {other:?}"
                )))
            }
        };
        let noise = NoiseSpec {
            range_noise_std: kv.take_or("range_noise_std", base.range_noise_std)?,
            label_flip_prob: kv.take_or("label_flip_prob", base.label_flip_prob)?,
            drift_rotation_deg: kv.take_or("drift_rotation_deg", base.drift_rotation_deg)?,
            drift_scale: kv.take_or("drift_scale", base.drift_scale)?,
            appearance_flip_prob: kv.take_or("appearance_flip_prob", base.appearance_flip_prob)?,
            blocks_added: kv.take_or("blocks_added", base.blocks_added)?,
            blocks_removed: kv.take_or("blocks_removed", base.blocks_removed)?,
        };
        let d = SensorSpec::default();
        let sensor = SensorSpec {
            max_range: kv.take_or("max_range", d.max_range)?,
            camera_fov_deg: kv.take_or("camera_fov_deg", d.camera_fov_deg)?,
            azimuth_step_deg: kv.take_or("azimuth_step_deg", d.azimuth_step_deg)?,
            ground_spacing: kv.take_or("ground_spacing", d.ground_spacing)?,
            bottom_labels: kv.take_or("bottom_labels", d.bottom_labels)?,
        };
        let steps = kv.take_or("steps", 60usize)?;
        kv.finish()?;
        world.validate()?;
        noise.validate()?;
        sensor.validate()?;
        if steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        Ok(Self {
            world,
            noise,
            sensor,
            steps,
        })
    }
}

/// Horizontal road segment flanked by parallel buildings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corridor {
    pub y: usize,
    pub x_start: usize,
    pub x_end: usize,
}

impl Corridor {
    pub fn center(&self) -> CellPos {
        CellPos::new((self.x_start + self.x_end) / 2, self.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldInfo {
    /// x of vertical road centerlines.
    pub road_xs: Vec<usize>,
    /// y of horizontal road centerlines.
    pub road_ys: Vec<usize>,
    pub road_half_width: usize,
    pub corridor: Option<Corridor>,
}

impl WorldInfo {
    pub fn intersections(&self) -> Vec<CellPos> {
        self.road_ys
            .iter()
            .flat_map(|&y| self.road_xs.iter().map(move |&x| CellPos::new(x, y)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub map: AerialMap,
    pub info: WorldInfo,
}

fn road_centers(dim: usize, pitch: usize, half: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|k| pitch / 2 + k * pitch)
        .take_while(|&c| c + half < dim)
        .collect();
    if out.is_empty() {
        out.push(dim / 2);
    }
    out
}

struct Canvas {
    label: Grid<SemanticLabel>,
    elevation: Grid<f64>,
    /// Cells where nothing may be built.
    reserved: Grid<bool>,
}

impl Canvas {
    fn rect_free(&self, x0: usize, y0: usize, w: usize, h: usize, margin: usize) -> bool {
        let (gw, gh) = (self.label.width(), self.label.height());
        if x0 + w > gw || y0 + h > gh {
            return false;
        }
        let xa = x0.saturating_sub(margin);
        let ya = y0.saturating_sub(margin);
        let xb = (x0 + w + margin).min(gw);
        let yb = (y0 + h + margin).min(gh);
        (ya..yb).all(|y| {
            (xa..xb).all(|x| {
                let c = CellPos::new(x, y);
                !self.reserved[c] && self.label[c] == SemanticLabel::Grass
            })
        })
    }

    fn fill_rect(
        &mut self,
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        label: SemanticLabel,
        elevation: f64,
    ) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let c = CellPos::new(x, y);
                self.label[c] = label;
                self.elevation[c] = elevation;
            }
        }
    }
}

/// Builds a world; deterministic in `spec`.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let half = spec.road_width / 2;
    let road_xs = road_centers(w, spec.road_pitch, half);
    let road_ys = road_centers(h, spec.road_pitch, half);
    let near_road = |c: CellPos, extra: usize| {
        road_xs.iter().any(|&x| c.x.abs_diff(x) <= half + extra)
            || road_ys.iter().any(|&y| c.y.abs_diff(y) <= half + extra)
    };
    let mut canvas = Canvas {
        label: Grid::from_fn(w, h, |c| {
            if near_road(c, 0) {
                SemanticLabel::Road
            } else {
                SemanticLabel::Grass
            }
        }),
        elevation: Grid::filled(w, h, 0.0),
        reserved: Grid::from_fn(w, h, |c| near_road(c, 1)),
    };

    let mut corridor = None;
    if spec.building_density > 0.0 {
        let y = road_ys[0];
        let x_start = road_xs[0] + half + 1;
        let x_end = road_xs.get(1).map_or(w - 1, |&x| x - half - 1);
        if x_end < x_start + 24 {
            return Err(Error::WorldTooSmall(
                "no road segment long enough for a corridor".into(),
            ));
        }
        let depth = 8;
        let length = x_end - x_start - 3;
        let north = y.checked_sub(half + 2 + depth - 1);
        let south = y + half + 2;
        let (Some(north), true) = (north, south + depth <= h) else {
            return Err(Error::WorldTooSmall(
                "no room for corridor buildings".into(),
            ));
        };
        for row in [north, south] {
            let e = rng.gen_range(3.0..10.0);
            canvas.fill_rect(x_start + 2, row, length, depth, SemanticLabel::Building, e);
        }
        corridor = Some(Corridor { y, x_start, x_end });
    }

    let total = (w * h) as f64;
    let target = spec.building_density * total;
    let mut built = canvas
        .label
        .iter()
        .filter(|&&l| l == SemanticLabel::Building)
        .count() as f64;
    let mut attempts = 0;
    while built < target && attempts < 20_000 {
        attempts += 1;
        let bw = rng.gen_range(8..=30);
        let bh = rng.gen_range(8..=30);
        let x0 = rng.gen_range(0..w);
        let y0 = rng.gen_range(0..h);
        if canvas.rect_free(x0, y0, bw, bh, 2) {
            let e = rng.gen_range(3.0..10.0);
            canvas.fill_rect(x0, y0, bw, bh, SemanticLabel::Building, e);
            built += (bw * bh) as f64;
        }
    }

    let target = spec.vegetation_density * total;
    let mut grown = 0.0;
    let mut attempts = 0;
    while grown < target && attempts < 20_000 {
        attempts += 1;
        let r: i64 = rng.gen_range(3..=8);
        let cx = rng.gen_range(0..w) as i64;
        let cy = rng.gen_range(0..h) as i64;
        let e = rng.gen_range(2.0..4.0);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if (x - cx).pow(2) + (y - cy).pow(2) > r * r
                    || !canvas.label.contains(x as isize, y as isize)
                {
                    continue;
                }
                let c = CellPos::new(x as usize, y as usize);
                if !canvas.reserved[c] && canvas.label[c] == SemanticLabel::Grass {
                    canvas.label[c] = SemanticLabel::Vegetation;
                    canvas.elevation[c] = e;
                    grown += 1.0;
                }
            }
        }
    }

    let raw = AerialMap::from_dem(
        spec.resolution,
        canvas.elevation,
        canvas.label,
        &ObstacleParams::default(),
    )?;
    let (res, elevation, labels, obstacle) = raw.into_layers();
    let semantic = refine_segmentation(&labels, &obstacle)?;
    let map = AerialMap::new(res, elevation, semantic, obstacle)?;
    let info = WorldInfo {
        road_xs,
        road_ys,
        road_half_width: half,
        corridor,
    };
    if info.intersections().iter().any(|&c| !map.is_traversable(c)) {
        return Err(Error::Disconnected(
            "road network is not traversable".into(),
        ));
    }
    Ok(World { map, info })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub cell: CellPos,
    /// Direction the robot faces, counter-clockwise from +x (deg).
    pub heading_deg: f64,
}

fn heading_vec(heading_deg: f64) -> (i64, i64) {
    match (heading_deg.rem_euclid(360.0) / 90.0).round() as i64 % 4 {
        0 => (1, 0),
        1 => (0, 1),
        2 => (-1, 0),
        _ => (0, -1),
    }
}

/// Drives `n_steps` poses along road centerlines, at most 2 cells per step.
///
/// With a corridor the robot starts at its far end facing the first
/// intersection; otherwise it starts on the first intersection.
pub fn plan_trajectory<R: Rng + ?Sized>(
    world: &World,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<Pose>> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
    }
    let info = &world.info;
    let (w, h) = (world.map.width() as i64, world.map.height() as i64);
    let margin = 4i64;
    let (mut x, mut y, mut heading) = match info.corridor {
        Some(c) => (c.x_end as i64, c.y as i64, 180.0),
        None => (info.road_xs[0] as i64, info.road_ys[0] as i64, 0.0),
    };
    let start = CellPos::new(x as usize, y as usize);
    if !world.map.is_traversable(start) {
        return Err(Error::Disconnected(format!(
            "start cell {start:?} is not traversable"
        )));
    }
    let is_x = |v: i64| info.road_xs.iter().any(|&c| c as i64 == v);
    let is_y = |v: i64| info.road_ys.iter().any(|&c| c as i64 == v);
    let in_bounds = |x: i64, y: i64| x >= margin && y >= margin && x < w - margin && y < h - margin;
    let mut poses = Vec::with_capacity(n_steps);
    while poses.len() < n_steps {
        poses.push(Pose {
            cell: CellPos::new(x as usize, y as usize),
            heading_deg: heading,
        });
        if is_x(x) && is_y(y) {
            let reverse = (heading + 180.0f64).rem_euclid(360.0);
            let options: Vec<f64> = [0.0, 90.0, 180.0, 270.0]
                .into_iter()
                .filter(|&hd| hd != reverse)
                .filter(|&hd| {
                    let (dx, dy) = heading_vec(hd);
                    in_bounds(x + 2 * dx, y + 2 * dy)
                })
                .collect();
            heading = options.choose(rng).copied().unwrap_or(reverse);
        }
        let (dx, dy) = heading_vec(heading);
        if !in_bounds(x + 2 * dx, y + 2 * dy) {
            heading = (heading + 180.0f64).rem_euclid(360.0);
            continue;
        }
        // never jump over an intersection center
        let mut step = 2;
        for s in 1..=2 {
            if is_x(x + s * dx) && is_y(y + s * dy) {
                step = s;
                break;
            }
        }
        x += step * dx;
        y += step * dy;
    }
    Ok(poses)
}

fn flip_label<R: Rng + ?Sized>(truth: SemanticLabel, p: f64, rng: &mut R) -> SemanticLabel {
    if p > 0.0 && rng.gen_bool(p) {
        let others: Vec<SemanticLabel> = SemanticLabel::RAW
            .iter()
            .copied()
            .filter(|&l| l != truth)
            .collect();
        *others.choose(rng).expect("six raw labels")
    } else {
        truth
    }
}

/// One labeled scan from `pose` in `world`.
///
/// Each beam returns ground points every `ground_spacing` meters up to the
/// first obstacle cell, and one point on that obstacle at the noisy entry
/// distance. Camera labels are emitted for beams inside the field of view
/// that hit something.
pub fn simulate_scan<R: Rng + ?Sized>(
    world: &AerialMap,
    pose: &Pose,
    noise: &NoiseSpec,
    sensor: &SensorSpec,
    rng: &mut R,
) -> GroundObservation {
    let res = world.resolution();
    let origin = pose.cell;
    let base = world.elevation()[origin];
    let start = (origin.x as f64 + 0.5, origin.y as f64 + 0.5);
    let max_cells = sensor.max_range / res;
    let normal = Normal::new(0.0, noise.range_noise_std.max(0.0)).expect("non-negative std");
    let mut obs = GroundObservation::default();
    let n_beams = (360.0 / sensor.azimuth_step_deg).round() as usize;
    for k in 0..n_beams {
        let az = k as f64 * sensor.azimuth_step_deg;
        let world_angle = (pose.heading_deg + az).to_radians();
        let dir = (world_angle.cos(), world_angle.sin());
        let hit = cast_ray_from(world.obstacle(), start, dir, max_cells);
        let extent = match hit {
            Some(hit) => hit.entry * res,
            None => sensor.max_range,
        };
        let (s, c) = az.to_radians().sin_cos();
        let mut d = sensor.ground_spacing;
        while d < extent {
            let wx = start.0 + d / res * dir.0;
            let wy = start.1 + d / res * dir.1;
            match world
                .elevation()
                .get(wx.floor() as isize, wy.floor() as isize)
            {
                Some(e) => obs.points.push(GroundPoint::new(d * c, d * s, e - base)),
                None => break,
            }
            d += sensor.ground_spacing;
        }
        let Some(hit) = hit else { continue };
        let range = if noise.range_noise_std > 0.0 {
            (extent + normal.sample(rng)).max(0.0)
        } else {
            extent
        };
        obs.points.push(GroundPoint::new(
            range * c,
            range * s,
            world.elevation()[hit.cell] - base,
        ));
        let in_fov = {
            let a = crate::ground::wrap_deg(az);
            sensor.camera_fov_deg >= 360.0 || a.abs() <= sensor.camera_fov_deg / 2.0 + 1e-9
        };
        if in_fov {
            let truth = world.semantic()[hit.cell];
            obs.ray_labels.push((
                crate::ground::wrap_deg(az),
                flip_label(truth, noise.label_flip_prob, rng),
            ));
        }
    }
    for _ in 0..sensor.bottom_labels {
        let dx = rng.gen_range(-2i64..=2);
        let dy = rng.gen_range(-2i64..=2);
        let cell = CellPos::new(
            (origin.x as i64 + dx).clamp(0, world.width() as i64 - 1) as usize,
            (origin.y as i64 + dy).clamp(0, world.height() as i64 - 1) as usize,
        );
        let truth = world.semantic()[cell];
        obs.bottom_labels
            .push(flip_label(truth, noise.label_flip_prob, rng));
    }
    obs
}

/// Local odometry trajectory (m) for the true poses: heading and scale drift
/// accumulate per step, and the whole track is then placed in a random frame
/// by a similarity transform with scale in `[0.8, 1.25]`.
pub fn simulate_odometry<R: Rng + ?Sized>(
    poses: &[Pose],
    resolution: f64,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Vec<Point2> {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let scale = rng.gen_range(0.8..1.25);
    let offset = Point2::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0));
    let mut local = Vec::with_capacity(poses.len());
    let mut acc = Point2::default();
    for (t, p) in poses.iter().enumerate() {
        if t > 0 {
            let inc = (p.cell.center() - poses[t - 1].cell.center()) * resolution;
            let drift = (t as f64 * noise.drift_rotation_deg).to_radians();
            acc = acc + inc.rotated(drift) * (1.0 + noise.drift_scale).powi(t as i32);
        }
        local.push(acc);
    }
    local
        .into_iter()
        .map(|p| p.rotated(theta) * scale + offset)
        .collect()
}

/// The world as the robot finds it after the map was captured.
///
/// Grass and Vegetation swap per cell with `appearance_flip_prob`. Removed
/// blocks clear up to 3x3 obstacle cells on an obstacle boundary; added
/// blocks are isolated 1.5 m high obstacles of up to 3x3 cells placed 4 to
/// 20 cells from a protected cell. Protected cells and their 8-neighbors are
/// never changed.
pub fn inject_changes<R: Rng + ?Sized>(
    world: &AerialMap,
    noise: &NoiseSpec,
    protected: &[CellPos],
    rng: &mut R,
) -> Result<AerialMap> {
    noise.validate()?;
    let (res, mut elevation, mut semantic, mut obstacle) = world.clone().into_layers();
    let (w, h) = (semantic.width(), semantic.height());
    let mut keep = Grid::filled(w, h, false);
    for &c in protected {
        keep[c] = true;
        for n in keep.neighbors8(c).collect::<Vec<_>>() {
            keep[n] = true;
        }
    }
    if noise.appearance_flip_prob > 0.0 {
        for (c, _) in world.semantic().cells() {
            let flipped = match semantic[c] {
                SemanticLabel::Grass => SemanticLabel::Vegetation,
                SemanticLabel::Vegetation => SemanticLabel::Grass,
                _ => continue,
            };
            if rng.gen_bool(noise.appearance_flip_prob) {
                semantic[c] = flipped;
            }
        }
    }

    for _ in 0..noise.blocks_removed {
        let boundary: Vec<(CellPos, CellPos)> = obstacle
            .cells()
            .filter(|&(_, &o)| o)
            .filter_map(|(c, _)| {
                obstacle
                    .neighbors4(c)
                    .find(|&n| !obstacle[n])
                    .map(|n| (c, n))
            })
            .collect();
        let Some(&(c, open)) = boundary.choose(rng) else {
            break;
        };
        let ground = elevation[open];
        let (bw, bh) = (rng.gen_range(1..=3usize), rng.gen_range(1..=3usize));
        for y in c.y..(c.y + bh).min(h) {
            for x in c.x..(c.x + bw).min(w) {
                let p = CellPos::new(x, y);
                if obstacle[p] && !keep[p] {
                    obstacle[p] = false;
                    elevation[p] = ground;
                    semantic[p] = SemanticLabel::Grass;
                }
            }
        }
    }

    let mut added = 0;
    let mut attempts = 0;
    while added < noise.blocks_added && !protected.is_empty() && attempts < 10_000 {
        attempts += 1;
        let anchor = protected[rng.gen_range(0..protected.len())];
        let r = rng.gen_range(4.0..20.0);
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let x0 = (anchor.x as f64 + r * a.cos()).round() as isize;
        let y0 = (anchor.y as f64 + r * a.sin()).round() as isize;
        let (bw, bh) = (rng.gen_range(1..=3isize), rng.gen_range(1..=3isize));
        let clear = (y0 - 1..=y0 + bh).all(|y| {
            (x0 - 1..=x0 + bw).all(|x| {
                let inside = y >= y0 && y < y0 + bh && x >= x0 && x < x0 + bw;
                match obstacle.get(x, y) {
                    Some(&o) => !o && !(inside && keep[CellPos::new(x as usize, y as usize)]),
                    None => !inside,
                }
            })
        });
        if !clear {
            continue;
        }
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let p = CellPos::new(x as usize, y as usize);
                elevation[p] += 1.5;
                obstacle[p] = true;
                semantic[p] = SemanticLabel::Building;
            }
        }
        added += 1;
    }
    AerialMap::new(res, elevation, semantic, obstacle)
}

/// CSV `t,x,y,heading_deg` in cell coordinates.
pub fn write_poses_csv(poses: &[Pose]) -> String {
    let mut out = String::from("t,x,y,heading_deg\n");
    for (t, p) in poses.iter().enumerate() {
        writeln!(out, "{t},{},{},{}", p.cell.x, p.cell.y, p.heading_deg).unwrap();
    }
    out
}

pub fn parse_poses_csv(text: &str) -> Result<Vec<Pose>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::parse(i + 1, format!("bad pose row {line:?}"));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let [t, x, y, hd] = f.as_slice() else {
            return Err(bad());
        };
        if t.parse::<usize>().map_err(|_| bad())? != out.len() {
            return Err(bad());
        }
        out.push(Pose {
            cell: CellPos::new(x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?),
            heading_deg: hd.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Everything needed for one localization run.
#[derive(Clone, Debug)]
pub struct Scenario {
    /// World as captured from the air.
    pub world: World,
    /// World the robot drives through.
    pub actual: AerialMap,
    pub poses: Vec<Pose>,
    pub observations: Vec<GroundObservation>,
    /// Local trajectory (m).
    pub odometry: Vec<Point2>,
}

/// Independent generator for one stage of a scenario.
pub(crate) fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// Generates a world, a trajectory of `n_steps`, post-capture changes, scans
/// and odometry. `seed` drives everything except the world layout, which
/// comes from `spec.seed`.
pub fn simulate_scenario(
    spec: &WorldSpec,
    noise: &NoiseSpec,
    sensor: &SensorSpec,
    n_steps: usize,
    seed: u64,
) -> Result<Scenario> {
    noise.validate()?;
    sensor.validate()?;
    let world = generate_world(spec)?;
    simulate_in_world(world, noise, sensor, n_steps, seed)
}

pub fn simulate_in_world(
    world: World,
    noise: &NoiseSpec,
    sensor: &SensorSpec,
    n_steps: usize,
    seed: u64,
) -> Result<Scenario> {
    let poses = plan_trajectory(&world, n_steps, &mut stage_rng(seed, 1))?;
    let cells: Vec<CellPos> = poses.iter().map(|p| p.cell).collect();
    let actual = inject_changes(&world.map, noise, &cells, &mut stage_rng(seed, 2))?;
    let mut scan_rng = stage_rng(seed, 3);
    let observations = poses
        .iter()
        .enumerate()
        .map(|(t, p)| GroundObservation {
            t,
            ..simulate_scan(&actual, p, noise, sensor, &mut scan_rng)
        })
        .collect();
    let odometry = simulate_odometry(
        &poses,
        world.map.resolution(),
        noise,
        &mut stage_rng(seed, 4),
    );
    Ok(Scenario {
        world,
        actual,
        poses,
        observations,
        odometry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::procrustes;
    use crate::descriptor::{compute_descriptor, similarity, DescriptorParams};
    use crate::ground::{build_ground_descriptor, GroundParams};
    use std::collections::VecDeque;

    fn small(seed: u64) -> WorldSpec {
        WorldSpec {
            width: 160,
            height: 160,
            seed,
            ..Default::default()
        }
    }

    fn components(mask: &Grid<bool>) -> usize {
        let mut seen = Grid::filled(mask.width(), mask.height(), false);
        let mut n = 0;
        for (c, &m) in mask.cells() {
            if !m || seen[c] {
                continue;
            }
            n += 1;
            seen[c] = true;
            let mut q = VecDeque::from([c]);
            while let Some(p) = q.pop_front() {
                for nb in mask.neighbors8(p).collect::<Vec<_>>() {
                    if mask[nb] && !seen[nb] {
                        seen[nb] = true;
                        q.push_back(nb);
                    }
                }
            }
        }
        n
    }

    #[test]
    fn empty_world_is_flat_and_traversable() {
        let spec = WorldSpec {
            building_density: 0.0,
            vegetation_density: 0.0,
            ..small(1)
        };
        let w = generate_world(&spec).unwrap();
        assert!(w.map.obstacle().iter().all(|o| !o));
        assert!(w.map.elevation().iter().all(|&e| e == 0.0));
        assert!(w.info.corridor.is_none());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_world(&small(5)).unwrap(),
            generate_world(&small(5)).unwrap()
        );
        assert_ne!(
            generate_world(&small(5)).unwrap().map,
            generate_world(&small(6)).unwrap().map
        );
    }

    #[test]
    fn spec_validation_and_text() {
        assert!(matches!(
            generate_world(&WorldSpec {
                width: 20,
                ..small(0)
            }),
            Err(Error::WorldTooSmall(_))
        ));
        assert!(WorldSpec {
            building_density: 1.5,
            ..small(0)
        }
        .validate()
        .is_err());
        let spec = small(9);
        assert_eq!(WorldSpec::parse(&spec.to_text()).unwrap(), spec);
        assert!(WorldSpec::parse("colour = red\n").is_err());
    }

    #[test]
    fn too_narrow_for_a_corridor() {
        let spec = WorldSpec {
            width: 40,
            height: 40,
            road_pitch: 40,
            ..small(0)
        };
        assert!(matches!(
            generate_world(&spec),
            Err(Error::WorldTooSmall(_))
        ));
    }

    #[test]
    fn obstacle_fraction_envelope() {
        for seed in 0..20 {
            let w = generate_world(&WorldSpec {
                seed,
                ..Default::default()
            })
            .unwrap();
            let f = w.map.obstacle().iter().filter(|&&o| o).count() as f64 / (300.0 * 300.0);
            assert!((0.15..=0.45).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn corridor_is_flanked_by_buildings() {
        let w = generate_world(&small(2)).unwrap();
        let c = w.info.corridor.unwrap();
        let mid = c.center();
        let half = w.info.road_half_width;
        assert!(w.map.is_traversable(mid));
        let north = CellPos::new(mid.x, mid.y - half - 3);
        let south = CellPos::new(mid.x, mid.y + half + 3);
        assert_eq!(w.map.semantic()[north], SemanticLabel::Building);
        assert_eq!(w.map.semantic()[south], SemanticLabel::Building);
    }

    #[test]
    fn trajectory_contract() {
        let w = generate_world(&small(3)).unwrap();
        let one = plan_trajectory(&w, 1, &mut stage_rng(0, 1)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(w.map.semantic()[one[0].cell], SemanticLabel::Road);
        let poses = plan_trajectory(&w, 200, &mut stage_rng(0, 1)).unwrap();
        assert_eq!(poses.len(), 200);
        for p in &poses {
            assert!(w.map.is_traversable(p.cell));
            assert_eq!(p.heading_deg.rem_euclid(90.0), 0.0);
        }
        for pair in poses.windows(2) {
            assert!(pair[0].cell.center().distance(pair[1].cell.center()) <= 3.0);
        }
        let c = w.info.corridor.unwrap();
        assert!(poses
            .iter()
            .any(|p| p.cell.y == c.y && p.cell.x > c.x_start && p.cell.x < c.x_end));
        let crossings = w.info.intersections();
        assert!(poses.iter().any(|p| crossings.contains(&p.cell)));
        assert!(plan_trajectory(&w, 0, &mut stage_rng(0, 1)).is_err());
    }

    fn wall_world(distance_cells: usize) -> AerialMap {
        let obstacle = Grid::from_fn(200, 200, |c| c.x == 100 + distance_cells);
        let elevation = obstacle.map(|&o| if o { 5.0 } else { 0.0 });
        let semantic = obstacle.map(|&o| {
            if o {
                SemanticLabel::Building
            } else {
                SemanticLabel::Road
            }
        });
        AerialMap::new(0.34, elevation, semantic, obstacle).unwrap()
    }

    #[test]
    fn scan_of_open_field_stays_within_range() {
        let map = wall_world(150);
        let pose = Pose {
            cell: CellPos::new(100, 100),
            heading_deg: 0.0,
        };
        let obs = simulate_scan(
            &map,
            &pose,
            &NoiseSpec::none(),
            &SensorSpec::default(),
            &mut stage_rng(0, 3),
        );
        assert!(!obs.points.is_empty());
        assert!(obs
            .points
            .iter()
            .all(|p| p.x.hypot(p.y) <= 40.0 && p.h == 0.0));
        assert!(obs.ray_labels.is_empty());
    }

    #[test]
    fn wall_hit_points_lie_at_the_wall() {
        // the wall cell spans [10.03, 10.37) m from the robot cell center
        let map = wall_world(30);
        let pose = Pose {
            cell: CellPos::new(100, 100),
            heading_deg: 0.0,
        };
        let obs = simulate_scan(
            &map,
            &pose,
            &NoiseSpec::none(),
            &SensorSpec::default(),
            &mut stage_rng(0, 3),
        );
        let ahead = obs
            .points
            .iter()
            .find(|p| p.h > 0.0 && p.y.abs() < 1e-9)
            .unwrap();
        let wall = 29.5 * 0.34;
        assert!((ahead.x - wall).abs() <= 0.5 * 0.34 + 1e-9, "{}", ahead.x);
        // robot facing +y: the wall is to the right, at azimuth -90
        let pose = Pose {
            heading_deg: 90.0,
            ..pose
        };
        let obs = simulate_scan(
            &map,
            &pose,
            &NoiseSpec::none(),
            &SensorSpec::default(),
            &mut stage_rng(0, 3),
        );
        let right = obs
            .points
            .iter()
            .find(|p| p.h > 0.0 && p.x.abs() < 1e-9)
            .unwrap();
        assert!((right.y + wall).abs() <= 0.5 * 0.34 + 1e-9, "{}", right.y);
    }

    #[test]
    fn full_flip_changes_every_label() {
        let map = wall_world(30);
        let noise = NoiseSpec {
            label_flip_prob: 1.0,
            ..NoiseSpec::none()
        };
        let pose = Pose {
            cell: CellPos::new(100, 100),
            heading_deg: 0.0,
        };
        let obs = simulate_scan(
            &map,
            &pose,
            &noise,
            &SensorSpec::default(),
            &mut stage_rng(0, 3),
        );
        assert!(!obs.ray_labels.is_empty());
        assert!(obs
            .ray_labels
            .iter()
            .all(|(_, l)| *l != SemanticLabel::Building));
        assert!(obs.bottom_labels.iter().all(|l| *l != SemanticLabel::Road));
    }

    fn poses_of(cells: &[(usize, usize)]) -> Vec<Pose> {
        cells
            .iter()
            .map(|&(x, y)| Pose {
                cell: CellPos::new(x, y),
                heading_deg: 0.0,
            })
            .collect()
    }

    #[test]
    fn driftless_odometry_is_a_similarity_of_the_truth() {
        let poses = poses_of(&[(10, 10), (12, 10), (14, 10), (14, 12), (14, 14), (16, 14)]);
        let local = simulate_odometry(&poses, 0.34, &NoiseSpec::none(), &mut stage_rng(7, 4));
        let truth: Vec<Point2> = poses.iter().map(|p| p.cell.center()).collect();
        let t = procrustes(&truth, &local).unwrap();
        let resid: f64 = truth
            .iter()
            .zip(&local)
            .map(|(a, b)| t.apply(*a).distance(*b).powi(2))
            .sum();
        assert!(resid < 1e-6);
        assert!((0.8 * 0.34..1.25 * 0.34).contains(&t.scale));
        assert_eq!(
            simulate_odometry(&poses[..1], 0.34, &NoiseSpec::none(), &mut stage_rng(7, 4)).len(),
            1
        );
    }

    #[test]
    fn heading_drift_accumulates_linearly() {
        let cells: Vec<(usize, usize)> = (0..=100).map(|i| (i * 2, 0)).collect();
        let poses = poses_of(&cells);
        let noise = NoiseSpec {
            drift_rotation_deg: 0.1,
            ..NoiseSpec::none()
        };
        let drifted = simulate_odometry(&poses, 0.34, &noise, &mut stage_rng(1, 4));
        let clean = simulate_odometry(&poses, 0.34, &NoiseSpec::none(), &mut stage_rng(1, 4));
        let dir = |v: &[Point2]| {
            let d = v[100] - v[99];
            d.y.atan2(d.x).to_degrees()
        };
        let err = (dir(&drifted) - dir(&clean) + 540.0).rem_euclid(360.0) - 180.0;
        assert!((err - 10.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn no_changes_means_same_world() {
        let w = generate_world(&small(4)).unwrap();
        let out = inject_changes(&w.map, &NoiseSpec::none(), &[], &mut stage_rng(0, 2)).unwrap();
        assert_eq!(out, w.map);
    }

    #[test]
    fn added_block_is_one_new_component() {
        let w = generate_world(&small(4)).unwrap();
        let poses = plan_trajectory(&w, 60, &mut stage_rng(0, 1)).unwrap();
        let cells: Vec<CellPos> = poses.iter().map(|p| p.cell).collect();
        let before = components(w.map.obstacle());
        for k in 1..=5 {
            let noise = NoiseSpec {
                blocks_added: k,
                ..NoiseSpec::none()
            };
            let out = inject_changes(&w.map, &noise, &cells, &mut stage_rng(k as u64, 2)).unwrap();
            assert_eq!(components(out.obstacle()), before + k);
            for c in &cells {
                assert!(out.is_traversable(*c));
            }
            let changed: Vec<CellPos> = out
                .obstacle()
                .cells()
                .filter(|&(c, &o)| o != w.map.obstacle()[c])
                .map(|(c, _)| c)
                .collect();
            assert!(changed.len() <= 9 * k && !changed.is_empty());
        }
    }

    #[test]
    fn removals_clear_obstacle_cells_off_the_path() {
        let w = generate_world(&small(4)).unwrap();
        let noise = NoiseSpec {
            blocks_removed: 3,
            ..NoiseSpec::none()
        };
        let out = inject_changes(&w.map, &noise, &[], &mut stage_rng(0, 2)).unwrap();
        let cleared = w
            .map
            .obstacle()
            .iter()
            .zip(out.obstacle().iter())
            .filter(|(a, b)| **a && !**b)
            .count();
        assert!((1..=27).contains(&cleared));
        assert!(out
            .obstacle()
            .iter()
            .zip(w.map.obstacle().iter())
            .all(|(a, b)| !a || *b));
    }

    #[test]
    fn appearance_flips_swap_grass_and_vegetation_only() {
        let w = generate_world(&small(4)).unwrap();
        let noise = NoiseSpec {
            appearance_flip_prob: 1.0,
            ..NoiseSpec::none()
        };
        let out = inject_changes(&w.map, &noise, &[], &mut stage_rng(0, 2)).unwrap();
        assert_eq!(out.obstacle(), w.map.obstacle());
        assert_eq!(out.elevation(), w.map.elevation());
        for (c, &l) in w.map.semantic().cells() {
            let expected = match l {
                SemanticLabel::Grass => SemanticLabel::Vegetation,
                SemanticLabel::Vegetation => SemanticLabel::Grass,
                other => other,
            };
            assert_eq!(out.semantic()[c], expected);
        }
    }

    #[test]
    fn poses_csv_round_trip() {
        let poses = vec![
            Pose {
                cell: CellPos::new(3, 4),
                heading_deg: 90.0,
            },
            Pose {
                cell: CellPos::new(5, 4),
                heading_deg: 180.0,
            },
        ];
        let text = write_poses_csv(&poses);
        assert_eq!(text, "t,x,y,heading_deg\n0,3,4,90\n1,5,4,180\n");
        assert_eq!(parse_poses_csv(&text).unwrap(), poses);
    }

    #[test]
    fn noiseless_ground_descriptor_matches_aerial_descriptor() {
        let sensor = SensorSpec {
            camera_fov_deg: 360.0,
            ..Default::default()
        };
        let sc = simulate_scenario(&small(8), &NoiseSpec::none(), &sensor, 40, 8).unwrap();
        let dp = DescriptorParams::default();
        let gp = GroundParams {
            camera_fov_deg: 360.0,
            ..Default::default()
        };
        let map = &sc.world.map;
        for (pose, obs) in sc.poses.iter().zip(&sc.observations) {
            let ground = build_ground_descriptor(obs, &gp, &dp).unwrap();
            let aerial = compute_descriptor(
                map.obstacle(),
                map.resolution(),
                map.semantic(),
                pose.cell,
                &dp,
            )
            .unwrap();
            let best = similarity(&aerial, &aerial, &dp).unwrap();
            let s = (0..60)
                .map(|k| {
                    let r =
                        crate::descriptor::rotate_descriptor(&ground, k as f64 * 6.0, &dp).unwrap();
                    similarity(&r, &aerial, &dp).unwrap()
                })
                .fold(0.0, f64::max);
            assert!(s >= 0.9 * best, "pose {pose:?}: {s} < 0.9 * {best}");
        }
    }

    #[test]
    fn scenario_spec_parsing() {
        let s = ScenarioSpec::parse("width = 64\nheight = 80\nnoise = none\nblocks_added = 2\nsteps = 9\ncamera_fov_deg = 120\n").unwrap();
        assert_eq!((s.world.width, s.world.height, s.steps), (64, 80, 9));
        assert_eq!(
            s.noise,
            NoiseSpec {
                blocks_added: 2,
                ..NoiseSpec::none()
            }
        );
        assert_eq!(s.sensor.camera_fov_deg, 120.0);
        assert_eq!(ScenarioSpec::parse("").unwrap(), ScenarioSpec::default());
        for bad in [
            "noise = loud\n",
            "steps = 0\n",
            "wdith = 3\n",
            "camera_fov_deg = 0\n",
            "label_flip_prob = 2\n",
        ] {
            assert!(ScenarioSpec::parse(bad).is_err(), "{bad}");
        }
    }
}
