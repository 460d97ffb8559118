//! Ground-side descriptor construction from a labeled point cloud.
//!
//! Points are snapped to a 0.1 m lattice, triangulated in the xy plane, and a
//! point becomes an obstacle when it stands more than 0.2 m above one of its
//! Delaunay neighbors. Obstacle points are rasterized into a robot-centered
//! grid with the map's resolution, and that grid goes through the same ray
//! casting as the aerial map.
//!
//! # Observation file format
//!
//! ```text
//! OBS t=<k>
//! P <x> <y> <h>          point in the robot frame (m)
//! L <azimuth_deg> <code> semantic label seen along an azimuth
//! B <code>               label from the bottom of the camera image
//! ```
//!
//! A sequence file concatenates one record per timestep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use spade::{DelaunayTriangulation, Point2 as SpadePoint, Triangulation};

use crate::descriptor::{scan_lines, Descriptor, DescriptorParams, Surface};
use crate::error::{Error, Result};
use crate::geo_map::{refine_label, SemanticLabel, DEFAULT_RESOLUTION};
use crate::grid::{CellPos, Grid};

/// A LiDAR return in the robot frame: `x` forward, `y` left, `h` up (m).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundPoint {
    pub x: f64,
    pub y: f64,
    pub h: f64,
}

impl GroundPoint {
    pub const fn new(x: f64, y: f64, h: f64) -> Self {
        Self { x, y, h }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundObservation {
    pub t: usize,
    pub points: Vec<GroundPoint>,
    /// `(azimuth_deg, label)` pairs, only for azimuths inside the camera FOV.
    pub ray_labels: Vec<(f64, SemanticLabel)>,
    /// Labels from the bottom portion of the camera image.
    pub bottom_labels: Vec<SemanticLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundParams {
    /// Lattice spacing for point downsampling (m).
    pub grid_round: f64,
    /// A point is an obstacle when it is higher than a neighbor by more than this (m).
    pub height_diff_threshold: f64,
    /// Horizontal camera field of view, centered on +x (deg).
    pub camera_fov_deg: f64,
    /// Cell size of the local obstacle grid; should match the aerial map.
    pub grid_resolution: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            grid_round: 0.1,
            height_diff_threshold: 0.2,
            camera_fov_deg: 90.0,
            grid_resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl GroundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_round > 0.0
            && self.height_diff_threshold > 0.0
            && self.grid_resolution > 0.0)
        {
            return Err(Error::InvalidParameter(
                "ground thresholds must be positive".into(),
            ));
        }
        if !(self.camera_fov_deg > 0.0 && self.camera_fov_deg <= 360.0) {
            return Err(Error::InvalidParameter(format!(
                "camera_fov_deg must be in (0, 360], got {}",
                self.camera_fov_deg
            )));
        }
        Ok(())
    }

    /// Whether a robot-frame azimuth lies inside the camera field of view.
    pub fn in_fov(&self, azimuth_deg: f64) -> bool {
        self.camera_fov_deg >= 360.0
            || wrap_deg(azimuth_deg).abs() <= self.camera_fov_deg / 2.0 + 1e-9
    }
}

/// Wraps an angle into `(-180, 180]`.
pub fn wrap_deg(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

fn lattice_key(p: &GroundPoint, step: f64) -> (i64, i64) {
    ((p.x / step).round() as i64, (p.y / step).round() as i64)
}

/// Snaps x and y to the `grid_round` lattice and merges points that land on
/// the same node, keeping the largest height. Output is sorted by (x, y).
pub fn downsample_points(points: &[GroundPoint], params: &GroundParams) -> Vec<GroundPoint> {
    let mut nodes: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for p in points {
        let h = nodes
            .entry(lattice_key(p, params.grid_round))
            .or_insert(f64::NEG_INFINITY);
        *h = h.max(p.h);
    }
    nodes
        .into_iter()
        .map(|((kx, ky), h)| {
            GroundPoint::new(
                kx as f64 * params.grid_round,
                ky as f64 * params.grid_round,
                h,
            )
        })
        .collect()
}

/// Flags each point that is higher than some Delaunay neighbor by strictly
/// more than `height_diff_threshold`.
///
/// Triangulation runs on lattice coordinates, so inputs are expected to be
/// the output of [`downsample_points`]. Fewer than three points, or a
/// collinear set, yields no obstacles.
pub fn detect_obstacles_delaunay(points: &[GroundPoint], params: &GroundParams) -> Vec<bool> {
    let mut flags = vec![false; points.len()];
    if points.len() < 3 {
        return flags;
    }
    let mut tri: DelaunayTriangulation<SpadePoint<f64>> = DelaunayTriangulation::new();
    // vertex index -> input indices at that position
    let mut owners: Vec<Vec<usize>> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let (kx, ky) = lattice_key(p, params.grid_round);
        let Ok(handle) = tri.insert(SpadePoint::new(kx as f64, ky as f64)) else {
            continue;
        };
        let v = handle.index();
        if v == owners.len() {
            owners.push(Vec::new());
        }
        owners[v].push(i);
    }
    if tri.num_inner_faces() == 0 {
        return flags;
    }
    let height = |v: usize| {
        owners[v]
            .iter()
            .map(|&i| points[i].h)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    for edge in tri.undirected_edges() {
        let [a, b] = edge.vertices().map(|v| v.fix().index());
        let (ha, hb) = (height(a), height(b));
        if ha - hb > params.height_diff_threshold {
            for &i in &owners[a] {
                flags[i] = true;
            }
        }
        if hb - ha > params.height_diff_threshold {
            for &i in &owners[b] {
                flags[i] = true;
            }
        }
    }
    flags
}

/// Robot-centered obstacle raster. The robot sits at the center of `center`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalObstacleGrid {
    pub grid: Grid<bool>,
    pub resolution: f64,
    pub center: CellPos,
}

/// Rasterizes obstacle points into a square grid covering `±max_range`.
pub fn build_ground_obstacle_grid(
    obstacle_points: &[GroundPoint],
    resolution: f64,
    max_range: f64,
) -> Result<LocalObstacleGrid> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    let half = (max_range / resolution).ceil() as i64;
    let size = (2 * half + 1) as usize;
    let mut grid = Grid::filled(size, size, false);
    for p in obstacle_points {
        if p.x.abs() > max_range || p.y.abs() > max_range {
            continue;
        }
        let cx = half + (p.x / resolution).round() as i64;
        let cy = half + (p.y / resolution).round() as i64;
        if let Some(cell) = grid
            .get(cx as isize, cy as isize)
            .map(|_| CellPos::new(cx as usize, cy as usize))
        {
            grid[cell] = true;
        }
    }
    let center = CellPos::new(half as usize, half as usize);
    grid[center] = false;
    Ok(LocalObstacleGrid {
        grid,
        resolution,
        center,
    })
}

/// Label recorded along the azimuth nearest to `azimuth_deg`, if one lies
/// within `tolerance_deg`.
fn label_near(
    labels: &[(f64, SemanticLabel)],
    azimuth_deg: f64,
    tolerance_deg: f64,
) -> Option<SemanticLabel> {
    labels
        .iter()
        .map(|&(a, l)| (wrap_deg(a - azimuth_deg).abs(), l))
        .filter(|(d, _)| *d <= tolerance_deg)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, l)| l)
}

/// Ground descriptor for one observation.
///
/// Ranges come from ray casting the local obstacle grid. A scan line carries
/// a semantic label only when it hit an obstacle and its azimuth is inside
/// the camera field of view; that label is refined as an obstacle label
/// (roads read as buildings, grass as vegetation).
pub fn build_ground_descriptor(
    obs: &GroundObservation,
    gparams: &GroundParams,
    dparams: &DescriptorParams,
) -> Result<Descriptor> {
    gparams.validate()?;
    dparams.validate()?;
    let points = downsample_points(&obs.points, gparams);
    let flags = detect_obstacles_delaunay(&points, gparams);
    let obstacles: Vec<GroundPoint> = points
        .iter()
        .zip(&flags)
        .filter_map(|(p, &f)| f.then_some(*p))
        .collect();
    let local = build_ground_obstacle_grid(&obstacles, gparams.grid_resolution, dparams.max_range)?;
    let step = dparams.angle_step_deg();
    let mut d = Descriptor::invalid(dparams.n_lines);
    for (i, hit) in scan_lines(&local.grid, local.resolution, local.center, dparams)
        .into_iter()
        .enumerate()
    {
        let Some((range, _)) = hit else { continue };
        d.ranges[i] = Some(range);
        let azimuth = i as f64 * step;
        if gparams.in_fov(azimuth) {
            if let Some(l) = label_near(&obs.ray_labels, azimuth, step / 2.0) {
                d.labels[i] = refine_label(l, true);
            }
        }
    }
    Ok(d)
}

/// Mode of the bottom-of-image labels over {Road, Grass, Ground}, with Ground
/// counted as Road. Empty input or a tie gives `None`.
pub fn predict_surface(bottom_labels: &[SemanticLabel]) -> Option<Surface> {
    let (mut road, mut grass) = (0usize, 0usize);
    for l in bottom_labels {
        match l {
            SemanticLabel::Road | SemanticLabel::Ground => road += 1,
            SemanticLabel::Grass => grass += 1,
            _ => {}
        }
    }
    match road.cmp(&grass) {
        std::cmp::Ordering::Greater => Some(Surface::Road),
        std::cmp::Ordering::Less => Some(Surface::Grass),
        std::cmp::Ordering::Equal => None,
    }
}

/// Surface prediction after the open-terrain label refinement, which undoes
/// building/vegetation confusions under the robot.
pub fn predict_surface_refined(bottom_labels: &[SemanticLabel]) -> Option<Surface> {
    let refined: Vec<SemanticLabel> = bottom_labels
        .iter()
        .map(|&l| refine_label(l, false))
        .collect();
    predict_surface(&refined)
}

pub fn write_observations(observations: &[GroundObservation]) -> String {
    let mut out = String::new();
    for o in observations {
        writeln!(out, "OBS t={}", o.t).unwrap();
        for p in &o.points {
            writeln!(out, "P {} {} {}", p.x, p.y, p.h).unwrap();
        }
        for (a, l) in &o.ray_labels {
            writeln!(out, "L {} {}", a, l.code()).unwrap();
        }
        for l in &o.bottom_labels {
            writeln!(out, "B {}", l.code()).unwrap();
        }
    }
    out
}

pub fn parse_observations(text: &str) -> Result<Vec<GroundObservation>> {
    let mut out: Vec<GroundObservation> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut f = line.split_whitespace();
        let Some(tag) = f.next() else { continue };
        let rest: Vec<&str> = f.collect();
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line_no, format!("bad number {s:?}")))
        };
        let label = |s: &str| -> Result<SemanticLabel> {
            let code: u32 = s
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad label {s:?}")))?;
            match SemanticLabel::from_code(code)? {
                SemanticLabel::Invalid => Err(Error::UnknownLabel(code)),
                l => Ok(l),
            }
        };
        if tag == "OBS" {
            let t = rest
                .first()
                .and_then(|s| s.strip_prefix("t="))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(line_no, "expected OBS t=<k>"))?;
            out.push(GroundObservation {
                t,
                ..Default::default()
            });
            continue;
        }
        let current = out
            .last_mut()
            .ok_or_else(|| Error::parse(line_no, "record before first OBS line"))?;
        match (tag, rest.as_slice()) {
            ("P", [x, y, h]) => current
                .points
                .push(GroundPoint::new(num(x)?, num(y)?, num(h)?)),
            ("L", [a, l]) => current.ray_labels.push((num(a)?, label(l)?)),
            ("B", [l]) => current.bottom_labels.push(label(l)?),
            _ => return Err(Error::parse(line_no, format!("unrecognized line {line:?}"))),
        }
    }
    Ok(out)
}

pub fn load_observations(path: impl AsRef<Path>) -> Result<Vec<GroundObservation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_observations(&text)
}
