//! The 2.5D aerial map: co-registered elevation, semantic, obstacle and
//! traversability layers, plus the DEM processing that derives obstacles from
//! elevation and the rule-based cleanup of a raw semantic segmentation.
//!
//! # Grid file format
//!
//! ```text
//! AMAP v1 <width> <height> <resolution_m>
//! <elevation, row-major, decimal meters>
//! ---
//! <semantic label codes, row-major>
//! ---
//! <obstacle flags 0/1, row-major>      (optional block)
//! ```
//!
//! Values are whitespace-delimited. When the obstacle block is absent it is
//! recomputed from the elevation layer with [`ObstacleParams::default`].

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{CellPos, Grid};

pub const DEFAULT_RESOLUTION: f64 = 0.34;

/// Semantic categories of the aerial and ground segmentations.
///
/// `Shadow` only occurs in raw segmentation output and is removed by
/// [`refine_segmentation`]. `Invalid` only occurs inside descriptors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SemanticLabel {
    Road,
    Grass,
    Vegetation,
    Building,
    Ground,
    Shadow,
    Invalid,
}

impl SemanticLabel {
    /// The six labels a segmentation can produce.
    pub const RAW: [SemanticLabel; 6] = [
        SemanticLabel::Road,
        SemanticLabel::Grass,
        SemanticLabel::Vegetation,
        SemanticLabel::Building,
        SemanticLabel::Ground,
        SemanticLabel::Shadow,
    ];

    /// Labels that survive refinement.
    pub const REFINED: [SemanticLabel; 5] = [
        SemanticLabel::Road,
        SemanticLabel::Grass,
        SemanticLabel::Vegetation,
        SemanticLabel::Building,
        SemanticLabel::Ground,
    ];

    /// Numeric code used by the map and descriptor cache files.
    pub const fn code(self) -> u8 {
        match self {
            SemanticLabel::Road => 0,
            SemanticLabel::Grass => 1,
            SemanticLabel::Vegetation => 2,
            SemanticLabel::Building => 3,
            SemanticLabel::Ground => 4,
            SemanticLabel::Shadow => 5,
            SemanticLabel::Invalid => 255,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => SemanticLabel::Road,
            1 => SemanticLabel::Grass,
            2 => SemanticLabel::Vegetation,
            3 => SemanticLabel::Building,
            4 => SemanticLabel::Ground,
            5 => SemanticLabel::Shadow,
            255 => SemanticLabel::Invalid,
            other => return Err(Error::UnknownLabel(other)),
        })
    }

    pub fn is_valid(self) -> bool {
        self != SemanticLabel::Invalid
    }
}

/// Thresholds for DEM edge detection and ground-region growth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObstacleParams {
    /// Largest elevation step (m) the ground flood fill may cross, exclusive.
    pub elevation_step_threshold: f64,
    /// A cell is an edge when some 8-neighbor differs by more than this (m).
    pub edge_gradient_threshold: f64,
}

impl Default for ObstacleParams {
    fn default() -> Self {
        Self {
            elevation_step_threshold: 0.2,
            edge_gradient_threshold: 0.5,
        }
    }
}

impl ObstacleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.elevation_step_threshold > 0.0 && self.edge_gradient_threshold > 0.0) {
            return Err(Error::InvalidParameter(
                "obstacle thresholds must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Immutable 2.5D aerial map. Traversability is always the complement of the
/// obstacle layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AerialMap {
    resolution: f64,
    elevation: Grid<f64>,
    semantic: Grid<SemanticLabel>,
    obstacle: Grid<bool>,
    traversable: Grid<bool>,
}

impl AerialMap {
    pub fn new(
        resolution: f64,
        elevation: Grid<f64>,
        semantic: Grid<SemanticLabel>,
        obstacle: Grid<bool>,
    ) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if !elevation.same_shape(&semantic) || !elevation.same_shape(&obstacle) {
            return Err(Error::DimensionMismatch(format!(
                "elevation {}x{}, semantic {}x{}, obstacle {}x{}",
                elevation.width(),
                elevation.height(),
                semantic.width(),
                semantic.height(),
                obstacle.width(),
                obstacle.height()
            )));
        }
        if semantic.iter().any(|l| !l.is_valid()) {
            return Err(Error::InvalidParameter(
                "map semantic layer may not contain Invalid".into(),
            ));
        }
        let traversable = obstacle.map(|o| !o);
        Ok(Self {
            resolution,
            elevation,
            semantic,
            obstacle,
            traversable,
        })
    }

    /// Builds a map whose obstacle layer is derived from the elevation layer.
    pub fn from_dem(
        resolution: f64,
        elevation: Grid<f64>,
        semantic: Grid<SemanticLabel>,
        params: &ObstacleParams,
    ) -> Result<Self> {
        let edges = compute_edge_map(&elevation, params);
        let obstacle = extract_obstacles(&elevation, &edges, params)?;
        Self::new(resolution, elevation, semantic, obstacle)
    }

    pub fn width(&self) -> usize {
        self.elevation.width()
    }

    pub fn height(&self) -> usize {
        self.elevation.height()
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn elevation(&self) -> &Grid<f64> {
        &self.elevation
    }

    pub fn semantic(&self) -> &Grid<SemanticLabel> {
        &self.semantic
    }

    pub fn obstacle(&self) -> &Grid<bool> {
        &self.obstacle
    }

    pub fn traversable(&self) -> &Grid<bool> {
        &self.traversable
    }

    pub fn is_traversable(&self, c: CellPos) -> bool {
        self.traversable[c]
    }

    /// Traversable cells in row-major order.
    pub fn traversable_cells(&self) -> Vec<CellPos> {
        self.traversable
            .cells()
            .filter_map(|(c, &t)| t.then_some(c))
            .collect()
    }

    pub fn into_layers(self) -> (f64, Grid<f64>, Grid<SemanticLabel>, Grid<bool>) {
        (
            self.resolution,
            self.elevation,
            self.semantic,
            self.obstacle,
        )
    }

    /// Parses the text grid format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (header_line, header) = lines
            .by_ref()
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or_else(|| Error::parse(1, "missing AMAP header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "AMAP" || fields[1] != "v1" {
            return Err(Error::parse(
                header_line + 1,
                format!("malformed header {header:?}"),
            ));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::parse(header_line + 1, format!("{s:?}: {e}")))
        };
        let width = parse_usize(fields[2])?;
        let height = parse_usize(fields[3])?;
        let resolution: f64 = fields[4]
            .parse()
            .map_err(|e| Error::parse(header_line + 1, format!("{:?}: {e}", fields[4])))?;

        // (first line number, tokens) per block
        let mut blocks: Vec<(usize, Vec<&str>)> = vec![(header_line + 2, Vec::new())];
        for (i, line) in lines {
            if line.trim() == "---" {
                blocks.push((i + 2, Vec::new()));
            } else {
                blocks.last_mut().unwrap().1.extend(line.split_whitespace());
            }
        }
        if !(2..=3).contains(&blocks.len()) {
            return Err(Error::parse(
                header_line + 1,
                format!("expected 2 or 3 blocks, found {}", blocks.len()),
            ));
        }
        let expected = width * height;
        for (name, (line, tokens)) in ["elevation", "semantic", "obstacle"].iter().zip(&blocks) {
            if tokens.len() != expected {
                return Err(Error::DimensionMismatch(format!(
                    "{name} block starting at line {line} has {} values, header declares {width}x{height}",
                    tokens.len()
                )));
            }
        }

        let (line, tokens) = &blocks[0];
        let elevation = tokens
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(*line, format!("bad elevation {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (line, tokens) = &blocks[1];
        let semantic = tokens
            .iter()
            .map(|t| {
                let code: u32 = t
                    .parse()
                    .map_err(|_| Error::parse(*line, format!("bad label code {t:?}")))?;
                match SemanticLabel::from_code(code)? {
                    SemanticLabel::Invalid => Err(Error::UnknownLabel(code)),
                    l => Ok(l),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let elevation = Grid::from_vec(width, height, elevation)?;
        let semantic = Grid::from_vec(width, height, semantic)?;

        match blocks.get(2) {
            Some((line, tokens)) => {
                let obstacle = tokens
                    .iter()
                    .map(|t| match *t {
                        "0" => Ok(false),
                        "1" => Ok(true),
                        other => Err(Error::parse(*line, format!("bad obstacle flag {other:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let obstacle = Grid::from_vec(width, height, obstacle)?;
                Self::new(resolution, elevation, semantic, obstacle)
            }
            None => Self::from_dem(resolution, elevation, semantic, &ObstacleParams::default()),
        }
    }

    /// Serializes to the text grid format, always including the obstacle block.
    pub fn to_text(&self) -> String {
        let (w, h) = (self.width(), self.height());
        let mut out = String::with_capacity(w * h * 8);
        writeln!(out, "AMAP v1 {w} {h} {}", self.resolution).unwrap();
        write_rows(&mut out, &self.elevation, |o, v| write!(o, "{v}").unwrap());
        out.push_str("---\n");
        write_rows(&mut out, &self.semantic, |o, l| {
            write!(o, "{}", l.code()).unwrap()
        });
        out.push_str("---\n");
        write_rows(&mut out, &self.obstacle, |o, &b| {
            o.push(if b { '1' } else { '0' })
        });
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn write_rows<T>(out: &mut String, grid: &Grid<T>, mut cell: impl FnMut(&mut String, &T)) {
    for row in grid.as_slice().chunks(grid.width().max(1)) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            cell(out, v);
        }
        out.push('\n');
    }
}

/// Reads a map in the grid file format.
pub fn load_map(path: impl AsRef<Path>) -> Result<AerialMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AerialMap::parse(&text)
}

/// Marks cells whose largest absolute elevation difference to any 8-neighbor
/// exceeds `edge_gradient_threshold`.
pub fn compute_edge_map(elevation: &Grid<f64>, params: &ObstacleParams) -> Grid<bool> {
    Grid::from_fn(elevation.width(), elevation.height(), |c| {
        let e = elevation[c];
        elevation
            .neighbors8(c)
            .any(|n| (elevation[n] - e).abs() > params.edge_gradient_threshold)
    })
}

/// Chebyshev distance from every cell to the nearest `true` cell, or
/// `u32::MAX` everywhere when there are none.
pub fn chebyshev_distance(mask: &Grid<bool>) -> Grid<u32> {
    let (w, h) = (mask.width(), mask.height());
    let mut d = mask.map(|&m| if m { 0u32 } else { u32::MAX });
    let relax =
        |d: &Grid<u32>, x: isize, y: isize| d.get(x, y).map_or(u32::MAX, |v| v.saturating_add(1));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = CellPos::new(x as usize, y as usize);
            let best = [(-1, 0), (-1, -1), (0, -1), (1, -1)]
                .iter()
                .map(|&(dx, dy)| relax(&d, x + dx, y + dy))
                .min()
                .unwrap();
            d[c] = d[c].min(best);
        }
    }
    for y in (0..h as isize).rev() {
        for x in (0..w as isize).rev() {
            let c = CellPos::new(x as usize, y as usize);
            let best = [(1, 0), (1, 1), (0, 1), (-1, 1)]
                .iter()
                .map(|&(dx, dy)| relax(&d, x + dx, y + dy))
                .min()
                .unwrap();
            d[c] = d[c].min(best);
        }
    }
    d
}

/// Grows the ground region from the cell farthest from any edge and returns
/// the complement as the obstacle layer.
///
/// The seed is the first cell in row-major order with maximal Chebyshev
/// distance to an edge. Growth is 4-connected and crosses a step only when the
/// absolute elevation difference is strictly below
/// `elevation_step_threshold`.
pub fn extract_obstacles(
    elevation: &Grid<f64>,
    edges: &Grid<bool>,
    params: &ObstacleParams,
) -> Result<Grid<bool>> {
    if !elevation.same_shape(edges) {
        return Err(Error::DimensionMismatch(
            "elevation and edge grids differ in size".into(),
        ));
    }
    if elevation.is_empty() || edges.iter().all(|&e| e) {
        return Err(Error::DegenerateDem);
    }
    let dist = chebyshev_distance(edges);
    let mut seed = None;
    let mut best = 0u32;
    for (c, &d) in dist.cells() {
        if !edges[c] && (seed.is_none() || d > best) {
            seed = Some(c);
            best = d;
        }
    }
    let seed = seed.ok_or(Error::DegenerateDem)?;

    let mut ground = Grid::filled(elevation.width(), elevation.height(), false);
    ground[seed] = true;
    let mut queue = VecDeque::from([seed]);
    while let Some(c) = queue.pop_front() {
        let e = elevation[c];
        for n in elevation.neighbors4(c) {
            if !ground[n] && (elevation[n] - e).abs() < params.elevation_step_threshold {
                ground[n] = true;
                queue.push_back(n);
            }
        }
    }
    Ok(ground.map(|g| !g))
}

/// Rule-based correction of one label given the DEM obstacle flag.
///
/// Roads are assumed to be confused with buildings and grass with vegetation.
/// Shadow becomes Ground on open terrain and Building on obstacles. Ground on
/// an obstacle becomes Building so that the refined label alone determines
/// traversability.
pub fn refine_label(raw: SemanticLabel, obstacle: bool) -> SemanticLabel {
    use SemanticLabel::*;
    match (raw, obstacle) {
        (Road | Shadow | Ground, true) => Building,
        (Grass, true) => Vegetation,
        (Building, false) => Road,
        (Vegetation, false) => Grass,
        (Shadow, false) => Ground,
        (other, _) => other,
    }
}

pub fn refine_segmentation(
    raw: &Grid<SemanticLabel>,
    obstacle: &Grid<bool>,
) -> Result<Grid<SemanticLabel>> {
    if !raw.same_shape(obstacle) {
        return Err(Error::DimensionMismatch(
            "segmentation and obstacle grids differ in size".into(),
        ));
    }
    Ok(Grid::from_fn(raw.width(), raw.height(), |c| {
        refine_label(raw[c], obstacle[c])
    }))
}
