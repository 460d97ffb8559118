//! Range/semantic scan-line descriptors.
//!
//! A descriptor samples `N` equally spaced directions around a position. For
//! each direction it records the distance to the first obstacle and that
//! obstacle's semantic label, or an invalid marker for both when nothing is
//! hit within the maximum range. The same construction serves aerial map
//! cells and local obstacle maps built from ground scans, so the two can be
//! compared element by element.

mod cache;
pub(crate) mod raycast;
mod score;

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo_map::{AerialMap, SemanticLabel};
use crate::grid::{CellPos, Grid};

pub use cache::{load_descriptor_cache, save_descriptor_cache};
pub use score::{independent_estimate, score_field, Channels, ScoreField, Surface, SurfaceMask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescriptorParams {
    /// Number of scan lines `N`.
    pub n_lines: usize,
    /// Meters.
    pub max_range: f64,
    /// Largest range disagreement (m, exclusive) still counted as a match.
    pub range_tolerance: f64,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self {
            n_lines: 60,
            max_range: 40.0,
            range_tolerance: 4.0,
        }
    }
}

impl DescriptorParams {
    pub fn angle_step_deg(&self) -> f64 {
        360.0 / self.n_lines as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lines < 4 || self.n_lines > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "n_lines must be in [4, 65535], got {}",
                self.n_lines
            )));
        }
        if !(self.range_tolerance > 0.0 && self.range_tolerance <= self.max_range) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < range_tolerance <= max_range, got {} and {}",
                self.range_tolerance, self.max_range
            )));
        }
        Ok(())
    }

    /// Unit direction of scan line `i`, counter-clockwise from +x.
    pub fn direction(&self, i: usize) -> (f64, f64) {
        let a = (i as f64 * self.angle_step_deg()).to_radians();
        (a.cos(), a.sin())
    }

    /// Converts a rotation in degrees to a shift in scan lines.
    pub fn rotation_steps(&self, omega_deg: f64) -> Result<isize> {
        let k = omega_deg / self.angle_step_deg();
        if !k.is_finite() || (k - k.round()).abs() > 1e-9 {
            return Err(Error::RotationNotMultiple(omega_deg));
        }
        Ok(k.round() as isize)
    }
}

/// One scan-line descriptor.
///
/// Invariant: a valid semantic label implies a valid range; valid ranges lie
/// in `(0, max_range]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub ranges: Vec<Option<f32>>,
    pub labels: Vec<SemanticLabel>,
}

impl Descriptor {
    pub fn invalid(n: usize) -> Self {
        Self {
            ranges: vec![None; n],
            labels: vec![SemanticLabel::Invalid; n],
        }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn valid_semantic_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_valid()).count()
    }
}

/// Ranges (m) to the first obstacle along each scan line from the center of
/// `origin`, with the obstacle cell that was hit.
pub(crate) fn scan_lines(
    obstacle: &Grid<bool>,
    resolution: f64,
    origin: CellPos,
    params: &DescriptorParams,
) -> Vec<Option<(f32, CellPos)>> {
    let max_cells = params.max_range / resolution;
    (0..params.n_lines)
        .map(|i| {
            let hit = raycast::cast_ray(obstacle, origin, params.direction(i), max_cells)?;
            let dx = hit.cell.x as f64 - origin.x as f64;
            let dy = hit.cell.y as f64 - origin.y as f64;
            let range = dx.hypot(dy) * resolution;
            (range <= params.max_range).then_some((range as f32, hit.cell))
        })
        .collect()
}

/// Descriptor at `origin` over an obstacle grid and a label grid of the same
/// shape. Ranges are measured to the center of the hit cell.
pub fn compute_descriptor(
    obstacle: &Grid<bool>,
    resolution: f64,
    semantic: &Grid<SemanticLabel>,
    origin: CellPos,
    params: &DescriptorParams,
) -> Result<Descriptor> {
    if !obstacle.same_shape(semantic) {
        return Err(Error::DimensionMismatch(
            "obstacle and semantic grids differ in size".into(),
        ));
    }
    if origin.x >= obstacle.width() || origin.y >= obstacle.height() {
        return Err(Error::InvalidParameter(format!(
            "origin {origin:?} out of bounds"
        )));
    }
    if obstacle[origin] {
        return Err(Error::OriginOnObstacle {
            x: origin.x,
            y: origin.y,
        });
    }
    let mut d = Descriptor::invalid(params.n_lines);
    for (i, hit) in scan_lines(obstacle, resolution, origin, params)
        .into_iter()
        .enumerate()
    {
        if let Some((range, cell)) = hit {
            d.ranges[i] = Some(range);
            d.labels[i] = semantic[cell];
        }
    }
    Ok(d)
}

/// Circular shift by `omega_deg`: output element `i` is input element
/// `(i + omega / alpha) mod N`, for both channels.
pub fn rotate_descriptor(
    d: &Descriptor,
    omega_deg: f64,
    params: &DescriptorParams,
) -> Result<Descriptor> {
    if d.len() != params.n_lines {
        return Err(Error::LengthMismatch(d.len(), params.n_lines));
    }
    let k = params.rotation_steps(omega_deg)?;
    Ok(rotate_by_steps(d, k))
}

pub(crate) fn rotate_by_steps(d: &Descriptor, k: isize) -> Descriptor {
    let n = d.len() as isize;
    let src = |i: usize| ((i as isize + k).rem_euclid(n)) as usize;
    Descriptor {
        ranges: (0..d.len()).map(|i| d.ranges[src(i)]).collect(),
        labels: (0..d.len()).map(|i| d.labels[src(i)]).collect(),
    }
}

/// Element-wise agreement score between a ground and an aerial descriptor.
///
/// Range elements agree when both are valid and differ by strictly less than
/// `range_tolerance`. Semantic elements agree when both are valid and equal,
/// and their count is scaled by `N / v`, `v` being the number of valid
/// semantic labels in `ground`, so the semantic channel always carries the
/// same total weight as the range channel. With `v = 0` the semantic term is
/// dropped.
pub fn similarity(
    ground: &Descriptor,
    aerial: &Descriptor,
    params: &DescriptorParams,
) -> Result<f64> {
    similarity_with(ground, aerial, params, Channels::RangeSemantic)
}

pub fn similarity_with(
    ground: &Descriptor,
    aerial: &Descriptor,
    params: &DescriptorParams,
    channels: Channels,
) -> Result<f64> {
    if ground.len() != aerial.len() {
        return Err(Error::LengthMismatch(ground.len(), aerial.len()));
    }
    let tol = params.range_tolerance as f32;
    let range_hits = ground
        .ranges
        .iter()
        .zip(&aerial.ranges)
        .filter(|(g, a)| matches!((g, a), (Some(g), Some(a)) if (g - a).abs() < tol))
        .count();
    if channels == Channels::Range {
        return Ok(range_hits as f64);
    }
    let v = ground.valid_semantic_count();
    if v == 0 {
        return Ok(range_hits as f64);
    }
    let gamma = ground.len() as f64 / v as f64;
    let label_hits = ground
        .labels
        .iter()
        .zip(&aerial.labels)
        .filter(|(g, a)| g.is_valid() && g == a)
        .count();
    Ok(range_hits as f64 + gamma * label_hits as f64)
}

/// Traversable cells of a map and a dense reverse lookup.
#[derive(Debug, PartialEq)]
pub struct CellIndex {
    cells: Vec<CellPos>,
    width: usize,
    height: usize,
    lookup: Vec<u32>,
}

impl CellIndex {
    pub fn new(cells: Vec<CellPos>) -> Self {
        let width = cells.iter().map(|c| c.x + 1).max().unwrap_or(0);
        let height = cells.iter().map(|c| c.y + 1).max().unwrap_or(0);
        let mut lookup = vec![u32::MAX; width * height];
        for (j, c) in cells.iter().enumerate() {
            lookup[c.y * width + c.x] = j as u32;
        }
        Self {
            cells,
            width,
            height,
            lookup,
        }
    }

    pub fn cells(&self) -> &[CellPos] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Column index of `c`, if it is one of the indexed cells.
    pub fn index_of(&self, c: CellPos) -> Option<usize> {
        if c.x >= self.width || c.y >= self.height {
            return None;
        }
        match self.lookup[c.y * self.width + c.x] {
            u32::MAX => None,
            j => Some(j as usize),
        }
    }

    pub(crate) fn bounds(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Label code stored for an invalid aerial element. Differs from the ground
/// side's invalid code so that invalid never matches invalid.
pub(crate) const AERIAL_INVALID: u8 = 254;
pub(crate) const GROUND_INVALID: u8 = 255;

/// Descriptors of every traversable map cell, stored cell-major: the `N`
/// range values of column `j` are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct AerialDescriptorSet {
    n_lines: usize,
    /// Invalid ranges are NaN so that any comparison with them fails.
    depth: Vec<f32>,
    labels: Vec<u8>,
    index: Arc<CellIndex>,
}

impl AerialDescriptorSet {
    pub(crate) fn from_parts(
        n_lines: usize,
        depth: Vec<f32>,
        labels: Vec<u8>,
        cells: Vec<CellPos>,
    ) -> Result<Self> {
        let m = cells.len();
        if depth.len() != n_lines * m || labels.len() != n_lines * m {
            return Err(Error::DimensionMismatch(format!(
                "descriptor matrices do not match N={n_lines}, M={m}"
            )));
        }
        Ok(Self {
            n_lines,
            depth,
            labels,
            index: Arc::new(CellIndex::new(cells)),
        })
    }

    pub fn n_lines(&self) -> usize {
        self.n_lines
    }

    /// Number of columns `M`.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn cells(&self) -> &[CellPos] {
        self.index.cells()
    }

    pub fn index(&self) -> &Arc<CellIndex> {
        &self.index
    }

    pub fn column(&self, j: usize) -> Descriptor {
        let n = self.n_lines;
        let depth = &self.depth[j * n..(j + 1) * n];
        let labels = &self.labels[j * n..(j + 1) * n];
        Descriptor {
            ranges: depth.iter().map(|&r| (!r.is_nan()).then_some(r)).collect(),
            labels: labels
                .iter()
                .map(|&l| match l {
                    AERIAL_INVALID => SemanticLabel::Invalid,
                    code => SemanticLabel::from_code(code as u32).expect("stored label code"),
                })
                .collect(),
        }
    }

    pub(crate) fn raw_column(&self, j: usize) -> (&[f32], &[u8]) {
        let n = self.n_lines;
        (
            &self.depth[j * n..(j + 1) * n],
            &self.labels[j * n..(j + 1) * n],
        )
    }
}

fn encode_column(d: &Descriptor, depth: &mut Vec<f32>, labels: &mut Vec<u8>) {
    depth.extend(d.ranges.iter().map(|r| r.unwrap_or(f32::NAN)));
    labels.extend(d.labels.iter().map(|l| match l {
        SemanticLabel::Invalid => AERIAL_INVALID,
        l => l.code(),
    }));
}

/// Descriptors for all traversable cells of `map`, in row-major cell order.
/// Work is spread over the current rayon pool; the result does not depend on
/// the number of threads.
pub fn build_aerial_descriptors(
    map: &AerialMap,
    params: &DescriptorParams,
) -> Result<AerialDescriptorSet> {
    params.validate()?;
    let cells = map.traversable_cells();
    if cells.is_empty() {
        return Err(Error::NoTraversableCells);
    }
    let columns: Vec<Descriptor> = cells
        .par_iter()
        .map(|&c| {
            compute_descriptor(map.obstacle(), map.resolution(), map.semantic(), c, params)
                .expect("traversable cells are valid origins")
        })
        .collect();
    let mut depth = Vec::with_capacity(cells.len() * params.n_lines);
    let mut labels = Vec::with_capacity(cells.len() * params.n_lines);
    for d in &columns {
        encode_column(d, &mut depth, &mut labels);
    }
    AerialDescriptorSet::from_parts(params.n_lines, depth, labels, cells)
}
