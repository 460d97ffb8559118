use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use super::{AerialDescriptorSet, CellIndex, Descriptor, DescriptorParams, GROUND_INVALID};
use crate::error::{Error, Result};
use crate::geo_map::SemanticLabel;
use crate::grid::{CellPos, Grid, Point2};

/// Which descriptor channels contribute to the similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    Range,
    RangeSemantic,
}

/// Surface the robot believes it is standing on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Road,
    Grass,
}

/// Zeroes scores of cells whose map label contradicts the predicted surface.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceMask<'a> {
    pub surface: Surface,
    pub labels: &'a Grid<SemanticLabel>,
}

impl SurfaceMask<'_> {
    fn excludes(&self, c: CellPos) -> bool {
        matches!(
            (self.surface, self.labels[c]),
            (Surface::Road, SemanticLabel::Grass) | (Surface::Grass, SemanticLabel::Road)
        )
    }
}

/// Best rotational similarity `S(p)` for every indexed cell and the rotation
/// that achieves it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    index: Arc<CellIndex>,
    scores: Vec<f64>,
    best_rotation: Vec<u16>,
    angle_step_deg: f64,
}

impl ScoreField {
    pub fn new(
        index: Arc<CellIndex>,
        scores: Vec<f64>,
        best_rotation: Vec<u16>,
        angle_step_deg: f64,
    ) -> Result<Self> {
        if scores.len() != index.len() || best_rotation.len() != index.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores and {} rotations for {} cells",
                scores.len(),
                best_rotation.len(),
                index.len()
            )));
        }
        if scores.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(
                "scores must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            index,
            scores,
            best_rotation,
            angle_step_deg,
        })
    }

    pub fn index(&self) -> &Arc<CellIndex> {
        &self.index
    }

    pub fn cells(&self) -> &[CellPos] {
        self.index.cells()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Best rotation of column `j` in degrees, in `[0, 360)`.
    pub fn best_rotation_deg(&self, j: usize) -> f64 {
        self.best_rotation[j] as f64 * self.angle_step_deg
    }

    pub fn score_at_cell(&self, c: CellPos) -> f64 {
        self.index.index_of(c).map_or(0.0, |j| self.scores[j])
    }

    /// Score of the cell containing `p`; zero off the traversable set.
    pub fn score_at(&self, p: Point2) -> f64 {
        let (w, h) = self.index.bounds();
        p.cell(w, h).map_or(0.0, |c| self.score_at_cell(c))
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> ScoreField {
        ScoreField {
            scores: self.scores.iter().map(|s| s * factor).collect(),
            ..self.clone()
        }
    }

    /// CSV with header `x,y,score,best_rotation_deg`, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,score,best_rotation_deg\n");
        for (j, c) in self.cells().iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                c.x,
                c.y,
                self.scores[j],
                self.best_rotation_deg(j)
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str, angle_step_deg: f64) -> Result<Self> {
        let mut cells = Vec::new();
        let mut scores = Vec::new();
        let mut rotations = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::parse(i + 1, format!("bad field row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            let x: usize = f[0].parse().map_err(|_| bad())?;
            let y: usize = f[1].parse().map_err(|_| bad())?;
            let s: f64 = f[2].parse().map_err(|_| bad())?;
            let r: f64 = f[3].parse().map_err(|_| bad())?;
            cells.push(CellPos::new(x, y));
            scores.push(s);
            rotations.push((r / angle_step_deg).round() as u16);
        }
        Self::new(
            Arc::new(CellIndex::new(cells)),
            scores,
            rotations,
            angle_step_deg,
        )
    }
}

/// Scores `ground` against every column of `set`, maximizing over all `N`
/// circular shifts. Ties between rotations go to the smallest shift.
pub fn score_field(
    ground: &Descriptor,
    set: &AerialDescriptorSet,
    params: &DescriptorParams,
    channels: Channels,
    mask: Option<SurfaceMask<'_>>,
) -> Result<ScoreField> {
    let n = set.n_lines();
    if ground.len() != n || params.n_lines != n {
        return Err(Error::LengthMismatch(ground.len(), n));
    }
    // Doubled copies make every rotation a contiguous window.
    let g_range: Vec<f32> = ground
        .ranges
        .iter()
        .chain(&ground.ranges)
        .map(|r| r.unwrap_or(f32::NAN))
        .collect();
    let g_label: Vec<u8> = ground
        .labels
        .iter()
        .chain(&ground.labels)
        .map(|l| match l {
            SemanticLabel::Invalid => GROUND_INVALID,
            l => l.code(),
        })
        .collect();
    let v = ground.valid_semantic_count();
    let gamma = match channels {
        Channels::RangeSemantic if v > 0 => n as f64 / v as f64,
        _ => 0.0,
    };
    let use_labels = gamma > 0.0;
    let tol = params.range_tolerance as f32;

    let (scores, best_rotation): (Vec<f64>, Vec<u16>) = (0..set.len())
        .into_par_iter()
        .map(|j| {
            if let Some(m) = &mask {
                if m.excludes(set.cells()[j]) {
                    return (0.0, 0);
                }
            }
            let (c_range, c_label) = set.raw_column(j);
            let mut best = (f64::NEG_INFINITY, 0u16);
            for k in 0..n {
                let gr = &g_range[k..k + n];
                let mut range_hits = 0u32;
                for i in 0..n {
                    range_hits += ((gr[i] - c_range[i]).abs() < tol) as u32;
                }
                let mut label_hits = 0u32;
                if use_labels {
                    let gl = &g_label[k..k + n];
                    for i in 0..n {
                        label_hits += (gl[i] == c_label[i]) as u32;
                    }
                }
                let s = range_hits as f64 + gamma * label_hits as f64;
                if s > best.0 {
                    best = (s, k as u16);
                }
            }
            best
        })
        .unzip();
    ScoreField::new(
        set.index().clone(),
        scores,
        best_rotation,
        params.angle_step_deg(),
    )
}

/// The highest-scoring cell; ties go to the first cell in row-major order.
pub fn independent_estimate(field: &ScoreField) -> Option<CellPos> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &s) in field.scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| field.cells()[j])
}
