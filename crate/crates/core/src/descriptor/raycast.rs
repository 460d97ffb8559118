use crate::grid::{CellPos, Grid};

/// Exact grid line traversal (Amanatides & Woo) in cell units, where cell `i`
/// spans `[i, i + 1)` on each axis.
///
/// Yields every cell the ray passes through, with the ray parameter at which
/// the cell is entered, starting with the origin cell at `t = 0`.
pub(crate) struct GridTraversal {
    cell: (isize, isize),
    step: (isize, isize),
    t_max: (f64, f64),
    t_delta: (f64, f64),
    t_entry: f64,
}

impl GridTraversal {
    pub(crate) fn new(origin: (f64, f64), dir: (f64, f64)) -> Self {
        let cell = (origin.0.floor() as isize, origin.1.floor() as isize);
        let axis = |o: f64, d: f64, c: isize| -> (isize, f64, f64) {
            if d > 0.0 {
                (1, ((c + 1) as f64 - o) / d, 1.0 / d)
            } else if d < 0.0 {
                (-1, (o - c as f64) / -d, -1.0 / d)
            } else {
                (0, f64::INFINITY, f64::INFINITY)
            }
        };
        let (sx, tx, dx) = axis(origin.0, dir.0, cell.0);
        let (sy, ty, dy) = axis(origin.1, dir.1, cell.1);
        Self {
            cell,
            step: (sx, sy),
            t_max: (tx, ty),
            t_delta: (dx, dy),
            t_entry: 0.0,
        }
    }
}

impl Iterator for GridTraversal {
    type Item = ((isize, isize), f64);

    #[inline]
    fn next(&mut self) -> Option<Self::Item> {
        let current = (self.cell, self.t_entry);
        if self.t_max.0 < self.t_max.1 {
            self.cell.0 += self.step.0;
            self.t_entry = self.t_max.0;
            self.t_max.0 += self.t_delta.0;
        } else {
            self.cell.1 += self.step.1;
            self.t_entry = self.t_max.1;
            self.t_max.1 += self.t_delta.1;
        }
        Some(current)
    }
}

/// Outcome of casting one ray from a cell center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct RayHit {
    pub cell: CellPos,
    /// Ray parameter (cells) where the obstacle cell is entered.
    pub entry: f64,
}

/// First obstacle cell entered within `max_cells` of the center of `origin`.
/// The origin cell itself is never reported.
pub(crate) fn cast_ray(
    obstacle: &Grid<bool>,
    origin: CellPos,
    dir: (f64, f64),
    max_cells: f64,
) -> Option<RayHit> {
    let start = (origin.x as f64 + 0.5, origin.y as f64 + 0.5);
    cast_ray_from(obstacle, start, dir, max_cells).filter(|h| h.cell != origin)
}

/// Same as [`cast_ray`] but from an arbitrary point in cell-edge coordinates.
pub(crate) fn cast_ray_from(
    obstacle: &Grid<bool>,
    start: (f64, f64),
    dir: (f64, f64),
    max_cells: f64,
) -> Option<RayHit> {
    for ((x, y), t) in GridTraversal::new(start, dir).skip(1) {
        if t > max_cells {
            return None;
        }
        match obstacle.get(x, y) {
            None => return None,
            Some(true) => {
                return Some(RayHit {
                    cell: CellPos::new(x as usize, y as usize),
                    entry: t,
                })
            }
            Some(false) => {}
        }
    }
    unreachable!("grid traversal is infinite")
}
