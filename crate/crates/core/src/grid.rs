//! Dense row-major grids and the two coordinate types used throughout the
//! crate.
//!
//! Continuous map positions are expressed in *cell coordinates*: the center of
//! cell `(x, y)` sits at `Point2 { x: x as f64, y: y as f64 }`, so the cell
//! containing a point is found by rounding. Metric quantities are cell
//! coordinates multiplied by the map resolution.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use crate::error::{Error, Result};

/// Integer cell address. `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellPos {
    pub x: usize,
    pub y: usize,
}

impl CellPos {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn center(self) -> Point2 {
        Point2::new(self.x as f64, self.y as f64)
    }
}

/// Real-valued position in cell coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    /// Rotates counter-clockwise by `radians` about the origin.
    pub fn rotated(self, radians: f64) -> Point2 {
        let (s, c) = radians.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Cell containing this point, or `None` when it lies outside a
    /// `width` x `height` grid.
    pub fn cell(self, width: usize, height: usize) -> Option<CellPos> {
        let cx = (self.x + 0.5).floor();
        let cy = (self.y + 0.5).floor();
        if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
            return None;
        }
        Some(CellPos::new(cx as usize, cy as usize))
    }

    /// Clamps into the rectangle spanned by the cell centers of a grid.
    pub fn clamp_to(self, width: usize, height: usize) -> Point2 {
        Point2::new(
            self.x.clamp(0.0, width.saturating_sub(1) as f64),
            self.y.clamp(0.0, height.saturating_sub(1) as f64),
        )
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(CellPos) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(CellPos::new(x, y)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn contains(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn get(&self, x: isize, y: isize) -> Option<&T> {
        if self.contains(x, y) {
            Some(&self.data[y as usize * self.width + x as usize])
        } else {
            None
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Cells paired with values, in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (CellPos, &T)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (CellPos::new(i % w, i / w), v))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Up to eight in-bounds neighbors of `c`.
    pub fn neighbors8(&self, c: CellPos) -> impl Iterator<Item = CellPos> + '_ {
        const OFFSETS: [(isize, isize); 8] = [
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ];
        self.offsets(c, &OFFSETS)
    }

    pub fn neighbors4(&self, c: CellPos) -> impl Iterator<Item = CellPos> + '_ {
        const OFFSETS: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
        self.offsets(c, &OFFSETS)
    }

    fn offsets<'a>(
        &'a self,
        c: CellPos,
        offsets: &'static [(isize, isize)],
    ) -> impl Iterator<Item = CellPos> + 'a {
        offsets.iter().filter_map(move |&(dx, dy)| {
            let nx = c.x as isize + dx;
            let ny = c.y as isize + dy;
            self.contains(nx, ny)
                .then(|| CellPos::new(nx as usize, ny as usize))
        })
    }
}

impl<T> Index<CellPos> for Grid<T> {
    type Output = T;
    fn index(&self, c: CellPos) -> &T {
        debug_assert!(c.x < self.width && c.y < self.height);
        &self.data[c.y * self.width + c.x]
    }
}

impl<T> IndexMut<CellPos> for Grid<T> {
    fn index_mut(&mut self, c: CellPos) -> &mut T {
        debug_assert!(c.x < self.width && c.y < self.height);
        &mut self.data[c.y * self.width + c.x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_cell_rounds_to_nearest_center() {
        assert_eq!(Point2::new(0.49, 2.51).cell(5, 5), Some(CellPos::new(0, 3)));
        assert_eq!(Point2::new(-0.51, 0.0).cell(5, 5), None);
        assert_eq!(Point2::new(4.4, 0.0).cell(5, 5), Some(CellPos::new(4, 0)));
        assert_eq!(Point2::new(4.5, 0.0).cell(5, 5), None);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Grid::from_vec(3, 3, vec![0u8; 8]).is_err());
    }

    #[test]
    fn neighbor_counts_at_corner_and_interior() {
        let g = Grid::filled(3, 3, 0u8);
        assert_eq!(g.neighbors8(CellPos::new(0, 0)).count(), 3);
        assert_eq!(g.neighbors8(CellPos::new(1, 1)).count(), 8);
        assert_eq!(g.neighbors4(CellPos::new(0, 1)).count(), 3);
    }
}
