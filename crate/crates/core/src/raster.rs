//! Dense row-major 2D rasters shared by every stage of the pipeline.

use std::ops::{Index, IndexMut};

/// A `width × height` raster stored row-major (`y * width + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid2<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid2<T> {
    /// Wraps an existing buffer. Returns `None` when the length does not
    /// match `width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn same_shape<U>(&self, other: &Grid2<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid2<U> {
        Grid2 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Grid2<T> {
    type Output = T;

    #[inline]
    fn index(&self, (x, y): (usize, usize)) -> &T {
        &self.data[y * self.width + x]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid2<T> {
    #[inline]
    fn index_mut(&mut self, (x, y): (usize, usize)) -> &mut T {
        &mut self.data[y * self.width + x]
    }
}

/// Maximum of a float raster; `None` for an empty raster.
pub fn max_value(values: &[f64]) -> Option<f64> {
    values.iter().copied().reduce(f64::max)
}

/// Physical layout of the simulation grid: cell counts and the cell pitch.
///
/// Cell centers sit at `((i + 0.5) - width / 2) * cell_size`, so the grid is
/// centered on the coil axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// meters per cell
    pub cell_size: f64,
}

impl GridSpec {
    pub fn square(cells: usize, extent: f64) -> Self {
        Self {
            width: cells,
            height: cells,
            cell_size: extent / cells as f64,
        }
    }

    #[inline]
    pub fn center_x(&self, x: usize) -> f64 {
        (x as f64 + 0.5 - self.width as f64 / 2.0) * self.cell_size
    }

    #[inline]
    pub fn center_y(&self, y: usize) -> f64 {
        (y as f64 + 0.5 - self.height as f64 / 2.0) * self.cell_size
    }

    /// Cell containing the physical point, if it lies on the grid.
    pub fn cell_at(&self, px: f64, py: f64) -> Option<(usize, usize)> {
        let fx = px / self.cell_size + self.width as f64 / 2.0;
        let fy = py / self.cell_size + self.height as f64 / 2.0;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (x, y) = (fx.floor() as usize, fy.floor() as usize);
        (x < self.width && y < self.height).then_some((x, y))
    }

    pub fn half_extent_x(&self) -> f64 {
        self.width as f64 * self.cell_size / 2.0
    }

    pub fn half_extent_y(&self) -> f64 {
        self.height as f64 * self.cell_size / 2.0
    }
}
