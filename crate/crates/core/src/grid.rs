//! Row-major 2D grids used for images, depth maps, score maps, and masks.

use serde::{Deserialize, Serialize};

/// A dense row-major `height x width` raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length");
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Grid<f32> {
    /// Bilinear sample at a (possibly fractional) pixel position. Positions
    /// outside the grid read as 0.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (w, h) = (self.width as isize, self.height as isize);
        let x0 = x.floor() as isize;
        let y0 = y.floor() as isize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let at = |xi: isize, yi: isize| -> f64 {
            if xi < 0 || yi < 0 || xi >= w || yi >= h {
                0.0
            } else {
                self.data[yi as usize * self.width + xi as usize] as f64
            }
        };
        at(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + at(x0 + 1, y0) * fx * (1.0 - fy)
            + at(x0, y0 + 1) * (1.0 - fx) * fy
            + at(x0 + 1, y0 + 1) * fx * fy
    }
}

/// Bilinear read of a masked scalar field. Returns `None` unless all four
/// contributing pixels are inside the grid and valid.
pub fn bilinear_masked(
    values: &Grid<f32>,
    valid: &Grid<bool>,
    x: f64,
    y: f64,
) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (values.width - 1) as f64 && y <= (values.height - 1) as f64)
    {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(values.width - 1);
    let y1 = (y0 + 1).min(values.height - 1);
    if !(valid.get(x0, y0) && valid.get(x1, y0) && valid.get(x0, y1) && valid.get(x1, y1)) {
        return None;
    }
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some(
        values.get(x0, y0) as f64 * (1.0 - fx) * (1.0 - fy)
            + values.get(x1, y0) as f64 * fx * (1.0 - fy)
            + values.get(x0, y1) as f64 * (1.0 - fx) * fy
            + values.get(x1, y1) as f64 * fx * fy,
    )
}

/// Like [`bilinear_masked`] but interpolates inverse depth, which is exact
/// for planar surfaces under perspective projection. Input depths must be
/// positive wherever valid.
pub fn bilinear_inverse_depth(
    depth: &Grid<f32>,
    valid: &Grid<bool>,
    x: f64,
    y: f64,
) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (depth.width - 1) as f64 && y <= (depth.height - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(depth.width - 1);
    let y1 = (y0 + 1).min(depth.height - 1);
    if !(valid.get(x0, y0) && valid.get(x1, y0) && valid.get(x0, y1) && valid.get(x1, y1)) {
        return None;
    }
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let inv = |xi: usize, yi: usize| 1.0 / depth.get(xi, yi) as f64;
    let iz = inv(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + inv(x1, y0) * fx * (1.0 - fy)
        + inv(x0, y1) * (1.0 - fx) * fy
        + inv(x1, y1) * fx * fy;
    if iz <= 0.0 {
        return None;
    }
    Some(1.0 / iz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_interpolates_ramp() {
        let g = Grid::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert!((g.bilinear(0.5, 0.5) - 1.5).abs() < 1e-12);
        assert!((g.bilinear(1.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_read_requires_all_corners() {
        let v = Grid::from_vec(2, 1, vec![1.0, 3.0]);
        let mut m = Grid::new(2, 1, true);
        assert_eq!(bilinear_masked(&v, &m, 0.5, 0.0), Some(2.0));
        m.set(1, 0, false);
        assert_eq!(bilinear_masked(&v, &m, 0.5, 0.0), None);
    }

    #[test]
    fn inverse_depth_is_exact_on_projective_ramp() {
        // 1/z linear across the row: z = 1/(0.2 + 0.1*x)
        let z: Vec<f32> = (0..4).map(|x| 1.0 / (0.2 + 0.1 * x as f32)).collect();
        let g = Grid::from_vec(4, 1, z);
        let m = Grid::new(4, 1, true);
        let got = bilinear_inverse_depth(&g, &m, 1.25, 0.0).unwrap();
        assert!((got - 1.0 / (0.2 + 0.1 * 1.25)).abs() < 1e-6);
    }
}
