use serde::{Deserialize, Serialize};

use crate::error::{DynafuseError, Result};
use crate::tensor::{bilinear_at, Tensor};

/// Dense C x H x W feature map, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, fill: f64) -> Result<FeatureGrid> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(DynafuseError::invalid(format!(
                "feature grid dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if !fill.is_finite() {
            return Err(DynafuseError::invalid("fill value must be finite"));
        }
        Ok(FeatureGrid {
            channels,
            height,
            width,
            data: vec![fill; channels * height * width],
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<FeatureGrid> {
        if t.shape.len() != 3 {
            return Err(DynafuseError::ShapeMismatch {
                expected: "3-D tensor".into(),
                got: format!("{:?}", t.shape),
            });
        }
        Ok(FeatureGrid {
            channels: t.shape[0],
            height: t.shape[1],
            width: t.shape[2],
            data: t.data.clone(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        self.data[(c * self.height + h) * self.width + w] = v;
    }

    /// Bilinear interpolation at fractional cell coordinates; locations
    /// outside [0, W-1] x [0, H-1] read as zero.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Vec<f64> {
        bilinear_at(&self.to_tensor(), x, y)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// World-to-cell mapping of a square BEV grid. Cell (row, col) covers
/// [x_min + col*cell, x_min + (col+1)*cell) x [y_min + row*cell, ...).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell_size: f64,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell_size: f64) -> Result<GridSpec> {
        if !(x_max > x_min && y_max > y_min && cell_size > 0.0) {
            return Err(DynafuseError::invalid(
                "grid spec requires x_max > x_min, y_max > y_min, cell_size > 0",
            ));
        }
        Ok(GridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            cell_size,
        })
    }

    /// Desk-scale default: [-20 m, 20 m]^2 at 0.5 m per cell (80x80).
    pub fn desk_default() -> GridSpec {
        GridSpec {
            x_min: -20.0,
            x_max: 20.0,
            y_min: -20.0,
            y_max: 20.0,
            cell_size: 0.5,
        }
    }

    pub fn n_cols(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell_size).round() as usize
    }

    pub fn n_rows(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell_size).round() as usize
    }

    /// World point to fractional cell coordinates (col, row); cell centers
    /// sit at integer coordinates.
    pub fn world_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x_min) / self.cell_size - 0.5,
            (y - self.y_min) / self.cell_size - 0.5,
        )
    }

    /// Center of cell (col, row) in world meters.
    pub fn cell_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.x_min + (col + 0.5) * self.cell_size,
            self.y_min + (row + 0.5) * self.cell_size,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_constructor() {
        let g = FeatureGrid::new(1, 2, 2, 0.0).unwrap();
        assert_eq!(g.data, vec![0.0; 4]);
        let g = FeatureGrid::new(3, 4, 4, 1.5).unwrap();
        assert_eq!(g.data.len(), 48);
        assert!(g.data.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(FeatureGrid::new(0, 2, 2, 0.0).is_err());
    }

    #[test]
    fn world_cell_round_trip() {
        let spec = GridSpec::desk_default();
        let (cx, cy) = spec.world_to_cell(3.25, -7.75);
        let (x, y) = spec.cell_to_world(cx, cy);
        assert!((x - 3.25).abs() < 1e-12 && (y + 7.75).abs() < 1e-12);
    }

    #[test]
    fn desk_default_is_80x80() {
        let spec = GridSpec::desk_default();
        assert_eq!((spec.n_rows(), spec.n_cols()), (80, 80));
    }

    #[test]
    fn grid_json_round_trip() {
        let mut g = FeatureGrid::new(2, 3, 3, 0.0).unwrap();
        g.set(1, 2, 0, -0.123456789123);
        let s = serde_json::to_string(&g).unwrap();
        let back: FeatureGrid = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
    }
}
