use serde::{Deserialize, Serialize};

use crate::error::{DynafuseError, Result};

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], fill: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![fill; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(DynafuseError::ShapeMismatch {
                expected: format!("{n} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Index into a [C, H, W] tensor.
    #[inline]
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        let (hh, ww) = (self.shape[1], self.shape[2]);
        self.data[(c * hh + h) * ww + w]
    }

    #[inline]
    pub fn at3_mut(&mut self, c: usize, h: usize, w: usize) -> &mut f64 {
        let (hh, ww) = (self.shape[1], self.shape[2]);
        &mut self.data[(c * hh + h) * ww + w]
    }

    /// Index into a [H, W] tensor.
    #[inline]
    pub fn at2(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.shape[1] + w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Bilinear interpolation on a [C, H, W] tensor at fractional cell
/// coordinates (x along width, y along height). Out-of-range locations
/// read as zero. Returns the sampled channel vector and, when `derivs`
/// is requested, d/dx and d/dy of each channel.
pub fn bilinear_at(grid: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (c, out, _, _) = bilinear_core(grid, x, y, false);
    debug_assert_eq!(c, out.len());
    out
}

pub fn bilinear_with_derivs(grid: &Tensor, x: f64, y: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (_, out, dx, dy) = bilinear_core(grid, x, y, true);
    (out, dx, dy)
}

fn bilinear_core(grid: &Tensor, x: f64, y: f64, derivs: bool) -> (usize, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, h, w) = (grid.shape[0], grid.shape[1], grid.shape[2]);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let read = |ci: usize, yi: i64, xi: i64| -> f64 {
        if yi < 0 || xi < 0 || yi >= h as i64 || xi >= w as i64 {
            0.0
        } else {
            grid.at3(ci, yi as usize, xi as usize)
        }
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    let mut out = vec![0.0; c];
    let mut dx = vec![0.0; if derivs { c } else { 0 }];
    let mut dy = vec![0.0; if derivs { c } else { 0 }];
    for ci in 0..c {
        let v00 = read(ci, yi, xi);
        let v01 = read(ci, yi, xi + 1);
        let v10 = read(ci, yi + 1, xi);
        let v11 = read(ci, yi + 1, xi + 1);
        out[ci] = v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy
            + v11 * fx * fy;
        if derivs {
            dx[ci] = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy;
            dy[ci] = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx;
        }
    }
    (c, out, dx, dy)
}

/// Scatter `g` (per-channel gradient) into `grad` at the four cells that a
/// bilinear read at (x, y) touches.
pub fn bilinear_scatter(grad: &mut Tensor, x: f64, y: f64, g: &[f64]) {
    let (c, h, w) = (grad.shape[0], grad.shape[1], grad.shape[2]);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as i64, y0 as i64);
    let mut add = |ci: usize, yj: i64, xj: i64, wgt: f64| {
        if yj >= 0 && xj >= 0 && yj < h as i64 && xj < w as i64 {
            *grad.at3_mut(ci, yj as usize, xj as usize) += wgt * g[ci];
        }
    };
    for ci in 0..c {
        add(ci, yi, xi, (1.0 - fx) * (1.0 - fy));
        add(ci, yi, xi + 1, fx * (1.0 - fy));
        add(ci, yi + 1, xi, (1.0 - fx) * fy);
        add(ci, yi + 1, xi + 1, fx * fy);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn bilinear_exact_at_integer_coords() {
        let mut g = Tensor::zeros(&[1, 4, 4]);
        *g.at3_mut(0, 3, 2) = 7.5;
        assert_eq!(bilinear_at(&g, 2.0, 3.0), vec![7.5]);
    }

    #[test]
    fn bilinear_midpoint() {
        let mut g = Tensor::zeros(&[1, 1, 2]);
        *g.at3_mut(0, 0, 0) = 0.0;
        *g.at3_mut(0, 0, 1) = 1.0;
        let v = bilinear_at(&g, 0.5, 0.0);
        assert!((v[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_zero_padding_outside() {
        let g = Tensor::full(&[2, 3, 3], 4.0);
        assert_eq!(bilinear_at(&g, -5.0, -5.0), vec![0.0, 0.0]);
    }
}
