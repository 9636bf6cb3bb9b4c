use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major grayscale pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "grid must be non-empty, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }
}

/// Source sampling positions for one axis: lower index, upper index, weight of upper.
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize to an arbitrary `height x width`.
pub fn resize_to(grid: &Grid, height: usize, width: usize) -> Result<Grid> {
    if height < 1 || width < 1 {
        return Err(Error::Contract(format!(
            "resize target must be at least 1, got {height}x{width}"
        )));
    }
    let rows = sample_axis(grid.height, height);
    let cols = sample_axis(grid.width, width);
    let mut out = Vec::with_capacity(height * width);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = lerp(grid.get(r0, c0), grid.get(r0, c1), fx);
            let bottom = lerp(grid.get(r1, c0), grid.get(r1, c1), fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Grid::new(height, width, out)
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// Bilinear resize to a `target x target` square.
pub fn resize_bilinear(grid: &Grid, target: usize) -> Result<Grid> {
    resize_to(grid, target, target)
}

/// Maps [0, 1] to [-1, 1] as a `[1, h, w]` tensor.
pub fn normalize(grid: &Grid) -> Tensor {
    let data = grid.values.iter().map(|&x| (x - 0.5) / 0.5).collect();
    Tensor::new(&[1, grid.height, grid.width], data).expect("grid extents are positive")
}

/// Inverse of [`normalize`].
pub fn denormalize(pixels: &Tensor) -> Result<Grid> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Dimension(format!(
            "expected [1, h, w] pixels, got {shape:?}"
        )));
    }
    let values = pixels.data().iter().map(|&x| x * 0.5 + 0.5).collect();
    Grid::new(shape[1], shape[2], values)
}
