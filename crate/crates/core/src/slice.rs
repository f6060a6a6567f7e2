use crate::error::{invalid, Result};

/// A 2D scalar field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Slice {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!("slice dims must be positive, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(invalid(format!(
                "slice {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "slice dims must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "slice dims must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Slice) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn ensure_same_shape(&self, other: &Slice, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(())
    }
}
