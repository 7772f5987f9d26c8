use ndarray::Array3;

use crate::layer::LayerId;

/// The activation block of one layer for one image, `C × M × N`.
///
/// Codes are read-only snapshots: every operator returns a new code.
#[derive(Debug, Clone, PartialEq)]
pub struct Code {
    layer: LayerId,
    values: Array3<f64>,
    source: String,
}

impl Code {
    pub fn new(layer: LayerId, values: Array3<f64>, source: impl Into<String>) -> Self {
        Self {
            layer,
            values,
            source: source.into(),
        }
    }

    pub fn layer(&self) -> LayerId {
        self.layer
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    /// Which image or modifier produced this code.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    /// `(C, M, N)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn spatial_size(&self) -> usize {
        let (_, m, n) = self.values.dim();
        m * n
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    pub(crate) fn derived(&self, values: Array3<f64>, tag: &str) -> Self {
        Self {
            layer: self.layer,
            values,
            source: format!("{}({})", tag, self.source),
        }
    }
}
