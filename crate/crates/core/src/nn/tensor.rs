//! Dense row-major float tensors for the network core.

use super::NnError;

/// A dense tensor: a shape and a flat row-major `f64` buffer.
///
/// Activations use the `[batch, channels, height, width]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::BadShape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Interpret the shape as `[batch, channels, height, width]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), NnError> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            other => Err(NnError::BadShape(format!(
                "expected 4-d activation, got shape {other:?}"
            ))),
        }
    }

    /// Interpret the shape as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize), NnError> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(NnError::BadShape(format!(
                "expected 2-d tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Elementwise sum with shape checking.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, NnError> {
        if self.shape != rhs.shape {
            return Err(NnError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// In-place `self += rhs`.
    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<(), NnError> {
        if self.shape != rhs.shape {
            return Err(NnError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_data_rejects_wrong_length() {
        assert!(Tensor::from_data(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_data(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn add_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[4]"), "{err}");
    }
}
