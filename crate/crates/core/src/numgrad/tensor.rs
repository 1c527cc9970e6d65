use super::GradError;

/// Dense row-major `f64` array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, GradError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GradError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value], grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, GradError> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix. An empty slice needs `cols`.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self, GradError> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(GradError::ShapeMismatch {
                    op: "from_rows",
                    detail: format!("row of length {} in a {cols}-column matrix", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view used by the row-wise primitives: a scalar is 1×1
    /// and a vector is a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len().checked_div(cols).unwrap_or(0), cols)
            }
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (_, cols) = self.rows_cols();
        self.data[i * cols + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, GradError> {
        Self::new(shape, self.data.clone())
    }

    /// Validity check: every value (and gradient, if present) is finite.
    pub fn check_finite(&self) -> Result<(), GradError> {
        let grads = self.grad.iter().flatten();
        if self.data.iter().chain(grads).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(GradError::NonFinite { op: "tensor" })
        }
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), GradError> {
        if grad.len() != self.data.len() {
            return Err(GradError::ShapeMismatch {
                op: "set_grad",
                detail: format!("gradient of length {} for {:?}", grad.len(), self.shape),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Rows `idx` of a matrix, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let (_, cols) = self.rows_cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), cols], data, grad: None }
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[&Tensor], cols: usize) -> Tensor {
        let data: Vec<f64> = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        Tensor { shape: vec![data.len() / cols.max(1), cols], data, grad: None }
    }

    /// Bitwise equality of values and shape (NaN-safe, sign-of-zero aware).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert_eq!(Tensor::scalar(2.0).len(), 1);
    }

    #[test]
    fn non_finite_is_flagged() {
        let t = Tensor::vector(vec![1.0, f64::NAN]);
        assert!(t.check_finite().is_err());
        let mut ok = Tensor::vector(vec![1.0, 2.0]);
        ok.set_grad(vec![f64::INFINITY, 0.0]).unwrap();
        assert!(ok.check_finite().is_err());
    }

    #[test]
    fn rows_cols_views() {
        assert_eq!(Tensor::scalar(1.0).rows_cols(), (1, 1));
        assert_eq!(Tensor::vector(vec![1.0; 4]).rows_cols(), (1, 4));
        assert_eq!(Tensor::zeros(&[3, 2]).rows_cols(), (3, 2));
        assert_eq!(Tensor::zeros(&[0, 2]).rows_cols(), (0, 2));
    }
}
