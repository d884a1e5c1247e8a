use crate::error::{dim_err, Result, TensorError};
use crate::real::Real;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err("tensor", format!("zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(TensorError::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return dim_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> F {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: F) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.to_f64_lossy())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(t.clone().reshape(&[3, 2]).unwrap().get(&[2, 1]), 5.0);
        assert!(t.reshape(&[4, 2]).is_err());
    }
}
