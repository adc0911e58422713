use crate::element::{DType, Element};
use crate::error::{DiffError, Result};

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct DTensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Element> DTensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(DiffError::BadBuffer {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![E::zero(); numel(shape)])
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [E]> {
        self.grad.as_deref_mut()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[E]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(DiffError::BadBuffer {
                shape: self.shape.clone(),
                len: g.len(),
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn set_grad(&mut self, g: Option<Vec<E>>) -> Result<()> {
        if let Some(buf) = &g {
            if buf.len() != self.data.len() {
                return Err(DiffError::BadBuffer {
                    shape: self.shape.clone(),
                    len: buf.len(),
                });
            }
        }
        self.grad = g;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Element-type conversion; the gradient buffer is carried over.
    pub fn cast<F: Element>(&self) -> DTensor<F> {
        DTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| F::from_f64(v.as_f64())).collect()),
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(DiffError::ZeroExtent(shape.to_vec()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_must_fill_shape() {
        assert!(DTensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(matches!(
            DTensor::<f32>::new(&[2, 0], vec![]),
            Err(DiffError::ZeroExtent(_))
        ));
        let t = DTensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.dtype(), DType::F64);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = DTensor::<f64>::zeros(&[2]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
