use super::{NnError, Real};

/// Channels x depth x height x width feature map with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self { shape, data: vec![value; shape.iter().product()], grad: None }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NnError::Shape(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    /// Build a tensor by evaluating `f(c, z, y, x)` at every element.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for c in 0..shape[0] {
            for z in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f(c, z, y, x));
                    }
                }
            }
        }
        Self { shape, data, grad: None }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.shape[1] + z) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, z, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn add_assign(&mut self, other: &Tensor4<T>) -> Result<(), NnError> {
        ensure_same_shape(self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Stack tensors with equal spatial dims along the channel axis.
    pub fn concat_channels(parts: &[&Tensor4<T>]) -> Result<Self, NnError> {
        let first = parts.first().ok_or_else(|| NnError::Shape("concat of nothing".into()))?;
        let spatial = first.spatial();
        let mut channels = 0;
        for p in parts {
            if p.spatial() != spatial {
                return Err(NnError::Shape(format!(
                    "concat spatial mismatch {:?} vs {:?}",
                    p.spatial(),
                    spatial
                )));
            }
            channels += p.channels();
        }
        let mut data = Vec::with_capacity(channels * first.spatial_len());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: [channels, spatial[0], spatial[1], spatial[2]], data, grad: None })
    }

    /// Inverse of [`Tensor4::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>, NnError> {
        if sizes.iter().sum::<usize>() != self.channels() {
            return Err(NnError::Shape(format!(
                "split sizes {sizes:?} do not sum to {} channels",
                self.channels()
            )));
        }
        let n = self.spatial_len();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(Self {
                shape: [s, self.shape[1], self.shape[2], self.shape[3]],
                data: self.data[start * n..(start + s) * n].to_vec(),
                grad: None,
            });
            start += s;
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|v| U::of(v.f64())).collect(), grad: None }
    }
}

pub(crate) fn ensure_same_shape(a: [usize; 4], b: [usize; 4]) -> Result<(), NnError> {
    if a != b {
        return Err(NnError::Shape(format!("shape mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}

/// A trainable parameter (or buffer) with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![T::zero(); n], grad: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn accumulate(&mut self, g: &[T]) {
        for (a, &b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}
