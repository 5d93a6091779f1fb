//! Dense row-major tensors over f32/f64.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense tensor with explicit extents and a flat row-major buffer.
///
/// The buffer length always equals the product of the extents; any
/// operation producing NaN or an infinity is treated as an error state
/// by the callers that can detect it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::zero(); len],
        }
    }

    pub fn filled(dims: &[usize], value: S) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} require {} elements, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in dims {dims:?}"
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// For a [C, H, W] tensor, the contiguous H*W slice of channel `c`.
    pub fn plane(&self, c: usize) -> &[S] {
        let hw = self.dims[1] * self.dims[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [S] {
        let hw = self.dims[1] * self.dims[2];
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn same_shape(&self, other: &Tensor<S>) -> bool {
        self.dims == other.dims
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::of(v.widen())).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.cast()
    }
}

/// Tensor with element type decided at runtime (as read from disk).
#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.dims(),
            DynTensor::F64(t) => t.dims(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            DynTensor::F32(t) => t.to_f64(),
            DynTensor::F64(t) => t.clone(),
        }
    }
}

/// Integer label map over an H x W grid, stored densely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {}x{} requires {} entries, got {}",
                height,
                width,
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pixels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.labels[y * self.width + x] = v;
    }

    /// Encodes as a [1, H, W] f32 tensor holding integral values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.labels.iter().map(|&v| v as f32).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("consistent by construction")
    }

    /// Decodes from a [1, H, W] (or [H, W]) tensor of integral values.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match t.dims() {
            [1, h, w] => (*h, *w),
            [h, w] => (*h, *w),
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "label map tensor must be [1,H,W] or [H,W], got {other:?}"
                )))
            }
        };
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                let r = v.round();
                if !(0.0..=u32::MAX as f32).contains(&r) || (v - r).abs() > 1e-3 {
                    Err(Error::Data(format!("non-integral label value {v}")))
                } else {
                    Ok(r as u32)
                }
            })
            .collect::<Result<Vec<u32>>>()?;
        LabelMap::from_vec(h, w, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn plane_slices_channels() {
        let t = Tensor::<f64>::from_vec(&[2, 1, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.plane(0), &[1., 2., 3.]);
        assert_eq!(t.plane(1), &[4., 5., 6.]);
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.all_finite());
        t.data_mut()[3] = f32::NAN;
        assert!(t.ensure_finite("test").is_err());
    }

    #[test]
    fn label_map_tensor_round_trip() {
        let m = LabelMap::from_vec(2, 2, vec![0, 3, 1, 2]).unwrap();
        let back = LabelMap::from_tensor(&m.to_tensor()).unwrap();
        assert_eq!(m, back);
    }
}
