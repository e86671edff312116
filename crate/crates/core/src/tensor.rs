//! Dense row-major tensors and the three-axis feature maps built from them.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I32,
    U8,
}

impl DType {
    /// Element size in bytes.
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        }
    }

    /// The `.npy` type descriptor.
    pub fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::I32 => "<i4",
            DType::U8 => "|u1",
        }
    }

    pub fn from_descr(descr: &str) -> Option<Self> {
        match descr {
            "<f4" => Some(DType::F32),
            "<i4" => Some(DType::I32),
            "|u1" | "<u1" | ">u1" | "u1" => Some(DType::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// An n-dimensional array with shape metadata.
///
/// Equality is bitwise on the payload, so `NaN` payloads compare equal to
/// themselves when their bit patterns match.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a
                .iter()
                .zip(b)
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            (a, b) => a == b,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, buffer holds {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }
}

/// A float32 activation (or gradient) block of shape `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::Shape(format!(
                "feature map ({channels}, {height}, {width}) needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Channel-wise concatenation: `self`'s channels first.
    pub fn concat(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "cannot concatenate {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(FeatureMap {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.channels, self.height, self.width],
            data: TensorData::F32(self.data.clone()),
        }
    }
}

impl TryFrom<Tensor> for FeatureMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        if t.shape.len() != 3 {
            return Err(Error::Shape(format!(
                "expected a (K, h, w) tensor, got shape {:?}",
                t.shape
            )));
        }
        let (k, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        match t.data {
            TensorData::F32(data) => FeatureMap::new(k, h, w, data),
            other => Err(Error::Shape(format!(
                "expected float32 activations, got {:?}",
                other.dtype()
            ))),
        }
    }
}

/// An int32 class-id map of shape `(height, width)`; [`VOID_LABEL`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

/// Reserved class id for pixels excluded from every loss and IoU count.
pub const VOID_LABEL: i32 = -1;

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<i32>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    /// Foreground pixel count of `concept`.
    pub fn count(&self, concept: i32) -> usize {
        self.data.iter().filter(|&&v| v == concept).count()
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != VOID_LABEL).count()
    }

    pub fn contains(&self, concept: i32) -> bool {
        self.data.contains(&concept)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width],
            data: TensorData::I32(self.data.clone()),
        }
    }
}

impl TryFrom<Tensor> for LabelMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        if t.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected an (h, w) label map, got shape {:?}",
                t.shape
            )));
        }
        let (h, w) = (t.shape[0], t.shape[1]);
        match t.data {
            TensorData::I32(data) => LabelMap::new(h, w, data),
            other => Err(Error::Shape(format!(
                "expected int32 labels, got {:?}",
                other.dtype()
            ))),
        }
    }
}
