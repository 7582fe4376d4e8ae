use crate::error::{Error, Result};
use crate::voxgrid::Volume;

use super::scalar::Scalar;

/// Feature map of shape `(C, X, Y, Z)`; channel-major, then x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::DimMismatch(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor4 {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    /// A single-channel tensor from a volume.
    pub fn from_volume(v: &Volume) -> Self {
        let (nx, ny, nz) = v.grid().dims();
        Tensor4 {
            shape: [1, nx, ny, nz],
            data: v.data().iter().map(|&x| T::from_f64(x)).collect(),
        }
    }

    /// Channels stacked from equally sized volumes.
    pub fn stack(vols: &[&Volume]) -> Result<Self> {
        let first = vols
            .first()
            .ok_or_else(|| Error::InvalidDims("cannot stack zero volumes".into()))?;
        let (nx, ny, nz) = first.grid().dims();
        let mut data = Vec::with_capacity(vols.len() * first.len());
        for v in vols {
            v.check_same_dims(first, "stack")?;
            data.extend(v.data().iter().map(|&x| T::from_f64(x)));
        }
        Ok(Tensor4 {
            shape: [vols.len(), nx, ny, nz],
            data,
        })
    }

    /// Channel `c` as a volume on `grid`.
    pub fn channel_volume(&self, c: usize, grid: crate::voxgrid::Grid) -> Result<Volume> {
        let n = self.spatial();
        Volume::from_vec(grid, self.data[c * n..(c + 1) * n].iter().map(|x| x.to_f64()).collect())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Voxels per channel.
    pub fn spatial(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        let [_, nx, ny, nz] = self.shape;
        c * nx * ny * nz + x + nx * (y + ny * z)
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(c, x, y, z)]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }
}
