use crate::error::{Error, Result};
use crate::volume::{linear_index, rotate_grid, voxel_count, Dims, Rotation};

/// Channel-major stack of same-shaped grids.
///
/// Flow states are 2-channel fields (CT, mask); network inputs carry extra
/// constant conditioning channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    channels: usize,
    dims: Dims,
    data: Vec<f32>,
}

impl Field {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Field {
            channels,
            dims,
            data: vec![0.0; channels * voxel_count(dims)],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.contains(&0) {
            return Err(Error::Shape(format!(
                "empty field: {channels} channels, dims {dims:?}"
            )));
        }
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} values for {channels} x {dims:?}",
                data.len()
            )));
        }
        Ok(Field {
            channels,
            dims,
            data,
        })
    }

    /// Stacks single-channel slices that share `dims`.
    pub fn stack(dims: Dims, parts: &[&[f32]]) -> Result<Self> {
        let n = voxel_count(dims);
        let mut data = Vec::with_capacity(parts.len() * n);
        for p in parts {
            if p.len() != n {
                return Err(Error::Shape(format!("channel of {} values, expected {n}", p.len())));
            }
            data.extend_from_slice(p);
        }
        Field::from_vec(parts.len(), dims, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[c * self.voxels() + linear_index(self.dims, x, y, z)]
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub(crate) fn check_same_shape(&self, other: &Field) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{} x {:?} vs {} x {:?}",
                self.channels, self.dims, other.channels, other.dims
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sub-grid `[origin, origin + size)` of every channel.
    pub fn window(&self, origin: [usize; 3], size: Dims) -> Result<Field> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::Bounds(format!(
                    "window origin {origin:?} size {size:?} exceeds dims {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(self.channels * voxel_count(size));
        for c in 0..self.channels {
            let ch = self.channel(c);
            for z in 0..size[2] {
                for y in 0..size[1] {
                    let start = linear_index(self.dims, origin[0], origin[1] + y, origin[2] + z);
                    data.extend_from_slice(&ch[start..start + size[0]]);
                }
            }
        }
        Field::from_vec(self.channels, size, data)
    }

    /// Writes `src` into this field at `origin`.
    pub fn paste(&mut self, origin: [usize; 3], src: &Field) -> Result<()> {
        if src.channels != self.channels
            || (0..3).any(|a| origin[a] + src.dims[a] > self.dims[a])
        {
            return Err(Error::Bounds(format!(
                "paste of {:?} at {origin:?} into {:?}",
                src.dims, self.dims
            )));
        }
        let n = self.voxels();
        let sn = src.voxels();
        for c in 0..self.channels {
            for z in 0..src.dims[2] {
                for y in 0..src.dims[1] {
                    let dst = c * n + linear_index(self.dims, origin[0], origin[1] + y, origin[2] + z);
                    let s = c * sn + linear_index(src.dims, 0, y, z);
                    self.data[dst..dst + src.dims[0]].copy_from_slice(&src.data[s..s + src.dims[0]]);
                }
            }
        }
        Ok(())
    }

    pub fn rotated(&self, rotation: Rotation) -> Result<Field> {
        let data = rotate_grid(&self.data, self.channels, self.dims, rotation)?;
        Field::from_vec(self.channels, self.dims, data)
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Field, scale: f32) -> Result<Field> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + scale * b)
            .collect();
        Ok(Field {
            channels: self.channels,
            dims: self.dims,
            data,
        })
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Field {
            channels: self.channels,
            dims: self.dims,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Field {
        Field {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
