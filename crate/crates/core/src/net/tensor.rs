use crate::volume::{voxel_count, Dims, Volume};

/// Channel-major stack of equally sized `f32` grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * voxel_count(dims)],
        }
    }

    pub fn from_volume(v: &Volume<f32>) -> Self {
        Self {
            channels: 1,
            dims: v.dims(),
            data: v.data().to_vec(),
        }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_volume(&self, c: usize) -> Volume<f32> {
        Volume::new(self.dims, [1.0; 3], self.channel(c).to_vec()).expect("consistent channel")
    }

    /// Stacks `self` on top of `other` along the channel axis.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.dims, other.dims, "concat dims");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            dims: self.dims,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`].
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let n = self.voxels();
        let (a, b) = self.data.split_at(first * n);
        (
            Tensor {
                channels: first,
                dims: self.dims,
                data: a.to_vec(),
            },
            Tensor {
                channels: self.channels - first,
                dims: self.dims,
                data: b.to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
