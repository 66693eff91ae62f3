use super::sh::{n_coeffs, SH_ORDER};
use crate::error::{Error, Result};
use crate::geometry::{Grid, VoxelGrid};

/// Per-voxel SH coefficients of an fODF field.
#[derive(Debug, Clone, PartialEq)]
pub struct ShVolume {
    grid: Grid,
    order: usize,
}

impl ShVolume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        ShVolume {
            grid: Grid::zeros(dims, n_coeffs(SH_ORDER)),
            order: SH_ORDER,
        }
    }

    pub fn from_grid(grid: Grid, order: usize) -> Result<Self> {
        if order % 2 != 0 || grid.channels != n_coeffs(order) {
            return Err(Error::InvalidArgument(format!(
                "order {order} needs {} coefficients, grid has {}",
                n_coeffs(order),
                grid.channels
            )));
        }
        if grid.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite SH coefficient".into()));
        }
        Ok(ShVolume { grid, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coeffs(&self, x: usize, y: usize, z: usize) -> &[f64] {
        self.grid.voxel(x, y, z)
    }

    pub fn coeffs_mut(&mut self, x: usize, y: usize, z: usize) -> &mut [f64] {
        self.grid.voxel_mut(x, y, z)
    }
}

impl VoxelGrid for ShVolume {
    fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    fn channels(&self) -> usize {
        self.grid.channels
    }

    fn voxel(&self, x: usize, y: usize, z: usize) -> &[f64] {
        self.grid.voxel(x, y, z)
    }
}

/// Binary voxel mask, x-fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            data: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_data(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape("mask", &dims, &[data.len()]));
        }
        Ok(Mask {
            dims,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.idx(x, y, z)] != 0
    }

    /// Membership of a possibly out-of-range voxel index.
    pub fn contains_voxel(&self, v: [i64; 3]) -> bool {
        if (0..3).any(|i| v[i] < 0 || v[i] >= self.dims[i] as i64) {
            return false;
        }
        self.get(v[0] as usize, v[1] as usize, v[2] as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.idx(x, y, z);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Voxel coordinates of every set voxel, in storage order.
    pub fn voxels(&self) -> Vec<[usize; 3]> {
        let [nx, ny, _] = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| [i % nx, (i / nx) % ny, i / (nx * ny)])
            .collect()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(a, b)| *a != 0 && *b != 0)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| *a == 0 || *b != 0)
    }

    /// The mask grown by one voxel in all 26 directions.
    pub fn dilated(&self) -> Mask {
        let mut out = self.clone();
        let d = self.dims.map(|x| x as i64);
        for [x, y, z] in self.voxels() {
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let v = [x as i64 + dx, y as i64 + dy, z as i64 + dz];
                        if (0..3).all(|i| v[i] >= 0 && v[i] < d[i]) {
                            out.set(v[0] as usize, v[1] as usize, v[2] as usize, true);
                        }
                    }
                }
            }
        }
        out
    }

    /// Voxels set here and not in `other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a & (b ^ 1)).collect(),
        }
    }

    /// The mask as a one-channel 0/1 grid, for trilinear interpolation.
    pub fn to_grid(&self) -> Grid {
        Grid {
            dims: self.dims,
            channels: 1,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}
