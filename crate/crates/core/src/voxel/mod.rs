//! Sparse occupancy sets, cube rotations, chamfer distance and synthetic shapes.

mod chamfer;
mod pose;
pub mod synth;

pub use chamfer::{best_pose_align, voxel_chamfer, Alignment};
pub use pose::Pose24;

use crate::error::{Error, Result};
use crate::grid::{GridShape, TokenGrid};

/// Occupied cells of an `N^3` grid, kept sorted in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparseVoxels {
    n: usize,
    positions: Vec<[u32; 3]>,
}

impl SparseVoxels {
    pub fn new(n: usize, mut positions: Vec<[u32; 3]>) -> Result<Self> {
        if n == 0 || n > u32::MAX as usize {
            return Err(Error::Shape(format!("invalid resolution {n}")));
        }
        if let Some(p) = positions.iter().find(|p| p.iter().any(|&c| c as usize >= n)) {
            return Err(Error::Validation(format!("position {p:?} outside a {n}^3 grid")));
        }
        positions.sort_unstable();
        if let Some(w) = positions.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("duplicate position {:?}", w[0])));
        }
        Ok(SparseVoxels { n, positions })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn positions(&self) -> &[[u32; 3]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Occupied cells of a binary cubic 3-D grid.
    pub fn from_grid(grid: &TokenGrid) -> Result<Self> {
        let shape = grid.shape();
        let n = match (grid.k(), shape.ndim(), shape.side()) {
            (2, 3, Some(n)) => n,
            _ => {
                return Err(Error::Shape(
                    "sparse conversion needs a binary cubic 3-D grid".into(),
                ))
            }
        };
        let positions = grid
            .tokens()
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == 1)
            .map(|(i, _)| {
                let c = shape.coord(i);
                [c[0] as u32, c[1] as u32, c[2] as u32]
            })
            .collect();
        Ok(SparseVoxels { n, positions })
    }

    pub fn to_grid(&self) -> TokenGrid {
        let shape = GridShape::cube(self.n, 3).expect("nonzero side");
        let mut tokens = vec![0u8; shape.len()];
        for p in &self.positions {
            tokens[shape.index(&[p[0] as usize, p[1] as usize, p[2] as usize])] = 1;
        }
        TokenGrid::from_parts_unchecked(shape, 2, tokens)
    }

    /// Rotate about the grid center.
    pub fn apply_pose(&self, pose: Pose24) -> SparseVoxels {
        let positions = self.positions.iter().map(|&p| pose.apply(p, self.n)).collect();
        SparseVoxels::new(self.n, positions).expect("rotation is a bijection of the lattice")
    }
}
