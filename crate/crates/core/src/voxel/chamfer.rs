use rayon::prelude::*;
use serde::Serialize;

use super::{Pose24, SparseVoxels};
use crate::error::{Error, Result};

/// Dense occupancy lattice for exact nearest-neighbour queries.
struct Lattice {
    n: usize,
    occupied: Vec<bool>,
}

impl Lattice {
    fn new(sv: &SparseVoxels) -> Self {
        let n = sv.n();
        let mut occupied = vec![false; n * n * n];
        for p in sv.positions() {
            occupied[(p[0] as usize * n + p[1] as usize) * n + p[2] as usize] = true;
        }
        Lattice { n, occupied }
    }

    fn at(&self, x: i64, y: i64, z: i64) -> bool {
        let n = self.n as i64;
        (0..n).contains(&x)
            && (0..n).contains(&y)
            && (0..n).contains(&z)
            && self.occupied[((x * n + y) * n + z) as usize]
    }

    /// Squared lattice distance from `p` to the nearest occupied cell.
    /// Searches Chebyshev shells outward until no closer cell can exist.
    fn nearest_sq(&self, p: [u32; 3]) -> i64 {
        let (px, py, pz) = (p[0] as i64, p[1] as i64, p[2] as i64);
        let mut best = i64::MAX;
        for r in 0..self.n as i64 {
            if r * r >= best {
                break;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    let edge = dx.abs() == r || dy.abs() == r;
                    let dzs: Box<dyn Iterator<Item = i64>> = if edge {
                        Box::new(-r..=r)
                    } else {
                        Box::new([-r, r].into_iter())
                    };
                    for dz in dzs {
                        if self.at(px + dx, py + dy, pz + dz) {
                            best = best.min(dx * dx + dy * dy + dz * dz);
                        }
                    }
                }
            }
        }
        best
    }
}

fn directed(from: &SparseVoxels, to: &Lattice) -> f64 {
    let total: i64 = from.positions().par_iter().map(|&p| to.nearest_sq(p)).sum();
    total as f64 / from.len() as f64
}

/// Symmetric chamfer distance with squared Euclidean base distance on
/// cell coordinates divided by `N`: the average of the two directed means.
pub fn voxel_chamfer(a: &SparseVoxels, b: &SparseVoxels) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("chamfer distance of an empty set".into()));
    }
    if a.n() != b.n() {
        return Err(Error::Shape(format!("resolutions differ ({} vs {})", a.n(), b.n())));
    }
    let scale = (a.n() * a.n()) as f64;
    let ab = directed(a, &Lattice::new(b));
    let ba = directed(b, &Lattice::new(a));
    Ok((ab + ba) / (2.0 * scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Alignment {
    pub pose_id: u8,
    pub chamfer: f64,
}

/// Rotation of `generated` closest to `reference`; ties go to the lowest pose id.
pub fn best_pose_align(generated: &SparseVoxels, reference: &SparseVoxels) -> Result<Alignment> {
    let scores: Vec<f64> = Pose24::all()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&p| voxel_chamfer(&generated.apply_pose(p), reference))
        .collect::<Result<_>>()?;
    let (best, chamfer) = scores
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &c)| if c < acc.1 { (i, c) } else { acc });
    Ok(Alignment {
        pose_id: best as u8,
        chamfer,
    })
}
