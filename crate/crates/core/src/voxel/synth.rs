//! Deterministic synthetic occupancy grids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetItem;
use crate::error::{Error, Result};
use crate::grid::{GridShape, TokenGrid};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    Box,
    Sphere,
    LShape,
    Checkerboard,
}

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Box => "box",
            ShapeClass::Sphere => "sphere",
            ShapeClass::LShape => "l-shape",
            ShapeClass::Checkerboard => "checkerboard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(ShapeClass::Box),
            "sphere" => Ok(ShapeClass::Sphere),
            "l-shape" => Ok(ShapeClass::LShape),
            "checkerboard" => Ok(ShapeClass::Checkerboard),
            other => Err(Error::Config(format!("unknown shape class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ShapeClass>,
    pub n: usize,
    pub count_per_class: usize,
    pub seed: u64,
}

fn cube(n: usize) -> GridShape {
    GridShape::cube(n, 3).expect("positive side")
}

fn from_predicate(n: usize, occupied: impl Fn(usize, usize, usize) -> bool) -> TokenGrid {
    let mut tokens = Vec::with_capacity(n * n * n);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                tokens.push(occupied(x, y, z) as u8);
            }
        }
    }
    TokenGrid::from_parts_unchecked(cube(n), 2, tokens)
}

/// Axis-aligned box covering `lo[d] <= v[d] < hi[d]`.
pub fn box_grid(n: usize, lo: [usize; 3], hi: [usize; 3]) -> TokenGrid {
    from_predicate(n, |x, y, z| {
        let v = [x, y, z];
        (0..3).all(|d| lo[d] <= v[d] && v[d] < hi[d])
    })
}

/// Cells whose centers lie within distance `r` of `center`.
pub fn sphere_grid(n: usize, center: [f64; 3], r: f64) -> TokenGrid {
    from_predicate(n, |x, y, z| {
        let d2: f64 = [x, y, z]
            .iter()
            .zip(&center)
            .map(|(&v, c)| (v as f64 - c).powi(2))
            .sum();
        d2 <= r * r
    })
}

/// Parity pattern with cubic cells of side `cell`, shifted by `phase`.
pub fn checkerboard_grid(n: usize, cell: usize, phase: [usize; 3]) -> TokenGrid {
    from_predicate(n, |x, y, z| {
        let v = [x, y, z];
        (0..3).map(|d| (v[d] + phase[d]) / cell).sum::<usize>() % 2 == 0
    })
}

/// Union of two boxes sharing the corner region at `lo`.
pub fn l_shape_grid(n: usize, lo: [usize; 3], arm: [usize; 3], thick: usize) -> TokenGrid {
    let a = box_grid(n, lo, [lo[0] + arm[0], lo[1] + thick, lo[2] + thick]);
    let b = box_grid(n, lo, [lo[0] + thick, lo[1] + arm[1], lo[2] + arm[2]]);
    let tokens = a.tokens().iter().zip(b.tokens()).map(|(p, q)| p | q).collect();
    TokenGrid::from_parts_unchecked(cube(n), 2, tokens)
}

fn random_shape(class: ShapeClass, n: usize, rng: &mut impl Rng) -> TokenGrid {
    loop {
        let g = match class {
            ShapeClass::Box => {
                let mut lo = [0; 3];
                let mut hi = [0; 3];
                for d in 0..3 {
                    let ext = rng.random_range(2..=n);
                    lo[d] = rng.random_range(0..=n - ext);
                    hi[d] = lo[d] + ext;
                }
                box_grid(n, lo, hi)
            }
            ShapeClass::Sphere => {
                let half = (n as f64 - 1.0) / 2.0;
                let r = rng.random_range(1.0..(n as f64 / 2.0).max(1.5));
                let center = [0; 3].map(|_: i32| half + rng.random_range(-0.5..=0.5));
                sphere_grid(n, center, r)
            }
            ShapeClass::LShape => {
                let thick = rng.random_range(1..=(n / 4).max(1));
                let arm = [0; 3].map(|_: i32| rng.random_range(thick + 1..=n - 1));
                let lo = [0; 3].map(|d: usize| rng.random_range(0..=n - arm[d]));
                l_shape_grid(n, lo, arm, thick)
            }
            ShapeClass::Checkerboard => {
                let cell = rng.random_range(1..=2);
                let phase = [0; 3].map(|_: i32| rng.random_range(0..cell));
                checkerboard_grid(n, cell, phase)
            }
        };
        let occ = g.count(1);
        if occ > 0 && occ < g.len() || class == ShapeClass::Box && occ > 0 {
            return g;
        }
    }
}

/// `count_per_class` random shapes per class, labeled by class position.
pub fn make_synthetic_dataset(spec: &SynthSpec) -> Result<Vec<DatasetItem>> {
    if spec.n < 4 {
        return Err(Error::Config(format!("synthetic grids need N >= 4, got {}", spec.n)));
    }
    if spec.classes.is_empty() || spec.count_per_class == 0 {
        return Err(Error::Config("need at least one class and one item per class".into()));
    }
    let root = Stream::new(spec.seed);
    let mut items = Vec::new();
    for (c, &class) in spec.classes.iter().enumerate() {
        for j in 0..spec.count_per_class {
            let mut rng = root.child(c as u64).child(j as u64).seq();
            let grid = random_shape(class, spec.n, &mut rng);
            items.push(DatasetItem::new(format!("{}-{j:04}", class.name()), grid).with_class(c as u32));
        }
    }
    Ok(items)
}

/// Cells with a face neighbour in the other state.
pub fn boundary_cells(grid: &TokenGrid) -> Vec<usize> {
    let shape = grid.shape();
    let dims = shape.dims();
    let t = grid.tokens();
    (0..grid.len())
        .filter(|&i| {
            let c = shape.coord(i);
            (0..dims.len()).any(|d| {
                let mut q = c;
                let mut differs = false;
                if c[d] > 0 {
                    q[d] = c[d] - 1;
                    differs |= t[shape.index(&q[..dims.len()])] != t[i];
                }
                if c[d] + 1 < dims[d] {
                    q[d] = c[d] + 1;
                    differs |= t[shape.index(&q[..dims.len()])] != t[i];
                }
                differs
            })
        })
        .collect()
}

/// Copies of `grid` with exactly one boundary cell flipped.
pub fn boundary_variants(grid: &TokenGrid) -> Vec<TokenGrid> {
    boundary_cells(grid)
        .into_iter()
        .map(|i| {
            let mut tokens = grid.tokens().to_vec();
            tokens[i] ^= 1;
            TokenGrid::from_parts_unchecked(grid.shape().clone(), 2, tokens)
        })
        .collect()
}
