use std::sync::OnceLock;

type Mat = [[i32; 3]; 3];

/// One of the 24 orientation-preserving symmetries of the cube.
///
/// Ids enumerate axis permutations in lexicographic order, then sign
/// patterns, keeping those with determinant +1; id 0 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pose24(u8);

fn det(m: &Mat) -> i32 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn table() -> &'static [Mat; 24] {
    static TABLE: OnceLock<[Mat; 24]> = OnceLock::new();
    TABLE.get_or_init(|| {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut out = Vec::with_capacity(24);
        for perm in PERMS {
            for signs in 0..8u32 {
                let mut m = [[0; 3]; 3];
                for (row, &col) in perm.iter().enumerate() {
                    m[row][col] = if signs >> row & 1 == 1 { -1 } else { 1 };
                }
                if det(&m) == 1 {
                    out.push(m);
                }
            }
        }
        out.try_into().expect("exactly 24 rotations")
    })
}

impl Pose24 {
    pub const IDENTITY: Pose24 = Pose24(0);

    pub fn new(id: u8) -> Option<Self> {
        (id < 24).then_some(Pose24(id))
    }

    pub fn all() -> impl Iterator<Item = Pose24> {
        (0..24).map(Pose24)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn matrix(self) -> [[i32; 3]; 3] {
        table()[self.0 as usize]
    }

    fn from_matrix(m: &Mat) -> Pose24 {
        let id = table().iter().position(|t| t == m).expect("closed under composition");
        Pose24(id as u8)
    }

    /// `self` applied after `other`.
    pub fn compose(self, other: Pose24) -> Pose24 {
        let (a, b) = (self.matrix(), other.matrix());
        let mut m = [[0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Pose24::from_matrix(&m)
    }

    pub fn inverse(self) -> Pose24 {
        let a = self.matrix();
        let mut m = [[0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[j][i];
            }
        }
        Pose24::from_matrix(&m)
    }

    /// Rotate a cell of an `n^3` grid about the grid center.
    pub fn apply(self, p: [u32; 3], n: usize) -> [u32; 3] {
        let m = self.matrix();
        let span = n as i64 - 1;
        // doubled coordinates keep the half-integer center exact
        let c: [i64; 3] = [0, 1, 2].map(|d| 2 * p[d] as i64 - span);
        [0, 1, 2].map(|i| {
            let r: i64 = (0..3).map(|k| m[i][k] as i64 * c[k]).sum();
            ((r + span) / 2) as u32
        })
    }
}
