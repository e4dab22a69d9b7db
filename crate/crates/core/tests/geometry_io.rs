use std::collections::HashSet;

use proptest::prelude::*;
use voxdiff::io::{
    decode_field, decode_grid, decode_mask, decode_model, encode_field, encode_grid, encode_grid_packed, encode_mask,
    encode_model, load_manifest, write_dataset,
};
use voxdiff::voxel::synth::{box_grid, make_synthetic_dataset, sphere_grid, ShapeClass, SynthSpec};
use voxdiff::voxel::{best_pose_align, voxel_chamfer};
use voxdiff::{DatasetItem, Error, GridShape, MlpArch, MlpDenoiser, Pose24, ProbField, SparseVoxels, Stream, TokenGrid};

fn brute_chamfer(a: &[[u32; 3]], b: &[[u32; 3]], n: usize) -> f64 {
    let d2 = |p: &[u32; 3], q: &[u32; 3]| -> f64 { (0..3).map(|d| (p[d] as f64 - q[d] as f64).powi(2)).sum() };
    let directed = |x: &[[u32; 3]], y: &[[u32; 3]]| {
        x.iter().map(|p| y.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    (directed(a, b) + directed(b, a)) / (2.0 * (n * n) as f64)
}

fn cells(n: u32, max: usize) -> impl Strategy<Value = Vec<[u32; 3]>> {
    prop::collection::hash_set(prop::array::uniform3(0..n), 1..max).prop_map(|s| s.into_iter().collect())
}

fn tromino() -> SparseVoxels {
    SparseVoxels::new(5, vec![[0, 0, 0], [1, 0, 0], [0, 2, 1]]).unwrap()
}

proptest! {
    #[test]
    fn sparse_dense_round_trip(tokens in prop::collection::vec(0u8..2, 64)) {
        let g = TokenGrid::new(GridShape::cube(4, 3).unwrap(), 2, tokens).unwrap();
        let sv = SparseVoxels::from_grid(&g).unwrap();
        prop_assert_eq!(sv.len(), g.count(1));
        prop_assert_eq!(sv.to_grid(), g);
    }

    #[test]
    fn chamfer_matches_brute_force(a in cells(6, 12), b in cells(6, 12)) {
        let (sa, sb) = (SparseVoxels::new(6, a.clone()).unwrap(), SparseVoxels::new(6, b.clone()).unwrap());
        let c = voxel_chamfer(&sa, &sb).unwrap();
        prop_assert!((c - brute_chamfer(&a, &b, 6)).abs() < 1e-12);
        prop_assert_eq!(c, voxel_chamfer(&sb, &sa).unwrap());
        prop_assert_eq!(c == 0.0, sa == sb);
    }

    #[test]
    fn pose_preserves_count_and_inverts(a in cells(5, 20), id in 0u8..24) {
        let sv = SparseVoxels::new(5, a).unwrap();
        let p = Pose24::new(id).unwrap();
        let r = sv.apply_pose(p);
        prop_assert_eq!(r.len(), sv.len());
        prop_assert_eq!(r.apply_pose(p.inverse()), sv);
    }

    #[test]
    fn grid_files_round_trip(dims in prop::collection::vec(1usize..6, 1..4), k in 2usize..6, seed in any::<u64>()) {
        let shape = GridShape::new(&dims).unwrap();
        let mut rng = Stream::new(seed).seq();
        let tokens = (0..shape.len()).map(|_| rand::Rng::random_range(&mut rng, 0..k as u8)).collect();
        let g = TokenGrid::new(shape.clone(), k, tokens).unwrap();
        let bytes = encode_grid(&g);
        let back = decode_grid(&bytes).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(encode_grid(&back), bytes);

        let bin = TokenGrid::new(shape.clone(), 2, g.tokens().iter().map(|&t| t % 2).collect()).unwrap();
        let packed = encode_grid_packed(&bin).unwrap();
        let back = decode_grid(&packed).unwrap();
        prop_assert_eq!(&back, &bin);
        prop_assert_eq!(encode_grid_packed(&back).unwrap(), packed);

        let mask: Vec<bool> = g.tokens().iter().map(|&t| t == 0).collect();
        let m = encode_mask(&shape, &mask).unwrap();
        let (s2, mask2) = decode_mask(&m).unwrap();
        prop_assert_eq!(&s2, &shape);
        prop_assert_eq!(&mask2, &mask);
        prop_assert_eq!(encode_mask(&s2, &mask2).unwrap(), m);
    }

    #[test]
    fn field_files_round_trip(len in 1usize..20, k in 1usize..5, seed in any::<u64>()) {
        let mut rng = Stream::new(seed).seq();
        let vals: Vec<f64> = (0..len * k).map(|_| rand::Rng::random::<f32>(&mut rng) as f64).collect();
        let f = ProbField::new(GridShape::new(&[len]).unwrap(), k, vals).unwrap();
        let bytes = encode_field(&f);
        let back = decode_field(&bytes).unwrap();
        prop_assert_eq!(back.as_slice(), f.as_slice());
        prop_assert_eq!(encode_field(&back), bytes);
    }
}

#[test]
fn sparse_examples() {
    let shape = GridShape::cube(3, 3).unwrap();
    let empty = SparseVoxels::from_grid(&TokenGrid::filled(shape.clone(), 2, 0).unwrap()).unwrap();
    assert!(empty.is_empty());
    let full = SparseVoxels::from_grid(&TokenGrid::filled(GridShape::cube(2, 3).unwrap(), 2, 1).unwrap()).unwrap();
    assert_eq!(full.len(), 8);
    assert!(matches!(SparseVoxels::new(3, vec![[1, 1, 1], [1, 1, 1]]), Err(Error::Validation(_))));
    assert!(matches!(SparseVoxels::new(3, vec![[3, 0, 0]]), Err(Error::Validation(_))));
    assert!(matches!(SparseVoxels::from_grid(&TokenGrid::filled(shape, 3, 0).unwrap()), Err(Error::Shape(_))));
    assert!(SparseVoxels::from_grid(&TokenGrid::filled(GridShape::new(&[2, 3, 3]).unwrap(), 2, 0).unwrap()).is_err());
}

#[test]
fn rotation_group() {
    assert_eq!(Pose24::IDENTITY.matrix(), [[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
    assert!(Pose24::new(24).is_none());
    let t = tromino();
    assert_eq!(t.apply_pose(Pose24::IDENTITY), t);
    let images: HashSet<SparseVoxels> = Pose24::all().map(|p| t.apply_pose(p)).collect();
    assert_eq!(images.len(), 24);
    let mats: HashSet<[[i32; 3]; 3]> = Pose24::all().map(|p| p.matrix()).collect();
    assert_eq!(mats.len(), 24);
    for a in Pose24::all() {
        assert_eq!(a.compose(a.inverse()), Pose24::IDENTITY);
        for b in Pose24::all() {
            // composition agrees with sequential application
            assert_eq!(t.apply_pose(b).apply_pose(a), t.apply_pose(a.compose(b)));
        }
    }
}

#[test]
fn chamfer_examples() {
    let a = SparseVoxels::new(2, vec![[0, 0, 0]]).unwrap();
    let b = SparseVoxels::new(2, vec![[1, 0, 0]]).unwrap();
    assert_eq!(voxel_chamfer(&a, &b).unwrap(), 0.25);
    let empty = SparseVoxels::new(2, vec![]).unwrap();
    assert!(matches!(voxel_chamfer(&a, &empty), Err(Error::Domain(_))));
    let other = SparseVoxels::new(3, vec![[0, 0, 0]]).unwrap();
    assert!(matches!(voxel_chamfer(&a, &other), Err(Error::Shape(_))));
}

#[test]
fn alignment_recovers_rotation() {
    let t = tromino();
    for p in Pose24::all() {
        let rotated = t.apply_pose(p);
        let al = best_pose_align(&rotated, &t).unwrap();
        assert_eq!(al.chamfer, 0.0);
        assert_eq!(al.pose_id, p.inverse().id());
        assert!(al.chamfer <= voxel_chamfer(&rotated, &t).unwrap());
    }
    let cube = SparseVoxels::from_grid(&box_grid(6, [1, 1, 1], [5, 5, 5])).unwrap();
    let al = best_pose_align(&cube, &cube).unwrap();
    assert_eq!((al.pose_id, al.chamfer), (0, 0.0));
}

#[test]
fn synthetic_shapes() {
    for n in [16usize, 24, 32] {
        let r = n as f64 / 3.0;
        let c = (n as f64 - 1.0) / 2.0;
        let vol = sphere_grid(n, [c; 3], r).count(1) as f64;
        let exact = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!((vol / exact - 1.0).abs() < 0.1, "{n}: {vol} vs {exact}");
    }
    assert_eq!(box_grid(5, [0; 3], [5; 3]).count(1), 125);

    let spec = SynthSpec {
        classes: vec![ShapeClass::Box, ShapeClass::Sphere, ShapeClass::LShape, ShapeClass::Checkerboard],
        n: 8,
        count_per_class: 5,
        seed: 11,
    };
    let a = make_synthetic_dataset(&spec).unwrap();
    let b = make_synthetic_dataset(&spec).unwrap();
    assert_eq!(a.len(), 20);
    let bytes = |items: &[DatasetItem]| items.iter().flat_map(|i| encode_grid(&i.grid)).collect::<Vec<u8>>();
    assert_eq!(bytes(&a), bytes(&b));
    for item in &a {
        let occ = item.grid.count(1);
        assert!(occ > 0);
    }
    assert!(make_synthetic_dataset(&SynthSpec { n: 3, ..spec.clone() }).is_err());
    assert!(make_synthetic_dataset(&SynthSpec { classes: vec![], ..spec }).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let items = vec![
        DatasetItem::new("a", box_grid(4, [0; 3], [2; 3])).with_class(0),
        DatasetItem::new("b", sphere_grid(4, [1.5; 3], 1.2)).with_class(1).with_weight(2.5),
    ];
    let names = vec!["box".to_string(), "sphere".to_string()];
    let path = write_dataset(dir.path(), &items, &names).unwrap();
    let (manifest, loaded) = load_manifest(&path).unwrap();
    assert_eq!(manifest.classes, names);
    assert_eq!(loaded, items);
    let first = std::fs::read(&path).unwrap();
    write_dataset(dir.path(), &loaded, &names).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    std::fs::write(&path, "{\"shape\": [4,4,4], \"k\": 2, \"items\": [], \"bogus\": 1}").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Format { .. })));
}

#[test]
fn malformed_files_report_offsets() {
    let g = box_grid(3, [0; 3], [2; 3]);
    let mut bytes = encode_grid(&g);
    bytes.push(0);
    assert!(matches!(decode_grid(&bytes), Err(Error::Format { offset, .. }) if offset == bytes.len() - 1));
    bytes.pop();
    let last = bytes.len() - 1;
    bytes[last] = 7;
    assert!(matches!(decode_grid(&bytes), Err(Error::Format { offset, .. }) if offset == last));
    assert!(matches!(decode_grid(b"DVXQ"), Err(Error::Format { offset: 0, .. })));
    let mut v = encode_grid(&g);
    v[4] = 9;
    assert!(matches!(decode_grid(&v), Err(Error::Format { offset: 4, .. })));
    assert!(matches!(decode_grid(&encode_grid(&g)[..10]), Err(Error::Format { .. })));

    // 27 bits leave five padding bits in the last byte
    let mut packed = encode_grid_packed(&g).unwrap();
    *packed.last_mut().unwrap() |= 0x80;
    assert!(matches!(decode_grid(&packed), Err(Error::Format { .. })));
    assert!(encode_grid_packed(&TokenGrid::filled(GridShape::new(&[3]).unwrap(), 3, 0).unwrap()).is_err());
    assert!(decode_mask(&encode_grid(&g)).is_err());
    assert!(decode_field(&encode_grid(&g)).is_err());
    assert!(decode_model(&encode_grid(&g)).is_err());
}

#[test]
fn model_checkpoint_round_trip() {
    let shape = GridShape::cube(3, 3).unwrap();
    for time in [true, false] {
        let mut arch = MlpArch::new(&shape, 2, 7, 3);
        arch.time_conditioned = time;
        let m = MlpDenoiser::new(arch, &Stream::new(5)).unwrap();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.arch(), m.arch());
        assert_eq!(back.params(), m.params());
        assert_eq!(encode_model(&back), bytes);
        let mut cut = bytes.clone();
        cut.truncate(bytes.len() - 8);
        assert!(matches!(decode_model(&cut), Err(Error::Format { .. })));
    }
}
