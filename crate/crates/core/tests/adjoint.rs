mod common;

use common::{inner, random_vec, rng};
use fsld_core::forward::{sample_ctfs, sample_uniform_poses, FourierVolume, Interp, Projector};
use fsld_core::grid::GridSpec;
use num_complex::Complex64;

#[test]
fn project_backproject_inner_product_identity() {
    let spec = GridSpec::new(8).unwrap();
    let mut r = rng(11);
    for mode in [Interp::Nearest, Interp::Trilinear] {
        let proj = Projector::new(spec, 3, mode).unwrap();
        let poses = sample_uniform_poses(120, 2.0, 5);
        let ctfs = sample_ctfs(120, &common::ctf_dist(), 6).unwrap();
        let mut worst = 0.0f64;
        for (trial, pose) in poses.iter().enumerate() {
            let v = FourierVolume::from_values(spec, random_vec(spec.volume_len(), &mut r)).unwrap();
            let y = random_vec(spec.image_len(), &mut r);
            let ctf = (trial % 2 == 0).then_some(&ctfs[trial]);
            let lhs = inner(&proj.project(&v, pose, ctf).unwrap(), &y);
            let rhs = inner(&v.values, &proj.backproject(&y, pose, ctf).unwrap().values);
            worst = worst.max((lhs - rhs).norm() / lhs.norm());
        }
        assert!(worst <= 1e-12, "{mode:?}: worst relative mismatch {worst:e}");
    }
}

#[test]
fn zero_image_backprojects_to_zero() {
    let spec = GridSpec::new(8).unwrap();
    let proj = Projector::new(spec, 3, Interp::Trilinear).unwrap();
    let pose = sample_uniform_poses(1, 1.0, 2)[0];
    let out = proj.backproject(&vec![Complex64::new(0.0, 0.0); 64], &pose, None).unwrap();
    assert!(out.values.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
}

#[test]
fn shift_only_changes_phase() {
    let spec = GridSpec::new(8).unwrap();
    let v = common::random_volume(spec, 3);
    for mode in [Interp::Nearest, Interp::Trilinear] {
        let proj = Projector::new(spec, 3, mode).unwrap();
        let shifted = sample_uniform_poses(10, 3.0, 9);
        for p in shifted {
            let mut unshifted = p;
            unshifted.t = [0.0, 0.0];
            let a = proj.project(&v, &p, None).unwrap();
            let b = proj.project(&v, &unshifted, None).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x.norm() - y.norm()).abs() <= 1e-14 * (1.0 + y.norm()));
            }
        }
    }
}
