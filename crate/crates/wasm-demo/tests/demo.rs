use bino_wasm::{chance_levels, match_scene, pixel_descriptors, Scene};
use bino_core::fusion::TokenGeometry;

#[test]
fn scene_is_deterministic_and_sized() {
    let a = Scene::build(3, 8, true).unwrap();
    let b = Scene::build(3, 8, true).unwrap();
    assert_eq!(a.pair(), b.pair());
    assert_eq!(a.left_rgba().len(), 4 * a.width() * a.height());
    assert_ne!(Scene::build(4, 8, true).unwrap().pair(), a.pair());
}

#[test]
fn pixel_descriptors_are_unit_length() {
    let s = Scene::build(1, 4, false).unwrap();
    let geo = TokenGeometry::new(s.height(), s.width(), 4, 4).unwrap();
    let m = pixel_descriptors(&s.pair().left, &geo).unwrap();
    for r in 0..m.rows {
        for p in 0..m.cols {
            let n: f32 = m.at(r, p).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn clean_pair_matches_with_sgm() {
    let s = Scene::build(11, 8, false).unwrap();
    let geo = TokenGeometry::new(s.height(), s.width(), 4, 4).unwrap();
    let m = match_scene(s.pair(), &geo, 8, 12, 0.1, 0.8).unwrap();
    assert_eq!(m.wta.len(), m.rows * m.cols);
    assert!(m.sgm_pck1 > 80.0, "sgm pck1 {}", m.sgm_pck1);
    let (rc, g1) = chance_levels(&geo).unwrap();
    assert!((rc - 1.0 / 12.0).abs() < 1e-9 && (g1 - 3.0 / 40.0).abs() < 1e-9);
}
