use lgm_core::gaussian::{Gaussian, GaussianSet};
use lgm_core::tensor::Tensor;
use lgm_web::{to_rgba, Demo};

#[test]
fn rgba_packing() {
    let rgb = Tensor::new(&[3, 1, 2], vec![0.0, 1.0, 0.5, 2.0, 1.0, -1.0]).unwrap();
    assert_eq!(to_rgba(&rgb), [0, 128, 255, 255, 255, 255, 0, 255]);
}

#[test]
fn renders_and_meshes_a_scene() {
    let demo = Demo::new(3, 6).unwrap();
    assert_eq!(demo.len(), 6);
    let a = demo.render(10.0, 30.0, 32).unwrap();
    assert_eq!(a.len(), 32 * 32 * 4);
    assert_eq!(a, demo.render(10.0, 30.0, 32).unwrap());
    assert_ne!(a, demo.render(10.0, 120.0, 32).unwrap());
    let d = demo.render_distorted(10.0, 30.0, 32, 0.4, 1).unwrap();
    assert_eq!(d.len(), a.len());
    assert_ne!(d, a);
    assert_eq!(demo.render_distorted(10.0, 30.0, 32, 0.0, 1).unwrap(), a);
}

#[test]
fn mesh_text_is_obj() {
    let set: GaussianSet = [Gaussian::isotropic([0.0; 3], 0.2, 1.0, [0.2, 0.4, 0.9])].into_iter().collect();
    let obj = Demo::from_set(set).obj_text(24, 4).unwrap();
    assert!(obj.lines().any(|l| l.starts_with("v ")));
    assert!(obj.lines().any(|l| l.starts_with("f ")));
}
