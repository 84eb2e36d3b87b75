use clipmimic_web::{perturbed_rating, rating_reward, render_frames, simulate};

#[test]
fn simulation_is_seeded_and_renders_every_step() {
    let a = simulate(3, 20, 0.0, 0.0, true).unwrap();
    let b = simulate(3, 20, 0.0, 0.0, true).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, simulate(4, 20, 0.0, 0.0, true).unwrap());
    let frames = render_frames(&a);
    let n = clipmimic_web::frame_size();
    assert_eq!(frames.len(), 20 * n * n);
    assert!(simulate(0, 0, 0.0, 0.0, false).is_err());
}

#[test]
fn rating_drops_with_perturbation() {
    let t = simulate(1, 30, -0.5, 0.5, false).unwrap();
    assert_eq!(perturbed_rating(&t, 0.0, 0.0).unwrap(), 5);
    let mut last = 5;
    for k in 1..40 {
        let r = perturbed_rating(&t, 0.25 * k as f64, 0.0).unwrap();
        assert!(r <= last);
        last = r;
    }
    assert_eq!(last, 1);
}

#[test]
fn distribution_maps_to_reward() {
    assert_eq!(rating_reward(&[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(), (5.0, 1.0));
    assert_eq!(rating_reward(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), (1.0, 0.0));
    let (r, w) = rating_reward(&[0.2; 5]).unwrap();
    assert!((r - 3.0).abs() < 1e-12 && (w - 0.5).abs() < 1e-12);
    assert!(rating_reward(&[0.5, 0.5]).is_err());
    assert!(rating_reward(&[0.5, 0.5, 0.5, 0.0, 0.0]).is_err());
}
