use dewarp_core::geometry::{
    flat_page, forward_map, generate_sample, invert_forward_map, resample, synthesize_sample, Background,
    DeformationField, FlatDocSpec, DEFAULT_SIZE, WarpParams, INVERT_MAX_ITER, INVERT_TOL,
};
use dewarp_core::Tensor;

/// Mean absolute difference over the pixels at least `margin` away from the border.
fn interior_mae(a: &Tensor<f32>, b: &Tensor<f32>, margin: usize) -> f64 {
    let [c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2]];
    let (mut sum, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for i in margin..h - margin {
            for j in margin..w - margin {
                let k = (ch * h + i) * w + j;
                sum += (a.data()[k] as f64 - b.data()[k] as f64).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn inverse_residual_is_tiny_for_sampled_warps() {
    let n = 48;
    for seed in 0..50 {
        let p = WarpParams::sample(seed);
        let field = invert_forward_map(&p, n, n, INVERT_TOL, INVERT_MAX_ITER).unwrap();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let (x, y) = field.at(i, j);
                let (fx, fy) = forward_map(&p, x, y).unwrap();
                let (gx, gy) = ((j as f64 + 0.5) / n as f64, (i as f64 + 0.5) / n as f64);
                worst = worst.max((fx - gx).abs()).max((fy - gy).abs());
            }
        }
        assert!(worst < 1e-6, "seed {seed}: residual {worst:e}");
    }
}

#[test]
fn rectifying_with_the_true_field_recovers_the_page() {
    // At the generator's default resolution; at 64-128 px the two bilinear
    // passes over one-pixel strokes alone cost about 0.03.
    let size = DEFAULT_SIZE;
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let s = generate_sample(size, seed).unwrap();
        let flat = flat_page(size, seed).unwrap();
        let rect = resample(&s.image, &s.field).unwrap();
        let err = interior_mae(&rect, &flat, 8);
        worst = worst.max(err);
    }
    println!("worst interior error {worst:.4}");
    assert!(worst < 0.02, "{worst}");
}

#[test]
fn identity_params_behave_as_identity() {
    let p = WarpParams::identity();
    assert_eq!(forward_map(&p, 0.3, 0.7).unwrap(), (0.3, 0.7));
    let f = invert_forward_map(&p, 20, 30, INVERT_TOL, INVERT_MAX_ITER).unwrap();
    assert_eq!(f, DeformationField::identity(20, 30));
    let spec = FlatDocSpec::random(40, 40, 3);
    let s = synthesize_sample(&spec, &p, &Background::Noise.render(40, 40, 3)).unwrap();
    assert_eq!(resample(&s.image, &s.field).unwrap(), s.image);
}
