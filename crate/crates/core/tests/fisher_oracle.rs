mod common;

use ensvis_core::codebook::GmmParams;
use ensvis_core::fisher::{encode_fv, fisher_vector, gmm_id};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_blocks_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (k, d, t) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=32));
        let p = common::random_gmm(&mut rng, k, d);
        let x = Array2::from_shape_fn((t, d), |_| rng.random_range(-2.0..2.0));
        let fv = encode_fv(&p, x.view()).unwrap();
        let fd = common::finite_difference_fv(&p, &x, 1e-5);
        let err = common::relative_error(fv.values.as_slice().unwrap(), &fd);
        assert!(err < 1e-4, "K={k} D={d} T={t}: {err:e}");
    }
}

#[test]
fn single_precision_tracks_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = common::random_gmm(&mut rng, 3, 5);
    let x = Array2::from_shape_fn((20, 5), |_| rng.random_range(-1.0..1.0));
    let p32: GmmParams<f32> = p.cast();
    let a = fisher_vector(&p, x.view()).unwrap();
    let b = fisher_vector(&p32, x.mapv(|v| v as f32).view()).unwrap();
    for (u, v) in a.values.iter().zip(b.values.iter()) {
        assert!((u - *v as f64).abs() < 1e-4, "{u} vs {v}");
    }
    assert_eq!(a.gmm_id, gmm_id(&p));
}
