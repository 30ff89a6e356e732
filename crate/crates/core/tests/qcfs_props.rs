use proptest::prelude::*;
use qcfs_core::qcfs::{level, qcf_forward_noshift, qcfs_forward, qcfs_grad_scalar, qcfs_scalar};
use qcfs_core::{QcfsParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params() -> impl Strategy<Value = QcfsParams> {
    (1u32..65, 0.01f64..10.0, 0.0f64..0.999).prop_map(|(l, lam, s)| QcfsParams::new(l, lam, s).unwrap())
}

proptest! {
    #[test]
    fn output_lies_on_the_level_grid(p in params(), z in -20.0f64..20.0) {
        let a = qcfs_scalar(z, &p);
        let k = level(z, &p);
        prop_assert!(k.fract() == 0.0 && (0.0..=p.levels as f64).contains(&k));
        prop_assert_eq!(a, p.lambda * (k / p.levels as f64));
        prop_assert!((0.0..=p.lambda).contains(&a));
    }

    #[test]
    fn half_shift_is_idempotent(l in 1u32..65, lam in 0.01f64..10.0, z in -20.0f64..20.0) {
        let p = QcfsParams::new(l, lam, 0.5).unwrap();
        let a = qcfs_scalar(z, &p);
        prop_assert_eq!(qcfs_scalar(a, &p), a);
    }

    #[test]
    fn monotone_in_z(p in params(), z in -20.0f64..20.0, dz in 0.0f64..5.0) {
        prop_assert!(qcfs_scalar(z, &p) <= qcfs_scalar(z + dz, &p));
    }

    #[test]
    fn zero_shift_reduces_to_clip_floor(p in params(), zs in prop::collection::vec(-5.0f64..15.0, 1..20)) {
        let z = Tensor::vector(&zs);
        let zero = QcfsParams { shift: 0.0, ..p };
        prop_assert_eq!(qcfs_forward(&z, &zero), qcf_forward_noshift(&z, &p));
    }

    #[test]
    fn gradient_band_edges(p in params()) {
        let (lo, hi) = p.gradient_band();
        prop_assert_eq!(qcfs_grad_scalar(hi, &p), (0.0, 1.0));
        prop_assert_eq!(qcfs_grad_scalar(lo - 1e-9 * (1.0 + lo.abs()), &p), (0.0, 0.0));
    }
}

#[test]
fn closed_form_oracle_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100_000 {
        let l = rng.random_range(1..=64u32);
        let lam = rng.random_range(0.01..10.0);
        let phi = rng.random_range(0.0..0.999);
        let z = rng.random_range(-2.0 * lam..3.0 * lam);
        let p = QcfsParams::new(l, lam, phi).unwrap();
        let lf = l as f64;
        let oracle = lam * ((z * lf / lam + phi).floor() / lf).clamp(0.0, 1.0);
        assert_eq!(qcfs_scalar(z, &p), oracle, "z={z} λ={lam} L={l} φ={phi}");
    }
}
