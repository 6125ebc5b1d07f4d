//! Randomized structural properties of the path primitives and the
//! simulator's determinism contract.

use proptest::prelude::*;

use pdc_core::path::{concat_control, lambda_metric, SampledPath};

fn values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, 1..max_len)
}

fn path(max_len: usize) -> impl Strategy<Value = SampledPath> {
    values(max_len).prop_map(|v| SampledPath::scalar(0.0, 0.25, v).unwrap())
}

proptest! {
    #[test]
    fn metric_axioms_on_shared_grids(a in path(8), b in path(8), c in path(8)) {
        let dab = lambda_metric(&a, &b).unwrap();
        let dba = lambda_metric(&b, &a).unwrap();
        let dac = lambda_metric(&a, &c).unwrap();
        let dcb = lambda_metric(&c, &b).unwrap();
        prop_assert!(dab >= 0.0);
        prop_assert_eq!(dab, dba);
        prop_assert_eq!(lambda_metric(&a, &a).unwrap(), 0.0);
        // identity of indiscernibles: zero distance forces equal paths
        if dab == 0.0 {
            prop_assert_eq!(a.values(), b.values());
            prop_assert_eq!(a.len(), b.len());
        }
        prop_assert!(dab <= dac + dcb + 1e-12);
    }

    #[test]
    fn bump_round_trip_restores_the_path(p in path(8), h in -3.0..3.0f64) {
        let back = p.bump(&[h]).unwrap().bump(&[-h]).unwrap();
        // all earlier nodes are untouched bit for bit; the last value comes
        // back up to one rounding step of the add/subtract pair
        prop_assert_eq!(&back.values()[..p.len() - 1], &p.values()[..p.len() - 1]);
        let x = p.last_scalar();
        prop_assert!((back.last_scalar() - x).abs() <= 1e-15 * x.abs().max(1.0));
    }

    #[test]
    fn flat_extension_is_additive(p in path(6), a in 0i64..5, b in 0i64..5) {
        let dt = p.dt();
        let one = p
            .flat_extend(a as f64 * dt)
            .unwrap()
            .flat_extend(b as f64 * dt)
            .unwrap();
        let both = p.flat_extend((a + b) as f64 * dt).unwrap();
        prop_assert_eq!(one, both);
    }

    #[test]
    fn concatenation_restricts_to_its_pieces(z in path(6), a_vals in values(6), split in 0usize..6) {
        let dt = z.dt();
        let split = split.min(z.len());
        let t = z.t0() + split as f64 * dt;
        let a = SampledPath::scalar(t, dt, a_vals).unwrap();
        let spliced = concat_control(&z, &a, t).unwrap();
        prop_assert_eq!(spliced.len(), split + a.len());
        for k in 0..split {
            prop_assert_eq!(spliced.scalar_at(k), z.scalar_at(k));
        }
        for k in 0..a.len() {
            prop_assert_eq!(spliced.scalar_at(split + k), a.scalar_at(k));
        }
    }

    #[test]
    fn substitute_last_is_a_projection(p in path(8), a in -5.0..5.0f64, b in -5.0..5.0f64) {
        let once = p.substitute_last(&[b]).unwrap();
        let twice = p.substitute_last(&[a]).unwrap().substitute_last(&[b]).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.last_scalar(), b);
    }

    #[test]
    fn seeded_batches_are_bit_reproducible(seed in any::<u64>(), n in 1usize..32) {
        use pdc_core::sim::{batch, batch_sequential, path_rng};
        use rand_distr::Distribution;
        let draw = |i: usize| {
            let mut rng = path_rng(seed, i);
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            Ok(z)
        };
        let a = batch(n, draw).unwrap();
        let b = batch_sequential(n, draw).unwrap();
        prop_assert_eq!(a, b);
    }
}
