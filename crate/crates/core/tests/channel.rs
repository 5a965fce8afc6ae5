use feel_core::channel::*;
use feel_core::rng::{child_rng, rng_from_seed};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;

fn array(nt: usize, nc: usize) -> ArrayConfig {
    ArrayConfig {
        num_tx_antennas: nt,
        num_subcarriers: nc,
        ..ArrayConfig::desk()
    }
}

#[test]
fn steering_vectors_are_unit_modulus_with_exact_first_entry() {
    let mut rng = rng_from_seed(3);
    for _ in 0..1000 {
        let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let nt = rng.random_range(1..=64);
        let a = steering_vector(theta, &array(nt, 8));
        assert_eq!(a.len(), nt);
        assert_eq!(a[0], Complex64::new(1.0, 0.0));
        for z in &a {
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn radial_distribution_matches_annulus_cdf() {
    let (r0, r1) = (10.0, 100.0);
    let mut rng = rng_from_seed(11);
    let mut radii: Vec<f64> = (0..10_000)
        .map(|i| draw_ue_geometry(&mut rng, r1, r0, 5.0, i).unwrap().distance_m())
        .collect();
    radii.sort_by(f64::total_cmp);
    let n = radii.len() as f64;
    let cdf = |r: f64| (r * r - r0 * r0) / (r1 * r1 - r0 * r0);
    let ks = radii
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let f = cdf(r);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "KS distance {ks}");
    assert!(radii.iter().all(|&r| (r0..=r1).contains(&r)));
}

#[test]
fn mean_path_power_is_one() {
    for scenario in [ScenarioParams::deploy(), ScenarioParams::pretrain()] {
        let total: f64 = scenario.cluster_powers().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut rng = rng_from_seed(5);
        let geo = CellGeometry::default();
        let p = ue_placement(&scenario, &geo, 9, 1).unwrap();
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let r = draw_ue_scenario(&p, &scenario, &mut rng);
                r.gains.iter().map(|g| g.norm_sqr()).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        // Sum of |alpha|^2 has mean 1; the Monte-Carlo standard error here is
        // about 0.01.
        assert!((mean - 1.0).abs() < 0.05, "{} mean power {mean}", scenario.label);
    }
}

#[test]
fn mean_power_per_subcarrier_is_nt() {
    let cfg = array(8, 8);
    let scenario = ScenarioParams::deploy();
    let geo = CellGeometry::default();
    let mut rng = rng_from_seed(21);
    let n = 10_000;
    let mut per_sc = vec![0.0; cfg.num_subcarriers];
    for i in 0..n {
        let p = ue_placement(&scenario, &geo, 4, 1 + (i % 50)).unwrap();
        let h = sample_channel(&draw_ue_scenario(&p, &scenario, &mut rng), &cfg);
        for (c, acc) in per_sc.iter_mut().enumerate() {
            *acc += h.column(c).iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
    }
    for acc in per_sc {
        let m = acc / n as f64;
        assert!((m - 8.0).abs() <= 0.8, "mean per-subcarrier power {m}");
    }
}

#[test]
fn random_realizations_are_finite_over_seeds() {
    let cfg = array(8, 8);
    let geo = CellGeometry::default();
    for seed in 0..1000u64 {
        for scenario in [ScenarioParams::deploy(), ScenarioParams::pretrain()] {
            let p = ue_placement(&scenario, &geo, seed, 1).unwrap();
            let h = sample_channel(&draw_ue_scenario(&p, &scenario, &mut rng_from_seed(seed)), &cfg);
            assert_eq!((h.nt, h.nc, h.data.len()), (8, 8, 64));
            assert_eq!(h.domain, Domain::SpatialFrequency);
            assert!(h.is_finite());
        }
    }
}

#[test]
fn distant_ues_are_less_alike_than_a_ue_with_itself() {
    let cfg = array(8, 8);
    let scenario = ScenarioParams::deploy();
    let geo = CellGeometry {
        moving_radius_m: 1.0,
        ..CellGeometry::default()
    };
    // First pair of UEs farther apart than the correlation distance.
    let placements: Vec<UePlacement> = (1..=20).map(|i| ue_placement(&scenario, &geo, 7, i).unwrap()).collect();
    let (a, b) = placements
        .iter()
        .flat_map(|a| placements.iter().map(move |b| (a, b)))
        .find(|(a, b)| {
            let d = (a.center_xy_m[0] - b.center_xy_m[0]).hypot(a.center_xy_m[1] - b.center_xy_m[1]);
            d > 5.0 * scenario.correlation_distance_m
        })
        .unwrap();
    let profiles = |p: &UePlacement| -> Vec<Vec<f64>> {
        let ds = ue_dataset(p, &scenario, &cfg, 100, 7).unwrap();
        ds.train.iter().map(|h| h.angular_profile()).collect()
    };
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nx * ny)
    };
    let mean_cos = |xs: &[Vec<f64>], ys: &[Vec<f64>], skip_diag: bool| {
        let mut acc = 0.0;
        let mut n = 0;
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                if skip_diag && i == j {
                    continue;
                }
                acc += cos(x, y);
                n += 1;
            }
        }
        acc / n as f64
    };
    let (pa, pb) = (profiles(a), profiles(b));
    let within = mean_cos(&pa, &pa, true);
    let across = mean_cos(&pa, &pb, false);
    assert!(across < within, "across {across} within {within}");
}

#[test]
fn datasets_regenerate_identically() {
    let cfg = array(8, 8);
    let scenario = ScenarioParams::deploy();
    let geo = CellGeometry::default();
    let a = generate_cell(&cfg, &scenario, &geo, 3, 40, 99).unwrap();
    let b = generate_cell(&cfg, &scenario, &geo, 3, 40, 99).unwrap();
    assert_eq!(a, b);
    // Each UE depends only on (seed, id): generating UE 3 alone matches.
    let p3 = ue_placement(&scenario, &geo, 99, 3).unwrap();
    assert_eq!(ue_dataset(&p3, &scenario, &cfg, 40, 99).unwrap(), a[2].1);
    let c = generate_cell(&cfg, &scenario, &geo, 3, 40, 100).unwrap();
    assert_ne!(a[0].1, c[0].1);
}

#[test]
fn normalized_train_entries_lie_in_unit_interval() {
    let cfg = array(8, 8);
    let scenario = ScenarioParams::pretrain();
    for (_, ds) in generate_cell(&cfg, &scenario, &CellGeometry::default(), 4, 100, 1).unwrap() {
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (80, 10, 10));
        for h in &ds.train {
            for z in &h.data {
                for v in [z.re, z.im] {
                    let y = ds.norm.normalize(v);
                    assert!((0.0..=1.0).contains(&y), "{y}");
                    assert!((ds.norm.denormalize(y) - v).abs() <= 1e-6 * v.abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn single_flat_path_lands_in_first_bin() {
    let cfg = array(8, 8);
    let real = PathRealization {
        angles_rad: vec![0.0],
        gains: vec![Complex64::new(1.0, 0.0)],
        delays_s: vec![0.0],
    };
    let h = to_angular_delay(&sample_channel(&real, &cfg)).unwrap();
    let e = h.frobenius_sq();
    assert!(h.at(0, 0).norm_sqr() >= 0.99 * e);
}

proptest! {
    #[test]
    fn angular_delay_transform_is_unitary(
        nt in 1usize..12,
        nc in 1usize..12,
        seed in any::<u64>(),
    ) {
        let mut rng = child_rng(seed, &[1]);
        let h = CsiSample {
            nt,
            nc,
            data: (0..nt * nc)
                .map(|_| Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                .collect(),
            domain: Domain::SpatialFrequency,
        };
        let ad = to_angular_delay(&h).unwrap();
        let back = from_angular_delay(&ad).unwrap();
        let e = h.frobenius_sq();
        let err: f64 = h.data.iter().zip(&back.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        prop_assert!((err / e).sqrt() < 1e-6);
        prop_assert!((ad.frobenius_sq() - e).abs() <= 1e-6 * e);
        prop_assert_eq!(back.domain, Domain::SpatialFrequency);
    }
}
