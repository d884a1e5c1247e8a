use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedcloud::geometry::{ball_query, denormalize, farthest_point_sample, normalize, resample, Point};
use seedcloud::losses::{chamfer, chamfer_grad_check, chamfer_with, GradCheckOutcome};
use seedcloud::{Error, PointCloud};

fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()).unwrap()
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn brute_chamfer(a: &PointCloud, b: &PointCloud, squared: bool) -> f64 {
    let one_way = |x: &PointCloud, y: &PointCloud| {
        let mut total = 0.0;
        for p in x.points() {
            let mut best = f64::INFINITY;
            for q in y.points() {
                best = best.min(d2(p, q));
            }
            total += if squared { best } else { best.sqrt() };
        }
        total / x.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

#[test]
fn chamfer_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let (na, nb) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let (a, b) = (random_cloud(&mut rng, na), random_cloud(&mut rng, nb));
        for squared in [false, true] {
            let got = chamfer_with(&a, &b, squared).unwrap().value;
            let want = brute_chamfer(&a, &b, squared);
            assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn chamfer_examples() {
    let a = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
    let b = PointCloud::new(vec![[3.0, 4.0, 0.0]]).unwrap();
    assert_eq!(chamfer(&a, &b).unwrap().value, 10.0);
    assert_eq!(chamfer_with(&a, &b, true).unwrap().value, 50.0);
    let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    let doubled = PointCloud::new([c.points(), c.points()].concat()).unwrap();
    assert_eq!(chamfer(&c, &doubled).unwrap().value, 0.0);
    assert_eq!(chamfer(&c, &c).unwrap().value, 0.0);
}

#[test]
fn chamfer_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for _ in 0..30 {
        let (a, b) = (random_cloud(&mut rng, 12), random_cloud(&mut rng, 9));
        for squared in [false, true] {
            match chamfer_grad_check(&a, &b, squared, 1e-4).unwrap() {
                GradCheckOutcome::Passed { .. } => checked += 1,
                GradCheckOutcome::Skipped => {}
                GradCheckOutcome::Failed { .. } => panic!("gradient mismatch"),
            }
        }
    }
    assert!(checked > 40);
}

fn brute_fps(pc: &PointCloud, m: usize, start: usize) -> Vec<usize> {
    let pts = pc.points();
    let mut picked = vec![start];
    while picked.len() < m {
        let mut best = (0, -1.0);
        for (i, p) in pts.iter().enumerate() {
            let d = picked.iter().map(|&j| d2(p, &pts[j])).fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        picked.push(best.0);
    }
    picked
}

#[test]
fn fps_matches_greedy_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..=80);
        let pc = random_cloud(&mut rng, n);
        let m = rng.random_range(1..=n);
        let start = rng.random_range(0..n);
        assert_eq!(farthest_point_sample(&pc, m, start).unwrap(), brute_fps(&pc, m, start));
    }
}

#[test]
fn fps_errors_and_ties() {
    let pc = PointCloud::new(vec![[0.0; 3]; 4]).unwrap();
    assert_eq!(farthest_point_sample(&pc, 3, 0).unwrap(), vec![0, 0, 0]);
    assert!(matches!(farthest_point_sample(&pc, 5, 0), Err(Error::Range(_))));
}

#[test]
fn ball_query_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let pc = random_cloud(&mut rng, 60);
        let centers: Vec<usize> = (0..5).map(|_| rng.random_range(0..60)).collect();
        let radius = rng.random_range(0.1..1.0);
        let k = rng.random_range(1..20);
        let got = ball_query(&pc, &centers, radius, k).unwrap();
        for (&c, group) in centers.iter().zip(&got) {
            let hits: Vec<usize> = (0..60).filter(|&i| d2(&pc.points()[i], &pc.points()[c]) <= radius * radius).collect();
            let mut want: Vec<usize> = hits.iter().copied().take(k).collect();
            want.resize(k, hits[0]);
            assert_eq!(group, &want);
        }
    }
    let pc = random_cloud(&mut rng, 5);
    assert!(matches!(ball_query(&pc, &[], 0.5, 3), Err(Error::Usage(_))));
}

#[test]
fn resample_draws_from_source() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pc = random_cloud(&mut rng, 10);
    let r = resample(&pc, 25, &mut rng).unwrap();
    assert_eq!(r.len(), 25);
    assert!(r.points().iter().all(|p| pc.points().contains(p)));
    assert!(matches!(resample(&pc, 0, &mut rng), Err(Error::Range(_))));
}

fn cloud_strategy(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..max).prop_map(|p| PointCloud::new(p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric(a in cloud_strategy(30), b in cloud_strategy(30)) {
        let ab = chamfer(&a, &b).unwrap().value;
        let ba = chamfer(&b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn chamfer_ignores_point_order(a in cloud_strategy(30), b in cloud_strategy(30), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pa = a.points().to_vec();
        pa.shuffle(&mut rng);
        let mut pb = b.points().to_vec();
        pb.shuffle(&mut rng);
        let x = chamfer(&a, &b).unwrap().value;
        let y = chamfer(&PointCloud::new(pa).unwrap(), &PointCloud::new(pb).unwrap()).unwrap().value;
        prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
    }

    #[test]
    fn chamfer_ignores_shared_translation(a in cloud_strategy(20), b in cloud_strategy(20), t in prop::array::uniform3(-10.0f64..10.0)) {
        let shift = |c: &PointCloud| PointCloud::new(c.points().iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect()).unwrap();
        let x = chamfer(&a, &b).unwrap().value;
        let y = chamfer(&shift(&a), &shift(&b)).unwrap().value;
        prop_assert!((x - y).abs() <= 1e-9);
    }

    #[test]
    fn chamfer_is_nonnegative_and_zero_on_self(a in cloud_strategy(30)) {
        prop_assert_eq!(chamfer(&a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn normalize_round_trips(a in cloud_strategy(30)) {
        prop_assume!(a.points().iter().any(|p| p != &a.points()[0]));
        let (n, t) = normalize(&a).unwrap();
        let c = n.centroid();
        prop_assert!(c.iter().all(|v| v.abs() < 1e-9));
        prop_assert!((n.max_radius() - 1.0).abs() < 1e-9);
        let back = denormalize(&n, &t);
        for (p, q) in back.points().iter().zip(a.points()) {
            prop_assert!(d2(p, q) < 1e-18 * (1.0 + d2(q, &[0.0; 3])));
        }
    }

    #[test]
    fn fps_picks_distinct_points_on_distinct_clouds(a in cloud_strategy(40), frac in 0.0f64..1.0) {
        let mut uniq = a.points().to_vec();
        uniq.sort_by(|p, q| p.partial_cmp(q).unwrap());
        uniq.dedup();
        prop_assume!(uniq.len() == a.len());
        let m = 1 + ((a.len() - 1) as f64 * frac) as usize;
        let idx = farthest_point_sample(&a, m, 0).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
    }
}
