use airecon::field::{Field, FnField, HashGridConfig, OccupancyField, ValueProbe};
use airecon::geometry::{look_at_sphere, Aabb, Pose, Ray, Vec3};
use airecon::metrics::{entropy_bits, surface_coverage};
use airecon::nbv::{point_entropy, ray_information, top_nt_information};
use airecon::supervision::{classify_ray, render_ray, sample_free_points, sample_surface_points, RayClass};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::LN_2;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit() -> impl Strategy<Value = Vec3> {
    vec3(1.0).prop_filter("nonzero", |v| v.norm() > 1e-3)
}

fn bumpy() -> FnField<impl Fn(Vec3) -> f64 + Sync> {
    FnField {
        aabb: Aabb::cube(0.25),
        f: |p: Vec3| 0.5 + 0.45 * (17.0 * p.x).sin() * (11.0 * p.y + 3.0 * p.z).cos(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn twist_then_inverse_twist_is_identity(
        w in prop::array::uniform6(-0.04f64..0.04),
        az in 0.0f64..6.28,
        el in -1.2f64..1.2,
    ) {
        let p = look_at_sphere(az, el, 1.0, Vec3::ZERO).unwrap();
        let neg = w.map(|x| -x);
        let back = p.apply_twist(&w).apply_twist(&neg);
        prop_assert!(back.max_abs_diff(&p) < 1e-9);
    }

    #[test]
    fn principal_ray_hits_center(
        az in 0.0f64..6.28,
        el in -1.5f64..1.5,
        r in 0.2f64..5.0,
        c in vec3(1.0),
    ) {
        let p: Pose = look_at_sphere(az, el, r, c).unwrap();
        let hit = p.translation + p.forward() * r;
        prop_assert!(hit.distance(c) < 1e-6);
    }

    #[test]
    fn ray_classes_partition(
        o in vec3(2.0),
        d in unit(),
        depth in prop::option::of(0.0f64..8.0),
        d_max in 0.5f64..4.0,
    ) {
        let aabb = Aabb::cube(0.25);
        let ray = Ray::new(o, d).unwrap();
        let a = classify_ray(&ray, depth, &aabb, d_max);
        let b = classify_ray(&ray, depth, &aabb, d_max);
        prop_assert_eq!(a, b);
        let hits = RayClass::ALL.iter().filter(|&&c| c == a.class).count();
        prop_assert_eq!(hits, 1);
        prop_assert_eq!(a.span.is_none(), a.class == RayClass::NoIntersection);
        let kinds = [a.class.is_free(), a.class.is_discarded(), a.class == RayClass::Valid];
        prop_assert_eq!(kinds.iter().filter(|&&k| k).count(), 1);
    }

    #[test]
    fn samples_stay_inside_the_box(
        o in vec3(2.0),
        d in unit(),
        depth_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let aabb = Aabb::cube(0.25);
        let ray = Ray::new(o, d).unwrap();
        if let Some((near, far)) = aabb.intersect(&ray) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth = near + depth_frac * (far - near);
            let mut ts = sample_free_points(near, far, 16, &mut rng);
            ts.extend(sample_surface_points(depth, 0.005, 16, near, far, &mut rng));
            for t in ts {
                prop_assert!(t >= near && t <= far);
                prop_assert!(aabb.contains(ray.at(t), 1e-9));
            }
        }
    }

    #[test]
    fn weights_sum_to_opacity(
        o in vec3(0.24),
        d in unit(),
        n in 1usize..48,
    ) {
        let field = bumpy();
        let ray = Ray::new(o, d).unwrap();
        let ts: Vec<f64> = (0..n).map(|k| k as f64 * 0.5 / n as f64).collect();
        let r = render_ray(&mut ValueProbe(&field), ray.origin, ray.dir, &ts).unwrap();
        let mut keep = 1.0;
        for &t in &ts {
            keep *= 1.0 - field.occupancy(ray.at(t)).unwrap();
        }
        let sum: f64 = r.weights.iter().sum();
        prop_assert!(r.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        prop_assert!((sum - (1.0 - keep)).abs() < 1e-9);
        prop_assert!(sum <= 1.0 + 1e-12);
    }

    #[test]
    fn point_information_is_bounded(o in 0.0f64..=1.0, t in 0.0f64..=1.0) {
        let io = point_entropy(o);
        let iv = t * io;
        prop_assert!(0.0 <= iv && iv <= io && io <= LN_2 + 1e-15);
    }

    #[test]
    fn ray_information_is_nonnegative(o in vec3(0.24), d in unit()) {
        let field = bumpy();
        let ray = Ray::new(o, d).unwrap();
        let ts: Vec<f64> = (0..16).map(|k| 0.02 * k as f64).collect();
        let s: f64 = ray_information(&mut ValueProbe(&field), ray.origin, ray.dir, &ts).unwrap();
        prop_assert!((0.0..=16.0 * LN_2).contains(&s));
    }

    #[test]
    fn top_nt_mean_is_monotone(sums in prop::collection::vec(0.0f64..11.0, 1..64)) {
        let mut prev = f64::INFINITY;
        for k in 1..=sums.len() {
            let v = top_nt_information(&sums, k, 16);
            prop_assert!(v <= prev);
            prop_assert!(v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn entropy_bits_is_bounded_and_peaks_at_one_half(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (ha, hb) = (entropy_bits(a), entropy_bits(b));
        prop_assert!((0.0..=1.0).contains(&ha));
        if (a - 0.5).abs() <= (b - 0.5).abs() {
            prop_assert!(ha >= hb - 1e-15);
        }
    }

    #[test]
    fn coverage_ignores_rigid_motion(
        seed in any::<u64>(),
        w in prop::array::uniform6(-1.0f64..1.0),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = |n: usize| -> Vec<Vec3> {
            (0..n)
                .map(|_| Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)))
                .collect()
        };
        let recon = cloud(300);
        let gt = cloud(300);
        let motion = Pose::identity().apply_twist(&w);
        let mv = |ps: &[Vec3]| ps.iter().map(|&p| motion.transform_point(p)).collect::<Vec<_>>();
        let a = surface_coverage(&recon, &gt, 0.02).unwrap().coverage;
        let b = surface_coverage(&mv(&recon), &mv(&gt), 0.02).unwrap().coverage;
        prop_assert!((a - b).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn field_outputs_are_strictly_inside_unit_interval(seed in any::<u64>(), p in vec3(0.25)) {
        let field = Field::new(HashGridConfig::default(), Aabb::cube(0.25), seed).unwrap();
        let out = field.query(p).unwrap().to_array();
        prop_assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert_eq!(field.query(p).unwrap().to_array(), out);
    }
}
