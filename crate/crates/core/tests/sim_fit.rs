use rand::Rng;
use rebound_core::fit::{
    center_mean, extract_centers, fit_parabola, newtonian_predict, ransac_sphere, sensor_cor, CenterPath, RansacParams,
};
use rebound_core::geom::{rng_stream, SurfaceParams, UnitVec3, Vec3, GRAVITY};
use rebound_core::sim::{
    detect_impact, generate_dataset, generate_sample, render_point_cloud, sample_bounce_config, simulate_bounce,
    step_ballistic, BallState, PlanePatch, SimConfig,
};

fn noiseless() -> SimConfig {
    SimConfig { noise_sigma: 0.0, ..SimConfig::default() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// First time on a fixed grid at which the ball is within one radius of the
/// plane and over the patch.
fn brute_force_impact(init: BallState, plane: &PlanePatch, radius: f64, step: f64, limit: f64) -> Option<f64> {
    let mut k = 0u64;
    loop {
        let t = k as f64 * step;
        if t > limit {
            return None;
        }
        let c = step_ballistic(init, t, GRAVITY).center;
        if plane.signed_distance(c) <= radius && plane.contains_projection(c) {
            return Some(t);
        }
        k += 1;
    }
}

#[test]
fn impact_times_match_fine_scan() {
    let cfg = SimConfig::default();
    let mut rng = rng_stream(11, 0);
    let mut checked = 0;
    while checked < 300 {
        let (init, plane, _) = sample_bounce_config(&mut rng, &cfg);
        let Ok(Some(tau)) = detect_impact(init, &plane, 0.2, cfg.ball_radius, GRAVITY) else {
            continue;
        };
        let bf = brute_force_impact(init, &plane, cfg.ball_radius, 1e-6, 0.2).expect("scan finds impact");
        // The scan brackets the crossing within one grid step; allow for rounding of the grid times.
        assert!((bf - tau).abs() <= 1e-6 + 1e-12, "analytic {tau} vs scan {bf}");
        checked += 1;
    }
}

#[test]
fn crossing_beside_patch_agrees_with_scan() {
    let plane = PlanePatch { point: Vec3::ZERO, normal: UnitVec3::Z, extent: 0.3 };
    let init = BallState { center: Vec3::new(0.2, 0.0, 0.5), velocity: Vec3::new(2.0, 0.0, -1.0), time: 0.0 };
    assert_eq!(detect_impact(init, &plane, 1.0, 0.07, GRAVITY).unwrap(), None);
    assert_eq!(brute_force_impact(init, &plane, 0.07, 1e-5, 1.0), None);
}

#[test]
fn hemisphere_centroid_offset() {
    let c = Vec3::new(0.3, -0.4, 1.0);
    let cam = Vec3::new(0.0, 0.0, 6.0);
    let r = 0.07;
    let mut rng = rng_stream(3, 0);
    let pts = render_point_cloud(c, r, cam, 100_000, 0.0, &mut rng);
    let m = center_mean(&pts).unwrap();
    let view = UnitVec3::new(cam - c).unwrap();
    let along = view.dot(m - c);
    assert!((along - r / 2.0).abs() <= 0.02 * r / 2.0, "offset {along}");
    assert!((m - c - view.get() * along).norm() < 0.02 * r / 2.0);

    let small = render_point_cloud(c, r, cam, 500, 0.0, &mut rng);
    let m = center_mean(&small).unwrap();
    assert!((view.dot(m - c) - r / 2.0).abs() <= 0.04 * r / 2.0);
}

#[test]
fn sampled_cor_mean_is_one_half() {
    let cfg = SimConfig::default();
    let mut rng = rng_stream(5, 0);
    let n = 10_000;
    let mean = (0..n).map(|_| sample_bounce_config(&mut rng, &cfg).2.cor).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() <= 0.02, "mean {mean}");
}

#[test]
fn noiseless_ransac_recovers_true_centers() {
    let s = &generate_dataset(1, &noiseless(), 1).unwrap()[0];
    for traj in [&s.pre, &s.post] {
        let path = extract_centers(traj, 0.07, &RansacParams::default()).unwrap();
        for ((_, c), f) in path.samples.iter().zip(&traj.frames) {
            assert!(c.distance(f.true_center.unwrap()) < 1e-6);
        }
    }
}

#[test]
fn ransac_tolerates_outliers() {
    let c = Vec3::new(0.5, 0.5, 0.5);
    let mut rng = rng_stream(8, 0);
    let mut pts = render_point_cloud(c, 0.07, Vec3::new(0.0, 0.0, 6.0), 400, 0.0, &mut rng);
    for _ in 0..100 {
        pts.push(Vec3::new(rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)));
    }
    let got = ransac_sphere(&pts, 0.07, &RansacParams::default(), &mut rng).unwrap();
    assert!(got.distance(c) < 1e-4);
}

#[test]
fn center_paths_are_exact_quadratics() {
    let cfg = noiseless();
    let mut rng = rng_stream(21, 0);
    let mut done = 0;
    while done < 200 {
        let (init, plane, params) = sample_bounce_config(&mut rng, &cfg);
        let Ok(p) = simulate_bounce(init, &plane, params, &cfg) else { continue };
        for path in [&p.pre, &p.post] {
            let fit = fit_parabola(&CenterPath::new(path.clone()).unwrap()).unwrap();
            assert!(fit.residual < 1e-9);
        }
        let ke_in = p.impact.v_minus.norm_squared();
        let ke_out = p.impact.v_plus.norm_squared();
        assert!(ke_out <= ke_in * (1.0 + 1e-15));
        done += 1;
    }
}

#[test]
fn noiseless_sensor_cor_inverts_simulator() {
    let data = generate_dataset(200, &noiseless(), 2).unwrap();
    let ransac = RansacParams::default();
    for s in &data {
        let cor = sensor_cor(s, s.params.normal, 0.07, &ransac).unwrap();
        assert!((cor - s.params.cor).abs() <= 1e-6, "{} vs {}", cor, s.params.cor);
    }
}

#[test]
fn elastic_drop_sensor_cor() {
    let cfg = noiseless();
    let plane = PlanePatch { point: Vec3::ZERO, normal: UnitVec3::Z, extent: 1.0 };
    let init = BallState { center: Vec3::new(0.0, 0.0, 1.0), velocity: Vec3::new(0.3, 0.0, 0.0), time: 0.0 };
    let params = SurfaceParams::new(1.0, UnitVec3::Z).unwrap();
    let s = rebound_core::sim::render_bounce(init, &plane, params, &cfg, &mut rng_stream(0, 0)).unwrap();
    let cor = sensor_cor(&s, UnitVec3::Z, 0.07, &RansacParams::default()).unwrap();
    assert!((cor - 1.0).abs() <= 1e-6);
}

#[test]
fn noisy_sensor_cor_median_error() {
    let data = generate_dataset(1000, &SimConfig::default(), 3).unwrap();
    let ransac = RansacParams::default();
    let errs: Vec<f64> = data
        .iter()
        .map(|s| (sensor_cor(s, s.params.normal, 0.07, &ransac).unwrap() - s.params.cor).abs())
        .collect();
    let m = median(errs);
    assert!(m <= 0.1, "median {m}");
}

#[test]
fn noisy_parabola_velocity_accuracy() {
    // Sensor noise of 5 mm on every rendered point; the path is the RANSAC centers.
    let cfg = SimConfig::default();
    let data = generate_dataset(1000, &cfg, 4).unwrap();
    let ransac = RansacParams::default();
    let good = data
        .iter()
        .filter(|s| {
            let fit = fit_parabola(&extract_centers(&s.pre, cfg.ball_radius, &ransac).unwrap()).unwrap();
            let last = s.pre.frames[cfg.frames - 1].time;
            // Simulator centers lie exactly on the flight parabola.
            let exact = CenterPath::new(s.pre.frames.iter().map(|f| (f.time, f.true_center.unwrap())).collect()).unwrap();
            let truth = fit_parabola(&exact).unwrap().velocity_at(last);
            fit.velocity_at(last).distance(truth) <= 0.2
        })
        .count();
    assert!(good >= 950, "{good} of 1000 within 0.2 m/s");
}

#[test]
fn newtonian_prediction_matches_simulator() {
    let cfg = noiseless();
    let data = generate_dataset(100, &cfg, 6).unwrap();
    let ransac = RansacParams::default();
    for s in &data {
        let plane = s.plane(cfg.ball_radius, cfg.patch_extent);
        let pred = newtonian_predict(&s.pre, s.params, &plane, &cfg, &ransac).unwrap();
        for ((t, c), f) in pred.samples.iter().zip(&s.post.frames) {
            assert!((t - f.time).abs() < 1e-6);
            assert!(c.distance(f.true_center.unwrap()) < 1e-6);
        }
    }
}

#[test]
fn newtonian_inelastic_rests() {
    let cfg = noiseless();
    let plane = PlanePatch { point: Vec3::ZERO, normal: UnitVec3::Z, extent: 1.0 };
    let init = BallState { center: Vec3::new(0.0, 0.0, 1.0), velocity: Vec3::ZERO, time: 0.0 };
    let params = SurfaceParams::new(0.0, UnitVec3::Z).unwrap();
    let s = rebound_core::sim::render_bounce(init, &plane, params, &cfg, &mut rng_stream(0, 0)).unwrap();
    let pred = newtonian_predict(&s.pre, params, &plane, &cfg, &RansacParams::default()).unwrap();
    for (_, c) in &pred.samples {
        assert!((c.z - 0.07).abs() < 1e-6);
    }
}

#[test]
fn noisy_newtonian_median_distance() {
    let cfg = SimConfig::default();
    let data = generate_dataset(300, &cfg, 7).unwrap();
    let ransac = RansacParams::default();
    let d: Vec<f64> = data
        .iter()
        .filter_map(|s| {
            let plane = s.plane(cfg.ball_radius, cfg.patch_extent);
            let pred = newtonian_predict(&s.pre, s.params, &plane, &cfg, &ransac).ok()?;
            Some(pred.center(9)?.distance(s.post.frames[9].true_center?))
        })
        .collect();
    assert!(d.len() >= 290);
    let m = median(d);
    assert!(m <= 0.05, "median {m} m");
}

#[test]
fn generation_is_reproducible_and_order_free() {
    let cfg = SimConfig { points: 50, ..SimConfig::default() };
    let a = generate_dataset(8, &cfg, 42).unwrap();
    let b = generate_dataset(8, &cfg, 42).unwrap();
    assert_eq!(a, b);
    for (i, s) in a.iter().enumerate().rev() {
        assert_eq!(&generate_sample(i as u64, &cfg, 42).unwrap(), s);
    }
    let c = generate_dataset(8, &cfg, 43).unwrap();
    assert_ne!(a, c);
}

#[test]
fn dataset_cor_is_uniform() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let cfg = SimConfig { points: 10, ..SimConfig::default() };
    let data = generate_dataset(4000, &cfg, 9).unwrap();
    let bins = 10;
    let mut counts = vec![0usize; bins];
    for s in &data {
        counts[((s.params.cor * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let expected = data.len() as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} vs {critical}");
}
