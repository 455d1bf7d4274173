use rand::Rng;
use rebound_core::field::{
    field_loss_nodes, frozen_params, generate_scene_bounces, joint_loss, locate_and_encode, locate_impact_cell,
    online_update, train_joint, JointConfig, OnlineConfig, Regime, SceneSpec, SurfaceField,
};
use rebound_core::geom::{cosine_distance, rng_stream, Vec3};
use rebound_core::pim::{PimConfig, PimModel};
use rebound_core::sim::{render_point_cloud, SimConfig};
use rebound_nn::{Graph, Tensor};

fn sim() -> SimConfig {
    SimConfig { points: 40, frames: 4, ..SimConfig::default() }
}

fn model(seed: u64) -> PimModel {
    PimModel::new(PimConfig {
        frames: 4,
        points: 40,
        embed: 8,
        point_hidden: 6,
        point_out: 8,
        frame_out: 6,
        trunk_hidden: 10,
        param_hidden: 5,
        param_embed: 6,
        engine_hidden: 9,
        recon_hidden: 7,
        seed,
        ..PimConfig::default()
    })
    .unwrap()
}

fn scene() -> SceneSpec {
    SceneSpec::two_region(3, 3, 4, 0.2, 0.8, 35.0).unwrap()
}

fn random_field(s: &SceneSpec, seed: u64) -> SurfaceField {
    let mut f = SurfaceField::for_scene(s);
    let mut rng = rng_stream(seed, 0);
    for v in f.raw.data_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    f
}

#[test]
fn scene_bounces_carry_their_cell_parameters() {
    let s = scene();
    let data = generate_scene_bounces(&s, 40, &sim(), 1).unwrap();
    for b in &data {
        let (x, y) = b.cell.unwrap();
        assert_eq!(b.scene_id, Some(3));
        assert_eq!(b.params, s.params(x, y).unwrap());
        // The impact center projects into the annotated cell.
        assert_eq!(s.cell_of_point(b.impact_point).unwrap(), (x, y));
        b.pre.validate().unwrap();
        b.post.validate().unwrap();
    }
    assert_eq!(data, generate_scene_bounces(&s, 40, &sim(), 1).unwrap());
}

#[test]
fn impact_frame_mean_locates_cell() {
    let s = SceneSpec::two_region(0, 8, 8, 0.2, 0.8, 35.0).unwrap();
    let mut rng = rng_stream(2, 0);
    let camera = Vec3::new(1.0, 1.0, 6.0);
    let n = 1000;
    let mut agree = 0;
    for _ in 0..n {
        let x = rng.random_range(0..8);
        let y = rng.random_range(0..8);
        let q = s.origin + Vec3::new((x as f64 + rng.random::<f64>()) * 0.25, (y as f64 + rng.random::<f64>()) * 0.25, 0.0);
        let c = q + Vec3::new(0.0, 0.0, 0.07);
        let pts = render_point_cloud(c, 0.07, camera, 500, 0.0, &mut rng);
        if locate_impact_cell(&pts, &s).unwrap() == (x, y) {
            agree += 1;
        }
    }
    assert!(agree >= 950, "{agree} of {n}");
    // Ball resting over a cell center.
    let pts = render_point_cloud(s.cell_center(5, 2) + Vec3::new(0.0, 0.0, 0.07), 0.07, camera, 500, 0.0, &mut rng);
    assert_eq!(locate_impact_cell(&pts, &s).unwrap(), (5, 2));
    assert!(locate_impact_cell(&[Vec3::new(-1.0, 0.5, 0.0)], &s).is_err());
}

#[test]
fn field_gradient_matches_finite_differences() {
    let s = scene();
    let m = model(4);
    let data = generate_scene_bounces(&s, 6, &sim(), 5).unwrap();
    let located = locate_and_encode(&m, &data, &s).unwrap();
    let refs: Vec<_> = located.iter().collect();
    let field = random_field(&s, 6);
    for lambda in [0.0, 0.1, 0.7] {
        let mut g = Graph::new(&m.store);
        let ti = g.input(Tensor::from_rows(&located.iter().map(|b| b.t_i.clone()).collect::<Vec<_>>()).unwrap());
        let to = g.input(Tensor::from_rows(&located.iter().map(|b| b.t_o.clone()).collect::<Vec<_>>()).unwrap());
        let cells: Vec<usize> = located.iter().map(|b| b.cell).collect();
        let l = field_loss_nodes(&m, &mut g, &field, &cells, ti, to, lambda).unwrap();
        assert!((g.value(l.loss).data()[0] - joint_loss(&m, &field, &refs, lambda).unwrap()).abs() < 1e-15);
        let grads = g.backward_scalar(l.loss).unwrap();
        let analytic = grads.node(l.field).unwrap().data().to_vec();
        let h = 1e-6;
        for k in 0..field.raw.len() {
            let mut p = field.clone();
            p.raw.data_mut()[k] += h;
            let mut q = field.clone();
            q.raw.data_mut()[k] -= h;
            let numeric = (joint_loss(&m, &p, &refs, lambda).unwrap() - joint_loss(&m, &q, &refs, lambda).unwrap()) / (2.0 * h);
            let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-4);
            assert!(rel <= 1e-5, "entry {k}, lambda {lambda}: {} vs {numeric}", analytic[k]);
        }
    }
}

#[test]
fn data_term_touches_only_observed_cell() {
    let s = scene();
    let m = model(7);
    let data = generate_scene_bounces(&s, 1, &sim(), 8).unwrap();
    let located = locate_and_encode(&m, &data, &s).unwrap();
    let field = random_field(&s, 9);
    let mut g = Graph::new(&m.store);
    let ti = g.input(Tensor::matrix(1, 8, located[0].t_i.clone()).unwrap());
    let to = g.input(Tensor::matrix(1, 8, located[0].t_o.clone()).unwrap());
    let l = field_loss_nodes(&m, &mut g, &field, &[located[0].cell], ti, to, 0.0).unwrap();
    let grad = g.backward_scalar(l.loss).unwrap().node(l.field).unwrap().clone();
    for r in 0..grad.rows() {
        let any = grad.row(r).iter().any(|v| *v != 0.0);
        assert_eq!(any, r == located[0].cell, "row {r}");
    }
}

#[test]
fn zero_lambda_loss_is_the_online_objective() {
    // Independent evaluation through the functional forward passes.
    let s = scene();
    let m = model(10);
    let data = generate_scene_bounces(&s, 5, &sim(), 11).unwrap();
    let located = locate_and_encode(&m, &data, &s).unwrap();
    let field = random_field(&s, 12);
    for b in &located {
        let raw = field.raw.row(b.cell);
        let rho = [raw[0], raw[1], raw[2], raw[3]];
        let t_p = m.engine_forward_many(&b.t_i, &[rho]).unwrap().remove(0);
        let rec = m.recon_raw(&b.t_i, &b.t_o).unwrap();
        let expected = cosine_distance(&b.t_o, &t_p) + rho.iter().zip(rec).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
        let got = joint_loss(&m, &field, &[b], 0.0).unwrap();
        assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
    }
}

#[test]
fn uniform_field_has_no_smoothness_penalty() {
    let s = scene();
    let m = model(13);
    let data = generate_scene_bounces(&s, 3, &sim(), 14).unwrap();
    let located = locate_and_encode(&m, &data, &s).unwrap();
    let refs: Vec<_> = located.iter().collect();
    let f = SurfaceField::for_scene(&s);
    assert_eq!(joint_loss(&m, &f, &refs, 0.0).unwrap(), joint_loss(&m, &f, &refs, 5.0).unwrap());
}

fn snapshot(m: &PimModel, ids: &[rebound_nn::ParamId]) -> Vec<Vec<f64>> {
    ids.iter().map(|&id| m.store.get(id).data().to_vec()).collect()
}

#[test]
fn regimes_respect_frozen_parts() {
    let s = scene();
    let data = generate_scene_bounces(&s, 12, &sim(), 15).unwrap();
    for regime in [Regime::Frozen, Regime::CoreOnly, Regime::All] {
        let mut m = model(16);
        let recon = snapshot(&m, &m.recon_param_ids());
        let enc = snapshot(&m, &m.encoder_param_ids(rebound_core::pim::Which::Pre));
        let engine = snapshot(&m, &m.engine_param_ids());
        let cfg = JointConfig { iterations: 20, batch: 4, regime, field_lr: 0.05, ..JointConfig::default() };
        let mut field = SurfaceField::for_scene(&s);
        train_joint(&mut field, &mut m, &data, &s, &cfg).unwrap();
        assert_eq!(snapshot(&m, &m.recon_param_ids()), recon);
        assert_eq!(snapshot(&m, &m.encoder_param_ids(rebound_core::pim::Which::Pre)) == enc, regime != Regime::All);
        assert_eq!(snapshot(&m, &m.engine_param_ids()) == engine, regime == Regime::Frozen);
        assert_ne!(field, SurfaceField::for_scene(&s));
        assert_eq!(frozen_params(&m, regime).len() > m.recon_param_ids().len(), regime != Regime::All);
    }
}

#[test]
fn joint_training_is_seeded() {
    let s = scene();
    let data = generate_scene_bounces(&s, 10, &sim(), 17).unwrap();
    let run = || {
        let mut m = model(18);
        let mut f = SurfaceField::for_scene(&s);
        let cfg = JointConfig { iterations: 15, batch: 4, ..JointConfig::default() };
        let losses = train_joint(&mut f, &mut m, &data, &s, &cfg).unwrap();
        (f, m.store, losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn online_snapshots_are_reproducible_and_local() {
    let s = scene();
    let m = model(19);
    let data = generate_scene_bounces(&s, 4, &sim(), 20).unwrap();
    let cfg = OnlineConfig { max_steps: 60, ..OnlineConfig::default() };
    let recon = snapshot(&m, &m.recon_param_ids());
    let mut a = SurfaceField::for_scene(&s);
    let snaps = online_update(&mut a, &m, &data, &s, &cfg).unwrap();
    let mut b = SurfaceField::for_scene(&s);
    assert_eq!(online_update(&mut b, &m, &data, &s, &cfg).unwrap(), snaps);
    assert_eq!(snaps.len(), 4);
    assert_eq!(snapshot(&m, &m.recon_param_ids()), recon);

    // After one bounce only its cell moved.
    let (x, y) = data[0].cell.unwrap();
    let first = &snaps[0];
    let init = SurfaceField::for_scene(&s);
    for cy in 0..s.height {
        for cx in 0..s.width {
            let moved = first.lookup(cx, cy).unwrap() != init.lookup(cx, cy).unwrap();
            assert_eq!(moved, (cx, cy) == (x, y), "cell ({cx}, {cy})");
        }
    }
}

#[test]
fn unresolvable_bounce_is_rejected() {
    let s = scene();
    let mut data = generate_scene_bounces(&s, 2, &sim(), 21).unwrap();
    data[1].cell = None;
    for f in &mut data[1].pre.frames {
        for p in &mut f.points {
            *p = *p + Vec3::new(50.0, 0.0, 0.0);
        }
    }
    let mut m = model(22);
    let mut field = SurfaceField::for_scene(&s);
    let cfg = JointConfig { iterations: 2, batch: 2, ..JointConfig::default() };
    assert!(train_joint(&mut field, &mut m, &data, &s, &cfg).is_err());
}
