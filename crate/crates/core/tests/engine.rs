use std::f64::consts::TAU;

use maskgraph::data_io::{gen_synthetic_population, SyntheticSpec};
use maskgraph::engine::*;
use maskgraph::geometry::dist;
use maskgraph::losses::{gather_organs, to_pixels};
use maskgraph::metrics::dice;
use maskgraph::model::{InputMode, Model, ModelConfig};
use maskgraph::rasterizer::hard_rasterize;
use maskgraph::topology::{build_independent, GraphTopology};
use maskgraph::{Error, LabelMask, Point};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn polygon_mask(poly: &[Point], side: usize, label: u8) -> LabelMask {
    hard_rasterize(poly, side, side).map(|&b| if b { label } else { 0 })
}

fn ellipse(center: Point, a: f64, b: f64, n: usize) -> Vec<Point> {
    (0..n)
        .map(|k| {
            let t = TAU * k as f64 / n as f64;
            [center[0] + a * t.cos(), center[1] + b * t.sin()]
        })
        .collect()
}

fn fitted_mask(points: &[Point], topo: &GraphTopology, side: usize) -> Vec<maskgraph::BinaryMask> {
    gather_organs(&to_pixels(points, side as f64), topo.finest())
        .iter()
        .map(|p| hard_rasterize(p, side, side))
        .collect()
}

#[test]
fn snake_fits_circle() {
    let target = polygon_mask(&ellipse([30.5, 33.0], 18.0, 18.0, 400), 64, 1);
    let topo = build_independent(&[(1, 40)], 1).unwrap();
    let cfg = SnakeConfig {
        iterations: 200,
        ..SnakeConfig::default()
    };
    let fit = snake_fit(&target, &topo, &cfg).unwrap();
    let d = dice(&fitted_mask(&fit.points, &topo, 64)[0], &target.binarize(1)).unwrap();
    assert!(d >= 0.98, "dice {d}");
}

#[test]
fn snake_loss_settles_on_convex_target() {
    let target = polygon_mask(&ellipse([33.0, 31.0], 20.0, 13.0, 400), 64, 1);
    let topo = build_independent(&[(1, 40)], 1).unwrap();
    let fit = snake_fit(&target, &topo, &SnakeConfig::default()).unwrap();
    for i in 100..fit.losses.len() - 50 {
        assert!(
            fit.losses[i + 50] <= fit.losses[i] + 1e-6,
            "loss rose from {} at {i} to {}",
            fit.losses[i],
            fit.losses[i + 50]
        );
    }
}

#[test]
fn converged_snake_stays_put() {
    let target = polygon_mask(&ellipse([32.0, 32.0], 17.0, 17.0, 400), 64, 1);
    let topo = build_independent(&[(1, 32)], 1).unwrap();
    let fixed = ScheduleConfig {
        kl_start: 1e-3,
        alpha_start: 1.0,
        edge_decay_decades: 0.0,
        ..ScheduleConfig::default()
    };
    let cfg = SnakeConfig {
        iterations: 600,
        schedule: fixed.clone(),
        ..SnakeConfig::default()
    };
    let first = snake_fit(&target, &topo, &cfg).unwrap();
    let cont = SnakeConfig {
        iterations: 50,
        learning_rate: 1e-6,
        schedule: fixed,
        ..SnakeConfig::default()
    };
    let again = snake_fit_from(&target, &topo, &cont, first.points).unwrap();
    for w in again.losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn uniform_term_evens_edges_on_ellipse() {
    let target = polygon_mask(&ellipse([32.0, 32.0], 24.0, 12.0, 400), 64, 1);
    let topo = build_independent(&[(1, 40)], 1).unwrap();
    let cfg = SnakeConfig {
        iterations: 600,
        ..SnakeConfig::default()
    };
    let fit = snake_fit(&target, &topo, &cfg).unwrap();
    let px = to_pixels(&fit.points, 64.0);
    let lengths: Vec<f64> = (0..px.len()).map(|i| dist(px[i], px[(i + 1) % px.len()])).collect();
    let ratio = lengths.iter().cloned().fold(0.0, f64::max) / lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(ratio <= 1.5, "edge length ratio {ratio}");
}

#[test]
fn absent_organ_collapses_to_centre() {
    let target = polygon_mask(&ellipse([20.0, 20.0], 8.0, 8.0, 100), 48, 1);
    let topo = build_independent(&[(1, 16), (2, 12)], 1).unwrap();
    let init = circle_init(&target, &topo);
    assert!(init[16..].iter().all(|p| *p == [0.5, 0.5]));
    let fit = snake_fit(
        &target,
        &topo,
        &SnakeConfig {
            iterations: 20,
            ..SnakeConfig::default()
        },
    )
    .unwrap();
    assert_eq!(fit.points.len(), 28);
    let empty = LabelMask::new(48, 48);
    assert!(matches!(snake_fit(&empty, &topo, &SnakeConfig::default()), Err(Error::InvalidInput(_))));
}

fn small_model(topo: &GraphTopology) -> Model {
    let cfg = ModelConfig {
        input_size: 32,
        encoder_widths: vec![4, 8, 8, 16],
        latent_dim: 8,
        cheb_order: 3,
        graph_width: 8,
        ..ModelConfig::default()
    };
    Model::new(cfg, topo).unwrap()
}

fn population(n: usize, touching: bool, seed: u64) -> Vec<maskgraph::data_io::Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_synthetic_population(n, &SyntheticSpec::default(), 32, touching, &mut rng)
        .unwrap()
        .into_iter()
        .map(|s| s.sample)
        .collect()
}

#[test]
fn overfits_single_sample() {
    let topo = build_independent(&[(1, 48)], 3).unwrap();
    // start well inside the shape so the fit has to travel
    let model = Model::new(
        ModelConfig {
            template_radius: 0.08,
            ..small_model(&topo).config
        },
        &topo,
    )
    .unwrap();
    let items = prepare_items(&population(1, false, 4), &[1], InputMode::Image, 4096);
    let cfg = TrainConfig {
        iterations: 500,
        batch_size: 1,
        adam: AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        },
        val_every: 0,
        ..TrainConfig::default()
    };
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(5));
    let mut chamfer = Vec::new();
    train_population(&model, &topo, params, &items, &[], &cfg, |r| chamfer.push(r.level_chamfer[0])).unwrap();
    let (early, last) = (chamfer[10], *chamfer.last().unwrap());
    assert!(early >= 10.0 * last, "chamfer {early} -> {last}");
}

#[test]
fn missing_annotations_still_give_closed_contours() {
    let topo = build_independent(&[(1, 16), (2, 12)], 3).unwrap();
    let model = small_model(&topo);
    let mut samples = population(6, true, 8);
    for s in samples.iter_mut().step_by(2) {
        s.annotated_organs = vec![1];
    }
    let items = prepare_items(&samples, &[1, 2], InputMode::Image, 4096);
    let cfg = TrainConfig {
        iterations: 30,
        batch_size: 2,
        val_every: 0,
        ..TrainConfig::default()
    };
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let out = train_population(&model, &topo, params, &items, &[], &cfg, |_| {}).unwrap();
    let degrees = topo.finest().degrees();
    assert!(degrees.iter().all(|&d| d == 2));
    for item in &items {
        let pts = model.predict(&out.best_params, &item.input).unwrap();
        let organs = gather_organs(&pts[0], topo.finest());
        assert_eq!(organs[1].len(), 12);
        assert!(organs[1].iter().flatten().all(|v| v.is_finite()));
    }
}

fn run_rows(trainer: &Trainer, state: TrainState, items: &[TrainItem]) -> (Vec<f64>, TrainOutcome) {
    let mut rows = Vec::new();
    let out = trainer.run(state, items, &[], |r| rows.push(r.loss.total)).unwrap();
    (rows, out)
}

#[test]
fn training_is_deterministic_and_resumes_bit_exactly() {
    let topo = build_independent(&[(1, 16)], 3).unwrap();
    let model = small_model(&topo);
    let items = prepare_items(&population(5, false, 2), &[1], InputMode::Image, 4096);
    let cfg = TrainConfig {
        iterations: 24,
        batch_size: 3,
        val_every: 0,
        seed: 17,
        ..TrainConfig::default()
    };
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(3));
    let trainer = Trainer::new(&model, &topo, cfg.clone()).unwrap();
    let (full, _) = run_rows(&trainer, TrainState::new(params.clone()), &items);
    let (again, _) = run_rows(&trainer, TrainState::new(params.clone()), &items);
    assert_eq!(full, again);

    let first = trainer.run_until(TrainState::new(params), 12, &items, &[], |_| {}).unwrap();
    let bytes = encode_checkpoint(&model, &first.state.params, &first.state.adam, &first.schedule).unwrap();
    let ck = decode_checkpoint(&model, &bytes).unwrap();
    let resumed = TrainState {
        params: ck.params,
        adam: ck.adam,
        iteration: ck.schedule.iteration,
    };
    let (rest, _) = run_rows(&trainer, resumed, &items);
    assert_eq!(rest[0].to_bits(), full[12].to_bits());
    assert_eq!(rest, full[12..].to_vec());
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let topo = build_independent(&[(1, 16)], 3).unwrap();
    let model = small_model(&topo);
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(4));
    let mut adam = AdamState::new(&params);
    adam_step(&mut params.clone(), &params, &mut adam, &AdamConfig::default()).unwrap();
    let sched = ScheduleConfig::default().weights_at(7, 100).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, &params, &adam, &sched).unwrap();
    let ck = load_checkpoint(&path, &model).unwrap();
    for (a, b) in ck.params.blocks.iter().zip(&params.blocks) {
        assert_eq!(a.name, b.name);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(ck.adam.step, 1);
    assert_eq!(ck.adam.v.blocks[0].data, adam.v.blocks[0].data);
    assert_eq!(ck.schedule, sched);

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&model, &bad).unwrap_err().to_string().contains("magic"));
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&9u32.to_le_bytes());
    assert!(decode_checkpoint(&model, &bad).unwrap_err().to_string().contains("version"));
    assert!(decode_checkpoint(&model, &bytes[..bytes.len() - 3]).is_err());

    let other_topo = build_independent(&[(1, 24)], 3).unwrap();
    let other = small_model(&other_topo);
    let msg = decode_checkpoint(&other, &bytes).unwrap_err().to_string();
    assert!(msg.contains(&model.config_hash()) && msg.contains(&other.config_hash()), "{msg}");
}
