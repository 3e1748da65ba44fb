use std::sync::OnceLock;

use creative_morph::bundle::ModelBundle;
use creative_morph::fixtures::{generate_fixtures, load_fixtures, save_fixtures, FixtureSet};
use creative_morph::geometry::build_template_with_uv;
use creative_morph::nn::Parameterized;
use creative_morph::pipeline::{sweep_alpha, transfer, TransferSpec};
use creative_morph::texture_style::Method;
use creative_morph::trainer::{
    evaluate_reconstruction, reconstruct, train_shape, train_texture, Stage, TrainConfig, TrainOutcome,
};

fn fixtures() -> &'static FixtureSet {
    static SET: OnceLock<FixtureSet> = OnceLock::new();
    SET.get_or_init(|| generate_fixtures(2, 7, &build_template_with_uv(3).unwrap()).unwrap())
}

fn small(stage: Stage, iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        feature_dim: 16,
        layers: 2,
        channels: 8,
        decoder_hidden: 8,
        render_resolution: 32,
        ..TrainConfig::desk(stage)
    }
}

fn fresh(cfg: &TrainConfig) -> ModelBundle {
    ModelBundle::new(cfg.shape_config(), cfg.texture_config(), cfg.seed).unwrap()
}

fn params(m: &dyn Parameterized) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, p| out.push((name, p.value.clone())));
    out
}

fn totals(o: &TrainOutcome) -> Vec<f64> {
    o.trace.iter().map(|r| r.total).collect()
}

#[test]
fn zero_iterations_return_the_initial_bundle() {
    let cfg = small(Stage::Shape, 0);
    let b = fresh(&cfg);
    let out = train_shape(&cfg, fixtures(), b.clone()).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(out.bundle, b);
}

#[test]
fn shape_training_is_deterministic() {
    let cfg = small(Stage::Shape, 4);
    let a = train_shape(&cfg, fixtures(), fresh(&cfg)).unwrap();
    let b = train_shape(&cfg, fixtures(), fresh(&cfg)).unwrap();
    assert_eq!(totals(&a), totals(&b));
    assert_eq!(a.bundle, b.bundle);
    assert!(totals(&a).iter().all(|v| v.is_finite()));
}

#[test]
fn shape_resume_reproduces_the_fresh_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 3,
        output_dir: Some(dir.path().join("fresh")),
        ..small(Stage::Shape, 6)
    };
    let full = train_shape(&cfg, fixtures(), fresh(&cfg)).unwrap();
    // Two periodic checkpoints plus the final model.
    assert_eq!(full.checkpoints.len(), 3);
    assert!(full.checkpoints[0].ends_with("shape_000003.ckpt"));
    let resumed_cfg = TrainConfig {
        resume: Some(full.checkpoints[0].clone()),
        output_dir: Some(dir.path().join("resumed")),
        ..cfg.clone()
    };
    let start = ModelBundle::load(&full.checkpoints[0], None).unwrap();
    assert_eq!(start.shape_iteration, 3);
    let resumed = train_shape(&resumed_cfg, fixtures(), start).unwrap();
    let (a, b) = (totals(&full), totals(&resumed));
    assert_eq!(b.len(), 3);
    for (x, y) in a[3..].iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
    let log = std::fs::read_to_string(dir.path().join("fresh/shape_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn texture_training_keeps_the_encoder_frozen() {
    let cfg = small(Stage::Texture, 3);
    let b = fresh(&cfg);
    let before = params(&b.texture.encoder);
    let out = train_texture(&cfg, fixtures(), b).unwrap();
    assert_eq!(params(&out.bundle.texture.encoder), before);
    assert_eq!(out.trace.len(), 3);
    assert_eq!(out.bundle.texture_iterations[&Method::Sadain], 3);
}

#[test]
fn texture_resume_reproduces_the_fresh_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        output_dir: Some(dir.path().to_path_buf()),
        ..small(Stage::Texture, 4)
    };
    let full = train_texture(&cfg, fixtures(), fresh(&cfg)).unwrap();
    let start = ModelBundle::load(&full.checkpoints[0], None).unwrap();
    let resumed = train_texture(
        &TrainConfig {
            output_dir: None,
            ..cfg
        },
        fixtures(),
        start,
    )
    .unwrap();
    let (a, b) = (totals(&full), totals(&resumed));
    for (x, y) in a[2..].iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_inference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Stage::Shape, 2);
    let shaped = train_shape(&cfg, fixtures(), fresh(&cfg)).unwrap().bundle;
    let tcfg = small(Stage::Texture, 1);
    let bundle = train_texture(&tcfg, fixtures(), shaped).unwrap().bundle;
    let path = dir.path().join("model.ckpt");
    bundle.save(&path).unwrap();
    let loaded = ModelBundle::load(&path, None).unwrap();
    assert_eq!(params(&loaded.shape), params(&bundle.shape));
    assert_eq!(params(&loaded.texture), params(&bundle.texture));
    assert_eq!(loaded.shape_iteration, bundle.shape_iteration);
    assert_eq!(loaded.texture_iterations, bundle.texture_iterations);
    let (s, t) = (&fixtures().samples[0], &fixtures().samples[1]);
    let spec = TransferSpec {
        alpha: 0.3,
        switch_gates: [true, false, true, false],
        resolution: 64,
        ..TransferSpec::default()
    };
    let a = transfer(&bundle, s, t, &spec).unwrap();
    let b = transfer(&loaded, s, t, &spec).unwrap();
    assert_eq!(a.mesh, b.mesh);
    assert_eq!(a.render.data, b.render.data);
    assert_eq!(a.texture.grid().data, b.texture.grid().data);
    assert_eq!(
        reconstruct(&bundle, &s.image).unwrap(),
        reconstruct(&loaded, &s.image).unwrap()
    );
    let render = cfg.render_config();
    assert_eq!(
        evaluate_reconstruction(&bundle, fixtures(), &render).unwrap(),
        evaluate_reconstruction(&loaded, fixtures(), &render).unwrap()
    );
}

#[test]
fn sweep_has_one_frame_per_step() {
    let cfg = small(Stage::Shape, 1);
    let mut bundle = train_shape(&cfg, fixtures(), fresh(&cfg)).unwrap().bundle;
    bundle = train_texture(&small(Stage::Texture, 1), fixtures(), bundle)
        .unwrap()
        .bundle;
    let (s, t) = (&fixtures().samples[0], &fixtures().samples[1]);
    let spec = TransferSpec {
        resolution: 32,
        ..TransferSpec::default()
    };
    let sweep = sweep_alpha(&bundle, s, t, 5, &spec).unwrap();
    assert_eq!(sweep.renders.len(), 5);
    let alphas: Vec<f64> = sweep.summary.frames.iter().map(|f| f.alpha).collect();
    assert_eq!(alphas, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    assert_eq!(sweep.summary.frames[0].displacement, 0.0);
    assert!(sweep.summary.frames.iter().all(|f| f.displacement.is_finite()));
}

#[test]
fn fixtures_are_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let template = build_template_with_uv(3).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_fixtures(&generate_fixtures(2, 7, &template).unwrap(), &a).unwrap();
    save_fixtures(&generate_fixtures(2, 7, &template).unwrap(), &b).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 11);
    for n in &names {
        assert_eq!(
            std::fs::read(a.join(n)).unwrap(),
            std::fs::read(b.join(n)).unwrap(),
            "{n:?}"
        );
    }
    let loaded = load_fixtures(&a).unwrap();
    assert_eq!(loaded.len(), 2);
    for s in &loaded.samples {
        let f = s.foreground_fraction();
        assert!((0.05..=0.6).contains(&f), "{f}");
    }
}
