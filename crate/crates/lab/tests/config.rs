use rft_core::finetune::{EngineKind, RewardMode};
use rft_core::motion::Representation;
use rft_lab::{ExperimentConfig, LabError};

fn modified() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.samples = 90;
    cfg.diffusion.schedule.steps = 20;
    cfg.engine.curriculum.steps = 20;
    cfg.engine.curriculum.rho = 0.25;
    cfg.engine.kind = EngineKind::Trajectory;
    cfg.engine.mode = RewardMode::Perceive;
    cfg.engine.aggregator.weights = [0.5, 0.1, 0.0, 2.0];
    cfg.engine.optim.lr = 3.5e-5;
    cfg.reward.model.temperature = 0.07;
    cfg.eval.repr = Representation::Rotation;
    cfg.eval.ks = vec![1, 5];
    cfg.seeds = cfg.seeds.shifted(17);
    cfg.output.dir = "out/with space".into();
    cfg
}

#[test]
fn every_field_round_trips() {
    let cfg = modified();
    cfg.validate().unwrap();
    let text = cfg.to_flat_string().unwrap();
    assert!(text.lines().any(|l| l == "engine.kind = \"trajectory\""));
    assert!(text.lines().any(|l| l == "engine.mode = \"perceive\""));
    assert_eq!(ExperimentConfig::from_flat_str(&text).unwrap(), cfg);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.txt");
    cfg.save(&path).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    // Saving the loaded copy reproduces the file byte for byte.
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
}

#[test]
fn invalid_settings_are_rejected() {
    let mut edits: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
        Box::new(|c| c.corpus.labels = 0),
        Box::new(|c| c.corpus.samples = 3),
        Box::new(|c| c.reward.model.labels = 5),
        Box::new(|c| c.diffusion.net.data_dim += 1),
        Box::new(|c| c.engine.curriculum.steps = 40),
        Box::new(|c| c.engine.labels = vec![0, 6]),
        Box::new(|c| c.eval.held_out_labels = vec![9]),
        Box::new(|c| c.eval.ks = vec![33]),
        Box::new(|c| c.engine.aggregator.weights[1] = -1.0),
        Box::new(|c| c.engine.curriculum.k = 0),
    ];
    for (i, edit) in edits.iter_mut().enumerate() {
        let mut cfg = ExperimentConfig::default();
        edit(&mut cfg);
        assert!(cfg.validate().is_err(), "edit {i}");
    }
    assert!(matches!(ExperimentConfig::from_flat_str("engine.kind = \"other\""), Err(LabError::Config(_))));
    assert!(ExperimentConfig::from_flat_str("seeds.eval = -1").is_err());
    assert!(ExperimentConfig::load("/nonexistent/config.txt").is_err());
}
