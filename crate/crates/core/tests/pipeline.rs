use advl::blackbox::{region_attack, GradientMode, NetworkOracle, QueryOracle, RegionAttackConfig};
use advl::experiment::{
    AttackSpec, DatasetSource, ExperimentConfig, ModelRef, SweepAxis, SweepSpec, Task, TargetSelection,
};
use advl::io::{model_file, synth::synth_blobs};
use advl::train::{accuracy, distill, train, OptimizerConfig, Targets, TrainConfig};
use advl::whitebox::{epsilon_attack, EpsAttackConfig};
use advl::{Network, Profile};

fn quick_config(temperature: f64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 16,
        learning_rate: 3e-3,
        optimizer: OptimizerConfig::adam(),
        seed: 2,
        temperature,
        ..TrainConfig::default()
    }
}

#[test]
fn train_distill_attack_round_trip() {
    let data = synth_blobs(3, 30, &[1, 8, 8], 10.0, 1).unwrap();
    let specs = Profile::Tiny.layers(3);
    let mut net = Network::init(&[1, 8, 8], &specs, 1.0, 2).unwrap();
    train(&mut net, &data, Targets::Hard, &quick_config(1.0)).unwrap();
    assert!(accuracy(&net, &data).unwrap() >= 0.95);

    let d = distill(&data, &specs, &quick_config(20.0)).unwrap();
    assert_eq!(d.student.temperature(), 1.0);
    assert_eq!(d.teacher.temperature(), 20.0);
    assert!(accuracy(&d.student, &data).unwrap() >= 0.95);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.advl");
    model_file::save(&d.student, &path).unwrap();
    let back = model_file::load(&path).unwrap();
    assert_eq!(model_file::encode(&back), model_file::encode(&d.student));

    let x = &data.images()[0];
    let cfg = EpsAttackConfig {
        epsilon_8bit: 128.0,
        ..Default::default()
    };
    let r = epsilon_attack(&back, x, 1, &cfg).unwrap();
    assert!(r.max_pert_8bit <= 128.0 + 1e-6);
    assert_eq!(r.success, back.predict(&r.adversarial).unwrap() == 1);
}

#[test]
fn finite_difference_region_attack_charges_every_query() {
    let net = Network::from_profile(Profile::Tiny, &[1, 8, 8], 3, 1.0, 3).unwrap();
    let oracle = NetworkOracle::new(&net);
    let x = synth_blobs(3, 1, &[1, 8, 8], 10.0, 4).unwrap().images()[0].clone();
    let cfg = RegionAttackConfig {
        gradient_mode: GradientMode::FiniteDifference,
        fd_coords: 10,
        max_iters: 7,
        sigma: 0.1,
        ..Default::default()
    };
    let target = (net.predict(&x).unwrap() + 1) % 3;
    let r = region_attack(&oracle, &x, target, &cfg).unwrap();
    assert_eq!(r.queries, oracle.query_count());
    let expected = (r.iterations_used as u64 + 1) + 2 * 10 * r.iterations_used as u64;
    assert_eq!(r.queries, expected);
}

#[test]
fn reproducible_experiments_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.advl");
    model_file::save(&Network::from_profile(Profile::Tiny, &[1, 8, 8], 3, 1.0, 5).unwrap(), &model).unwrap();
    let mut cfg = ExperimentConfig {
        dataset: DatasetSource::Synth {
            classes: 3,
            per_class: 3,
            dims: vec![1, 8, 8],
            separation: 10.0,
            seed: 6,
        },
        models: vec![ModelRef {
            temperature: 1.0,
            path: model,
        }],
        task: Task::Sweep(SweepSpec {
            axis: SweepAxis::Epsilon,
            grid: vec![20.0, 60.0],
            model_temperature: 1.0,
            attack: AttackSpec::Epsilon(EpsAttackConfig {
                max_iters: 30,
                ..Default::default()
            }),
            images: 3,
            targets: TargetSelection::AllOthers,
            seed: 7,
        }),
        workers: 4,
        reproducible: true,
        output: dir.path().join("a.csv"),
    };
    cfg.run().unwrap();
    cfg.output = dir.path().join("b.csv");
    cfg.run().unwrap();
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
}
