use actsched::eval::{creativity_report, emd_1d, feasibility_report, joint_density_report, Domain, Role, SampleSet};
use actsched::schedule::{split_dataset, Sample, Split};
use actsched::synthpop::{generate_population, GeneratorSpec};
use actsched::{decode_schedule, encode_schedule, train, Model, ModelConfig, ModelKind, TrainConfig};
use proptest::prelude::*;

const SPEC: &str = include_str!("../../../configs/synthpop.toml");

fn small_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        depth: 1,
        hidden: 16,
        label_hidden: if kind.uses_labels() { 8 } else { 0 },
        latent: if kind.has_encoder() { 2 } else { 0 },
        seq_len: 8,
        ..ModelConfig::defaults(kind)
    }
}

#[test]
fn population_trains_generates_and_evaluates() {
    let spec = GeneratorSpec::from_toml(SPEC).unwrap();
    let (vocab, schema) = (spec.vocab(), spec.schema());
    let samples: Vec<Sample> = generate_population(&spec, 600)
        .unwrap()
        .into_iter()
        .map(|(raw, labels)| Sample {
            pid: raw.pid.clone(),
            schedule: encode_schedule(&raw, &vocab, 8).unwrap(),
            labels,
        })
        .collect();
    let ds = split_dataset(samples, 5).unwrap();
    let tcfg = TrainConfig {
        max_epochs: 3,
        batch_size: 64,
        learning_rate: 3e-3,
        seed: 2,
        ..Default::default()
    };
    let real: Vec<&Sample> = ds.split(Split::Test).collect();
    let labels: Vec<_> = real.iter().map(|s| s.labels.clone()).collect();
    let real_set = SampleSet::new(
        real.iter().map(|s| s.schedule.clone()).collect(),
        labels.clone(),
        Role::Real,
    )
    .unwrap();
    let train_set: Vec<_> = ds.split(Split::Train).map(|s| s.schedule.clone()).collect();

    for kind in ModelKind::ALL {
        let model = Model::new(kind, small_config(kind), vocab.clone(), schema.clone(), 1).unwrap();
        let trained = train(model, &ds, &tcfg).unwrap();
        let first = &trained.history.epochs[0];
        assert!(first.train.total.is_finite() && first.validation.total.is_finite());

        let gen = trained.model.sample(&labels, labels.len(), 7).unwrap();
        assert_eq!(gen.len(), labels.len());
        for g in &gen {
            let raw = decode_schedule(&g.schedule, &vocab, "x").unwrap();
            assert_eq!(raw.episodes.last().unwrap().end, 1440);
        }
        let synth = SampleSet::new(gen.into_iter().map(|g| g.schedule).collect(), labels.clone(), Role::Synthetic).unwrap();
        let report = joint_density_report(&real_set, &synth, &schema, &vocab).unwrap();
        for d in Domain::ALL {
            assert!(report.joint(d).is_finite() && report.joint(d) >= 0.0);
        }
        let f = feasibility_report(&synth, &vocab);
        assert!((0.0..=1.0).contains(&f.invalid));
        let c = creativity_report(&synth.schedules, &train_set).unwrap();
        assert!((0.0..=1.0).contains(&c.homogeneity));

        let bytes = trained.model.to_bytes(&[]);
        let (back, _) = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(&[]), bytes);
        assert_eq!(
            back.sample(&labels, labels.len(), 7).unwrap().iter().map(|g| &g.schedule).collect::<Vec<_>>(),
            trained.model.sample(&labels, labels.len(), 7).unwrap().iter().map(|g| &g.schedule).collect::<Vec<_>>()
        );
    }
}

proptest! {
    #[test]
    fn emd_is_a_shift_equivariant_metric(
        a in prop::collection::vec(-5.0f64..5.0, 1..30),
        b in prop::collection::vec(-5.0f64..5.0, 1..30),
        c in prop::collection::vec(-5.0f64..5.0, 1..30),
        shift in -3.0f64..3.0,
    ) {
        let ab = emd_1d(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - emd_1d(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!(ab <= emd_1d(&a, &c).unwrap() + emd_1d(&c, &b).unwrap() + 1e-9);
        let moved: Vec<f64> = a.iter().map(|x| x + shift).collect();
        prop_assert!((emd_1d(&a, &moved).unwrap() - shift.abs()).abs() < 1e-9);
    }
}
