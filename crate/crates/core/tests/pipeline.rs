use mote_core::dataset::{generate_synthetic, load_manifest, write_embeddings, Protocol, SyntheticSpec};
use mote_core::expert::{read_expert, write_expert, TrainConfig};
use mote_core::harness::{run_protocol, RunConfig, StageOrigin, MIN_TIMED};
use mote_core::inference::{predict, InferenceConfig};
use mote_core::prototypes::{read_pool, write_pool, PrototypeOrigin};

fn easy(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: 20,
        dim: 32,
        samples_per_class: 50,
        cluster_radius: 10.0,
        noise_sigma: 1.0,
        task_drift: 0.0,
        seed,
    }
}

fn quick() -> RunConfig {
    RunConfig {
        train: TrainConfig { epochs: 3, ..TrainConfig::default() },
        ..RunConfig::default()
    }
}

#[test]
fn easy_regime_usually_has_one_reliable_expert() {
    let ds = generate_synthetic(&easy(1993)).unwrap();
    let protocol = Protocol::shuffled(&ds, 4, 4, 1993).unwrap();
    let out = run_protocol(&ds, &protocol, &RunConfig::default()).unwrap();
    let cfg = InferenceConfig::default();
    let (mut single, mut total) = (0, 0);
    for s in out.test_sets.iter().flatten() {
        let r = predict(&s.features, &s.msa_features, &out.experts, &out.pool, &cfg).unwrap();
        single += usize::from(r.reliable_experts.len() == 1);
        total += 1;
    }
    assert!(single as f64 >= 0.99 * total as f64, "{single}/{total}");
}

#[test]
fn checkpoints_reproduce_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&easy(5)).unwrap();
    write_embeddings(&ds, dir.path().join("d.mote")).unwrap();
    std::fs::write(
        dir.path().join("m.json"),
        r#"{"name":"d","base":4,"increment":4,"seed":11,"datasets":["d.mote"]}"#,
    )
    .unwrap();
    let manifest = load_manifest(dir.path().join("m.json")).unwrap();
    let (ds, protocol) = manifest.build(manifest.seed).unwrap();
    let out = run_protocol(&ds, &protocol, &quick()).unwrap();

    write_pool(&out.pool, dir.path().join("pool.motp")).unwrap();
    let pool = read_pool(dir.path().join("pool.motp")).unwrap();
    let experts: Vec<_> = out
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let p = dir.path().join(format!("e{i}.mote"));
            write_expert(e, &p).unwrap();
            read_expert(&p).unwrap()
        })
        .collect();

    let cfg = InferenceConfig::default();
    for s in out.test_sets.iter().flatten() {
        let a = predict(&s.features, &s.msa_features, &out.experts, &out.pool, &cfg).unwrap();
        let b = predict(&s.features, &s.msa_features, &experts, &pool, &cfg).unwrap();
        assert_eq!(a.predicted_class, b.predicted_class);
        assert_eq!(a.weights, b.weights);
    }
}

#[test]
fn overflow_tasks_reuse_existing_experts() {
    let ds = generate_synthetic(&easy(8)).unwrap();
    let protocol = Protocol::shuffled(&ds, 4, 4, 8).unwrap();
    let cfg = RunConfig { adapter_limit: Some(2), ..quick() };
    let out = run_protocol(&ds, &protocol, &cfg).unwrap();
    assert_eq!(out.experts.len(), 2);
    assert_eq!(out.pool.len(), 20);
    let origins: Vec<_> = out.metrics.stages.iter().map(|s| s.origin).collect();
    assert_eq!(origins[..2], [StageOrigin::Trained; 2]);
    assert!(origins[2..].iter().all(|o| *o == StageOrigin::Synthesized));
    for stage in &out.metrics.stages[2..] {
        assert!(stage.train_report.is_none());
        for c in &stage.classes {
            assert_eq!(out.pool.get(*c).unwrap().origin(), PrototypeOrigin::Merged);
            // merged classes are visible to every expert
            assert!(out.pool.expert_ids().all(|e| out.pool.scope_of(e).unwrap().contains(c)));
        }
    }
}

#[test]
fn timing_block_only_when_requested() {
    let ds = generate_synthetic(&easy(2)).unwrap();
    let protocol = Protocol::shuffled(&ds, 10, 10, 2).unwrap();
    let off = run_protocol(&ds, &protocol, &quick()).unwrap().metrics;
    assert!(off.timing.is_none());
    let cfg = RunConfig { timing: true, ..quick() };
    let on = run_protocol(&ds, &protocol, &cfg).unwrap().metrics;
    let t = on.timing.as_ref().unwrap();
    assert!(t.timed >= MIN_TIMED);
    assert!(t.median_s > 0.0 && t.p95_s >= t.median_s);
    assert_eq!(off.to_json_without_timing().unwrap(), {
        let mut m = on.clone();
        m.config.timing = false;
        m.to_json_without_timing().unwrap()
    });
}
