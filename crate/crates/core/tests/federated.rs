use skybid_core::env::ScenarioConfig;
use skybid_core::fedtrain::{evaluate, train, train_with_observer, FilterMode, TrainConfig};
use skybid_core::policy::PolicyParams;

fn small(filter_mode: FilterMode, byz: Vec<usize>) -> (ScenarioConfig, TrainConfig) {
    let scenario = ScenarioConfig::reference(5, 2, 2, 4, 3);
    let cfg = TrainConfig {
        epochs: 3,
        batch_range: (8, 10),
        mini_batch: 4,
        learning_rate: 1e-3,
        byz_node_ids: byz,
        filter_mode,
        seed: 3,
        ..TrainConfig::default()
    };
    (scenario, cfg)
}

#[test]
fn filter_modes_report_consistent_metadata() {
    for mode in [FilterMode::Dtbf, FilterMode::Static, FilterMode::None, FilterMode::NoFed] {
        let (scenario, cfg) = small(mode, vec![4]);
        let (records, _) = train(&scenario, &cfg).unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            assert!((8..=10).contains(&r.batch_size));
            assert!(r.inner_steps >= 1);
            assert!(r.mean_total_reward.is_finite());
            assert_eq!(r.total_reward_per_sp.len(), 5);
            match mode {
                FilterMode::Dtbf | FilterMode::Static => {
                    assert!(r.epsilon.is_some() && r.threshold.is_some());
                    assert_eq!(r.good_count, r.good_set.len());
                    assert!(r.good_count >= 3);
                    assert_eq!(r.messages, 5);
                }
                FilterMode::None => {
                    assert_eq!(r.good_set, vec![0, 1, 2, 3, 4]);
                    assert_eq!(r.messages, 5);
                }
                FilterMode::NoFed => assert_eq!(r.messages, 0),
            }
        }
        if mode == FilterMode::Static {
            let eps: Vec<f64> = records.iter().map(|r| r.epsilon.unwrap()).collect();
            assert!(eps.windows(2).all(|w| w[0] == w[1]));
        }
    }
}

#[test]
fn observer_sees_every_epoch_and_final_policy() {
    let (scenario, cfg) = small(FilterMode::Dtbf, vec![]);
    let mut seen = Vec::new();
    let mut last: Option<PolicyParams> = None;
    let (records, params) = train_with_observer(&scenario, &cfg, |r, p| {
        seen.push(r.epoch);
        last = Some(p.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(records.len(), 3);
    assert_eq!(last.unwrap(), params);
}

#[test]
fn trained_policy_survives_a_snapshot_file() {
    let (scenario, cfg) = small(FilterMode::Dtbf, vec![]);
    let (_, params) = train(&scenario, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.bin");
    params.write_snapshot(std::fs::File::create(&path).unwrap()).unwrap();
    let back = PolicyParams::read_snapshot(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, params);
    let a = evaluate(&scenario, &params, 4, 9).unwrap();
    let b = evaluate(&scenario, &back, 4, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert!(a.iter().all(|e| e.negative_utility_per_sp.len() == 5));
}

#[test]
fn seeds_change_the_run() {
    let (scenario, cfg) = small(FilterMode::Dtbf, vec![]);
    let (a, _) = train(&scenario, &cfg).unwrap();
    let (b, _) = train(&scenario, &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a, b);
}
