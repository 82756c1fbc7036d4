mod common;

use common::{random_adapters, small_config, tiny_experiment};
use fedspine::config::{ExperimentConfig, Mode, Optimizer};
use fedspine::fedsim::*;
use fedspine::lora::LoraModule;
use fedspine::model::{apply_masks, Adapters, GroupId, MaskSet};
use fedspine::numkit::{gaussian_fill, Matrix, RngStream};
use fedspine::pruning::{DependencyMap, GroupImportanceState};
use fedspine::Error;

fn fixed_profiles(exp: &mut Experiment) {
    for d in exp.devices_mut() {
        d.profile = DeviceProfile::fixed(1e-9, 1e6);
    }
}

#[test]
fn waiting_time_examples() {
    assert_eq!(waiting_time(&[1.0, 2.0, 3.0]), 1.0);
    assert_eq!(waiting_time(&[3.0, 1.0, 2.0]), 1.0);
    assert!(waiting_time(&[0.7; 5]).abs() < 1e-12);
    assert_eq!(waiting_time(&[]), 0.0);
}

#[test]
fn identical_devices_do_not_wait() {
    let mut c = tiny_experiment(Mode::FedaptUniform);
    c.p_target = 0.0;
    let mut exp = Experiment::new(c).unwrap();
    fixed_profiles(&mut exp);
    for _ in 0..2 {
        let out = exp.run_round(false).unwrap();
        assert!(out.record.gamma.abs() < 1e-12, "gamma {}", out.record.gamma);
        let t0 = out.record.devices[0].t_total;
        assert!(out.record.devices.iter().all(|d| d.t_total == t0));
    }
}

#[test]
fn weights_normalize_importances() {
    assert_eq!(aggregation_weights(&[1.0, 3.0]), vec![0.25, 0.75]);
    assert_eq!(aggregation_weights(&[0.0, 0.0, 0.0, 0.0]), vec![0.25; 4]);
}

#[test]
fn identical_uploads_aggregate_to_themselves() {
    let config = small_config();
    let up = random_adapters(&config, 3, &mut RngStream::new(4, 0));
    let agg = aggregate_products(&[&up, &up], &aggregation_weights(&[1.0, 3.0])).unwrap();
    for (m, g) in up.loras.iter().zip(&agg) {
        assert_eq!(&m.delta(), g);
    }
    let head = aggregate_heads(&[&up, &up], &[0.25, 0.75]).unwrap();
    assert_eq!(head, up.head);

    // Any convex combination of equal points is that point, up to rounding.
    let five: Vec<&Adapters> = vec![&up; 5];
    let agg = aggregate_products(&five, &aggregation_weights(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
    for (m, g) in up.loras.iter().zip(&agg) {
        assert!(m.delta().sub(g).unwrap().max_abs() < 1e-12 * m.delta().max_abs().max(1.0));
    }
}

#[test]
fn two_uploads_match_direct_formula() {
    let config = small_config();
    let mut rng = RngStream::new(9, 0);
    let u1 = random_adapters(&config, 2, &mut rng);
    let u2 = random_adapters(&config, 5, &mut rng);
    let (i1, i2) = (0.37, 1.91);
    let agg = aggregate_products(&[&u1, &u2], &aggregation_weights(&[i1, i2])).unwrap();
    for ((m1, m2), g) in u1.loras.iter().zip(&u2.loras).zip(&agg) {
        let (s1, s2) = (m1.alpha() / 2.0, m2.alpha() / 5.0);
        let want = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
            let p1: f64 = (0..2).map(|k| m1.b()[(i, k)] * m1.a()[(k, j)]).sum();
            let p2: f64 = (0..5).map(|k| m2.b()[(i, k)] * m2.a()[(k, j)]).sum();
            (i1 * s1 * p1 + i2 * s2 * p2) / (i1 + i2)
        });
        assert!(want.sub(g).unwrap().max_abs() < 1e-12);
    }
}

#[test]
fn homogeneous_average_cases() {
    let config = small_config();
    let mut rng = RngStream::new(2, 0);
    let u = random_adapters(&config, 3, &mut rng);
    assert_eq!(homogeneous_average(&[&u.loras]).unwrap(), u.loras);

    let neg: Vec<LoraModule> = u
        .loras
        .iter()
        .map(|m| LoraModule::from_factors(m.host, m.b().scale(-1.0), m.a().clone(), m.alpha()).unwrap())
        .collect();
    for m in homogeneous_average(&[&u.loras, &neg]).unwrap() {
        assert_eq!(m.b().max_abs(), 0.0);
    }

    let v = random_adapters(&config, 3, &mut rng);
    let avg = homogeneous_average(&[&u.loras, &v.loras]).unwrap();
    let gap = avg[0]
        .product()
        .sub(&u.loras[0].product().add(&v.loras[0].product()).unwrap().scale(0.5))
        .unwrap()
        .max_abs();
    assert!(gap > 1e-3, "averaged factors reproduced the averaged product");

    let w = random_adapters(&config, 2, &mut rng);
    assert!(matches!(
        homogeneous_average(&[&u.loras, &w.loras]),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn latency_monotone_in_rank_and_pruning() {
    let config = fedspine::model::ModelConfig::default();
    let profile = DeviceProfile::fixed(1e-9, 1e6);
    let full = MaskSet::full(&config);
    let t4 = simulate_latency(&profile, 1, &config, &full, 4, 20, 32);
    let t8 = simulate_latency(&profile, 1, &config, &full, 8, 20, 32);
    assert!(t8.comm > t4.comm);
    let mut no_ffn = full.clone();
    let all: Vec<GroupId> = (config.num_heads..config.groups_per_block())
        .map(|g| GroupId::new(0, g))
        .collect();
    apply_masks(&mut no_ffn, &all).unwrap();
    let pruned = simulate_latency(&profile, 1, &config, &no_ffn, 4, 20, 32);
    assert!(pruned.comp < t4.comp);
    assert_eq!(pruned.comm, t4.comm);
    assert_eq!(t4.total(), t4.comp + t4.comm);
}

#[test]
fn mode_multiplier_is_piecewise_constant() {
    let c = ExperimentConfig::default();
    let p = DeviceProfile::sample(&c, &mut RngStream::new(3, 3));
    for epoch in 0..4 {
        let first = p.mode_multiplier(epoch * c.mode_period + 1);
        for r in 2..=c.mode_period {
            assert_eq!(p.mode_multiplier(epoch * c.mode_period + r), first);
        }
        assert!((1.0..=2.0).contains(&first));
    }
    assert_ne!(p.mode_multiplier(1), p.mode_multiplier(c.mode_period + 1));
}

struct LocalFixture {
    exp: Experiment,
    map: DependencyMap,
}

impl LocalFixture {
    fn new() -> Self {
        let exp = Experiment::new(tiny_experiment(Mode::FedaptUniform)).unwrap();
        LocalFixture {
            map: DependencyMap::for_model(&small_config()),
            exp,
        }
    }

    fn ctx(&self, lr: f64, tau: usize, batch_size: usize) -> LocalContext<'_> {
        LocalContext {
            model: self.exp.model(),
            train: self.exp.train_set(),
            map: &self.map,
            lr,
            batch_size,
            tau,
            optimizer: Optimizer::Adam,
        }
    }

    fn device(&self, shard: Vec<usize>) -> DeviceState {
        let config = small_config();
        DeviceState {
            id: 0,
            profile: DeviceProfile::fixed(1e-9, 1e6),
            shard,
            masks: MaskSet::full(&config),
            importance: GroupImportanceState::new(&config, 0.9).unwrap(),
            rng: RngStream::new(5, 5),
        }
    }

    fn adapters(&self) -> Adapters {
        random_adapters(&small_config(), 3, &mut RngStream::new(8, 8))
    }
}

#[test]
fn zero_steps_leave_lora_unchanged() {
    let f = LocalFixture::new();
    let mut dev = f.device((0..20).collect());
    let out = local_device_round(&f.ctx(1e-2, 0, 8), &mut dev, f.adapters(), 0.0, true).unwrap();
    assert_eq!(out.adapters, f.adapters());
    assert_eq!(out.delta_f, 0.0);
}

#[test]
fn zero_learning_rate_still_scores() {
    let f = LocalFixture::new();
    // A shard exactly one batch long: every step sees the same examples.
    let mut dev = f.device((0..8).collect());
    let out = local_device_round(&f.ctx(0.0, 5, 8), &mut dev, f.adapters(), 0.0, true).unwrap();
    assert_eq!(out.adapters, f.adapters());
    assert!(out.delta_f.abs() < 1e-12, "delta_f {}", out.delta_f);
    assert!(dev.importance.theta[0].iter().all(|&s| s > 0.0));
    assert_eq!(dev.importance.steps, 5);
}

#[test]
fn identical_devices_return_identical_lora() {
    let f = LocalFixture::new();
    let mut d1 = f.device((0..30).collect());
    let mut d2 = f.device((0..30).collect());
    let ctx = f.ctx(1e-2, 4, 8);
    let o1 = local_device_round(&ctx, &mut d1, f.adapters(), 0.3, true).unwrap();
    let o2 = local_device_round(&ctx, &mut d2, f.adapters(), 0.3, true).unwrap();
    assert_eq!(o1.adapters, o2.adapters);
    assert_eq!(o1.pruned, o2.pruned);
    assert_eq!(d1.masks, d2.masks);
    assert!(d1.pruned_ratio(&small_config()) >= 0.3);
}

#[test]
fn training_lowers_the_loss() {
    let f = LocalFixture::new();
    let mut dev = f.device((0..8).collect());
    let out = local_device_round(&f.ctx(1e-2, 30, 8), &mut dev, f.adapters(), 0.0, true).unwrap();
    assert!(out.delta_f > 0.0, "loss went from {} to {}", out.first_loss, out.last_loss);
}

#[test]
fn preference_constraint_holds_every_round() {
    for mode in fedspine::config::Mode::ALL {
        let mut c = tiny_experiment(mode);
        c.rounds = 6;
        let summary = run_experiment(&c, &mut MetricsSink::none()).unwrap();
        assert_eq!(summary.total_violations(), 0, "{mode}");
        for r in &summary.records {
            assert!(r.gamma >= 0.0);
            for d in &r.devices {
                assert!(d.pruned_ratio >= d.p, "{mode} round {} device {}", r.round, d.device);
                assert!((d.t_total - d.t_comp - d.t_comm).abs() < 1e-15);
            }
        }
        let last = summary.records.last().unwrap();
        if mode == Mode::NoPruneHetlora {
            assert!(last.devices.iter().all(|d| d.pruned_ratio == 0.0));
        } else {
            assert!(last.devices.iter().all(|d| d.pruned_ratio >= c.p_target));
        }
    }
}

#[test]
fn fedspine_rebases_and_saturates() {
    let mut c = tiny_experiment(Mode::Fedspine);
    c.rounds = 12;
    let mut exp = Experiment::new(c.clone()).unwrap();
    let mut prev = vec![0.0; c.devices];
    while !exp.is_finished() {
        let out = exp.run_round(false).unwrap();
        assert_eq!(out.pulls.len(), c.devices);
        for d in &out.record.devices {
            assert!(d.p >= prev[d.device] - 1e-12 || d.p == c.p_target);
            assert!((c.r_min..=c.r_max).contains(&d.r));
            assert!(d.reward.unwrap().is_finite());
            prev[d.device] = d.pruned_ratio;
        }
    }
    for (agent, d) in exp.server().agents.iter().zip(exp.devices()) {
        assert!(agent.p_lower() <= d.pruned_ratio(&c.model).min(c.p_target) + 1e-12);
    }
}

#[test]
fn zero_target_prune_then_tune_equals_tuning_only() {
    let mut records = Vec::new();
    for mode in [Mode::PruneThenTune, Mode::TuneThenPrune, Mode::FedaptUniform] {
        let mut c = tiny_experiment(mode);
        c.p_target = 0.0;
        let mut s = run_experiment(&c, &mut MetricsSink::none()).unwrap();
        for r in &mut s.records {
            r.mode.clear();
        }
        records.push(s.records);
    }
    assert_eq!(records[0], records[1]);
    assert_eq!(records[0], records[2]);
}

#[test]
fn sampled_devices_form_sorted_subsets() {
    let mut c = tiny_experiment(Mode::Fedspine);
    c.devices = 5;
    c.sampled_m = 2;
    let s = run_experiment(&c, &mut MetricsSink::none()).unwrap();
    for r in &s.records {
        let ids: Vec<usize> = r.devices.iter().map(|d| d.device).collect();
        assert_eq!(ids.len(), 2);
        assert!(ids[0] < ids[1]);
    }
}

#[test]
fn metrics_stream_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut streams = Vec::new();
    for workers in [1, 3] {
        let mut c = tiny_experiment(Mode::Fedspine);
        c.workers = workers;
        let out = dir.path().join(format!("w{workers}"));
        let mut sink = MetricsSink::create(&out, true).unwrap();
        run_experiment(&c, &mut sink).unwrap();
        drop(sink);
        let read = |name: &str| std::fs::read(out.join(name)).unwrap();
        streams.push((read("metrics.jsonl"), read("pulls.jsonl"), read("summary.csv"), read("importance.csv")));
    }
    assert_eq!(streams[0], streams[1]);
    let text = String::from_utf8(streams[0].0.clone()).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        let r: RoundRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.devices.len(), 3);
    }
    let csv = String::from_utf8(streams[0].2.clone()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), SUMMARY_HEADER);
    let imp = String::from_utf8(streams[0].3.clone()).unwrap();
    let groups = small_config().groups_per_block();
    assert_eq!(imp.lines().count(), 1 + 4 * 3 * groups);
}

#[test]
fn rank_bound_follows_smallest_host() {
    let mut c = tiny_experiment(Mode::Fedspine);
    c.r_max = 7;
    match c.validate() {
        Err(Error::Validation { key, .. }) => assert_eq!(key, "r_max"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn distribution_refactors_products_at_device_rank() {
    let config = small_config();
    let mut rng = RngStream::new(1, 2);
    let deltas: Vec<Matrix> = config
        .hosts()
        .into_iter()
        .map(|h| {
            let (d, k) = config.host_shape(h.kind);
            gaussian_fill(&mut rng, d, 2, 1.0).matmul(&gaussian_fill(&mut rng, 2, k, 1.0)).unwrap()
        })
        .collect();
    let global = GlobalLora::Products(deltas.clone());
    let loras = global.distribute(&config, 4, 16.0, &mut rng).unwrap();
    for (m, d) in loras.iter().zip(&deltas) {
        assert_eq!(m.rank(), 4);
        assert!(m.delta().sub(d).unwrap().max_abs() < 1e-10);
    }
    let shared = GlobalLora::Factors(loras.clone());
    assert_eq!(shared.distribute(&config, 4, 16.0, &mut rng).unwrap(), loras);
    assert!(shared.distribute(&config, 3, 16.0, &mut rng).is_err());
}

#[test]
fn single_device_without_pruning_converges() {
    let mut c = tiny_experiment(Mode::FedaptUniform);
    c.devices = 1;
    c.p_target = 0.0;
    c.rounds = 50;
    c.tau = 10;
    c.lr = 5e-4;
    let s = run_experiment(&c, &mut MetricsSink::none()).unwrap();
    let losses: Vec<f64> = s.records.iter().map(|r| r.global_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
}
