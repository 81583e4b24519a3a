//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::{HashMap, VecDeque};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use navlab::env::{
    generate_world, is_success, transition, ActionId, OccupancyGrid, Pose, WorldSpec,
};
use navlab::eval::{
    run_suite, spl, success_rate, ExpertPolicy, MetricsReport, ModelPolicy, RandomPolicy,
};
use navlab::expert::{demonstrate, sample_tasks, shortest_path};
use navlab::model::{
    kl_gaussians, ActMode, GaussianLatent, LossWeights, ModelConfig, NavModel, TrainBatch,
    Variant,
};
use navlab::nn::standard_normal;
use navlab::trainer::{build_pool, init_state, train, TrainConfig};

fn check(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion:2} ({name}): {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// --- criterion 1: expert shortest paths match an independent BFS oracle ---

/// Breadth-first search over (cell, heading) states with unit step costs,
/// sharing nothing with the Dijkstra planner but the transition function.
fn bfs_oracle_steps(grid: &OccupancyGrid, start: &Pose, goal: &Pose) -> Option<usize> {
    if is_success(start, goal) {
        return Some(0);
    }
    let key = |p: &Pose| {
        let (i, j) = grid.pose_cell(p);
        (i, j, p.heading.rem_euclid(360))
    };
    let mut dist: HashMap<(i64, i64, i32), usize> = HashMap::new();
    dist.insert(key(start), 0);
    let mut queue = VecDeque::from([*start]);
    while let Some(pose) = queue.pop_front() {
        let d = dist[&key(&pose)];
        for a in [
            ActionId::MoveForward,
            ActionId::MoveBack,
            ActionId::MoveLeft,
            ActionId::MoveRight,
            ActionId::RotateCcw,
            ActionId::RotateCw,
        ] {
            let out = transition(grid, &pose, a);
            if out.collided || dist.contains_key(&key(&out.next_pose)) {
                continue;
            }
            if is_success(&out.next_pose, goal) {
                return Some(d + 1);
            }
            dist.insert(key(&out.next_pose), d + 1);
            queue.push_back(out.next_pose);
        }
    }
    None
}

#[test]
fn criterion_01_expert_matches_bfs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    let mut world_seed = 0u64;
    'outer: for _ in 0..200 {
        let spec = WorldSpec {
            width: rng.gen_range(6..=16),
            height: rng.gen_range(6..=16),
            obstacle_density: rng.gen_range(0.0..0.25),
            room_count: rng.gen_range(1..=3),
        };
        world_seed += 1;
        // Dense small worlds can be rejected as disconnected; skip those.
        let Ok(grid) = generate_world(world_seed, &spec) else {
            continue;
        };
        let tasks = sample_tasks(std::slice::from_ref(&grid), 2, world_seed ^ 0xabcd).unwrap();
        for task in &tasks {
            let planned = shortest_path(&grid, &task.start, &task.goal).unwrap();
            let oracle = bfs_oracle_steps(&grid, &task.start, &task.goal)
                .expect("sampled tasks are reachable");
            assert_eq!(
                planned.len() - 1,
                oracle,
                "world {world_seed} task {task:?}"
            );
            checked += 1;
            if checked >= 200 {
                break 'outer;
            }
        }
    }
    check(1, "expert vs BFS oracle", checked >= 200, &format!("{checked} tasks"));
}

// --- criterion 2: demonstrations replay exactly ---

#[test]
fn criterion_02_demonstrations_replay_exactly() {
    let spec = WorldSpec {
        width: 12,
        height: 12,
        obstacle_density: 0.12,
        room_count: 2,
    };
    let worlds: Vec<_> = (50..55).map(|s| generate_world(s, &spec).unwrap()).collect();
    let tasks = sample_tasks(&worlds, 100, 77).unwrap();
    for task in &tasks {
        let grid = worlds
            .iter()
            .find(|w| w.world_seed == task.world_seed)
            .unwrap();
        let demo = demonstrate(grid, task).unwrap();
        let mut pose = task.start;
        for k in 0..demo.len() {
            assert_eq!(demo.poses[k], pose);
            let out = transition(grid, &pose, demo.actions[k]);
            assert!(!out.collided, "collision while replaying {task:?}");
            pose = out.next_pose;
        }
        assert_eq!(*demo.actions.last().unwrap(), ActionId::Stop);
        assert!(is_success(&pose, &task.goal));
    }
    check(2, "replay exactness", true, "100 demonstrations");
}

// --- criterion 3: closed-form KL vs Monte Carlo ---

#[test]
fn criterion_03_kl_matches_monte_carlo() {
    const DIM: usize = 64;
    const SAMPLES: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let q = GaussianLatent {
            mean: Array2::from_shape_fn((1, DIM), |_| rng.gen_range(-1.0..1.0)),
            log_variance: Array2::from_shape_fn((1, DIM), |_| rng.gen_range(-0.5..0.5)),
        };
        let p = GaussianLatent {
            mean: Array2::from_shape_fn((1, DIM), |_| rng.gen_range(-1.0..1.0)),
            log_variance: Array2::from_shape_fn((1, DIM), |_| rng.gen_range(-0.5..0.5)),
        };
        let closed = kl_gaussians(&q, &p)[0];
        // Monte Carlo: E_q[log q(z) - log p(z)], z = mu_q + sigma_q * eps.
        let mut acc = 0.0;
        for _ in 0..SAMPLES {
            let mut lr = 0.0;
            for d in 0..DIM {
                let (mq, lq) = (q.mean[(0, d)], q.log_variance[(0, d)]);
                let (mp, lp) = (p.mean[(0, d)], p.log_variance[(0, d)]);
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let eps =
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                let z = mq + (0.5 * lq).exp() * eps;
                lr += -0.5 * (lq + (z - mq) * (z - mq) * (-lq).exp());
                lr -= -0.5 * (lp + (z - mp) * (z - mp) * (-lp).exp());
            }
            acc += lr;
        }
        let mc = acc / SAMPLES as f64;
        let rel = (mc - closed).abs() / closed.abs();
        worst = worst.max(rel);
        assert!(rel < 1e-2, "relative error {rel} (closed {closed}, mc {mc})");
        // Self-KL is exactly zero.
        assert_eq!(kl_gaussians(&q, &q).sum(), 0.0);
    }
    check(3, "KL vs Monte Carlo", true, &format!("worst rel err {worst:.2e}"));
}

// --- criterion 4: gradient check on every parameter group, all variants ---

fn synthetic_batch(rng: &mut ChaCha8Rng, b: usize) -> TrainBatch {
    use navlab::env::VIEW_SIZE;
    let images = ndarray::Array4::from_shape_fn((6 * b, 1, VIEW_SIZE, VIEW_SIZE), |_| {
        rng.gen_range(0.0..1.0f64)
    });
    let motions = [
        ActionId::MoveForward,
        ActionId::MoveLeft,
        ActionId::RotateCw,
        ActionId::MoveBack,
        ActionId::RotateCcw,
        ActionId::MoveRight,
    ];
    let actions: Vec<ActionId> = (0..b)
        .map(|i| {
            if i == b - 1 {
                ActionId::Stop
            } else {
                motions[i % motions.len()]
            }
        })
        .collect();
    TrainBatch {
        prev_actions: (0..b)
            .map(|i| if i == 0 { None } else { Some(actions[i - 1]) })
            .collect(),
        collision_labels: (0..b)
            .map(|_| {
                let mut l = [false; 6];
                for v in l.iter_mut() {
                    *v = rng.gen_bool(0.3);
                }
                l
            })
            .collect(),
        stop_labels: actions.iter().map(|&a| a == ActionId::Stop).collect(),
        images,
        actions,
    }
}

#[test]
fn criterion_04_gradient_check_all_variants() {
    let weights = LossWeights::default();
    let mut worst: f64 = 0.0;
    for variant in [Variant::Full, Variant::NoVg, Variant::NoCp, Variant::NoTc] {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let batch = synthetic_batch(&mut rng, 2);
        let mut model = NavModel::new(ModelConfig::tiny(variant, 13));
        for _ in 0..50 {
            model.power_iterate();
        }
        let noise = standard_normal(&mut rng, (2, model.config.latent_dim));
        let frozen = model.recon_target_features(&batch);

        model.zero_grads();
        model.loss_and_grad(&batch, &noise, &weights).unwrap();
        let mut analytic: HashMap<String, Vec<f64>> = HashMap::new();
        let mut sizes: Vec<(String, usize)> = Vec::new();
        model.visit_params(&mut |name, v, g| {
            analytic.insert(name.to_string(), g.to_vec());
            sizes.push((name.to_string(), v.len()));
        });

        let eps = 1e-6;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(99);
        for (name, len) in &sizes {
            for _ in 0..3 {
                let idx = probe_rng.gen_range(0..*len);
                let mut eval_at = |delta: f64| {
                    model.visit_params(&mut |n, v, _| {
                        if n == name {
                            v[idx] += delta;
                        }
                    });
                    let l = model
                        .loss_with_frozen_target(&batch, &noise, &weights, &frozen)
                        .unwrap()
                        .total;
                    model.visit_params(&mut |n, v, _| {
                        if n == name {
                            v[idx] -= delta;
                        }
                    });
                    l
                };
                let fd = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
                let an = analytic[name][idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                let rel = (fd - an).abs() / denom;
                worst = worst.max(rel);
                assert!(
                    rel < 1e-3,
                    "{} {name}[{idx}]: fd {fd} analytic {an}",
                    variant.name()
                );
            }
        }
    }
    check(4, "gradient check", true, &format!("worst rel err {worst:.2e}"));
}

// --- criterion 5: loss-weight audit ---

#[test]
fn criterion_05_loss_weight_audit() {
    let w = LossWeights::default();
    assert_eq!(
        (w.alpha, w.beta, w.gamma, w.zeta, w.eta),
        (0.01, 0.0001, 1.0, 0.4, 0.4)
    );
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = synthetic_batch(&mut rng, 3);
    let model = NavModel::new(ModelConfig::tiny(Variant::Full, 8));
    let noise = standard_normal(&mut rng, (3, model.config.latent_dim));
    let loss = model.loss_only(&batch, &noise, &w).unwrap();
    let by_hand = 0.01 * loss.recon
        + 0.0001 * loss.kl
        + 1.0 * loss.action_ce
        + 0.4 * loss.cpm
        + 0.4 * loss.tcm;
    let err = (loss.total - by_hand).abs();
    check(5, "loss-weight audit", err < 1e-12, &format!("|diff| = {err:.2e}"));
}

// --- criteria 6-8: desk-scale training runs ---

fn desk_config(variant: Variant, init_seed: u64, train_seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        total_updates: 1200,
        eval_interval: 300,
        checkpoint_interval: 0,
        world_count: 10,
        world_width: 12,
        world_height: 12,
        obstacle_density: 0.08,
        room_count: 1,
        tasks_per_world: 40,
        seed: train_seed,
        world_seed: 100,
        task_seed: 200,
        holdout_fraction: 0.1,
        holdout_max_steps: 400,
        model: ModelConfig {
            variant,
            channels: [8, 16, 16, 32, 64],
            latent_dim: 16,
            hidden_dim: 64,
            init_seed,
            collision_masking: false,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_06_desk_scale_learning() {
    let mut cfg = desk_config(Variant::Full, 11, 21);
    cfg.total_updates = 2400;
    let pool = build_pool(&cfg).unwrap();
    let mut state = init_state(&cfg);
    train(&cfg, &pool, &mut state, None, |_| {}).unwrap();
    // NaN-freedom across the whole run.
    assert!(state.log.updates.iter().all(|r| r.loss.is_finite()));
    let acc = state.log.evals.last().unwrap().holdout_accuracy;
    let ce = state.log.updates.last().unwrap().loss.action_ce;
    check(
        6,
        "desk-scale learning",
        acc >= 0.70 && ce < 6.0f64.ln(),
        &format!("held-out accuracy {acc:.3}, action_ce {ce:.3} (ln 6 = {:.3})", 6.0f64.ln()),
    );
}

/// Unseen-world evaluation suite shared by criteria 7 and 8. World seeds
/// are disjoint from the training range by construction.
fn unseen_suite() -> (Vec<OccupancyGrid>, Vec<navlab::expert::NavTask>) {
    let spec = WorldSpec {
        width: 12,
        height: 12,
        obstacle_density: 0.08,
        room_count: 1,
    };
    let worlds: Vec<_> = (900..905).map(|s| generate_world(s, &spec).unwrap()).collect();
    let tasks = sample_tasks(&worlds, 200, 9100).unwrap();
    (worlds, tasks)
}

#[test]
fn criteria_07_08_generalization_and_ablation_trends() {
    let (worlds, tasks) = unseen_suite();
    let seeds: [(u64, u64); 3] = [(31, 41), (32, 42), (33, 43)];
    let mut sr_gain_hits = 0;
    let mut collision_hits = 0;
    let mut notc_hits = 0;
    let mut details = Vec::new();
    for (k, &(init_seed, train_seed)) in seeds.iter().enumerate() {
        let mut reports: HashMap<Variant, MetricsReport> = HashMap::new();
        for variant in [Variant::Full, Variant::NoCp, Variant::NoTc] {
            let cfg = desk_config(variant, init_seed, train_seed);
            let pool = build_pool(&cfg).unwrap();
            let mut state = init_state(&cfg);
            train(&cfg, &pool, &mut state, None, |_| {}).unwrap();
            let policy = ModelPolicy::new(&state.model, ActMode::Deterministic);
            let results = run_suite(&worlds, &tasks, &policy, 5000 + k as u64);
            let report = MetricsReport::from_results(
                &worlds,
                &tasks,
                &results,
                vec![init_seed, train_seed],
                String::new(),
            )
            .unwrap();
            assert!(report.spl <= report.sr + 1e-12);
            reports.insert(variant, report);
        }
        let random_results =
            run_suite(&worlds, &tasks, &RandomPolicy::default(), 6000 + k as u64);
        let random_sr = success_rate(&random_results);
        let full = &reports[&Variant::Full];
        let nocp = &reports[&Variant::NoCp];
        let notc = &reports[&Variant::NoTc];
        if full.sr >= random_sr + 0.20 {
            sr_gain_hits += 1;
        }
        if full.mean_collisions <= nocp.mean_collisions {
            collision_hits += 1;
        }
        if full.sr >= notc.sr {
            notc_hits += 1;
        }
        details.push(format!(
            "seed {k}: full SR {:.3}/SPL {:.3}/col {:.1}, random SR {:.3}, nocp col {:.1}, notc SR {:.3}",
            full.sr, full.spl, full.mean_collisions, random_sr, nocp.mean_collisions, notc.sr
        ));
    }
    for d in &details {
        println!("  {d}");
    }
    check(
        7,
        "generalization over random",
        sr_gain_hits >= 2,
        &format!("{sr_gain_hits}/3 seeds with SR gain >= 20pp"),
    );
    check(
        8,
        "ablation directionality",
        collision_hits >= 2 && notc_hits >= 2,
        &format!("collisions full<=nocp {collision_hits}/3, SR full>=notc {notc_hits}/3"),
    );
}

// --- criterion 9: stop balance ---

#[test]
fn criterion_09_stop_balance() {
    let spec = WorldSpec {
        width: 10,
        height: 10,
        obstacle_density: 0.1,
        room_count: 1,
    };
    let worlds: Vec<_> = (70..74).map(|s| generate_world(s, &spec).unwrap()).collect();
    let tasks = sample_tasks(&worlds, 700, 99).unwrap();
    let at_goal = tasks
        .iter()
        .filter(|t| is_success(&t.start, &t.goal))
        .count();
    let fraction = at_goal as f64 / tasks.len() as f64;
    let target = 1.0 / 7.0;
    check(
        9,
        "stop balance",
        (fraction - target).abs() <= 0.03,
        &format!("at-goal fraction {fraction:.4} vs 1/7 = {target:.4}"),
    );
}

// --- criterion 10: metric arithmetic and expert calibration ---

#[test]
fn criterion_10_metric_arithmetic_and_expert_calibration() {
    // Arithmetic on hand-built results.
    let mk = |success: bool, l: usize, p: usize| navlab::eval::EpisodeResult {
        success,
        steps_taken: p + 1,
        executed_length: p,
        shortest_length: l,
        collisions: 0,
        stop_issued: true,
        timeout: false,
        poses: Vec::new(),
        collision_flags: Vec::new(),
    };
    let all = vec![mk(true, 5, 5), mk(true, 2, 2)];
    assert_eq!(success_rate(&all), 1.0);
    let none = vec![mk(false, 5, 5), mk(false, 2, 2)];
    assert_eq!(success_rate(&none), 0.0);
    let mixed = vec![mk(true, 1, 1), mk(false, 1, 1), mk(true, 1, 1), mk(false, 1, 1)];
    assert_eq!(success_rate(&mixed), 0.5);
    assert_eq!(spl(&[mk(true, 10, 10)]), 1.0);
    assert_eq!(spl(&[mk(true, 5, 10)]), 0.5);
    assert!(spl(&mixed) <= success_rate(&mixed));

    // Expert-as-policy calibration on a reachable suite.
    let spec = WorldSpec {
        width: 10,
        height: 10,
        obstacle_density: 0.1,
        room_count: 2,
    };
    let worlds: Vec<_> = (80..83).map(|s| generate_world(s, &spec).unwrap()).collect();
    let tasks = sample_tasks(&worlds, 60, 44).unwrap();
    let results = run_suite(&worlds, &tasks, &ExpertPolicy::default(), 0);
    let (sr, spl_v) = (success_rate(&results), spl(&results));
    check(
        10,
        "metric arithmetic + expert calibration",
        sr == 1.0 && spl_v == 1.0,
        &format!("expert SR {sr}, SPL {spl_v}"),
    );
}

// --- criterion 11: determinism of training and evaluation ---

#[test]
fn criterion_11_determinism() {
    let cfg = TrainConfig {
        total_updates: 6,
        eval_interval: 3,
        checkpoint_interval: 0,
        steps_per_update: 12,
        world_count: 2,
        world_width: 8,
        world_height: 8,
        obstacle_density: 0.08,
        room_count: 1,
        tasks_per_world: 8,
        model: ModelConfig::tiny(Variant::Full, 5),
        ..TrainConfig::default()
    };
    let pool = build_pool(&cfg).unwrap();
    let run = || {
        let mut state = init_state(&cfg);
        train(&cfg, &pool, &mut state, None, |_| {}).unwrap();
        state
    };
    let (a, b) = (run(), run());
    let logs_equal = a.log.deterministic_eq(&b.log);

    let worlds: Vec<_> = pool.worlds.clone();
    let tasks = sample_tasks(&worlds, 20, 123).unwrap();
    let policy = ModelPolicy::new(&a.model, ActMode::Stochastic);
    let r1 = run_suite(&worlds, &tasks, &policy, 77);
    let r2 = run_suite(&worlds, &tasks, &policy, 77);
    let m1 = MetricsReport::from_results(&worlds, &tasks, &r1, vec![77], "h".into()).unwrap();
    let m2 = MetricsReport::from_results(&worlds, &tasks, &r2, vec![77], "h".into()).unwrap();
    check(
        11,
        "determinism",
        logs_equal && m1 == m2,
        &format!("train logs equal: {logs_equal}, reports equal: {}", m1 == m2),
    );
}
