//! Acceptance suite: one line per criterion, non-zero exit if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmpc_core::canal_model::CoalitionModel;
use cmpc_core::cli_io::{read_trace, write_trace};
use cmpc_core::coalition_ctrl::{kf_init, kf_update, measurement, ControllerConfig, HistoryBuffer, KalmanNoise};
use cmpc_core::numerics::{solve_qp, Matrix, QpProblem, QpStatus, Vector};
use cmpc_core::simulator::{accumulate_costs, Plant, PlantConfig, Scenario, SimConfig, SimRun, SimTrace};
use cmpc_core::supervisor::{synthesize, synthesize_coalition, PublishedSetpoints, SelectionContext};
use cmpc_core::topology::{partition_of, Partition, Topology};
use cmpc_core::{run_centralized, run_closed_loop, select_topology, CanalModel, SynthesisCache};

use common::{brute_force_qp, lqr_from, sample_of, sda_dare, union_find_blocks};

const DISTURBANCE: usize = 72;
const TAIL: usize = 50;

struct Timed {
    run: SimRun,
    elapsed: Duration,
}

struct Fixture {
    canal: CanalModel,
    cfg: ControllerConfig,
    coal1: OnceLock<Timed>,
    cent1: OnceLock<Timed>,
    coal2: OnceLock<Timed>,
    cent2: OnceLock<Timed>,
    coal1_mismatch: OnceLock<Timed>,
    cent1_mismatch: OnceLock<Timed>,
}

fn sim(plant: PlantConfig) -> SimConfig {
    SimConfig::coalitional(13, ControllerConfig::default(), plant, 4, 0)
}

fn timed(f: impl FnOnce() -> SimRun) -> Timed {
    let start = Instant::now();
    let run = f();
    Timed {
        run,
        elapsed: start.elapsed(),
    }
}

impl Fixture {
    fn new() -> Self {
        let cfg = ControllerConfig::default();
        Self {
            canal: CanalModel::dez(cfg.sample_time),
            cfg,
            coal1: OnceLock::new(),
            cent1: OnceLock::new(),
            coal2: OnceLock::new(),
            cent2: OnceLock::new(),
            coal1_mismatch: OnceLock::new(),
            cent1_mismatch: OnceLock::new(),
        }
    }

    fn run<'a>(
        &'a self,
        cell: &'a OnceLock<Timed>,
        scenario: Scenario,
        plant: PlantConfig,
        central: bool,
    ) -> &'a Timed {
        cell.get_or_init(|| {
            timed(|| {
                let s = sim(plant);
                if central {
                    run_centralized(&self.canal, &scenario, &s).expect("centralized run")
                } else {
                    run_closed_loop(&self.canal, &scenario, &s).expect("coalitional run")
                }
            })
        })
    }

    fn coal1(&self) -> &Timed {
        self.run(&self.coal1, Scenario::dez_scenario1(), PlantConfig::default(), false)
    }
    fn cent1(&self) -> &Timed {
        self.run(&self.cent1, Scenario::dez_scenario1(), PlantConfig::default(), true)
    }
    fn coal2(&self) -> &Timed {
        self.run(&self.coal2, Scenario::dez_scenario2(), PlantConfig::default(), false)
    }
    fn cent2(&self) -> &Timed {
        self.run(&self.cent2, Scenario::dez_scenario2(), PlantConfig::default(), true)
    }
    fn mismatch() -> PlantConfig {
        PlantConfig {
            mismatch: Some(0.2),
            ..PlantConfig::default()
        }
    }
    fn coal1_mismatch(&self) -> &Timed {
        self.run(&self.coal1_mismatch, Scenario::dez_scenario1(), Self::mismatch(), false)
    }
    fn cent1_mismatch(&self) -> &Timed {
        self.run(&self.cent1_mismatch, Scenario::dez_scenario1(), Self::mismatch(), true)
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn fmt(values: &[f64], digits: usize) -> String {
    let cells: Vec<String> = values.iter().map(|v| format!("{v:.digits$}")).collect();
    format!("[{}]", cells.join(" "))
}

fn tail_errors(trace: &SimTrace) -> Vec<f64> {
    let start = trace.steps.len().saturating_sub(TAIL);
    (0..trace.reaches)
        .map(|i| {
            trace.steps[start..]
                .iter()
                .map(|s| s.levels[i].abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

fn max_input(trace: &SimTrace) -> f64 {
    trace
        .steps
        .iter()
        .flat_map(|s| &s.inputs)
        .fold(0.0f64, |a, u| a.max(u.abs()))
}

fn decision_variables(fx: &Fixture) -> Outcome {
    let cent = &fx.cent1().run.trace;
    let per_step_39 = cent
        .steps
        .iter()
        .all(|s| s.input_decision_vars() == 39 && s.coalitions.len() == 1);
    let coal = accumulate_costs(&fx.coal1().run.trace, 0.0);
    let cent_avg = accumulate_costs(cent, 0.0).decision_vars_per_coalition;
    outcome(
        per_step_39 && coal.decision_vars_per_coalition < 39.0,
        format!(
            "centralized {cent_avg:.1} input variables every step, coalitional {:.2} per coalition",
            coal.decision_vars_per_coalition
        ),
    )
}

fn hard_input_constraint(fx: &Fixture) -> Outcome {
    let runs = [
        ("coal s1", fx.coal1()),
        ("coal s2", fx.coal2()),
        ("cent s1", fx.cent1()),
        ("cent s2", fx.cent2()),
    ];
    let bound = fx.cfg.max_increment + 1e-9;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, t) in runs {
        let m = max_input(&t.run.trace);
        ok &= m <= bound && t.run.trace.steps.len() == 288 && t.elapsed < Duration::from_secs(60);
        parts.push(format!("{name} max|dq| {m:.6} in {:.1}s", t.elapsed.as_secs_f64()));
    }
    outcome(ok, parts.join(", "))
}

fn offset_free(fx: &Fixture) -> Outcome {
    let nominal = tail_errors(&fx.coal1().run.trace);
    let perturbed = tail_errors(&fx.coal1_mismatch().run.trace);
    let worst_n = nominal.iter().copied().fold(0.0, f64::max);
    let worst_p = perturbed.iter().copied().fold(0.0, f64::max);
    let cent_n = tail_errors(&fx.cent1().run.trace).into_iter().fold(0.0, f64::max);
    let cent_p = tail_errors(&fx.cent1_mismatch().run.trace)
        .into_iter()
        .fold(0.0, f64::max);
    outcome(
        worst_n < 0.02 && worst_p < 0.05,
        format!(
            "final-{TAIL} max|e| nominal {worst_n:.4} m (<0.02), mismatch {worst_p:.4} m (<0.05); \
             centralized for reference {cent_n:.4} / {cent_p:.4}; per reach {}",
            fmt(&nominal, 3)
        ),
    )
}

fn link_pattern(fx: &Fixture) -> Outcome {
    let links: Vec<f64> = fx
        .coal1()
        .run
        .trace
        .steps
        .iter()
        .map(|s| s.topology.enabled_count() as f64)
        .collect();
    let before: f64 = links[DISTURBANCE - 10..DISTURBANCE].iter().sum();
    let after: f64 = links[DISTURBANCE + 1..DISTURBANCE + 11].iter().sum();
    let tail_start = links.len() - TAIL;
    let peak = links[DISTURBANCE..tail_start].iter().copied().fold(0.0, f64::max);
    let window = &links[tail_start..];
    let tail_max = window.iter().copied().fold(0.0, f64::max);
    let mean_t = (TAIL as f64 - 1.0) / 2.0;
    let mean_l = window.iter().sum::<f64>() / TAIL as f64;
    let slope = window
        .iter()
        .enumerate()
        .map(|(t, l)| (t as f64 - mean_t) * (l - mean_l))
        .sum::<f64>()
        / window
            .iter()
            .enumerate()
            .map(|(t, _)| (t as f64 - mean_t).powi(2))
            .sum::<f64>();
    outcome(
        after > before && tail_max <= peak && slope <= 0.0,
        format!(
            "links in 10 steps before/after k=72: {before}/{after}; post-disturbance peak {peak}, \
             final-{TAIL} max {tail_max}, trend {slope:+.4} links/step"
        ),
    )
}

fn cost_ordering(fx: &Fixture) -> Outcome {
    let c = fx.cfg.link_cost;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, coal, cent) in [("s1", fx.coal1(), fx.cent1()), ("s2", fx.coal2(), fx.cent2())] {
        let rc = accumulate_costs(&coal.run.trace, c);
        let rz = accumulate_costs(&cent.run.trace, c);
        let perf_ok = rz.performance <= rc.performance;
        let comb_ok = rc.combined < rz.combined;
        ok &= perf_ok && comb_ok;
        parts.push(format!(
            "{name}: perf cent {:.1} <= coal {:.1} {}; combined coal {:.1} < cent {:.1} {}; break-even link price {:.1}",
            rz.performance,
            rc.performance,
            if perf_ok { "yes" } else { "no" },
            rc.combined,
            rz.combined,
            if comb_ok { "yes" } else { "no" },
            (rc.performance - rz.performance) / (rz.average_links - rc.average_links)
        ));
    }
    outcome(ok, parts.join("; "))
}

fn peak_direction(fx: &Fixture) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, coal, cent) in [("s1", fx.coal1(), fx.cent1()), ("s2", fx.coal2(), fx.cent2())] {
        let pc = accumulate_costs(&coal.run.trace, 0.0).peak_level_errors;
        let pz = accumulate_costs(&cent.run.trace, 0.0).peak_level_errors;
        let worse: Vec<usize> = (0..12).filter(|&i| pz[i] > pc[i]).map(|i| i + 1).collect();
        ok &= worse.is_empty();
        parts.push(format!(
            "{name}: coal {} cent {} exceptions {:?}",
            fmt(&pc, 2),
            fmt(&pz, 2),
            worse
        ));
    }
    outcome(ok, parts.join("; "))
}

fn certificates(fx: &Fixture) -> Outcome {
    let canal = &fx.canal;
    let (q, r) = (fx.cfg.level_weight, fx.cfg.input_weight);
    let n = canal.len();
    let mut partitions = vec![Partition::singletons(n), partition_of(&Topology::full(n), n)];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let links = (0..n - 1).map(|_| rng.random_bool(0.5)).collect();
        partitions.push(partition_of(&Topology::from_links(links), n));
    }
    let mut worst_res: f64 = 0.0;
    let mut worst_cert = f64::NEG_INFINITY;
    for p in &partitions {
        let set = synthesize(canal, p, q, r).expect("synthesis");
        for b in &set.blocks {
            worst_res = worst_res.max(b.riccati_residual);
            worst_cert = worst_cert.max(b.certificate);
        }
    }
    let g = canal.global();
    let qm = g.level_weight(q);
    let rm = Matrix::identity(g.m(), g.m()) * r;
    let p_ref = sda_dare(&g.xi, &g.upsilon, &qm, &rm);
    let k_ref = lqr_from(&g.xi, &g.upsilon, &rm, &p_ref);
    let full = synthesize_coalition(canal, &g.members, q, r).expect("full");
    let k_err = (&full.k - &k_ref).amax() / k_ref.amax().max(1.0);
    outcome(
        worst_res <= 1e-8 && worst_cert <= 1e-8 && k_err <= 1e-8,
        format!(
            "{} partitions: DARE residual {worst_res:.2e}, Lyapunov {worst_cert:.2e}; full gain vs doubling-LQR {k_err:.2e}",
            partitions.len()
        ),
    )
}

fn qp_oracle(_: &Fixture) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_obj: f64 = 0.0;
    let mut worst_x: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(0..=6);
        let mut g = || rng.random_range(-1.0..1.0);
        let base = Matrix::from_fn(n, n, |_, _| g());
        let h = base.transpose() * &base + Matrix::identity(n, n) * 0.1;
        let f = Vector::from_fn(n, |_, _| 3.0 * g());
        let a = Matrix::from_fn(m, n, |_, _| g());
        let x0 = Vector::from_fn(n, |_, _| g());
        let b = Vector::from_fn(m, |i, _| (a.row(i) * &x0)[0] + 0.5 * (g() + 1.0));
        let oracle = brute_force_qp(&h, &f, &a, &b).expect("feasible by construction");
        let sol = solve_qp(&QpProblem::new(h, f).with_inequalities(a, b)).expect("qp");
        if sol.status != QpStatus::Optimal {
            failures += 1;
        }
        worst_obj = worst_obj.max((sol.objective - oracle.objective).abs());
        worst_x = worst_x.max((&sol.x - &oracle.x).amax());
    }
    outcome(
        failures == 0 && worst_obj <= 1e-6 && worst_x <= 1e-5,
        format!(
            "100 problems: max objective gap {worst_obj:.2e}, max solution gap {worst_x:.2e}, non-optimal {failures}"
        ),
    )
}

fn partition_oracle(_: &Fixture) -> Outcome {
    let n = 13;
    let mut mismatches = 0;
    for mask in 0u32..4096 {
        let links: Vec<bool> = (0..12).map(|b| mask >> b & 1 == 1).collect();
        let ours = partition_of(&Topology::from_links(links.clone()), n);
        if ours.blocks() != union_find_blocks(&links, n).as_slice() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("4096 topologies, {mismatches} mismatches"))
}

fn link_monotonicity(fx: &Fixture) -> Outcome {
    let canal = &fx.canal;
    let n = canal.len();
    let scenario = Scenario::dez_scenario1();
    let before = scenario.offtakes_at(0, n);
    let after = scenario.offtakes_at(DISTURBANCE, n);
    let mut xi = canal.steady_state(&before);
    let levels = canal.global().level_rows();
    for (reach, e) in [(3, 0.3), (8, 0.2), (9, 0.15), (12, -0.25)] {
        xi[levels[reach]] = e;
    }
    let published = PublishedSetpoints::at_rest(canal, &canal.steady_flows(&before));
    let cache = SynthesisCache::new(fx.cfg.level_weight, fx.cfg.input_weight, true);
    let grid = [0.0, 0.15, 0.3, 0.6, 1.2, 2.4, 25.0, 250.0, 2500.0];
    let mut ok = true;
    let mut parts = Vec::new();
    for bits in ["000000000000", "001100110011", "011111111110", "111111111111"] {
        let incumbent = Topology::from_bits(bits).unwrap();
        let counts: Vec<usize> = grid
            .iter()
            .map(|&c| {
                let ctx = SelectionContext {
                    canal,
                    xi_hat: &xi,
                    published: &published,
                    offtakes: &after,
                    link_cost: c,
                    interval: 4,
                };
                select_topology(&ctx, &incumbent, &cache)
                    .expect("selection")
                    .topology
                    .enabled_count()
            })
            .collect();
        ok &= counts.windows(2).all(|w| w[1] <= w[0]);
        parts.push(format!("{bits}: {counts:?}"));
    }
    outcome(ok, format!("c = {grid:?}; {}", parts.join(", ")))
}

/// Open-loop filter run on reach 5, then a switch to {5, 6}.
fn kalman(fx: &Fixture) -> Outcome {
    let canal = &fx.canal;
    let n = canal.len();
    let noise = KalmanNoise::default();
    let offtakes = Scenario::dez_scenario1().offtakes_at(0, n);
    let mut plant = Plant::new(canal, &PlantConfig::default(), 0, &offtakes).unwrap();
    let mut history = HistoryBuffer::new(fx.cfg.history_len);
    let single = CoalitionModel::build(canal, &[4]);
    let pair = CoalitionModel::build(canal, &[4, 5]);
    let excite = |k: usize, members: &[usize]| -> Vec<f64> {
        let mut u = vec![0.0; n];
        for (j, &m) in members.iter().enumerate() {
            u[m] = 0.05 * ((0.3 + 0.2 * j as f64) * k as f64).sin();
        }
        u
    };
    let pick =
        |model: &CoalitionModel, v: &[f64]| Vector::from_iterator(model.m(), model.members.iter().map(|&m| v[m]));

    let mut first = sample_of(&plant, canal, &offtakes, &vec![0.0; n]);
    history.push(first.clone());
    let mut kf = kf_init(&single, &history, &noise).unwrap();
    let mut err_single = f64::INFINITY;
    let mut settled_single = None;
    for k in 0..60 {
        let u = excite(k, &single.members);
        first.inputs = u.clone();
        *history.latest_mut().unwrap() = first.clone();
        plant.step(&u, &offtakes);
        let next = sample_of(&plant, canal, &offtakes, &vec![0.0; n]);
        history.push(next.clone());
        kf = kf_update(
            &kf,
            &single,
            &noise,
            &pick(&single, &u),
            &pick(&single, &offtakes),
            &measurement(&single, &next),
        )
        .unwrap();
        let truth = plant.gate_flows()[5];
        let err = (kf.omega()[0] - truth).abs();
        if k < 50 {
            err_single = err;
        }
        if err <= 1e-3 && settled_single.is_none() {
            settled_single = Some(k + 1);
        } else if err > 1e-3 {
            settled_single = None;
        }
        first = next;
    }

    let mut kf = kf_init(&pair, &history, &noise).unwrap();
    let mut err_pair = f64::INFINITY;
    for k in 60..80 {
        let u = excite(k, &pair.members);
        first.inputs = u.clone();
        *history.latest_mut().unwrap() = first.clone();
        plant.step(&u, &offtakes);
        let next = sample_of(&plant, canal, &offtakes, &vec![0.0; n]);
        history.push(next.clone());
        kf = kf_update(
            &kf,
            &pair,
            &noise,
            &pick(&pair, &u),
            &pick(&pair, &offtakes),
            &measurement(&pair, &next),
        )
        .unwrap();
        err_pair = (kf.omega()[0] - plant.gate_flows()[6]).abs();
        first = next;
    }
    outcome(
        err_single <= 1e-3 && err_pair <= 1e-3,
        format!(
            "|w_hat - w| after 50 updates {err_single:.2e} (within 1e-3 from step {}), 20 updates after warm-started switch {err_pair:.2e}",
            settled_single.map_or("-".into(), |k| k.to_string())
        ),
    )
}

fn determinism(fx: &Fixture) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let first = &fx.coal1().run.trace;
    let second = run_closed_loop(&fx.canal, &Scenario::dez_scenario1(), &sim(PlantConfig::default())).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_trace(&a, first, "acceptance").unwrap();
    write_trace(&b, &second.trace, "acceptance").unwrap();
    let identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let back = read_trace(&a).unwrap();
    let lossless = back.trace == *first;
    outcome(
        identical && lossless,
        format!("trace files identical: {identical}, round trip lossless: {lossless}"),
    )
}

type Criterion = (usize, &'static str, fn(&Fixture) -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        (1, "centralized decision-variable count", decision_variables),
        (2, "hard input constraint", hard_input_constraint),
        (3, "offset-free regulation", offset_free),
        (4, "link activation pattern", link_pattern),
        (5, "cost ordering", cost_ordering),
        (6, "peak-reduction direction", peak_direction),
        (7, "synthesis certificates", certificates),
        (8, "QP oracle equivalence", qp_oracle),
        (9, "partition oracle", partition_oracle),
        (10, "link-count monotonicity in c_l", link_monotonicity),
        (11, "Kalman convergence", kalman),
        (12, "determinism and round trip", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let fx = Fixture::new();
    let mut failed = 0;
    let mut ran = 0;
    for (id, title, check) in criteria {
        let label = format!("criterion {id:>2}: {title}");
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = check(&fx);
        failed += usize::from(!o.passed);
        println!(
            "{} {label} ({:.1}s) {}",
            if o.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
