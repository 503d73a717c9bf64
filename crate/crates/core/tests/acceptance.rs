//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use modecons::algorithms::{
    candidate_positions, kstar, oracle_kth, oracle_mode, run_direct, run_apriori_k, run_adaptive_k, state_count,
    AlgorithmKind, AlgorithmRun, Execution, Problem,
};
use modecons::bounds::{algebraic_connectivity, select_gains, sorted_eigenvalues, time_bound_z, GainPreset};
use modecons::integrate::default_step;
use modecons::network::{AttributeTable, NetworkTimeline};
use modecons::protocol::{ProtocolKind, ProtocolSystem};
use modecons::scenario::{self, dwell_bound, load_config, ScenarioConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// High-precision values of the time bounds on the 40-agent ring (N̄ = 50,
// h = 1000, β = 1/50, |Ω| = 10).
const T_Y: f64 = 1.561_786_298_659_572;
const T_X: f64 = 1.557_825_773_200_336;
const T_Z: f64 = 345.387_763_949_106_85;
const HISTOGRAM: [i64; 10] = [5, 6, 7, 16, 1, 1, 1, 1, 1, 1];

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn problem(name: &str) -> Problem {
    scenario(name).build().expect("scenario builds").problem
}

fn err(e: modecons::Error) -> String {
    e.to_string()
}

fn lock<'a>(run: &'a AlgorithmRun, name: &str) -> Result<&'a modecons::algorithms::ProtocolLock, String> {
    run.locks.iter().find(|l| l.name == name).ok_or_else(|| format!("no lock named {name}"))
}

fn ring40_counter() -> Outcome {
    let p = problem("ring40_direct.toml");
    let run = run_direct(&p).map_err(err)?;
    let counter = lock(&run, "counter")?;
    ensure!(counter.locked_values == HISTOGRAM, "counter locked to {:?}", counter.locked_values);
    ensure!(run.mode == "4", "mode {}", run.mode);
    let t = counter.lock_time.ok_or("counter never locked")?;
    ensure!(t <= T_Y, "lock at {t} exceeds {T_Y}");
    ensure!(run.mismatches.is_empty(), "{:?}", run.mismatches);
    Ok(format!("histogram {:?}, mode 4, lock {t:.4} s <= {T_Y:.4} s", counter.locked_values))
}

fn ring40_size() -> Outcome {
    let p = problem("ring40_apriori.toml");
    let run = run_apriori_k(&p, None, Some(3), Execution::Sequential).map_err(err)?;
    let size = lock(&run, "size")?;
    ensure!(size.locked_values == [40], "size locked to {:?}", size.locked_values);
    let t = size.lock_time.ok_or("size never locked")?;
    ensure!(t <= T_X, "lock at {t} exceeds {T_X}");
    ensure!((size.bound - T_X).abs() < 1e-12, "bound {} differs from {T_X}", size.bound);
    Ok(format!("N = 40, lock {t:.4} s <= {T_X:.4} s"))
}

fn ring40_candidates() -> Outcome {
    let p = problem("ring40_apriori.toml");
    let run = run_apriori_k(&p, None, Some(3), Execution::Sequential).map_err(err)?;
    let pos: Vec<usize> = run.candidates.iter().map(|c| c.position).collect();
    let ls: Vec<usize> = run.candidates.iter().map(|c| c.l).collect();
    let fs: Vec<usize> = run.candidates.iter().map(|c| c.frequency).collect();
    ensure!(pos == [14, 28], "positions {pos:?}");
    ensure!(ls == [3, 4], "l-values {ls:?}");
    ensure!(fs == [7, 16], "frequencies {fs:?}");
    ensure!(run.mode == "4", "mode {}", run.mode);
    ensure!((time_bound_z(p.gains.beta, 50, 10) - T_Z).abs() < 1e-9, "T_z mismatch");
    for l in run.locks.iter().filter(|l| l.name.contains("kth")) {
        let t = l.lock_time.ok_or_else(|| format!("{} never locked", l.name))?;
        ensure!(t <= T_Z, "{} locked at {t}", l.name);
    }

    let sys = ProtocolSystem::build(
        ProtocolKind::Kth { k: 14, n: 40 },
        p.timeline.initial(),
        &p.table,
        p.gains,
        p.n_bar(),
        false,
    )
    .map_err(err)?;
    let budget = sys.chatter_budget().ok_or("no chatter budget")?;
    ensure!((budget - 4.95e-6).abs() < 0.01e-6, "chatter budget {budget:e}");
    let dt = default_step(&sys).ok_or("no default step")?;
    ensure!(dt <= budget, "default step {dt:e} above budget {budget:e}");

    // Desk-gain variant on a small ring, timed end to end.
    let labels: Vec<String> = [4, 3, 2, 1]
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n((i + 1).to_string(), c))
        .collect();
    let started = Instant::now();
    let desk = Problem::new(
        NetworkTimeline::ring(10, &labels).map_err(err)?,
        AttributeTable::numeric(4).map_err(err)?,
        select_gains(10, 4, GainPreset::Desk),
    );
    let small = run_apriori_k(&desk, Some(4), None, Execution::Sequential).map_err(err)?;
    let wall = started.elapsed().as_secs_f64();
    let tz = time_bound_z(desk.gains.beta, 10, 4);
    ensure!(small.mode == "1", "desk mode {}", small.mode);
    ensure!(small.locks.iter().all(|l| l.within_bound), "desk lock outside its bound");
    for l in small.locks.iter().filter(|l| l.name.contains("kth")) {
        ensure!(l.lock_time.is_some_and(|t| t <= tz), "{} lock {:?} > {tz}", l.name, l.lock_time);
    }
    ensure!(wall < 30.0, "desk variant took {wall:.1} s");
    Ok(format!(
        "positions [14, 28] -> l [3, 4], f [7, 16], mode 4; budget {budget:.3e}, dt {dt:.3e}; desk variant {wall:.2} s"
    ))
}

fn ring40_adaptive() -> Outcome {
    let p = problem("ring40_adaptive.toml");
    let run = run_adaptive_k(&p).map_err(err)?;
    ensure!(run.k_trace == [1, 2, 3], "k trace {:?}", run.k_trace);
    let round = |k: usize| run.rounds.iter().find(|r| r.k == k).ok_or(format!("no round K={k}"));
    let r2 = round(2)?;
    let got: Vec<(usize, &str, usize)> =
        r2.candidates.iter().map(|c| (c.position, c.attribute.as_str(), c.frequency)).collect();
    ensure!(got == [(20, "4", 16), (40, "10", 1)], "K=2 candidates {got:?}");
    let r3 = round(3)?;
    ensure!(r3.best_frequency == 16 && r3.threshold == 14, "K=3 best {} threshold {}", r3.best_frequency, r3.threshold);
    ensure!(run.mode == "4", "mode {}", run.mode);
    Ok(format!("k trace {:?}, best 16 >= 14, mode 4", run.k_trace))
}

fn equilibrium_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_dev: f64 = 0.0;
    for trial in 0..100 {
        let n = rng.random_range(3..=12);
        let omega = 3;
        let labels: Vec<String> = (0..n).map(|_| rng.random_range(1..=omega).to_string()).collect();
        let p = rng.random_range(0.0..0.6);
        let tl = NetworkTimeline::random_connected(n, p, rng.random(), &labels).map_err(err)?;
        let seg = tl.initial();
        let nf = n as f64;
        let gamma = nf.powi(3);

        let lap = seg.laplacian();
        let lam2 = algebraic_connectivity(&lap);
        ensure!(lam2 >= 4.0 / (nf * nf) - 1e-12, "trial {trial}: lambda2 {lam2} < 4/N^2");
        let mut a = &lap * gamma;
        a[(seg.leader_row(), seg.leader_row())] += 1.0;
        let lam_min = sorted_eigenvalues(&a)[0];
        ensure!(lam_min >= 1.0 / (4.0 * nf) - 1e-12, "trial {trial}: lambda_min {lam_min}");

        let mut gains = select_gains(n, omega, GainPreset::Desk);
        gains.gamma_y = gamma;
        let table = AttributeTable::numeric(omega).map_err(err)?;
        let sys = ProtocolSystem::build(ProtocolKind::Counter, seg, &table, gains, n, false).map_err(err)?;
        let y = sys.equilibrium().map_err(err)?;
        let lead = sys.leader_row;
        for c in 0..omega {
            let total: f64 = sys.b.column(c).sum();
            ensure!((y[(lead, c)] - total).abs() < 1e-9, "trial {trial}: y1* = {} vs {total}", y[(lead, c)]);
            for r in 0..n {
                let d = (y[(r, c)] - y[(lead, c)]).abs();
                worst_dev = worst_dev.max(d);
                ensure!(d < 2f64.sqrt() / 4.0, "trial {trial}: deviation {d}");
            }
        }
    }
    Ok(format!("100 graphs, worst deviation {worst_dev:.4} < {:.4}", 2f64.sqrt() / 4.0))
}

fn pigeonhole_positions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..500 {
        let n: usize = rng.random_range(1..=40);
        let omega = rng.random_range(1..=10);
        let mut ls: Vec<usize> = (0..n).map(|_| rng.random_range(1..=omega)).collect();
        ls.sort_unstable();
        for k in 1..=n {
            let step = n.div_ceil(k);
            let truncated = candidate_positions(n, k);
            let full: Vec<usize> = (1..=k).map(|j| (j * step).min(n)).collect();
            ensure!(truncated.iter().all(|&p| p <= n), "trial {trial}: position beyond N");
            for a in 1..=omega {
                if ls.iter().filter(|&&l| l == a).count() < step {
                    continue;
                }
                for positions in [&truncated, &full] {
                    let hit = positions.iter().any(|&p| oracle_kth(&ls, p).unwrap() == a);
                    ensure!(hit, "trial {trial}: n={n} k={k} a={a} missed by {positions:?}");
                }
            }
        }
    }
    Ok("500 multisets, every K".into())
}

fn random_desk_modes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let started = Instant::now();
    for trial in 0..50 {
        let n = rng.random_range(1..=10);
        let omega = rng.random_range(1..=5);
        let labels: Vec<String> = (0..n).map(|_| rng.random_range(1..=omega).to_string()).collect();
        let tl = NetworkTimeline::random_connected(n, 0.3, rng.random(), &labels).map_err(err)?;
        let mut p = Problem::new(tl, AttributeTable::numeric(omega).map_err(err)?, select_gains(n, omega, GainPreset::Desk));
        p.settings.seed = trial;
        let ls: Vec<usize> = labels.iter().map(|l| l.parse().unwrap()).collect();
        let (_, f_max) = oracle_mode(&ls).map_err(err)?;
        let check = |name: &str, run: modecons::Result<AlgorithmRun>| -> Result<(), String> {
            let run = run.map_err(|e| format!("trial {trial} {name}: {e}"))?;
            let f = ls.iter().filter(|&&l| l.to_string() == run.mode).count();
            ensure!(f == f_max, "trial {trial} {name}: mode {} has frequency {f}, max {f_max} in {labels:?}", run.mode);
            Ok(())
        };
        check("direct", run_direct(&p))?;
        check("apriori", run_apriori_k(&p, Some(f_max), None, Execution::Sequential))?;
        check("adaptive", run_adaptive_k(&p))?;
    }
    Ok(format!("50 scenarios x 3 algorithms in {:.1} s", started.elapsed().as_secs_f64()))
}

fn plug_and_play() -> Outcome {
    let cfg = scenario("ring10_plug_and_play.toml");
    let built = cfg.build().map_err(err)?;
    let dwell = dwell_bound(&built.problem, &cfg.algorithm);
    let times: Vec<f64> = built.problem.timeline.events.iter().map(|e| e.time).collect();
    ensure!(times.len() == 3, "{} events", times.len());
    ensure!(times.windows(2).all(|w| w[1] - w[0] >= dwell), "events {times:?} closer than {dwell}");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let summary = scenario::run(&cfg, dir.path()).map_err(err)?;
    for v in &summary.verdicts {
        ensure!(v.pass, "{} failed: {}", v.check, v.detail);
    }
    for check in ["post-change-mode", "event-states-in-box", "dwell-time"] {
        ensure!(summary.verdicts.iter().any(|v| v.check == check), "missing verdict {check}");
    }
    ensure!(summary.segments.len() == 4, "{} segments", summary.segments.len());
    Ok(format!("4 segments, {} box checks, dwell {dwell:.3} s", summary.event_boxes.len()))
}

fn budget_counts() -> Outcome {
    let a2 = |k| state_count(AlgorithmKind::AprioriK, k, false, 10);
    ensure!(a2(2) == 5, "K=2 gives {}", a2(2));
    ensure!(a2(5) == 11, "K=5 gives {}", a2(5));
    let a3: Vec<usize> = (1..=5).map(|k| state_count(AlgorithmKind::AdaptiveK, k, false, 10)).collect();
    ensure!(a3 == [3, 7, 13, 21, 31], "adaptive counts {a3:?}");
    ensure!(kstar(16, 40) == 3, "kstar(16, 40) = {}", kstar(16, 40));
    Ok(format!("5, 11; adaptive {a3:?}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("direct counter on ring 40", ring40_counter),
        ("size estimate on ring 40", ring40_size),
        ("candidates at K = 3", ring40_candidates),
        ("adaptive K on ring 40", ring40_adaptive),
        ("equilibrium and spectral bounds", equilibrium_bounds),
        ("pigeonhole positions", pigeonhole_positions),
        ("random desk scenarios", random_desk_modes),
        ("plug-and-play events", plug_and_play),
        ("state budgets", budget_counts),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {} [{name}]: PASS {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} [{name}]: FAIL {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
