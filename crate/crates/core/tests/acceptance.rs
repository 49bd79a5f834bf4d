//! Acceptance suite. One test walks every criterion in order, prints a
//! PASS/FAIL line for each, and fails at the end if any criterion failed.
//! Oracles here are written independently of the library code they check.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use affinity_tailor::allocator::{
    allocate_split_llc, AllocationStrategy, ContainerDemand, MonolithicAllocator,
};
use affinity_tailor::costmodel::WarmthParams;
use affinity_tailor::metrics::{
    aggregate_comparisons, compare_reports, AuditReport, MetricsReport, TraceAudit,
};
use affinity_tailor::predictor::DemandHistory;
use affinity_tailor::scenario::{Scenario, BUILTIN_SCENARIOS};
use affinity_tailor::scheduler::trace::NullSink;
use affinity_tailor::topology::MachineTopology;
use affinity_tailor::units::CpuUnits;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- criterion 1

/// Exhaustive search over every chiplet subset: fewest chiplets, then most
/// remaining capacity, then the lexicographically smallest id list.
fn oracle_best_set(demand: i64, remaining: &[i64]) -> Option<Vec<usize>> {
    let n = remaining.len();
    let mut best: Option<(u32, i64, Vec<usize>)> = None;
    for bits in 1u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
        let sum: i64 = set.iter().map(|&i| remaining[i]).sum();
        if sum < demand {
            continue;
        }
        let cand = (bits.count_ones(), sum, set);
        let better = match &best {
            None => true,
            Some((k, s, ids)) => {
                (cand.0, std::cmp::Reverse(cand.1), &cand.2) < (*k, std::cmp::Reverse(*s), ids)
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best.map(|(_, _, set)| set)
}

fn oracle_split_llc(demands: &[i64], capacity: &[i64]) -> Vec<(usize, Option<Vec<usize>>)> {
    let largest = *capacity.iter().max().unwrap();
    let mut single: Vec<usize> = (0..demands.len()).filter(|&i| demands[i] <= largest).collect();
    let mut multi: Vec<usize> = (0..demands.len()).filter(|&i| demands[i] > largest).collect();
    single.sort_by_key(|&i| demands[i]);
    multi.sort_by_key(|&i| std::cmp::Reverse(demands[i]));
    let mut remaining = capacity.to_vec();
    let mut out = Vec::new();
    for i in single.into_iter().chain(multi) {
        let set = oracle_best_set(demands[i], &remaining);
        if let Some(set) = &set {
            let mut need = demands[i];
            for &c in set {
                let take = remaining[c].min(need);
                remaining[c] -= take;
                need -= take;
            }
        }
        out.push((i, set));
    }
    out
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11C);
    let instances = 1500;
    let mut placements = 0;
    let mut infeasible = 0;
    for inst in 0..instances {
        let chiplets = rng.random_range(2..=8);
        let caps: Vec<usize> = (0..chiplets).map(|_| rng.random_range(4..=16)).collect();
        let topo = MachineTopology::from_layout(std::slice::from_ref(&caps)).map_err(|e| e.to_string())?;
        let total: usize = caps.iter().sum();
        let containers = rng.random_range(1..=12);
        // Coarse demands produce ties in the remaining-capacity sums; fine
        // ones exercise arbitrary fixed-point values.
        let coarse = inst % 2 == 0;
        let demands: Vec<i64> = (0..containers)
            .map(|_| {
                let cpus = rng.random_range(0.0..(total as f64 * 0.45));
                let cpus = if coarse { (cpus * 4.0).round() / 4.0 } else { cpus };
                CpuUnits::from_f64(cpus).raw()
            })
            .collect();
        let input: Vec<ContainerDemand> = demands
            .iter()
            .enumerate()
            .map(|(i, &d)| ContainerDemand::new(format!("c{i}"), CpuUnits::from_raw(d)))
            .collect();
        let plan = allocate_split_llc(&input, &topo).map_err(|e| e.to_string())?;
        let capacity: Vec<i64> = caps.iter().map(|&c| CpuUnits::from_cores(c).raw()).collect();
        let expected = oracle_split_llc(&demands, &capacity);
        check(plan.assignments.len() == expected.len(), || {
            format!("instance {inst}: {} assignments", plan.assignments.len())
        })?;
        for ((i, want), got) in expected.iter().zip(&plan.assignments) {
            check(got.container_id == format!("c{i}"), || {
                format!("instance {inst}: processed {} where c{i} was expected", got.container_id)
            })?;
            match want {
                Some(set) => {
                    placements += 1;
                    check(got.feasible && got.chiplets.as_ref() == Some(set), || {
                        format!("instance {inst}, c{i}: got {:?}, oracle {set:?}", got.chiplets)
                    })?;
                }
                None => {
                    infeasible += 1;
                    check(!got.feasible, || format!("instance {inst}, c{i}: oracle finds no fit"))?;
                }
            }
        }
    }
    Ok(format!(
        "{instances} instances, {placements} placements and {infeasible} infeasible containers match"
    ))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9E7);
    let windows = 10_000;
    for w in 0..windows {
        let size = rng.random_range(1..=300usize);
        let p = [50u32, 90, 95, 99][rng.random_range(0..4)];
        let mut h = DemandHistory::new(size, p as f64).map_err(|e| e.to_string())?;
        let fed = rng.random_range(1..=size + size / 2);
        let mut all = Vec::with_capacity(fed);
        for _ in 0..fed {
            // a few repeated values keep ties in play
            let v: f64 = if rng.random_bool(0.2) {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(0.0..16.0)
            };
            h.record_sample(v).map_err(|e| e.to_string())?;
            all.push(v);
        }
        let mut window: Vec<f64> = all[all.len().saturating_sub(size)..].to_vec();
        window.sort_by(f64::total_cmp);
        let n = window.len();
        let rank = ((p as usize * n).div_ceil(100)).max(1);
        let want = window[rank - 1];
        let got = h.demand().map_err(|e| e.to_string())?;
        check(got == want, || {
            format!("window {w}: size {size}, p{p}, {fed} samples: got {got}, oracle {want}")
        })?;
    }
    Ok(format!("{windows} windows match the sort-based percentile"))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3010);
    let instances = 1500;
    let mut clamped = 0;
    for inst in 0..instances {
        let cores = rng.random_range(4..=64usize);
        let topo = MachineTopology::from_layout(&[vec![cores]]).map_err(|e| e.to_string())?;
        let reserved: Vec<usize> = (0..cores).filter(|_| rng.random_bool(0.15)).collect();
        if reserved.len() == cores {
            continue;
        }
        let public: Vec<usize> = (0..cores).filter(|c| !reserved.contains(c)).collect();
        let containers = rng.random_range(1..=12);
        let mut demands: Vec<i64> = (0..containers)
            .map(|_| {
                if rng.random_bool(0.1) {
                    0
                } else {
                    CpuUnits::from_f64(rng.random_range(0.0..8.0)).raw()
                }
            })
            .collect();
        if demands.iter().all(|&d| d == 0) {
            demands[0] = CpuUnits::from_cores(1).raw();
        }
        let input: Vec<ContainerDemand> = demands
            .iter()
            .enumerate()
            .map(|(i, &d)| ContainerDemand::new(format!("c{i}"), CpuUnits::from_raw(d)))
            .collect();
        let plan = MonolithicAllocator
            .allocate(&input, &topo, &reserved)
            .map_err(|e| e.to_string())?;

        let p = public.len() as i128;
        let total: i128 = demands.iter().map(|&d| d as i128).sum();
        let scale = plan.scale_factor.ok_or("missing scale factor")?;
        let want_scale = public.len() as f64 / CpuUnits::from_raw(total as i64).as_f64();
        check((scale - want_scale).abs() <= 1e-12 * want_scale, || {
            format!("instance {inst}: scale {scale}, expected {want_scale}")
        })?;

        let mut used = vec![false; cores];
        let mut handed = 0usize;
        for (i, a) in plan.assignments.iter().enumerate() {
            check(a.container_id == format!("c{i}"), || {
                format!("instance {inst}: order changed at {i}")
            })?;
            for &c in &a.preferred_cores {
                check(public.contains(&c), || {
                    format!("instance {inst}: c{i} got core {c} outside the pool")
                })?;
                check(!used[c], || format!("instance {inst}: core {c} handed out twice"))?;
                used[c] = true;
            }
            let wanted = ((demands[i] as i128 * p + total - 1) / total) as usize;
            let left = public.len() - handed;
            let size = a.preferred_cores.len();
            if wanted <= left {
                check(size == wanted, || {
                    format!("instance {inst}: c{i} has {size} cores, ceil gives {wanted}")
                })?;
            } else {
                clamped += 1;
                check(size == left, || {
                    format!("instance {inst}: clamped c{i} has {size} cores, {left} were left")
                })?;
            }
            check(a.feasible == (size > 0 || wanted == 0), || {
                format!("instance {inst}: c{i} feasibility flag")
            })?;
            handed += size;
        }
        check(handed <= public.len(), || format!("instance {inst}: pool overdrawn"))?;
    }
    Ok(format!(
        "{instances} instances: disjoint, ceil-sized, inside the pool, {clamped} clamped containers"
    ))
}

// ------------------------------------------------------------ criteria 4 and 5

struct Audited {
    scenario: &'static str,
    policy: &'static str,
    seed: u64,
    interval: u64,
    report: AuditReport,
}

fn audit_builtins() -> Result<Vec<Audited>, String> {
    let mut out = Vec::new();
    for (name, _) in BUILTIN_SCENARIOS {
        let scenario = Scenario::builtin(name).ok_or("missing builtin")?;
        let topo = scenario.machine().map_err(|e| e.to_string())?;
        let interval = scenario.policy.load_balance_interval_ns();
        for policy in ["baseline", "cas"] {
            for &seed in &scenario.seeds {
                let containers = scenario.containers(&topo, seed).map_err(|e| e.to_string())?;
                let cpusets: Vec<Vec<usize>> =
                    containers.iter().map(|c| c.runnable_cpuset.clone()).collect();
                let mut audit = TraceAudit::new(topo.total_cores, &cpusets, interval);
                let outcome = scenario
                    .run(seed, Some(policy), &mut audit)
                    .map_err(|e| e.to_string())?;
                out.push(Audited {
                    scenario: name,
                    policy,
                    seed,
                    interval,
                    report: audit.finish_at(outcome.end_time_ns),
                });
            }
        }
    }
    Ok(out)
}

fn criterion_4(audits: &[Audited]) -> Outcome {
    let mut worst = 0;
    let mut cpuset_worst = 0;
    for a in audits {
        let r = &a.report;
        worst = worst.max(r.max_queued_while_idle_ns);
        cpuset_worst = cpuset_worst.max(r.cpuset_max_queued_while_idle_ns);
        check(
            r.work_conserving(a.interval) && r.queued_while_idle_overruns == 0,
            || {
                format!(
                    "{} / {} / seed {}: {} queued-with-idle wakeups, {} overruns, longest {} us, {} illegal",
                    a.scenario,
                    a.policy,
                    a.seed,
                    r.queued_with_idle_wakeups,
                    r.queued_while_idle_overruns,
                    r.max_queued_while_idle_ns / 1000,
                    r.illegal_placements
                )
            },
        )?;
    }
    Ok(format!(
        "{} traces, longest queued-while-idle stretch {} us \
         (ignoring pinning to preferred queues: {} us)",
        audits.len(),
        worst / 1000,
        cpuset_worst / 1000
    ))
}

fn criterion_5(audits: &[Audited]) -> Outcome {
    let mut ticks = 0;
    let mut opportunities = 0;
    for a in audits.iter().filter(|a| a.policy == "cas") {
        let r = &a.report;
        ticks += r.balance_ticks;
        opportunities += r.attraction_opportunities;
        check(r.pinning_and_attraction(), || {
            format!(
                "{} / seed {}: {} pinning violations, {} of {} attraction opportunities missed",
                a.scenario,
                a.seed,
                r.pinning_violations,
                r.attraction_violations,
                r.attraction_opportunities
            )
        })?;
    }
    check(opportunities > 0, || "no attraction opportunity was exercised".into())?;
    Ok(format!(
        "{ticks} balance ticks, {opportunities} attraction opportunities all served, no pinning violations"
    ))
}

// ------------------------------------------------------------ criteria 6 and 7

fn split_llc_runs() -> Result<Vec<(MetricsReport, MetricsReport)>, String> {
    let scenario = Scenario::builtin("split-llc").ok_or("missing builtin")?;
    let mut out = Vec::new();
    for &seed in &scenario.seeds {
        let run = |p| {
            scenario
                .run(seed, Some(p), &mut NullSink)
                .map(|o| o.report)
                .map_err(|e| e.to_string())
        };
        out.push((run("baseline")?, run("cas")?));
    }
    Ok(out)
}

fn criterion_6(runs: &[(MetricsReport, MetricsReport)]) -> Outcome {
    check(runs.len() >= 10, || format!("only {} seeds", runs.len()))?;
    let summaries = runs
        .iter()
        .map(|(b, c)| compare_reports(b, c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let agg = aggregate_comparisons(&summaries);
    let thr = agg.throughput_ratio_geomean.ok_or("throughput ratio undefined")?;
    let p99 = agg.p99_latency_ratio_geomean.ok_or("p99 latency ratio undefined")?;
    let red = agg.cross_llc_reduction.ok_or("baseline made no cross-LLC migrations")?;
    let line = format!(
        "{} seeds: throughput ratio {thr:.4}, p99 latency ratio {p99:.3}, cross-LLC reduction {:.1}%",
        agg.seeds,
        red * 100.0
    );
    check(thr > 1.0 && p99 > 1.0 && red >= 0.5, || line.clone())?;
    Ok(line)
}

fn criterion_7(runs: &[(MetricsReport, MetricsReport)]) -> Outcome {
    let mut min_pcr = f64::INFINITY;
    let mut max_util: f64 = 0.0;
    for (_, cas) in runs {
        let m = &cas.machine;
        let pcr = m.aggregate_pcr.ok_or("no CPU time recorded")?;
        min_pcr = min_pcr.min(pcr);
        max_util = max_util.max(m.utilization);
    }
    let line = format!("utilization at most {max_util:.3}, aggregate PCR at least {min_pcr:.3}");
    check(max_util <= 0.5 && min_pcr >= 0.8, || line.clone())?;
    Ok(line)
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut scenario = Scenario::builtin("split-llc").ok_or("missing builtin")?;
    scenario.cost = WarmthParams::neutral();
    let seeds = &scenario.seeds[..5];
    for &seed in seeds {
        let work = |p| {
            scenario
                .run(seed, Some(p), &mut NullSink)
                .map(|o| o.report.machine.completed_work)
                .map_err(|e| e.to_string())
        };
        let (b, c) = (work("baseline")?, work("cas")?);
        check(b == c && b > 0.0, || format!("seed {seed}: baseline {b}, cas {c}"))?;
    }
    Ok(format!("{} seeds, completed work identical", seeds.len()))
}

// ---------------------------------------------------------------- criterion 9

fn cli_run(out: &Path, scenario: &str, policy: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_affinity-tailor"))
        .args(["run", "--scenario", scenario, "--seeds", "7", "--emit-trace", "--policy", policy])
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || {
        String::from_utf8_lossy(&status.stderr).into_owned()
    })
}

fn criterion_9() -> Outcome {
    let mut compared = 0;
    for (scenario, policy) in [("builtin:split-llc", "cas"), ("builtin:two-socket", "baseline")] {
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        cli_run(a.path(), scenario, policy)?;
        cli_run(b.path(), scenario, policy)?;
        for file in [format!("report-{policy}-seed7.json"), format!("trace-{policy}-seed7.jsonl")] {
            let x = std::fs::read(a.path().join(&file)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.path().join(&file)).map_err(|e| e.to_string())?;
            check(!x.is_empty() && x == y, || format!("{scenario}: {file} differs"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across repeated runs"))
}

// ---------------------------------------------------------------------------

struct Line {
    id: u32,
    limit: Option<Duration>,
    elapsed: Duration,
    outcome: Outcome,
}

fn timed(id: u32, limit: Option<u64>, f: impl FnOnce() -> Outcome) -> Line {
    let start = Instant::now();
    let outcome = f();
    Line {
        id,
        limit: limit.map(Duration::from_secs),
        elapsed: start.elapsed(),
        outcome,
    }
}

#[test]
fn acceptance_criteria() {
    let mut lines = vec![
        timed(1, Some(30), criterion_1),
        timed(2, Some(5), criterion_2),
        timed(3, Some(5), criterion_3),
    ];

    let start = Instant::now();
    let audits = audit_builtins();
    let audit_time = start.elapsed();
    let mut l4 = timed(4, Some(60), || criterion_4(audits.as_ref().map_err(Clone::clone)?));
    l4.elapsed += audit_time;
    let mut l5 = timed(5, None, || criterion_5(audits.as_ref().map_err(Clone::clone)?));
    l5.elapsed += audit_time;
    lines.extend([l4, l5]);

    let start = Instant::now();
    let runs = split_llc_runs();
    let run_time = start.elapsed();
    let mut l6 = timed(6, Some(120), || criterion_6(runs.as_ref().map_err(Clone::clone)?));
    l6.elapsed += run_time;
    let mut l7 = timed(7, Some(60), || criterion_7(runs.as_ref().map_err(Clone::clone)?));
    l7.elapsed += run_time;
    lines.extend([l6, l7]);

    lines.push(timed(8, None, criterion_8));
    lines.push(timed(9, None, criterion_9));

    let mut failed = Vec::new();
    for l in &lines {
        let over = l.limit.is_some_and(|lim| l.elapsed > lim);
        let (verdict, detail) = match (&l.outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; exceeded {:?}", l.limit.unwrap())),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        println!(
            "criterion {}: {verdict} ({:.1}s) {detail}",
            l.id,
            l.elapsed.as_secs_f64()
        );
        if verdict == "FAIL" {
            failed.push(l.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
