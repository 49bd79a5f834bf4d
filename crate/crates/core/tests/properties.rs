use affinity_tailor::allocator::{
    allocate_monolithic, allocate_split_llc, processing_order, ContainerDemand, SplitLlcAllocator,
};
use affinity_tailor::costmodel::WarmthParams;
use affinity_tailor::metrics::TraceAudit;
use affinity_tailor::scheduler::{
    run_simulation, CoreAwarePolicy, PolicySettings, SchedulingPolicy, SimInputs,
    WorkConservingPolicy,
};
use affinity_tailor::topology::{MachineTopology, TopologySpec};
use affinity_tailor::units::{CpuUnits, NANOS_PER_SEC};
use affinity_tailor::workload::{ContainerSpec, LevelSource, UtilizationProcess};
use proptest::prelude::*;

fn demands(raw: &[i64]) -> Vec<ContainerDemand> {
    raw.iter()
        .enumerate()
        .map(|(i, &d)| ContainerDemand::new(format!("c{i}"), CpuUnits::from_raw(d)))
        .collect()
}

const CPU: i64 = CpuUnits::SCALE;

proptest! {
    #[test]
    fn split_llc_conserves_the_ledger(
        caps in prop::collection::vec(4usize..=16, 2..=8),
        raw in prop::collection::vec(0i64..20 * CPU, 0..=12),
    ) {
        let topo = MachineTopology::from_layout(std::slice::from_ref(&caps)).unwrap();
        let input = demands(&raw);
        let plan = allocate_split_llc(&input, &topo).unwrap();
        prop_assert_eq!(&plan, &allocate_split_llc(&input, &topo).unwrap());

        let ledger = plan.ledger_after.as_ref().unwrap();
        let before: i64 = caps.iter().map(|&c| c as i64 * CPU).sum();
        let after: i64 = ledger.remaining().iter().map(|r| r.raw()).sum();
        let granted: i64 = plan
            .assignments
            .iter()
            .filter(|a| a.feasible)
            .map(|a| a.granted_capacity.raw())
            .sum();
        prop_assert_eq!(before - after, granted);
        prop_assert!(ledger.remaining().iter().all(|r| !r.is_negative()));

        // recorded order follows the processing rule
        let largest = CpuUnits::from_cores(*caps.iter().max().unwrap());
        let order: Vec<String> = processing_order(&input, largest)
            .into_iter()
            .map(|i| format!("c{i}"))
            .collect();
        let recorded: Vec<String> = plan.assignments.iter().map(|a| a.container_id.clone()).collect();
        prop_assert_eq!(order, recorded);
        let split = raw.iter().filter(|&&d| d <= largest.raw()).count();
        let by_id = |id: &str| raw[id[1..].parse::<usize>().unwrap()];
        let ids: Vec<i64> = plan.assignments.iter().map(|a| by_id(&a.container_id)).collect();
        prop_assert!(ids[..split].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(ids[split..].windows(2).all(|w| w[0] >= w[1]));

        // masks are whole chiplets
        for a in plan.assignments.iter().filter(|a| a.feasible) {
            let mut cores: Vec<usize> = a
                .chiplets
                .as_ref()
                .unwrap()
                .iter()
                .flat_map(|&d| topo.domain(d).unwrap().cores.clone())
                .collect();
            cores.sort_unstable();
            prop_assert_eq!(&cores, &a.preferred_cores);
        }
    }

    #[test]
    fn monolithic_masks_are_disjoint_and_pure(
        pool in prop::collection::btree_set(0usize..64, 1..40),
        raw in prop::collection::vec(0i64..10 * CPU, 1..=12),
    ) {
        prop_assume!(raw.iter().any(|&d| d > 0));
        let pool: Vec<usize> = pool.into_iter().collect();
        let input = demands(&raw);
        let plan = allocate_monolithic(&input, &pool).unwrap();
        prop_assert_eq!(&plan, &allocate_monolithic(&input, &pool).unwrap());
        let mut seen = std::collections::BTreeSet::new();
        for a in &plan.assignments {
            for &c in &a.preferred_cores {
                prop_assert!(pool.contains(&c));
                prop_assert!(seen.insert(c));
            }
        }
    }
}

fn container(i: usize, level: f64, cpuset: Vec<usize>, burst: f64) -> ContainerSpec {
    let width = cpuset.len() as f64;
    ContainerSpec {
        container_id: format!("c{i}"),
        requested_limit: (level * 1.5).clamp(0.5, width),
        runnable_cpuset: cpuset,
        process: UtilizationProcess {
            levels: LevelSource::Synthetic {
                baseline: level.min(width),
                burst_amplitude: burst,
                burst_probability: 0.3,
                mean_burst_seconds: 1.0,
                seed: i as u64,
            },
            mean_service_us: 300.0,
            mean_fanout: 1.0,
            surge: None,
        },
    }
}

fn containers(topo_cores: usize) -> impl Strategy<Value = Vec<ContainerSpec>> {
    prop::collection::vec(
        (
            0.2f64..4.0,
            prop::collection::btree_set(0..topo_cores, 1..=topo_cores),
            0.0f64..2.0,
        ),
        1..=5,
    )
    .prop_map(|specs| {
        specs
            .into_iter()
            .enumerate()
            .map(|(i, (level, set, burst))| {
                let set: Vec<usize> = set.into_iter().collect();
                let level = level.min(set.len() as f64 * 0.6);
                container(i, level, set, burst)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Work conservation, legality, pinning and attraction on random small
    /// machines and cpusets.
    #[test]
    fn engine_invariants_hold(
        specs in containers(16),
        seed in 0u64..1000,
        balance_us in prop::sample::select(vec![500u64, 2000, 10000]),
    ) {
        let topo = TopologySpec::new(1, 4, 4).build().unwrap();
        let settings = PolicySettings {
            load_balance_interval_us: balance_us,
            control_interval_s: 1,
            ..PolicySettings::default()
        };
        let cost = WarmthParams::default();
        let cpusets: Vec<Vec<usize>> = specs.iter().map(|c| c.runnable_cpuset.clone()).collect();
        let interval = settings.load_balance_interval_ns();
        for policy in [&CoreAwarePolicy as &dyn SchedulingPolicy, &WorkConservingPolicy] {
            let inputs = SimInputs {
                topology: &topo,
                containers: &specs,
                policy,
                allocator: &SplitLlcAllocator,
                settings: &settings,
                cost: &cost,
                horizon_ns: 2 * NANOS_PER_SEC,
                seed,
            };
            let mut audit = TraceAudit::new(topo.total_cores, &cpusets, interval);
            let out = run_simulation(&inputs, &mut audit).unwrap();
            let r = audit.finish_at(out.end_time_ns);
            prop_assert!(r.work_conserving(interval), "{}: {:?}", policy.name(), r);
            prop_assert_eq!(r.queued_while_idle_overruns, 0);
            if policy.name() == "cas" {
                prop_assert!(r.pinning_and_attraction(), "{:?}", r);
            }
        }
    }
}
