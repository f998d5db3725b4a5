//! Acceptance gate: one test per guarantee the toolkit makes. Each test line
//! in the output is one criterion; all must pass.
//!
//! 1. Postdominators and control dependence match enumeration oracles.
//! 2. Divergence classification matches its oracle; two-count summary.
//! 3. Predictor depth budget, separable fidelity, and text round-trip.
//! 4. Standard benchmark suite accuracy profile.
//! 5. Loader event logs satisfy the blanking invariants under every policy.
//! 6. Audit verdicts on attacks and benign drift; jump sweeps fault on
//!    exactly the blanked remainder.
//! 7. Surface-reduction floors in the reference regime; exact arithmetic.
//! 8. End-to-end pipeline reruns are byte-identical.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shroud_core::corpus::{self, Scale, Scenario};
use shroud_core::ir::{FnId, Program, SiteId};
use shroud_core::metrics::{
    compute_cve_exposure, compute_exposed, compute_gadget_reduction, compute_reduction,
};
use shroud_core::oracles::{
    verify_divergence_random, verify_dominance_exhaustive, verify_dominance_random,
};
use shroud_core::plan::{plan_program, FeatureLayout};
use shroud_core::profile::{build_profile, ChainFile, ChainMode, ProfileRecord};
use shroud_core::sim::{
    inject_attack_jump, simulate, verify_event_log, Policy, SimEvent, SimMode, Simulation,
    Simulator,
};
use shroud_core::tree::{self, train_tree};

/// Train on the small and medium traces, replay the large one.
fn run_scenario(sc: &Scenario, mode: ChainMode, policy: Policy, depth: usize) -> (Simulation, ChainFile) {
    let plan = plan_program(&sc.program).expect("plan");
    let layout = FeatureLayout::new(&plan);
    let profile = build_profile(&sc.train_events(), &layout, mode).expect("profile");
    let model = train_tree(&profile.records, depth).expect("train");
    let chains = ChainFile::from_profile(&profile);
    let sim = simulate(
        &sc.program,
        &plan,
        &model,
        &chains,
        &sc.oracle,
        sc.trace(Scale::Large),
        policy,
    )
    .expect("simulate");
    (sim, chains)
}

/// The benchmark policy: set chains, purge at every window close.
fn run_benchmark(sc: &Scenario) -> Simulation {
    let policy = Policy {
        mode: SimMode::Set,
        lazy_blanking: false,
    };
    run_scenario(sc, ChainMode::Set, policy, 10).0
}

fn permanent_set(p: &Program) -> BTreeSet<FnId> {
    p.functions()
        .values()
        .filter(|f| f.is_library && (!f.instrumentable || !f.blankable))
        .map(|f| f.id)
        .collect()
}

#[test]
fn postdominators_and_control_dependence_match_the_enumeration_oracles() {
    let start = Instant::now();
    let exhaustive = verify_dominance_exhaustive(6);
    assert!(
        exhaustive.clean(),
        "exhaustive sweep found {} postdominator and {} control-dependence mismatches; first: {:?}",
        exhaustive.postdom_mismatches,
        exhaustive.rdf_mismatches,
        exhaustive.first_mismatch
    );
    assert!(exhaustive.cfgs > 26_000_000, "sweep covered only {} graphs", exhaustive.cfgs);

    let random = verify_dominance_random(1000, 12, 0xD0);
    assert!(
        random.clean(),
        "random sweep found mismatches; first: {:?}",
        random.first_mismatch
    );
    assert_eq!(random.cfgs, 1000);

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "verification took {elapsed:?}, budget is 60s");
}

#[test]
fn divergence_classification_matches_the_enumeration_oracle() {
    let cmp = verify_divergence_random(500, 12, 8, 0xD1);
    assert!(
        cmp.clean(),
        "{} of {} functions disagree with the oracle; first: {:?}",
        cmp.mismatches,
        cmp.functions_checked,
        cmp.first_mismatch
    );
    assert_eq!(cmp.programs, 500);
    assert!(cmp.divergent > 0, "corpus never produced a divergent function");
    assert!(cmp.non_divergent > 0, "corpus never produced a non-divergent function");

    // The summary table is two counts, printed by the binary.
    let tmp = tempfile::tempdir().unwrap();
    let sc = corpus::generate(&corpus::standard_suite()[0]).expect("generate");
    fs::write(tmp.path().join("program.json"), sc.program.to_json_string()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_shroud"))
        .args(["divergence", "--program", "program.json"])
        .current_dir(tmp.path())
        .output()
        .expect("spawn shroud");
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2, "summary shape: {stdout:?}");
    assert!(lines[0].starts_with("#Divergent\t"));
    assert!(lines[1].starts_with("#Non-divergent\t"));
}

/// Rows whose label is a pure function of two integer grid features. The
/// full grid is in the training set, so a correct learner must classify any
/// other draw from the grid perfectly.
fn separable_table(rng: &mut ChaCha8Rng) -> (Vec<ProfileRecord>, impl Fn(f64, f64) -> u32) {
    let cut_a = rng.gen_range(2..=8) as f64;
    let cut_b = rng.gen_range(2..=8) as f64;
    let mut labels = [0u32, 1, 2, 3];
    for i in (1..4).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    let rule = move |a: f64, b: f64| -> u32 {
        labels[((a > cut_a) as usize) << 1 | (b > cut_b) as usize]
    };
    let mut rows = Vec::new();
    for a in 0..=10 {
        for b in 0..=10 {
            rows.push(ProfileRecord {
                site: SiteId(0),
                features: vec![0.0, a as f64, b as f64],
                label: rule(a as f64, b as f64),
            });
        }
    }
    (rows, rule)
}

#[test]
fn predictor_honors_depth_fits_separable_tables_and_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD3);

    // Depth budget on noisy, unseparable data.
    for _ in 0..10 {
        let rows = shroud_core::oracles::random_table(&mut rng, 400, 4, 6, 9);
        let model = train_tree(&rows, 10).expect("train");
        assert!(model.depth() <= 10, "depth {} breaks the budget", model.depth());
    }

    // Perfect held-out accuracy on separable tables.
    for _ in 0..20 {
        let (rows, rule) = separable_table(&mut rng);
        let model = train_tree(&rows, 10).expect("train");
        for _ in 0..500 {
            let a = rng.gen_range(0..=10) as f64;
            let b = rng.gen_range(0..=10) as f64;
            assert_eq!(
                model.predict(&[0.0, a, b]),
                rule(a, b),
                "held-out point ({a}, {b}) misclassified"
            );
        }
    }

    // Behavioral equality of the text form on 10,000 random vectors/model.
    for _ in 0..5 {
        let rows = shroud_core::oracles::random_table(&mut rng, 600, 5, 8, 12);
        let model = train_tree(&rows, 10).expect("train");
        let text = tree::to_text(&model);
        let back = tree::from_text(&text).expect("reparse");
        for _ in 0..10_000 {
            let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..15.0)).collect();
            assert_eq!(model.predict(&v), back.predict(&v), "round-trip diverges on {v:?}");
        }
    }
}

#[test]
fn standard_suite_holds_the_accuracy_floor() {
    let specs = corpus::standard_suite();
    assert_eq!(specs.len(), 17);
    let mut accuracies = Vec::new();
    let mut drifted = None;
    for spec in &specs {
        let sc = corpus::generate(spec).expect("generate");
        let sim = run_benchmark(&sc);
        accuracies.push(sim.report.total.accuracy_percent);
        if spec.name == "wave_fold" {
            drifted = Some(sim.report);
        }
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    assert!(mean >= 94.0, "mean accuracy {mean:.2} under the 94 floor: {accuracies:?}");
    let high = accuracies.iter().filter(|a| **a >= 97.0).count();
    assert!(high >= 9, "only {high} of 17 scenarios reach 97: {accuracies:?}");

    // The drift scenario degrades visibly, and every miss is an
    // underprediction: the model never loads too much, only too little.
    let drifted = drifted.expect("suite includes wave_fold");
    assert!(
        drifted.total.accuracy_percent <= 80.0,
        "drift scenario accuracy {:.2} is not degraded",
        drifted.total.accuracy_percent
    );
    assert!(drifted.total.underpredictions > 0);
    assert_eq!(
        drifted.total.overpredictions, 0,
        "drift misses must be pure underprediction"
    );
}

#[test]
fn every_event_log_satisfies_the_loader_invariants() {
    let mut specs = corpus::standard_suite();
    specs.push(corpus::regime_scenario());
    specs.push(corpus::tampered_argument_scenario());
    specs.push(corpus::unsafe_input_scenario());
    specs.push(corpus::benign_drift_scenario());

    let policies = [
        (ChainMode::Set, SimMode::Set, false),
        (ChainMode::Set, SimMode::Set, true),
        (ChainMode::Sequence, SimMode::FullChain, false),
        (ChainMode::Sequence, SimMode::FullChain, true),
    ];
    let mut checked = 0usize;
    for spec in &specs {
        let sc = corpus::generate(spec).expect("generate");
        let permanent = permanent_set(&sc.program);
        for (chain_mode, sim_mode, lazy) in policies {
            let policy = Policy {
                mode: sim_mode,
                lazy_blanking: lazy,
            };
            let (sim, chains) = run_scenario(&sc, chain_mode, policy, 14);
            let violations = verify_event_log(&sim.log, &permanent, &chains, sim_mode);
            assert!(
                violations.is_empty(),
                "{} under {sim_mode:?}/lazy={lazy}: {} violations, first: {}",
                spec.name,
                violations.len(),
                violations[0]
            );
            checked += 1;
        }
    }
    assert_eq!(checked, specs.len() * policies.len());
}

#[test]
fn audits_flag_attacks_clear_benign_drift_and_jumps_fault_on_blanked_code() {
    // Tampered dispatch argument: the clean-replay chain matches the
    // prediction, not the observed run, so the window audits as an attack.
    let tampered = corpus::generate(&corpus::tampered_argument_scenario()).expect("generate");
    let sim = run_benchmark(&tampered);
    assert!(sim.report.attacks_detected >= 1, "tampering missed: {:?}", sim.report);

    // Hostile input marked unsafe at the source: also an attack.
    let unsafe_in = corpus::generate(&corpus::unsafe_input_scenario()).expect("generate");
    let sim = run_benchmark(&unsafe_in);
    assert!(sim.report.attacks_detected >= 1, "unsafe input missed: {:?}", sim.report);

    // Benign drift mispredicts but replays clean: legal, never an attack.
    let benign = corpus::generate(&corpus::benign_drift_scenario()).expect("generate");
    let sim = run_benchmark(&benign);
    assert!(sim.report.legal_audits >= 1, "no benign audit fired: {:?}", sim.report);
    assert_eq!(sim.report.attacks_detected, 0, "benign drift flagged: {:?}", sim.report);

    // Arbitrary-jump sweep: at any instant, a jump to every library function
    // faults on exactly the blanked remainder.
    let plan = plan_program(&tampered.program).expect("plan");
    let layout = FeatureLayout::new(&plan);
    let profile = build_profile(&tampered.train_events(), &layout, ChainMode::Set).expect("profile");
    let model = train_tree(&profile.records, 10).expect("train");
    let chains = ChainFile::from_profile(&profile);
    let policy = Policy {
        mode: SimMode::Set,
        lazy_blanking: true,
    };
    let mut sim = Simulator::new(&tampered.program, &plan, &model, &chains, &tampered.oracle, policy)
        .expect("simulator");
    let trace = tampered.trace(Scale::Large);
    let marks = [trace.len() / 3, 2 * trace.len() / 3, trace.len()];
    let mut swept = 0usize;
    for (i, ev) in trace.iter().enumerate() {
        sim.step(ev).expect("step");
        if marks.contains(&(i + 1)) {
            let library = sim.state().library().clone();
            let loaded = sim.state().loaded();
            assert!(loaded.is_subset(&library));
            let mut faults = 0u64;
            for f in &library {
                if let SimEvent::Fault { .. } = sim.inject_attack_jump(*f) {
                    faults += 1;
                }
            }
            assert_eq!(
                faults,
                (library.len() - loaded.len()) as u64,
                "sweep at event {} disagrees with the loaded set",
                i + 1
            );
            swept += 1;
        }
    }
    assert_eq!(swept, 3, "sweep points missed");
}

#[test]
fn reference_regime_meets_the_reduction_floors_with_exact_arithmetic() {
    let sc = corpus::generate(&corpus::regime_scenario()).expect("generate");
    let roots: BTreeSet<FnId> = sc
        .program
        .functions()
        .values()
        .filter(|f| !f.is_library)
        .map(|f| f.id)
        .collect();
    let reach = shroud_core::callgraph::reachable_library_functions(&sc.program, &roots);
    assert_eq!(reach.functions.len(), 170, "regime shape drifted");
    assert_eq!(sc.permanent.len(), 5, "permanent set p+s is 5 in this regime");

    // 56 distinct chains need a deeper tree than the benchmark default; this
    // scenario measures the loaded surface, not model compactness.
    let policy = Policy {
        mode: SimMode::Set,
        lazy_blanking: false,
    };
    let (sim, _) = run_scenario(&sc, ChainMode::Set, policy, 14);
    assert!(sim.report.max_chain_functions <= 7, "chain depth {}", sim.report.max_chain_functions);

    let exposed = compute_exposed(
        sim.report.p_count,
        sim.report.s_count,
        sim.report.max_chain_functions,
    );
    assert_eq!(exposed, sim.report.max_exposed_functions);
    let reduction = compute_reduction(reach.functions.len(), exposed).expect("reduction");
    assert!(reduction >= 94.0, "function reduction {reduction:.2} under the floor");

    let worst: BTreeSet<FnId> = sim.report.worst_case_loaded.iter().copied().collect();
    let gadgets = compute_gadget_reduction(&sc.program, &worst);
    assert!(gadgets >= 95.0, "gadget reduction {gadgets:.2} under the floor");

    // The three surface formulas against hand-computed values, exactly.
    assert_eq!(compute_exposed(2, 3, 5), 10);
    assert_eq!(compute_reduction(170, 10).unwrap(), 100.0 * 160.0 / 170.0);
    assert_eq!(compute_reduction(128, 7).unwrap(), 100.0 * 121.0 / 128.0);
    assert_eq!(compute_cve_exposure(1, 1, 3, 10).unwrap(), (5, 50.0));
    assert_eq!(compute_cve_exposure(2, 3, 6, 10).unwrap(), (11, 0.0));
    assert_eq!(compute_cve_exposure(0, 0, 1, 4).unwrap(), (1, 75.0));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let spec = corpus::ScenarioSpec {
        name: "accept".into(),
        seed: 91,
        ..corpus::standard_suite()[0].clone()
    };
    fs::write(dir.join("spec.json"), spec.to_json_string()).unwrap();
    fs::write(
        dir.join("pipe.json"),
        serde_json::to_string(&serde_json::json!({
            "out_dir": "run",
            "emit_events": true,
            "scenario_files": ["spec.json"],
            "suite": "attacks",
        }))
        .unwrap(),
    )
    .unwrap();

    let run = |dir: &Path| {
        let out = Command::new(env!("CARGO_BIN_EXE_shroud"))
            .args(["pipeline", "--config", "pipe.json"])
            .current_dir(dir)
            .output()
            .expect("spawn shroud");
        assert!(
            out.status.success(),
            "pipeline failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(dir);
    fs::rename(dir.join("run"), dir.join("first")).unwrap();
    run(dir);

    let mut compared = 0usize;
    for entry in walk(&dir.join("first")) {
        let rel = entry.strip_prefix(dir.join("first")).unwrap().to_path_buf();
        let again = dir.join("run").join(&rel);
        assert_eq!(
            fs::read(&entry).unwrap(),
            fs::read(&again).unwrap_or_else(|e| panic!("{} missing on rerun: {e}", rel.display())),
            "{} differs between runs",
            rel.display()
        );
        compared += 1;
    }
    // Four scenario directories of artifacts plus the two suite tables.
    assert!(compared > 40, "only {compared} files compared");
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("read_dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}
