//! The acceptance suite: one test per shipping criterion, each printing a
//! PASS line with its measured runtime. Tolerances and budgets are pinned
//! in the assertions.

use peercensus::analysis::{
    exact_ratio_tail, lemma1_bound, lemma2_bound, lemma3_bound,
};
use peercensus::sim::{
    block_attribution_trial, churn_step, config::ScriptConfig, run_scenario, AttackerStrategy,
    ChurnParams, Owner, Scenario, ScenarioConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::PathBuf;
use std::time::{Duration, Instant};

fn repo_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/{name}"))
}

fn pass(criterion: &str, t0: Instant, budget: Duration) {
    let elapsed = t0.elapsed();
    println!("criterion {criterion}: PASS ({elapsed:?}, budget {budget:?})");
    assert!(
        elapsed <= budget,
        "criterion {criterion} exceeded its runtime budget: {elapsed:?} > {budget:?}"
    );
}

/// Reference-deployment bound: failure probability within one order of
/// magnitude of 4.26e-15 and an expected failure spacing in the millions of
/// years at one-second ticks.
#[test]
fn criterion_01_reference_bound() {
    let t0 = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let report =
        peercensus::cli::run_analyze(&repo_config("golden_bound.toml"), Some(out.path()))
            .expect("analyze runs");
    assert!(
        report.total >= 4.26e-16 && report.total <= 4.26e-14,
        "failure probability {} outside one order of magnitude of 4.26e-15",
        report.total
    );
    assert!(
        report.mtbf_years >= 3.5e6 && report.mtbf_years <= 1.5e7,
        "failure spacing {} years outside [3.5e6, 1.5e7]",
        report.mtbf_years
    );
    assert!(out.path().join("report.json").is_file());
    pass("1 (reference bound)", t0, Duration::from_secs(1));
}

/// The closed-form ratio bounds dominate exhaustively enumerated tail
/// probabilities on every small instance.
#[test]
fn criterion_02_bound_dominates_exact() {
    let t0 = Instant::now();
    let mut checked = 0u64;
    for n in 2u32..=20 {
        for na in 1..n {
            let nd = n - na;
            let r = na as f64 / nd as f64;
            for rho in [0.2, 0.5, 0.8, 0.99] {
                for a in [0.05, 0.15, 0.25, 0.35, 0.45, 0.49] {
                    let threshold = (1.0 + 2.0 * a / (1.0 - a)) * r;
                    let exact = exact_ratio_tail(na, nd, rho, threshold);
                    let b1 = lemma1_bound(a, n as f64, r, rho).unwrap().p;
                    let b2 = lemma2_bound(a, n as f64, r, rho).unwrap().p;
                    assert!(
                        b1 + 1e-12 >= exact,
                        "resource bound {b1} < exact {exact} at n={n} na={na} rho={rho} a={a}"
                    );
                    assert!(
                        b2 + 1e-12 >= exact,
                        "voter bound {b2} < exact {exact} at n={n} na={na} rho={rho} a={a}"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 190 * 4 * 6);
    pass("2 (bound vs exact, exhaustive n<=20)", t0, Duration::from_secs(60));
}

/// The minted-block tail bound holds against the simulated mining process:
/// the frequency of the bounded event over 2,000 seeded runs stays within
/// the bound plus a 99% binomial margin.
#[test]
fn criterion_03_bound_vs_simulation() {
    let t0 = Instant::now();
    let (ell, t, alpha) = (200u32, 0.25f64, 0.5f64);
    let bound = lemma3_bound(alpha, ell as f64, t).unwrap().p;
    let runs = 2_000u32;
    let margin = 2.576 * (bound * (1.0 - bound) / runs as f64).sqrt();
    let event_count = ((1.0 + alpha) * ell as f64 * t).ceil() as u32; // 75 blocks

    let churn = ChurnParams {
        fail: 0.05,
        recover: 0.15,
    };
    let mut exceed = 0u32;
    for seed in 0..runs {
        let mut rng = ChaCha12Rng::seed_from_u64(3_000 + seed as u64);
        let x = block_attribution_trial(40, t, &churn, ell, &mut rng);
        if x >= event_count {
            exceed += 1;
        }
    }
    let freq = exceed as f64 / runs as f64;
    assert!(
        freq <= bound + margin,
        "event frequency {freq} exceeds bound {bound} + margin {margin}"
    );
    pass("3 (bound vs simulation)", t0, Duration::from_secs(300));
}

fn byzantine_config(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.seed = seed;
    cfg.duration_ticks = 300;
    cfg.mining.tau_ticks = 70.0;
    cfg.bootstrap.chain_length = 9;
    cfg.bootstrap.safety_margin = 1;
    cfg.bootstrap.online_window = 4;
    cfg.bootstrap.attacker_window_share = Some(0.25);
    cfg.agreement.ping_interval = 40;
    cfg.agreement.suspicion_after = 90;
    cfg.voter_churn.churn = ChurnParams {
        fail: 0.006,
        recover: 0.08,
    };
    cfg.attacker = AttackerStrategy::Byzantine {
        voters: 1,
        drop_prob: 0.3,
        dup_prob: 0.3,
        equivocate: true,
    };
    cfg
}

/// Four voters, one scripted byzantine (drops, duplicates, equivocating
/// pre-prepares): the honest replicas' committed logs stay prefix-comparable
/// in every run of a 500-seed fuzz campaign.
#[test]
fn criterion_04_bft_safety_fuzz() {
    let t0 = Instant::now();
    let runs = 500u64;
    let mut total_commits = 0u64;
    for seed in 0..runs {
        let m = run_scenario(byzantine_config(seed)).expect("scenario runs");
        assert!(
            m.summary.honest_logs_prefix_consistent,
            "seed {seed}: honest logs diverged"
        );
        total_commits += m.summary.committed_ops;
    }
    // The campaign must actually exercise agreement, not just idle.
    assert!(
        total_commits >= runs,
        "campaign too quiet: {total_commits} commits over {runs} runs"
    );
    pass("4 (byzantine safety fuzz, 500 seeds)", t0, Duration::from_secs(300));
}

/// Two simultaneous legal siblings: exactly one commits, the chain stays
/// legal, and the losing miner re-targets the winner.
#[test]
fn criterion_05_fork_resolution() {
    let t0 = Instant::now();
    for seed in 0..200 {
        let mut cfg = ScenarioConfig::default();
        cfg.seed = seed;
        cfg.duration_ticks = 120;
        cfg.mining.tau_ticks = 100_000.0; // only the scripted fork mines
        cfg.bootstrap.chain_length = 16;
        cfg.bootstrap.safety_margin = 2;
        cfg.bootstrap.online_window = 7;
        cfg.script = ScriptConfig { fork_at: Some(20) };
        let mut s = Scenario::new(cfg).unwrap();
        s.run_until(120);
        let forks = s.script_forks().to_vec();
        assert_eq!(forks.len(), 1, "seed {seed}: fork script fired once");
        let (a, b) = forks[0];
        let chain = s.source_state().chain.clone();
        chain.validate().expect("committed chain stays legal");
        let got_a = chain.blocks().iter().any(|blk| blk.hash() == a);
        let got_b = chain.blocks().iter().any(|blk| blk.hash() == b);
        assert!(
            got_a ^ got_b,
            "seed {seed}: exactly one sibling must commit (a={got_a}, b={got_b})"
        );
        let winner = if got_a { a } else { b };
        assert_eq!(
            s.entity_mining_target(Owner::Defender),
            winner,
            "seed {seed}: losing miner must re-mine on the winner"
        );
    }
    pass("5 (fork resolution, 200 seeds)", t0, Duration::from_secs(60));
}

/// Conflicting transaction pairs injected at different peers: exactly one
/// of each pair commits and the ledger conserves exactly.
#[test]
fn criterion_06_double_spend_exclusion() {
    let t0 = Instant::now();
    for seed in 0..500 {
        let mut cfg = ScenarioConfig::default();
        cfg.seed = seed;
        cfg.duration_ticks = 300;
        cfg.mining.tau_ticks = 150.0;
        cfg.bootstrap.chain_length = 10;
        cfg.bootstrap.safety_margin = 0;
        cfg.bootstrap.online_window = 4;
        cfg.bootstrap.attacker_window_share = Some(0.25);
        cfg.discoin.tx_interval = 23;
        cfg.attacker = AttackerStrategy::DoubleSpend {
            period: 60,
            value: 400,
        };
        let m = run_scenario(cfg).expect("scenario runs");
        let s = &m.summary;
        assert!(s.conflict_pairs >= 2, "seed {seed}: pairs {}", s.conflict_pairs);
        assert_eq!(s.conflict_pairs_both, 0, "seed {seed}: both halves committed");
        assert_eq!(s.conflict_pairs_none, 0, "seed {seed}: a pair went unresolved");
        assert!(
            s.ledger_conserved,
            "seed {seed}: conservation broken (total {}, minted {})",
            s.ledger_total, s.ledger_minted
        );
    }
    pass("6 (double-spend exclusion, 500 seeds)", t0, Duration::from_secs(120));
}

/// Mean time between failures of 99 steps with 1-step recovery: long-run
/// occupancy within half a percent of 0.99.
#[test]
fn criterion_07_churn_stationarity() {
    let t0 = Instant::now();
    let params = ChurnParams {
        fail: 1.0 / 99.0,
        recover: 1.0,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(7_000);
    let ticks = 100_000u64;
    let mut online = true;
    let mut occupancy = 0u64;
    for _ in 0..ticks {
        online = churn_step(online, &params, &mut rng);
        occupancy += online as u64;
    }
    let frac = occupancy as f64 / ticks as f64;
    assert!(
        (frac - 0.99).abs() <= 0.005,
        "occupancy {frac} outside 0.99 +/- 0.005"
    );
    pass("7 (churn stationarity)", t0, Duration::from_secs(60));
}

/// Once the withholding attacker holds a third of the voters, block and
/// join commits stop, and everything committed before the takeover stays
/// byte-identical at the honest replicas.
#[test]
fn criterion_08_takeover_semantics() {
    let t0 = Instant::now();
    for seed in [5u64, 17, 23] {
        let mut cfg = ScenarioConfig::default();
        cfg.seed = seed;
        cfg.duration_ticks = 900;
        cfg.mining.tau_ticks = 60.0;
        cfg.resources.attacker_fraction = 1.0;
        cfg.bootstrap.chain_length = 14;
        cfg.bootstrap.safety_margin = 0;
        cfg.bootstrap.online_window = 7;
        cfg.bootstrap.attacker_window_share = Some(2.0 / 7.0);
        cfg.attacker = AttackerStrategy::Withhold;
        let mut s = Scenario::new(cfg).unwrap();

        while !s.takeover_active() && s.tick() < 600 {
            s.step();
        }
        assert!(s.takeover_active(), "seed {seed}: takeover never happened");
        let crossed_at = s.tick();
        // Give in-flight traffic a moment, then snapshot the full logs.
        s.run_until(crossed_at + 50);
        let full_logs: Vec<String> = defender_logs_json(&s);
        let chain_len = s.source_state().chain.len();

        s.run_until(900);
        assert_eq!(
            s.source_state().chain.len(),
            chain_len,
            "seed {seed}: a block committed during the takeover"
        );
        assert_eq!(
            defender_logs_json(&s),
            full_logs,
            "seed {seed}: a pre-takeover prefix changed"
        );
        s.source_state().chain.validate().unwrap();
    }
    pass("8 (takeover semantics)", t0, Duration::from_secs(60));
}

fn defender_logs_json(s: &Scenario) -> Vec<String> {
    // Serialized (operation, timestamp, certificate) entries so the
    // comparison is byte-exact, not just digest-deep.
    s.defender_logs_serialized()
}

/// Migration arithmetic on a 100-block chain: 94 trusted voters, 10 online,
/// and the 6 margin blocks re-committed through agreement in height order.
#[test]
fn criterion_09_bootstrap() {
    let t0 = Instant::now();
    let mut cfg = ScenarioConfig::default();
    cfg.seed = 909;
    cfg.duration_ticks = 300;
    cfg.mining.enabled = false;
    cfg.bootstrap.chain_length = 100;
    cfg.bootstrap.safety_margin = 6;
    cfg.bootstrap.online_window = 10;

    let mut s = Scenario::new(cfg.clone()).unwrap();
    assert_eq!(s.initial_state().chain.len(), 94);
    assert_eq!(s.initial_state().chain.voters().len(), 94);
    assert_eq!(s.initial_state().online_voters.len(), 10);

    s.run_until(300);
    let state = s.source_state().clone();
    let pre = s.pre_chain().clone();
    assert_eq!(state.chain, pre, "blocks 95..=100 re-committed in order");
    state.chain.validate().unwrap();
    assert_eq!(state.log.len(), 6);
    for (i, entry) in state.log.iter().enumerate() {
        match &entry.op {
            peercensus::agreement::CaOperation::Block(b) => {
                assert_eq!(b, pre.at_height(95 + i as u64).unwrap());
            }
            other => panic!("unexpected op {}", other.kind()),
        }
    }

    // Deterministic end to end.
    let d1 = run_scenario(cfg.clone()).unwrap().summary.state_digest;
    let d2 = run_scenario(cfg).unwrap().summary.state_digest;
    assert_eq!(d1, d2);
    pass("9 (bootstrap)", t0, Duration::from_secs(10));
}

/// Twenty invocations of the binary with the same config and seed produce
/// byte-identical outputs.
#[test]
fn criterion_10_byte_determinism() {
    let t0 = Instant::now();
    let exe = env!("CARGO_BIN_EXE_peercensus");
    let config = repo_config("small_scenario.toml");
    let mut reference: Option<(Vec<u8>, Vec<u8>)> = None;
    for trial in 0..20 {
        let out = tempfile::tempdir().unwrap();
        let status = std::process::Command::new(exe)
            .args(["simulate", "--config"])
            .arg(&config)
            .args(["--seed", "7", "--duration", "400", "--out"])
            .arg(out.path())
            .status()
            .expect("binary runs");
        assert!(status.success(), "trial {trial}: nonzero exit");
        let csv = std::fs::read(out.path().join("metrics.csv")).unwrap();
        let summary = std::fs::read(out.path().join("summary.json")).unwrap();
        match &reference {
            None => reference = Some((csv, summary)),
            Some((c0, s0)) => {
                assert_eq!(&csv, c0, "trial {trial}: metrics.csv differs");
                assert_eq!(&summary, s0, "trial {trial}: summary.json differs");
            }
        }
    }
    pass("10 (byte determinism, 20 trials)", t0, Duration::from_secs(60));
}
