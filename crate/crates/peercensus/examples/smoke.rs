use peercensus::sim::{
    config::ScriptConfig, run_scenario, AttackerStrategy, ChurnParams, Scenario, ScenarioConfig,
};
use std::time::Instant;

fn base(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.seed = seed;
    cfg
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "honest".into());
    match which.as_str() {
        "honest" => {
            let mut cfg = base(42);
            cfg.duration_ticks = 1500;
            cfg.mining.tau_ticks = 100.0;
            cfg.discoin.tx_interval = 37;
            let m = run_scenario(cfg).unwrap();
            println!("{}", m.summary_json());
        }
        "fork" => {
            let t0 = Instant::now();
            for seed in 0..200 {
                let mut cfg = base(seed);
                cfg.duration_ticks = 120;
                cfg.mining.tau_ticks = 100_000.0; // only the scripted fork mines
                cfg.bootstrap.chain_length = 16;
                cfg.bootstrap.safety_margin = 2;
                cfg.bootstrap.online_window = 7;
                cfg.script = ScriptConfig { fork_at: Some(20) };
                let mut s = Scenario::new(cfg).unwrap();
                s.run_until(120);
                let forks = s.script_forks().to_vec();
                assert_eq!(forks.len(), 1, "seed {seed}");
                let (a, b) = forks[0];
                let chain = &s.source_state().chain;
                let got_a = chain.blocks().iter().any(|blk| blk.hash() == a);
                let got_b = chain.blocks().iter().any(|blk| blk.hash() == b);
                assert!(got_a ^ got_b, "seed {seed}: exactly one sibling commits");
                let winner = if got_a { a } else { b };
                // the losing miner re-targets the winner
                let target = s.entity_mining_target(peercensus::sim::Owner::Defender);
                assert_eq!(target, winner, "seed {seed}: loser re-mines on winner");
            }
            println!("fork: 200 seeds in {:?}", t0.elapsed());
        }
        "takeover" => {
            let mut cfg = base(5);
            cfg.duration_ticks = 700;
            cfg.mining.tau_ticks = 60.0;
            cfg.resources.attacker_fraction = 1.0;
            cfg.bootstrap.chain_length = 14;
            cfg.bootstrap.safety_margin = 0;
            cfg.bootstrap.online_window = 7;
            cfg.bootstrap.attacker_window_share = Some(2.0 / 7.0);
            cfg.attacker = AttackerStrategy::Withhold;
            let mut s = Scenario::new(cfg).unwrap();
            // Phase 1: run until the attacker crosses a third.
            while !s.takeover_active() && s.tick() < 600 {
                s.step();
            }
            let crossed_at = s.tick();
            let snapshot = s.defender_log_digests();
            let chain_len = s.source_state().chain.len();
            s.run_until(700);
            let after = s.defender_log_digests();
            println!(
                "crossed at {crossed_at}, chain {chain_len} -> {}, logs equal: {}",
                s.source_state().chain.len(),
                snapshot == after
            );
        }
        "byz" => {
            let t0 = Instant::now();
            let mut bad = 0;
            for seed in 0..30 {
                let mut cfg = base(seed);
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
                let m = run_scenario(cfg).unwrap();
                if !m.summary.honest_logs_prefix_consistent {
                    bad += 1;
                    println!("seed {seed}: VIOLATION");
                }
            }
            println!("byz: 30 seeds, {bad} violations, {:?}", t0.elapsed());
        }
        "spend15" => {
            let seed = std::env::args()
                .nth(2)
                .and_then(|s| s.parse().ok())
                .unwrap_or(15);
            let mut cfg = base(seed);
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
            let mut s = Scenario::new(cfg).unwrap();
            s.run_until(300);
            let pairs = s.conflict_pairs().to_vec();
            println!("pairs: {}", pairs.len());
            for app in s.defender_apps() {
                println!(
                    "app {} log_len={} now={:?} rewards={}",
                    app.id(),
                    app.log.len(),
                    app.now(),
                    app.rewards_done()
                );
                for (i, (d1, d2)) in pairs.iter().enumerate() {
                    let c1 = app.log.iter().any(|e| e.tx.digest() == *d1);
                    let c2 = app.log.iter().any(|e| e.tx.digest() == *d2);
                    println!("  pair {i}: c1={c1} c2={c2}");
                }
            }
            println!("chain len {}", s.source_state().chain.len());
            for app in s.defender_apps() {
                println!("app {} debug: {}", app.id(), app.debug_round_state());
            }
        }
        "spend" => {
            let t0 = Instant::now();
            for seed in 0..30 {
                let mut cfg = base(seed);
                cfg.duration_ticks = 300;
                cfg.mining.enabled = false;
                cfg.bootstrap.chain_length = 10;
                cfg.bootstrap.safety_margin = 0;
                cfg.bootstrap.online_window = 4;
                cfg.bootstrap.attacker_window_share = Some(0.25);
                cfg.discoin.tx_interval = 23;
                cfg.attacker = AttackerStrategy::DoubleSpend {
                    period: 60,
                    value: 400,
                };
                let m = run_scenario(cfg).unwrap();
                let s = &m.summary;
                assert!(s.conflict_pairs > 0, "seed {seed}: no pairs injected");
                assert_eq!(s.conflict_pairs_both, 0, "seed {seed}");
                assert_eq!(s.conflict_pairs_none, 0, "seed {seed}");
                assert!(s.ledger_conserved, "seed {seed}");
            }
            println!("spend: 30 seeds ok, {:?}", t0.elapsed());
        }
        other => panic!("unknown mode {other}"),
    }
}
