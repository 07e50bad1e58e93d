//! Run output: the per-tick ratio traces and the end-of-run summary.

use serde::{Deserialize, Serialize};
use std::io::Write;

/// One sampled row of the time series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub tick: u64,
    /// Attacker-to-defender ratio of online resources.
    pub phi_r: f64,
    /// Attacker-to-defender ratio of online voters.
    pub phi_i: f64,
    /// Attacker-to-defender ratio of blocks in the committed chain.
    pub phi_b: f64,
    /// phi_i < 1/2, equivalently attacker voters < a third of all voters.
    pub secure: bool,
    pub chain_length: u64,
    pub committed_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsSummary {
    pub seed: u64,
    pub duration_ticks: u64,
    pub final_chain_length: u64,
    pub committed_ops: u64,
    pub attacker_blocks: u64,
    pub defender_blocks: u64,
    pub view_changes: u64,
    /// Samples where the secure-state predicate failed.
    pub secure_violations: u64,
    /// Mean fraction of resources online across samples.
    pub mean_resource_online: f64,
    /// Mean fraction of the voter pool online across samples.
    pub mean_voters_online: f64,
    pub commit_latency_mean: f64,
    pub commit_latency_max: u64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub messages_dropped_offline: u64,
    pub ledger_total: u64,
    pub ledger_minted: u64,
    pub ledger_conserved: bool,
    pub applied_transactions: u64,
    /// Conflicting transaction pairs injected / with both halves committed /
    /// with neither half committed.
    pub conflict_pairs: u64,
    pub conflict_pairs_both: u64,
    pub conflict_pairs_none: u64,
    /// Honest replicas' committed logs were pairwise prefix-comparable at
    /// the end of the run.
    pub honest_logs_prefix_consistent: bool,
    /// Hex digest over the final committed state, for byte-determinism
    /// comparisons across runs.
    pub state_digest: String,
}

/// The simulator's output: a sampled time series plus the summary record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub rows: Vec<MetricsRow>,
    pub summary: MetricsSummary,
}

fn fmt_ratio(x: f64) -> String {
    if x.is_infinite() {
        "inf".to_string()
    } else {
        format!("{x:.6}")
    }
}

impl Metrics {
    /// The time series as CSV: tick, phi_R, phi_I, phi_B, secure,
    /// chain_length, committed_ops.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tick,phi_R,phi_I,phi_B,secure,chain_length,committed_ops")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.tick,
                fmt_ratio(r.phi_r),
                fmt_ratio(r.phi_i),
                fmt_ratio(r.phi_b),
                r.secure as u8,
                r.chain_length,
                r.committed_ops
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_is_stable_and_handles_infinities() {
        let m = Metrics {
            rows: vec![MetricsRow {
                tick: 1,
                phi_r: 0.25,
                phi_i: f64::INFINITY,
                phi_b: 0.0,
                secure: true,
                chain_length: 10,
                committed_ops: 3,
            }],
            summary: MetricsSummary::default(),
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "tick,phi_R,phi_I,phi_B,secure,chain_length,committed_ops\n\
             1,0.250000,inf,0.000000,1,10,3\n"
        );
    }
}
