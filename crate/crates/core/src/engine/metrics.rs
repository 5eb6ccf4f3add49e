use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One draft/verify cycle (or one decoding step in vanilla mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    pub nodes_verified: usize,
    /// Tokens emitted this cycle, bonus token included.
    pub accepted_length: usize,
    /// Depth of the accepted draft path before any truncation.
    pub accepted_depth: usize,
    pub target_calls: usize,
    pub drafter_calls: usize,
    /// Seconds.
    pub wall_time: f64,
}

/// Totals of one generation session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub prompt_id: usize,
    pub new_tokens: usize,
    pub cycles: usize,
    pub target_calls: usize,
    pub drafter_calls: usize,
    pub wall_time: f64,
}

/// Average tokens emitted per verification cycle.
pub fn compute_tau(metrics: &[CycleMetrics]) -> Result<f64> {
    if metrics.is_empty() {
        return Err(Error::Parameter("no cycles to average".into()));
    }
    let emitted: usize = metrics.iter().map(|m| m.accepted_length).sum();
    Ok(emitted as f64 / metrics.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    /// Vanilla wall time over speculative wall time.
    pub wall: f64,
    /// Vanilla target calls over speculative target calls.
    pub call_ratio: f64,
}

/// Speedup of `spec` over `vanilla`; both must cover the same prompts in the
/// same order with the same token counts.
pub fn compute_speedup(spec: &[SessionMetrics], vanilla: &[SessionMetrics]) -> Result<Speedup> {
    let ids = |s: &[SessionMetrics]| s.iter().map(|m| (m.prompt_id, m.new_tokens)).collect::<Vec<_>>();
    if spec.is_empty() || ids(spec) != ids(vanilla) {
        return Err(Error::Parameter(
            "speculative and vanilla runs cover different prompts or token budgets".into(),
        ));
    }
    let wall_s: f64 = spec.iter().map(|m| m.wall_time).sum();
    let wall_v: f64 = vanilla.iter().map(|m| m.wall_time).sum();
    let calls_s: usize = spec.iter().map(|m| m.target_calls).sum();
    let calls_v: usize = vanilla.iter().map(|m| m.target_calls).sum();
    Ok(Speedup {
        wall: if wall_s > 0.0 { wall_v / wall_s } else { f64::NAN },
        call_ratio: calls_v as f64 / calls_s as f64,
    })
}

/// For each depth `i` in `1..=depth`, the share of cycles that accepted at
/// least `i` draft tokens among those that accepted at least `i − 1`.
/// `None` where no cycle reached depth `i − 1`.
pub fn acceptance_rate_by_depth(metrics: &[CycleMetrics], depth: usize) -> Vec<Option<f64>> {
    (1..=depth)
        .map(|i| {
            let reached = metrics.iter().filter(|m| m.accepted_depth >= i - 1).count();
            let passed = metrics.iter().filter(|m| m.accepted_depth >= i).count();
            (reached > 0).then(|| passed as f64 / reached as f64)
        })
        .collect()
}

/// A line of the JSON-lines metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Cycle {
        mode: String,
        prompt_id: usize,
        #[serde(flatten)]
        metrics: CycleMetrics,
    },
    Summary {
        mode: String,
        prompts: usize,
        cycles: usize,
        new_tokens: usize,
        tau: f64,
        target_calls: usize,
        drafter_calls: usize,
        call_ratio: Option<f64>,
        wall_speedup: Option<f64>,
        wall_time: f64,
        acceptance_by_depth: Vec<Option<f64>>,
    },
}

pub fn write_records<W: Write>(out: &mut W, records: &[Record]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.into()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Format {
            offset: i as u64,
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(len: usize, depth: usize) -> CycleMetrics {
        CycleMetrics {
            cycle: 0,
            nodes_verified: 4,
            accepted_length: len,
            accepted_depth: depth,
            target_calls: 1,
            drafter_calls: 1,
            wall_time: 0.0,
        }
    }

    #[test]
    fn tau_examples() {
        assert_eq!(compute_tau(&[cycle(5, 4)]).unwrap(), 5.0);
        assert_eq!(compute_tau(&[cycle(1, 0), cycle(1, 0), cycle(1, 0)]).unwrap(), 1.0);
        assert!(matches!(compute_tau(&[]), Err(Error::Parameter(_))));
    }

    fn session(id: usize, calls: usize, wall: f64) -> SessionMetrics {
        SessionMetrics {
            prompt_id: id,
            new_tokens: 8,
            cycles: calls - 1,
            target_calls: calls,
            drafter_calls: 0,
            wall_time: wall,
        }
    }

    #[test]
    fn speedup_of_identical_runs_is_one() {
        let a = [session(0, 9, 0.5), session(1, 9, 0.25)];
        let s = compute_speedup(&a, &a).unwrap();
        assert_eq!((s.wall, s.call_ratio), (1.0, 1.0));
    }

    #[test]
    fn call_ratio_and_mismatch() {
        let v = [session(0, 9, 1.0)];
        let s = compute_speedup(&[session(0, 3, 0.5)], &v).unwrap();
        assert_eq!(s.call_ratio, 3.0);
        assert!(compute_speedup(&[session(1, 3, 0.5)], &v).is_err());
    }

    #[test]
    fn conditional_acceptance_rates() {
        let m = [cycle(3, 2), cycle(2, 1), cycle(1, 0), cycle(3, 2)];
        let r = acceptance_rate_by_depth(&m, 3);
        assert_eq!(r, vec![Some(0.75), Some(2.0 / 3.0), Some(0.0)]);
        assert_eq!(acceptance_rate_by_depth(&[cycle(1, 0)], 2), vec![Some(0.0), None]);
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![Record::Cycle {
            mode: "cascade_tree".into(),
            prompt_id: 3,
            metrics: cycle(2, 1),
        }];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"record\":\"cycle\""));
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
    }
}
