//! Unbiased Pass@k and Mean@k estimation over graded rollout logs.
//!
//! Each problem contributes `(n, c)`: `n` graded trials, `c` of them
//! correct. Pass@k for one problem is `1 − C(n−c, k)/C(n, k)`, the
//! probability that a uniformly random size-`k` subset of the trials
//! contains at least one correct one. No binomial coefficients are ever
//! materialized: when the falling factorials fit exactly in an `f64`
//! mantissa the quotient is evaluated as `(A − B)/A` (exact integer
//! arithmetic, so `Pass@1 == c/n` bit-for-bit), and otherwise as an
//! incremental product of per-step ratios, which stays stable for `n` in
//! the tens of thousands.

use crate::error::{Error, Result};

/// Graded trial counts for one problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutRecord {
    problem_id: String,
    n: u64,
    c: u64,
}

impl RolloutRecord {
    pub fn new(problem_id: impl Into<String>, n: u64, c: u64) -> Result<Self> {
        let problem_id = problem_id.into();
        if n == 0 {
            return Err(Error::Input(format!(
                "problem {problem_id}: trial count must be at least 1"
            )));
        }
        if c > n {
            return Err(Error::Input(format!(
                "problem {problem_id}: {c} correct out of {n} trials is impossible"
            )));
        }
        Ok(RolloutRecord { problem_id, n, c })
    }

    pub fn problem_id(&self) -> &str {
        &self.problem_id
    }

    pub fn trials(&self) -> u64 {
        self.n
    }

    pub fn correct(&self) -> u64 {
        self.c
    }
}

/// Largest integer magnitude `f64` represents exactly.
const EXACT_F64_LIMIT: f64 = 9_007_199_254_740_992.0; // 2^53

/// Unbiased single-problem estimator `1 − C(n−c, k)/C(n, k)`.
pub fn pass_at_k_single(n: u64, c: u64, k: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("trial count must be at least 1".into()));
    }
    if c > n {
        return Err(Error::Input(format!(
            "{c} correct out of {n} trials is impossible"
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Input(format!("k={k} out of range [1, {n}]")));
    }
    // Fewer incorrect trials than slots: every subset contains a correct one.
    if n - c < k {
        return Ok(1.0);
    }
    // Falling factorials A = n·(n−1)…(n−k+1) and B likewise from n−c.
    // While both stay below 2^53 every product step is exact and the final
    // quotient is correctly rounded from the true value.
    let mut a = 1.0f64;
    let mut b = 1.0f64;
    let mut exact = true;
    for j in 0..k {
        a *= (n - j) as f64;
        b *= (n - c - j) as f64;
        if a > EXACT_F64_LIMIT {
            exact = false;
            break;
        }
    }
    if exact {
        return Ok((a - b) / a);
    }
    let mut ratio = 1.0f64;
    for j in 0..k {
        ratio *= (n - c - j) as f64 / (n - j) as f64;
    }
    Ok(1.0 - ratio)
}

fn kahan_mean(values: impl Iterator<Item = f64>, len: usize) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum / len as f64
}

/// Mean of the single-problem estimator over a record set. Every record
/// must have at least `k` trials; offenders are listed in the error.
pub fn pass_at_k_dataset(records: &[RolloutRecord], k: u64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("pass@k undefined for an empty record set".into()));
    }
    let offenders: Vec<&str> = records
        .iter()
        .filter(|r| r.n < k)
        .map(|r| r.problem_id.as_str())
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Input(format!(
            "k={k} exceeds the trial count of: {}",
            offenders.join(", ")
        )));
    }
    let estimates: Result<Vec<f64>> = records
        .iter()
        .map(|r| pass_at_k_single(r.n, r.c, k))
        .collect();
    Ok(kahan_mean(estimates?.into_iter(), records.len()))
}

/// Average per-trial accuracy, `mean(c_i / n_i)`.
pub fn mean_at_k(records: &[RolloutRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("mean@k undefined for an empty record set".into()));
    }
    Ok(kahan_mean(
        records.iter().map(|r| r.c as f64 / r.n as f64),
        records.len(),
    ))
}

/// Dataset Pass@k evaluated at several `k` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PassKCurve {
    pub k_values: Vec<u64>,
    pub estimates: Vec<f64>,
    pub n_problems: usize,
}

/// Evaluate the dataset estimator at each requested `k` (sorted,
/// deduplicated).
pub fn pass_k_curve(records: &[RolloutRecord], ks: &[u64]) -> Result<PassKCurve> {
    if ks.is_empty() {
        return Err(Error::Input("no k values requested".into()));
    }
    let mut k_values: Vec<u64> = ks.to_vec();
    k_values.sort_unstable();
    k_values.dedup();
    if k_values[0] == 0 {
        return Err(Error::Input("k values must be positive".into()));
    }
    let estimates = k_values
        .iter()
        .map(|&k| pass_at_k_dataset(records, k))
        .collect::<Result<Vec<f64>>>()?;
    Ok(PassKCurve {
        k_values,
        estimates,
        n_problems: records.len(),
    })
}

// ─────────────────────────────────────────────────────────────────────────────
// Rollout log ingestion (io feature)
// ─────────────────────────────────────────────────────────────────────────────

#[cfg(feature = "io")]
mod ingest {
    use super::*;
    use serde::Deserialize;
    use std::collections::BTreeMap;
    use std::io::BufRead;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum LogLine {
        Counts { problem_id: String, n: u64, c: u64 },
        Trials { problem_id: String, trials: Vec<bool> },
    }

    /// Parse a JSON-lines rollout log.
    ///
    /// Two record shapes are accepted per line:
    /// `{"problem_id": …, "n": …, "c": …}` or the verbose
    /// `{"problem_id": …, "trials": [true, false, …]}`, which is reduced to
    /// counts on the spot. Records sharing a `problem_id` are merged by
    /// summing `n` and `c` (sharded evaluation runs append to one log), and
    /// the result is sorted by problem id.
    pub fn read_rollout_log(reader: impl BufRead) -> Result<Vec<RolloutRecord>> {
        let mut merged: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Input(format!("line {lineno}: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("line {lineno}: malformed record: {e}")))?;
            let (id, n, c) = match parsed {
                LogLine::Counts { problem_id, n, c } => (problem_id, n, c),
                LogLine::Trials { problem_id, trials } => {
                    let n = trials.len() as u64;
                    let c = trials.iter().filter(|&&t| t).count() as u64;
                    (problem_id, n, c)
                }
            };
            if n == 0 {
                return Err(Error::Input(format!(
                    "line {lineno}: problem {id} has no trials"
                )));
            }
            if c > n {
                return Err(Error::Input(format!(
                    "line {lineno}: problem {id} reports {c} correct out of {n} trials"
                )));
            }
            let entry = merged.entry(id).or_insert((0, 0));
            entry.0 += n;
            entry.1 += c;
        }
        if merged.is_empty() {
            return Err(Error::Input("rollout log contains no records".into()));
        }
        merged
            .into_iter()
            .map(|(id, (n, c))| RolloutRecord::new(id, n, c))
            .collect()
    }
}

#[cfg(feature = "io")]
pub use ingest::read_rollout_log;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive reference: fraction of k-subsets of n trials containing at
    /// least one of the first c (correct) trials.
    fn exhaustive_pass_at_k(n: u64, c: u64, k: u64) -> f64 {
        assert!(n <= 20);
        let correct_mask: u32 = if c == 0 { 0 } else { (1u32 << c) - 1 };
        let mut hits = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1u32 << n) {
            if u64::from(mask.count_ones()) == k {
                total += 1;
                if mask & correct_mask != 0 {
                    hits += 1;
                }
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn spot_values_are_exact() {
        assert_eq!(pass_at_k_single(3, 1, 2).unwrap(), 2.0 / 3.0);
        for (n, c) in [(3u64, 1u64), (7, 3), (320, 17), (10_000, 4_999)] {
            assert_eq!(pass_at_k_single(n, c, 1).unwrap(), c as f64 / n as f64);
        }
    }

    #[test]
    fn degenerate_counts() {
        for k in 1..=5 {
            assert_eq!(pass_at_k_single(5, 0, k).unwrap(), 0.0);
            assert_eq!(pass_at_k_single(5, 5, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn matches_exhaustive_enumeration_small_n() {
        for n in 1..=8u64 {
            for c in 0..=n {
                for k in 1..=n {
                    let est = pass_at_k_single(n, c, k).unwrap();
                    let exact = exhaustive_pass_at_k(n, c, k);
                    assert!(
                        (est - exact).abs() <= 1e-12,
                        "n={n} c={c} k={k}: {est} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn input_validation() {
        assert!(matches!(pass_at_k_single(0, 0, 1), Err(Error::Input(_))));
        assert!(matches!(pass_at_k_single(3, 4, 1), Err(Error::Input(_))));
        assert!(matches!(pass_at_k_single(3, 1, 0), Err(Error::Input(_))));
        assert!(matches!(pass_at_k_single(3, 1, 4), Err(Error::Input(_))));
        assert!(RolloutRecord::new("p", 0, 0).is_err());
        assert!(RolloutRecord::new("p", 2, 3).is_err());
    }

    #[test]
    fn dataset_mean_matches_hand_value() {
        let records = vec![
            RolloutRecord::new("a", 3, 1).unwrap(),
            RolloutRecord::new("b", 3, 3).unwrap(),
        ];
        let got = pass_at_k_dataset(&records, 2).unwrap();
        assert!((got - 5.0 / 6.0).abs() < 1e-12);
        assert!(matches!(pass_at_k_dataset(&[], 1), Err(Error::Input(_))));
        let hopeless = vec![
            RolloutRecord::new("a", 4, 0).unwrap(),
            RolloutRecord::new("b", 6, 0).unwrap(),
        ];
        assert_eq!(pass_at_k_dataset(&hopeless, 3).unwrap(), 0.0);
        // pass@1 and mean@1 are the same quantity, bit for bit
        assert_eq!(
            pass_at_k_dataset(&records, 1).unwrap(),
            mean_at_k(&records).unwrap()
        );
    }

    #[test]
    fn dataset_rejects_oversized_k_listing_offenders() {
        let records = vec![
            RolloutRecord::new("small", 2, 1).unwrap(),
            RolloutRecord::new("large", 8, 4).unwrap(),
        ];
        let err = pass_at_k_dataset(&records, 4).unwrap_err();
        assert!(err.to_string().contains("small"));
        assert!(!err.to_string().contains("large"));
    }

    #[test]
    fn mean_at_k_examples() {
        let one = vec![RolloutRecord::new("a", 4, 2).unwrap()];
        assert_eq!(mean_at_k(&one).unwrap(), 0.5);
        let sym = vec![
            RolloutRecord::new("a", 4, 4).unwrap(),
            RolloutRecord::new("b", 4, 0).unwrap(),
        ];
        assert_eq!(mean_at_k(&sym).unwrap(), 0.5);
        let thirds = vec![
            RolloutRecord::new("a", 3, 1).unwrap(),
            RolloutRecord::new("b", 3, 2).unwrap(),
        ];
        assert!((mean_at_k(&thirds).unwrap() - 0.5).abs() < 1e-15);
        assert!(mean_at_k(&[]).is_err());
    }

    #[test]
    fn curve_is_sorted_and_deduplicated() {
        let records = vec![RolloutRecord::new("a", 3, 1).unwrap()];
        let curve = pass_k_curve(&records, &[3, 1, 2, 1]).unwrap();
        assert_eq!(curve.k_values, vec![1, 2, 3]);
        assert!((curve.estimates[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((curve.estimates[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(curve.estimates[2], 1.0);
        assert_eq!(curve.n_problems, 1);
    }

    #[test]
    fn large_n_stays_stable() {
        // No overflow or precision collapse at the scales the estimator
        // is used for.
        let mut prev = 0.0;
        for k in [1u64, 10, 100, 1_000, 9_999] {
            let v = pass_at_k_single(10_000, 100, k).unwrap();
            assert!(v.is_finite() && (0.0..=1.0).contains(&v), "k={k}: {v}");
            assert!(v >= prev - 1e-12, "k={k} broke monotonicity");
            prev = v;
        }
        assert_eq!(pass_at_k_single(10_000, 100, 9_999).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn monotone_in_k_and_c(n in 1u64..200, c in 0u64..200, k in 1u64..200) {
            let c = c.min(n);
            let k = k.min(n);
            let base = pass_at_k_single(n, c, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            if k < n {
                let more_draws = pass_at_k_single(n, c, k + 1).unwrap();
                prop_assert!(more_draws >= base - 1e-12);
            }
            if c < n {
                let more_correct = pass_at_k_single(n, c + 1, k).unwrap();
                prop_assert!(more_correct >= base - 1e-12);
            }
            // more trials at the same correct count dilute the estimate
            let diluted = pass_at_k_single(n + 1, c, k).unwrap();
            prop_assert!(diluted <= base + 1e-12);
        }
    }

    #[cfg(feature = "io")]
    mod ingest_tests {
        use super::super::*;
        use std::io::Cursor;

        #[test]
        fn parses_both_record_shapes() {
            let log = r#"{"problem_id": "p1", "n": 3, "c": 1}
{"problem_id": "p2", "trials": [true, false, true, false]}
"#;
            let records = read_rollout_log(Cursor::new(log)).unwrap();
            assert_eq!(records.len(), 2);
            assert_eq!(records[0].problem_id(), "p1");
            assert_eq!((records[1].trials(), records[1].correct()), (4, 2));
        }

        #[test]
        fn merges_duplicate_problem_ids() {
            let log = r#"{"problem_id": "p", "n": 3, "c": 1}
{"problem_id": "p", "n": 5, "c": 2}
"#;
            let records = read_rollout_log(Cursor::new(log)).unwrap();
            assert_eq!(records.len(), 1);
            assert_eq!((records[0].trials(), records[0].correct()), (8, 3));
        }

        #[test]
        fn malformed_line_is_reported_with_its_number() {
            let log = "{\"problem_id\": \"p\", \"n\": 3, \"c\": 1}\nnot json\n";
            let err = read_rollout_log(Cursor::new(log)).unwrap_err();
            assert!(err.to_string().contains("line 2"), "{err}");
        }

        #[test]
        fn impossible_counts_are_rejected() {
            let log = "{\"problem_id\": \"p\", \"n\": 2, \"c\": 5}\n";
            assert!(read_rollout_log(Cursor::new(log)).is_err());
        }

        #[test]
        fn empty_log_is_an_error() {
            assert!(read_rollout_log(Cursor::new("")).is_err());
            assert!(read_rollout_log(Cursor::new("\n\n")).is_err());
        }
    }
}
