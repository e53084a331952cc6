//! Word and character error rates via unit-cost edit distance with an
//! S/I/D backtrace.

use crate::error::{CoreError, Result};

/// Edit operation counts from one optimal alignment plus the resulting rate.
/// `rate = (substitutions + insertions + deletions) / ref_len` and may
/// exceed 1 when the hypothesis is much longer than the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl ErrorReport {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn rate(&self) -> f64 {
        self.distance() as f64 / self.ref_len as f64
    }
}

/// Minimal unit-cost edit distance between token slices with one optimal
/// decomposition recovered by backtrace. Ties prefer substitution, then
/// insertion, then deletion; the total distance is unaffected.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> ErrorReport {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[i][j] = (dp[i - 1][j - 1] + sub_cost)
                .min(dp[i][j - 1] + 1)
                .min(dp[i - 1][j] + 1);
        }
    }
    // Backtrace with the fixed tie-break order.
    let (mut i, mut j) = (n, m);
    let (mut subs, mut ins, mut dels) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[i][j] == dp[i - 1][j - 1] + sub_cost {
                subs += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dp[i][j] == dp[i][j - 1] + 1 {
            ins += 1;
            j -= 1;
            continue;
        }
        dels += 1;
        i -= 1;
    }
    debug_assert_eq!(subs + ins + dels, dp[n][m]);
    ErrorReport {
        substitutions: subs,
        insertions: ins,
        deletions: dels,
        ref_len: n,
    }
}

/// Word error rate over whitespace-split tokens. Expects normalized text
/// (uppercase, single spaces, padding stripped); errors on an empty
/// reference where the rate is undefined.
pub fn wer(reference: &str, hypothesis: &str) -> Result<ErrorReport> {
    let ref_words: Vec<&str> = reference.split_whitespace().collect();
    if ref_words.is_empty() {
        return Err(CoreError::UndefinedRate(
            "empty reference in WER".into(),
        ));
    }
    let hyp_words: Vec<&str> = hypothesis.split_whitespace().collect();
    Ok(edit_distance(&ref_words, &hyp_words))
}

/// Character error rate over all characters including spaces.
pub fn cer(reference: &str, hypothesis: &str) -> Result<ErrorReport> {
    let ref_chars: Vec<char> = reference.chars().collect();
    if ref_chars.is_empty() {
        return Err(CoreError::UndefinedRate(
            "empty reference in CER".into(),
        ));
    }
    let hyp_chars: Vec<char> = hypothesis.chars().collect();
    Ok(edit_distance(&ref_chars, &hyp_chars))
}

/// Corpus-level pooling: sums of edits over sums of reference lengths.
#[derive(Debug, Clone, Copy, Default)]
pub struct CorpusAccumulator {
    pub edits: usize,
    pub ref_len: usize,
}

impl CorpusAccumulator {
    pub fn add(&mut self, report: &ErrorReport) {
        self.edits += report.distance();
        self.ref_len += report.ref_len;
    }

    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            return 0.0;
        }
        self.edits as f64 / self.ref_len as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Exhaustive alignment enumerator, independent of the DP: recursively
    /// try substitute/insert/delete with no memoization.
    fn brute_force_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        let sub = brute_force_distance(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
        let del = brute_force_distance(&r[1..], h) + 1;
        let ins = brute_force_distance(r, &h[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn identical_sequences_have_zero_distance() {
        let r = edit_distance(b"HELLO", b"HELLO");
        assert_eq!(r.distance(), 0);
        assert_eq!(r.rate(), 0.0);
    }

    #[test]
    fn kitten_sitting_is_three() {
        let r = edit_distance(b"kitten", b"sitting");
        assert_eq!(r.distance(), 3);
        assert_eq!(brute_force_distance(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn empty_reference_counts_insertions() {
        let r = edit_distance::<u8>(&[], b"abcd");
        assert_eq!(r.insertions, 4);
        assert_eq!(r.distance(), 4);
    }

    #[test]
    fn wer_reference_cases() {
        let r = wer("THE CAT SAT", "THE CAT").unwrap();
        assert_eq!(r.deletions, 1);
        assert_abs_diff_eq!(r.rate(), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(wer("A B C", "A B C").unwrap().rate(), 0.0);
        let all_del = wer("ONE TWO", "").unwrap();
        assert_eq!(all_del.deletions, 2);
        assert_abs_diff_eq!(all_del.rate(), 1.0, epsilon = 1e-12);
        assert!(wer("", "SOMETHING").is_err());
    }

    #[test]
    fn cer_reference_cases() {
        assert_eq!(cer("AB", "AB").unwrap().rate(), 0.0);
        let r = cer("AB", "AC").unwrap();
        assert_eq!(r.substitutions, 1);
        assert_abs_diff_eq!(r.rate(), 0.5, epsilon = 1e-12);
        assert!(cer("", "X").is_err());
    }

    #[test]
    fn rates_can_exceed_one() {
        let r = wer("A", "B C D").unwrap();
        assert!(r.rate() > 1.0);
    }

    #[test]
    fn matches_brute_force_up_to_len_six() {
        // All pairs over a binary alphabet with lengths <= 4 plus random
        // ternary cases up to length 6.
        for rl in 0..=4usize {
            for hl in 0..=4usize {
                for rbits in 0..(1 << rl) {
                    for hbits in 0..(1 << hl) {
                        let r: Vec<u8> = (0..rl).map(|i| (rbits >> i) & 1).collect();
                        let h: Vec<u8> = (0..hl).map(|i| (hbits >> i) & 1).collect();
                        assert_eq!(
                            edit_distance(&r, &h).distance(),
                            brute_force_distance(&r, &h)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_accumulator_pools_edits() {
        let mut acc = CorpusAccumulator::default();
        acc.add(&wer("A B", "A C").unwrap());
        acc.add(&wer("X Y Z", "X Y Z").unwrap());
        assert_abs_diff_eq!(acc.rate(), 1.0 / 5.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(
            a in proptest::collection::vec(0u8..3, 0..6),
            b in proptest::collection::vec(0u8..3, 0..6),
        ) {
            prop_assert_eq!(
                edit_distance(&a, &b).distance(),
                edit_distance(&b, &a).distance()
            );
        }

        #[test]
        fn distance_satisfies_triangle_inequality(
            a in proptest::collection::vec(0u8..3, 0..6),
            b in proptest::collection::vec(0u8..3, 0..6),
            c in proptest::collection::vec(0u8..3, 0..6),
        ) {
            let ab = edit_distance(&a, &b).distance();
            let bc = edit_distance(&b, &c).distance();
            let ac = edit_distance(&a, &c).distance();
            prop_assert!(ac <= ab + bc);
        }

        #[test]
        fn decomposition_sums_to_distance(
            a in proptest::collection::vec(0u8..3, 0..6),
            b in proptest::collection::vec(0u8..3, 0..6),
        ) {
            let r = edit_distance(&a, &b);
            prop_assert_eq!(r.distance(), brute_force_distance(&a, &b));
        }
    }
}
