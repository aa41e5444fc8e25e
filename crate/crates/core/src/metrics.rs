//! Token-level MT metrics: BLEU, TER and chrF.
//!
//! Corpus scores aggregate sufficient statistics (match and length counts)
//! over segments, so they do not depend on segment order. Pinned choices:
//!
//! * BLEU: up to 4-grams, uniform weights, brevity penalty; add-one smoothing
//!   on the 2..4-gram precisions (unigram precision is unsmoothed, so a
//!   hypothesis without any matching word scores 0).
//! * TER: word edits plus block shifts over the number of reference words.
//!   Shifts are found by a beam search of width [`TER_BEAM`] over moves of
//!   hypothesis phrases of at most [`TER_MAX_SHIFT`] words.
//! * chrF: character n-grams for n = 1..6 with whitespace removed, β = 2.
//!   Precision and recall are averaged over the n-gram orders that occur in
//!   the hypothesis or the reference.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_MAX_ORDER: usize = 4;
pub const CHRF_MAX_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;
pub const TER_BEAM: usize = 32;
pub const TER_MAX_SHIFT: usize = 10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    pub bleu: Vec<f64>,
    pub ter: Vec<f64>,
    pub chrf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub ter: f64,
    pub chrf: f64,
    pub segments: usize,
    pub segment_scores: SegmentScores,
}

impl MetricReport {
    pub fn compute<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<Self> {
        check(hyps, refs)?;
        let pairs = || hyps.iter().zip(refs).map(|(h, r)| (h.as_ref(), r.as_ref()));
        Ok(Self {
            bleu: bleu(hyps, refs)?,
            ter: ter(hyps, refs)?,
            chrf: chrf(hyps, refs)?,
            segments: hyps.len(),
            segment_scores: SegmentScores {
                bleu: pairs().map(|(h, r)| BleuStats::new(h, r).score()).collect(),
                ter: pairs().map(|(h, r)| TerStats::new(h, r).score()).collect(),
                chrf: pairs().map(|(h, r)| ChrfStats::new(h, r).score()).collect(),
            },
        })
    }

    /// `bleu\tter\tchrf` with two decimals.
    pub fn tsv_line(&self) -> String {
        format!("{:.2}\t{:.2}\t{:.2}", self.bleu, self.ter, self.chrf)
    }

    pub const TSV_HEADER: &'static str = "bleu\tter\tchrf";
}

fn check<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypotheses"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch(hyps.len(), refs.len()));
    }
    Ok(())
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches, hypothesis n-grams, reference n-grams.
fn ngram_stats<T: Eq + std::hash::Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct BleuStats {
    matched: [usize; BLEU_MAX_ORDER],
    total: [usize; BLEU_MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn new(hyp: &str, reference: &str) -> Self {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let mut s = Self {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Self::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            let (m, t, _) = ngram_stats(&h, &r, n);
            s.matched[n - 1] = m;
            s.total[n - 1] = t;
        }
        s
    }

    fn add(&mut self, o: &Self) {
        for n in 0..BLEU_MAX_ORDER {
            self.matched[n] += o.matched[n];
            self.total[n] += o.total[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    fn score(&self) -> f64 {
        if self.matched[0] == 0 {
            return 0.0;
        }
        let mut log_p = (self.matched[0] as f64 / self.total[0] as f64).ln();
        for n in 1..BLEU_MAX_ORDER {
            log_p += ((self.matched[n] + 1) as f64 / (self.total[n] + 1) as f64).ln();
        }
        let log_bp = if self.hyp_len < self.ref_len {
            1.0 - self.ref_len as f64 / self.hyp_len as f64
        } else {
            0.0
        };
        100.0 * (log_bp + log_p / BLEU_MAX_ORDER as f64).exp()
    }
}

/// Corpus BLEU in [0, 100].
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check(hyps, refs)?;
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::new(h.as_ref(), r.as_ref()));
    }
    Ok(total.score())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct TerStats {
    edits: usize,
    ref_len: usize,
}

impl TerStats {
    fn new(hyp: &str, reference: &str) -> Self {
        let mut ids: HashMap<&str, u32> = HashMap::new();
        let mut id = |w| {
            let next = ids.len() as u32;
            *ids.entry(w).or_insert(next)
        };
        let h: Vec<u32> = hyp.split_whitespace().map(&mut id).collect();
        let r: Vec<u32> = reference.split_whitespace().map(&mut id).collect();
        Self {
            edits: ter_edits(&h, &r),
            ref_len: r.len(),
        }
    }

    fn score(&self) -> f64 {
        100.0 * self.edits as f64 / self.ref_len.max(1) as f64
    }
}

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Moves `hyp[start..start + len]` so that it begins at index `dest` of the
/// remaining sequence.
fn shift<T: Clone>(hyp: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let mut rest: Vec<T> = hyp[..start].to_vec();
    rest.extend_from_slice(&hyp[start + len..]);
    let mut out = rest[..dest].to_vec();
    out.extend_from_slice(&hyp[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Minimum number of shifts plus word edits turning `hyp` into `reference`,
/// as found by the beam search.
pub fn ter_edits<T: Clone + Eq + std::hash::Hash>(hyp: &[T], reference: &[T]) -> usize {
    let mut best = edit_distance(hyp, reference);
    let mut beam: Vec<(usize, Vec<T>)> = vec![(0, hyp.to_vec())];
    // states that have entered the beam; a state is expanded at most once
    let mut seen: HashSet<Vec<T>> = HashSet::from([hyp.to_vec()]);
    while !beam.is_empty() {
        let mut next: Vec<(usize, usize, Vec<T>)> = Vec::new();
        let mut round: HashSet<Vec<T>> = HashSet::new();
        for (shifts, h) in &beam {
            let shifts = shifts + 1;
            if shifts >= best {
                continue;
            }
            for start in 0..h.len() {
                for len in 1..=TER_MAX_SHIFT.min(h.len() - start) {
                    for dest in 0..=h.len() - len {
                        if dest == start {
                            continue;
                        }
                        let moved = shift(h, start, len, dest);
                        if seen.contains(&moved) || !round.insert(moved.clone()) {
                            continue;
                        }
                        let ed = edit_distance(&moved, reference);
                        best = best.min(shifts + ed);
                        next.push((shifts + ed, shifts, moved));
                    }
                }
            }
        }
        // keep the most promising states; states that cannot beat `best`
        // with one more shift are dropped on expansion
        next.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        next.truncate(TER_BEAM);
        seen.extend(next.iter().map(|(_, _, h)| h.clone()));
        beam = next.into_iter().map(|(_, s, h)| (s, h)).collect();
    }
    best
}

/// Corpus TER in percent (total edits over total reference words).
pub fn ter<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check(hyps, refs)?;
    let mut total = TerStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        let s = TerStats::new(h.as_ref(), r.as_ref());
        total.edits += s.edits;
        total.ref_len += s.ref_len;
    }
    Ok(total.score())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct ChrfStats {
    matched: [usize; CHRF_MAX_ORDER],
    hyp_total: [usize; CHRF_MAX_ORDER],
    ref_total: [usize; CHRF_MAX_ORDER],
}

impl ChrfStats {
    fn new(hyp: &str, reference: &str) -> Self {
        let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
        let mut s = Self::default();
        for n in 1..=CHRF_MAX_ORDER {
            let (m, ht, rt) = ngram_stats(&h, &r, n);
            s.matched[n - 1] = m;
            s.hyp_total[n - 1] = ht;
            s.ref_total[n - 1] = rt;
        }
        s
    }

    fn add(&mut self, o: &Self) {
        for n in 0..CHRF_MAX_ORDER {
            self.matched[n] += o.matched[n];
            self.hyp_total[n] += o.hyp_total[n];
            self.ref_total[n] += o.ref_total[n];
        }
    }

    fn score(&self) -> f64 {
        let (mut p, mut r, mut orders) = (0.0, 0.0, 0);
        for n in 0..CHRF_MAX_ORDER {
            if self.hyp_total[n] == 0 && self.ref_total[n] == 0 {
                continue;
            }
            orders += 1;
            if self.hyp_total[n] > 0 {
                p += self.matched[n] as f64 / self.hyp_total[n] as f64;
            }
            if self.ref_total[n] > 0 {
                r += self.matched[n] as f64 / self.ref_total[n] as f64;
            }
        }
        if orders == 0 {
            // both sides empty
            return 100.0;
        }
        p /= orders as f64;
        r /= orders as f64;
        let b2 = CHRF_BETA * CHRF_BETA;
        if p + r == 0.0 {
            return 0.0;
        }
        100.0 * (1.0 + b2) * p * r / (b2 * p + r)
    }
}

/// Corpus chrF in [0, 100].
pub fn chrf<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check(hyps, refs)?;
    let mut total = ChrfStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&ChrfStats::new(h.as_ref(), r.as_ref()));
    }
    Ok(total.score())
}

/// Sentence-level chrF of one segment.
pub fn chrf_segment(hyp: &str, reference: &str) -> f64 {
    ChrfStats::new(hyp, reference).score()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn bleu_worked_example() {
        // p1 = 3/3; p2..p4 smoothed to (2+1)/(2+1), (1+1)/(1+1), (0+1)/(0+1);
        // BP = exp(1 - 4/3)
        close(bleu(&["the cat sat"], &["the cat sat down"]).unwrap(), 100.0 * (-1.0f64 / 3.0).exp());
        close(bleu(&["the cat sat"], &["the cat sat down"]).unwrap(), 71.65313105737893);
    }

    #[test]
    fn bleu_extremes() {
        assert_eq!(bleu(&["a b c d e"], &["a b c d e"]).unwrap(), 100.0);
        assert_eq!(bleu(&["x y"], &["a b c"]).unwrap(), 0.0);
        assert!(matches!(bleu::<&str, &str>(&[], &[]), Err(Error::Empty(_))));
        assert!(matches!(bleu(&["a"], &["a", "b"]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn ter_examples() {
        assert_eq!(ter(&["a b c d e"], &["a b c d e"]).unwrap(), 0.0);
        close(ter(&["a b x d e"], &["a b c d e"]).unwrap(), 20.0);
        // one shift of "a b" past "c d"
        assert_eq!(ter_edits(&["a", "b", "c", "d"], &["c", "d", "a", "b"]), 1);
        close(ter(&["a b c d"], &["c d a b"]).unwrap(), 25.0);
    }

    #[test]
    fn chrf_worked_example() {
        // orders 1..4: 3/4, 2/3, 1/2, 0/1 for both precision and recall
        let pr = (0.75 + 2.0 / 3.0 + 0.5 + 0.0) / 4.0;
        close(chrf(&["abcd"], &["abce"]).unwrap(), 100.0 * pr);
        close(chrf(&["abcd"], &["abce"]).unwrap(), 47.916666666666664);
    }

    #[test]
    fn chrf_extremes_and_whitespace() {
        assert_eq!(chrf(&["hello world"], &["hello world"]).unwrap(), 100.0);
        assert_eq!(chrf(&["abc"], &["xyz"]).unwrap(), 0.0);
        assert_eq!(chrf(&["ab cd"], &["abcd"]).unwrap(), 100.0);
        assert_eq!(chrf(&[""], &[""]).unwrap(), 100.0);
        assert_eq!(chrf(&["a"], &[""]).unwrap(), 0.0);
    }

    #[test]
    fn report_has_one_score_per_segment() {
        let r = MetricReport::compute(&["a b c", "d e f g"], &["a b c", "d e x g"]).unwrap();
        assert_eq!(r.segments, 2);
        assert_eq!(r.segment_scores.bleu.len(), 2);
        assert_eq!(r.segment_scores.ter, vec![0.0, 25.0]);
        assert_eq!(r.segment_scores.chrf[0], 100.0);
        assert_eq!(r.tsv_line().split('\t').count(), 3);
    }

    #[test]
    fn shift_moves_a_block() {
        assert_eq!(shift(&[1, 2, 3, 4], 0, 2, 2), vec![3, 4, 1, 2]);
        assert_eq!(shift(&[1, 2, 3, 4], 3, 1, 0), vec![4, 1, 2, 3]);
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "dd", "e"]), 0..12)
            .prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn identity_is_perfect(x in sentence()) {
            prop_assume!(!x.is_empty());
            prop_assert_eq!(bleu(&[&x], &[&x]).unwrap(), 100.0);
            prop_assert_eq!(chrf(&[&x], &[&x]).unwrap(), 100.0);
            prop_assert_eq!(ter(&[&x], &[&x]).unwrap(), 0.0);
        }

        #[test]
        fn corpus_scores_ignore_segment_order(
            pairs in prop::collection::vec((sentence(), sentence()), 1..6),
        ) {
            let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
            let (hr, rr): (Vec<String>, Vec<String>) = pairs.iter().rev().cloned().unzip();
            prop_assert_eq!(bleu(&h, &r).unwrap(), bleu(&hr, &rr).unwrap());
            prop_assert_eq!(ter(&h, &r).unwrap(), ter(&hr, &rr).unwrap());
            prop_assert_eq!(chrf(&h, &r).unwrap(), chrf(&hr, &rr).unwrap());
        }

        #[test]
        fn ranges(h in sentence(), r in sentence()) {
            let rep = MetricReport::compute(&[&h], &[&r]).unwrap();
            prop_assert!((0.0..=100.0).contains(&rep.bleu));
            prop_assert!((0.0..=100.0).contains(&rep.chrf));
            prop_assert!(rep.ter >= 0.0);
            // shifts never make TER worse than plain edit distance
            let hw: Vec<&str> = h.split_whitespace().collect();
            let rw: Vec<&str> = r.split_whitespace().collect();
            prop_assert!(ter_edits(&hw, &rw) <= edit_distance(&hw, &rw));
        }
    }
}
