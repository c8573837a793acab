//! Detection and tracing metrics.
//!
//! Detection: equal error rate, minimum and actual decision cost, computed
//! over a threshold sweep at midpoints between adjacent distinct scores plus
//! the two all-accept/all-reject endpoints. Scores are oriented
//! bonafide-high: FAR(t) is the fraction of spoof scores >= t, FRR(t) the
//! fraction of bonafide scores < t.
//!
//! Tracing: per-class precision/recall/F1 from a square confusion table,
//! macro-averaged over the seen classes, the single unseen class, or all
//! classes, with 0/0 defined as 0 throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class name reserved for the open-set reject decision.
pub const UNSEEN: &str = "UNSEEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialLabel {
    Bonafide,
    Spoof,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Bonafide => "bonafide",
            TrialLabel::Spoof => "spoof",
        }
    }

    pub fn parse(s: &str) -> Result<TrialLabel> {
        match s {
            "bonafide" => Ok(TrialLabel::Bonafide),
            "spoof" => Ok(TrialLabel::Spoof),
            _ => Err(Error::invalid("TrialLabel", format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub score: f64,
    pub label: TrialLabel,
}

/// A batch of scored trials; detection metrics need both labels present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new(records: Vec<ScoreRecord>) -> Result<ScoreSet> {
        for r in &records {
            if !r.score.is_finite() {
                return Err(Error::invalid(
                    "ScoreSet",
                    format!("score for {} is not finite", r.utt_id),
                ));
            }
        }
        Ok(ScoreSet { records })
    }

    /// Sorted bonafide and spoof score arrays; errors when a side is empty.
    fn sides(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut bona = Vec::new();
        let mut spoof = Vec::new();
        for r in &self.records {
            match r.label {
                TrialLabel::Bonafide => bona.push(r.score),
                TrialLabel::Spoof => spoof.push(r.score),
            }
        }
        if bona.is_empty() || spoof.is_empty() {
            return Err(Error::SingleLabel(format!(
                "{} bonafide and {} spoof records; detection metrics need both",
                bona.len(),
                spoof.len()
            )));
        }
        bona.sort_by(f64::total_cmp);
        spoof.sort_by(f64::total_cmp);
        Ok((bona, spoof))
    }
}

/// Decision cost parameters; the normalizer is min(c_miss p, c_fa (1-p)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfCosts {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfCosts {
    fn default() -> Self {
        DcfCosts { c_miss: 1.0, c_fa: 10.0, p_target: 0.05 }
    }
}

impl DcfCosts {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0 && self.c_miss.is_finite())
            || !(self.c_fa > 0.0 && self.c_fa.is_finite())
        {
            return Err(Error::invalid("DcfCosts", "costs must be positive and finite"));
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid("DcfCosts", "p_target must lie in (0, 1)"));
        }
        Ok(())
    }

    fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    /// The fixed Bayes decision threshold for log-likelihood-ratio scores.
    pub fn bayes_threshold(&self) -> f64 {
        ((self.c_fa * (1.0 - self.p_target)) / (self.c_miss * self.p_target)).ln()
    }
}

/// Fraction of spoof scores at or above `t`.
fn far_at(spoof: &[f64], t: f64) -> f64 {
    let below = spoof.partition_point(|&s| s < t);
    (spoof.len() - below) as f64 / spoof.len() as f64
}

/// Fraction of bonafide scores below `t`.
fn frr_at(bona: &[f64], t: f64) -> f64 {
    bona.partition_point(|&s| s < t) as f64 / bona.len() as f64
}

/// Threshold sweep: all-accept, midpoints between adjacent distinct scores,
/// all-reject; in increasing order.
fn sweep_thresholds(bona: &[f64], spoof: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut ts = vec![f64::NEG_INFINITY];
    for w in all.windows(2) {
        ts.push(0.5 * (w[0] + w[1]));
    }
    ts.push(f64::INFINITY);
    ts
}

/// Equal error rate and the threshold where FAR and FRR meet. When no swept
/// threshold gives an exact tie, the rate is linearly interpolated between
/// the two operating points bracketing the crossing.
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    let (bona, spoof) = s.sides()?;
    let ts = sweep_thresholds(&bona, &spoof);
    // FAR falls and FRR rises with t, so FAR - FRR crosses zero exactly once.
    let mut prev: Option<(f64, f64, f64)> = None; // (t, far, frr)
    for &t in &ts {
        let far = far_at(&spoof, t);
        let frr = frr_at(&bona, t);
        if frr >= far {
            if frr == far {
                return Ok((far, t));
            }
            let (pt, pfar, pfrr) = prev.expect("sweep starts at far=1, frr=0");
            let d1 = pfar - pfrr; // > 0
            let d2 = far - frr; // < 0
            let alpha = d1 / (d1 - d2);
            let eer = pfar + alpha * (far - pfar);
            // Report the bracket endpoint closer to the crossing; endpoints
            // may be infinite, the rate never is.
            let t_star = if alpha <= 0.5 { pt } else { t };
            return Ok((eer, t_star));
        }
        prev = Some((t, far, frr));
    }
    unreachable!("frr reaches 1 and far reaches 0 at +inf");
}

/// Minimum normalized decision cost over the sweep, with its threshold
/// (smallest threshold on ties).
pub fn compute_min_dcf(s: &ScoreSet, costs: &DcfCosts) -> Result<(f64, f64)> {
    costs.validate()?;
    let (bona, spoof) = s.sides()?;
    let norm = costs.normalizer();
    let mut best: Option<(f64, f64)> = None;
    for t in sweep_thresholds(&bona, &spoof) {
        let dcf = (costs.c_miss * costs.p_target * frr_at(&bona, t)
            + costs.c_fa * (1.0 - costs.p_target) * far_at(&spoof, t))
            / norm;
        if best.is_none_or(|(b, _)| dcf < b) {
            best = Some((dcf, t));
        }
    }
    Ok(best.expect("sweep is never empty"))
}

/// Normalized decision cost at the fixed Bayes threshold; scores must be
/// calibrated log-likelihood ratios for this to be meaningful.
pub fn compute_act_dcf(s: &ScoreSet, costs: &DcfCosts) -> Result<f64> {
    costs.validate()?;
    let (bona, spoof) = s.sides()?;
    let t = costs.bayes_threshold();
    Ok((costs.c_miss * costs.p_target * frr_at(&bona, t)
        + costs.c_fa * (1.0 - costs.p_target) * far_at(&spoof, t))
        / costs.normalizer())
}

/// Square confusion table over a fixed, ordered class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTable {
    classes: Vec<String>,
    /// counts[true][pred]
    counts: Vec<Vec<u64>>,
}

/// Per-class tallies and rates for one row/column of the table.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrf {
    pub class: String,
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Which classes a macro average runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSubset {
    /// Every class except [`UNSEEN`].
    Seen,
    /// The single [`UNSEEN`] class.
    Unseen,
    /// All classes.
    Overall,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionTable {
    pub fn new(classes: Vec<String>) -> Result<ConfusionTable> {
        if classes.is_empty() {
            return Err(Error::invalid("ConfusionTable", "no classes"));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            if !seen.insert(c) {
                return Err(Error::invalid("ConfusionTable", format!("duplicate class {c:?}")));
            }
        }
        let n = classes.len();
        Ok(ConfusionTable { classes, counts: vec![vec![0; n]; n] })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    fn index_of(&self, class: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::invalid("ConfusionTable", format!("unknown class {class:?}")))
    }

    pub fn record(&mut self, true_class: &str, pred_class: &str) -> Result<()> {
        let t = self.index_of(true_class)?;
        let p = self.index_of(pred_class)?;
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn count(&self, true_class: &str, pred_class: &str) -> Result<u64> {
        Ok(self.counts[self.index_of(true_class)?][self.index_of(pred_class)?])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Precision/recall/F1 for every class, in class order, 0/0 -> 0.
    pub fn per_class(&self) -> Vec<ClassPrf> {
        let n = self.classes.len();
        (0..n)
            .map(|i| {
                let tp = self.counts[i][i];
                let support: u64 = self.counts[i].iter().sum();
                let predicted: u64 = (0..n).map(|t| self.counts[t][i]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassPrf {
                    class: self.classes[i].clone(),
                    support,
                    predicted,
                    precision,
                    recall,
                    f1,
                }
            })
            .collect()
    }
}

/// Unweighted macro average of (precision, recall, F1) over the subset.
pub fn macro_f1(ct: &ConfusionTable, subset: MetricSubset) -> Result<(f64, f64, f64)> {
    let rows: Vec<ClassPrf> = ct
        .per_class()
        .into_iter()
        .filter(|r| match subset {
            MetricSubset::Seen => r.class != UNSEEN,
            MetricSubset::Unseen => r.class == UNSEEN,
            MetricSubset::Overall => true,
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("macro_f1", "subset selects no classes"));
    }
    let n = rows.len() as f64;
    Ok((
        rows.iter().map(|r| r.precision).sum::<f64>() / n,
        rows.iter().map(|r| r.recall).sum::<f64>() / n,
        rows.iter().map(|r| r.f1).sum::<f64>() / n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(bona: &[f64], spoof: &[f64]) -> ScoreSet {
        let mut records = Vec::new();
        for (i, &s) in bona.iter().enumerate() {
            records.push(ScoreRecord {
                utt_id: format!("b{i}"),
                score: s,
                label: TrialLabel::Bonafide,
            });
        }
        for (i, &s) in spoof.iter().enumerate() {
            records.push(ScoreRecord {
                utt_id: format!("s{i}"),
                score: s,
                label: TrialLabel::Spoof,
            });
        }
        ScoreSet::new(records).unwrap()
    }

    #[test]
    fn perfect_separation_has_zero_eer() {
        let (eer, _) = compute_eer(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert_eq!(eer, 0.0);
    }

    #[test]
    fn inverted_scores_have_eer_one() {
        let (eer, _) = compute_eer(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap();
        assert_eq!(eer, 1.0);
    }

    #[test]
    fn three_score_crossing_lands_at_one_third() {
        let (eer, t) = compute_eer(&set(&[0.9, 0.7, 0.6], &[0.8, 0.2, 0.1])).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-12, "eer {eer}");
        assert!((t - 0.65).abs() < 1e-12, "threshold {t}");
    }

    #[test]
    fn swapping_labels_complements_eer() {
        let (e1, _) = compute_eer(&set(&[0.9, 0.7, 0.6], &[0.8, 0.2, 0.1])).unwrap();
        let (e2, _) = compute_eer(&set(&[0.8, 0.2, 0.1], &[0.9, 0.7, 0.6])).unwrap();
        assert!((e1 + e2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eer_survives_monotone_transforms() {
        let base = set(&[1.4, -0.2, 0.7, 0.1], &[0.9, -1.3, 0.05, -0.6]);
        let (e0, _) = compute_eer(&base).unwrap();
        for f in [|x: f64| x.exp(), |x: f64| 3.0 * x + 11.0] {
            let mut warped = base.clone();
            for r in &mut warped.records {
                r.score = f(r.score);
            }
            let (e1, _) = compute_eer(&warped).unwrap();
            assert!((e0 - e1).abs() < 1e-12);
        }
    }

    #[test]
    fn single_label_sets_are_rejected() {
        let s = set(&[0.5], &[0.1]);
        let only_bona = ScoreSet::new(
            s.records.iter().filter(|r| r.label == TrialLabel::Bonafide).cloned().collect(),
        )
        .unwrap();
        assert!(matches!(compute_eer(&only_bona), Err(Error::SingleLabel(_))));
        assert!(matches!(
            compute_min_dcf(&only_bona, &DcfCosts::default()),
            Err(Error::SingleLabel(_))
        ));
        assert!(matches!(
            compute_act_dcf(&only_bona, &DcfCosts::default()),
            Err(Error::SingleLabel(_))
        ));
    }

    #[test]
    fn perfect_separation_has_zero_min_dcf() {
        let (dcf, _) = compute_min_dcf(&set(&[0.9, 0.8], &[0.1, 0.2]), &DcfCosts::default()).unwrap();
        assert_eq!(dcf, 0.0);
    }

    #[test]
    fn identical_scores_normalize_to_one() {
        let (dcf, _) =
            compute_min_dcf(&set(&[0.5, 0.5], &[0.5, 0.5]), &DcfCosts::default()).unwrap();
        assert!((dcf - 1.0).abs() < 1e-12, "dcf {dcf}");
    }

    #[test]
    fn act_dcf_is_the_direct_formula_at_the_bayes_threshold() {
        let costs = DcfCosts::default();
        let t = costs.bayes_threshold();
        assert!((t - 190.0f64.ln()).abs() < 1e-12);
        // LLR-ish scores straddling t*: everything correct -> 0.
        let good = set(&[t + 1.0, t + 2.0], &[t - 3.0, t - 1.0]);
        assert_eq!(compute_act_dcf(&good, &costs).unwrap(), 0.0);
        // One miss out of two bonafide.
        let one_miss = set(&[t + 1.0, t - 1.0], &[t - 3.0, t - 2.0]);
        let want = costs.c_miss * costs.p_target * 0.5 / (costs.c_miss * costs.p_target);
        assert!((compute_act_dcf(&one_miss, &costs).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn min_dcf_never_exceeds_act_dcf() {
        use rand::Rng;
        let mut rng = crate::seeds::rng(33);
        for _ in 0..50 {
            let nb = rng.gen_range(2..20);
            let ns = rng.gen_range(2..20);
            let bona: Vec<f64> = (0..nb).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let spoof: Vec<f64> = (0..ns).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let s = set(&bona, &spoof);
            let costs = DcfCosts::default();
            let (min_dcf, _) = compute_min_dcf(&s, &costs).unwrap();
            let act = compute_act_dcf(&s, &costs).unwrap();
            assert!(min_dcf <= act + 1e-15, "min {min_dcf} vs act {act}");
        }
    }

    fn toy_table() -> ConfusionTable {
        let mut ct = ConfusionTable::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let rows = [[5, 1, 0], [0, 4, 2], [1, 0, 7]];
        let names = ["a", "b", "c"];
        for (t, row) in rows.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    ct.record(names[t], names[p]).unwrap();
                }
            }
        }
        ct
    }

    #[test]
    fn diagonal_table_scores_one_everywhere() {
        let mut ct =
            ConfusionTable::new(vec!["x".into(), "y".into(), UNSEEN.into()]).unwrap();
        for c in ["x", "y", UNSEEN] {
            for _ in 0..3 {
                ct.record(c, c).unwrap();
            }
        }
        for subset in [MetricSubset::Seen, MetricSubset::Unseen, MetricSubset::Overall] {
            let (p, r, f1) = macro_f1(&ct, subset).unwrap();
            assert_eq!((p, r, f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn toy_table_matches_hand_fractions() {
        let ct = toy_table();
        let rows = ct.per_class();
        assert!((rows[0].f1 - 5.0 / 6.0).abs() < 1e-15);
        assert!((rows[1].f1 - 8.0 / 11.0).abs() < 1e-15);
        assert!((rows[2].f1 - 14.0 / 17.0).abs() < 1e-15);
        let (_, _, f1) = macro_f1(&ct, MetricSubset::Overall).unwrap();
        let want = (5.0 / 6.0 + 8.0 / 11.0 + 14.0 / 17.0) / 3.0;
        assert!((f1 - want).abs() < 1e-15);
    }

    #[test]
    fn empty_class_contributes_zero_via_the_zero_over_zero_rule() {
        let mut ct = ConfusionTable::new(vec!["a".into(), "ghost".into()]).unwrap();
        ct.record("a", "a").unwrap();
        let rows = ct.per_class();
        assert_eq!(rows[1].support, 0);
        assert_eq!(rows[1].predicted, 0);
        assert_eq!(rows[1].f1, 0.0);
        let (_, _, f1) = macro_f1(&ct, MetricSubset::Overall).unwrap();
        assert!((f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn macro_scores_ignore_class_order() {
        let ct = toy_table();
        let mut permuted = ConfusionTable::new(vec!["c".into(), "a".into(), "b".into()]).unwrap();
        for t in ["a", "b", "c"] {
            for p in ["a", "b", "c"] {
                for _ in 0..ct.count(t, p).unwrap() {
                    permuted.record(t, p).unwrap();
                }
            }
        }
        let x = macro_f1(&ct, MetricSubset::Overall).unwrap();
        let y = macro_f1(&permuted, MetricSubset::Overall).unwrap();
        assert!((x.2 - y.2).abs() < 1e-15);
    }

    #[test]
    fn unseen_subset_reads_only_that_class() {
        let mut ct = ConfusionTable::new(vec!["a".into(), UNSEEN.into()]).unwrap();
        ct.record("a", "a").unwrap();
        ct.record(UNSEEN, "a").unwrap();
        ct.record(UNSEEN, UNSEEN).unwrap();
        let (p, r, _) = macro_f1(&ct, MetricSubset::Unseen).unwrap();
        assert_eq!(p, 1.0); // 1 of 1 UNSEEN predictions correct
        assert_eq!(r, 0.5); // 1 of 2 UNSEEN trials caught
    }
}
