//! Parameter-recovery metrics, held-out prediction and ROC analysis.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use smallvec::SmallVec;

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::model::{BlanketIndex, CptSet};
use crate::network::{color_graph, moralize, Network};
use crate::rng::{pick, StreamKey};
use crate::sampler::Trace;

/// Mean over all CPT rows of `sum_x p(x) ln(p(x) / q(x))`.
///
/// Terms with `q(x) = 0` are skipped and terms with `p(x) = 0` contribute
/// nothing. Skipping zero-`q` terms can understate the divergence: an
/// estimate that puts no mass where the truth does is not penalized there.
pub fn kl_avg(truth: &CptSet, estimate: &CptSet) -> Result<f64> {
    truth.congruent(estimate)?;
    let mut sum = 0.0;
    let mut rows = 0usize;
    for (p, q) in truth.rows().zip(estimate.rows()) {
        sum += p
            .iter()
            .zip(q)
            .filter(|(&pi, &qi)| qi > 0.0 && pi > 0.0)
            .map(|(&pi, &qi)| pi * (pi / qi).ln())
            .sum::<f64>();
        rows += 1;
    }
    Ok(if rows == 0 { 0.0 } else { sum / rows as f64 })
}

/// Mean absolute difference over every CPT cell.
pub fn avg_abs_error(truth: &CptSet, estimate: &CptSet) -> Result<f64> {
    truth.congruent(estimate)?;
    let mut sum = 0.0;
    let mut cells = 0usize;
    for (p, q) in truth.rows().zip(estimate.rows()) {
        for (a, b) in p.iter().zip(q) {
            sum += (a - b).abs();
            cells += 1;
        }
    }
    Ok(if cells == 0 { 0.0 } else { sum / cells as f64 })
}

/// Estimates the state distribution of held-out `targets` (`(var, case)`)
/// by Gibbs sampling with frozen CPTs.
///
/// Each case with targets is run as an independent chain: the context's
/// observed entries are clamped, everything else (targets included) is
/// latent, initialized by ancestral sampling, then swept `num_samples` times
/// in chromatic order. The returned frequencies align with `targets`.
pub fn predict_missing(
    net: &Network,
    cpts: &CptSet,
    context: &DataMatrix,
    targets: &[(usize, usize)],
    num_samples: usize,
    seed: StreamKey,
) -> Result<Vec<Vec<f64>>> {
    context.check_against(net)?;
    if !cpts.matches(net) {
        return Err(Error::ShapeMismatch("CPTs do not match the network".into()));
    }
    if num_samples == 0 {
        return Err(Error::InvalidConfig("at least one prediction sample is required".into()));
    }
    for &(v, c) in targets {
        if v >= net.num_vars() {
            return Err(Error::InvalidIndex { index: v, bound: net.num_vars() });
        }
        if c >= context.num_cases() {
            return Err(Error::InvalidIndex { index: c, bound: context.num_cases() });
        }
    }
    let mut by_case: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &(_, c)) in targets.iter().enumerate() {
        by_case.entry(c).or_default().push(i);
    }

    let blanket = BlanketIndex::new(net);
    let order: Vec<usize> = color_graph(&moralize(net)).groups().concat();
    let n = net.num_vars();
    let jobs: Vec<(usize, Vec<usize>)> = by_case.into_iter().collect();

    let results: Vec<Vec<(usize, Vec<f64>)>> = jobs
        .par_iter()
        .map(|(case, target_ids)| {
            let key = seed.child(*case as u64);
            let mut clamped = vec![false; n];
            let mut unit = vec![0u16; n];
            for (v, s) in context.case(*case) {
                clamped[v] = true;
                unit[v] = s;
            }
            for &t in target_ids {
                clamped[targets[t].0] = false;
            }
            let init = key.child(u64::MAX);
            for &v in net.topo_order() {
                if !clamped[v] {
                    let row = blanket.prior_row(cpts, v, &unit);
                    unit[v] = pick(row, 1.0, init.child(v as u64).uniform()) as u16;
                }
            }
            let mut tallies: Vec<Vec<f64>> =
                target_ids.iter().map(|&t| vec![0.0; net.cardinality(targets[t].0)]).collect();
            let mut weights: SmallVec<[f64; 8]> = SmallVec::new();
            for s in 0..num_samples {
                let sk = key.child(s as u64);
                for &v in &order {
                    if clamped[v] {
                        continue;
                    }
                    let total = blanket.weights(cpts, v, &unit, &mut weights);
                    if total.is_nan() || total <= 0.0 {
                        return Err(Error::ZeroSupport { var: v });
                    }
                    unit[v] = pick(&weights, total, sk.child(v as u64).uniform()) as u16;
                }
                for (tally, &t) in tallies.iter_mut().zip(target_ids) {
                    tally[usize::from(unit[targets[t].0])] += 1.0;
                }
            }
            Ok(target_ids
                .iter()
                .zip(tallies)
                .map(|(&t, tally)| (t, tally.into_iter().map(|x| x / num_samples as f64).collect()))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut out = vec![Vec::new(); targets.len()];
    for (t, probs) in results.into_iter().flatten() {
        out[t] = probs;
    }
    Ok(out)
}

/// ROC curve over all distinct score thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "fpr,tpr")?;
        for (f, t) in &self.points {
            writeln!(w, "{f},{t}")?;
        }
        writeln!(w, "# auc={}", self.auc)?;
        w.flush()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    /// Trapezoidal area under `points`.
    pub fn trapezoid_area(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
    }
}

/// Sweeps the threshold from the highest score down; equal scores form one
/// step, so ties earn half credit.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of 1 / (pos * neg)
    let mut area2 = 0u128;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (tp0, fp0) = (tp, fp);
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve { points, auc: area2 as f64 / (2 * pos * neg) as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    /// Cell visits per second for each pass; `None` for zero-duration passes.
    pub per_pass: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

pub fn throughput(trace: &Trace) -> Result<Throughput> {
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let per_pass = trace.records.iter().map(|r| r.vars_per_sec()).collect();
    let total: u64 = trace.records.iter().map(|r| r.vars_sampled).sum();
    let secs: f64 = trace.records.iter().map(|r| r.pass_seconds).sum();
    Ok(Throughput { per_pass, overall: (secs > 0.0).then(|| total as f64 / secs) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::koller_network;
    use crate::sampler::TraceRecord;
    use proptest::prelude::*;

    fn one_row(p: Vec<f64>) -> (Network, CptSet) {
        let net = Network::build(&[p.len()], &[]).unwrap();
        let c = CptSet::from_tables(&net, vec![p]).unwrap();
        (net, c)
    }

    #[test]
    fn kl_examples() {
        let (_, truth) = koller_network();
        assert_eq!(kl_avg(&truth, &truth).unwrap(), 0.0);
        assert_eq!(truth.rows().count(), 11);

        let (_, p) = one_row(vec![0.5, 0.5]);
        let (_, q) = one_row(vec![0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_avg(&p, &q).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.1438).abs() < 1e-4);

        // q(x) = 0 terms are skipped
        let (_, q0) = one_row(vec![1.0, 0.0]);
        assert!((kl_avg(&p, &q0).unwrap() - 0.5 * 0.5f64.ln()).abs() < 1e-15);

        let (_, three) = one_row(vec![0.2, 0.3, 0.5]);
        assert!(matches!(kl_avg(&p, &three), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn abs_error_examples() {
        let (_, truth) = koller_network();
        assert_eq!(avg_abs_error(&truth, &truth).unwrap(), 0.0);
        let (_, a) = one_row(vec![1.0, 0.0]);
        let (_, b) = one_row(vec![0.0, 1.0]);
        assert_eq!(avg_abs_error(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn roc_examples() {
        let r = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap().auc, 1.0);
        let flat = roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(flat.auc, 0.5);
        assert_eq!(flat.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateLabels)));
        assert!(matches!(roc_auc(&[0.1], &[true, false]), Err(Error::DimensionMismatch(_))));
    }

    /// Pairs (positive, negative) where the positive scores higher, ties
    /// counting one half.
    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    proptest! {
        #[test]
        fn auc_is_mann_whitney(
            data in proptest::collection::vec((0u8..5, any::<bool>()), 2..=12)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 4.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let roc = roc_auc(&scores, &labels).unwrap();
            prop_assert_eq!(roc.auc, mann_whitney(&scores, &labels));
            prop_assert!((roc.auc - roc.trapezoid_area()).abs() < 1e-9);
            prop_assert_eq!(*roc.points.last().unwrap(), (1.0, 1.0));
            for w in roc.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            // strictly increasing transform
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&warped, &labels).unwrap().auc, roc.auc);
        }

        #[test]
        fn kl_nonnegative(p in proptest::collection::vec(0.0f64..1.0, 3), q in proptest::collection::vec(0.01f64..1.0, 3)) {
            prop_assume!(p.iter().sum::<f64>() > 0.01);
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (_, a) = one_row(norm(&p));
            let (_, b) = one_row(norm(&q));
            prop_assert!(kl_avg(&a, &b).unwrap() >= -1e-15);
            prop_assert!(kl_avg(&a, &a).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn predict_isolated_node() {
        let (net, cpts) = one_row(vec![0.9, 0.1]);
        let ctx = DataMatrix::empty(1, 1);
        let before = cpts.fingerprint();
        let p = predict_missing(&net, &cpts, &ctx, &[(0, 0)], 10_000, 3.into()).unwrap();
        assert!((p[0][0] - 0.9).abs() < 0.02, "{p:?}");
        assert_eq!(cpts.fingerprint(), before);
    }

    #[test]
    fn predict_deterministic_chain() {
        let net = Network::build(&[2, 2, 2], &[(0, 1), (1, 2)]).unwrap();
        let cpts = CptSet::from_tables(&net, vec![vec![0.5, 0.5], vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]])
            .unwrap();
        let ctx = DataMatrix::from_triples(3, 1, vec![(0, 0, 0)]).unwrap();
        let p = predict_missing(&net, &cpts, &ctx, &[(2, 0), (1, 0)], 500, 1.into()).unwrap();
        assert_eq!(p[0], vec![0.0, 1.0]);
        assert_eq!(p[1], vec![0.0, 1.0]);
    }

    #[test]
    fn predict_matches_enumeration() {
        // v-structure 0 -> 2 <- 1, observe X2 = 1 and X0 = 0, predict X1.
        let net = Network::build(&[2, 2, 2], &[(0, 2), (1, 2)]).unwrap();
        let cpts = CptSet::from_tables(
            &net,
            vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.9, 0.1, 0.4, 0.6, 0.2, 0.8, 0.5, 0.5]],
        )
        .unwrap();
        let joint = |x1: usize| cpts.row(1, 0)[x1] * cpts.row(2, x1)[1];
        let exact = joint(1) / (joint(0) + joint(1));
        let ctx = DataMatrix::from_triples(3, 1, vec![(0, 0, 0), (2, 0, 1)]).unwrap();
        let p = predict_missing(&net, &cpts, &ctx, &[(1, 0)], 100_000, 9.into()).unwrap();
        assert!((p[0][1] - exact).abs() < 0.02, "{} vs {exact}", p[0][1]);
    }

    #[test]
    fn predict_validates_targets() {
        let (net, cpts) = one_row(vec![0.9, 0.1]);
        let ctx = DataMatrix::empty(1, 2);
        assert!(predict_missing(&net, &cpts, &ctx, &[(1, 0)], 10, 1.into()).is_err());
        assert!(predict_missing(&net, &cpts, &ctx, &[(0, 2)], 10, 1.into()).is_err());
        assert!(predict_missing(&net, &cpts, &ctx, &[(0, 0)], 0, 1.into()).is_err());
    }

    fn rec(vars: u64, secs: f64) -> TraceRecord {
        TraceRecord { pass: 1, seconds: secs, pass_seconds: secs, kl_avg: None, vars_sampled: vars }
    }

    #[test]
    fn throughput_arithmetic() {
        let t = Trace { records: vec![rec(10 * 100, 2.0)] };
        assert_eq!(throughput(&t).unwrap().overall, Some(500.0));
        let t2 = Trace { records: vec![rec(2 * 10 * 100, 2.0)] };
        assert_eq!(throughput(&t2).unwrap().overall, Some(1000.0));
        let z = Trace { records: vec![rec(1000, 0.0)] };
        let tp = throughput(&z).unwrap();
        assert_eq!(tp.per_pass, vec![None]);
        assert_eq!(tp.overall, None);
        assert!(matches!(throughput(&Trace::default()), Err(Error::EmptyTrace)));
    }
}
