//! Majority voting, binary STAPLE and the weighted-voting label prior.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{vote_counts, LabelMap, Volume};

/// Gain exponent applied to the atlas weights in the label prior.
pub const DEFAULT_PRIOR_EXPONENT: f64 = 4.0;

/// Foreground where strictly more than half of the maps vote foreground.
pub fn majority_vote(labels: &[&LabelMap]) -> Result<LabelMap> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("majority vote needs at least one map".into()));
    }
    let counts = vote_counts(labels)?;
    let n = labels.len() as u32;
    LabelMap::new(*labels[0].geometry(), counts.into_iter().map(|c| 2 * c > n).collect())
}

/// Per-voxel foreground probability `Σ_fg w^q / Σ_all w^q`; 0.5 where every
/// weight is zero.
pub fn label_prior(labels: &[&LabelMap], weights: &[f64], q: f64) -> Result<Volume> {
    if labels.is_empty() || labels.len() != weights.len() {
        return Err(Error::InvalidInput("label prior needs one weight per atlas".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidInput("atlas weights must be finite and non-negative".into()));
    }
    let g = *labels[0].geometry();
    for l in labels {
        g.ensure_same(l.geometry(), "label prior")?;
    }
    let gains: Vec<f64> = weights.iter().map(|w| w.powf(q)).collect();
    let data = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let (mut u0, mut u1) = (0.0, 0.0);
            for (l, &w) in labels.iter().zip(&gains) {
                if l.data()[i] {
                    u1 += w;
                } else {
                    u0 += w;
                }
            }
            if u0 + u1 > 0.0 {
                u1 / (u0 + u1)
            } else {
                0.5
            }
        })
        .collect();
    Volume::new(g, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StapleParams {
    pub initial_sensitivity: f64,
    pub initial_specificity: f64,
    /// Fixed foreground prevalence; `None` uses the mean vote fraction.
    pub prevalence: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Sensitivities and specificities are kept inside `[clamp, 1 - clamp]`.
    pub clamp: f64,
}

impl Default for StapleParams {
    fn default() -> Self {
        Self {
            initial_sensitivity: 0.99,
            initial_specificity: 0.99,
            prevalence: None,
            tolerance: 1e-6,
            max_iterations: 100,
            clamp: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StapleResult {
    /// Posterior probability of foreground.
    pub posterior: Volume,
    /// Posterior thresholded at 0.5 (strictly above is foreground).
    pub labels: LabelMap,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub prevalence: f64,
    /// Observed-data log-likelihood before each M-step, then at the end.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

/// Per voxel `(ln P(D, T=1), ln P(D, T=0))`.
fn joint_terms(votes: &[Vec<bool>], n: usize, p: &[f64], q: &[f64], pi: f64) -> Vec<(f64, f64)> {
    let (lp, lnp): (Vec<f64>, Vec<f64>) = p.iter().map(|v| (v.ln(), (1.0 - v).ln())).unzip();
    let (lq, lnq): (Vec<f64>, Vec<f64>) = q.iter().map(|v| (v.ln(), (1.0 - v).ln())).unzip();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut a, mut b) = (pi.ln(), (1.0 - pi).ln());
            for (j, r) in votes.iter().enumerate() {
                if r[i] {
                    a += lp[j];
                    b += lnq[j];
                } else {
                    a += lnp[j];
                    b += lq[j];
                }
            }
            (a, b)
        })
        .collect()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Binary STAPLE by expectation-maximization with a fixed prevalence.
pub fn staple_em(labels: &[&LabelMap], params: &StapleParams) -> Result<StapleResult> {
    if labels.len() < 2 {
        return Err(Error::InvalidInput("STAPLE needs at least two raters".into()));
    }
    let g = *labels[0].geometry();
    for l in labels {
        g.ensure_same(l.geometry(), "STAPLE raters")?;
    }
    let n = g.len();
    let votes: Vec<Vec<bool>> = labels.iter().map(|l| l.data().to_vec()).collect();
    let fg_votes: usize = labels.iter().map(|l| l.count()).sum();
    let total = n * labels.len();
    if fg_votes == 0 || fg_votes == total {
        return Err(Error::Degenerate("STAPLE needs both labels among the votes".into()));
    }
    let (lo, hi) = (params.clamp, 1.0 - params.clamp);
    let pi = params.prevalence.unwrap_or(fg_votes as f64 / total as f64).clamp(lo, hi);
    let mut p = vec![params.initial_sensitivity.clamp(lo, hi); labels.len()];
    let mut q = vec![params.initial_specificity.clamp(lo, hi); labels.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut w: Vec<f64>;
    loop {
        let terms = joint_terms(&votes, n, &p, &q, pi);
        trace.push(terms.iter().map(|&(a, b)| log_sum_exp(a, b)).sum());
        w = terms.iter().map(|&(a, b)| 1.0 / (1.0 + (b - a).exp())).collect();
        if iterations == params.max_iterations {
            break;
        }
        iterations += 1;
        let sw: f64 = w.iter().sum();
        let sb: f64 = w.iter().map(|x| 1.0 - x).sum();
        let mut change: f64 = 0.0;
        for (j, r) in votes.iter().enumerate() {
            let tp: f64 = w.iter().zip(r).filter(|(_, &d)| d).map(|(x, _)| x).sum();
            let tn: f64 = w.iter().zip(r).filter(|(_, &d)| !d).map(|(x, _)| 1.0 - x).sum();
            let np = if sw > 0.0 { (tp / sw).clamp(lo, hi) } else { p[j] };
            let nq = if sb > 0.0 { (tn / sb).clamp(lo, hi) } else { q[j] };
            change = change.max((np - p[j]).abs()).max((nq - q[j]).abs());
            p[j] = np;
            q[j] = nq;
        }
        if change < params.tolerance {
            let terms = joint_terms(&votes, n, &p, &q, pi);
            trace.push(terms.iter().map(|&(a, b)| log_sum_exp(a, b)).sum());
            w = terms.iter().map(|&(a, b)| 1.0 / (1.0 + (b - a).exp())).collect();
            break;
        }
    }
    let labels_out = LabelMap::new(g, w.iter().map(|&x| x > 0.5).collect())?;
    Ok(StapleResult {
        posterior: Volume::new(g, w)?,
        labels: labels_out,
        sensitivity: p,
        specificity: q,
        prevalence: pi,
        log_likelihood: trace,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(bits: &[u8]) -> LabelMap {
        LabelMap::new(Geometry::unit([bits.len(), 1, 1]), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn majority_examples() {
        let (a, b, c) = (line(&[1]), line(&[1]), line(&[0]));
        assert!(majority_vote(&[&a, &b, &c]).unwrap().data()[0]);
        assert!(!majority_vote(&[&a, &c]).unwrap().data()[0]);
    }

    #[test]
    fn majority_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let g = Geometry::unit([6, 5, 4]);
        let maps: Vec<LabelMap> = (0..15).map(|_| LabelMap::from_fn(g, |_| rng.random_bool(0.5))).collect();
        let refs: Vec<&LabelMap> = maps.iter().collect();
        let mv = majority_vote(&refs).unwrap();
        for i in 0..g.len() {
            let c = maps.iter().filter(|m| m.data()[i]).count();
            assert_eq!(mv.data()[i], c >= 8);
        }
    }

    #[test]
    fn prior_examples() {
        let (a, b) = (line(&[1]), line(&[0]));
        let p = label_prior(&[&a, &b], &[0.8, 0.2], 1.0).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        let p4 = label_prior(&[&a, &b], &[0.8, 0.2], 4.0).unwrap();
        assert!((p4.data()[0] - 0.4096 / 0.4112).abs() < 1e-12);
        assert!((p4.data()[0] - 0.99611).abs() < 5e-6);
        assert_eq!(label_prior(&[&a, &a], &[0.3, 0.9], 4.0).unwrap().data()[0], 1.0);
        assert_eq!(label_prior(&[&a, &b], &[0.0, 0.0], 4.0).unwrap().data()[0], 0.5);
        assert!(label_prior(&[&a, &b], &[0.5], 4.0).is_err());
    }

    proptest! {
        #[test]
        fn prior_invariants(seed in any::<u64>(), n in 1usize..9, scale in 0.01f64..100.0, q in 0.5f64..6.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Geometry::unit([5, 4, 1]);
            let maps: Vec<LabelMap> = (0..n).map(|_| LabelMap::from_fn(g, |_| rng.random_bool(0.5))).collect();
            let refs: Vec<&LabelMap> = maps.iter().collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();
            let a = label_prior(&refs, &w, q).unwrap();
            let b = label_prior(&refs, &ws, q).unwrap();
            let eq = label_prior(&refs, &vec![0.7; n], q).unwrap();
            let mv = majority_vote(&refs).unwrap();
            for i in 0..g.len() {
                prop_assert!((a.data()[i] - b.data()[i]).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a.data()[i]));
                let frac = maps.iter().filter(|m| m.data()[i]).count() as f64 / n as f64;
                prop_assert!((eq.data()[i] - frac).abs() < 1e-12);
                prop_assert_eq!(mv.data()[i], eq.data()[i] > 0.5 + 1e-12);
            }
        }

        #[test]
        fn staple_log_likelihood_never_decreases(seed in any::<u64>(), raters in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Geometry::unit([6, 6, 2]);
            let truth = LabelMap::from_fn(g, |c| c[0] + c[1] < 6);
            let maps: Vec<LabelMap> = (0..raters)
                .map(|_| {
                    let flip = rng.random_range(0.0..0.4);
                    LabelMap::from_fn(g, |c| truth.at(c[0], c[1], c[2]) ^ rng.random_bool(flip))
                })
                .collect();
            let refs: Vec<&LabelMap> = maps.iter().collect();
            prop_assume!(refs.iter().any(|m| m.count() > 0) && refs.iter().any(|m| m.count() < g.len()));
            let r = staple_em(&refs, &StapleParams::default()).unwrap();
            for w in r.log_likelihood.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{:?}", r.log_likelihood);
            }
            for (&p, &q) in r.sensitivity.iter().zip(&r.specificity) {
                prop_assert!((0.01..=0.99).contains(&p) && (0.01..=0.99).contains(&q));
            }
        }
    }

    #[test]
    fn staple_unanimous_raters() {
        let g = Geometry::unit([4, 4, 1]);
        let m = LabelMap::from_fn(g, |c| c[0] < 2);
        let r = staple_em(&[&m, &m, &m], &StapleParams::default()).unwrap();
        assert_eq!(r.labels, m);
        assert!(r.sensitivity.iter().chain(&r.specificity).all(|&v| v == 0.99));
    }

    #[test]
    fn staple_rejects_complement_rater() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Geometry::unit([4, 4, 1]);
        let truth = LabelMap::from_fn(g, |_| rng.random_bool(0.5));
        let comp = LabelMap::new(g, truth.data().iter().map(|b| !b).collect()).unwrap();
        let r = staple_em(&[&truth, &truth, &comp, &truth], &StapleParams::default()).unwrap();
        assert_eq!(r.labels, truth);
        assert!(r.sensitivity[2] <= 0.011 && r.specificity[2] <= 0.011);
    }

    /// Scalar EM written out directly from the binary rater model.
    fn staple_oracle(votes: &[Vec<bool>], iters: usize) -> Vec<f64> {
        let n = votes[0].len();
        let r = votes.len();
        let pi = votes.iter().flatten().filter(|&&v| v).count() as f64 / (n * r) as f64;
        let (mut p, mut q) = (vec![0.99; r], vec![0.99; r]);
        let mut w = vec![0.0; n];
        for it in 0..=iters {
            for i in 0..n {
                let mut a = pi;
                let mut b = 1.0 - pi;
                for j in 0..r {
                    a *= if votes[j][i] { p[j] } else { 1.0 - p[j] };
                    b *= if votes[j][i] { 1.0 - q[j] } else { q[j] };
                }
                w[i] = a / (a + b);
            }
            if it == iters {
                break;
            }
            let sw: f64 = w.iter().sum();
            let sb: f64 = w.iter().map(|x| 1.0 - x).sum();
            for j in 0..r {
                let tp: f64 = (0..n).filter(|&i| votes[j][i]).map(|i| w[i]).sum();
                let tn: f64 = (0..n).filter(|&i| !votes[j][i]).map(|i| 1.0 - w[i]).sum();
                p[j] = (tp / sw).clamp(0.01, 0.99);
                q[j] = (tn / sb).clamp(0.01, 0.99);
            }
        }
        w
    }

    #[test]
    fn single_disagreement_follows_weighted_majority() {
        let g = Geometry::unit([3, 3, 1]);
        let base = LabelMap::from_fn(g, |c| c[0] >= 1 && c[1] >= 1);
        let mut odd = base.clone();
        odd.data_mut()[4] = false;
        let maps = [&base, &base, &odd, &base, &base];
        let r = staple_em(&maps, &StapleParams { max_iterations: 3, tolerance: 0.0, ..Default::default() }).unwrap();
        let votes: Vec<Vec<bool>> = maps.iter().map(|m| m.data().to_vec()).collect();
        let oracle = staple_oracle(&votes, 3);
        for (a, b) in r.posterior.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(r.labels.data()[4]);
        let full = staple_em(&maps, &StapleParams::default()).unwrap();
        assert_eq!(full.labels, base);
    }

    #[test]
    fn staple_needs_both_classes() {
        let g = Geometry::unit([2, 2, 1]);
        let e = LabelMap::empty(g);
        assert!(staple_em(&[&e, &e], &StapleParams::default()).is_err());
        assert!(staple_em(&[&e], &StapleParams::default()).is_err());
    }
}
