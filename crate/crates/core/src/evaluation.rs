//! Trial scoring and verification metrics.
//!
//! Threshold convention: a trial is accepted when `score ≥ threshold`.
//! FNR(t) is the fraction of target scores below `t`; FPR(t) the fraction of
//! nontarget scores at or above `t`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_trials, Corpus, Label, Trial, TrialType};
use crate::numcore::NumError;
use crate::objectives::cosine_similarity;
use crate::postnet::{Mode, PostNet, PostNetError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one target and one nontarget trial (got {targets} and {nontargets})")]
    SingleClass { targets: usize, nontargets: usize },
    #[error("degenerate embedding for utterance {utt_id}: {source}")]
    Degenerate { utt_id: String, source: NumError },
    #[error(transparent)]
    PostNet(#[from] PostNetError),
    #[error("relative change undefined for a clean EER of 0")]
    UndefinedRatio,
    #[error("non-finite score")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

/// Cosine similarity of EVAL-mode post-processed embeddings. Each utterance is
/// passed through the network once.
pub fn score_trials<T: Scalar>(
    net: &PostNet<T>,
    corpus: &Corpus,
    trials: &[Trial],
) -> Result<Vec<ScoredTrial>, EvalError> {
    let mut cache: Vec<Option<crate::numcore::Vector<T>>> = vec![None; corpus.len()];
    let mut embed = |i: usize| -> Result<crate::numcore::Vector<T>, EvalError> {
        if let Some(v) = &cache[i] {
            return Ok(v.clone());
        }
        let u = corpus.utterance(i);
        let x = crate::numcore::Vector::new(u.embedding.as_slice().iter().map(|&v| T::of(v)).collect())
            .map_err(|source| EvalError::Degenerate {
                utt_id: u.utt_id.clone(),
                source,
            })?;
        let y = net.forward(&x, &mut Mode::Eval)?;
        cache[i] = Some(y.clone());
        Ok(y)
    };
    trials
        .iter()
        .map(|t| {
            let (e, s) = (embed(t.enroll)?, embed(t.test)?);
            let score = cosine_similarity(&e, &s).map_err(|source| {
                let bad = if e.norm() > T::eps_norm() { t.test } else { t.enroll };
                EvalError::Degenerate {
                    utt_id: corpus.utterance(bad).utt_id.clone(),
                    source,
                }
            })?;
            Ok(ScoredTrial {
                trial: *t,
                score: score.to_f64_lossy(),
            })
        })
        .collect()
}

/// Splits scores by label, rejecting single-class input.
pub fn split_scores(scored: &[ScoredTrial]) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for s in scored {
        if !s.score.is_finite() {
            return Err(EvalError::NonFinite);
        }
        match s.trial.label {
            Label::Target => targets.push(s.score),
            Label::Nontarget => nontargets.push(s.score),
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(EvalError::SingleClass {
            targets: targets.len(),
            nontargets: nontargets.len(),
        });
    }
    Ok((targets, nontargets))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub tpr: f64,
}

/// Operating points in increasing threshold order: one per unique score
/// (the lowest gives FPR = TPR = 1) followed by the `+∞` point (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr,fnr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.threshold, p.fpr, p.tpr, p.fnr));
        }
        out
    }

    /// Trapezoidal area under TPR over FPR.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[0].fpr - w[1].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
            .sum()
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// ROC from raw score lists.
pub fn roc_from_scores(targets: &[f64], nontargets: &[f64]) -> RocCurve {
    let t = sorted(targets.to_vec());
    let n = sorted(nontargets.to_vec());
    let mut thresholds: Vec<f64> = t.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nt, nn) = (t.len() as f64, n.len() as f64);
    let mut points: Vec<RocPoint> = thresholds
        .into_iter()
        .map(|th| {
            let t_below = t.partition_point(|&s| s < th) as f64;
            let n_below = n.partition_point(|&s| s < th) as f64;
            let fnr = t_below / nt;
            RocPoint {
                threshold: th,
                fpr: (nn - n_below) / nn,
                fnr,
                tpr: 1.0 - fnr,
            }
        })
        .collect();
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        fnr: 1.0,
        tpr: 0.0,
    });
    RocCurve { points }
}

pub fn compute_roc(scored: &[ScoredTrial]) -> Result<RocCurve, EvalError> {
    let (t, n) = split_scores(scored)?;
    Ok(roc_from_scores(&t, &n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Crossing of FPR and FNR along the threshold sweep, linearly interpolated
/// between the bracketing thresholds.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Eer {
    let roc = roc_from_scores(targets, nontargets);
    let pts = &roc.points;
    // FPR − FNR starts at 1 (lowest threshold) and ends at −1 (+∞).
    let k = pts
        .iter()
        .position(|p| p.fpr - p.fnr <= 0.0)
        .expect("the +inf point always has FPR − FNR = −1");
    let cur = pts[k];
    let d1 = cur.fpr - cur.fnr;
    if d1 == 0.0 || k == 0 {
        return Eer {
            eer: cur.fpr,
            threshold: cur.threshold,
        };
    }
    let prev = pts[k - 1];
    let d0 = prev.fpr - prev.fnr;
    let lambda = d0 / (d0 - d1);
    let eer = prev.fpr + lambda * (cur.fpr - prev.fpr);
    let threshold = if cur.threshold.is_finite() {
        prev.threshold + lambda * (cur.threshold - prev.threshold)
    } else {
        prev.threshold
    };
    Eer { eer, threshold }
}

pub fn compute_eer(scored: &[ScoredTrial]) -> Result<Eer, EvalError> {
    let (t, n) = split_scores(scored)?;
    Ok(eer_from_scores(&t, &n))
}

pub fn auc_from_scores(targets: &[f64], nontargets: &[f64]) -> f64 {
    roc_from_scores(targets, nontargets).area()
}

/// Area under the ROC curve, equal to P(target > nontarget) + ½ P(tie).
pub fn compute_auc(scored: &[ScoredTrial]) -> Result<f64, EvalError> {
    let (t, n) = split_scores(scored)?;
    Ok(auc_from_scores(&t, &n))
}

/// `|noisy − clean| / clean` as a plain ratio.
pub fn relative_change(eer_noisy: f64, eer_clean: f64) -> Result<f64, EvalError> {
    if eer_clean == 0.0 {
        return Err(EvalError::UndefinedRatio);
    }
    Ok((eer_noisy - eer_clean).abs() / eer_clean)
}

/// Metrics of one trial type in one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeResult {
    pub eer: f64,
    pub auc: f64,
    pub n_trials: usize,
}

pub type RunResult = BTreeMap<TrialType, TypeResult>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub eer_mean: f64,
    pub eer_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub runs: usize,
    pub n_trials: usize,
}

/// Per trial type summary over reruns, keyed by the snake_case type name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: usize,
    pub trial_types: BTreeMap<String, MetricSummary>,
}

impl EvalReport {
    pub fn get(&self, t: TrialType) -> Option<&MetricSummary> {
        self.trial_types.get(t.as_str())
    }

    /// Human-readable table, metrics in percent.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>18} {:>18} {:>8}\n",
            "trial", "EER % (mean±std)", "AUC % (mean±std)", "trials"
        );
        for t in TrialType::ALL {
            if let Some(m) = self.get(t) {
                out.push_str(&format!(
                    "{:<10} {:>18} {:>18} {:>8}\n",
                    t.as_str(),
                    format!("{:.2} ± {:.2}", 100.0 * m.eer_mean, 100.0 * m.eer_std),
                    format!("{:.2} ± {:.2}", 100.0 * m.auc_mean, 100.0 * m.auc_std),
                    m.n_trials
                ));
            }
        }
        out
    }
}

/// Mean and sample standard deviation (n − 1); the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_runs(runs: &[RunResult]) -> EvalReport {
    let mut trial_types = BTreeMap::new();
    let types: std::collections::BTreeSet<TrialType> = runs.iter().flat_map(|r| r.keys().copied()).collect();
    for t in types {
        let rs: Vec<&TypeResult> = runs.iter().filter_map(|r| r.get(&t)).collect();
        let eers: Vec<f64> = rs.iter().map(|r| r.eer).collect();
        let aucs: Vec<f64> = rs.iter().map(|r| r.auc).collect();
        let (eer_mean, eer_std) = mean_std(&eers);
        let (auc_mean, auc_std) = mean_std(&aucs);
        trial_types.insert(
            t.as_str().to_string(),
            MetricSummary {
                eer_mean,
                eer_std,
                auc_mean,
                auc_std,
                runs: rs.len(),
                n_trials: rs.first().map_or(0, |r| r.n_trials),
            },
        );
    }
    EvalReport {
        runs: runs.len(),
        trial_types,
    }
}

/// Seed of rerun `run` for trial type `t`.
pub fn trial_seed(seed: u64, run: usize, t: TrialType) -> u64 {
    let idx = TrialType::ALL.iter().position(|x| *x == t).unwrap_or(0) as u64;
    seed.wrapping_mul(1_000_003)
        .wrapping_add(run as u64 * 16)
        .wrapping_add(idx)
}

/// Builds, scores and measures every requested trial type for one run.
pub fn evaluate_run<T: Scalar>(
    net: &PostNet<T>,
    corpus: &Corpus,
    types: &[TrialType],
    seed: u64,
    run: usize,
) -> Result<RunResult, EvalError> {
    let mut out = RunResult::new();
    for &t in types {
        let list = build_trials(corpus, t, trial_seed(seed, run, t));
        let scored = score_trials(net, corpus, &list.trials)?;
        let (ts, ns) = split_scores(&scored)?;
        out.insert(
            t,
            TypeResult {
                eer: eer_from_scores(&ts, &ns).eer,
                auc: auc_from_scores(&ts, &ns),
                n_trials: scored.len(),
            },
        );
    }
    Ok(out)
}

/// `runs` reseeded trial constructions over one fixed network.
pub fn evaluate<T: Scalar>(
    net: &PostNet<T>,
    corpus: &Corpus,
    types: &[TrialType],
    runs: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let results = (0..runs)
        .map(|r| evaluate_run(net, corpus, types, seed, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate_runs(&results))
}
