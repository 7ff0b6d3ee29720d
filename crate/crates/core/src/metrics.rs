//! Survival evaluation: curves from hazards, time-dependent concordance,
//! IPCW Brier score and log-likelihood, Kaplan-Meier, log-rank and risk
//! stratification.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{DrimError, Result};
use crate::losses::IntervalGrid;

/// Probability clamp inside the log-likelihood terms.
pub const LOG_EPS: f64 = 1e-7;

/// Per-patient survival probabilities at the end of every interval.
#[derive(Debug, Clone)]
pub struct SurvivalCurve {
    pub grid: IntervalGrid,
    /// N×P, `s[[i, k]] = prod_{j <= k} (1 - h[[i, j]])`.
    pub s: Array2<f64>,
}

impl SurvivalCurve {
    pub fn n_patients(&self) -> usize {
        self.s.nrows()
    }

    /// Predicted survival of patient `i` at time `t`: the value at the end
    /// of the interval containing `t`.
    pub fn at(&self, i: usize, t: f64) -> Result<f64> {
        Ok(self.s[[i, self.grid.interval_of(t)? - 1]])
    }
}

pub fn hazards_to_survival(hazards: &Array2<f64>, grid: &IntervalGrid) -> Result<SurvivalCurve> {
    if hazards.ncols() != grid.intervals() {
        return Err(DrimError::Data(format!(
            "hazard matrix has {} columns for {} intervals",
            hazards.ncols(),
            grid.intervals()
        )));
    }
    if hazards.iter().any(|h| !(0.0..=1.0).contains(h)) {
        return Err(DrimError::Data("hazards must lie in [0, 1]".into()));
    }
    let mut s = hazards.mapv(|h| 1.0 - h);
    for mut row in s.rows_mut() {
        let mut acc = 1.0;
        for v in row.iter_mut() {
            acc *= *v;
            *v = acc;
        }
    }
    Ok(SurvivalCurve {
        grid: grid.clone(),
        s,
    })
}

fn check_outcomes(n: usize, times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != n || events.len() != n {
        return Err(DrimError::Data(format!(
            "{n} predictions but {} times and {} events",
            times.len(),
            events.len()
        )));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(DrimError::Data(format!("invalid survival time {t}")));
    }
    Ok(())
}

/// Antolini's time-dependent concordance. Pair (i, j) is comparable when
/// `t_i < t_j` and i had the event, or the times tie with only i an event.
/// Patient i should have the lower predicted survival at its own time.
pub fn c_index_antolini(curve: &SurvivalCurve, times: &[f64], events: &[bool]) -> Result<f64> {
    let n = curve.n_patients();
    check_outcomes(n, times, events)?;
    let mut concordant = 0.0;
    let mut comparable = 0usize;
    for i in 0..n {
        if !events[i] {
            continue;
        }
        let col = curve.grid.interval_of(times[i])? - 1;
        let own = curve.s[[i, col]];
        for j in 0..n {
            let counts = times[i] < times[j] || (times[i] == times[j] && !events[j]);
            if j == i || !counts {
                continue;
            }
            comparable += 1;
            let other = curve.s[[j, col]];
            if own < other {
                concordant += 1.0;
            } else if own == other {
                concordant += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(DrimError::Data("no comparable pairs for the C-index".into()));
    }
    Ok(concordant / comparable as f64)
}

/// Product-limit survival estimate over the distinct event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmEstimate {
    pub times: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub survival: Vec<f64>,
}

impl KmEstimate {
    /// S(t), right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// S(t-), the limit from the left.
    pub fn before(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x < t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Kaplan-Meier estimator. Patients censored at an event time are still at
/// risk at that time.
pub fn km_estimate(times: &[f64], events: &[bool]) -> Result<KmEstimate> {
    if times.is_empty() || times.len() != events.len() {
        return Err(DrimError::Data("Kaplan-Meier needs matching, non-empty times and events".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut est = KmEstimate {
        times: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        survival: Vec::new(),
    };
    let mut remaining = times.len();
    let mut s = 1.0;
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut end = k;
        let mut d = 0;
        while end < order.len() && times[order[end]] == t {
            d += usize::from(events[order[end]]);
            end += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / remaining as f64;
            est.times.push(t);
            est.at_risk.push(remaining);
            est.events.push(d);
            est.survival.push(s);
        }
        remaining -= end - k;
        k = end;
    }
    Ok(est)
}

/// Evaluation times: interval midpoints no later than the last observed time.
pub fn eval_times(grid: &IntervalGrid, times: &[f64]) -> Vec<f64> {
    let last = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    grid.midpoints().into_iter().filter(|&m| m <= last).collect()
}

/// Time-resolved score plus its normalised integral.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedScore {
    pub per_time: Vec<f64>,
    pub integrated: f64,
    /// Terms skipped because the censoring survival was zero.
    pub dropped: usize,
}

fn integrate(eval: &[f64], values: &[f64]) -> f64 {
    if eval.len() == 1 {
        return values[0];
    }
    let span = eval[eval.len() - 1] - eval[0];
    let area: f64 = eval
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (v[0] + v[1]) * (t[1] - t[0]))
        .sum();
    area / span
}

/// Graf's inverse-probability-of-censoring weighting shared by the Brier
/// score and the log-likelihood. `died(s)` and `alive(s)` are the losses for
/// a patient who had the event by `t` and one still at risk after `t`.
fn ipcw_score(
    curve: &SurvivalCurve,
    times: &[f64],
    events: &[bool],
    eval: &[f64],
    died: impl Fn(f64) -> f64,
    alive: impl Fn(f64) -> f64,
) -> Result<IntegratedScore> {
    let n = curve.n_patients();
    check_outcomes(n, times, events)?;
    if eval.is_empty() {
        return Err(DrimError::Data("no evaluation times".into()));
    }
    if eval.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DrimError::Data("evaluation times must increase".into()));
    }
    if eval[0] < 0.0 || eval[eval.len() - 1] > curve.grid.t_max() {
        return Err(DrimError::Data("evaluation times outside the interval grid".into()));
    }
    let flipped: Vec<bool> = events.iter().map(|e| !e).collect();
    let censor = km_estimate(times, &flipped)?;
    let mut dropped = 0;
    let mut per_time = Vec::with_capacity(eval.len());
    for &t in eval {
        let g_t = censor.at(t);
        let mut total = 0.0;
        for i in 0..n {
            let s = curve.at(i, t)?;
            if times[i] <= t && events[i] {
                let g = censor.before(times[i]);
                if g > 0.0 {
                    total += died(s) / g;
                } else {
                    dropped += 1;
                }
            } else if times[i] > t {
                if g_t > 0.0 {
                    total += alive(s) / g_t;
                } else {
                    dropped += 1;
                }
            }
        }
        per_time.push(total / n as f64);
    }
    Ok(IntegratedScore {
        integrated: integrate(eval, &per_time),
        per_time,
        dropped,
    })
}

/// IPCW Brier score at every evaluation time and its integral.
pub fn brier_and_ibs(
    curve: &SurvivalCurve,
    times: &[f64],
    events: &[bool],
    eval: &[f64],
) -> Result<IntegratedScore> {
    ipcw_score(curve, times, events, eval, |s| s * s, |s| (1.0 - s) * (1.0 - s))
}

/// Integrated negative binomial log-likelihood, IPCW weighted.
pub fn inbll(curve: &SurvivalCurve, times: &[f64], events: &[bool], eval: &[f64]) -> Result<IntegratedScore> {
    let clip = |s: f64| s.clamp(LOG_EPS, 1.0 - LOG_EPS);
    ipcw_score(
        curve,
        times,
        events,
        eval,
        |s| -(1.0 - clip(s)).ln(),
        |s| -clip(s).ln(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRank {
    pub chi2: f64,
    pub p: f64,
}

/// Two-group log-rank test, chi-square with one degree of freedom.
pub fn logrank_test(a: (&[f64], &[bool]), b: (&[f64], &[bool])) -> Result<LogRank> {
    if a.0.is_empty() || b.0.is_empty() || a.0.len() != a.1.len() || b.0.len() != b.1.len() {
        return Err(DrimError::Data("log-rank needs two non-empty groups".into()));
    }
    let mut pooled: Vec<(f64, bool, bool)> = a
        .0
        .iter()
        .zip(a.1)
        .map(|(&t, &e)| (t, e, true))
        .chain(b.0.iter().zip(b.1).map(|(&t, &e)| (t, e, false)))
        .collect();
    if !pooled.iter().any(|p| p.1) {
        return Err(DrimError::Data("log-rank test with zero events".into()));
    }
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut n, mut n_a) = (pooled.len() as f64, a.0.len() as f64);
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    let mut k = 0;
    while k < pooled.len() {
        let t = pooled[k].0;
        let (mut d, mut d_a, mut leaving, mut leaving_a) = (0.0, 0.0, 0.0, 0.0);
        while k < pooled.len() && pooled[k].0 == t {
            let (_, event, in_a) = pooled[k];
            leaving += 1.0;
            if in_a {
                leaving_a += 1.0;
            }
            if event {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            k += 1;
        }
        if d > 0.0 {
            observed += d_a;
            expected += d * n_a / n;
            if n > 1.0 {
                variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leaving;
        n_a -= leaving_a;
    }
    let chi2 = if variance > 0.0 {
        (observed - expected).powi(2) / variance
    } else {
        0.0
    };
    Ok(LogRank {
        chi2,
        p: erfc((chi2 / 2.0).sqrt()),
    })
}

/// Average of concordance and one minus the integrated Brier score.
pub fn cs_score(cindex: f64, ibs: f64) -> f64 {
    (cindex + (1.0 - ibs)) / 2.0
}

/// How per-patient hazards are cumulated into a risk score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskScore {
    #[default]
    SumHazard,
    OneMinusSurvival,
}

pub fn risk_scores(hazards: &Array2<f64>, kind: RiskScore) -> Vec<f64> {
    hazards
        .rows()
        .into_iter()
        .map(|row| match kind {
            RiskScore::SumHazard => row.sum(),
            RiskScore::OneMinusSurvival => 1.0 - row.iter().map(|h| 1.0 - h).product::<f64>(),
        })
        .collect()
}

/// `true` marks high risk: a score strictly above the median. Ties and the
/// middle patient of an odd cohort stay low risk.
pub fn risk_stratify(hazards: &Array2<f64>, kind: RiskScore) -> Result<Vec<bool>> {
    let scores = risk_scores(hazards, kind);
    if scores.len() < 2 {
        return Err(DrimError::Data("risk stratification needs at least two patients".into()));
    }
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(scores.iter().map(|&s| s > median).collect())
}

/// One row of a metrics report. Log-rank fields are absent when a risk
/// group is empty or carries no events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cindex: f64,
    pub ibs: f64,
    pub inbll: f64,
    pub cs: f64,
    pub logrank_chi2: Option<f64>,
    pub logrank_p: Option<f64>,
}

/// Every metric for one set of hazard predictions.
pub fn evaluate(
    hazards: &Array2<f64>,
    times: &[f64],
    events: &[bool],
    grid: &IntervalGrid,
    risk: RiskScore,
) -> Result<MetricReport> {
    let curve = hazards_to_survival(hazards, grid)?;
    let cindex = c_index_antolini(&curve, times, events)?;
    let eval = eval_times(grid, times);
    let ibs = brier_and_ibs(&curve, times, events, &eval)?.integrated;
    let inbll = inbll(&curve, times, events, &eval)?.integrated;
    let groups = risk_stratify(hazards, risk)?;
    let pick = |high: bool| -> (Vec<f64>, Vec<bool>) {
        groups
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == high)
            .map(|(i, _)| (times[i], events[i]))
            .unzip()
    };
    let (ht, he) = pick(true);
    let (lt, le) = pick(false);
    let lr = logrank_test((&ht, &he), (&lt, &le)).ok();
    Ok(MetricReport {
        cindex,
        ibs,
        inbll,
        cs: cs_score(cindex, ibs),
        logrank_chi2: lr.map(|r| r.chi2),
        logrank_p: lr.map(|r| r.p),
    })
}
