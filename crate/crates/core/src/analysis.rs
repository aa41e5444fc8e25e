//! Comparisons of trained models against the untrained baseline: per-pair
//! log-probability displacement, post-edit minus MT gaps, preference rates
//! with binomial confidence intervals, and paired bootstrap significance.
//!
//! All scores are average per-token log-probabilities of edited pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::rng;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Average log-probabilities of one pair's post-edit and MT under one model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: usize,
    pub split: Split,
    pub pe: f64,
    pub mt: f64,
}

/// One pair scored by a named model and by the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScoreRecord {
    pub id: usize,
    pub split: Split,
    pub model: String,
    pub pe: f64,
    pub mt: f64,
    pub base_pe: f64,
    pub base_mt: f64,
}

impl PairScoreRecord {
    pub fn gap(&self) -> f64 {
        self.pe - self.mt
    }

    fn validate(&self) -> Result<()> {
        for v in [self.pe, self.mt, self.base_pe, self.base_mt] {
            if !(v.is_finite() && v <= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "pair {} of {}: log-probability {v} is not finite and non-positive",
                    self.id, self.model
                )));
            }
        }
        Ok(())
    }
}

/// Pairs model scores with baseline scores on the same pairs, in order.
pub fn join(model: &str, scores: &[PairScore], baseline: &[PairScore]) -> Result<Vec<PairScoreRecord>> {
    if scores.len() != baseline.len() {
        return Err(Error::RecordMismatch(format!(
            "{model} has {} records, baseline {}",
            scores.len(),
            baseline.len()
        )));
    }
    scores
        .iter()
        .zip(baseline)
        .map(|(s, b)| {
            if s.id != b.id || s.split != b.split {
                return Err(Error::RecordMismatch(format!(
                    "{model} record {} ({}) is paired with baseline record {} ({})",
                    s.id, s.split, b.id, b.split
                )));
            }
            let r = PairScoreRecord {
                id: s.id,
                split: s.split,
                model: model.to_string(),
                pe: s.pe,
                mt: s.mt,
                base_pe: b.pe,
                base_mt: b.mt,
            };
            r.validate()?;
            Ok(r)
        })
        .collect()
}

/// Lower quartile, median and upper quartile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quantile by linear interpolation between order statistics at position
/// q·(n−1), so [1,2,3,4] has quartiles 1.75, 2.5, 3.25.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::Empty("values for quartiles"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Quartiles {
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
    })
}

/// Per-pair change of the post-edit and MT scores relative to the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub ids: Vec<usize>,
    pub pe: Vec<f64>,
    pub mt: Vec<f64>,
    pub pe_quartiles: Quartiles,
    pub mt_quartiles: Quartiles,
}

pub fn displacement(records: &[PairScoreRecord]) -> Result<Displacement> {
    let pe: Vec<f64> = records.iter().map(|r| r.pe - r.base_pe).collect();
    let mt: Vec<f64> = records.iter().map(|r| r.mt - r.base_mt).collect();
    Ok(Displacement {
        ids: records.iter().map(|r| r.id).collect(),
        pe_quartiles: quartiles(&pe)?,
        mt_quartiles: quartiles(&mt)?,
        pe,
        mt,
    })
}

/// Mean of pe − mt over the records of one split.
pub fn pe_mt_gap(records: &[PairScoreRecord], split: Split) -> Result<f64> {
    let gaps: Vec<f64> = records.iter().filter(|r| r.split == split).map(PairScoreRecord::gap).collect();
    if gaps.is_empty() {
        return Err(Error::InvalidArgument(format!("no records in the {split} split")));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    /// Normal approximation: rate ± z·sqrt(rate(1−rate)/n).
    #[default]
    Wald,
    /// Wilson score interval, better behaved for small n or extreme rates.
    Wilson,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    pub n: usize,
    pub preferred: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PreferenceSummary {
    pub fn from_counts(preferred: usize, n: usize, method: CiMethod) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("preference records"));
        }
        if preferred > n {
            return Err(Error::InvalidArgument(format!("{preferred} preferred out of {n}")));
        }
        let nf = n as f64;
        let rate = preferred as f64 / nf;
        let (lo, hi) = match method {
            CiMethod::Wald => {
                let half = Z95 * (rate * (1.0 - rate) / nf).sqrt();
                (rate - half, rate + half)
            }
            CiMethod::Wilson => {
                let z2 = Z95 * Z95;
                let centre = (rate + z2 / (2.0 * nf)) / (1.0 + z2 / nf);
                let half = Z95 / (1.0 + z2 / nf) * (rate * (1.0 - rate) / nf + z2 / (4.0 * nf * nf)).sqrt();
                (centre - half, centre + half)
            }
        };
        Ok(Self {
            n,
            preferred,
            rate,
            ci_low: lo.clamp(0.0, rate),
            ci_high: hi.clamp(rate, 1.0),
        })
    }

    /// Significance by the non-overlapping-intervals convention.
    pub fn significantly_above(&self, other: &Self) -> bool {
        self.ci_low > other.ci_high
    }
}

/// Share of pairs whose post-edit scores strictly above its MT; ties count
/// as not preferred.
pub fn preference_rate(records: &[PairScoreRecord], method: CiMethod) -> Result<PreferenceSummary> {
    let preferred = records.iter().filter(|r| r.pe > r.mt).count();
    PreferenceSummary::from_counts(preferred, records.len(), method)
}

/// Same, for the baseline scores carried by each record.
pub fn baseline_preference_rate(records: &[PairScoreRecord], method: CiMethod) -> Result<PreferenceSummary> {
    let preferred = records.iter().filter(|r| r.base_pe > r.base_mt).count();
    PreferenceSummary::from_counts(preferred, records.len(), method)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub n: usize,
    pub resamples: usize,
    pub alpha: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Share of resamples in which system a did not beat system b.
    pub p_value: f64,
    pub significant: bool,
}

/// Paired bootstrap over segments: each resample draws segment indices with
/// replacement and a wins when its summed score exceeds b's. Resample r uses
/// its own seed derived from (`seed`, r).
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, alpha: f64, seed: u64) -> Result<SignificanceReport> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Empty("segment scores"));
    }
    if resamples < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 resamples, got {resamples}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = a.len();
    let mut not_won = 0;
    for r in 0..resamples {
        let mut rng = rng::seeded(rng::derive(seed, r as u64));
        let (mut sa, mut sb) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sa += a[i];
            sb += b[i];
        }
        if sa <= sb {
            not_won += 1;
        }
    }
    let p_value = not_won as f64 / resamples as f64;
    Ok(SignificanceReport {
        n,
        resamples,
        alpha,
        mean_a: a.iter().sum::<f64>() / n as f64,
        mean_b: b.iter().sum::<f64>() / n as f64,
        p_value,
        significant: p_value < alpha,
    })
}

/// Everything reported for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    /// Mean pe − mt gap per split.
    pub gaps: BTreeMap<Split, f64>,
    pub preferences: BTreeMap<Split, PreferenceSummary>,
    pub baseline_preferences: BTreeMap<Split, PreferenceSummary>,
    /// Displacement quartiles per split, post-edits then MT.
    pub displacement: BTreeMap<Split, (Quartiles, Quartiles)>,
}

pub fn summarize(model: &str, records: &[PairScoreRecord], method: CiMethod) -> Result<ModelSummary> {
    let mut s = ModelSummary {
        model: model.to_string(),
        gaps: BTreeMap::new(),
        preferences: BTreeMap::new(),
        baseline_preferences: BTreeMap::new(),
        displacement: BTreeMap::new(),
    };
    for split in Split::ALL {
        let rs: Vec<PairScoreRecord> = records.iter().filter(|r| r.split == split).cloned().collect();
        if rs.is_empty() {
            continue;
        }
        s.gaps.insert(split, pe_mt_gap(&rs, split)?);
        s.preferences.insert(split, preference_rate(&rs, method)?);
        s.baseline_preferences.insert(split, baseline_preference_rate(&rs, method)?);
        let d = displacement(&rs)?;
        s.displacement.insert(split, (d.pe_quartiles, d.mt_quartiles));
    }
    if s.gaps.is_empty() {
        return Err(Error::Empty("score records"));
    }
    Ok(s)
}

/// One entry of the pairwise significance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub report: SignificanceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub models: Vec<ModelSummary>,
    /// Segment metric used by the bootstrap comparisons.
    pub segment_metric: String,
    pub comparisons: Vec<Comparison>,
    /// For each model, the models it is significantly better than.
    pub better_than: BTreeMap<String, Vec<String>>,
}

/// Summaries of every model plus a bootstrap comparison of every ordered
/// pair of models on the given per-segment scores (all equally long).
pub fn analyze(
    runs: &[(String, Vec<PairScoreRecord>)],
    segments: &[(String, Vec<f64>)],
    segment_metric: &str,
    method: CiMethod,
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<AnalysisBundle> {
    let models = runs
        .iter()
        .map(|(m, rs)| summarize(m, rs, method))
        .collect::<Result<Vec<_>>>()?;
    let mut comparisons = Vec::new();
    let mut better_than: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (a, sa) in segments {
        let entry = better_than.entry(a.clone()).or_default();
        for (b, sb) in segments {
            if a == b {
                continue;
            }
            let report = paired_bootstrap(sa, sb, resamples, alpha, seed)?;
            if report.significant {
                entry.push(b.clone());
            }
            comparisons.push(Comparison {
                a: a.clone(),
                b: b.clone(),
                report,
            });
        }
    }
    Ok(AnalysisBundle {
        models,
        segment_metric: segment_metric.to_string(),
        comparisons,
        better_than,
    })
}

/// Writes `analysis.json`, `violin.csv` and `preferences.csv` into `dir`.
pub fn write_bundle(dir: &Path, bundle: &AnalysisBundle, runs: &[(String, Vec<PairScoreRecord>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(bundle)?;
    let path = dir.join("analysis.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let mut violin = String::from("model,split,id,d_pe,d_mt\n");
    for (model, records) in runs {
        for r in records {
            writeln!(violin, "{model},{},{},{},{}", r.split, r.id, r.pe - r.base_pe, r.mt - r.base_mt).unwrap();
        }
    }
    let path = dir.join("violin.csv");
    fs::write(&path, violin).map_err(|e| Error::io(&path, e))?;

    let mut prefs = String::from("model,split,rate,ci_low,ci_high\n");
    for m in &bundle.models {
        for (split, p) in &m.preferences {
            writeln!(prefs, "{},{split},{},{},{}", m.model, p.rate, p.ci_low, p.ci_high).unwrap();
        }
    }
    let path = dir.join("preferences.csv");
    fs::write(&path, prefs).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
