//! Density-based Top-N% selection over per-instance gradient scalars.
//!
//! A Gaussian KDE with Silverman's bandwidth is fitted to the scalar of each
//! instance and evaluated at every sample point (self-term included). The
//! densest instances are kept. Ablation strategies reuse the same size and
//! tie-break rules.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradstats::GradientRecord;

pub const TIE_BREAK: &str = "score desc, original index asc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityScore {
    pub instance_id: String,
    pub f_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedEntry {
    pub id: String,
    /// Position in the candidate list the selection was made from.
    pub index: usize,
    /// 1-based rank in score order.
    pub rank: usize,
    /// The ranking score (density for density strategies).
    pub f_value: f64,
    pub g_grads: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: String,
    pub fraction_percent: f64,
    pub candidates: usize,
    /// Sorted by original index.
    pub selected: Vec<SelectedEntry>,
    pub bandwidth: Option<f64>,
    pub tie_break: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub stratum_counts: BTreeMap<String, usize>,
}

impl SelectionResult {
    pub fn ids(&self) -> Vec<&str> {
        self.selected.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|e| e.index).collect()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.selected {
            let line = serde_json::json!({
                "id": e.id,
                "rank": e.rank,
                "f_value": e.f_value,
                "g_grads": e.g_grads,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// Sidecar metadata; `records_hash` identifies the input it was made from.
    pub fn metadata_json(&self, records_hash: Option<&str>) -> serde_json::Value {
        serde_json::json!({
            "strategy": self.strategy,
            "fraction_percent": self.fraction_percent,
            "candidates": self.candidates,
            "selected": self.selected.len(),
            "bandwidth": self.bandwidth,
            "tie_break": self.tie_break,
            "seed": self.seed,
            "records_hash": records_hash,
            "stratum_counts": self.stratum_counts,
        })
    }

    /// Writes `<stem>.jsonl` and `<stem>.meta.json`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str, records_hash: Option<&str>) -> Result<()> {
        let dir = dir.as_ref();
        let data = dir.join(format!("{stem}.jsonl"));
        fs::write(&data, self.to_jsonl()).map_err(|e| Error::io(&data, e))?;
        let meta = dir.join(format!("{stem}.meta.json"));
        let text = serde_json::to_string_pretty(&self.metadata_json(records_hash))?;
        fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
    }
}

/// Reads the ids of a selection JSONL file.
pub fn read_selection_ids(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let id = v.get("id").and_then(|x| x.as_str()).ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "missing field id".into(),
        })?;
        ids.push(id.to_string());
    }
    Ok(ids)
}

/// `max(1, round_half_up(k * percent / 100))`, capped at `k`.
pub fn subset_size(k: usize, percent: f64) -> Result<usize> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Invalid(format!("fraction must lie in (0, 100], got {percent}")));
    }
    if k == 0 {
        return Err(Error::Invalid("nothing to select from".into()));
    }
    let raw = (k as f64 * percent / 100.0 + 0.5).floor() as usize;
    Ok(raw.clamp(1, k))
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Silverman's rule: `0.9 * min(std, IQR / 1.34) * n^(-1/5)`; falls back to the
/// standard deviation alone when the IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Invalid("bandwidth needs at least two values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite value in density input".into()));
    }
    let std = sample_std(values);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    if !(spread > 0.0) {
        return Err(Error::ZeroSpread);
    }
    Ok(0.9 * spread * (values.len() as f64).powf(-0.2))
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Gaussian KDE of `values` evaluated at `x`.
pub fn kde_density_at(values: &[f64], h: f64, x: f64) -> f64 {
    let sum: f64 = values.iter().map(|&v| normal_pdf((x - v) / h)).sum();
    sum / (values.len() as f64 * h)
}

/// Density at every sample point.
pub fn kde_values(values: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Invalid(format!("bandwidth must be positive, got {h}")));
    }
    Ok(values.iter().map(|&x| kde_density_at(values, h, x)).collect())
}

pub fn kde_scores(ids: &[String], values: &[f64], h: f64) -> Result<Vec<DensityScore>> {
    if ids.len() != values.len() {
        return Err(Error::Invalid("ids and values differ in length".into()));
    }
    Ok(ids
        .iter()
        .zip(kde_values(values, h)?)
        .map(|(id, f)| DensityScore {
            instance_id: id.clone(),
            f_value: f,
        })
        .collect())
}

/// Indices of the `size` highest scores (ties to the lower index), in rank order.
pub fn rank_descending(scores: &[f64], size: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(size);
    order
}

/// Builds a result from indices given in rank order.
pub(crate) fn result_from_ranked(
    strategy: &str,
    percent: f64,
    ids: &[String],
    ranked: &[usize],
    scores: &[f64],
    g_grads: Option<&[f64]>,
) -> SelectionResult {
    let mut selected: Vec<SelectedEntry> = ranked
        .iter()
        .enumerate()
        .map(|(r, &i)| SelectedEntry {
            id: ids[i].clone(),
            index: i,
            rank: r + 1,
            f_value: scores[i],
            g_grads: g_grads.map(|g| g[i]),
        })
        .collect();
    selected.sort_by_key(|e| e.index);
    SelectionResult {
        strategy: strategy.to_string(),
        fraction_percent: percent,
        candidates: ids.len(),
        selected,
        bandwidth: None,
        tie_break: TIE_BREAK.to_string(),
        seed: None,
        stratum_counts: BTreeMap::new(),
    }
}

/// Top-N% of instances by density.
pub fn select_top_density(scores: &[DensityScore], percent: f64) -> Result<SelectionResult> {
    if scores.is_empty() {
        return Err(Error::Invalid("no scores to select from".into()));
    }
    let size = subset_size(scores.len(), percent)?;
    let ids: Vec<String> = scores.iter().map(|s| s.instance_id.clone()).collect();
    let f: Vec<f64> = scores.iter().map(|s| s.f_value).collect();
    let ranked = rank_descending(&f, size);
    Ok(result_from_ranked("density", percent, &ids, &ranked, &f, None))
}

/// KDE over `values` followed by density Top-N%. Shared by the gradient
/// strategies and the perplexity baseline.
pub fn select_by_density(strategy: &str, ids: &[String], values: &[f64], percent: f64, g_grads: Option<&[f64]>) -> Result<SelectionResult> {
    let h = silverman_bandwidth(values)?;
    let f = kde_values(values, h)?;
    let size = subset_size(ids.len(), percent)?;
    let ranked = rank_descending(&f, size);
    let mut res = result_from_ranked(strategy, percent, ids, &ranked, &f, g_grads);
    res.bandwidth = Some(h);
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Grads,
    EmbOnly,
    LmOnly,
    TopGrad,
    TailGrad,
    MidGrad,
    Weight,
    Weightr,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Grads,
        Strategy::EmbOnly,
        Strategy::LmOnly,
        Strategy::TopGrad,
        Strategy::TailGrad,
        Strategy::MidGrad,
        Strategy::Weight,
        Strategy::Weightr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Grads => "grads",
            Strategy::EmbOnly => "emb_only",
            Strategy::LmOnly => "lm_only",
            Strategy::TopGrad => "top_grad",
            Strategy::TailGrad => "tail_grad",
            Strategy::MidGrad => "mid_grad",
            Strategy::Weight => "weight",
            Strategy::Weightr => "weightr",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown strategy {s:?}")))
    }
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// 1-based descending ranks (largest value gets rank 1, ties by index).
pub fn descending_ranks(values: &[f64]) -> Vec<usize> {
    let order = rank_descending(values, values.len());
    let mut ranks = vec![0; values.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// `1/rank_emb + 1/rank_lm` per instance.
pub fn reciprocal_rank_sum(g_emb: &[f64], g_lm: &[f64]) -> Vec<f64> {
    let re = descending_ranks(g_emb);
    let rl = descending_ranks(g_lm);
    re.iter().zip(&rl).map(|(&a, &b)| 1.0 / a as f64 + 1.0 / b as f64).collect()
}

pub fn select_strategy(records: &[GradientRecord], strategy: Strategy, percent: f64) -> Result<SelectionResult> {
    if records.is_empty() {
        return Err(Error::Invalid("no gradient records".into()));
    }
    let ids: Vec<String> = records.iter().map(|r| r.instance_id.clone()).collect();
    let g: Vec<f64> = records.iter().map(|r| r.g_grads).collect();
    let emb: Vec<f64> = records.iter().map(|r| r.g_emb).collect();
    let lm: Vec<f64> = records.iter().map(|r| r.g_lm).collect();
    let name = strategy.name();
    let size = subset_size(records.len(), percent)?;
    match strategy {
        Strategy::Grads => select_by_density(name, &ids, &g, percent, Some(&g)),
        Strategy::EmbOnly => select_by_density(name, &ids, &emb, percent, Some(&g)),
        Strategy::LmOnly => select_by_density(name, &ids, &lm, percent, Some(&g)),
        Strategy::Weight => {
            let combined: Vec<f64> = min_max(&emb).iter().zip(min_max(&lm)).map(|(a, b)| a + b).collect();
            select_by_density(name, &ids, &combined, percent, Some(&g))
        }
        Strategy::Weightr => {
            let combined = reciprocal_rank_sum(&emb, &lm);
            select_by_density(name, &ids, &combined, percent, Some(&g))
        }
        Strategy::TopGrad => {
            let ranked = rank_descending(&g, size);
            Ok(result_from_ranked(name, percent, &ids, &ranked, &g, Some(&g)))
        }
        Strategy::TailGrad => {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let ranked = rank_descending(&neg, size);
            Ok(result_from_ranked(name, percent, &ids, &ranked, &g, Some(&g)))
        }
        Strategy::MidGrad => {
            // Ascending order, then the window of `size` centred on the median.
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let ascending = rank_descending(&neg, records.len());
            let start = (records.len() - size) / 2;
            let window = &ascending[start..start + size];
            Ok(result_from_ranked(name, percent, &ids, window, &g, Some(&g)))
        }
    }
}
