//! Two-way random-effects ANOVA and intraclass correlation, with the agent
//! treated as one more coder.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{RatingMatrix, RatingMatrixBuild};

pub const DEFAULT_OUTLIER_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReliabilityError {
    #[error("rating matrix needs at least 2 subjects and 2 raters, got {n}x{k}")]
    TooSmall { n: usize, k: usize },
    #[error("rating matrix has zero total variance")]
    DegenerateMatrix,
    #[error("ICC denominator is not positive")]
    UndefinedIcc,
    #[error("leave-one-out needs at least 3 raters, got {0}")]
    TooFewRaters(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaSummary {
    pub msr: f64,
    pub msc: f64,
    pub mse: f64,
    pub n: usize,
    pub k: usize,
}

pub fn two_way_anova(m: &RatingMatrix) -> Result<AnovaSummary, ReliabilityError> {
    let n = m.n_subjects();
    let k = m.n_raters();
    if n < 2 || k < 2 {
        return Err(ReliabilityError::TooSmall { n, k });
    }
    let first = m.cells[0][0];
    if m.cells.iter().flatten().all(|&x| x == first) {
        return Err(ReliabilityError::DegenerateMatrix);
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = m.cells.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = m.cells.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| m.cells.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();

    let sst: f64 = m.cells.iter().flatten().map(|x| (x - grand).powi(2)).sum();
    let ssr = kf * row_means.iter().map(|r| (r - grand).powi(2)).sum::<f64>();
    let ssc = nf * col_means.iter().map(|c| (c - grand).powi(2)).sum::<f64>();
    if sst == 0.0 {
        return Err(ReliabilityError::DegenerateMatrix);
    }

    let mut mse = (sst - ssr - ssc) / ((nf - 1.0) * (kf - 1.0));
    // Rounding can push an exact zero slightly negative.
    if mse < 0.0 && mse >= -1e-12 * sst.max(1.0) {
        mse = 0.0;
    }
    Ok(AnovaSummary {
        msr: ssr / (nf - 1.0),
        msc: ssc / (kf - 1.0),
        mse: mse.max(0.0),
        n,
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum IccVariant {
    /// Single rater, absolute agreement.
    #[default]
    #[serde(rename = "ICC(2,1)")]
    Single,
    /// Mean of k raters, absolute agreement.
    #[serde(rename = "ICC(2,k)")]
    Average,
}

impl fmt::Display for IccVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "ICC(2,1)",
            Self::Average => "ICC(2,k)",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IccResult {
    pub variant: IccVariant,
    pub value: f64,
    pub anova: AnovaSummary,
}

/// ICC from precomputed mean squares.
pub fn icc_from_anova(a: &AnovaSummary, variant: IccVariant) -> Result<f64, ReliabilityError> {
    let (n, k) = (a.n as f64, a.k as f64);
    let denom = match variant {
        IccVariant::Single => a.msr + (k - 1.0) * a.mse + k * (a.msc - a.mse) / n,
        IccVariant::Average => a.msr + (a.msc - a.mse) / n,
    };
    let scale = a.msr + a.msc + a.mse;
    if denom.is_nan() || denom <= 1e-12 * scale {
        return Err(ReliabilityError::UndefinedIcc);
    }
    Ok((a.msr - a.mse) / denom)
}

pub fn icc(m: &RatingMatrix, variant: IccVariant) -> Result<IccResult, ReliabilityError> {
    let anova = two_way_anova(m)?;
    Ok(IccResult {
        variant,
        value: icc_from_anova(&anova, variant)?,
        anova,
    })
}

/// Fraction of subjects on which every rater gives the same rating. An empty
/// matrix scores 0.
pub fn exact_agreement(m: &RatingMatrix) -> f64 {
    if m.cells.is_empty() {
        return 0.0;
    }
    let unanimous = m
        .cells
        .iter()
        .filter(|row| row.windows(2).all(|w| w[0] == w[1]))
        .count();
    unanimous as f64 / m.cells.len() as f64
}

/// ICC(2,1) of the matrix with each rater removed in turn, keyed by rater id
/// in column order. `None` marks a submatrix whose ICC is undefined.
pub fn coder_influence(m: &RatingMatrix) -> Result<IndexMap<String, Option<f64>>, ReliabilityError> {
    let k = m.n_raters();
    if k < 3 {
        return Err(ReliabilityError::TooFewRaters(k));
    }
    Ok((0..k)
        .map(|j| {
            let value = icc(&m.without_rater(j), IccVariant::Single).ok().map(|r| r.value);
            (m.raters[j].clone(), value)
        })
        .collect())
}

/// Raters whose removal raises ICC by more than `threshold`.
pub fn outlier_coders(
    full_icc: f64,
    leave_one_out: &IndexMap<String, Option<f64>>,
    threshold: f64,
) -> Vec<String> {
    leave_one_out
        .iter()
        .filter(|(_, v)| v.is_some_and(|v| v - full_icc > threshold))
        .map(|(c, _)| c.clone())
        .collect()
}

/// One entry of `reliability.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReliability {
    pub item_id: String,
    pub variant: IccVariant,
    pub icc: Option<f64>,
    /// ICC(2,k) over the same matrix, reported alongside the headline variant.
    pub icc_average: Option<f64>,
    pub anova: Option<AnovaSummary>,
    pub exact_agreement: f64,
    pub leave_one_out: IndexMap<String, Option<f64>>,
    pub outliers: Vec<String>,
    pub raters: Vec<String>,
    pub n_subjects: usize,
    pub dropped_subjects: usize,
    /// Why `icc` is null, when it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub variant: IccVariant,
    pub outlier_threshold: f64,
    pub items: Vec<ItemReliability>,
}

impl ReliabilityReport {
    pub fn item(&self, item_id: &str) -> Option<&ItemReliability> {
        self.items.iter().find(|i| i.item_id == item_id)
    }
}

/// Full analysis for one item. Statistical failures are recorded in the
/// entry rather than returned, so one degenerate item does not hide the
/// others.
pub fn analyze_item(build: &RatingMatrixBuild, variant: IccVariant, threshold: f64) -> ItemReliability {
    let m = &build.matrix;
    let (icc_value, anova, note) = match icc(m, variant) {
        Ok(r) => (Some(r.value), Some(r.anova), None),
        Err(e) => (None, two_way_anova(m).ok(), Some(e.to_string())),
    };
    let icc_average = anova.and_then(|a| icc_from_anova(&a, IccVariant::Average).ok());
    let leave_one_out = coder_influence(m).unwrap_or_default();
    let outliers = icc_value
        .map(|full| outlier_coders(full, &leave_one_out, threshold))
        .unwrap_or_default();
    ItemReliability {
        item_id: m.item_id.clone(),
        variant,
        icc: icc_value,
        icc_average,
        anova,
        exact_agreement: exact_agreement(m),
        leave_one_out,
        outliers,
        raters: m.raters.clone(),
        n_subjects: m.n_subjects(),
        dropped_subjects: build.dropped_subjects,
        note,
    }
}
