//! Ventricular length curves, peak global longitudinal strain and
//! test–retest agreement.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{Point, TrajectorySet};

pub const GLS_SCHEMA: &str = "echotrack.gls/1";
pub const COHORT_SCHEMA: &str = "echotrack.cohort/1";

/// Polyline length through `points` in the given order.
pub fn ventricular_length(points: &[Point]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid(format!(
            "a ventricular length needs at least 2 points, got {}",
            points.len()
        )));
    }
    Ok(points.windows(2).map(|w| w[0].distance(w[1])).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlsReport {
    pub schema: String,
    /// Polyline length per frame, pixels.
    pub length_curve: Vec<f64>,
    /// Percent; negative means shortening.
    pub peak_gls: f64,
    pub ed_frame: usize,
    pub min_frame: usize,
}

impl GlsReport {
    pub fn to_text(&self) -> String {
        format!(
            "peak_gls {:.4}\ned_frame {}\nmin_frame {}\ned_length {:.4}\nmin_length {:.4}\n",
            self.peak_gls,
            self.ed_frame,
            self.min_frame,
            self.length_curve[self.ed_frame],
            self.length_curve[self.min_frame]
        )
    }
}

/// Lengths smaller than this are treated as degenerate.
const MIN_LENGTH: f64 = 1e-9;

/// Peak strain of the polyline through `ordering` relative to `ed_frame`.
pub fn peak_gls(tracks: &TrajectorySet, ordering: &[usize], ed_frame: usize) -> Result<GlsReport> {
    if ordering.len() < 2 {
        return Err(Error::invalid("ordering needs at least 2 points"));
    }
    if let Some(&bad) = ordering.iter().find(|&&i| i >= tracks.num_points()) {
        return Err(Error::invalid(format!(
            "ordering refers to point {bad} of {}",
            tracks.num_points()
        )));
    }
    if ed_frame >= tracks.num_frames() {
        return Err(Error::invalid(format!(
            "end-diastole frame {ed_frame} outside {} frames",
            tracks.num_frames()
        )));
    }
    let mut curve = Vec::with_capacity(tracks.num_frames());
    for s in 0..tracks.num_frames() {
        let pts: Vec<Point> = ordering.iter().map(|&n| tracks.point(n, s)).collect();
        let len = ventricular_length(&pts)?;
        if !(len > MIN_LENGTH) {
            return Err(Error::DegenerateLength { frame: s });
        }
        curve.push(len);
    }
    let (min_frame, min) = curve
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one frame");
    let ed = curve[ed_frame];
    Ok(GlsReport {
        schema: GLS_SCHEMA.into(),
        peak_gls: 100.0 * (min - ed) / ed,
        length_curve: curve,
        ed_frame,
        min_frame,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetestStats {
    /// Mean difference (bias), percent.
    pub mu: f64,
    /// Sample standard deviation of the differences.
    pub sigma: f64,
    /// Mean absolute difference.
    pub mad: f64,
    pub pairs: usize,
}

/// Agreement of `(test, retest)` measurements.
pub fn test_retest(pairs: &[(f64, f64)]) -> Result<RetestStats> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "test-retest statistics need at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::invalid("non-finite measurement"));
    }
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0);
    Ok(RetestStats {
        mu,
        sigma: var.sqrt(),
        mad: d.iter().map(|x| x.abs()).sum::<f64>() / n,
        pairs: pairs.len(),
    })
}

/// One exam acquired twice. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortEntry {
    pub exam: String,
    #[serde(default)]
    pub view: Option<String>,
    pub test: String,
    pub retest: String,
    /// Point order of the midline; defaults to the stored order.
    #[serde(default)]
    pub ordering: Option<Vec<usize>>,
    #[serde(default)]
    pub ed_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub schema: String,
    pub entries: Vec<CohortEntry>,
}

impl CohortManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: CohortManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::malformed("cohort manifest", e.to_string()))?;
        if m.schema != COHORT_SCHEMA {
            return Err(Error::malformed("cohort manifest", format!("schema {:?}", m.schema)));
        }
        if m.entries.is_empty() {
            return Err(Error::malformed("cohort manifest", "no entries"));
        }
        for e in &m.entries {
            for p in [&e.test, &e.retest] {
                let path = Path::new(p);
                if p.is_empty() || path.is_absolute() || path.components().any(|c| c == std::path::Component::ParentDir) {
                    return Err(Error::malformed("cohort manifest", format!("path {p:?} must be relative and stay inside the cohort")));
                }
            }
        }
        Ok(m)
    }
}

/// Statistics over every view, and optionally over per-exam means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub schema: String,
    pub per_view: RetestStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_exam: Option<RetestStats>,
    /// (exam, view, test GLS, retest GLS)
    pub measurements: Vec<(String, Option<String>, f64, f64)>,
}

/// Combines measured `(test, retest)` GLS values per entry.
pub fn cohort_report(entries: &[CohortEntry], gls: &[(f64, f64)], exam_means: bool) -> Result<CohortReport> {
    if entries.len() != gls.len() {
        return Err(Error::shape("one GLS pair per cohort entry is required"));
    }
    let per_view = test_retest(gls)?;
    let per_exam = if exam_means {
        let mut exams: Vec<(&str, f64, f64, usize)> = Vec::new();
        for (e, &(a, b)) in entries.iter().zip(gls) {
            match exams.iter_mut().find(|x| x.0 == e.exam) {
                Some(x) => {
                    x.1 += a;
                    x.2 += b;
                    x.3 += 1;
                }
                None => exams.push((&e.exam, a, b, 1)),
            }
        }
        let means: Vec<(f64, f64)> = exams.iter().map(|x| (x.1 / x.3 as f64, x.2 / x.3 as f64)).collect();
        Some(test_retest(&means)?)
    } else {
        None
    };
    Ok(CohortReport {
        schema: COHORT_SCHEMA.into(),
        per_view,
        per_exam,
        measurements: entries
            .iter()
            .zip(gls)
            .map(|(e, &(a, b))| (e.exam.clone(), e.view.clone(), a, b))
            .collect(),
    })
}
