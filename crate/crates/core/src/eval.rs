//! SH interpolation baseline, unknown-direction LSD metrics and report exports.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::{select_rows, Ear};
use crate::error::{Error, Result};
use crate::network::{check_same_shape, lsd};
use crate::sh::SphericalGrid;
use crate::sphconv::mapping_block;

/// Classical SH interpolation: least-squares fit at `order` on the known
/// directions, evaluated on the dense grid.
pub fn sh_baseline(
    h_known: &DMatrix<f64>,
    known: &SphericalGrid,
    order: usize,
    dense: &SphericalGrid,
) -> Result<DMatrix<f64>> {
    mapping_block(h_known, known, dense, order)
}

pub fn baseline_label(order: usize) -> String {
    format!("SH N={order}")
}

/// LSD restricted to the `unknown` rows.
pub fn eval_unknown(h_hat: &DMatrix<f64>, h_true: &DMatrix<f64>, unknown: &[usize]) -> Result<f64> {
    check_same_shape("eval_unknown", h_true, h_hat)?;
    if unknown.is_empty() {
        return Err(Error::Eval("unknown direction set is empty".into()));
    }
    lsd(
        &select_rows(h_true, unknown)?,
        &select_rows(h_hat, unknown)?,
    )
}

/// Spatial RMS error over the `unknown` rows, one value per frequency bin.
pub fn lsd_per_frequency(
    h_hat: &DMatrix<f64>,
    h_true: &DMatrix<f64>,
    unknown: &[usize],
) -> Result<Vec<f64>> {
    check_same_shape("lsd_per_frequency", h_true, h_hat)?;
    if unknown.is_empty() {
        return Err(Error::Eval("unknown direction set is empty".into()));
    }
    let diff = select_rows(h_hat, unknown)? - select_rows(h_true, unknown)?;
    Ok(diff
        .column_iter()
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
        .collect())
}

/// Root mean square of a per-frequency curve.
pub fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SliceRow {
    pub theta: f64,
    pub phi: f64,
    pub frequency: f64,
    pub db: f64,
}

fn azimuth_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Rows of `field` whose azimuth lies within `tolerance` of `phi_target`,
/// sorted by elevation (then azimuth), one row per frequency bin.
pub fn export_slice(
    field: &DMatrix<f64>,
    grid: &SphericalGrid,
    freqs: &[f64],
    phi_target: f64,
    tolerance: f64,
) -> Result<Vec<SliceRow>> {
    if field.nrows() != grid.len() || field.ncols() != freqs.len() {
        return Err(Error::mismatch(
            "export_slice field",
            format!("{}x{}", grid.len(), freqs.len()),
            format!("{}x{}", field.nrows(), field.ncols()),
        ));
    }
    let mut hits: Vec<usize> = (0..grid.len())
        .filter(|&i| azimuth_gap(grid.directions()[i].phi(), phi_target) <= tolerance)
        .collect();
    if hits.is_empty() {
        let nearest = grid
            .directions()
            .iter()
            .map(|d| d.phi())
            .min_by(|a, b| azimuth_gap(*a, phi_target).total_cmp(&azimuth_gap(*b, phi_target)))
            .unwrap_or(f64::NAN);
        return Err(Error::Eval(format!(
            "no direction within {tolerance} rad of phi = {phi_target}; nearest available phi = {nearest} (gap {})",
            azimuth_gap(nearest, phi_target)
        )));
    }
    let dirs = grid.directions();
    hits.sort_by(|&a, &b| {
        dirs[a]
            .theta()
            .total_cmp(&dirs[b].theta())
            .then(dirs[a].phi().total_cmp(&dirs[b].phi()))
    });
    Ok(hits
        .iter()
        .flat_map(|&i| {
            freqs.iter().enumerate().map(move |(l, &f)| SliceRow {
                theta: dirs[i].theta(),
                phi: dirs[i].phi(),
                frequency: f,
                db: field[(i, l)],
            })
        })
        .collect())
}

pub fn format_slice(rows: &[SliceRow]) -> String {
    let mut out = String::from("theta\tphi\tfrequency_hz\tdb\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.theta, r.phi, r.frequency, r.db
        ));
    }
    out
}

/// One evaluated (subject, ear) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScore {
    pub subject: u32,
    pub ear: Ear,
    pub lsd: f64,
}

/// Unknown-direction LSD summary for one method over a set of subjects.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method_label: String,
    /// Mean over ears of each subject's unknown-direction LSD.
    pub per_subject_lsd: BTreeMap<u32, f64>,
    /// Unweighted mean of `per_subject_lsd`.
    pub mean_lsd: f64,
    /// LSD of all unknown-direction residuals pooled together; the RMS of
    /// `per_frequency_lsd` equals this value.
    pub pooled_lsd: f64,
    pub per_frequency_lsd: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub samples: Vec<SampleScore>,
    pub ears: String,
    pub unknown_directions: usize,
    pub config: Option<serde_json::Value>,
}

/// A prediction to score: subject, ear, predicted dense field, true dense field.
pub struct Prediction<'a> {
    pub subject: u32,
    pub ear: Ear,
    pub predicted: &'a DMatrix<f64>,
    pub truth: &'a DMatrix<f64>,
}

pub fn build_report(
    method_label: impl Into<String>,
    predictions: &[Prediction<'_>],
    unknown: &[usize],
    frequencies: &[f64],
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Eval("no predictions to evaluate".into()));
    }
    let mut samples = Vec::with_capacity(predictions.len());
    let mut by_subject: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut sq_sum = vec![0.0; frequencies.len()];
    for p in predictions {
        if p.truth.ncols() != frequencies.len() {
            return Err(Error::mismatch(
                "report frequency bins",
                frequencies.len(),
                p.truth.ncols(),
            ));
        }
        let value = eval_unknown(p.predicted, p.truth, unknown)?;
        let curve = lsd_per_frequency(p.predicted, p.truth, unknown)?;
        for (acc, c) in sq_sum.iter_mut().zip(&curve) {
            *acc += c * c;
        }
        by_subject.entry(p.subject).or_default().push(value);
        samples.push(SampleScore {
            subject: p.subject,
            ear: p.ear,
            lsd: value,
        });
    }
    let per_subject_lsd: BTreeMap<u32, f64> = by_subject
        .into_iter()
        .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let mean_lsd = per_subject_lsd.values().sum::<f64>() / per_subject_lsd.len() as f64;
    let k = predictions.len() as f64;
    let per_frequency_lsd: Vec<f64> = sq_sum.iter().map(|s| (s / k).sqrt()).collect();
    let pooled_lsd = rms(&per_frequency_lsd);
    let ears: std::collections::BTreeSet<Ear> = predictions.iter().map(|p| p.ear).collect();
    Ok(EvalReport {
        method_label: method_label.into(),
        per_subject_lsd,
        mean_lsd,
        pooled_lsd,
        per_frequency_lsd,
        frequencies: frequencies.to_vec(),
        samples,
        ears: ears.iter().map(Ear::as_str).collect::<Vec<_>>().join("+"),
        unknown_directions: unknown.len(),
        config: None,
    })
}

impl EvalReport {
    pub fn per_subject_table(&self) -> String {
        let mut out = String::from("subject\tear\tlsd_db\n");
        for s in &self.samples {
            out.push_str(&format!("{}\t{}\t{}\n", s.subject, s.ear, s.lsd));
        }
        for (subject, v) in &self.per_subject_lsd {
            out.push_str(&format!("{subject}\tmean\t{v}\n"));
        }
        out
    }

    pub fn per_frequency_table(&self) -> String {
        let mut out = String::from("frequency_hz\tlsd_db\n");
        for (f, v) in self.frequencies.iter().zip(&self.per_frequency_lsd) {
            out.push_str(&format!("{f}\t{v}\n"));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Default azimuth of the exported spectra slice (directly behind the head).
pub const DEFAULT_SLICE_PHI: f64 = PI;
