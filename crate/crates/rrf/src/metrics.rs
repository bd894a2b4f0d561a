//! Quality and rate metrics: PSNR over planes and frames, Bjøntegaard
//! rate deltas between rate-distortion curves, and the tabular report
//! formats the command-line tools emit.

use crate::net::ChannelRole;
use crate::stream::UnitMode;
use crate::yuv::{Plane, YuvFrame};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("rate-distortion curves need at least two points, got {0}")]
    NotEnoughPoints(usize),
    #[error("invalid rate-distortion point: {0}")]
    InvalidPoint(&'static str),
    #[error("rate-distortion curves do not overlap in quality")]
    NoOverlap,
}

/// Mean squared error between two equally sized 8-bit planes.
pub fn mse_plane(a: &Plane<u8>, b: &Plane<u8>) -> f64 {
    assert_eq!(
        (a.width, a.height),
        (b.width, b.height),
        "MSE between mismatched planes"
    );
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.data.len() as f64
}

/// Peak signal-to-noise ratio for 8-bit content; infinite for identical
/// inputs.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0 * 255.0 / mse).log10()
}

pub fn psnr_plane(a: &Plane<u8>, b: &Plane<u8>) -> f64 {
    psnr_from_mse(mse_plane(a, b))
}

pub fn luma_psnr(a: &YuvFrame, b: &YuvFrame) -> f64 {
    psnr_plane(&a.y, &b.y)
}

/// Chroma PSNR with U and V pooled into one error sum, so both planes
/// weigh equally and a single number describes colour fidelity.
pub fn chroma_psnr(a: &YuvFrame, b: &YuvFrame) -> f64 {
    let n = (a.u.data.len() + a.v.data.len()) as f64;
    let pooled = (mse_plane(&a.u, &b.u) * a.u.data.len() as f64
        + mse_plane(&a.v, &b.v) * a.v.data.len() as f64)
        / n;
    psnr_from_mse(pooled)
}

/// Mean PSNR of a plane role across a clip, pooling per frame first.
pub fn mean_frame_psnr(a: &[YuvFrame], b: &[YuvFrame], role: ChannelRole) -> f64 {
    assert_eq!(a.len(), b.len(), "PSNR between clips of different length");
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| match role {
            ChannelRole::Luma => luma_psnr(x, y),
            ChannelRole::Chroma => chroma_psnr(x, y),
        })
        .sum();
    sum / a.len() as f64
}

/// One operating point of a rate-distortion curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    /// Rate in any unit that is consistent across both curves.
    pub rate: f64,
    pub psnr: f64,
}

/// Solve a small dense linear system by Gaussian elimination with partial
/// pivoting. Sized for the cubic fits below.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let pivot_row = a[col].clone();
        for row in col + 1..n {
            let f = a[row][col] / pivot_row[col];
            for (x, &p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut v = b[row];
        for k in row + 1..n {
            v -= a[row][k] * x[k];
        }
        x[row] = v / a[row][row];
    }
    x
}

/// Least-squares polynomial fit of log10(rate) against PSNR, centred on
/// the curve's mean PSNR for conditioning. Returns the centre and the
/// coefficients, lowest order first.
fn fit_log_rate(points: &[RatePoint], degree: usize) -> (f64, Vec<f64>) {
    let centre = points.iter().map(|p| p.psnr).sum::<f64>() / points.len() as f64;
    let n = degree + 1;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for p in points {
        let x = p.psnr - centre;
        let y = p.rate.log10();
        let mut xi = 1.0;
        let mut pows = Vec::with_capacity(2 * n - 1);
        for _ in 0..2 * n - 1 {
            pows.push(xi);
            xi *= x;
        }
        for i in 0..n {
            for j in 0..n {
                a[i][j] += pows[i + j];
            }
            b[i] += y * pows[i];
        }
    }
    (centre, solve(a, b))
}

/// Average of the fitted log-rate over [lo, hi] via the antiderivative.
fn mean_log_rate(centre: f64, coeffs: &[f64], lo: f64, hi: f64) -> f64 {
    let eval = |t: f64| -> f64 {
        let x = t - centre;
        coeffs
            .iter()
            .enumerate()
            .map(|(i, &c)| c * x.powi(i as i32 + 1) / (i as f64 + 1.0))
            .sum()
    };
    (eval(hi) - eval(lo)) / (hi - lo)
}

fn checked(points: &[RatePoint]) -> Result<Vec<RatePoint>, MetricsError> {
    if points.len() < 2 {
        return Err(MetricsError::NotEnoughPoints(points.len()));
    }
    for p in points {
        if !(p.rate > 0.0 && p.rate.is_finite()) {
            return Err(MetricsError::InvalidPoint("rate must be positive and finite"));
        }
        if !p.psnr.is_finite() {
            return Err(MetricsError::InvalidPoint("PSNR must be finite"));
        }
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.psnr.total_cmp(&b.psnr));
    if sorted.windows(2).any(|w| w[0].psnr == w[1].psnr) {
        return Err(MetricsError::InvalidPoint("duplicate PSNR values"));
    }
    Ok(sorted)
}

/// Bjøntegaard rate delta: the average rate change of `test` relative to
/// `anchor` at equal quality, in percent. Negative means `test` spends
/// fewer bits for the same PSNR.
pub fn bd_rate(anchor: &[RatePoint], test: &[RatePoint]) -> Result<f64, MetricsError> {
    let a = checked(anchor)?;
    let t = checked(test)?;
    let lo = a[0].psnr.max(t[0].psnr);
    let hi = a[a.len() - 1].psnr.min(t[t.len() - 1].psnr);
    if lo >= hi {
        return Err(MetricsError::NoOverlap);
    }
    let degree = 3.min(a.len() - 1).min(t.len() - 1);
    let (ca, fa) = fit_log_rate(&a, degree);
    let (ct, ft) = fit_log_rate(&t, degree);
    let diff = mean_log_rate(ct, &ft, lo, hi) - mean_log_rate(ca, &fa, lo, hi);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}

/// One row of the per-unit encode report.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub gop: usize,
    pub role: ChannelRole,
    pub mode: UnitMode,
    pub payload_bytes: usize,
    pub psnr_before: f64,
    pub psnr_after: f64,
    /// Why the encoder chose this mode, e.g. `gain` or `zero-residual`.
    pub decision: String,
}

pub const CSV_HEADER: &str = "gop,role,mode,payload_bytes,psnr_before,psnr_after,decision";

/// Render unit records as CSV, header line included.
pub fn to_csv(records: &[UnitRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{}\n",
            r.gop,
            r.role.label(),
            r.mode.as_str(),
            r.payload_bytes,
            r.psnr_before,
            r.psnr_after,
            r.decision
        ));
    }
    out
}

/// Parse the CSV produced by [`to_csv`] back into records.
pub fn from_csv(text: &str) -> Result<Vec<UnitRecord>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(format!("expected header line {CSV_HEADER:?}")),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 2;
        let fields: Vec<&str> = line.splitn(7, ',').collect();
        if fields.len() != 7 {
            return Err(format!("line {row}: expected 7 fields, got {}", fields.len()));
        }
        let gop = fields[0]
            .parse()
            .map_err(|e| format!("line {row}: gop: {e}"))?;
        let role = match fields[1] {
            "luma" => ChannelRole::Luma,
            "chroma" => ChannelRole::Chroma,
            other => return Err(format!("line {row}: unknown role {other:?}")),
        };
        let mode = match fields[2] {
            "skip" => UnitMode::Skip,
            "new" => UnitMode::New,
            "diff" => UnitMode::Diff,
            other => return Err(format!("line {row}: unknown mode {other:?}")),
        };
        let payload_bytes = fields[3]
            .parse()
            .map_err(|e| format!("line {row}: payload_bytes: {e}"))?;
        let psnr_before: f64 = fields[4]
            .parse()
            .map_err(|e| format!("line {row}: psnr_before: {e}"))?;
        let psnr_after: f64 = fields[5]
            .parse()
            .map_err(|e| format!("line {row}: psnr_after: {e}"))?;
        records.push(UnitRecord {
            gop,
            role,
            mode,
            payload_bytes,
            psnr_before,
            psnr_after,
            decision: fields[6].to_string(),
        });
    }
    Ok(records)
}

/// Render unit records as whitespace-separated columns for plotting.
pub fn to_plotdata(records: &[UnitRecord]) -> String {
    let mut out = String::from("# gop role mode payload_bytes psnr_before psnr_after\n");
    for r in records {
        out.push_str(&format!(
            "{} {} {} {} {:.4} {:.4}\n",
            r.gop,
            r.role.label(),
            r.mode.as_str(),
            r.payload_bytes,
            r.psnr_before,
            r.psnr_after
        ));
    }
    out
}
