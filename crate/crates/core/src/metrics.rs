//! Segmentation scores and the incremental-learning summaries of a
//! train-test matrix `R` (row = training progress, column = evaluated domain).

use serde::{Deserialize, Serialize};

use crate::datagen::NUM_CLASSES;
use crate::error::{Error, Result};

fn check_pair(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// Mean Dice over foreground classes; classes absent from both maps are skipped.
///
/// Returns 1.0 when every foreground class is absent from both.
pub fn dsc(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut total = 0.0;
    let mut counted = 0;
    for class in 1..NUM_CLASSES as u8 {
        let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
        for (&a, &b) in pred.iter().zip(gt) {
            p += usize::from(a == class);
            g += usize::from(b == class);
            both += usize::from(a == class && b == class);
        }
        if p + g == 0 {
            continue;
        }
        total += 2.0 * both as f64 / (p + g) as f64;
        counted += 1;
    }
    Ok(if counted == 0 { 1.0 } else { total / counted as f64 })
}

/// Foreground pixels of `class` with at least one 4-neighbour outside the mask
/// (positions beyond the image border count as outside).
pub fn boundary(map: &[u8], width: usize, class: u8) -> Vec<(i64, i64)> {
    let height = map.len() / width.max(1);
    let inside = |r: i64, c: i64| {
        r >= 0
            && c >= 0
            && (r as usize) < height
            && (c as usize) < width
            && map[r as usize * width + c as usize] == class
    };
    let mut out = Vec::new();
    for r in 0..height as i64 {
        for c in 0..width as i64 {
            if inside(r, c) && [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)].iter().any(|&(y, x)| !inside(y, x)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn directed(from: &[(i64, i64)], to: &[(i64, i64)], out: &mut Vec<f64>) {
    for &(r, c) in from {
        let best = to.iter().map(|&(y, x)| (r - y) * (r - y) + (c - x) * (c - x)).min().expect("nonempty target");
        out.push((best as f64).sqrt());
    }
}

/// Mean over foreground classes of the 95th-percentile symmetric boundary
/// distance, in pixels, for square `size x size` maps.
///
/// A class present in only one map scores the image diagonal; a class absent
/// from both is skipped. Returns 0.0 when every class is skipped.
pub fn hd95(pred: &[u8], gt: &[u8], size: usize) -> Result<f64> {
    check_pair(pred, gt)?;
    if size * size != pred.len() {
        return Err(Error::Validation(format!("{} pixels in a {size}x{size} map", pred.len())));
    }
    let diagonal = 2f64.sqrt() * (size as f64 - 1.0);
    let mut total = 0.0;
    let mut counted = 0;
    for class in 1..NUM_CLASSES as u8 {
        let a = boundary(pred, size, class);
        let b = boundary(gt, size, class);
        let score = match (a.is_empty(), b.is_empty()) {
            (true, true) => continue,
            (false, false) => {
                let mut d = Vec::with_capacity(a.len() + b.len());
                directed(&a, &b, &mut d);
                directed(&b, &a, &mut d);
                percentile(&mut d, 95.0)
            }
            _ => diagonal,
        };
        total += score;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

fn square(r: &[Vec<f64>]) -> Result<usize> {
    let t = r.len();
    if r.iter().any(|row| row.len() < t) {
        return Err(Error::Dimension("R needs at least as many columns as rows".into()));
    }
    Ok(t)
}

fn backward_pairs(r: &[Vec<f64>], f: impl Fn(f64) -> f64) -> Result<Option<f64>> {
    let t = square(r)?;
    if t < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    for i in 1..t {
        for j in 0..i {
            sum += f(r[i][j] - r[j][j]);
        }
    }
    Ok(Some(2.0 * sum / (t * (t - 1)) as f64))
}

/// Backward transfer for bounded scores (1 means no forgetting).
pub fn bwt(r: &[Vec<f64>]) -> Result<Option<f64>> {
    backward_pairs(r, |d| 1.0 - d.min(0.0).abs())
}

/// Backward transfer for distances (mean growth; 0 means no forgetting).
pub fn bwt_plus(r: &[Vec<f64>]) -> Result<Option<f64>> {
    backward_pairs(r, |d| d.max(0.0))
}

/// Mean of the diagonal.
pub fn tl(r: &[Vec<f64>]) -> Result<f64> {
    let t = square(r)?;
    if t == 0 {
        return Err(Error::Dimension("empty R".into()));
    }
    Ok((0..t).map(|i| r[i][i]).sum::<f64>() / t as f64)
}

/// Mean of the lower triangle including the diagonal.
pub fn il_avg(r: &[Vec<f64>]) -> Result<f64> {
    let t = square(r)?;
    if t == 0 {
        return Err(Error::Dimension("empty R".into()));
    }
    let sum: f64 = (0..t).map(|i| r[i][..=i].iter().sum::<f64>()).sum();
    Ok(sum / (t * (t + 1) / 2) as f64)
}

/// Mean of every entry right of the diagonal, including extra columns for
/// domains that are never trained on.
pub fn ftu(r: &[Vec<f64>]) -> Result<Option<f64>> {
    square(r)?;
    let upper: Vec<f64> = r.iter().enumerate().flat_map(|(i, row)| row[i + 1..].iter().copied()).collect();
    if upper.is_empty() {
        return Ok(None);
    }
    Ok(Some(upper.iter().sum::<f64>() / upper.len() as f64))
}

/// Mean diagonal gap to individually trained models over steps 2..T.
pub fn fti(r: &[Vec<f64>], it: &[f64]) -> Result<Option<f64>> {
    let t = square(r)?;
    if t < 2 || it.len() < t {
        return Ok(None);
    }
    Ok(Some((1..t).map(|i| r[i][i] - it[i]).sum::<f64>() / (t - 1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "DSC")]
    Dsc,
    #[serde(rename = "HD95")]
    Hd95,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct Summary {
    /// BWT for DSC, BWT⁺ for HD95.
    pub bwt: Option<f64>,
    pub tl: Option<f64>,
    pub il: Option<f64>,
    pub ftu: Option<f64>,
    pub fti: Option<f64>,
}

/// Train-test matrix with its summaries, in the `R_*.json` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub kind: MetricKind,
    #[serde(rename = "T")]
    pub t: usize,
    /// Evaluated domains: the `T` trained steps, then any unseen domains.
    pub columns: Vec<String>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "IT")]
    pub it: Option<Vec<f64>>,
    pub metrics: Summary,
}

impl AccuracyMatrix {
    pub fn new(kind: MetricKind, columns: Vec<String>, r: Vec<Vec<f64>>, it: Option<Vec<f64>>) -> Result<Self> {
        let t = square(&r)?;
        if r.iter().any(|row| row.len() != columns.len()) {
            return Err(Error::Dimension("R rows must have one entry per column".into()));
        }
        let bad = match kind {
            MetricKind::Dsc => r.iter().flatten().any(|v| !(0.0..=1.0).contains(v)),
            MetricKind::Hd95 => r.iter().flatten().any(|v| !(*v >= 0.0)),
        };
        if bad {
            return Err(Error::Validation(format!("R entries out of range for {kind:?}")));
        }
        let metrics = Summary {
            bwt: match kind {
                MetricKind::Dsc => bwt(&r)?,
                MetricKind::Hd95 => bwt_plus(&r)?,
            },
            tl: (t > 0).then(|| tl(&r)).transpose()?,
            il: (t > 0).then(|| il_avg(&r)).transpose()?,
            ftu: ftu(&r)?,
            fti: it.as_deref().map(|it| fti(&r, it)).transpose()?.flatten(),
        };
        Ok(Self { kind, t, columns, r, it, metrics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NAN: f64 = f64::NAN;

    #[test]
    fn dice_partial_overlap() {
        let mut p = vec![0u8; 16];
        let mut g = vec![0u8; 16];
        p[..4].fill(1);
        g[1..7].fill(1);
        assert!((dsc(&p, &g).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(dsc(&p, &p).unwrap(), 1.0);
        g.fill(0);
        g[10] = 1;
        assert_eq!(dsc(&p, &g).unwrap(), 0.0);
        assert!(dsc(&p, &g[..3]).is_err());
    }

    #[test]
    fn hd_single_pixels_and_empty_prediction() {
        let mut p = vec![0u8; 64];
        let mut g = vec![0u8; 64];
        p[8 + 1] = 2;
        g[8 + 6] = 2;
        assert_eq!(hd95(&p, &g, 8).unwrap(), 5.0);
        assert_eq!(hd95(&g, &g, 8).unwrap(), 0.0);
        let empty = vec![0u8; 1024];
        let mut gt = vec![0u8; 1024];
        gt[100] = 1;
        assert!((hd95(&empty, &gt, 32).unwrap() - 2f64.sqrt() * 31.0).abs() < 1e-12);
    }

    #[test]
    fn transfer_hand_examples() {
        let r2 = vec![vec![0.90, 0.70], vec![0.80, 0.85]];
        assert!((bwt(&r2).unwrap().unwrap() - 0.90).abs() < 1e-12);
        assert!((tl(&r2).unwrap() - 0.875).abs() < 1e-12);
        assert!((il_avg(&r2).unwrap() - 0.85).abs() < 1e-12);
        assert!((ftu(&r2).unwrap().unwrap() - 0.70).abs() < 1e-12);
        let r3 = vec![vec![0.9, NAN, NAN], vec![0.88, 0.8, NAN], vec![0.85, 0.7, 0.9]];
        assert!((bwt(&r3).unwrap().unwrap() - (1.0 - 0.17 / 3.0)).abs() < 1e-12);
        let hd = vec![vec![10.0, 0.0], vec![13.0, 9.0]];
        assert!((bwt_plus(&hd).unwrap().unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(bwt(&[vec![0.5]]).unwrap(), None);
        assert_eq!(ftu(&[vec![0.5]]).unwrap(), None);
    }

    #[test]
    fn fti_hand_examples() {
        let r = vec![vec![0.5, 0.0, 0.0], vec![0.0, 0.81, 0.0], vec![0.0, 0.0, 0.67]];
        assert!((fti(&r, &[0.0, 0.80, 0.70]).unwrap().unwrap() + 0.01).abs() < 1e-12);
        assert_eq!(fti(&r, &[0.0]).unwrap(), None);
    }

    #[test]
    fn matrix_json_layout() {
        let m = AccuracyMatrix::new(
            MetricKind::Dsc,
            vec!["A".into(), "B".into(), "D".into()],
            vec![vec![0.9, 0.4, 0.3], vec![0.8, 0.85, 0.5]],
            Some(vec![0.9, 0.87]),
        )
        .unwrap();
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["T"], 2);
        assert_eq!(v["R"][1][2], 0.5);
        assert!((v["metrics"]["FTU"].as_f64().unwrap() - 0.4).abs() < 1e-12);
        assert!((v["metrics"]["FTI"].as_f64().unwrap() + 0.02).abs() < 1e-12);
        let bad = AccuracyMatrix::new(MetricKind::Dsc, vec!["A".into()], vec![vec![1.5]], None);
        assert!(bad.is_err());
    }
}
