//! Confusion matrices, OA / AA / Kappa and classification-map rendering.

use crate::error::{invalid, Result};

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return invalid("confusion matrix must be square");
        }
        Ok(Self { n_classes: n, counts: rows.concat() })
    }

    /// Counts pairs whose truth is labeled (`1..=C`); unlabeled pixels (0) are skipped.
    pub fn from_labels(truth: &[u16], predicted: &[u16], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return invalid(format!("{} truths for {} predictions", truth.len(), predicted.len()));
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t == 0 {
                continue;
            }
            if t as usize > n_classes || p == 0 || p as usize > n_classes {
                return invalid(format!("label pair ({t}, {p}) outside 1..={n_classes}"));
            }
            cm.counts[(t as usize - 1) * n_classes + p as usize - 1] += 1;
        }
        Ok(cm)
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, r: usize) -> u64 {
        (0..self.n_classes).map(|c| self.get(r, c)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|r| self.get(r, c)).sum()
    }

    /// AA is the mean recall over classes with at least one true pixel.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return invalid("confusion matrix is empty");
        }
        let n = total as f64;
        let diag: u64 = (0..self.n_classes).map(|i| self.get(i, i)).sum();
        let po = diag as f64 / n;
        let mut recall_sum = 0.0;
        let mut present = 0usize;
        for i in 0..self.n_classes {
            let r = self.row_sum(i);
            if r == 0 {
                log::warn!("class {} has no evaluated pixels and is left out of AA", i + 1);
                continue;
            }
            recall_sum += self.get(i, i) as f64 / r as f64;
            present += 1;
        }
        let pe = (0..self.n_classes).map(|i| self.row_sum(i) as f64 * self.col_sum(i) as f64).sum::<f64>() / (n * n);
        let kappa = if pe < 1.0 { (po - pe) / (1.0 - pe) } else { 1.0 };
        Ok(Metrics { oa: po, aa: recall_sum / present as f64, kappa })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in 1..=self.n_classes {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for r in 0..self.n_classes {
            out.push_str(&(r + 1).to_string());
            for c in 0..self.n_classes {
                out.push_str(&format!(",{}", self.get(r, c)));
            }
            out.push('\n');
        }
        out
    }
}

/// Colours for ids 0 (unlabeled, black) through 15.
pub const DEFAULT_PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

/// Binary PPM (P6), one pixel per raster cell.
pub fn render_map(labels: &[u16], height: usize, width: usize, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return invalid(format!("{} labels for a {height}x{width} map", labels.len()));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(labels.len() * 3);
    for &l in labels {
        let rgb = palette.get(l as usize).ok_or_else(|| {
            crate::error::Error::Invalid(format!("label {l} outside a palette of {} colours", palette.len()))
        })?;
        out.extend_from_slice(rgb);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_matrix() {
        let cm = ConfusionMatrix::from_rows(&[vec![45, 5], vec![5, 45]]).unwrap();
        let m = cm.metrics().unwrap();
        assert_eq!((m.oa, m.aa), (0.9, 0.9));
        assert!((m.kappa - 0.8).abs() < 1e-15);
    }

    #[test]
    fn diagonal_and_uniform() {
        let m = ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![0, 7, 0], vec![0, 0, 1]]).unwrap().metrics().unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
        let m = ConfusionMatrix::from_rows(&[vec![4, 4], vec![4, 4]]).unwrap().metrics().unwrap();
        assert_eq!(m.kappa, 0.0);
        assert!(ConfusionMatrix::new(2).metrics().is_err());
    }

    #[test]
    fn from_labels_skips_unlabeled() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 2, 2], &[2, 1, 1, 2], 2).unwrap();
        assert_eq!(cm.counts, vec![1, 0, 1, 1]);
        assert!(ConfusionMatrix::from_labels(&[1], &[3], 2).is_err());
    }

    #[test]
    fn two_by_two_map_bytes() {
        let ppm = render_map(&[0, 1, 2, 0], 2, 2, &DEFAULT_PALETTE).unwrap();
        let mut expected = b"P6\n2 2\n255\n".to_vec();
        expected.extend_from_slice(&[0, 0, 0, 230, 25, 75, 60, 180, 75, 0, 0, 0]);
        assert_eq!(ppm, expected);
        assert!(render_map(&[16], 1, 1, &DEFAULT_PALETTE).is_err());
    }
}
