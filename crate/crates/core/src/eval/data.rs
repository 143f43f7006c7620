//! Datasets: synthetic low-rank inliers among isotropic outliers, and CSV.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l2_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Csv,
}

/// Feature rows (unit norm) with labels 0 = inlier, 1 = outlier.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<u8>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<u8>, provenance: Provenance) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", features.rows(), labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Format("labels must be 0 or 1".into()));
        }
        Ok(Self { features, labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut f = Matrix::zeros(idx.len(), self.dim());
        for (i, &k) in idx.iter().enumerate() {
            f.row_mut(i).copy_from_slice(self.features.row(k));
        }
        Dataset { features: f, labels: idx.iter().map(|&k| self.labels[k]).collect(), provenance: self.provenance }
    }

    /// Same rows sorted lexicographically by (features, label), so results do
    /// not depend on the order rows arrived in.
    pub fn canonical(&self) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (self.features.row(a), self.features.row(b));
            ra.iter()
                .zip(rb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(self.labels[a].cmp(&self.labels[b]))
        });
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(Error::Shape("datasets differ in dimension".into()));
        }
        let mut data = self.features.as_slice().to_vec();
        data.extend_from_slice(other.features.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(Matrix::from_vec(self.len() + other.len(), self.dim(), data)?, labels, self.provenance)
    }
}

pub(crate) fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let n = l2_norm(m.row(r));
        if n > 0.0 {
            m.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Inliers `Qs + σε` around a random D×r orthonormal frame `Q`; outliers
/// drawn from `N(0, I_D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFamily {
    pub frame: Matrix,
    pub noise: f64,
}

impl SyntheticFamily {
    pub fn new<R: Rng + ?Sized>(dim: usize, rank: usize, noise: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= dim {
            return Err(Error::Domain(format!("intrinsic rank must satisfy 1 ≤ r < D, got r={rank}, D={dim}")));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Domain(format!("noise level must be non-negative, got {noise}")));
        }
        // Gram–Schmidt on Gaussian columns
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
        while cols.len() < rank {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
            let n = l2_norm(&v);
            if n > 1e-8 {
                v.iter_mut().for_each(|a| *a /= n);
                cols.push(v);
            }
        }
        let mut frame = Matrix::zeros(dim, rank);
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                frame[(i, j)] = v;
            }
        }
        Ok(Self { frame, noise })
    }

    /// `n_in` inliers followed by `n_out` outliers, rows unit-normalized.
    pub fn sample<R: Rng + ?Sized>(&self, n_in: usize, n_out: usize, rng: &mut R) -> Dataset {
        let (dim, rank) = self.frame.shape();
        let mut f = Matrix::zeros(n_in + n_out, dim);
        for r in 0..n_in {
            let s: Vec<f64> = (0..rank).map(|_| rng.sample(StandardNormal)).collect();
            let q = self.frame.matvec(&s).expect("frame shape");
            for (o, qv) in f.row_mut(r).iter_mut().zip(q) {
                let e: f64 = rng.sample(StandardNormal);
                *o = qv + self.noise * e;
            }
        }
        for r in n_in..n_in + n_out {
            for o in f.row_mut(r) {
                *o = rng.sample(StandardNormal);
            }
        }
        normalize_rows(&mut f);
        let mut labels = vec![0u8; n_in];
        labels.resize(n_in + n_out, 1);
        Dataset { features: f, labels, provenance: Provenance::Synthetic }
    }
}

pub fn outlier_count(n_inliers: usize, ratio: f64) -> usize {
    (n_inliers as f64 * ratio).round() as usize
}

/// `n` inliers plus `round(n·c)` outliers from a fresh family drawn from `seed`.
pub fn gen_synthetic(dim: usize, rank: usize, n: usize, c: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!("contamination must be non-negative, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = SyntheticFamily::new(dim, rank, noise, &mut rng)?;
    Ok(family.sample(n, outlier_count(n, c), &mut rng))
}

/// Reads a CSV with a header row. A column named `label` holds 0/1 labels
/// (all 0 when absent); every other column is a numeric feature. Rows are
/// unit-normalized. Lines starting with `#` are comments. Error rows and
/// columns are 1-based, counting data rows.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    if text.trim().is_empty() {
        return Err(Error::Format("empty CSV".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Format(format!("bad header: {e}")))?.clone();
    let label_col = header.iter().position(|h| h == "label");
    let n_features = header.len() - usize::from(label_col.is_some());
    if n_features == 0 {
        return Err(Error::Format("no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse { row, col: 0, msg: e.to_string() })?;
        for (j, cell) in rec.iter().enumerate() {
            let col = j + 1;
            if Some(j) == label_col {
                let l = match cell {
                    "0" => 0,
                    "1" => 1,
                    _ => return Err(Error::Parse { row, col, msg: format!("label `{cell}` is not 0 or 1") }),
                };
                labels.push(l);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse { row, col, msg: format!("`{cell}` is not a number") })?;
                if !v.is_finite() {
                    return Err(Error::Parse { row, col, msg: format!("`{cell}` is not finite") });
                }
                data.push(v);
            }
        }
        if label_col.is_none() {
            labels.push(0);
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("CSV has a header but no rows".into()));
    }
    let mut features = Matrix::from_vec(labels.len(), n_features, data)?;
    normalize_rows(&mut features);
    Dataset::new(features, labels, Provenance::Csv)
}
