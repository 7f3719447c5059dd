//! Effective-cluster statistics and heatmap export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph_data::Dataset;
use crate::linalg;
use crate::model::Model;
use crate::pooling::effective_clusters_from;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Effective-cluster counts for every graph at every threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterHistogram {
    pub thresholds: Vec<f64>,
    /// `counts_per_graph[t][g]`: count for graph `g` at threshold `t`.
    pub counts_per_graph: Vec<Vec<usize>>,
    /// `bins[t]`: count value → number of graphs.
    pub bins: Vec<BTreeMap<usize, usize>>,
}

impl ClusterHistogram {
    /// Most frequent count at threshold index `t`; ties go to the smaller count.
    pub fn mode(&self, t: usize) -> Option<usize> {
        self.bins[t]
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&count, _)| count)
    }
}

/// Histogram over precomputed grouping matrices.
pub fn histogram_of(matrices: &[Tensor], thresholds: &[f64]) -> Result<ClusterHistogram> {
    if matrices.is_empty() {
        return Err(Error::InvalidArgument(
            "histogram of an empty dataset".into(),
        ));
    }
    let spectra = matrices
        .iter()
        .map(|m| linalg::sym_eig(m).map(|e| e.eigenvalues))
        .collect::<Result<Vec<_>>>()?;
    let counts_per_graph: Vec<Vec<usize>> = thresholds
        .iter()
        .map(|&t| {
            spectra
                .iter()
                .map(|s| effective_clusters_from(s, t))
                .collect()
        })
        .collect();
    let bins = counts_per_graph
        .iter()
        .map(|counts| {
            let mut b = BTreeMap::new();
            for &c in counts {
                *b.entry(c).or_insert(0) += 1;
            }
            b
        })
        .collect();
    Ok(ClusterHistogram {
        thresholds: thresholds.to_vec(),
        counts_per_graph,
        bins,
    })
}

pub fn grouping_matrices(ds: &Dataset, model: &Model) -> Result<Vec<Tensor>> {
    ds.graphs.iter().map(|g| model.grouping_matrix(g)).collect()
}

/// Runs the encoder and pair classifier on every graph and counts clusters.
pub fn histogram(ds: &Dataset, model: &Model, thresholds: &[f64]) -> Result<ClusterHistogram> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(
            "histogram of an empty dataset".into(),
        ));
    }
    histogram_of(&grouping_matrices(ds, model)?, thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdSummary {
    pub threshold: f64,
    pub mean_clusters: f64,
    pub median_clusters: f64,
    /// `mean_clusters / mean_graph_size`
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    pub graphs: usize,
    pub mean_graph_size: f64,
    pub thresholds: Vec<ThresholdSummary>,
}

fn median(values: &[usize]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

pub fn report_from(sizes: &[usize], hist: Option<&ClusterHistogram>) -> ClusterReport {
    let mean_graph_size = if sizes.is_empty() {
        0.0
    } else {
        sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
    };
    let thresholds = hist
        .map(|h| {
            h.thresholds
                .iter()
                .zip(&h.counts_per_graph)
                .map(|(&threshold, counts)| {
                    let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
                    ThresholdSummary {
                        threshold,
                        mean_clusters: mean,
                        median_clusters: median(counts),
                        ratio: if mean_graph_size > 0.0 {
                            mean / mean_graph_size
                        } else {
                            0.0
                        },
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    ClusterReport {
        graphs: sizes.len(),
        mean_graph_size,
        thresholds,
    }
}

/// Mean and median effective clusters per threshold next to the mean graph size.
pub fn cluster_report(ds: &Dataset, model: &Model, thresholds: &[f64]) -> Result<ClusterReport> {
    let sizes: Vec<usize> = ds.graphs.iter().map(|g| g.n()).collect();
    if thresholds.is_empty() || ds.is_empty() {
        return Ok(report_from(&sizes, None));
    }
    let hist = histogram(ds, model, thresholds)?;
    Ok(report_from(&sizes, Some(&hist)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "pgm" => Ok(Self::Pgm),
            other => Err(Error::InvalidArgument(format!(
                "unknown heatmap format '{other}'"
            ))),
        }
    }
}

fn check_matrix(m: &Tensor) -> Result<()> {
    if m.rank() != 2 {
        return Err(Error::shape(
            "heatmap",
            format!("expected a matrix, got {:?}", m.shape()),
        ));
    }
    Ok(())
}

/// One line per row; values use the shortest representation that round-trips.
pub fn matrix_to_csv(m: &Tensor) -> Result<String> {
    check_matrix(m)?;
    let mut out = String::new();
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn matrix_from_csv(text: &str) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", k + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("matrix file has no rows".into()));
    }
    Tensor::from_rows(&rows)
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    matrix_from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Binary PGM, `P5`, maxval 255, pixel `round(255·clamp(v, 0, 1))`.
pub fn matrix_to_pgm(m: &Tensor) -> Result<Vec<u8>> {
    check_matrix(m)?;
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(
        m.data()
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
    );
    Ok(out)
}

pub fn export_heatmap(m: &Tensor, path: impl AsRef<Path>, format: HeatmapFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        HeatmapFormat::Csv => matrix_to_csv(m)?.into_bytes(),
        HeatmapFormat::Pgm => matrix_to_pgm(m)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_csv() {
        assert_eq!(matrix_to_csv(&Tensor::identity(2)).unwrap(), "1,0\n0,1\n");
    }

    #[test]
    fn zero_pgm() {
        let bytes = matrix_to_pgm(&Tensor::zeros([3, 3])).unwrap();
        let header = b"P5\n3 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 9);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn pgm_scales_and_clamps() {
        let m = Tensor::from_rows(&[vec![0.5, 1.0], vec![-0.2, 1.7]]).unwrap();
        let bytes = matrix_to_pgm(&m).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[128, 255, 0, 255]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = Tensor::from_rows(&[vec![0.1, 1.0 / 3.0], vec![1e-300, 0.999_999_999_999_999_9]])
            .unwrap();
        assert_eq!(matrix_from_csv(&matrix_to_csv(&m).unwrap()).unwrap(), m);
        assert!(matrix_from_csv("1,x\n").is_err());
        assert!(matrix_from_csv("").is_err());
    }

    #[test]
    fn histogram_of_identical_matrices() {
        let m = Tensor::ones([3, 3]);
        let h = histogram_of(&[m.clone(), m.clone(), m], &[0.5, 1.0]).unwrap();
        assert_eq!(h.bins[0].len(), 1);
        assert_eq!(h.mode(1), Some(1));
        assert!(histogram_of(&[], &[1.0]).is_err());
    }

    #[test]
    fn report_arithmetic() {
        let r = report_from(&[4, 6], None);
        assert_eq!(r.mean_graph_size, 5.0);
        assert!(r.thresholds.is_empty());
        assert_eq!(median(&[3, 1, 2, 10]), 2.5);
    }
}
