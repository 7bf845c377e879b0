//! Alignment angles between method updates and true gradients, subspace
//! angles between forward weights and feedback, and the per-epoch metrics
//! record with its CSV form.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::{frobenius_cosine, principal_angles, to_degrees, Matrix};
use crate::scalar::Scalar;

/// Angle in degrees between two gradients seen as vectors. `None` when
/// either is zero.
pub fn grad_alignment_deg<T: Scalar>(g_method: &Matrix<T>, g_bp: &Matrix<T>) -> Result<Option<f64>> {
    if g_method.shape() != g_bp.shape() {
        return Err(Error::arg(format!(
            "gradients have shapes {:?} and {:?}",
            g_method.shape(),
            g_bp.shape()
        )));
    }
    match frobenius_cosine(g_method, g_bp) {
        Ok(c) => Ok(Some(to_degrees(c.as_f64().acos()))),
        Err(Error::UndefinedCosine) => Ok(None),
        Err(e) => Err(e),
    }
}

/// All principal angles (degrees, ascending) between `col(w^T)` and
/// `col(b)`, for `w` of shape `k x d` and `b` of shape `d x j`. `None` when
/// either side is rank deficient.
pub fn matrix_principal_angles<T: Scalar>(w_effective: &Matrix<T>, b: &Matrix<T>) -> Result<Option<Vec<f64>>> {
    if w_effective.cols() != b.rows() {
        return Err(Error::arg(format!(
            "columns of w^T live in R^{} but b has {} rows",
            w_effective.cols(),
            b.rows()
        )));
    }
    let wt: Matrix<f64> = w_effective.transpose().cast();
    match principal_angles(&wt, &b.cast::<f64>()) {
        Ok(a) => Ok(Some(a)),
        Err(Error::Argument(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Largest principal angle between `col(w^T)` and `col(b)`.
pub fn matrix_alignment_deg<T: Scalar>(w_effective: &Matrix<T>, b: &Matrix<T>) -> Result<Option<f64>> {
    Ok(matrix_principal_angles(w_effective, b)?.and_then(|a| a.last().copied()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    /// Index in the layer stack.
    pub layer: usize,
    pub rank: Option<usize>,
    pub grad_alignment_deg: Option<f64>,
    pub matrix_alignment_deg: Option<f64>,
    /// Every principal angle behind `matrix_alignment_deg`, ascending.
    pub principal_angles_deg: Vec<f64>,
    pub ortho_drift: Option<f64>,
    pub params: u64,
    pub inference_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub layers: Vec<LayerMetrics>,
    pub params_total: u64,
    /// Multiply-accumulates per sample.
    pub inference_flops: u64,
}

pub const CSV_HEADER: [&str; 12] = [
    "epoch",
    "layer",
    "rank",
    "train_loss",
    "train_accuracy",
    "test_accuracy",
    "grad_alignment_deg",
    "matrix_alignment_deg",
    "ortho_drift",
    "params",
    "inference_flops",
    "principal_angles_deg",
];

/// Row label of the per-epoch aggregate.
pub const AGGREGATE_LAYER: &str = "all";

// `{:?}` prints the shortest string that parses back to the same f64.
fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

fn parse_opt(field: &str, name: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::arg(format!("column {name}: bad number {field:?}")))
}

fn parse_req<V: std::str::FromStr>(field: &str, name: &str) -> Result<V> {
    field
        .parse()
        .map_err(|_| Error::arg(format!("column {name}: bad value {field:?}")))
}

/// Streams metrics records as CSV, writing the header first.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(CSV_HEADER)?;
        Ok(MetricsWriter { inner })
    }

    /// One row per layer, then the aggregate row.
    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let epoch = rec.epoch.to_string();
        let loss = fmt_f(rec.train_loss);
        let train_acc = fmt_f(rec.train_accuracy);
        let test_acc = fmt_opt(rec.test_accuracy);
        for l in &rec.layers {
            let angles: Vec<String> = l.principal_angles_deg.iter().map(|&a| fmt_f(a)).collect();
            self.inner.write_record([
                epoch.as_str(),
                &l.layer.to_string(),
                &l.rank.map(|r| r.to_string()).unwrap_or_default(),
                &loss,
                &train_acc,
                &test_acc,
                &fmt_opt(l.grad_alignment_deg),
                &fmt_opt(l.matrix_alignment_deg),
                &fmt_opt(l.ortho_drift),
                &l.params.to_string(),
                &l.inference_flops.to_string(),
                &angles.join(";"),
            ])?;
        }
        self.inner.write_record([
            epoch.as_str(),
            AGGREGATE_LAYER,
            "",
            &loss,
            &train_acc,
            &test_acc,
            "",
            "",
            "",
            &rec.params_total.to_string(),
            &rec.inference_flops.to_string(),
            "",
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io("metrics", e))
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::io("metrics", e.into_error()))
    }
}

pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = MetricsWriter::new(out)?;
    for r in records {
        w.write(r)?;
    }
    w.flush()
}

/// Parses CSV produced by [`write_metrics_csv`].
pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::arg("unexpected metrics header"));
    }
    let mut out = Vec::new();
    let mut pending: Vec<LayerMetrics> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let f = |i: usize| row.get(i).unwrap_or("");
        if f(1) == AGGREGATE_LAYER {
            out.push(MetricsRecord {
                epoch: parse_req(f(0), "epoch")?,
                train_loss: parse_req(f(3), "train_loss")?,
                train_accuracy: parse_req(f(4), "train_accuracy")?,
                test_accuracy: parse_opt(f(5), "test_accuracy")?,
                layers: std::mem::take(&mut pending),
                params_total: parse_req(f(9), "params")?,
                inference_flops: parse_req(f(10), "inference_flops")?,
            });
        } else {
            let angles = if f(11).is_empty() {
                Vec::new()
            } else {
                f(11)
                    .split(';')
                    .map(|a| parse_req(a, "principal_angles_deg"))
                    .collect::<Result<_>>()?
            };
            pending.push(LayerMetrics {
                layer: parse_req(f(1), "layer")?,
                rank: if f(2).is_empty() {
                    None
                } else {
                    Some(parse_req(f(2), "rank")?)
                },
                grad_alignment_deg: parse_opt(f(6), "grad_alignment_deg")?,
                matrix_alignment_deg: parse_opt(f(7), "matrix_alignment_deg")?,
                principal_angles_deg: angles,
                ortho_drift: parse_opt(f(8), "ortho_drift")?,
                params: parse_req(f(9), "params")?,
                inference_flops: parse_req(f(10), "inference_flops")?,
            });
        }
    }
    if !pending.is_empty() {
        return Err(Error::arg("layer rows without a closing aggregate row"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_angle_cases() {
        let g = Matrix::from_rows(&[&[1.0f64, 2.0], &[-0.5, 3.0]]);
        assert_eq!(grad_alignment_deg(&g, &g).unwrap(), Some(0.0));
        assert!((grad_alignment_deg(&g, &g.scale(-1.0)).unwrap().unwrap() - 180.0).abs() < 1e-12);
        let a = Matrix::from_rows(&[&[1.0f64, 0.0]]);
        let b = Matrix::from_rows(&[&[0.0f64, 1.0]]);
        assert!((grad_alignment_deg(&a, &b).unwrap().unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(grad_alignment_deg(&a, &Matrix::zeros(1, 2)).unwrap(), None);
        assert!(grad_alignment_deg(&a, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn matrix_angle_cases() {
        let w = Matrix::from_rows(&[&[1.0f64, 2.0, 0.0], &[0.0, 1.0, 1.0]]);
        assert!(matrix_alignment_deg(&w, &w.transpose()).unwrap().unwrap() < 1e-6);
        let w = Matrix::from_rows(&[&[1.0f64, 0.0, 0.0]]);
        let b = Matrix::from_rows(&[&[0.0f64], &[1.0], &[0.0]]);
        assert!((matrix_alignment_deg(&w, &b).unwrap().unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(matrix_alignment_deg(&Matrix::<f64>::zeros(1, 3), &b).unwrap(), None);
    }

    #[test]
    fn csv_round_trip() {
        let rec = MetricsRecord {
            epoch: 3,
            train_loss: 0.1 + 0.2,
            train_accuracy: 0.75,
            test_accuracy: None,
            layers: vec![
                LayerMetrics {
                    layer: 0,
                    rank: Some(4),
                    grad_alignment_deg: Some(12.345678901234567),
                    matrix_alignment_deg: None,
                    principal_angles_deg: vec![],
                    ortho_drift: Some(1e-17),
                    params: 10,
                    inference_flops: 20,
                },
                LayerMetrics {
                    layer: 2,
                    rank: None,
                    grad_alignment_deg: None,
                    matrix_alignment_deg: Some(80.5),
                    principal_angles_deg: vec![10.25, 80.5],
                    ortho_drift: None,
                    params: 1,
                    inference_flops: 2,
                },
            ],
            params_total: 11,
            inference_flops: 22,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[rec.clone(), rec.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,layer,rank,train_loss"));
        let back = read_metrics_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![rec.clone(), rec]);
    }
}
