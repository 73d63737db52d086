use std::io::{Read, Write};

use crate::error::{dim_err, Error, Result};
use crate::nd::Tensor;

/// A batch of rows with an observation mask.
///
/// `values` holds 0 in every missing cell (the standardised mean), so it can
/// be fed to the encoder directly; `mask` is 1 for observed, 0 for missing.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedData {
    pub values: Tensor,
    pub mask: Tensor,
}

impl MaskedData {
    pub fn new(values: &Tensor, mask: &Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.shape() != mask.shape() {
            return dim_err(format!(
                "values {:?} and mask {:?} must be equal-shaped matrices",
                values.shape(),
                mask.shape()
            ));
        }
        let mut v = values.clone();
        let mut m = mask.clone();
        for (x, o) in v.data_mut().iter_mut().zip(m.data_mut()) {
            *o = if *o != 0.0 { 1.0 } else { 0.0 };
            if *o == 0.0 {
                *x = 0.0;
            }
        }
        v.ensure_finite("observed values")?;
        Ok(Self { values: v, mask: m })
    }

    pub fn fully_observed(values: Tensor) -> Result<Self> {
        let mask = Tensor::full(values.shape(), 1.0);
        Self::new(&values, &mask)
    }

    /// Mask derived from NaN positions.
    pub fn from_nan(values: &Tensor) -> Result<Self> {
        let mask = values.map(|v| if v.is_nan() { 0.0 } else { 1.0 });
        Self::new(values, &mask)
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self { values: self.values.select_rows(idx), mask: self.mask.select_rows(idx) }
    }

    pub fn observed_count(&self, row: usize) -> usize {
        self.mask.row(row).iter().filter(|m| **m != 0.0).count()
    }
}

/// Reads a plain numeric CSV with a header row. Empty fields and `nan`
/// become NaN (missing).
pub fn read_matrix_csv(reader: impl Read) -> Result<(Vec<String>, Tensor)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() {
        return Err(Error::Parse { line: 1, message: "empty header".into() });
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if rec.len() != header.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields, got {}", header.len(), rec.len()) });
        }
        for (j, f) in rec.iter().enumerate() {
            let v = if f.is_empty() || f.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                let v: f64 = f.parse().map_err(|e| Error::Parse { line, message: format!("column {}: {e}", header[j]) })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, message: format!("column {}: non-finite value", header[j]) });
                }
                v
            };
            data.push(v);
        }
        rows += 1;
    }
    let cols = header.len();
    Ok((header, Tensor::matrix(rows, cols, data)?))
}

/// Writes a matrix with a header; NaN cells are left empty.
pub fn write_matrix_csv(header: &[String], values: &Tensor, writer: impl Write) -> Result<()> {
    if header.len() != values.cols() {
        return dim_err(format!("{} header names for {} columns", header.len(), values.cols()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(header).map_err(ser)?;
    for i in 0..values.rows() {
        let row: Vec<String> = values.row(i).iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }).collect();
        w.write_record(&row).map_err(ser)?;
    }
    w.flush()?;
    Ok(())
}

/// Default column names `x0, x1, ...`.
pub fn default_header(cols: usize) -> Vec<String> {
    (0..cols).map(|j| format!("x{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_cells_become_zero_and_missing() {
        let v = Tensor::matrix(1, 3, vec![1.0, f64::NAN, 2.0]).unwrap();
        let d = MaskedData::from_nan(&v).unwrap();
        assert_eq!(d.values.data(), &[1.0, 0.0, 2.0]);
        assert_eq!(d.mask.data(), &[1.0, 0.0, 1.0]);
        assert_eq!(d.observed_count(0), 2);
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let t = Tensor::matrix(2, 2, vec![1.5, f64::NAN, -0.25, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_matrix_csv(&default_header(2), &t, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "x0,x1\n1.5,\n-0.25,3\n");
        let (h, back) = read_matrix_csv(buf.as_slice()).unwrap();
        assert_eq!(h, default_header(2));
        assert!(back.at(0, 1).is_nan());
        assert_eq!(back.at(1, 0), -0.25);
        assert!(matches!(read_matrix_csv("a,b\n1,q\n".as_bytes()), Err(Error::Parse { line: 2, .. })));
    }
}
