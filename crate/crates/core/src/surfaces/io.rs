//! Surface CSV: header `date,tenor,delta,vol`, one row per observed cell.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::surfaces::grid::{
    cell_coords, cell_index, delta_index, tenor_index, Dataset, Surface, DELTAS, NUM_CELLS, TENOR_LABELS,
};

pub const SURFACE_HEADER: [&str; 4] = ["date", "tenor", "delta", "vol"];

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_csv(f)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, message: format!("{other:?}") },
    }
}

pub fn read_csv(reader: impl Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != SURFACE_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}, got {}", SURFACE_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut days: BTreeMap<NaiveDate, Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| bad(format!("bad date {:?}: {e}", &rec[0])))?;
        let t = tenor_index(&rec[1]).ok_or_else(|| bad(format!("unknown tenor {:?}", &rec[1])))?;
        let delta: f64 = rec[2].parse().map_err(|_| bad(format!("bad delta {:?}", &rec[2])))?;
        let d = delta_index(delta).ok_or_else(|| bad(format!("unsupported delta {delta}")))?;
        let vol: f64 = rec[3].parse().map_err(|_| bad(format!("bad vol {:?}", &rec[3])))?;
        if !(vol > 0.0 && vol.is_finite()) {
            return Err(Error::Data(format!(
                "line {line}: vol {vol} at ({date}, {}, {}) must be positive",
                TENOR_LABELS[t], DELTAS[d]
            )));
        }
        let cells = days.entry(date).or_insert_with(|| vec![f64::NAN; NUM_CELLS]);
        let idx = cell_index(t, d);
        if !cells[idx].is_nan() {
            return Err(Error::Data(format!(
                "line {line}: duplicate cell ({date}, {}, {})",
                TENOR_LABELS[t], DELTAS[d]
            )));
        }
        cells[idx] = vol;
    }
    let surfaces = days
        .into_iter()
        .map(|(date, values)| Surface::new(date, values))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(surfaces)
}

/// Writes observed cells only; missing cells are simply absent.
pub fn write_csv(dataset: &Dataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SURFACE_HEADER).map_err(csv_err)?;
    for s in &dataset.surfaces {
        let date = s.date.format("%Y-%m-%d").to_string();
        for (i, (v, m)) in s.values.iter().zip(&s.mask).enumerate() {
            if !m {
                continue;
            }
            let (t, d) = cell_coords(i);
            w.write_record([date.as_str(), TENOR_LABELS[t], &DELTAS[d].to_string(), &v.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(dataset, std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_day(date: &str, skip: Option<usize>) -> String {
        let mut s = String::from("date,tenor,delta,vol\n");
        for i in 0..NUM_CELLS {
            if Some(i) == skip {
                continue;
            }
            let (t, d) = cell_coords(i);
            s.push_str(&format!("{date},{},{},{}\n", TENOR_LABELS[t], DELTAS[d], 0.1 + i as f64 * 0.001));
        }
        s
    }

    #[test]
    fn complete_and_partial_days() {
        let ds = read_csv(full_day("2020-01-02", None).as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.surfaces[0].is_complete());
        let ds = read_csv(full_day("2020-01-02", Some(7)).as_bytes()).unwrap();
        assert_eq!(ds.surfaces[0].observed_count(), 39);
        assert!(!ds.surfaces[0].mask[7]);
    }

    #[test]
    fn rejects_bad_rows() {
        let err = read_csv("date,tenor,delta,vol\n2020-01-02,1M,0.5,-0.1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("1M") && m.contains("0.5")), "{err}");
        let err = read_csv("date,tenor,delta,vol\n2020-01-02,1M,0.5,0.1\n2020-01-02,5M,0.5,0.1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_csv("date,tenor,delta,vol\n2020-01-02,1M,0.5,0.1\n2020-01-02,1M,0.5,0.2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let err = read_csv("date,tenor,vol\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn round_trip() {
        let mut text = full_day("2020-01-02", Some(3));
        text.push_str(&full_day("2020-01-03", None).replace("date,tenor,delta,vol\n", ""));
        let ds = read_csv(text.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(ds.len(), back.len());
        for (a, b) in ds.surfaces.iter().zip(&back.surfaces) {
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
            }
        }
    }
}
