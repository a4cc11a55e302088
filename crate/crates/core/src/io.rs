//! CSV and JSON output with every float printed to 17 significant digits.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::criterion::Tabulated;
use crate::error::{Error, Result};
use crate::fragmentation::SweepReport;
use crate::grid::{Field, Grid};

/// 17 significant digits in scientific notation; round-trips every `f64`.
pub fn f17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// `serde_json` formatter printing floats with [`f17`]. Non-finite values
/// are emitted as `null` by the serializer itself.
#[derive(Default)]
pub struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(f17(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = to_json_string(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Writes a header row and string rows as RFC 4180 CSV.
pub fn write_table<I>(path: &Path, headers: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(headers)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct FieldHeader {
    pub name: String,
    pub dim: usize,
    pub n_per_axis: usize,
    pub spacing: f64,
    pub node_count: usize,
    pub ordering: String,
}

/// Path of the JSON sidecar describing a field CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes `x[,y],value` rows plus the JSON sidecar. Returns both paths.
pub fn write_field_csv(path: &Path, name: &str, field: &Field) -> Result<Vec<PathBuf>> {
    let g = field.grid();
    let headers: &[&str] = if g.dim() == 1 {
        &["x", "value"]
    } else {
        &["x", "y", "value"]
    };
    let rows = (0..g.node_count()).map(|k| {
        let c = g.coords(k);
        let v = f17(field.values()[k]);
        if g.dim() == 1 {
            vec![f17(c[0]), v]
        } else {
            vec![f17(c[0]), f17(c[1]), v]
        }
    });
    write_table(path, headers, rows)?;
    let header = FieldHeader {
        name: name.into(),
        dim: g.dim(),
        n_per_axis: g.n_per_axis(),
        spacing: g.spacing(),
        node_count: g.node_count(),
        ordering: "x-fastest".into(),
    };
    let side = sidecar_path(path);
    write_json(&side, &header)?;
    Ok(vec![path.to_path_buf(), side])
}

/// Reads a field CSV written by [`write_field_csv`] (or any CSV whose last
/// column holds node values in x-fastest order) onto `g`.
pub fn read_field_csv(path: &Path, g: &Grid) -> Result<Field> {
    let mut r = csv::Reader::from_path(path)?;
    let mut values = Vec::with_capacity(g.node_count());
    for rec in r.records() {
        let rec = rec?;
        let last = rec
            .iter()
            .next_back()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: empty row", path.display())))?;
        let v: f64 = last.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("{}: cannot parse `{last}`", path.display()))
        })?;
        values.push(v);
    }
    if values.len() != g.node_count() {
        return Err(Error::ShapeMismatch {
            expected: g.node_count(),
            got: values.len(),
        });
    }
    Field::new(*g, values)
}

/// Reads `t, j, j', j''` rows (after a header row) into a tabulated criterion.
pub fn read_tabulated_criterion(path: &Path) -> Result<Tabulated> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "{}: row {} has {} columns, expected t, j, j', j''",
                path.display(),
                line + 1,
                rec.len()
            )));
        }
        let mut row = [0.0; 4];
        for (slot, cell) in row.iter_mut().zip(rec.iter()) {
            *slot = cell.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("{}: cannot parse `{cell}`", path.display()))
            })?;
        }
        rows.push(row);
    }
    Tabulated::new(rows)
}

pub const SWEEP_COLUMNS: [&str; 8] = [
    "mu",
    "bv_norm",
    "tv_norm",
    "objective",
    "objective_minus_m0",
    "bang_bang_fraction",
    "grid_n",
    "under_resolved",
];

/// One row per sweep record, in descending `μ`.
pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> Result<()> {
    let rows = report.records.iter().map(|r| {
        vec![
            f17(r.mu),
            f17(r.bv_norm),
            f17(r.tv_norm),
            f17(r.objective),
            f17(r.objective_minus_m0),
            f17(r.bang_bang_fraction),
            r.grid_n.to_string(),
            r.under_resolved.to_string(),
        ]
    });
    write_table(path, &SWEEP_COLUMNS, rows)
}

/// Plot-ready `(log μ, log BV)` pairs.
pub fn write_loglog_csv(path: &Path, report: &SweepReport) -> Result<()> {
    let rows = report
        .records
        .iter()
        .map(|r| vec![f17(r.mu.ln()), f17(r.bv_norm.ln())]);
    write_table(path, &["log_mu", "log_bv"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Sample {
        a: f64,
        b: Vec<f64>,
        c: f64,
    }

    #[test]
    fn floats_round_trip_with_seventeen_digits() {
        for x in [0.1, 1.0 / 3.0, 2.0f64.sqrt() * 1e-300, -123456.789] {
            let s = f17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let digits: String = s
                .split('e')
                .next()
                .unwrap()
                .chars()
                .filter(|c| c.is_ascii_digit())
                .collect();
            assert_eq!(digits.len(), 17);
        }
        let json = to_json_string(&Sample {
            a: 0.4,
            b: vec![1.0, f64::NAN],
            c: 2.5e-3,
        })
        .unwrap();
        assert_eq!(
            json,
            r#"{"a":4.0000000000000002e-1,"b":[1.0000000000000000e0,null],"c":2.5000000000000001e-3}"#
        );
        let back: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(back["a"].as_f64().unwrap(), 0.4);
    }

    #[test]
    fn field_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for dim in [1, 2] {
            let g = Grid::new(dim, 9).unwrap();
            let f = g.sample(|x| (x[0] * 3.0).sin() + x[1] / 7.0);
            let p = dir.path().join(format!("f{dim}.csv"));
            let paths = write_field_csv(&p, "f", &f).unwrap();
            assert_eq!(paths.len(), 2);
            let back = read_field_csv(&p, &g).unwrap();
            assert_eq!(back, f);
            let side: FieldHeader =
                serde_json::from_str(&std::fs::read_to_string(&paths[1]).unwrap()).unwrap();
            assert_eq!(side.node_count, g.node_count());
        }
        let g = Grid::new(1, 17).unwrap();
        assert!(read_field_csv(&dir.path().join("f1.csv"), &g).is_err());
    }

    #[test]
    fn tabulated_criterion_from_csv() {
        use crate::criterion::Criterion;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.csv");
        std::fs::write(&p, "t,j,dj,ddj\n0,0,1,0\n1,0.75,0.5,-0.5\n").unwrap();
        let j = read_tabulated_criterion(&p).unwrap();
        assert_eq!(j.value(0.5), 0.375);
        assert_eq!(j.d1(0.5), 0.75);
        std::fs::write(&p, "t,j\n0,0\n").unwrap();
        assert!(read_tabulated_criterion(&p).is_err());
    }
}
