//! CSV ingestion and export, and atomic file writes.
//!
//! Two ensemble layouts are read:
//!
//! * `shared`: the header row holds one coordinate per column, its components
//!   joined by `:` (for example `4:1:2.5`); every following row is one sample.
//! * `per-row`: every row lists `(c_1, ..., c_dim, value)` groups, so samples
//!   may be measured at different coordinates. The header row is ignored.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use dci_core::ensemble::Sample;
use dci_core::{DataEnsemble, Points};
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layout {
    #[default]
    Shared,
    PerRow {
        dim: usize,
    },
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| PipelineError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| PipelineError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| PipelineError::io(path, e))?;
    tmp.persist(path).map_err(|e| PipelineError::io(path, e.error))?;
    Ok(())
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, PipelineError> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(file))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> PipelineError {
    PipelineError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn csv_err(path: &Path, e: csv::Error) -> PipelineError {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

fn parse_field(path: &Path, line: u64, col: usize, field: &str) -> Result<f64, PipelineError> {
    field.parse::<f64>().map_err(|_| parse_err(path, line, format!("column {}: `{field}` is not a number", col + 1)))
}

/// Numeric rows after the header, each with its 1-based line number.
fn numeric_rows(path: &Path, rdr: &mut csv::Reader<std::fs::File>) -> Result<Vec<(u64, Vec<f64>)>, PipelineError> {
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec.iter().enumerate().map(|(c, f)| parse_field(path, line, c, f)).collect::<Result<Vec<_>, _>>()?;
        out.push((line, row));
    }
    Ok(out)
}

pub fn read_ensemble(path: &Path, layout: Layout) -> Result<DataEnsemble, PipelineError> {
    let mut rdr = reader(path)?;
    match layout {
        Layout::Shared => {
            let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
            if header.is_empty() {
                return Err(parse_err(path, 1, "empty header"));
            }
            let mut coords: Option<Points> = None;
            for (c, cell) in header.iter().enumerate() {
                let comps = cell.split(':').map(|f| parse_field(path, 1, c, f)).collect::<Result<Vec<_>, _>>()?;
                let pts = coords.get_or_insert_with(|| Points::empty(comps.len()));
                if comps.len() != pts.dim() {
                    return Err(parse_err(path, 1, format!("column {}: coordinate has {} components, expected {}", c + 1, comps.len(), pts.dim())));
                }
                pts.push(&comps);
            }
            let coords = coords.expect("nonempty header");
            let width = coords.len();
            let mut rows = Vec::new();
            for (line, row) in numeric_rows(path, &mut rdr)? {
                if row.len() != width {
                    return Err(PipelineError::RaggedRow { path: path.to_path_buf(), row: line, expected: width, got: row.len() });
                }
                rows.push(row);
            }
            Ok(DataEnsemble::with_shared_coords(coords, rows)?)
        }
        Layout::PerRow { dim } => {
            if dim == 0 {
                return Err(PipelineError::Config("per-row layout needs dim >= 1".into()));
            }
            let group = dim + 1;
            let mut samples = Vec::new();
            for (line, row) in numeric_rows(path, &mut rdr)? {
                if row.is_empty() || row.len() % group != 0 {
                    let expected = (row.len() / group).max(1) * group;
                    return Err(PipelineError::RaggedRow { path: path.to_path_buf(), row: line, expected, got: row.len() });
                }
                let mut coords = Points::empty(dim);
                let mut values = Vec::with_capacity(row.len() / group);
                for g in row.chunks(group) {
                    coords.push(&g[..dim]);
                    values.push(g[dim]);
                }
                samples.push(Sample { coords: Arc::new(coords), values });
            }
            Ok(DataEnsemble::new(dim, samples)?)
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory writer")
}

/// Writes the `shared` layout when every sample has the same coordinates and
/// `per-row` otherwise. Values are written to full precision.
pub fn write_ensemble(path: &Path, data: &DataEnsemble) -> Result<Layout, PipelineError> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let shared = data.samples().first().map(|s0| data.samples().iter().all(|s| Arc::ptr_eq(&s.coords, &s0.coords) || s.coords == s0.coords));
    let layout = match shared {
        Some(true) | None => {
            let coords = data.samples().first().map(|s| s.coords.clone());
            let header: Vec<String> = coords
                .iter()
                .flat_map(|c| c.rows().map(|r| r.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(":")).collect::<Vec<_>>())
                .collect();
            w.write_record(&header).map_err(|e| csv_err(path, e))?;
            for s in data.samples() {
                w.write_record(s.values.iter().map(|v| fmt(*v))).map_err(|e| csv_err(path, e))?;
            }
            Layout::Shared
        }
        Some(false) => {
            let dim = data.dim();
            let width = data.samples().iter().map(|s| s.values.len()).max().unwrap_or(0);
            let mut header = Vec::new();
            for i in 0..width {
                header.extend((0..dim).map(|j| format!("c{j}_{i}")));
                header.push(format!("v_{i}"));
            }
            w.write_record(&header).map_err(|e| csv_err(path, e))?;
            for s in data.samples() {
                let mut row = Vec::with_capacity(s.values.len() * (dim + 1));
                for (c, v) in s.coords.rows().zip(&s.values) {
                    row.extend(c.iter().map(|x| fmt(*x)));
                    row.push(fmt(*v));
                }
                w.write_record(&row).map_err(|e| csv_err(path, e))?;
            }
            Layout::PerRow { dim }
        }
    };
    write_atomic(path, &finish(w))?;
    Ok(layout)
}

/// A numeric table with a header of column names, one point per row.
pub fn read_points(path: &Path) -> Result<(Vec<String>, Points), PipelineError> {
    let mut rdr = reader(path)?;
    let names: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let mut pts = Points::empty(names.len());
    for (line, row) in numeric_rows(path, &mut rdr)? {
        if row.len() != names.len() {
            return Err(PipelineError::RaggedRow { path: path.to_path_buf(), row: line, expected: names.len(), got: row.len() });
        }
        pts.push(&row);
    }
    Ok((names, pts))
}

pub fn write_points(path: &Path, names: &[String], pts: &Points) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(names).map_err(|e| csv_err(path, e))?;
    for r in pts.rows() {
        w.write_record(r.iter().map(|v| fmt(*v))).map_err(|e| csv_err(path, e))?;
    }
    write_atomic(path, &finish(w))
}

/// A cell of an exported table.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(usize),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => fmt(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(Cell::render)).map_err(|e| csv_err(path, e))?;
    }
    write_atomic(path, &finish(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn shared_header_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "0:0,0.5:1,1:2\n1,2,3\n4,5,6\n7,8,9\n");
        let e = read_ensemble(&p, Layout::Shared).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e.dim(), 2);
        assert_eq!(e.sample(1).values, vec![4.0, 5.0, 6.0]);
        assert_eq!(e.sample(2).coords.row(1), &[0.5, 1.0]);
    }

    #[test]
    fn malformed_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "0,1\n1,2\n3,x\n");
        match read_ensemble(&p, Layout::Shared) {
            Err(PipelineError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "0,1\n1,2\n3\n");
        assert!(matches!(read_ensemble(&p, Layout::Shared), Err(PipelineError::RaggedRow { row: 3, expected: 2, got: 1, .. })));
        let q = write(dir.path(), "e.csv", "h\n0,1,2\n");
        assert!(matches!(read_ensemble(&q, Layout::PerRow { dim: 1 }), Err(PipelineError::RaggedRow { row: 2, .. })));
        let r = write(dir.path(), "f.csv", "0:1,2\n1,2\n");
        assert!(matches!(read_ensemble(&r, Layout::Shared), Err(PipelineError::Parse { line: 1, .. })));
    }

    #[test]
    fn per_row_layout_allows_different_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "h\n0,1.5,1,2.5\n0.5,7\n");
        let e = read_ensemble(&p, Layout::PerRow { dim: 1 }).unwrap();
        assert_eq!(e.sample(0).values, vec![1.5, 2.5]);
        assert_eq!(e.sample(1).coords.as_slice(), &[0.5]);
    }

    #[test]
    fn export_ingest_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let coords = Points::from_rows(&[[0.1, 1.0 / 3.0], [2.0, 1e-300]]);
        let rows = vec![vec![std::f64::consts::PI, -1.0 / 7.0], vec![5e-324, 1.7976931348623157e308]];
        let e = DataEnsemble::with_shared_coords(coords, rows).unwrap();
        let p = dir.path().join("e.csv");
        assert_eq!(write_ensemble(&p, &e).unwrap(), Layout::Shared);
        assert_eq!(read_ensemble(&p, Layout::Shared).unwrap(), e);

        let mixed = DataEnsemble::new(
            1,
            vec![
                Sample { coords: Arc::new(Points::from_scalars(&[0.25, 0.5])), values: vec![0.1, 0.2] },
                Sample { coords: Arc::new(Points::from_scalars(&[0.75])), values: vec![-0.3] },
            ],
        )
        .unwrap();
        let layout = write_ensemble(&p, &mixed).unwrap();
        assert_eq!(layout, Layout::PerRow { dim: 1 });
        assert_eq!(read_ensemble(&p, layout).unwrap(), mixed);
    }

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let pts = Points::from_rows(&[[1.0, 0.1 + 0.2], [-0.0, 3.5]]);
        let names = vec!["a".to_string(), "b".to_string()];
        write_points(&p, &names, &pts).unwrap();
        let (n2, p2) = read_points(&p).unwrap();
        assert_eq!(n2, names);
        assert_eq!(p2.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), pts.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
