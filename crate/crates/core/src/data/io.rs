use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use super::{Assignment, Cell, CellGrid, OdTensor, PoiMatrix};
use crate::error::{Error, Result};

const OD_HEADER: [&str; 4] = ["origin", "destination", "slot", "count"];
const GRID_HEADER: [&str; 3] = ["id", "lon", "lat"];
const ASSIGNMENT_HEADER: [&str; 2] = ["cell_id", "supercell_id"];
const RADIUS_PREFIX: &str = "# radius_km=";

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.iter().ne(expected.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, path: &Path, line: u64) -> Result<T> {
    let raw = rec
        .get(idx)
        .ok_or_else(|| parse_err(path, line, format!("missing column `{name}`")))?;
    raw.parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {name} `{raw}`")))
}

fn fmt_count(v: f64) -> String {
    // `{}` on f64 prints integral values without a fraction and otherwise
    // the shortest string that round-trips.
    format!("{v}")
}

/// Reads `origin,destination,slot,count` triples into a dense tensor. Missing
/// triples are zero and repeated triples are summed. When `n_slots` is `None`
/// the slot count is inferred as the largest slot index plus one.
pub fn read_od_csv<R: Read>(reader: R, path: &Path, n_cells: usize, n_slots: Option<usize>) -> Result<OdTensor> {
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, path, &OD_HEADER)?;
    let mut triples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 fields, found {}", rec.len())));
        }
        let o: usize = field(&rec, 0, "origin", path, line)?;
        let d: usize = field(&rec, 1, "destination", path, line)?;
        let t: usize = field(&rec, 2, "slot", path, line)?;
        let c: f64 = field(&rec, 3, "count", path, line)?;
        if !(c.is_finite() && c >= 0.0) {
            return Err(parse_err(path, line, format!("count must be finite and non-negative, got {c}")));
        }
        if o >= n_cells || d >= n_cells {
            return Err(parse_err(path, line, format!("cell index out of range 0..{n_cells}: ({o},{d})")));
        }
        if let Some(ns) = n_slots {
            if t >= ns {
                return Err(parse_err(path, line, format!("slot {t} out of range 0..{ns}")));
            }
        }
        triples.push((o, d, t, c));
    }
    let slots = n_slots.unwrap_or_else(|| triples.iter().map(|x| x.2 + 1).max().unwrap_or(0));
    let mut data = Array3::zeros((n_cells, n_cells, slots));
    for (o, d, t, c) in triples {
        data[[o, d, t]] += c;
    }
    OdTensor::new(data)
}

pub fn load_od_csv(path: impl AsRef<Path>, grid: &CellGrid, n_slots: Option<usize>) -> Result<OdTensor> {
    let path = path.as_ref();
    read_od_csv(open(path)?, path, grid.len(), n_slots)
}

/// Smallest `(cells, slots)` that holds every triple of an OD file.
pub fn od_csv_extent(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let mut rdr = csv_reader(open(path)?);
    check_header(&mut rdr, path, &OD_HEADER)?;
    let (mut cells, mut slots) = (0, 0);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let o: usize = field(&rec, 0, "origin", path, line)?;
        let d: usize = field(&rec, 1, "destination", path, line)?;
        let t: usize = field(&rec, 2, "slot", path, line)?;
        cells = cells.max(o + 1).max(d + 1);
        slots = slots.max(t + 1);
    }
    Ok((cells, slots))
}

/// Writes the non-zero entries of `x` as triples, slots numbered from 0.
pub fn write_od_csv<W: Write>(mut w: W, x: &OdTensor) -> std::io::Result<()> {
    writeln!(w, "{}", OD_HEADER.join(","))?;
    let (n, _, t) = x.data().dim();
    for i in 0..n {
        for j in 0..n {
            for s in 0..t {
                let v = x.get(i, j, s);
                if v != 0.0 {
                    writeln!(w, "{i},{j},{s},{}", fmt_count(v))?;
                }
            }
        }
    }
    w.flush()
}

pub fn save_od_csv(path: impl AsRef<Path>, x: &OdTensor) -> Result<()> {
    let path = path.as_ref();
    write_od_csv(create(path)?, x).map_err(|e| Error::io(path, e))
}

pub fn save_grid_csv(path: impl AsRef<Path>, grid: &CellGrid) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let run = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "{RADIUS_PREFIX}{}", grid.radius_km())?;
        writeln!(w, "{}", GRID_HEADER.join(","))?;
        for c in grid.cells() {
            writeln!(w, "{},{},{}", c.id, c.lon, c.lat)?;
        }
        w.flush()
    };
    run(&mut w).map_err(|e| Error::io(path, e))
}

/// Grid file: a `# radius_km=<r>` line followed by `id,lon,lat` rows.
pub fn load_grid_csv(path: impl AsRef<Path>) -> Result<CellGrid> {
    let path = path.as_ref();
    let mut reader = BufReader::new(open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let radius: f64 = first
        .trim()
        .strip_prefix(RADIUS_PREFIX)
        .and_then(|r| r.trim().parse().ok())
        .ok_or_else(|| parse_err(path, 1, format!("expected `{RADIUS_PREFIX}<km>` header line")))?;
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, path, &GRID_HEADER).map_err(|e| match e {
        Error::Parse { path, msg, .. } => Error::Parse { path, line: 2, msg },
        other => other,
    })?;
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map(|p| p.line() + 1).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line() + 1).unwrap_or(0);
        cells.push(Cell {
            id: field(&rec, 0, "id", path, line)?,
            lon: field(&rec, 1, "lon", path, line)?,
            lat: field(&rec, 2, "lat", path, line)?,
        });
    }
    CellGrid::new(cells, radius)
}

pub fn save_assignment_csv(path: impl AsRef<Path>, y: &Assignment) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let run = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "{}", ASSIGNMENT_HEADER.join(","))?;
        for (i, l) in y.labels().iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        w.flush()
    };
    run(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_assignment_csv(path: impl AsRef<Path>) -> Result<Assignment> {
    let path = path.as_ref();
    let mut rdr = csv_reader(open(path)?);
    check_header(&mut rdr, path, &ASSIGNMENT_HEADER)?;
    let mut pairs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let cell: usize = field(&rec, 0, "cell_id", path, line)?;
        let sc: usize = field(&rec, 1, "supercell_id", path, line)?;
        pairs.push((cell, sc));
    }
    pairs.sort_unstable();
    if pairs.iter().enumerate().any(|(i, p)| p.0 != i) {
        return Err(parse_err(path, 0, "cell ids must cover 0..N exactly once"));
    }
    let m = pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    Assignment::from_labels(pairs.into_iter().map(|p| p.1).collect(), m)
}

/// POI file: `cell,poi_0,...,poi_{p-1}` with one binary row per region.
pub fn save_poi_csv(path: impl AsRef<Path>, poi: &PoiMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let run = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        let cols: Vec<String> = (0..poi.n_categories()).map(|k| format!("poi_{k}")).collect();
        writeln!(w, "cell{}{}", if cols.is_empty() { "" } else { "," }, cols.join(","))?;
        for (i, row) in poi.data().rows().into_iter().enumerate() {
            write!(w, "{i}")?;
            for v in row {
                write!(w, ",{}", *v as u8)?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    run(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_poi_csv(path: impl AsRef<Path>) -> Result<PoiMatrix> {
    let path = path.as_ref();
    let mut rdr = csv_reader(open(path)?);
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.get(0) != Some("cell") {
        return Err(parse_err(path, 1, "expected header starting with `cell`"));
    }
    let p = header.len() - 1;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id: usize = field(&rec, 0, "cell", path, line)?;
        let vals = (1..=p)
            .map(|k| field::<f64>(&rec, k, "poi flag", path, line))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, vals));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(parse_err(path, 0, "cell ids must cover 0..N exactly once"));
    }
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flat_map(|r| r.1).collect();
    PoiMatrix::new(Array2::from_shape_vec((n, p), flat).expect("rows have uniform width"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn read(text: &str, n: usize, t: Option<usize>) -> Result<OdTensor> {
        read_od_csv(text.as_bytes(), Path::new("mem.csv"), n, t)
    }

    #[test]
    fn header_only_gives_zero_tensor() {
        let x = read("origin,destination,slot,count\n", 3, Some(2)).unwrap();
        assert_eq!(x.data().dim(), (3, 3, 2));
        assert_eq!(x.total(), 0.0);
    }

    #[test]
    fn duplicates_are_summed() {
        let x = read("origin,destination,slot,count\n0,1,0,2\n0,1,0,3\n", 2, Some(1)).unwrap();
        assert_eq!(x.get(0, 1, 0), 5.0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = read("origin,destination,slot,count\n0,1,0,2\n0,x,0,1\n", 2, Some(1)).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = read("origin,destination,slot,count\n0,1,0\n", 2, Some(1)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn out_of_range_is_error() {
        assert!(read("origin,destination,slot,count\n0,2,0,1\n", 2, Some(1)).is_err());
        assert!(read("origin,destination,slot,count\n0,1,4,1\n", 2, Some(2)).is_err());
        assert!(read("origin,destination,slot,count\n0,1,0,-1\n", 2, Some(1)).is_err());
        assert!(read("o,d,s,c\n", 2, Some(1)).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_cells: 20,
            n_communities: 3,
            days: 2,
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&cfg, 5).unwrap();
        let p = |f: &str| dir.path().join(f);

        save_od_csv(p("od.csv"), &data.od).unwrap();
        save_grid_csv(p("grid.csv"), &data.grid).unwrap();
        save_assignment_csv(p("a.csv"), &data.truth).unwrap();
        save_poi_csv(p("poi.csv"), &data.poi).unwrap();

        let grid = load_grid_csv(p("grid.csv")).unwrap();
        assert_eq!(grid, data.grid);
        let od = load_od_csv(p("od.csv"), &grid, Some(data.od.n_slots())).unwrap();
        assert_eq!(od.data(), data.od.data());
        assert_eq!(load_assignment_csv(p("a.csv")).unwrap(), data.truth);
        assert_eq!(load_poi_csv(p("poi.csv")).unwrap(), data.poi);
    }
}
