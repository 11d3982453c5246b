//! Panel CSV in long (`id,t,y`) and wide (one row per individual) layouts.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::dgp::{PanelData, PanelSource};
use crate::error::{Error, Result};

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_long<W: Write>(data: &PanelData, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "t", "y"])?;
    for i in 0..data.n {
        for (s, v) in data.row(i).iter().enumerate() {
            out.write_record([(i + 1).to_string(), (s + 1).to_string(), fmt(*v)])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_wide<W: Write>(data: &PanelData, w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for i in 0..data.n {
        out.write_record(data.row(i).iter().map(|v| fmt(*v)))?;
    }
    out.flush()?;
    Ok(())
}

fn parse_f64(s: &str, line: u64) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Input(format!("line {line}: '{s}' is not a number")))
}

/// Reads `id,t,y` rows. Individuals keep their order of first appearance.
pub fn read_long<R: Read>(r: R, source: &str) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Input(format!("missing column '{name}' (expected header id,t,y)")))
    };
    let (ci, ct, cy) = (col("id")?, col("t")?, col("y")?);
    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<Vec<(usize, f64)>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| rec.get(c).ok_or_else(|| Error::Input(format!("line {line}: too few fields")));
        let id = field(ci)?.to_string();
        let t: usize = field(ct)?
            .parse()
            .map_err(|_| Error::Input(format!("line {line}: period must be a positive integer")))?;
        if t == 0 {
            return Err(Error::Input(format!("line {line}: periods start at 1")));
        }
        let y = parse_f64(field(cy)?, line)?;
        let k = *index.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            cells.push(Vec::new());
            cells.len() - 1
        });
        cells[k].push((t, y));
    }
    if cells.is_empty() {
        return Err(Error::Input("panel file has no observations".into()));
    }
    let t = cells[0].len();
    let mut y = Vec::with_capacity(cells.len() * t);
    for (k, mut c) in cells.into_iter().enumerate() {
        c.sort_by_key(|p| p.0);
        let balanced = c.len() == t && c.iter().enumerate().all(|(s, p)| p.0 == s + 1);
        if !balanced {
            return Err(Error::Input(format!(
                "individual '{}' does not have periods 1..{t} exactly once; the panel must be balanced",
                order[k]
            )));
        }
        y.extend(c.into_iter().map(|p| p.1));
    }
    PanelData::from_rows(order.len(), t, y, PanelSource::External(source.into()))
}

fn read_rows<R: Read>(r: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
    let mut y = Vec::new();
    let mut t = None;
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if *t.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Input(format!("line {line}: ragged row")));
        }
        for f in rec.iter() {
            y.push(parse_f64(f, line)?);
        }
        n += 1;
    }
    let t = t.ok_or_else(|| Error::Input("file is empty".into()))?;
    Ok((n, t, y))
}

/// Reads a headerless matrix with one row per individual.
pub fn read_wide<R: Read>(r: R, source: &str) -> Result<PanelData> {
    let (n, t, y) = read_rows(r)?;
    PanelData::from_rows(n, t, y, PanelSource::External(source.into()))
}

/// Reads a headerless numeric matrix.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let (n, k, v) = read_rows(std::fs::File::open(path)?)?;
    Ok(DMatrix::from_row_slice(n, k, &v))
}

pub fn read_panel(path: &Path, wide: bool) -> Result<PanelData> {
    let f = std::fs::File::open(path)?;
    let name = path.display().to_string();
    if wide {
        read_wide(f, &name)
    } else {
        read_long(f, &name)
    }
}

pub fn write_panel(data: &PanelData, path: &Path, wide: bool) -> Result<()> {
    let f = std::fs::File::create(path)?;
    if wide {
        write_wide(data, f)
    } else {
        write_long(data, f)
    }
}
