//! Long-format CSV: `sample_id, time, y`, then `fixed_*` and `random_*`
//! covariate columns. One row per observation.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use opmix::grid::Grid;
use opmix::model::MixedModelData;

use crate::error::{CliError, CliResult};

/// Relative gap tolerance under which decimal-rounded times still count as
/// an equidistant design and are snapped onto it.
pub const SNAP_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: MixedModelData,
    /// In order of first appearance.
    pub sample_ids: Vec<String>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
}

struct Row {
    time: f64,
    y: f64,
    fixed: Vec<f64>,
    random: Vec<f64>,
}

fn number(cell: &str, column: &str, line: u64) -> CliResult<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| CliError::Ingest(format!("non-numeric value {cell:?} in column {column} at line {line}")))?;
    if !v.is_finite() {
        return Err(CliError::Ingest(format!("non-finite value {cell:?} in column {column} at line {line}")));
    }
    Ok(v)
}

/// Reads `path` into a model on the shared time grid. With `domain` unset
/// the interval is `[t_1 - h/2, t_N + h/2]` for the time step `h`.
pub fn ingest_csv(path: &Path, domain: Option<[f64; 2]>) -> CliResult<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    ingest_reader(file, domain)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, domain: Option<[f64; 2]>) -> CliResult<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Ingest(format!("missing column {name}")))
    };
    let (c_id, c_t, c_y) = (find("sample_id")?, find("time")?, find("y")?);
    let mut fixed_cols = Vec::new();
    let mut random_cols = Vec::new();
    for (i, h) in header.iter().enumerate() {
        if h.starts_with("fixed_") {
            fixed_cols.push(i);
        } else if h.starts_with("random_") {
            random_cols.push(i);
        } else if i != c_id && i != c_t && i != c_y {
            return Err(CliError::Ingest(format!("unexpected column {h}")));
        }
    }

    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<Row>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let id = cell(c_id).to_owned();
        let parse_cols =
            |cols: &[usize]| cols.iter().map(|&i| number(cell(i), &header[i], line)).collect::<CliResult<Vec<_>>>();
        let row = Row {
            time: number(cell(c_t), "time", line)?,
            y: number(cell(c_y), "y", line)?,
            fixed: parse_cols(&fixed_cols)?,
            random: parse_cols(&random_cols)?,
        };
        let s = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            rows.push(Vec::new());
            rows.len() - 1
        });
        rows[s].push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Ingest("no observations".into()));
    }
    for (s, r) in rows.iter_mut().enumerate() {
        r.sort_by(|x, y| x.time.total_cmp(&y.time));
        if let Some(w) = r.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(CliError::Ingest(format!(
                "duplicate observation for sample {} at time {}",
                ids[s], w[0].time
            )));
        }
    }
    let times: Vec<f64> = rows[0].iter().map(|r| r.time).collect();
    for (s, r) in rows.iter().enumerate().skip(1) {
        if r.len() != times.len() || r.iter().zip(&times).any(|(x, &t)| x.time != t) {
            return Err(CliError::Ingest(format!(
                "ragged design: sample {} has a different time vector than sample {}",
                ids[s], ids[0]
            )));
        }
    }

    let grid = infer_grid(&times, domain)?;
    let (n, m) = (times.len(), rows.len());
    let (p, q) = (fixed_cols.len(), random_cols.len());
    let y = DMatrix::from_fn(n, m, |i, s| rows[s][i].y);
    let gamma = DMatrix::from_fn(n * m, p, |r, c| rows[r / n][r % n].fixed[c]);
    let z = DMatrix::from_fn(n * m, q, |r, c| rows[r / n][r % n].random[c]);
    let names = |cols: &[usize]| cols.iter().map(|&i| header[i].clone()).collect();
    Ok(Ingested {
        data: MixedModelData::new(grid, y, gamma, z)?,
        sample_ids: ids,
        fixed_names: names(&fixed_cols),
        random_names: names(&random_cols),
    })
}

fn infer_grid(times: &[f64], domain: Option<[f64; 2]>) -> CliResult<Grid> {
    let n = times.len();
    if n < 2 {
        return Err(CliError::Ingest(format!("need at least 2 time points, got {n}")));
    }
    let h = (times[n - 1] - times[0]) / (n - 1) as f64;
    let [a, b] = domain.unwrap_or([times[0] - h / 2.0, times[n - 1] + h / 2.0]);
    let grid = Grid::from_points(a, b, times.to_vec())?;
    if grid.is_equidistant() {
        return Ok(grid);
    }
    let snapped = Grid::equidistant(a, b, n)?;
    let off = snapped
        .points()
        .iter()
        .zip(times)
        .map(|(x, t)| (x - t).abs())
        .fold(0.0, f64::max);
    if off <= SNAP_TOL * (b - a) {
        Ok(snapped)
    } else {
        Err(CliError::Model(opmix::Error::NotEquidistant))
    }
}

/// Writes `data` in the ingest schema with 17 significant digits.
pub fn write_csv(
    path: &Path,
    data: &MixedModelData,
    sample_ids: &[String],
    fixed_names: &[String],
    random_names: &[String],
) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    let mut head = vec!["sample_id".to_owned(), "time".into(), "y".into()];
    head.extend(fixed_names.iter().cloned());
    head.extend(random_names.iter().cloned());
    writeln!(w, "{}", head.join(",")).map_err(io)?;
    let n = data.n();
    for (s, id) in sample_ids.iter().enumerate() {
        for i in 0..n {
            let r = s * n + i;
            let mut line = format!("{id},{:.16e},{:.16e}", data.grid().points()[i], data.y()[(i, s)]);
            for v in data.gamma().row(r).iter().chain(data.z().row(r).iter()) {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
