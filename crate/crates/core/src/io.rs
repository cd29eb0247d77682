//! File interchange: Matrix Market arrays, system bundles, JSON and CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::StochasticSystem;

const MTX_HEADER: &str = "%%MatrixMarket matrix array real general";

/// Canonical Matrix Market array text (column-major, `{:.17e}` entries).
pub fn mtx_string(m: &DMatrix<f64>) -> String {
    let mut s = String::with_capacity(32 * m.len() + 64);
    s.push_str(MTX_HEADER);
    s.push('\n');
    let _ = writeln!(s, "{} {}", m.nrows(), m.ncols());
    for v in m.iter() {
        let _ = writeln!(s, "{v:.17e}");
    }
    s
}

pub fn parse_mtx(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::input("empty Matrix Market file"))?;
    let lower = header.to_ascii_lowercase();
    if !lower.starts_with("%%matrixmarket matrix array real") {
        return Err(Error::input(format!("unsupported Matrix Market header: {header}")));
    }
    let symmetric = lower.contains("symmetric");
    let mut body = lines.map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('%'));
    let dims = body.next().ok_or_else(|| Error::input("missing Matrix Market size line"))?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::input(format!("bad size line: {dims}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::input("size line must hold two integers"));
    }
    let (r, c) = (dims[0], dims[1]);
    let values: Vec<f64> = body
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().map_err(|_| Error::input(format!("bad entry: {t}"))))
        .collect::<Result<_>>()?;
    if symmetric {
        if r != c || values.len() != r * (r + 1) / 2 {
            return Err(Error::input("symmetric array has the wrong number of entries"));
        }
        let mut m = DMatrix::zeros(r, r);
        let mut k = 0;
        for j in 0..r {
            for i in j..r {
                m[(i, j)] = values[k];
                m[(j, i)] = values[k];
                k += 1;
            }
        }
        return Ok(m);
    }
    if values.len() != r * c {
        return Err(Error::input(format!("expected {} entries, found {}", r * c, values.len())));
    }
    Ok(DMatrix::from_column_slice(r, c, &values))
}

pub fn write_mtx(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, mtx_string(m))?;
    Ok(())
}

pub fn read_mtx(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    parse_mtx(&text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

/// Writes a CSV with a header row; values use `{:.17e}`.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a numeric CSV with a header row.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::input("empty CSV"))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for line in lines {
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| Error::input(format!("bad CSV value: {t}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(Error::input("CSV row length differs from header"));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// `manifest.json` of a system bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub a: String,
    pub b: String,
    pub c: String,
    pub noise: Vec<String>,
    pub k: Vec<Vec<f64>>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], q: usize) -> Result<DMatrix<f64>> {
    if rows.len() != q || rows.iter().any(|r| r.len() != q) {
        return Err(Error::input(format!("manifest K must be {q}x{q}")));
    }
    Ok(DMatrix::from_fn(q, q, |i, j| rows[i][j]))
}

/// Writes `manifest.json`, `A.mtx`, `B.mtx`, `C.mtx`, `N1.mtx`… into `dir`.
pub fn save_system(
    dir: &Path,
    sys: &StochasticSystem,
    metadata: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let noise: Vec<String> = (1..=sys.channels()).map(|i| format!("N{i}.mtx")).collect();
    let manifest = Manifest {
        n: sys.n(),
        m: sys.inputs(),
        p: sys.outputs(),
        q: sys.channels(),
        a: "A.mtx".into(),
        b: "B.mtx".into(),
        c: "C.mtx".into(),
        noise: noise.clone(),
        k: to_rows(sys.covariance()),
        metadata,
    };
    write_mtx(&dir.join(&manifest.a), sys.a())?;
    write_mtx(&dir.join(&manifest.b), sys.b())?;
    write_mtx(&dir.join(&manifest.c), sys.c())?;
    for (name, m) in noise.iter().zip(sys.noise()) {
        write_mtx(&dir.join(name), m)?;
    }
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_system(dir: &Path) -> Result<(StochasticSystem, Manifest)> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let a = read_mtx(&dir.join(&manifest.a))?;
    let b = read_mtx(&dir.join(&manifest.b))?;
    let c = read_mtx(&dir.join(&manifest.c))?;
    let noise = manifest.noise.iter().map(|f| read_mtx(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    if manifest.noise.len() != manifest.q {
        return Err(Error::input("manifest q does not match the noise file list"));
    }
    let k = from_rows(&manifest.k, manifest.q)?;
    let sys = StochasticSystem::new(a, noise, b, c, k)?;
    if (sys.n(), sys.inputs(), sys.outputs()) != (manifest.n, manifest.m, manifest.p) {
        return Err(Error::input("manifest dimensions do not match the matrix files"));
    }
    Ok((sys, manifest))
}
