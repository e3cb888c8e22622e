//! Density and ensemble dumps, binary and CSV. Both formats round-trip bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::density::InteractionMode;
use crate::fpsolve::{DensityField, FpError};
use crate::grid::{Grid, GridError};
use crate::sde::{DensityTag, Ensemble};

const DENSITY_MAGIC: &[u8; 8] = b"MFSDEDNS";
const ENSEMBLE_MAGIC: &[u8; 8] = b"MFSDEENS";
const LEVEL_MAGIC: &[u8; 8] = b"MFSDELVL";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed dump: {0}")]
    Format(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Fp(#[from] FpError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.display().to_string(), source }
}

fn bad(msg: impl Into<String>) -> IoError {
    IoError::Format(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<(), IoError> {
        if self.take(8)? != magic {
            return Err(bad("wrong magic bytes"));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(bad(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.pos != self.buf.len() {
            return Err(bad(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.reserve(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn density_to_bytes(field: &DensityField) -> Vec<u8> {
    let g = field.grid();
    let mut out = Vec::with_capacity(48 + field.values().len() * 8);
    out.extend_from_slice(DENSITY_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(g.dim() as u32).to_le_bytes());
    out.extend_from_slice(&g.alpha().to_le_bytes());
    out.extend_from_slice(&(g.m() as u64).to_le_bytes());
    out.extend_from_slice(&g.horizon().to_le_bytes());
    out.extend_from_slice(&(g.n_steps() as u64).to_le_bytes());
    put_f64s(&mut out, field.values());
    out
}

pub fn density_from_bytes(buf: &[u8]) -> Result<DensityField, IoError> {
    let mut c = Cursor { buf, pos: 0 };
    c.header(DENSITY_MAGIC)?;
    let d = c.u32()? as usize;
    let alpha = c.f64()?;
    let m = c.u64()? as usize;
    let horizon = c.f64()?;
    let n = c.u64()? as usize;
    let grid = Grid::new(d, alpha, m, horizon, n)?;
    let count = (n + 1).checked_mul(grid.node_count()).ok_or_else(|| bad("size overflow"))?;
    let values = c.f64s(count)?;
    c.finish()?;
    Ok(DensityField::from_values(grid, values)?)
}

/// First line `d,alpha,M,T,N`, second line their values, then one line per level.
pub fn density_to_csv(field: &DensityField) -> String {
    let g = field.grid();
    let mut s = format!("d,alpha,M,T,N\n{},{},{},{},{}\n", g.dim(), g.alpha(), g.m(), g.horizon(), g.n_steps());
    for n in 0..field.n_levels() {
        let mut first = true;
        for v in field.level(n) {
            if !first {
                s.push(',');
            }
            first = false;
            let _ = write!(s, "{v:?}");
        }
        s.push('\n');
    }
    s
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, IoError> {
    s.trim().parse().map_err(|_| bad(format!("cannot parse {what} from {s:?}")))
}

pub fn density_from_csv(text: &str) -> Result<DensityField, IoError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("d,alpha,M,T,N") {
        return Err(bad("missing density CSV header"));
    }
    let head: Vec<&str> = lines.next().ok_or_else(|| bad("missing header values"))?.split(',').collect();
    if head.len() != 5 {
        return Err(bad("header needs 5 values"));
    }
    let grid = Grid::new(parse(head[0], "d")?, parse(head[1], "alpha")?, parse(head[2], "M")?, parse(head[3], "T")?, parse(head[4], "N")?)?;
    let mut values = Vec::with_capacity((grid.n_steps() + 1) * grid.node_count());
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for v in line.split(',') {
            values.push(parse::<f64>(v, "value")?);
        }
        if values.len() - before != grid.node_count() {
            return Err(bad(format!("level {i} has {} values, expected {}", values.len() - before, grid.node_count())));
        }
    }
    Ok(DensityField::from_values(grid, values)?)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Writes CSV when the extension is `.csv`, binary otherwise.
pub fn write_density(path: &Path, field: &DensityField) -> Result<(), IoError> {
    let bytes = if is_csv(path) { density_to_csv(field).into_bytes() } else { density_to_bytes(field) };
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_density(path: &Path) -> Result<DensityField, IoError> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(io_err(path))?;
    if is_csv(path) {
        density_from_csv(std::str::from_utf8(&buf).map_err(|_| bad("CSV is not UTF-8"))?)
    } else {
        density_from_bytes(&buf)
    }
}

/// A single time level with the grid it lives on (header as in the density dump).
pub fn write_level(path: &Path, grid: &Grid, level: &[f64]) -> Result<(), IoError> {
    if level.len() != grid.node_count() {
        return Err(bad(format!("level has {} values, grid has {} nodes", level.len(), grid.node_count())));
    }
    let mut out = Vec::with_capacity(48 + level.len() * 8);
    out.extend_from_slice(LEVEL_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    out.extend_from_slice(&grid.alpha().to_le_bytes());
    out.extend_from_slice(&(grid.m() as u64).to_le_bytes());
    out.extend_from_slice(&grid.horizon().to_le_bytes());
    out.extend_from_slice(&(grid.n_steps() as u64).to_le_bytes());
    put_f64s(&mut out, level);
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_level(path: &Path) -> Result<(Grid, Vec<f64>), IoError> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    c.header(LEVEL_MAGIC)?;
    let d = c.u32()? as usize;
    let alpha = c.f64()?;
    let m = c.u64()? as usize;
    let horizon = c.f64()?;
    let n = c.u64()? as usize;
    let grid = Grid::new(d, alpha, m, horizon, n)?;
    let level = c.f64s(grid.node_count())?;
    c.finish()?;
    Ok((grid, level))
}

fn mode_code(m: InteractionMode) -> u32 {
    match m {
        InteractionMode::Exact => 0,
        InteractionMode::Interpolate => 1,
    }
}

fn mode_from(code: u32) -> Result<InteractionMode, IoError> {
    match code {
        0 => Ok(InteractionMode::Exact),
        1 => Ok(InteractionMode::Interpolate),
        c => Err(bad(format!("unknown interaction mode {c}"))),
    }
}

pub fn ensemble_to_bytes(e: &Ensemble) -> Vec<u8> {
    let mut out = Vec::with_capacity(96 + e.states.len() * 8);
    out.extend_from_slice(ENSEMBLE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(e.description.len() as u64).to_le_bytes());
    out.extend_from_slice(e.description.as_bytes());
    out.extend_from_slice(&(e.dim as u32).to_le_bytes());
    out.extend_from_slice(&e.horizon.to_le_bytes());
    out.extend_from_slice(&(e.n_steps as u64).to_le_bytes());
    out.extend_from_slice(&e.seed.to_le_bytes());
    out.extend_from_slice(&(e.brownian_steps as u64).to_le_bytes());
    match &e.density {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(t) => {
            out.extend_from_slice(&1u32.to_le_bytes());
            out.extend_from_slice(&t.alpha.to_le_bytes());
            out.extend_from_slice(&(t.m as u64).to_le_bytes());
            out.extend_from_slice(&(t.n_steps as u64).to_le_bytes());
            out.extend_from_slice(&mode_code(t.mode).to_le_bytes());
            out.extend_from_slice(&t.fingerprint.to_le_bytes());
        }
    }
    out.extend_from_slice(&(e.levels.len() as u64).to_le_bytes());
    for &l in &e.levels {
        out.extend_from_slice(&(l as u64).to_le_bytes());
    }
    out.extend_from_slice(&(e.paths() as u64).to_le_bytes());
    put_f64s(&mut out, &e.states);
    out
}

pub fn ensemble_from_bytes(buf: &[u8]) -> Result<Ensemble, IoError> {
    let mut c = Cursor { buf, pos: 0 };
    c.header(ENSEMBLE_MAGIC)?;
    let len = c.u64()? as usize;
    let description = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| bad("description is not UTF-8"))?;
    let dim = c.u32()? as usize;
    let horizon = c.f64()?;
    let n_steps = c.u64()? as usize;
    let seed = c.u64()?;
    let brownian_steps = c.u64()? as usize;
    let density = match c.u32()? {
        0 => None,
        1 => Some(DensityTag {
            alpha: c.f64()?,
            m: c.u64()? as usize,
            n_steps: c.u64()? as usize,
            mode: mode_from(c.u32()?)?,
            fingerprint: c.u64()?,
        }),
        x => return Err(bad(format!("bad density flag {x}"))),
    };
    let n_levels = c.u64()? as usize;
    let levels = (0..n_levels).map(|_| c.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let paths = c.u64()? as usize;
    let count = paths.checked_mul(n_levels).and_then(|v| v.checked_mul(dim)).ok_or_else(|| bad("size overflow"))?;
    let states = c.f64s(count)?;
    c.finish()?;
    let e = Ensemble { description, dim, horizon, n_steps, seed, brownian_steps, density, levels, states };
    check_ensemble(&e)?;
    Ok(e)
}

fn check_ensemble(e: &Ensemble) -> Result<(), IoError> {
    if e.dim == 0 || e.levels.is_empty() || !e.levels.windows(2).all(|w| w[0] < w[1]) || *e.levels.last().unwrap() != e.n_steps {
        return Err(bad("inconsistent ensemble levels"));
    }
    Ok(())
}

/// `#` metadata lines, then columns `path,n,t,x_1..x_d`.
pub fn ensemble_to_csv(e: &Ensemble) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# description={}", e.description);
    let _ = writeln!(s, "# dim={}", e.dim);
    let _ = writeln!(s, "# horizon={}", e.horizon);
    let _ = writeln!(s, "# n_steps={}", e.n_steps);
    let _ = writeln!(s, "# seed={}", e.seed);
    let _ = writeln!(s, "# brownian_steps={}", e.brownian_steps);
    if let Some(t) = &e.density {
        let _ = writeln!(s, "# density={},{},{},{},{}", t.alpha, t.m, t.n_steps, mode_code(t.mode), t.fingerprint);
    }
    s.push_str("path,n,t");
    for i in 1..=e.dim {
        let _ = write!(s, ",x_{i}");
    }
    s.push('\n');
    let kappa = e.kappa();
    for p in 0..e.paths() {
        for &n in &e.levels {
            let _ = write!(s, "{p},{n},{:?}", n as f64 * kappa);
            for v in e.state(p, n).unwrap() {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn ensemble_from_csv(text: &str) -> Result<Ensemble, IoError> {
    let reader = BufReader::new(text.as_bytes());
    let mut meta = std::collections::HashMap::new();
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut dim = None;
    for line in reader.lines() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if let Some(kv) = line.strip_prefix("# ") {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
            continue;
        }
        if line.starts_with("path,") {
            dim = Some(line.split(',').count() - 3);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(bad(format!("short row {line:?}")));
        }
        rows.push((parse(f[0], "path")?, parse(f[1], "n")?, f[3..].iter().map(|v| parse::<f64>(v, "state")).collect::<Result<_, _>>()?));
    }
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing metadata {k}")));
    let dim_meta: usize = parse(&get("dim")?, "dim")?;
    if dim != Some(dim_meta) {
        return Err(bad("column count does not match dim"));
    }
    let density = match meta.get("density") {
        None => None,
        Some(v) => {
            let f: Vec<&str> = v.split(',').collect();
            if f.len() != 5 {
                return Err(bad("density metadata needs 5 fields"));
            }
            Some(DensityTag {
                alpha: parse(f[0], "alpha")?,
                m: parse(f[1], "M")?,
                n_steps: parse(f[2], "N")?,
                mode: mode_from(parse(f[3], "mode")?)?,
                fingerprint: parse(f[4], "fingerprint")?,
            })
        }
    };
    let mut levels: Vec<usize> = Vec::new();
    for (p, n, _) in &rows {
        if *p != 0 {
            break;
        }
        levels.push(*n);
    }
    let mut states = Vec::with_capacity(rows.len() * dim_meta);
    for (i, (p, n, x)) in rows.into_iter().enumerate() {
        if levels.is_empty() || p != i / levels.len() || n != levels[i % levels.len()] || x.len() != dim_meta {
            return Err(bad(format!("row {i} out of order")));
        }
        states.extend(x);
    }
    let e = Ensemble {
        description: get("description")?,
        dim: dim_meta,
        horizon: parse(&get("horizon")?, "horizon")?,
        n_steps: parse(&get("n_steps")?, "n_steps")?,
        seed: parse(&get("seed")?, "seed")?,
        brownian_steps: parse(&get("brownian_steps")?, "brownian_steps")?,
        density,
        levels,
        states,
    };
    check_ensemble(&e)?;
    Ok(e)
}

pub fn write_ensemble(path: &Path, e: &Ensemble) -> Result<(), IoError> {
    let bytes = if is_csv(path) { ensemble_to_csv(e).into_bytes() } else { ensemble_to_bytes(e) };
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

pub fn read_ensemble(path: &Path) -> Result<Ensemble, IoError> {
    let buf = fs::read(path).map_err(io_err(path))?;
    if is_csv(path) {
        ensemble_from_csv(std::str::from_utf8(&buf).map_err(|_| bad("CSV is not UTF-8"))?)
    } else {
        ensemble_from_bytes(&buf)
    }
}
