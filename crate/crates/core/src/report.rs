//! File output: energy ledgers, field dumps, tensor tables, convergence
//! tables and minimal SVG log-log plots.
//!
//! Every writer goes through a temp-file rename so partially written
//! outputs never appear, and all floating point is printed with a fixed
//! scientific format so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::cell::EffectiveTensors;
use crate::error::{Error, Result};
use crate::micro::EnergyRecord;
use crate::unfolding::TwoScaleField;

/// Fixed float format used in all machine-readable outputs.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// First 12 hex digits of the SHA-256 of the configuration text.
pub fn config_hash_hex(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let digest = h.finalize();
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Energy ledger CSV: t, grad, bulk, kinetic, total, mass, diss_w, diss_u.
pub fn write_energy_csv(path: &Path, records: &[EnergyRecord], config_hash: &str) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={config_hash}").ok();
    writeln!(out, "t,grad,bulk,kinetic,total,mass,diss_w,diss_u").ok();
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(r.t),
            fmt_f64(r.grad),
            fmt_f64(r.bulk),
            fmt_f64(r.kinetic),
            fmt_f64(r.total),
            fmt_f64(r.mass),
            fmt_f64(r.diss_w),
            fmt_f64(r.diss_u)
        )
        .ok();
    }
    atomic_write(path, out.as_bytes())
}

/// ASCII field file. Header: field name, dims, eps, t; then row-major data
/// (one line per first index).
pub fn write_field(path: &Path, name: &str, eps: f64, t: f64, field: &Array2<f64>) -> Result<()> {
    let (nx, ny) = field.dim();
    let mut out = String::new();
    writeln!(out, "# field {name}").ok();
    writeln!(out, "# dims {nx} {ny}").ok();
    writeln!(out, "# eps {}", fmt_f64(eps)).ok();
    writeln!(out, "# t {}", fmt_f64(t)).ok();
    for i in 0..nx {
        let row: Vec<String> = (0..ny).map(|j| fmt_f64(field[[i, j]])).collect();
        writeln!(out, "{}", row.join(" ")).ok();
    }
    atomic_write(path, out.as_bytes())
}

/// Read a field file written by [`write_field`].
pub fn read_field(path: &Path) -> Result<(String, f64, f64, Array2<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut name = String::new();
    let mut dims = (0usize, 0usize);
    let mut eps = 0.0f64;
    let mut t = 0.0f64;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            match it.next() {
                Some("field") => name = it.next().unwrap_or("").to_string(),
                Some("dims") => {
                    let nx = it.next().and_then(|s| s.parse().ok()).ok_or(Error::ParseError {
                        line: lineno + 1,
                        msg: "bad dims".into(),
                    })?;
                    let ny = it.next().and_then(|s| s.parse().ok()).ok_or(Error::ParseError {
                        line: lineno + 1,
                        msg: "bad dims".into(),
                    })?;
                    dims = (nx, ny);
                }
                Some("eps") => {
                    eps = it.next().and_then(|s| s.parse().ok()).unwrap_or(0.0);
                }
                Some("t") => {
                    t = it.next().and_then(|s| s.parse().ok()).unwrap_or(0.0);
                }
                _ => {}
            }
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(|s| s.parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::ParseError {
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    if rows.len() != dims.0 || rows.iter().any(|r| r.len() != dims.1) {
        return Err(Error::ParseError {
            line: 0,
            msg: format!("data shape does not match dims {dims:?}"),
        });
    }
    let mut field = Array2::zeros(dims);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            field[[i, j]] = *v;
        }
    }
    Ok((name, eps, t, field))
}

/// Two-scale field dump: the field-file format plus a blocks header line.
pub fn write_two_scale(path: &Path, name: &str, eps: f64, t: f64, ts: &TwoScaleField) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# field {name}").ok();
    writeln!(out, "# blocks {} {}", ts.n_blocks, ts.n_cell).ok();
    writeln!(out, "# eps {}", fmt_f64(eps)).ok();
    writeln!(out, "# t {}", fmt_f64(t)).ok();
    for kx in 0..ts.n_blocks {
        for ky in 0..ts.n_blocks {
            for mx in 0..ts.n_cell {
                let row: Vec<String> = (0..ts.n_cell)
                    .map(|my| fmt_f64(ts.data[[kx, ky, mx, my]]))
                    .collect();
                writeln!(out, "{}", row.join(" ")).ok();
            }
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Effective tensor table: one row per tensor row, plus a plain-text
/// metadata block alongside.
pub fn write_tensors(
    path: &Path,
    tensors: &EffectiveTensors,
    n_cell: usize,
    corrector_residual: f64,
    stokes_residual: f64,
) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "tensor,col0,col1").ok();
    for i in 0..2 {
        writeln!(
            out,
            "A_hom,{},{}",
            fmt_f64(tensors.a_hom[i][0]),
            fmt_f64(tensors.a_hom[i][1])
        )
        .ok();
    }
    for i in 0..2 {
        writeln!(out, "K,{},{}", fmt_f64(tensors.k[i][0]), fmt_f64(tensors.k[i][1])).ok();
    }
    atomic_write(path, out.as_bytes())?;

    let meta_path = path.with_extension("meta.txt");
    let mut meta = String::new();
    writeln!(meta, "{{").ok();
    writeln!(meta, "  \"porosity\": {},", fmt_f64(tensors.porosity)).ok();
    writeln!(meta, "  \"n_cell\": {n_cell},").ok();
    writeln!(meta, "  \"corrector_residual\": {},", fmt_f64(corrector_residual)).ok();
    writeln!(meta, "  \"stokes_residual\": {}", fmt_f64(stokes_residual)).ok();
    writeln!(meta, "}}").ok();
    atomic_write(&meta_path, meta.as_bytes())
}

/// Read a tensor table written by [`write_tensors`]. Porosity comes from
/// the metadata block next to it.
pub fn read_tensors(path: &Path) -> Result<EffectiveTensors> {
    let text = fs::read_to_string(path)?;
    let mut a_rows: Vec<[f64; 2]> = Vec::new();
    let mut k_rows: Vec<[f64; 2]> = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 3 {
            continue;
        }
        let v0: f64 = parts[1].parse().map_err(|_| Error::ParseError {
            line: lineno + 1,
            msg: "bad tensor entry".into(),
        })?;
        let v1: f64 = parts[2].parse().map_err(|_| Error::ParseError {
            line: lineno + 1,
            msg: "bad tensor entry".into(),
        })?;
        match parts[0] {
            "A_hom" => a_rows.push([v0, v1]),
            "K" => k_rows.push([v0, v1]),
            _ => {}
        }
    }
    if a_rows.len() != 2 || k_rows.len() != 2 {
        return Err(Error::ParseError {
            line: 0,
            msg: "tensor table must contain two rows each for A_hom and K".into(),
        });
    }
    let meta_path = path.with_extension("meta.txt");
    let porosity = if meta_path.exists() {
        let meta = fs::read_to_string(&meta_path)?;
        meta.lines()
            .find(|l| l.contains("porosity"))
            .and_then(|l| {
                l.split(':')
                    .nth(1)
                    .map(|s| s.trim().trim_end_matches(','))
                    .and_then(|s| s.parse::<f64>().ok())
            })
            .unwrap_or(1.0)
    } else {
        1.0
    };
    Ok(EffectiveTensors {
        a_hom: [a_rows[0], a_rows[1]],
        k: [k_rows[0], k_rows[1]],
        porosity,
    })
}

/// One row of a convergence table.
#[derive(Clone, Debug)]
pub struct StudyRow {
    pub eps: f64,
    pub error_c: f64,
    pub error_u: f64,
    pub error_w: f64,
    /// Largest linear-solver residual observed in the runs behind this row.
    pub max_residual: f64,
}

/// Convergence CSV: per-row pairwise order plus least-squares orders in
/// header comments; every row carries the config hash and the residual.
pub fn write_convergence_csv(
    path: &Path,
    rows: &[StudyRow],
    config_hash: &str,
    orders: (f64, f64, f64),
) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={config_hash}").ok();
    writeln!(
        out,
        "# observed_order_c={} observed_order_u={} observed_order_w={}",
        fmt_f64(orders.0),
        fmt_f64(orders.1),
        fmt_f64(orders.2)
    )
    .ok();
    writeln!(
        out,
        "eps,error_c,error_u,error_w,order_c,config_hash,max_residual"
    )
    .ok();
    for (k, r) in rows.iter().enumerate() {
        let order = if k == 0 || rows[k - 1].error_c == 0.0 || r.error_c == 0.0 {
            String::new()
        } else {
            let q = (rows[k - 1].error_c / r.error_c).ln() / (rows[k - 1].eps / r.eps).ln();
            fmt_f64(q)
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            fmt_f64(r.eps),
            fmt_f64(r.error_c),
            fmt_f64(r.error_u),
            fmt_f64(r.error_w),
            order,
            config_hash,
            fmt_f64(r.max_residual)
        )
        .ok();
    }
    atomic_write(path, out.as_bytes())
}

/// Minimal deterministic log-log SVG line plot.
pub fn svg_loglog(path: &Path, title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let width = 640.0;
    let height = 480.0;
    let margin = 60.0;
    let points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().copied())
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .collect();
    if points.is_empty() {
        return atomic_write(path, b"<svg xmlns='http://www.w3.org/2000/svg'/>");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in &points {
        x0 = x0.min(x.log10());
        x1 = x1.max(x.log10());
        y0 = y0.min(y.log10());
        y1 = y1.max(y.log10());
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x.log10() - x0) / (x1 - x0) * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - (y.log10() - y0) / (y1 - y0) * (height - 2.0 * margin);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];
    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{height}' viewBox='0 0 {width} {height}'>"
    )
    .ok();
    writeln!(out, "<rect width='100%' height='100%' fill='white'/>").ok();
    writeln!(
        out,
        "<text x='{:.1}' y='24' font-size='16' text-anchor='middle'>{title}</text>",
        width / 2.0
    )
    .ok();
    // Axes.
    writeln!(
        out,
        "<line x1='{m}' y1='{b:.1}' x2='{r:.1}' y2='{b:.1}' stroke='black'/>",
        m = margin,
        b = height - margin,
        r = width - margin
    )
    .ok();
    writeln!(
        out,
        "<line x1='{m}' y1='{t}' x2='{m}' y2='{b:.1}' stroke='black'/>",
        m = margin,
        t = margin,
        b = height - margin
    )
    .ok();
    writeln!(
        out,
        "<text x='{:.1}' y='{:.1}' font-size='12' text-anchor='middle'>log10 eps</text>",
        width / 2.0,
        height - 16.0
    )
    .ok();
    for (idx, (label, pts)) in series.iter().enumerate() {
        let color = colors[idx % colors.len()];
        let pts: Vec<(f64, f64)> = pts.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).copied().collect();
        if pts.is_empty() {
            continue;
        }
        let path_d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(k, (x, y))| {
                format!("{}{:.2},{:.2}", if k == 0 { "M" } else { "L" }, sx(*x), sy(*y))
            })
            .collect();
        writeln!(
            out,
            "<path d='{}' fill='none' stroke='{color}' stroke-width='1.5'/>",
            path_d.join(" ")
        )
        .ok();
        for (x, y) in &pts {
            writeln!(
                out,
                "<circle cx='{:.2}' cy='{:.2}' r='3' fill='{color}'/>",
                sx(*x),
                sy(*y)
            )
            .ok();
        }
        writeln!(
            out,
            "<text x='{:.1}' y='{:.1}' font-size='12' fill='{color}'>{label}</text>",
            width - margin + 4.0 - 120.0,
            margin + 16.0 * idx as f64
        )
        .ok();
    }
    // Slope-1 reference through the first point of the first series.
    if let Some((_, pts)) = series.first() {
        if let Some((xa, ya)) = pts.iter().find(|(x, y)| *x > 0.0 && *y > 0.0) {
            let xb = 10f64.powf(x0);
            let yb = ya * xb / xa;
            writeln!(
                out,
                "<path d='M{:.2},{:.2} L{:.2},{:.2}' stroke='gray' stroke-dasharray='4 3' fill='none'/>",
                sx(*xa),
                sy(*ya),
                sx(xb),
                sy(yb)
            )
            .ok();
        }
    }
    writeln!(out, "</svg>").ok();
    atomic_write(path, out.as_bytes())
}

/// Convenience: join an output directory and file name.
pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_roundtrip() {
        let dir = std::env::temp_dir().join("porescale_report_test");
        let path = dir.join("c.field");
        let f = Array2::from_shape_fn((4, 3), |(i, j)| i as f64 + 0.25 * j as f64);
        write_field(&path, "c", 0.25, 1.5, &f).unwrap();
        let (name, eps, t, back) = read_field(&path).unwrap();
        assert_eq!(name, "c");
        assert_eq!(eps, 0.25);
        assert_eq!(t, 1.5);
        assert_eq!(f, back);
    }

    #[test]
    fn tensors_roundtrip() {
        let dir = std::env::temp_dir().join("porescale_report_test");
        let path = dir.join("tensors.csv");
        let t = EffectiveTensors {
            a_hom: [[0.8, 0.01], [0.01, 0.79]],
            k: [[0.002, 0.0], [0.0, 0.0021]],
            porosity: 0.8,
        };
        write_tensors(&path, &t, 32, 1e-11, 1e-10).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.a_hom, t.a_hom);
        assert_eq!(back.k, t.k);
        assert_eq!(back.porosity, t.porosity);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash_hex("abc"), config_hash_hex("abc"));
        assert_ne!(config_hash_hex("abc"), config_hash_hex("abd"));
        assert_eq!(config_hash_hex("x").len(), 12);
    }
}
