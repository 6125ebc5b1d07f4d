//! CSV and JSON persistence.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! written file parses back to bit-identical values and rewriting the same
//! data produces byte-identical files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameParams, GameSurfaces};
use crate::lq::{CrossFactor, LQParams, SolverGrid, Surfaces};
use crate::path::SampledPath;

/// Write a path as `time,v1,...,vn` rows.
pub fn write_path_csv(path: &SampledPath, file: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(file)?);
    write!(w, "time")?;
    for i in 1..=path.dim() {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for k in 0..path.len() {
        write!(w, "{}", path.time_at(k))?;
        for v in path.node(k) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Read a path written by [`write_path_csv`]. The grid step is inferred
/// from the first two rows (single-row files get step 1).
pub fn read_path_csv(file: &Path) -> Result<SampledPath> {
    let r = BufReader::new(fs::File::open(file)?);
    let mut times = Vec::new();
    let mut data = Vec::new();
    let mut dim = 0usize;
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if ln == 0 {
            dim = line.split(',').count().saturating_sub(1);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let t: f64 = parse_field(fields.next(), file, ln)?;
        times.push(t);
        let mut got = 0;
        for f in fields {
            data.push(parse_field(Some(f), file, ln)?);
            got += 1;
        }
        if got != dim {
            return Err(Error::Parse(format!(
                "{}: row {ln} has {got} values, header promises {dim}",
                file.display()
            )));
        }
    }
    if times.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", file.display())));
    }
    let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    SampledPath::new(times[0], dt, dim, data)
}

fn parse_field(f: Option<&str>, file: &Path, ln: usize) -> Result<f64> {
    f.ok_or_else(|| Error::Parse(format!("{}: short row {ln}", file.display())))?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("{}: row {ln}: {e}", file.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct SurfaceMeta {
    kind: String,
    params: LQParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_players: Option<usize>,
    grid: SolverGrid,
    cross_factor: CrossFactor,
    solver_version: String,
    warnings: Vec<String>,
}

fn write_grid_csvs(
    dir: &Path,
    grid: &SolverGrid,
    f0: &[f64],
    f1: &[f64],
    f2: &[f64],
    f3: &[f64],
) -> Result<()> {
    let two_col = |name: &str, v: &[f64]| -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
        writeln!(w, "t,value")?;
        for (k, x) in v.iter().enumerate() {
            writeln!(w, "{},{x}", grid.time(k))?;
        }
        Ok(())
    };
    two_col("f0.csv", f0)?;
    two_col("f3.csv", f3)?;

    let nth = grid.n_theta;
    let mut w = BufWriter::new(fs::File::create(dir.join("f1.csv"))?);
    writeln!(w, "t,theta,value")?;
    for k in 0..grid.n_t {
        for j in 0..nth {
            writeln!(w, "{},{},{}", grid.time(k), grid.theta(j), f1[k * nth + j])?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(dir.join("f2.csv"))?);
    writeln!(w, "t,theta1,theta2,value")?;
    for k in 0..grid.n_t {
        for j in 0..nth {
            for l in 0..nth {
                writeln!(
                    w,
                    "{},{},{},{}",
                    grid.time(k),
                    grid.theta(j),
                    grid.theta(l),
                    f2[(k * nth + j) * nth + l]
                )?;
            }
        }
    }
    Ok(())
}

fn read_values_csv(file: &Path, value_col: usize, expect: usize) -> Result<Vec<f64>> {
    let r = BufReader::new(fs::File::open(file)?);
    let mut out = Vec::with_capacity(expect);
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let field = line.split(',').nth(value_col);
        out.push(parse_field(field, file, ln)?);
    }
    if out.len() != expect {
        return Err(Error::Parse(format!(
            "{}: expected {expect} rows, found {}",
            file.display(),
            out.len()
        )));
    }
    Ok(out)
}

/// Persist solved single-agent surfaces as `f0.csv..f3.csv` + `meta.json`.
pub fn write_surfaces(s: &Surfaces, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_grid_csvs(dir, &s.grid, &s.f0, &s.f1, &s.f2, &s.f3)?;
    let meta = SurfaceMeta {
        kind: "single".into(),
        params: s.params,
        n_players: None,
        grid: s.grid,
        cross_factor: s.cross_factor,
        solver_version: env!("CARGO_PKG_VERSION").into(),
        warnings: s.warnings.clone(),
    };
    write_json(&meta, &dir.join("meta.json"))
}

/// Persist solved game surfaces in the same layout, tagged with the player
/// count.
pub fn write_game_surfaces(s: &GameSurfaces, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_grid_csvs(dir, &s.grid, &s.e0, &s.e1, &s.e2, &s.e3)?;
    let meta = SurfaceMeta {
        kind: "game".into(),
        params: s.params.scalar(),
        n_players: Some(s.params.n_players),
        grid: s.grid,
        cross_factor: s.cross_factor,
        solver_version: env!("CARGO_PKG_VERSION").into(),
        warnings: s.warnings.clone(),
    };
    write_json(&meta, &dir.join("meta.json"))
}

/// Load single-agent surfaces written by [`write_surfaces`].
pub fn read_surfaces(dir: &Path) -> Result<Surfaces> {
    let meta: SurfaceMeta = read_json(&dir.join("meta.json"))?;
    if meta.kind != "single" {
        return Err(Error::Parse(format!(
            "{}: expected single-agent surfaces, found kind '{}'",
            dir.display(),
            meta.kind
        )));
    }
    let g = meta.grid;
    Ok(Surfaces {
        params: meta.params,
        grid: g,
        cross_factor: meta.cross_factor,
        f0: read_values_csv(&dir.join("f0.csv"), 1, g.n_t)?,
        f1: read_values_csv(&dir.join("f1.csv"), 2, g.n_t * g.n_theta)?,
        f2: read_values_csv(&dir.join("f2.csv"), 3, g.n_t * g.n_theta * g.n_theta)?,
        f3: read_values_csv(&dir.join("f3.csv"), 1, g.n_t)?,
        warnings: meta.warnings,
    })
}

/// Load game surfaces written by [`write_game_surfaces`].
pub fn read_game_surfaces(dir: &Path) -> Result<GameSurfaces> {
    let meta: SurfaceMeta = read_json(&dir.join("meta.json"))?;
    let n_players = match (meta.kind.as_str(), meta.n_players) {
        ("game", Some(n)) => n,
        _ => {
            return Err(Error::Parse(format!(
                "{}: expected game surfaces with a player count",
                dir.display()
            )))
        }
    };
    let g = meta.grid;
    let p = meta.params;
    Ok(GameSurfaces {
        params: GameParams {
            n_players,
            q: p.q,
            eps: p.eps,
            c: p.c,
            horizon: p.horizon,
            tau: p.tau,
            sigma: p.sigma,
        },
        grid: g,
        cross_factor: meta.cross_factor,
        e0: read_values_csv(&dir.join("f0.csv"), 1, g.n_t)?,
        e1: read_values_csv(&dir.join("f1.csv"), 2, g.n_t * g.n_theta)?,
        e2: read_values_csv(&dir.join("f2.csv"), 3, g.n_t * g.n_theta * g.n_theta)?,
        e3: read_values_csv(&dir.join("f3.csv"), 1, g.n_t)?,
        warnings: meta.warnings,
    })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, file: &Path) -> Result<()> {
    if let Some(parent) = file.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    fs::write(file, out)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(file: &Path) -> Result<T> {
    let bytes = fs::read(file)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Dump per-path Monte Carlo costs as `path_id,cost`.
pub fn write_costs_csv(costs: &[f64], file: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(file)?);
    writeln!(w, "path_id,cost")?;
    for (i, c) in costs.iter().enumerate() {
        writeln!(w, "{i},{c}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lq::{solve_f_system, CrossFactor, LQParams, SolverGrid};

    #[test]
    fn path_csv_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = SampledPath::new(
            -0.05,
            0.0125,
            2,
            vec![0.1, -0.2, 1.0 / 3.0, std::f64::consts::PI, 4.0, -5.5, 0.0, 7.25],
        )
        .unwrap();
        let file = dir.path().join("p.csv");
        write_path_csv(&p, &file).unwrap();
        let q = read_path_csv(&file).unwrap();
        assert_eq!(p.values(), q.values());
        assert_eq!(p.dim(), q.dim());
        assert!((p.t0() - q.t0()).abs() < 1e-15);
    }

    #[test]
    fn surfaces_round_trip_and_rewrites_are_byte_identical() {
        let params = LQParams {
            q: 1.0,
            eps: 2.0,
            c: 0.0,
            horizon: 0.2,
            tau: 0.05,
            sigma: 1.0,
        };
        let grid = SolverGrid::with_tau_steps(&params, 5).unwrap();
        let s = solve_f_system(&params, &grid, CrossFactor::One).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        write_surfaces(&s, &d1).unwrap();
        let r = read_surfaces(&d1).unwrap();
        assert_eq!(s.f0, r.f0);
        assert_eq!(s.f1, r.f1);
        assert_eq!(s.f2, r.f2);
        assert_eq!(s.f3, r.f3);
        write_surfaces(&r, &d2).unwrap();
        for name in ["f0.csv", "f1.csv", "f2.csv", "f3.csv", "meta.json"] {
            let a = fs::read(d1.join(name)).unwrap();
            let b = fs::read(d2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after a round trip");
        }
    }
}
