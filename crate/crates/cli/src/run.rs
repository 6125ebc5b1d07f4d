//! The experiment pipelines behind each subcommand. Every pipeline writes
//! its artifacts under the output directory and returns whether all report
//! flags passed.

use std::path::{Path, PathBuf};

use serde::Serialize;

use pdc_core::calculus::ito_refinement_study;
use pdc_core::game::{
    game_residual_ladder, nash_deviation_check, solve_e_system, Deviation, GameSimConfig,
};
use pdc_core::io;
use pdc_core::lq::{
    residual_ladder, select_cross_factor, solve_f_system, CrossFactor, LQParams, SolverGrid,
    Surfaces,
};
use pdc_core::report::{ConvergenceReport, PolicyEstimate};
use pdc_core::sim::{
    default_rivals, dpp_check, simulate_costs, verification_check, ConstantPolicy, ControlPolicy,
    FeedbackPolicy, ZeroPolicy,
};
use pdc_core::{Error, Result};

use crate::config::{ConvergeSection, CrossPolicy, ExperimentConfig, PolicySpec};

pub struct RunContext {
    pub config: ExperimentConfig,
    pub output: PathBuf,
    pub seed_override: Option<u64>,
    pub cross_override: Option<CrossPolicy>,
}

impl RunContext {
    fn cross_policy(&self) -> CrossPolicy {
        self.cross_override.unwrap_or(self.config.cross_factor_policy)
    }

    /// Resolve the cross factor, running the selection procedure when the
    /// policy is `auto` and recording its outcome next to the artifacts.
    fn resolve_cross(&self, params: &LQParams) -> Result<CrossFactor> {
        if let Some(fixed) = self.cross_policy().fixed() {
            return Ok(fixed);
        }
        let conv = self.config.converge.clone().unwrap_or_default();
        let selection = select_cross_factor(params, &conv.tau_steps, conv.probes, conv.probe_seed)?;
        io::write_json(&selection, &self.output.join("cross_selection.json"))?;
        Ok(selection.chosen)
    }

    fn solve_single(&self) -> Result<Surfaces> {
        let params = self.config.params.scalar();
        let grid = self.config.grid.build(&params)?;
        let cross = self.resolve_cross(&params)?;
        let s = solve_f_system(&params, &grid, cross)?;
        for w in &s.warnings {
            eprintln!("warning: {w}");
        }
        Ok(s)
    }
}

pub fn solve(ctx: &RunContext) -> Result<bool> {
    let s = ctx.solve_single()?;
    io::write_surfaces(&s, &ctx.output)?;
    println!(
        "solved {} time nodes x {} delay nodes (cross factor {}) -> {}",
        s.grid.n_t,
        s.grid.n_theta,
        s.cross_factor,
        ctx.output.display()
    );
    Ok(true)
}

#[derive(Serialize)]
struct SimulateFlags {
    value_match: Option<bool>,
    pass: bool,
}

#[derive(Serialize)]
struct SimulateReport {
    #[serde(rename = "V")]
    v: f64,
    estimates: Vec<PolicyEstimate>,
    flags: SimulateFlags,
    seed: u64,
    params: LQParams,
    grid: SolverGrid,
}

pub fn simulate(ctx: &RunContext) -> Result<bool> {
    let s = ctx.solve_single()?;
    let params = s.params;
    let section = ctx.config.sim_section("simulate")?;
    let cfg = section.build(ctx.seed_override)?;
    let spec = section.policy.clone().unwrap_or(PolicySpec::Feedback);
    let policy: Box<dyn ControlPolicy> = match spec {
        PolicySpec::Feedback => Box::new(FeedbackPolicy { surfaces: &s }),
        PolicySpec::Zero => Box::new(ZeroPolicy),
        PolicySpec::Constant(a) => Box::new(ConstantPolicy(a)),
    };
    let costs = simulate_costs(policy.as_ref(), &params, &cfg)?;
    let est = pdc_core::report::CostEstimate::from_samples(&costs);
    if section.dump_costs {
        io::write_costs_csv(&costs, &ctx.output.join("costs.csv"))?;
    }
    let hist = cfg.history_path(&params)?;
    let v = s.value(0.0, cfg.y0, &hist)?;
    let value_match = matches!(spec, PolicySpec::Feedback)
        .then(|| (est.mean - v).abs() <= 3.0 * est.stderr);
    let report = SimulateReport {
        v,
        estimates: vec![PolicyEstimate::new(policy.label(), est)],
        flags: SimulateFlags {
            value_match,
            pass: value_match.unwrap_or(true),
        },
        seed: cfg.seed,
        params,
        grid: s.grid,
    };
    io::write_json(&report, &ctx.output.join("report.json"))?;
    println!(
        "{}: mean {:.6} +- {:.6} over {} paths (report -> {})",
        policy.label(),
        report.estimates[0].mean,
        report.estimates[0].stderr,
        report.estimates[0].n,
        ctx.output.display()
    );
    Ok(report.flags.pass)
}

pub fn verify(ctx: &RunContext) -> Result<bool> {
    let s = ctx.solve_single()?;
    let params = s.params;
    let cfg = ctx.config.sim_section("verify")?.build(ctx.seed_override)?;
    let rivals = default_rivals(&s);
    let rival_refs: Vec<&dyn ControlPolicy> = rivals.iter().map(|b| b.as_ref()).collect();
    let report = verification_check(&s, &params, &cfg, &rival_refs)?;
    io::write_json(&report, &ctx.output.join("report.json"))?;
    for e in &report.estimates {
        println!("{}: {:.6} +- {:.6}", e.policy, e.mean, e.stderr);
    }
    println!(
        "value {:.6}; value_match {}, dominance {:?} -> {}",
        report.v,
        report.flags.value_match,
        report.flags.dominance,
        ctx.output.display()
    );
    Ok(report.flags.pass)
}

pub fn dpp(ctx: &RunContext) -> Result<bool> {
    let s = ctx.solve_single()?;
    let params = s.params;
    let section = ctx.config.sim_section("dpp")?;
    let u = section.u.ok_or_else(|| {
        Error::InvalidParameter("config key 'sim.u' is required for dpp mode".into())
    })?;
    let cfg = section.build(ctx.seed_override)?;
    let feedback = FeedbackPolicy { surfaces: &s };
    let bridges: Vec<&dyn ControlPolicy> = vec![&feedback, &ZeroPolicy, &ConstantPolicy(1.0)];
    let report = dpp_check(&s, &params, &cfg, u, &bridges)?;
    io::write_json(&report, &ctx.output.join("report.json"))?;
    for e in &report.estimates {
        println!("bridge {}: {:.6} +- {:.6}", e.policy, e.mean, e.stderr);
    }
    println!("value {:.6} at u = {u} -> {}", report.v, ctx.output.display());
    Ok(report.flags.pass)
}

#[derive(Serialize)]
struct LadderEntry {
    n_players: usize,
    gap: f64,
}

#[derive(Serialize)]
struct GameLadderReport {
    entries: Vec<LadderEntry>,
    monotone: bool,
    collapse_ratio: f64,
    pass: bool,
}

pub fn game(ctx: &RunContext) -> Result<bool> {
    let game_params = ctx.config.params.game()?;
    let scalar = game_params.scalar();
    let grid = ctx.config.grid.build(&scalar)?;
    let cross = ctx.resolve_cross(&scalar)?;
    let s = solve_e_system(&game_params, &grid, cross)?;
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    io::write_game_surfaces(&s, &ctx.output)?;

    let section = ctx.config.sim_section("game")?;
    let base = section.build(ctx.seed_override)?;
    let gcfg_defaults = crate::config::GameSection {
        player: 0,
        y0: None,
        deviations: None,
        n_ladder: None,
    };
    let gsec = ctx.config.game.as_ref().unwrap_or(&gcfg_defaults);
    let n = game_params.n_players;
    let y0 = gsec.y0.clone().unwrap_or_else(|| {
        (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1).max(1) as f64)
            .collect()
    });
    let deviations = gsec.deviations.clone().unwrap_or_else(|| {
        vec![Deviation::Zero, Deviation::Shift(0.5), Deviation::Scale(1.5)]
    });
    let cfg = GameSimConfig {
        n_paths: base.n_paths,
        seed: base.seed,
        dt_sim: base.dt_sim,
        y0,
    };
    let report = nash_deviation_check(&s, &cfg, gsec.player, &deviations)?;
    io::write_json(&report, &ctx.output.join("report.json"))?;
    for e in &report.estimates {
        println!("player {}: {} -> {:.6} +- {:.6}", gsec.player, e.policy, e.mean, e.stderr);
    }
    let mut pass = report.flags.pass;

    if let Some(ladder) = &gsec.n_ladder {
        let single = solve_f_system(&scalar, &grid, cross)?;
        let mut entries = Vec::new();
        for &players in ladder {
            let gp = pdc_core::game::GameParams {
                n_players: players,
                ..game_params
            };
            let gs = solve_e_system(&gp, &grid, cross)?;
            entries.push(LadderEntry {
                n_players: players,
                gap: gs.gap_to_single(&single)?,
            });
        }
        let monotone = entries.windows(2).all(|w| w[1].gap < w[0].gap);
        let collapse_ratio = match (entries.first(), entries.last()) {
            (Some(a), Some(b)) if a.gap > 0.0 => b.gap / a.gap,
            _ => 0.0,
        };
        let ladder_pass = monotone && collapse_ratio <= 0.25;
        write_ladder_csv(&entries, &ctx.output.join("n_ladder.csv"))?;
        io::write_json(
            &GameLadderReport {
                entries,
                monotone,
                collapse_ratio,
                pass: ladder_pass,
            },
            &ctx.output.join("n_ladder.json"),
        )?;
        println!("population ladder: monotone {monotone}, collapse ratio {collapse_ratio:.4}");
        pass &= ladder_pass;
    }
    println!(
        "nash flags: value_match {}, dominance {:?} -> {}",
        report.flags.value_match,
        report.flags.dominance,
        ctx.output.display()
    );
    Ok(pass)
}

fn write_ladder_csv(entries: &[LadderEntry], file: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(file)?);
    writeln!(w, "n_players,gap")?;
    for e in entries {
        writeln!(w, "{},{}", e.n_players, e.gap)?;
    }
    Ok(())
}

pub fn ito_check(ctx: &RunContext) -> Result<bool> {
    let section = ctx.config.ito.clone().unwrap_or_default();
    let report = ito_refinement_study(&section.levels, section.paths, section.seed)?;
    io::write_json(&report, &ctx.output.join("report.json"))?;
    let mut table = String::from("functional,dt,median_residual\n");
    for row in &report.rows {
        for (dt, m) in row.dts.iter().zip(&row.medians) {
            table.push_str(&format!("{},{dt},{m}\n", row.functional));
        }
        println!(
            "{}: medians {:?} decreasing {}",
            row.functional, row.medians, row.decreasing
        );
    }
    std::fs::create_dir_all(&ctx.output)?;
    std::fs::write(ctx.output.join("ito_table.csv"), table)?;
    Ok(report.pass)
}

pub fn converge(ctx: &RunContext) -> Result<bool> {
    let params = ctx.config.params.scalar();
    let conv: ConvergeSection = ctx.config.converge.clone().unwrap_or_default();
    let cross = ctx.resolve_cross(&params)?;
    let (rows, slope) = residual_ladder(&params, cross, &conv.tau_steps, conv.probes, conv.probe_seed)?;
    let game_part = match ctx.config.params.n_players {
        Some(_) => {
            let gp = ctx.config.params.game()?;
            let (grows, gslope) =
                game_residual_ladder(&gp, cross, &conv.tau_steps, conv.probes, conv.probe_seed)?;
            Some((grows, gslope))
        }
        None => None,
    };
    let report = ConvergenceReport {
        rows: rows.clone(),
        slope,
        cross_factor: cross.to_string(),
        pass: slope >= 0.9 && game_part.as_ref().map_or(true, |(_, s)| *s >= 0.9),
    };
    io::write_json(&report, &ctx.output.join("report.json"))?;
    std::fs::create_dir_all(&ctx.output)?;
    std::fs::write(ctx.output.join("converge.csv"), ladder_table(&rows))?;
    println!("cross factor {cross}, slope {slope:.3}");
    if let Some((grows, gslope)) = &game_part {
        std::fs::write(ctx.output.join("converge_game.csv"), ladder_table(grows))?;
        println!("game slope {gslope:.3}");
    }
    Ok(report.pass)
}

/// Refinement table with the observed order between consecutive rows.
fn ladder_table(rows: &[pdc_core::lq::LadderRow]) -> String {
    let mut table = String::from("dt,max_residual,slope\n");
    for (i, r) in rows.iter().enumerate() {
        let slope = if i == 0 {
            String::new()
        } else {
            let prev = &rows[i - 1];
            format!("{}", (prev.max_residual / r.max_residual).ln() / (prev.dt / r.dt).ln())
        };
        table.push_str(&format!("{},{},{slope}\n", r.dt, r.max_residual));
    }
    table
}

/// Long-format CSV slices of solved surfaces for external plotting.
pub fn plot(surfaces_dir: &Path, slice: &str, at_t: Option<f64>, out: &Path) -> Result<bool> {
    // both surface kinds share the file layout; read the grids directly
    let meta: serde_json::Value = io::read_json(&surfaces_dir.join("meta.json"))?;
    let kind = meta
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or("single")
        .to_string();
    let (grid, f0, f1, f2, f3) = if kind == "game" {
        let s = io::read_game_surfaces(surfaces_dir)?;
        (s.grid, s.e0, s.e1, s.e2, s.e3)
    } else {
        let s = io::read_surfaces(surfaces_dir)?;
        (s.grid, s.f0, s.f1, s.f2, s.f3)
    };
    let nth = grid.n_theta;
    let k_at = at_t.map(|t| grid.time_index(t)).transpose()?;
    let mut body = String::new();
    match (slice, k_at) {
        ("f0", _) | ("f3", _) => {
            let v = if slice == "f0" { &f0 } else { &f3 };
            body.push_str("t,value\n");
            for (k, x) in v.iter().enumerate() {
                body.push_str(&format!("{},{x}\n", grid.time(k)));
            }
        }
        ("f1", None) => {
            body.push_str("t,theta,value\n");
            for k in 0..grid.n_t {
                for j in 0..nth {
                    body.push_str(&format!("{},{},{}\n", grid.time(k), grid.theta(j), f1[k * nth + j]));
                }
            }
        }
        ("f1", Some(k)) => {
            body.push_str("theta,value\n");
            for j in 0..nth {
                body.push_str(&format!("{},{}\n", grid.theta(j), f1[k * nth + j]));
            }
        }
        ("f2", Some(k)) => {
            body.push_str("theta1,theta2,value\n");
            for j in 0..nth {
                for l in 0..nth {
                    body.push_str(&format!(
                        "{},{},{}\n",
                        grid.theta(j),
                        grid.theta(l),
                        f2[(k * nth + j) * nth + l]
                    ));
                }
            }
        }
        ("f2", None) => {
            body.push_str("t,theta1,theta2,value\n");
            for k in 0..grid.n_t {
                for j in 0..nth {
                    for l in 0..nth {
                        body.push_str(&format!(
                            "{},{},{},{}\n",
                            grid.time(k),
                            grid.theta(j),
                            grid.theta(l),
                            f2[(k * nth + j) * nth + l]
                        ));
                    }
                }
            }
        }
        _ => {
            return Err(Error::InvalidParameter(format!(
                "unknown slice '{slice}' (expected f0, f1, f2, or f3)"
            )))
        }
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, body)?;
    println!("slice {slice} -> {}", out.display());
    Ok(true)
}
