//! Command-line harness: cell problems, pore-scale and upscaled runs,
//! unfolding, convergence studies and potential checks, all driven by a
//! line-oriented config file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use porescale::cell::{
    effective_diffusion, permeability, solve_scalar_corrector, solve_stokes_corrector,
    solve_w_cell, EffectiveTensors,
};
use porescale::config::RunConfig;
use porescale::error::Result;
use porescale::geometry::write_mask_pgm;
use porescale::macro_solver::{MacroConfig, MacroSolver};
use porescale::micro::Micro;
use porescale::potential::verify_assumptions;
use porescale::report;
use porescale::study;
use porescale::unfolding::unfold;

#[derive(Parser)]
#[command(name = "porescale", about = "Two-phase flow in perforated media: pore-scale solver, cell problems, upscaled model and two-scale diagnostics", version)]
struct Cli {
    /// Run configuration file (section.key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to study.out_dir from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the study eps list, e.g. "1/4,1/8,1/16".
    #[arg(long, global = true)]
    eps: Option<String>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the periodic cell problems and write the effective tensors.
    CellSolve,
    /// Time-step the pore-scale system at the first configured eps.
    MicroRun,
    /// Time-step the upscaled model, computing tensors first if needed.
    MacroRun {
        /// Tensor table produced by cell-solve; solved on the fly if absent.
        #[arg(long)]
        tensors: Option<PathBuf>,
    },
    /// Unfold a dumped field file onto the product lattice.
    Unfold {
        /// Field file written by micro-run.
        #[arg(long)]
        field: PathBuf,
    },
    /// Run the configured convergence study.
    Study,
    /// Verify the structural assumptions on the potential.
    CheckPotential,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(list) = &cli.eps {
        let mut eps = Vec::new();
        for (k, part) in list.split(',').enumerate() {
            let part = part.trim();
            let v = if let Some((n, d)) = part.split_once('/') {
                n.trim().parse::<f64>().ok().zip(d.trim().parse::<f64>().ok()).map(|(a, b)| a / b)
            } else {
                part.parse::<f64>().ok()
            };
            eps.push(v.ok_or(porescale::Error::ParseError {
                line: k + 1,
                msg: format!("bad eps '{part}'"),
            })?);
        }
        cfg.study.eps = eps;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.study.out_dir))
}

fn cell_solve(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let cell = cfg.build_cell()?;
    let corr = solve_scalar_corrector(&cell)?;
    let a_hom = effective_diffusion(&cell, &corr);
    let (k, stokes_res) = if cell.has_solid() {
        let sc = solve_stokes_corrector(&cell, cfg.physics.mu)?;
        (permeability(&cell, &sc), sc.residuals.iter().cloned().fold(0.0, f64::max))
    } else {
        println!("cell has no solid inclusion; permeability left as identity");
        ([[1.0, 0.0], [0.0, 1.0]], 0.0)
    };
    let tensors = EffectiveTensors {
        a_hom,
        k,
        porosity: cell.porosity,
    };
    let corr_res = corr.residuals.iter().cloned().fold(0.0, f64::max);
    report::write_tensors(&dir.join("tensors.csv"), &tensors, cell.n_cell, corr_res, stokes_res)?;
    for (d, xi) in corr.xi.iter().enumerate() {
        report::write_field(&dir.join(format!("xi_{d}.field")), &format!("xi_{d}"), 1.0, 0.0, xi)?;
    }
    let mask = cell.mask2().map(|&b| u8::from(b));
    let mut pgm = Vec::new();
    write_mask_pgm(&mut pgm, &mask)?;
    report::atomic_write(&dir.join("cell_mask.pgm"), &pgm)?;

    let (_, wrep) = solve_w_cell(&cell)?;
    let text = format!(
        "compatibility_defect = {:.12e}\nflagged_inconsistent = {}\n{}\n",
        wrep.compatibility_defect, wrep.flagged_inconsistent, wrep.note
    );
    report::atomic_write(&dir.join("w_cell_report.txt"), text.as_bytes())?;
    println!(
        "porosity = {:.6}; A_hom = [[{:.6}, {:.2e}], [{:.2e}, {:.6}]]; K = [[{:.6e}, {:.2e}], [{:.2e}, {:.6e}]]",
        tensors.porosity,
        a_hom[0][0],
        a_hom[0][1],
        a_hom[1][0],
        a_hom[1][1],
        k[0][0],
        k[0][1],
        k[1][0],
        k[1][1]
    );
    println!("wrote tensors and cell diagnostics to {}", dir.display());
    Ok(())
}

fn micro_run(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let eps = cfg.study.eps[0];
    let pg = cfg.tile(eps)?;
    let micro = Micro::new(&pg, cfg.micro_config())?;
    let traj = micro.run()?;
    study::report_energy(&traj.records, dir, "micro", &cfg.hash)?;
    let s = &traj.final_state;
    report::write_field(&dir.join("c_final.field"), "c", eps, s.t, &s.c)?;
    report::write_field(&dir.join("w_final.field"), "w", eps, s.t, &s.w)?;
    report::write_field(&dir.join("p_final.field"), "p", eps, s.t, &s.p)?;
    let (uc, vc) = micro.grid.faces_to_cells(&s.u, &s.v);
    report::write_field(&dir.join("u_final.field"), "u", eps, s.t, &uc)?;
    report::write_field(&dir.join("v_final.field"), "v", eps, s.t, &vc)?;
    println!(
        "micro run at eps = {eps}: {} steps, max |c| = {:.6}, max |div u| = {:.3e}",
        traj.records.len() - 1,
        traj.max_abs_c,
        traj.max_div
    );
    println!("outputs in {}", dir.display());
    Ok(())
}

fn macro_run(cfg: &RunConfig, dir: &Path, tensors: Option<PathBuf>) -> Result<()> {
    let tensors = match tensors {
        Some(path) => report::read_tensors(&path)?,
        None => EffectiveTensors::from_cell(&cfg.build_cell()?, cfg.physics.mu)?,
    };
    let mut mc = MacroConfig::new(cfg.params(), cfg.physics.potential_mode, cfg.study.macro_n);
    mc.dt = cfg.discretization.dt;
    mc.t_end = cfg.discretization.t_end;
    mc.c0 = cfg.initial.c0;
    mc.body_force = cfg.physics.body_force;
    mc.energy_check = cfg.physics.body_force.is_none();
    mc.seed = cfg.seed;
    let solver = MacroSolver::new(mc, tensors)?;
    let traj = solver.run()?;
    study::report_energy(&traj.records, dir, "macro", &cfg.hash)?;
    let s = &traj.final_state;
    report::write_field(&dir.join("c_macro.field"), "c", 0.0, s.t, &s.c)?;
    report::write_field(&dir.join("w_macro.field"), "w_bar", 0.0, s.t, &s.w_bar)?;
    report::write_field(&dir.join("p_macro.field"), "p", 0.0, s.t, &s.p)?;
    println!(
        "macro run: {} steps, max |c| = {:.6}, max |div u| = {:.3e}",
        traj.records.len() - 1,
        traj.max_abs_c,
        traj.max_div
    );
    println!("outputs in {}", dir.display());
    Ok(())
}

fn unfold_cmd(_cfg: &RunConfig, dir: &Path, field: &Path) -> Result<()> {
    let (name, eps, t, data) = report::read_field(field)?;
    let n = data.dim().0;
    let blocks = (1.0 / eps).round() as usize;
    if eps <= 0.0 || n % blocks != 0 {
        return Err(porescale::Error::MisalignedGrids(format!(
            "field of size {n} with eps = {eps} is not an aligned lattice"
        )));
    }
    let n_cell = n / blocks;
    let ts = unfold(&data, blocks, n_cell)?;
    let out = dir.join(format!("{name}_two_scale.field"));
    report::write_two_scale(&out, &name, eps, t, &ts)?;
    println!(
        "unfolded {} ({}x{} blocks of {}x{}) -> {}",
        name,
        blocks,
        blocks,
        n_cell,
        n_cell,
        out.display()
    );
    Ok(())
}

fn study_cmd(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let out = study::run_study(cfg, Some(dir))?;
    println!("eps        error_c      error_u      error_w");
    for r in &out.rows {
        println!(
            "{:<9.5} {:<12.5e} {:<12.5e} {:<12.5e}",
            r.eps, r.error_c, r.error_u, r.error_w
        );
    }
    println!(
        "observed orders: c = {:.3}, u = {:.3}, w = {:.3}",
        out.orders.0, out.orders.1, out.orders.2
    );
    println!("tables and plots in {}", dir.display());
    Ok(())
}

fn check_potential(cfg: &RunConfig, dir: &Path, write: bool) -> Result<()> {
    let report_text = verify_assumptions(&cfg.params(), 0.0)?.to_string();
    print!("{report_text}");
    if write {
        report::atomic_write(&dir.join("assumptions.txt"), report_text.as_bytes())?;
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let dir = out_dir(&cli, &cfg);
    match &cli.command {
        Command::CellSolve => cell_solve(&cfg, &dir),
        Command::MicroRun => micro_run(&cfg, &dir),
        Command::MacroRun { tensors } => macro_run(&cfg, &dir, tensors.clone()),
        Command::Unfold { field } => unfold_cmd(&cfg, &dir, field),
        Command::Study => study_cmd(&cfg, &dir),
        Command::CheckPotential => check_potential(&cfg, &dir, cli.out.is_some()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
