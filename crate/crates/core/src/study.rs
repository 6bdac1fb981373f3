//! End-to-end homogenization studies: run the pore-scale solver along a
//! sequence of scale parameters, unfold, and compare against the upscaled
//! model closed with the cell-problem tensors.
//!
//! Time scales: the pore-scale model carries an eps^2 mobility, so the
//! order parameter evolves on the diffusive clock tau = eps^2 t. The
//! studies therefore run the micro solver with dt = dt_tau / eps^2 and
//! horizon t_star / eps^2, which matches every run to the same macro
//! horizon t_star and makes the comparison eps-uniform (the implicit
//! operator is eps-independent after the cancellation, so the cost per
//! step does not grow). The capillary-driven pore velocity scales like
//! eps times the Darcy velocity; the velocity comparison of the coupled
//! study divides it out.

use std::path::Path;

use ndarray::Array2;

use crate::cell::{solve_scalar_corrector, solve_stokes_corrector, EffectiveTensors};
use crate::config::{RunConfig, StudyMode};
use crate::error::{Error, Result};
use crate::geometry::PerforatedGrid;
use crate::grid::Grid2;
use crate::macro_solver::{MacroConfig, MacroSolver, MacroTrajectory};
use crate::micro::{BodyForce, Micro, MicroTrajectory, ScalarIc, VelocityIc};
use crate::report::{
    svg_loglog, write_convergence_csv, write_energy_csv, StudyRow,
};
use crate::unfolding::{observed_order, two_scale_distance, TwoScaleField};

#[derive(Clone, Debug)]
pub struct StudyOutput {
    pub rows: Vec<StudyRow>,
    /// Least-squares observed orders for (c, u, w).
    pub orders: (f64, f64, f64),
    pub monotone_c: bool,
    pub monotone_u: bool,
}

fn monotone_decreasing(vals: impl Iterator<Item = f64> + Clone) -> bool {
    let v: Vec<f64> = vals.collect();
    v.windows(2).all(|w| w[1] < w[0] || (w[0] == 0.0 && w[1] == 0.0))
}

/// Bilinear sample of a cell-centered field at a point of (0,1)^2.
pub fn bilinear_sample(field: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (nx, ny) = field.dim();
    let fx = (x * nx as f64 - 0.5).clamp(0.0, (nx - 1) as f64);
    let fy = (y * ny as f64 - 0.5).clamp(0.0, (ny - 1) as f64);
    let i0 = fx.floor() as usize;
    let j0 = fy.floor() as usize;
    let i1 = (i0 + 1).min(nx - 1);
    let j1 = (j0 + 1).min(ny - 1);
    let ax = fx - i0 as f64;
    let ay = fy - j0 as f64;
    field[[i0, j0]] * (1.0 - ax) * (1.0 - ay)
        + field[[i1, j0]] * ax * (1.0 - ay)
        + field[[i0, j1]] * (1.0 - ax) * ay
        + field[[i1, j1]] * ax * ay
}

/// Superficial block averages of a MAC velocity: per eps-block mean over
/// the full block with solid faces counting as zero, matching the (1/|Y|)
/// convention of the permeability tensor.
pub fn block_average_velocity(
    grid: &Grid2,
    u: &Array2<f64>,
    v: &Array2<f64>,
    n_blocks: usize,
) -> (Array2<f64>, Array2<f64>) {
    let (uc, vc) = grid.faces_to_cells(u, v);
    (
        block_average_cells(&uc, n_blocks),
        block_average_cells(&vc, n_blocks),
    )
}

/// Mean over eps-blocks of a cell field; the grid size must be a multiple
/// of the block count so the averaging is exact.
pub fn block_average_cells(field: &Array2<f64>, n_blocks: usize) -> Array2<f64> {
    let n = field.dim().0;
    assert_eq!(n % n_blocks, 0, "grid not commensurate with blocks");
    let n_cell = n / n_blocks;
    let inv = 1.0 / (n_cell * n_cell) as f64;
    let mut out = Array2::zeros((n_blocks, n_blocks));
    for kx in 0..n_blocks {
        for ky in 0..n_blocks {
            let mut s = 0.0;
            for mx in 0..n_cell {
                for my in 0..n_cell {
                    s += field[[kx * n_cell + mx, ky * n_cell + my]];
                }
            }
            out[[kx, ky]] = s * inv;
        }
    }
    out
}

fn l2_block_error(
    approx: &(Array2<f64>, Array2<f64>),
    reference: &(Array2<f64>, Array2<f64>),
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((a, b), (&ra, &rb)) in approx
        .0
        .iter()
        .zip(approx.1.iter())
        .zip(reference.0.iter().zip(reference.1.iter()))
    {
        num += (a - ra).powi(2) + (b - rb).powi(2);
        den += ra * ra + rb * rb;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

fn max_residual_micro(traj: &MicroTrajectory) -> f64 {
    traj.steps
        .iter()
        .map(|s| s.max_lin_residual.max(s.newton_residual))
        .fold(0.0, f64::max)
}

fn max_residual_macro(traj: &MacroTrajectory) -> f64 {
    traj.steps
        .iter()
        .map(|s| s.max_lin_residual.max(s.newton_residual))
        .fold(0.0, f64::max)
}

/// Manufactured two-scale convergence: u^eps = a(x) b(x/eps) against
/// a(x) b(y). The distances decay first order in eps.
pub fn manufactured_study(
    eps_list: &[f64],
    n_cell: usize,
    out_dir: Option<&Path>,
    config_hash: &str,
) -> Result<StudyOutput> {
    let pi = std::f64::consts::PI;
    let a = |x: f64, y: f64| (2.0 * pi * x).sin() * (pi * y).cos() + 2.0;
    let b = |y1: f64, y2: f64| (2.0 * pi * y1).cos() * (2.0 * pi * y2).sin() + 0.5;
    let mut rows = Vec::new();
    for &eps in eps_list {
        let blocks = (1.0 / eps).round() as usize;
        let n = blocks * n_cell;
        let h = 1.0 / n as f64;
        let field = Array2::from_shape_fn((n, n), |(i, j)| {
            let x = (i as f64 + 0.5) * h;
            let y = (j as f64 + 0.5) * h;
            a(x, y) * b((x / eps).fract(), (y / eps).fract())
        });
        let limit = TwoScaleField::from_fn(blocks, n_cell, |x, y| a(x.0, x.1) * b(y.0, y.1));
        let ts = crate::unfolding::unfold(&field, blocks, n_cell)?;
        let d = ts.distance_l2(&limit)? / limit.norm_l2();
        rows.push(StudyRow {
            eps,
            error_c: d,
            error_u: 0.0,
            error_w: 0.0,
            max_residual: 0.0,
        });
    }
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.eps, r.error_c)).collect();
    let order = observed_order(&pairs);
    let out = StudyOutput {
        monotone_c: monotone_decreasing(rows.iter().map(|r| r.error_c)),
        monotone_u: true,
        orders: (order, f64::NAN, f64::NAN),
        rows,
    };
    if let Some(dir) = out_dir {
        write_convergence_csv(&dir.join("manufactured.csv"), &out.rows, config_hash, out.orders)?;
        svg_loglog(
            &dir.join("manufactured.svg"),
            "manufactured two-scale error",
            &[("error_c", pairs)],
        )?;
    }
    Ok(out)
}

/// Degenerate single-phase study: body-force-driven Stokes flow on the
/// perforated domain against the Darcy velocity from the permeability
/// closure. Raw time scale; the flow relaxes to quasi-steady state.
pub fn stokes_darcy_study(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<StudyOutput> {
    let cell = cfg.build_cell()?;
    if !cell.has_solid() {
        return Err(Error::NoSolidInclusion);
    }
    let tensors = EffectiveTensors::from_cell(&cell, cfg.physics.mu)?;

    // Darcy reference on the macro grid: one quasi-static solve.
    let mut mc = MacroConfig::new(cfg.params(), cfg.physics.potential_mode, cfg.study.macro_n);
    mc.c0 = ScalarIc::Uniform(0.0);
    mc.body_force = cfg.physics.body_force;
    mc.energy_check = false;
    mc.linearize_at = Some(0.0);
    let macro_solver = MacroSolver::new(mc, tensors)?;
    let s0 = macro_solver.initial_state()?;
    let (macro_state, _) = macro_solver.step(&s0, 1e-8)?;
    let (ref_u, ref_v) = macro_solver.grid.faces_to_cells(&macro_state.u, &macro_state.v);

    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for &eps in &cfg.study.eps {
        let pg = cfg.tile(eps)?;
        let mut micro_cfg = cfg.micro_config();
        micro_cfg.params = crate::potential::PotentialParams::new(
            cfg.physics.theta,
            cfg.physics.theta0,
            0.0,
            cfg.physics.mu,
            cfg.physics.delta,
        )?;
        micro_cfg.c0 = ScalarIc::Uniform(0.0);
        micro_cfg.u0 = VelocityIc::Zero;
        micro_cfg.linearize_at = Some(0.0);
        let micro = Micro::new(&pg, micro_cfg)?;
        let traj = micro.run()?;
        let blocks = pg.n_blocks;
        let avg = block_average_velocity(
            &micro.grid,
            &traj.final_state.u,
            &traj.final_state.v,
            blocks,
        );
        // Block-average the reference as well so both sides carry the same
        // within-block mean; the macro grid is commensurate by validation.
        let ru = block_average_cells(&ref_u, blocks);
        let rv = block_average_cells(&ref_v, blocks);
        let err = l2_block_error(&avg, &(ru, rv));
        pairs.push((eps, err));
        rows.push(StudyRow {
            eps,
            error_c: 0.0,
            error_u: err,
            error_w: 0.0,
            max_residual: max_residual_micro(&traj),
        });
        if let Some(dir) = out_dir {
            write_energy_csv(
                &dir.join(format!("energy_stokes_darcy_eps_{}.csv", (1.0 / eps).round() as usize)),
                &traj.records,
                &cfg.hash,
            )?;
        }
    }
    let order = observed_order(&pairs);
    let out = StudyOutput {
        monotone_c: true,
        monotone_u: monotone_decreasing(rows.iter().map(|r| r.error_u)),
        orders: (f64::NAN, order, f64::NAN),
        rows,
    };
    if let Some(dir) = out_dir {
        write_convergence_csv(&dir.join("stokes_darcy.csv"), &out.rows, &cfg.hash, out.orders)?;
        svg_loglog(
            &dir.join("stokes_darcy.svg"),
            "Stokes to Darcy velocity error",
            &[("error_u", pairs)],
        )?;
    }
    Ok(out)
}

/// Shared tail of the diffusion and coupled studies: unfold the final
/// micro fields and measure distances to the macro limits.
struct ComparisonErrors {
    error_c: f64,
    error_u: f64,
    error_w: f64,
}

fn compare_with_macro(
    pg: &PerforatedGrid,
    micro: &Micro,
    micro_traj: &MicroTrajectory,
    macro_solver: &MacroSolver,
    macro_traj: &MacroTrajectory,
    velocity_scale: Option<f64>,
) -> Result<ComparisonErrors> {
    let blocks = pg.n_blocks;
    let n_cell = pg.cell.n_cell;
    let c_mac = &macro_traj.final_state.c;
    let w_mac = &macro_traj.final_state.w_bar;

    let limit_c = TwoScaleField::from_fn(blocks, n_cell, |x, _| bilinear_sample(c_mac, x.0, x.1));
    let dc = two_scale_distance(&micro_traj.final_state.c, &limit_c, pg)?;
    let error_c = dc / limit_c.norm_l2().max(1e-300);

    let limit_w = TwoScaleField::from_fn(blocks, n_cell, |x, _| bilinear_sample(w_mac, x.0, x.1));
    let dw = two_scale_distance(&micro_traj.final_state.w, &limit_w, pg)?;
    let error_w = dw / limit_w.norm_l2().max(1e-300);

    let error_u = if let Some(scale) = velocity_scale {
        let avg = block_average_velocity(
            &micro.grid,
            &micro_traj.final_state.u,
            &micro_traj.final_state.v,
            blocks,
        );
        let scaled = (avg.0.mapv(|t| t / scale), avg.1.mapv(|t| t / scale));
        let (mu_c, mv_c) = macro_solver
            .grid
            .faces_to_cells(&macro_traj.final_state.u, &macro_traj.final_state.v);
        let mut ru = Array2::zeros((blocks, blocks));
        let mut rv = Array2::zeros((blocks, blocks));
        for kx in 0..blocks {
            for ky in 0..blocks {
                let x = (kx as f64 + 0.5) * pg.epsilon;
                let y = (ky as f64 + 0.5) * pg.epsilon;
                ru[[kx, ky]] = bilinear_sample(&mu_c, x, y);
                rv[[kx, ky]] = bilinear_sample(&mv_c, x, y);
            }
        }
        l2_block_error(&scaled, &(ru, rv))
    } else {
        0.0
    };
    Ok(ComparisonErrors {
        error_c,
        error_u,
        error_w,
    })
}

/// Degenerate diffusion study: linearized Cahn-Hilliard on the perforated
/// domain against the effective-tensor macro model, diffusive time scale.
pub fn diffusion_study(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<StudyOutput> {
    let cell = cfg.build_cell()?;
    let tensors = EffectiveTensors::from_cell(&cell, cfg.physics.mu)?;
    let m0 = match cfg.initial.c0 {
        ScalarIc::Uniform(m)
        | ScalarIc::Cosine { mean: m, .. }
        | ScalarIc::CosineMix { mean: m, .. }
        | ScalarIc::Random { mean: m, .. } => m,
    };

    let mut mc = MacroConfig::new(cfg.params(), cfg.physics.potential_mode, cfg.study.macro_n);
    mc.dt = cfg.study.dt_tau;
    mc.t_end = cfg.study.t_star;
    mc.c0 = cfg.initial.c0;
    mc.flow = false;
    mc.linearize_at = Some(m0);
    mc.seed = cfg.seed;
    let macro_solver = MacroSolver::new(mc, tensors)?;
    let macro_traj = macro_solver.run()?;

    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for &eps in &cfg.study.eps {
        let pg = cfg.tile(eps)?;
        let mut micro_cfg = cfg.micro_config();
        micro_cfg.dt = cfg.study.dt_tau / (eps * eps);
        micro_cfg.t_end = cfg.study.t_star / (eps * eps);
        micro_cfg.flow = false;
        micro_cfg.advection = false;
        micro_cfg.u0 = VelocityIc::Zero;
        micro_cfg.linearize_at = Some(m0);
        let micro = Micro::new(&pg, micro_cfg)?;
        let traj = micro.run()?;
        let errs = compare_with_macro(&pg, &micro, &traj, &macro_solver, &macro_traj, None)?;
        pairs.push((eps, errs.error_c));
        rows.push(StudyRow {
            eps,
            error_c: errs.error_c,
            error_u: 0.0,
            error_w: errs.error_w,
            max_residual: max_residual_micro(&traj).max(max_residual_macro(&macro_traj)),
        });
    }
    let order = observed_order(&pairs);
    let out = StudyOutput {
        monotone_c: monotone_decreasing(rows.iter().map(|r| r.error_c)),
        monotone_u: true,
        orders: (order, f64::NAN, f64::NAN),
        rows,
    };
    if let Some(dir) = out_dir {
        write_convergence_csv(&dir.join("diffusion.csv"), &out.rows, &cfg.hash, out.orders)?;
        svg_loglog(
            &dir.join("diffusion.svg"),
            "diffusion homogenization error",
            &[("error_c", pairs)],
        )?;
    }
    Ok(out)
}

/// Full coupled study on the diffusive clock: logarithmic (or regularized)
/// potential with capillary coupling, optionally driven by a body force.
/// An applied macro force g enters the pore-scale momentum balance scaled
/// by eps, matching the scaling of the capillary term, so the pore
/// velocity is eps times the Darcy velocity; the comparison divides the
/// factor out.
pub fn full_study(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<StudyOutput> {
    let cell = cfg.build_cell()?;
    let tensors = EffectiveTensors::from_cell(&cell, cfg.physics.mu)?;

    let mut mc = MacroConfig::new(cfg.params(), cfg.physics.potential_mode, cfg.study.macro_n);
    mc.dt = cfg.study.dt_tau;
    mc.t_end = cfg.study.t_star;
    mc.c0 = cfg.initial.c0;
    mc.flow = true;
    mc.body_force = cfg.physics.body_force;
    mc.energy_check = cfg.physics.body_force.is_none();
    mc.seed = cfg.seed;
    let macro_solver = MacroSolver::new(mc, tensors)?;
    let macro_traj = macro_solver.run()?;

    let mut rows = Vec::new();
    let mut pairs_c = Vec::new();
    let mut pairs_u = Vec::new();
    let mut pairs_w = Vec::new();
    for &eps in &cfg.study.eps {
        let pg = cfg.tile(eps)?;
        let mut micro_cfg = cfg.micro_config();
        micro_cfg.dt = cfg.study.dt_tau / (eps * eps);
        micro_cfg.t_end = cfg.study.t_star / (eps * eps);
        micro_cfg.u0 = VelocityIc::Zero;
        micro_cfg.body_force = cfg.physics.body_force.map(|bf| {
            let BodyForce::RotationalBump { amp } = bf;
            BodyForce::RotationalBump { amp: amp * eps }
        });
        let micro = Micro::new(&pg, micro_cfg)?;
        let traj = micro.run()?;
        let errs =
            compare_with_macro(&pg, &micro, &traj, &macro_solver, &macro_traj, Some(eps))?;
        pairs_c.push((eps, errs.error_c));
        pairs_u.push((eps, errs.error_u));
        pairs_w.push((eps, errs.error_w));
        rows.push(StudyRow {
            eps,
            error_c: errs.error_c,
            error_u: errs.error_u,
            error_w: errs.error_w,
            max_residual: max_residual_micro(&traj).max(max_residual_macro(&macro_traj)),
        });
        if let Some(dir) = out_dir {
            write_energy_csv(
                &dir.join(format!("energy_full_eps_{}.csv", (1.0 / eps).round() as usize)),
                &traj.records,
                &cfg.hash,
            )?;
        }
    }
    let out = StudyOutput {
        monotone_c: monotone_decreasing(rows.iter().map(|r| r.error_c)),
        monotone_u: monotone_decreasing(rows.iter().map(|r| r.error_u)),
        orders: (
            observed_order(&pairs_c),
            observed_order(&pairs_u),
            observed_order(&pairs_w),
        ),
        rows,
    };
    if let Some(dir) = out_dir {
        write_convergence_csv(&dir.join("full.csv"), &out.rows, &cfg.hash, out.orders)?;
        svg_loglog(
            &dir.join("full.svg"),
            "coupled two-scale error",
            &[("error_c", pairs_c), ("error_u", pairs_u), ("error_w", pairs_w)],
        )?;
    }
    Ok(out)
}

pub fn run_study(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<StudyOutput> {
    match cfg.study.mode {
        StudyMode::Manufactured => {
            manufactured_study(&cfg.study.eps, cfg.geometry.n_cell, out_dir, &cfg.hash)
        }
        StudyMode::StokesDarcy => stokes_darcy_study(cfg, out_dir),
        StudyMode::Diffusion => diffusion_study(cfg, out_dir),
        StudyMode::Full => full_study(cfg, out_dir),
    }
}

/// Tracked trajectory norms mirroring the a-priori bound: max-in-time L2
/// norms of c, grad c and u, the time-integrated dissipation norms, and a
/// diffusive-clock time-derivative proxy.
#[derive(Clone, Debug)]
pub struct NormRow {
    pub eps: f64,
    pub c_l2_max: f64,
    pub grad_c_max: f64,
    pub u_l2_max: f64,
    pub int_eps2_grad_w: f64,
    pub int_mu_eps2_grad_u: f64,
    pub dtau_c_proxy: f64,
}

#[derive(Clone, Debug)]
pub struct UniformityTable {
    pub rows: Vec<NormRow>,
    /// max/min ratio per tracked norm across the eps sequence.
    pub ratios: [f64; 6],
}

/// Run the coupled system at each eps with identical smooth data on the
/// diffusive clock and tabulate the tracked norms; an eps-uniform bound
/// shows as bounded ratios.
pub fn eps_uniformity_table(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<UniformityTable> {
    let mut rows = Vec::new();
    for &eps in &cfg.study.eps {
        let pg = cfg.tile(eps)?;
        let mut micro_cfg = cfg.micro_config();
        micro_cfg.dt = cfg.study.dt_tau / (eps * eps);
        micro_cfg.t_end = cfg.study.t_star / (eps * eps);
        let micro = Micro::new(&pg, micro_cfg)?;
        let traj = micro.run()?;
        let c_l2_max = traj
            .steps
            .iter()
            .map(|s| s.c_l2)
            .fold(0.0f64, f64::max)
            .max(micro.grid.l2_cells(&micro.initial_state()?.c));
        let grad_c_max = traj
            .records
            .iter()
            .map(|r| (2.0 * r.grad).sqrt())
            .fold(0.0, f64::max);
        let u_l2_max = traj
            .records
            .iter()
            .map(|r| (2.0 * r.kinetic).sqrt())
            .fold(0.0, f64::max);
        let int_w: f64 = traj.records.iter().map(|r| r.diss_w).sum::<f64>().sqrt();
        let int_u: f64 = traj.records.iter().map(|r| r.diss_u.max(0.0)).sum::<f64>().sqrt();
        let dtau = cfg.study.dt_tau;
        let proxy: f64 = traj
            .steps
            .iter()
            .map(|s| s.dc_l2 * s.dc_l2 / dtau)
            .sum::<f64>()
            .sqrt();
        rows.push(NormRow {
            eps,
            c_l2_max,
            grad_c_max,
            u_l2_max,
            int_eps2_grad_w: int_w,
            int_mu_eps2_grad_u: int_u,
            dtau_c_proxy: proxy,
        });
        if let Some(dir) = out_dir {
            write_energy_csv(
                &dir.join(format!("energy_bound_eps_{}.csv", (1.0 / eps).round() as usize)),
                &traj.records,
                &cfg.hash,
            )?;
        }
    }
    let cols: Vec<Vec<f64>> = (0..6)
        .map(|k| {
            rows.iter()
                .map(|r| match k {
                    0 => r.c_l2_max,
                    1 => r.grad_c_max,
                    2 => r.u_l2_max,
                    3 => r.int_eps2_grad_w,
                    4 => r.int_mu_eps2_grad_u,
                    _ => r.dtau_c_proxy,
                })
                .collect()
        })
        .collect();
    let mut ratios = [0.0f64; 6];
    for (k, col) in cols.iter().enumerate() {
        let hi = col.iter().cloned().fold(f64::MIN, f64::max);
        let lo = col.iter().cloned().fold(f64::MAX, f64::min);
        ratios[k] = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    }
    if let Some(dir) = out_dir {
        let mut out = String::new();
        use std::fmt::Write as _;
        writeln!(out, "# config_hash={}", cfg.hash).ok();
        writeln!(
            out,
            "eps,c_l2_max,grad_c_max,u_l2_max,int_eps2_grad_w,int_mu_eps2_grad_u,dtau_c_proxy"
        )
        .ok();
        for r in &rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                crate::report::fmt_f64(r.eps),
                crate::report::fmt_f64(r.c_l2_max),
                crate::report::fmt_f64(r.grad_c_max),
                crate::report::fmt_f64(r.u_l2_max),
                crate::report::fmt_f64(r.int_eps2_grad_w),
                crate::report::fmt_f64(r.int_mu_eps2_grad_u),
                crate::report::fmt_f64(r.dtau_c_proxy)
            )
            .ok();
        }
        crate::report::atomic_write(&dir.join("bound_table.csv"), out.as_bytes())?;
    }
    Ok(UniformityTable { rows, ratios })
}

/// Energy ledger files (CSV plus a total-energy SVG) for a finished run.
pub fn report_energy(
    records: &[crate::micro::EnergyRecord],
    out_dir: &Path,
    tag: &str,
    config_hash: &str,
) -> Result<()> {
    write_energy_csv(&out_dir.join(format!("energy_{tag}.csv")), records, config_hash)?;
    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.t.max(1e-300), r.total.abs().max(1e-300)))
        .collect();
    svg_loglog(
        &out_dir.join(format!("energy_{tag}.svg")),
        "total energy along the trajectory",
        &[("total", pts)],
    )?;
    Ok(())
}

/// Warm-up helper used by tests: solve both cell problems once and report
/// the residuals alongside the tensors.
pub fn solve_tensors_with_residuals(cfg: &RunConfig) -> Result<(EffectiveTensors, f64, f64)> {
    let cell = cfg.build_cell()?;
    let corr = solve_scalar_corrector(&cell)?;
    let a_hom = crate::cell::effective_diffusion(&cell, &corr);
    let sc = solve_stokes_corrector(&cell, cfg.physics.mu)?;
    let k = crate::cell::permeability(&cell, &sc);
    let tensors = EffectiveTensors {
        a_hom,
        k,
        porosity: cell.porosity,
    };
    let corr_res = corr.residuals.iter().cloned().fold(0.0, f64::max);
    let stokes_res = sc.residuals.iter().cloned().fold(0.0, f64::max);
    Ok((tensors, corr_res, stokes_res))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manufactured_study_first_order() {
        let out = manufactured_study(&[0.5, 0.25, 0.125, 0.0625], 16, None, "test").unwrap();
        assert!(out.monotone_c);
        assert!(out.orders.0 >= 0.9, "order {}", out.orders.0);
    }

    #[test]
    fn bilinear_sampling_reproduces_linear_fields() {
        let n = 16;
        let f = Array2::from_shape_fn((n, n), |(i, j)| {
            2.0 * ((i as f64 + 0.5) / n as f64) - 3.0 * ((j as f64 + 0.5) / n as f64)
        });
        for &(x, y) in &[(0.3, 0.4), (0.511, 0.729), (0.25, 0.5)] {
            let v = bilinear_sample(&f, x, y);
            assert!((v - (2.0 * x - 3.0 * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn block_average_of_constant_is_constant() {
        let g = Grid2::full_box(32, 32, 1.0 / 32.0);
        let mut u = g.zero_u();
        let mut v = g.zero_v();
        for (ix, a) in g.u_active.indexed_iter() {
            if *a {
                u[ix] = 2.0;
            }
        }
        for (ix, a) in g.v_active.indexed_iter() {
            if *a {
                v[ix] = -1.0;
            }
        }
        let (bu, bv) = block_average_velocity(&g, &u, &v, 4);
        // Interior blocks see the constant; boundary faces are clamped to 0.
        assert!((bu[[1, 1]] - 2.0).abs() < 1e-12);
        assert!((bv[[2, 1]] + 1.0).abs() < 1e-12);
    }
}
