//! Pore-scale coupled Cahn-Hilliard / Stokes time stepper on the
//! perforated domain.
//!
//! One step advances the order parameter with a convex-splitting scheme
//! (convex logarithmic part implicit via Newton, concave quadratic part
//! explicit), advects with the force-corrected velocity
//! u* = u^n - dt*eps*lambda*cbar grad w^{n+1}, then performs an implicit
//! viscous solve and a pressure projection. Folding the force into the
//! transport velocity makes the capillary work terms cancel exactly
//! against the kinetic-energy update, so the discrete energy
//!   lambda*(1/2 ||grad c||^2 + int F(c)) + 1/2 ||u||^2
//! is non-increasing for every dt, up to solver tolerances. The order
//! parameter update is reconstituted in flux form after the Newton solve,
//! which conserves the pore mean to machine precision rather than to
//! Newton tolerance.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PerforatedGrid;
use crate::grid::{CellStencil, Grid2};
use crate::linalg::{cg, CgStats};
use crate::potential::{
    big_f, f, f_prime, PotentialMode, PotentialParams, SplitPotential,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForceSign {
    /// Capillary force -eps*lambda*c grad w (the analyzed convention).
    Negative,
    /// Opposite convention +eps*lambda*c grad w; kept as a switch, not
    /// energy stable.
    Positive,
}

impl ForceSign {
    fn signum(self) -> f64 {
        match self {
            ForceSign::Negative => -1.0,
            ForceSign::Positive => 1.0,
        }
    }
}

/// Closed-form initial data for the order parameter.
#[derive(Clone, Copy, Debug)]
pub enum ScalarIc {
    Uniform(f64),
    /// mean + amp cos(pi x) cos(pi y); compatible with homogeneous Neumann
    /// data on the outer box.
    Cosine { mean: f64, amp: f64 },
    /// Two-mode Neumann-compatible profile. A single cosine mode makes the
    /// chemical potential a pointwise function of c, which turns the
    /// capillary force into an exact gradient and kills the Darcy flow;
    /// mixing modes keeps the solenoidal part alive.
    CosineMix { mean: f64, amp: f64 },
    /// mean + uniform random values in [-amp, amp], seeded per run.
    Random { mean: f64, amp: f64 },
}

/// Closed-form initial velocity.
#[derive(Clone, Copy, Debug)]
pub enum VelocityIc {
    Zero,
    /// Discrete curl of amp sin^2(pi x) sin^2(pi y); divergence-free on the
    /// box before masking, re-projected after masking.
    StreamBump { amp: f64 },
}

/// Steady body force on the momentum equation (used by the degenerate
/// Stokes-to-Darcy studies; zero in the physical model).
#[derive(Clone, Copy, Debug)]
pub enum BodyForce {
    /// Curl of a compactly-supported stream bump:
    /// g = amp * curl[ sin^2(pi x) sin^2(pi y) ]; not a gradient, so it
    /// drives circulation in a sealed box.
    RotationalBump { amp: f64 },
}

impl BodyForce {
    pub fn eval_faces(&self, grid: &Grid2) -> (Array2<f64>, Array2<f64>) {
        let BodyForce::RotationalBump { amp } = *self;
        let pi = std::f64::consts::PI;
        let mut gx = grid.zero_u();
        let mut gy = grid.zero_v();
        let (ux, uy) = grid.u_shape();
        for i in 0..ux {
            for j in 0..uy {
                if grid.u_active[[i, j]] {
                    let x = i as f64 * grid.h;
                    let y = (j as f64 + 0.5) * grid.h;
                    // d/dy [sin^2(pi x) sin^2(pi y)]
                    gx[[i, j]] = amp * pi * (pi * x).sin().powi(2) * (2.0 * pi * y).sin();
                }
            }
        }
        let (vx, vy) = grid.v_shape();
        for i in 0..vx {
            for j in 0..vy {
                if grid.v_active[[i, j]] {
                    let x = (i as f64 + 0.5) * grid.h;
                    let y = j as f64 * grid.h;
                    gy[[i, j]] = -amp * pi * (2.0 * pi * x).sin() * (pi * y).sin().powi(2);
                }
            }
        }
        (gx, gy)
    }
}

/// The nonlinearity handed to the convex-splitting scheme: either the full
/// (singular or regularized) potential or its quadratic Taylor model about
/// a reference value, used by the linearized homogenization studies.
#[derive(Clone, Copy, Debug)]
pub enum ChSplit {
    Potential(SplitPotential),
    Linearized {
        at: f64,
        f_at: f64,
        fp_at: f64,
        e_at: f64,
        theta0: f64,
    },
}

impl ChSplit {
    pub fn from_config(cfg: &MicroConfig) -> Result<Self> {
        match cfg.linearize_at {
            None => Ok(ChSplit::Potential(SplitPotential::new(cfg.params, cfg.mode))),
            Some(m0) => Ok(ChSplit::Linearized {
                at: m0,
                f_at: f(m0, &cfg.params)?,
                fp_at: f_prime(m0, &cfg.params)?,
                e_at: big_f(m0, &cfg.params)?,
                theta0: cfg.params.theta0,
            }),
        }
    }

    /// A nonlinearity with f identically zero (diagnostics only).
    pub fn disabled() -> Self {
        ChSplit::Linearized {
            at: 0.0,
            f_at: 0.0,
            fp_at: 0.0,
            e_at: 0.0,
            theta0: 0.0,
        }
    }

    fn theta0(&self) -> f64 {
        match self {
            ChSplit::Potential(sp) => sp.params.theta0,
            ChSplit::Linearized { theta0, .. } => *theta0,
        }
    }

    /// Derivative of the convex part (treated implicitly).
    pub(crate) fn convex_prime(&self, s: f64) -> f64 {
        match self {
            ChSplit::Potential(sp) => sp.convex_prime(s),
            ChSplit::Linearized {
                at,
                f_at,
                fp_at,
                theta0,
                ..
            } => f_at + fp_at * (s - at) + theta0 * s,
        }
    }

    pub(crate) fn convex_double_prime(&self, s: f64) -> f64 {
        match self {
            ChSplit::Potential(sp) => sp.convex_double_prime(s),
            ChSplit::Linearized { fp_at, theta0, .. } => fp_at + theta0,
        }
    }

    /// Full derivative f at a point (diagnostic form, no splitting).
    pub fn full_prime(&self, s: f64) -> f64 {
        self.convex_prime(s) - self.theta0() * s
    }

    /// Energy density for the ledger.
    pub fn energy_density(&self, s: f64) -> f64 {
        match self {
            ChSplit::Potential(sp) => sp.energy(s),
            ChSplit::Linearized {
                at, f_at, fp_at, e_at, ..
            } => e_at + f_at * (s - at) + 0.5 * fp_at * (s - at) * (s - at),
        }
    }

    fn keeps_iterates_inside_unit_interval(&self) -> bool {
        matches!(
            self,
            ChSplit::Potential(SplitPotential {
                mode: PotentialMode::Singular,
                ..
            })
        )
    }
}

#[derive(Clone, Debug)]
pub struct MicroConfig {
    pub params: PotentialParams,
    pub mode: PotentialMode,
    pub dt: f64,
    pub t_end: f64,
    pub c0: ScalarIc,
    pub u0: VelocityIc,
    /// Run the Stokes substep. With `false` the velocity stays frozen.
    pub flow: bool,
    /// Include the advective transport of the order parameter.
    pub advection: bool,
    pub force_sign: ForceSign,
    pub body_force: Option<BodyForce>,
    /// Replace f by its tangent-quadratic model about the given mean.
    pub linearize_at: Option<f64>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Relative tolerance of the viscous CG solves.
    pub cg_tol: f64,
    /// Absolute max-norm target for the discrete divergence after projection.
    pub div_tol: f64,
    pub cg_max_iter: usize,
    /// Keep a snapshot every this many steps (0: final state only).
    pub snapshot_every: usize,
    /// Enforce per-step decay of the weighted energy ledger online.
    pub energy_check: bool,
    pub mass_tol: f64,
    /// Per-step energy increase allowance, relative to the initial energy.
    pub energy_tol_factor: f64,
    pub seed: u64,
}

impl MicroConfig {
    pub fn new(params: PotentialParams, mode: PotentialMode) -> Self {
        MicroConfig {
            params,
            mode,
            dt: 1e-4,
            t_end: 1e-2,
            c0: ScalarIc::Uniform(0.0),
            u0: VelocityIc::Zero,
            flow: true,
            advection: true,
            force_sign: ForceSign::Negative,
            body_force: None,
            linearize_at: None,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            cg_tol: 1e-10,
            div_tol: 1e-11,
            cg_max_iter: 100_000,
            snapshot_every: 0,
            energy_check: true,
            mass_tol: 1e-12,
            energy_tol_factor: 1e-8,
            seed: 0,
        }
    }
}

/// Discrete fields of one trajectory instant. The grid lives in the solver.
#[derive(Clone, Debug)]
pub struct MicroState {
    pub c: Array2<f64>,
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub p: Array2<f64>,
    pub t: f64,
}

/// One row of the energy ledger.
#[derive(Clone, Copy, Debug)]
pub struct EnergyRecord {
    pub t: f64,
    pub grad: f64,
    pub bulk: f64,
    pub kinetic: f64,
    pub total: f64,
    pub mass: f64,
    /// Step-integrated dissipation dt * eps^2 ||grad w||^2.
    pub diss_w: f64,
    /// Step-integrated dissipation dt * mu eps^2 ||grad u||^2.
    pub diss_u: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub newton_iters: usize,
    pub newton_residual: f64,
    pub cg_iters: usize,
    pub max_lin_residual: f64,
    pub div_after: f64,
    pub cfl: f64,
    /// L2 norm of the order-parameter increment over the step.
    pub dc_l2: f64,
    pub c_l2: f64,
}

#[derive(Clone, Debug)]
pub struct MicroTrajectory {
    pub records: Vec<EnergyRecord>,
    pub steps: Vec<StepStats>,
    pub snapshots: Vec<MicroState>,
    pub final_state: MicroState,
    pub max_abs_c: f64,
    pub max_div: f64,
}

/// Owns the grid and configuration; states are advanced through it.
pub struct Micro {
    pub grid: Grid2,
    pub epsilon: f64,
    pub cfg: MicroConfig,
    pub split: ChSplit,
    stencil: CellStencil,
    body_force_faces: Option<(Array2<f64>, Array2<f64>)>,
}

/// Chemical potential w = -lap c + f(c) with homogeneous Neumann stencils
/// on the staircase boundary; the diagnostic (non-split) form.
pub fn chemical_potential(c: &Array2<f64>, grid: &Grid2, split: &ChSplit) -> Array2<f64> {
    let lap = grid.laplacian_scalar(c);
    let mut w = grid.zero_cells();
    for ((i, j), wv) in w.indexed_iter_mut() {
        if grid.pore[[i, j]] {
            *wv = -lap[[i, j]] + split.full_prime(c[[i, j]]);
        }
    }
    w
}

impl Micro {
    pub fn new(pg: &PerforatedGrid, cfg: MicroConfig) -> Result<Self> {
        let grid = pg.solver_grid();
        let split = ChSplit::from_config(&cfg)?;
        let body_force_faces = cfg.body_force.as_ref().map(|bf| bf.eval_faces(&grid));
        let stencil = grid.cell_stencil();
        Ok(Micro {
            grid,
            epsilon: pg.epsilon,
            cfg,
            split,
            stencil,
            body_force_faces,
        })
    }

    /// Construct from an explicit grid (used by the upscaled solver's
    /// reduction tests, where the domain is the full box).
    pub fn from_grid(grid: Grid2, epsilon: f64, cfg: MicroConfig) -> Result<Self> {
        let split = ChSplit::from_config(&cfg)?;
        let body_force_faces = cfg.body_force.as_ref().map(|bf| bf.eval_faces(&grid));
        let stencil = grid.cell_stencil();
        Ok(Micro {
            grid,
            epsilon,
            cfg,
            split,
            stencil,
            body_force_faces,
        })
    }

    pub fn initial_state(&self) -> Result<MicroState> {
        let g = &self.grid;
        let mut c = g.zero_cells();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        for ((i, j), v) in c.indexed_iter_mut() {
            if !g.pore[[i, j]] {
                continue;
            }
            let x = g.x_cell(i);
            let y = g.y_cell(j);
            *v = match self.cfg.c0 {
                ScalarIc::Uniform(m) => m,
                ScalarIc::Cosine { mean, amp } => {
                    let pi = std::f64::consts::PI;
                    mean + amp * (pi * x).cos() * (pi * y).cos()
                }
                ScalarIc::CosineMix { mean, amp } => {
                    let pi = std::f64::consts::PI;
                    mean + amp
                        * ((pi * x).cos() * (pi * y).cos()
                            + 0.5 * (2.0 * pi * x).cos() * (pi * y).cos())
                }
                ScalarIc::Random { mean, amp } => mean + rng.gen_range(-amp..=amp),
            };
        }
        let max_c = g.max_abs_cells(&c);
        if max_c > 1.0 {
            return Err(Error::ValidationError(format!(
                "initial order parameter exceeds 1 in magnitude (max {max_c})"
            )));
        }
        let m0 = g.pore_mean(&c);
        if m0.abs() >= 1.0 {
            return Err(Error::ValidationError(format!(
                "initial mean must satisfy |m(c0)| < 1 (got {m0})"
            )));
        }

        let (mut u, mut v) = match self.cfg.u0 {
            VelocityIc::Zero => (g.zero_u(), g.zero_v()),
            VelocityIc::StreamBump { amp } => {
                let pi = std::f64::consts::PI;
                let psi = |x: f64, y: f64| amp * (pi * x).sin().powi(2) * (pi * y).sin().powi(2);
                let mut u = g.zero_u();
                let mut v = g.zero_v();
                let (ux, uy) = g.u_shape();
                for i in 0..ux {
                    for j in 0..uy {
                        if g.u_active[[i, j]] {
                            let x = i as f64 * g.h;
                            u[[i, j]] =
                                (psi(x, (j as f64 + 1.0) * g.h) - psi(x, j as f64 * g.h)) / g.h;
                        }
                    }
                }
                let (vx, vy) = g.v_shape();
                for i in 0..vx {
                    for j in 0..vy {
                        if g.v_active[[i, j]] {
                            let y = j as f64 * g.h;
                            v[[i, j]] =
                                -(psi((i as f64 + 1.0) * g.h, y) - psi(i as f64 * g.h, y)) / g.h;
                        }
                    }
                }
                (u, v)
            }
        };
        g.mask_faces(&mut u, &mut v);
        // Masking breaks the discrete curl structure near the solid; restore
        // the divergence constraint before the first step.
        let mut p = g.zero_cells();
        if g.max_abs_faces(&u, &v) > 0.0 {
            let (un, vn, phi, _) = self.project(&u, &v)?;
            u = un;
            v = vn;
            p = phi;
            p.fill(0.0);
        }
        let w = chemical_potential(&c, g, &self.split);
        Ok(MicroState {
            c,
            w,
            u,
            v,
            p,
            t: 0.0,
        })
    }

    /// Transport velocity coefficient: kappa = 1 - sgn * dt * lambda * cbar^2
    /// on faces (sgn = -1 for the stable convention, giving 1 + dt l cbar^2).
    fn kappa_faces(
        &self,
        cx: &Array2<f64>,
        cy: &Array2<f64>,
        dt: f64,
        coupled: bool,
    ) -> (Array2<f64>, Array2<f64>) {
        let g = &self.grid;
        let mut kx = Array2::from_elem(g.u_shape(), 0.0);
        let mut ky = Array2::from_elem(g.v_shape(), 0.0);
        let s = if coupled {
            -self.cfg.force_sign.signum() * dt * self.cfg.params.lambda
        } else {
            0.0
        };
        for (ix, a) in g.u_active.indexed_iter() {
            if *a {
                kx[ix] = 1.0 + s * cx[ix] * cx[ix];
            }
        }
        for (ix, a) in g.v_active.indexed_iter() {
            if *a {
                ky[ix] = 1.0 + s * cy[ix] * cy[ix];
            }
        }
        (kx, ky)
    }

    fn coupled(&self) -> bool {
        self.cfg.flow && self.cfg.advection && self.cfg.params.lambda > 0.0
    }

    /// One semi-implicit Cahn-Hilliard step; returns (c', w', stats).
    pub fn step_ch(&self, state: &MicroState, dt: f64) -> Result<(Array2<f64>, Array2<f64>, StepStats)> {
        self.step_ch_with_guess(state, dt, None)
    }

    /// As [`Micro::step_ch`], with an optional Newton starting guess
    /// (trajectory loops pass the extrapolated previous solution, which
    /// roughly halves the Krylov work).
    pub fn step_ch_with_guess(
        &self,
        state: &MicroState,
        dt: f64,
        guess: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, Array2<f64>, StepStats)> {
        let g = &self.grid;
        let eps = self.epsilon;
        let eps2 = eps * eps;
        let mut stats = StepStats::default();

        // Explicit conservative advection with the current velocity.
        let (cx, cy) = g.cell_to_faces(&state.c);
        let mut rhs = state.c.clone();
        if self.cfg.advection {
            stats.cfl = eps * dt * g.max_abs_faces(&state.u, &state.v) / g.h;
            if stats.cfl > 1.0 {
                return Err(Error::CflViolation(stats.cfl));
            }
            let mut fx = &cx * &state.u;
            let mut fy = &cy * &state.v;
            g.mask_faces(&mut fx, &mut fy);
            let adv = g.div_faces(&fx, &fy);
            rhs.scaled_add(-dt * eps, &adv);
        }

        let (kx, ky) = self.kappa_faces(&cx, &cy, dt, self.coupled());
        let mut kflat: Vec<f64> = Vec::with_capacity(kx.len() + ky.len());
        kflat.extend_from_slice(kx.as_slice().expect("standard layout"));
        kflat.extend_from_slice(ky.as_slice().expect("standard layout"));
        let c_old = &state.c;
        let theta0 = match &self.split {
            ChSplit::Potential(sp) => sp.params.theta0,
            ChSplit::Linearized { theta0, .. } => *theta0,
        };

        // w expression at iterate c: -lap c + convex'(c) - theta0 c_old.
        let w_of = |c: &Array2<f64>| -> Array2<f64> {
            let lap = g.laplacian_scalar(c);
            let mut w = g.zero_cells();
            for ((i, j), wv) in w.indexed_iter_mut() {
                if g.pore[[i, j]] {
                    *wv = -lap[[i, j]] + self.split.convex_prime(c[[i, j]])
                        - theta0 * c_old[[i, j]];
                }
            }
            w
        };
        let residual_of = |c: &Array2<f64>, w: &Array2<f64>| -> Array2<f64> {
            let diff = g.div_kappa_grad(&kx, &ky, w);
            let mut gr = c - &rhs;
            gr.scaled_add(-dt * eps2, &diff);
            gr
        };

        let inside_only = self.split.keeps_iterates_inside_unit_interval();
        let bound = 1.0 - crate::potential::SINGULAR_CLAMP;
        let mut c = match guess {
            Some(gss) => {
                let mut c = gss.clone();
                if inside_only {
                    c.mapv_inplace(|v| v.clamp(-bound, bound));
                }
                c
            }
            None => state.c.clone(),
        };
        let mut converged = false;
        // The bilaplacian composition amplifies rounding by 16/h^4; below
        // that floor the residual is pure cancellation noise.
        let h2 = g.h * g.h;
        let noise = f64::EPSILON * dt * eps2 * (16.0 / (h2 * h2))
            * g.max_abs_cells(&state.c).max(1.0);
        let newton_tol = self.cfg.newton_tol.max(8.0 * noise);
        for iter in 0..self.cfg.newton_max_iter {
            let w = w_of(&c);
            let gres = residual_of(&c, &w);
            let res = g.max_abs_cells(&gres);
            stats.newton_iters = iter;
            stats.newton_residual = res;
            if res <= newton_tol {
                converged = true;
                break;
            }

            // Newton diagonal from the convex part at the current iterate.
            let mut d = g.zero_cells();
            for ((i, j), dv) in d.indexed_iter_mut() {
                if g.pore[[i, j]] {
                    *dv = self.split.convex_double_prime(c[[i, j]]);
                }
            }
            let st = &self.stencil;
            let ds = d.as_slice().expect("standard layout");
            let nn = g.nx * g.ny;
            let apply_j = |x: &Array2<f64>| -> Array2<f64> {
                let xs = x.as_slice().expect("standard layout");
                let mut wx = vec![0.0; nn];
                st.helmholtz_apply(ds, xs, &mut wx);
                let mut diff = vec![0.0; nn];
                st.div_kappa_grad(&kflat, &wx, &mut diff);
                let mut y = vec![0.0; nn];
                for &c in &st.cells {
                    let c = c as usize;
                    y[c] = xs[c] - dt * eps2 * diff[c];
                }
                Array2::from_shape_vec((g.nx, g.ny), y).unwrap()
            };
            let inner = |a: &Array2<f64>, b: &Array2<f64>| {
                st.helmholtz_dot(ds, a.as_slice().unwrap(), b.as_slice().unwrap())
            };
            let lin_tol = (1e-4 * res).max(0.4 * newton_tol);
            let neg_g = gres.mapv(|v| -v);
            let (delta, cg_stats) = cg(
                apply_j,
                &neg_g,
                g.zero_cells(),
                inner,
                |a| st.max_abs(a.as_slice().unwrap()),
                lin_tol,
                self.cfg.cg_max_iter,
            )?;
            stats.max_lin_residual = stats.max_lin_residual.max(cg_stats.residual);
            stats.cg_iters += cg_stats.iters;

            let mut alpha = 1.0f64;
            if inside_only {
                for ((i, j), dv) in delta.indexed_iter() {
                    if !g.pore[[i, j]] || *dv == 0.0 {
                        continue;
                    }
                    let target = if *dv > 0.0 { bound } else { -bound };
                    let room = (target - c[[i, j]]) / dv;
                    if room < alpha {
                        alpha = 0.95 * room.max(0.0);
                    }
                }
                if alpha < 1e-8 {
                    return Err(Error::NewtonDivergence {
                        iters: iter,
                        residual: res,
                    });
                }
            }
            c.scaled_add(alpha, &delta);
        }
        if !converged {
            return Err(Error::NewtonDivergence {
                iters: self.cfg.newton_max_iter,
                residual: stats.newton_residual,
            });
        }

        // Flux-form reconstitution: conserves the pore sum exactly.
        let w = w_of(&c);
        let diff = g.div_kappa_grad(&kx, &ky, &w);
        let mut c_new = rhs;
        c_new.scaled_add(dt * eps2, &diff);
        stats.dc_l2 = {
            let d = &c_new - &state.c;
            g.l2_cells(&d)
        };
        stats.c_l2 = g.l2_cells(&c_new);
        Ok((c_new, w, stats))
    }

    /// Pressure projection of an arbitrary face field; returns the
    /// solenoidal field, the potential, and solver stats.
    fn project(
        &self,
        u: &Array2<f64>,
        v: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, CgStats)> {
        let g = &self.grid;
        let mut bdiv = g.div_faces(u, v);
        g.project_zero_mean(&mut bdiv);
        let st = &self.stencil;
        let nn = g.nx * g.ny;
        let apply = |x: &Array2<f64>| -> Array2<f64> {
            let mut y = vec![0.0; nn];
            st.neg_laplacian(x.as_slice().unwrap(), &mut y);
            Array2::from_shape_vec((g.nx, g.ny), y).unwrap()
        };
        let neg_b = bdiv.mapv(|t| -t);
        // Absolute divergence target for O(1) fields, relative beyond that.
        let tol = self.cfg.div_tol * g.max_abs_faces(u, v).max(1.0);
        let (mut phi, stats) = cg(
            apply,
            &neg_b,
            g.zero_cells(),
            |a, b| st.dot(a.as_slice().unwrap(), b.as_slice().unwrap()),
            |a| st.max_abs(a.as_slice().unwrap()),
            tol,
            self.cfg.cg_max_iter,
        )?;
        g.project_zero_mean(&mut phi);
        let (gx, gy) = g.grad_to_faces(&phi);
        let mut un = u.clone();
        let mut vn = v.clone();
        un -= &gx;
        vn -= &gy;
        g.mask_faces(&mut un, &mut vn);
        Ok((un, vn, phi, stats))
    }

    /// One incremental momentum step: explicit capillary force folded into
    /// u*, implicit viscous solve, projection to the divergence-free space.
    pub fn step_stokes(
        &self,
        c_old: &Array2<f64>,
        w_new: &Array2<f64>,
        u: &Array2<f64>,
        v: &Array2<f64>,
        dt: f64,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, StepStats)> {
        let g = &self.grid;
        let eps = self.epsilon;
        let mut stats = StepStats::default();

        // u* = u + dt (sgn eps lambda cbar grad w + body force)
        let mut us = u.clone();
        let mut vs = v.clone();
        if self.cfg.params.lambda > 0.0 {
            let (cx, cy) = g.cell_to_faces(c_old);
            let (wx, wy) = g.grad_to_faces(w_new);
            let a = self.cfg.force_sign.signum() * dt * eps * self.cfg.params.lambda;
            let mut fx = &cx * &wx;
            let mut fy = &cy * &wy;
            g.mask_faces(&mut fx, &mut fy);
            us.scaled_add(a, &fx);
            vs.scaled_add(a, &fy);
        }
        if let Some((bx, by)) = &self.body_force_faces {
            us.scaled_add(dt, bx);
            vs.scaled_add(dt, by);
        }
        g.mask_faces(&mut us, &mut vs);

        // Implicit viscous solve per component.
        let visc = dt * self.cfg.params.mu * eps * eps;
        let scale_u = g.max_abs_faces(&us, &vs);
        let (u_vis, v_vis) = if scale_u == 0.0 {
            (us, vs)
        } else {
            let tol = self.cfg.cg_tol * scale_u;
            let apply_u = |x: &Array2<f64>| -> Array2<f64> {
                let lap = g.laplacian_u(x);
                let mut y = x.clone();
                y.scaled_add(-visc, &lap);
                for (ix, a) in g.u_active.indexed_iter() {
                    if !a {
                        y[ix] = 0.0;
                    }
                }
                y
            };
            let dot_u = |a: &Array2<f64>, b: &Array2<f64>| {
                let mut s = 0.0;
                for (ix, act) in g.u_active.indexed_iter() {
                    if *act {
                        s += a[ix] * b[ix];
                    }
                }
                s
            };
            let norm_u = |a: &Array2<f64>| {
                g.u_active
                    .indexed_iter()
                    .filter(|(_, &act)| act)
                    .map(|(ix, _)| a[ix].abs())
                    .fold(0.0, f64::max)
            };
            let (u_vis, su) = cg(apply_u, &us, us.clone(), dot_u, norm_u, tol, self.cfg.cg_max_iter)?;
            stats.max_lin_residual = stats.max_lin_residual.max(su.residual);

            let apply_v = |x: &Array2<f64>| -> Array2<f64> {
                let lap = g.laplacian_v(x);
                let mut y = x.clone();
                y.scaled_add(-visc, &lap);
                for (ix, a) in g.v_active.indexed_iter() {
                    if !a {
                        y[ix] = 0.0;
                    }
                }
                y
            };
            let dot_v = |a: &Array2<f64>, b: &Array2<f64>| {
                let mut s = 0.0;
                for (ix, act) in g.v_active.indexed_iter() {
                    if *act {
                        s += a[ix] * b[ix];
                    }
                }
                s
            };
            let norm_v = |a: &Array2<f64>| {
                g.v_active
                    .indexed_iter()
                    .filter(|(_, &act)| act)
                    .map(|(ix, _)| a[ix].abs())
                    .fold(0.0, f64::max)
            };
            let (v_vis, sv) = cg(apply_v, &vs, vs.clone(), dot_v, norm_v, tol, self.cfg.cg_max_iter)?;
            stats.max_lin_residual = stats.max_lin_residual.max(sv.residual);
            (u_vis, v_vis)
        };

        // Projection.
        let (un, vn, phi, ps) = self.project(&u_vis, &v_vis)?;
        stats.max_lin_residual = stats.max_lin_residual.max(ps.residual);
        let div = g.div_faces(&un, &vn);
        stats.div_after = g.max_abs_cells(&div);
        let p = phi.mapv(|t| t / dt);
        Ok((un, vn, p, stats))
    }

    /// Full step: Cahn-Hilliard block, then momentum block.
    pub fn step(&self, state: &MicroState, dt: f64) -> Result<(MicroState, StepStats)> {
        self.step_with_guess(state, dt, None)
    }

    pub fn step_with_guess(
        &self,
        state: &MicroState,
        dt: f64,
        guess: Option<&Array2<f64>>,
    ) -> Result<(MicroState, StepStats)> {
        let (c_new, w_new, mut stats) = self.step_ch_with_guess(state, dt, guess)?;
        let (u, v, p) = if self.cfg.flow {
            let (u, v, p, st) = self.step_stokes(&state.c, &w_new, &state.u, &state.v, dt)?;
            stats.max_lin_residual = stats.max_lin_residual.max(st.max_lin_residual);
            stats.div_after = st.div_after;
            (u, v, p)
        } else {
            (state.u.clone(), state.v.clone(), state.p.clone())
        };
        Ok((
            MicroState {
                c: c_new,
                w: w_new,
                u,
                v,
                p,
                t: state.t + dt,
            },
            stats,
        ))
    }

    /// Energy ledger entry by midpoint quadrature over pore cells / faces.
    pub fn energy(&self, state: &MicroState, diss_w: f64, diss_u: f64) -> EnergyRecord {
        let g = &self.grid;
        let (gx, gy) = g.grad_to_faces(&state.c);
        let grad = 0.5 * g.face_dot(&gx, &gy, &gx, &gy);
        let bulk = {
            let mut e = g.zero_cells();
            for ((i, j), v) in e.indexed_iter_mut() {
                if g.pore[[i, j]] {
                    *v = self.split.energy_density(state.c[[i, j]]);
                }
            }
            g.pore_integral(&e)
        };
        let kinetic = 0.5 * g.face_dot(&state.u, &state.v, &state.u, &state.v);
        EnergyRecord {
            t: state.t,
            grad,
            bulk,
            kinetic,
            total: grad + bulk + kinetic,
            mass: g.pore_mean(&state.c),
            diss_w,
            diss_u,
        }
    }

    /// Weighted Lyapunov functional dissipated by the scheme.
    fn lyapunov(&self, rec: &EnergyRecord) -> f64 {
        self.cfg.params.lambda * (rec.grad + rec.bulk) + rec.kinetic
    }

    pub fn run(&self) -> Result<MicroTrajectory> {
        if !(self.cfg.dt > 0.0) {
            return Err(Error::ValidationError("dt must be positive".into()));
        }
        let state0 = self.initial_state()?;
        self.run_from(state0)
    }

    pub fn run_from(&self, state0: MicroState) -> Result<MicroTrajectory> {
        let g = &self.grid;
        let n_steps = (self.cfg.t_end / self.cfg.dt).round().max(0.0) as usize;
        let mut state = state0;
        let mut records = Vec::with_capacity(n_steps + 1);
        let mut steps = Vec::with_capacity(n_steps);
        let mut snapshots = Vec::new();
        let rec0 = self.energy(&state, 0.0, 0.0);
        let m0 = rec0.mass;
        let e0 = self.lyapunov(&rec0);
        let energy_tol = self.cfg.energy_tol_factor * e0.abs().max(1e-30) + 1e-14;
        let mut max_abs_c = g.max_abs_cells(&state.c);
        let mut max_div = 0.0f64;
        let mut prev_lyap = e0;
        records.push(rec0);
        if self.cfg.snapshot_every > 0 {
            snapshots.push(state.clone());
        }
        let eps2 = self.epsilon * self.epsilon;
        let enforce_energy = self.cfg.energy_check
            && self.cfg.body_force.is_none()
            && self.cfg.force_sign == ForceSign::Negative;
        let mut prev_c: Option<Array2<f64>> = None;
        for k in 0..n_steps {
            let guess = prev_c.as_ref().map(|cp| {
                let mut gss = state.c.clone();
                gss.zip_mut_with(cp, |a, &b| *a = 2.0 * *a - b);
                gss
            });
            let (next, stat) = self.step_with_guess(&state, self.cfg.dt, guess.as_ref())?;
            prev_c = Some(state.c.clone());
            let diss_w = {
                let (wx, wy) = g.grad_to_faces(&next.w);
                self.cfg.dt * eps2 * g.face_dot(&wx, &wy, &wx, &wy)
            };
            let diss_u = {
                let (lu, lv) = (g.laplacian_u(&next.u), g.laplacian_v(&next.v));
                -self.cfg.dt * self.cfg.params.mu * eps2 * g.face_dot(&lu, &lv, &next.u, &next.v)
            };
            let rec = self.energy(&next, diss_w, diss_u);
            if (rec.mass - m0).abs() > self.cfg.mass_tol {
                return Err(Error::MassDrift {
                    t: rec.t,
                    delta: rec.mass - m0,
                });
            }
            let lyap = self.lyapunov(&rec);
            if enforce_energy && lyap > prev_lyap + energy_tol {
                return Err(Error::EnergyIncrease {
                    t: rec.t,
                    delta: lyap - prev_lyap,
                });
            }
            prev_lyap = lyap;
            max_abs_c = max_abs_c.max(g.max_abs_cells(&next.c));
            max_div = max_div.max(stat.div_after);
            records.push(rec);
            steps.push(stat);
            state = next;
            if self.cfg.snapshot_every > 0 && (k + 1) % self.cfg.snapshot_every == 0 {
                snapshots.push(state.clone());
            }
        }
        Ok(MicroTrajectory {
            records,
            steps,
            snapshots,
            final_state: state,
            max_abs_c,
            max_div,
        })
    }
}
