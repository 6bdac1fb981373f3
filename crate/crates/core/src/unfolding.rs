//! Discrete unfolding operator, extension of pore fields, and two-scale
//! convergence metrics.
//!
//! With eps = 1/N and n_macro = N * n_cell the unfolding is a pure index
//! re-blocking: no interpolation enters, so the integral, norm and
//! gradient identities of the operator hold to machine precision. The
//! extension fills solid cells harmonically with the adjacent pore values
//! as Dirichlet data, which is linear and empirically carries an
//! eps-uniform gradient bound.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::geometry::PerforatedGrid;
use crate::grid::{neumaier_sum, Grid2, Topology};
use crate::linalg::cg;

/// A discrete function of (macro block, cell position): u(x, y) sampled on
/// the product lattice. Layout: data[[kx, ky, mx, my]].
#[derive(Clone, Debug)]
pub struct TwoScaleField {
    pub n_blocks: usize,
    pub n_cell: usize,
    pub data: Array4<f64>,
}

impl TwoScaleField {
    pub fn from_fn<F: Fn((f64, f64), (f64, f64)) -> f64>(
        n_blocks: usize,
        n_cell: usize,
        f: F,
    ) -> Self {
        let eps = 1.0 / n_blocks as f64;
        let data = Array4::from_shape_fn((n_blocks, n_blocks, n_cell, n_cell), |(kx, ky, mx, my)| {
            let x = ((kx as f64 + 0.5) * eps, (ky as f64 + 0.5) * eps);
            let y = (
                (mx as f64 + 0.5) / n_cell as f64,
                (my as f64 + 0.5) / n_cell as f64,
            );
            f(x, y)
        });
        TwoScaleField {
            n_blocks,
            n_cell,
            data,
        }
    }

    fn weight(&self) -> f64 {
        let h = 1.0 / (self.n_blocks * self.n_cell) as f64;
        h * h
    }

    /// Product-lattice integral over Omega x Y (|Y| = 1).
    pub fn integral(&self) -> f64 {
        neumaier_sum(self.data.iter().copied()) * self.weight()
    }

    /// Discrete L2(Omega x Y) norm.
    pub fn norm_l2(&self) -> f64 {
        (neumaier_sum(self.data.iter().map(|v| v * v)) * self.weight()).sqrt()
    }

    /// Discrete L2 distance to another field on the same lattice.
    pub fn distance_l2(&self, other: &TwoScaleField) -> Result<f64> {
        if self.n_blocks != other.n_blocks || self.n_cell != other.n_cell {
            return Err(Error::MisalignedGrids(format!(
                "({}, {}) vs ({}, {})",
                self.n_blocks, self.n_cell, other.n_blocks, other.n_cell
            )));
        }
        let s = neumaier_sum(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b) * (a - b)),
        );
        Ok((s * self.weight()).sqrt())
    }
}

/// The unfolding map: field(eps [x/eps] + eps y) realized as exact index
/// re-blocking of an aligned lattice field.
pub fn unfold(field: &Array2<f64>, n_blocks: usize, n_cell: usize) -> Result<TwoScaleField> {
    let n_macro = n_blocks * n_cell;
    if field.dim() != (n_macro, n_macro) {
        return Err(Error::MisalignedGrids(format!(
            "field shape {:?}, expected ({n_macro}, {n_macro}) = N n_cell with N = {n_blocks}",
            field.dim()
        )));
    }
    let data = Array4::from_shape_fn((n_blocks, n_blocks, n_cell, n_cell), |(kx, ky, mx, my)| {
        field[[kx * n_cell + mx, ky * n_cell + my]]
    });
    Ok(TwoScaleField {
        n_blocks,
        n_cell,
        data,
    })
}

/// Inverse of [`unfold`] on aligned lattices (the re-blocking is a bijection).
pub fn fold(ts: &TwoScaleField) -> Array2<f64> {
    let n_macro = ts.n_blocks * ts.n_cell;
    Array2::from_shape_fn((n_macro, n_macro), |(i, j)| {
        ts.data[[i / ts.n_cell, j / ts.n_cell, i % ts.n_cell, j % ts.n_cell]]
    })
}

/// Extend a pore-cell field to the whole box by harmonic fill: solid
/// values solve the discrete Laplace equation with the adjacent pore
/// values as Dirichlet data. Pore values are returned unchanged.
pub fn extend(pore_field: &Array2<f64>, grid: &Grid2) -> Result<Array2<f64>> {
    assert_eq!(grid.topology, Topology::Box);
    if grid.n_pore == grid.nx * grid.ny {
        return Ok(pore_field.clone());
    }
    let (nx, ny) = (grid.nx, grid.ny);
    let neighbors = |i: usize, j: usize| {
        let mut out = [(usize::MAX, usize::MAX); 4];
        let mut n = 0;
        if i > 0 {
            out[n] = (i - 1, j);
            n += 1;
        }
        if i + 1 < nx {
            out[n] = (i + 1, j);
            n += 1;
        }
        if j > 0 {
            out[n] = (i, j - 1);
            n += 1;
        }
        if j + 1 < ny {
            out[n] = (i, j + 1);
            n += 1;
        }
        (out, n)
    };

    // SPD system on the solid cells: deg * v - sum over solid neighbors.
    let apply = |x: &Array2<f64>| -> Array2<f64> {
        let mut y = Array2::zeros((nx, ny));
        for i in 0..nx {
            for j in 0..ny {
                if grid.pore[[i, j]] {
                    continue;
                }
                let (nb, n) = neighbors(i, j);
                let mut acc = n as f64 * x[[i, j]];
                for &(ii, jj) in &nb[..n] {
                    if !grid.pore[[ii, jj]] {
                        acc -= x[[ii, jj]];
                    }
                }
                y[[i, j]] = acc;
            }
        }
        y
    };
    let mut b = Array2::zeros((nx, ny));
    let mut scale = 0.0f64;
    for i in 0..nx {
        for j in 0..ny {
            if grid.pore[[i, j]] {
                scale = scale.max(pore_field[[i, j]].abs());
                continue;
            }
            let (nb, n) = neighbors(i, j);
            for &(ii, jj) in &nb[..n] {
                if grid.pore[[ii, jj]] {
                    b[[i, j]] += pore_field[[ii, jj]];
                }
            }
        }
    }
    let dot = |a: &Array2<f64>, c: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                if !grid.pore[[i, j]] {
                    s += a[[i, j]] * c[[i, j]];
                }
            }
        }
        s
    };
    let norm = |a: &Array2<f64>| {
        let mut m = 0.0f64;
        for i in 0..nx {
            for j in 0..ny {
                if !grid.pore[[i, j]] {
                    m = m.max(a[[i, j]].abs());
                }
            }
        }
        m
    };
    let (fill, _) = cg(
        apply,
        &b,
        Array2::zeros((nx, ny)),
        dot,
        norm,
        1e-13 * scale.max(1.0),
        200_000,
    )?;
    let mut out = pore_field.clone();
    for i in 0..nx {
        for j in 0..ny {
            if !grid.pore[[i, j]] {
                out[[i, j]] = fill[[i, j]];
            }
        }
    }
    Ok(out)
}

/// L2(Omega x Y) distance between the unfolded (extended) pore field and a
/// two-scale limit on the matching product lattice.
pub fn two_scale_distance(
    micro_field: &Array2<f64>,
    limit: &TwoScaleField,
    pg: &PerforatedGrid,
) -> Result<f64> {
    let grid = pg.solver_grid();
    let extended = extend(micro_field, &grid)?;
    let ts = unfold(&extended, pg.n_blocks, pg.cell.n_cell)?;
    ts.distance_l2(limit)
}

#[derive(Clone, Debug)]
pub struct ProductConvergenceRow {
    pub eps: f64,
    pub integral: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct ProductConvergenceReport {
    pub limit_integral: f64,
    pub rows: Vec<ProductConvergenceRow>,
    /// Error at the finest eps smaller than at the coarsest.
    pub converging: bool,
}

/// Check int u^eps v^eps phi -> int int u0 v0 phi along an eps sequence.
/// Fields are full-domain lattice samples; phi is a fixed test function.
pub fn product_convergence_check<F: Fn(f64, f64) -> f64>(
    sequence: &[(f64, Array2<f64>, Array2<f64>)],
    phi: F,
    limit_integral: f64,
) -> ProductConvergenceReport {
    let mut rows = Vec::with_capacity(sequence.len());
    for (eps, u, v) in sequence {
        let n = u.dim().0;
        let h = 1.0 / n as f64;
        let integral = neumaier_sum(u.indexed_iter().map(|((i, j), uv)| {
            let x = (i as f64 + 0.5) * h;
            let y = (j as f64 + 0.5) * h;
            uv * v[[i, j]] * phi(x, y)
        })) * h
            * h;
        rows.push(ProductConvergenceRow {
            eps: *eps,
            integral,
            error: (integral - limit_integral).abs(),
        });
    }
    let converging = rows.len() < 2 || rows.last().unwrap().error <= rows[0].error;
    ProductConvergenceReport {
        limit_integral,
        rows,
        converging,
    }
}

/// Least-squares slope of ln(err) against ln(eps): the observed order.
pub fn observed_order(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|(_, d)| d.max(1e-300).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_unit_cell, tile_domain_n, Inclusion};

    fn grid_of(n_cell: usize, blocks: usize, r: f64) -> PerforatedGrid {
        let inc = if r > 0.0 {
            Inclusion::Disc { radius: r }
        } else {
            Inclusion::None
        };
        let cell = build_unit_cell(2, n_cell, inc).unwrap();
        tile_domain_n(&cell, blocks).unwrap()
    }

    #[test]
    fn constant_unfolds_to_constant() {
        let f = Array2::from_elem((32, 32), 2.5);
        let ts = unfold(&f, 4, 8).unwrap();
        assert!(ts.data.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn misaligned_shapes_rejected() {
        let f = Array2::from_elem((30, 30), 1.0);
        assert!(matches!(unfold(&f, 4, 8), Err(Error::MisalignedGrids(_))));
    }

    #[test]
    fn integral_and_norm_preserved_exactly() {
        let n_cell = 16;
        let blocks = 4;
        let n = n_cell * blocks;
        let h = 1.0 / n as f64;
        let f = Array2::from_shape_fn((n, n), |(i, j)| {
            ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.4
        });
        let ts = unfold(&f, blocks, n_cell).unwrap();
        let direct = neumaier_sum(f.iter().copied()) * h * h;
        let unfolded = ts.integral();
        assert!(
            (direct - unfolded).abs() <= 1e-13 * direct.abs().max(1.0),
            "{direct} vs {unfolded}"
        );
        let norm_direct = (neumaier_sum(f.iter().map(|v| v * v)) * h * h).sqrt();
        let norm_unfolded = ts.norm_l2();
        assert!((norm_direct - norm_unfolded).abs() <= 1e-13 * norm_direct.max(1.0));
    }

    #[test]
    fn unfold_fold_is_identity() {
        let n_cell = 8;
        let blocks = 4;
        let n = n_cell * blocks;
        let f = Array2::from_shape_fn((n, n), |(i, j)| (i as f64).sin() + (j as f64) * 0.01);
        let ts = unfold(&f, blocks, n_cell).unwrap();
        let back = fold(&ts);
        assert_eq!(f, back);
    }

    #[test]
    fn gradient_identity_exact_for_power_of_two_scales() {
        // grad_y (T u) = eps T (grad_x u) on indices interior to each block;
        // both sides scale by powers of two, so equality is bitwise.
        let n_cell = 16;
        let blocks = 4;
        let n = n_cell * blocks;
        let eps = 1.0 / blocks as f64;
        let h = 1.0 / n as f64;
        let f = Array2::from_shape_fn((n, n), |(i, j)| {
            ((i as f64 + 0.3) * 0.11).sin() * ((j as f64) * 0.07).cos()
        });
        let ts = unfold(&f, blocks, n_cell).unwrap();
        for kx in 0..blocks {
            for ky in 0..blocks {
                for mx in 0..n_cell - 1 {
                    for my in 0..n_cell {
                        let lhs = (ts.data[[kx, ky, mx + 1, my]] - ts.data[[kx, ky, mx, my]])
                            * n_cell as f64;
                        let gi = kx * n_cell + mx;
                        let gj = ky * n_cell + my;
                        let rhs = eps * ((f[[gi + 1, gj]] - f[[gi, gj]]) / h);
                        assert_eq!(lhs, rhs, "at block ({kx},{ky}) cell ({mx},{my})");
                    }
                }
            }
        }
    }

    #[test]
    fn extend_preserves_constants_and_pore_values() {
        let pg = grid_of(16, 2, 0.25);
        let g = pg.solver_grid();
        let c = g.pore.map(|&p| if p { 3.0 } else { 0.0 });
        let e = extend(&c, &g).unwrap();
        assert!(e.iter().all(|&v| (v - 3.0).abs() < 1e-10));
    }

    #[test]
    fn extend_is_linear() {
        let pg = grid_of(16, 2, 0.25);
        let g = pg.solver_grid();
        let mk = |seed: f64| {
            let mut f = g.zero_cells();
            for ((i, j), v) in f.indexed_iter_mut() {
                if g.pore[[i, j]] {
                    *v = ((i as f64) * seed).sin() + (j as f64) * 0.01;
                }
            }
            f
        };
        let f1 = mk(0.31);
        let f2 = mk(0.17);
        let mut combo = f1.clone();
        combo.zip_mut_with(&f2, |a, &b| *a = 2.0 * *a - 0.5 * b);
        let e = extend(&combo, &g).unwrap();
        let e1 = extend(&f1, &g).unwrap();
        let e2 = extend(&f2, &g).unwrap();
        for ((i, j), &v) in e.indexed_iter() {
            assert!(
                (v - (2.0 * e1[[i, j]] - 0.5 * e2[[i, j]])).abs() < 1e-9,
                "at ({i},{j})"
            );
        }
    }

    #[test]
    fn extension_gradient_bound_stable_in_eps() {
        // ||grad extend(f)|| <= C ||grad f||_pore with C stable across eps.
        let mut ratios = Vec::new();
        for blocks in [2usize, 4, 8] {
            let pg = grid_of(16, blocks, 0.25);
            let g = pg.solver_grid();
            let mut f = g.zero_cells();
            for ((i, j), v) in f.indexed_iter_mut() {
                if g.pore[[i, j]] {
                    let x = g.x_cell(i);
                    let y = g.y_cell(j);
                    *v = (2.0 * std::f64::consts::PI * x).sin() + y * y;
                }
            }
            let e = extend(&f, &g).unwrap();
            let full = Grid2::full_box(g.nx, g.ny, g.h);
            let (gx, gy) = full.grad_to_faces(&e);
            let num = full.face_dot(&gx, &gy, &gx, &gy).sqrt();
            let (px, py) = g.grad_to_faces(&f);
            let den = g.face_dot(&px, &py, &px, &py).sqrt();
            ratios.push(num / den);
        }
        let cmax = ratios.iter().cloned().fold(0.0f64, f64::max);
        let cmin = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(cmax < 2.0, "extension constant too large: {ratios:?}");
        assert!(cmax / cmin < 1.5, "extension constant unstable: {ratios:?}");
    }

    #[test]
    fn distance_to_own_unfolding_is_zero() {
        let pg = grid_of(16, 4, 0.0);
        let n = pg.n_macro;
        let f = Array2::from_shape_fn((n, n), |(i, j)| (i + 2 * j) as f64 * 0.01);
        let ts = unfold(&f, pg.n_blocks, pg.cell.n_cell).unwrap();
        let d = two_scale_distance(&f, &ts, &pg).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn manufactured_two_scale_rate() {
        // u^eps(x) = a(x) b(x/eps) against a(x) b(y): order about 1 in eps.
        let n_cell = 16;
        let pi = std::f64::consts::PI;
        let a = |x: f64, y: f64| (2.0 * pi * x).sin() * (pi * y).cos() + 2.0;
        let b = |y1: f64, y2: f64| (2.0 * pi * y1).cos() * (2.0 * pi * y2).sin() + 0.5;
        let mut pairs = Vec::new();
        for blocks in [2usize, 4, 8, 16] {
            let pg = grid_of(n_cell, blocks, 0.0);
            let n = pg.n_macro;
            let h = pg.h;
            let eps = pg.epsilon;
            let field = Array2::from_shape_fn((n, n), |(i, j)| {
                let x = (i as f64 + 0.5) * h;
                let y = (j as f64 + 0.5) * h;
                a(x, y) * b((x / eps).fract(), (y / eps).fract())
            });
            let limit = TwoScaleField::from_fn(blocks, n_cell, |x, y| a(x.0, x.1) * b(y.0, y.1));
            let d = two_scale_distance(&field, &limit, &pg).unwrap();
            pairs.push((eps, d));
        }
        let order = observed_order(&pairs);
        assert!(order >= 0.9, "observed order {order} from {pairs:?}");
    }

    #[test]
    fn product_check_constant_case_is_exact() {
        let n = 32;
        let ones = Array2::from_elem((n, n), 1.0);
        let phi = |x: f64, y: f64| x + y;
        let h = 1.0 / n as f64;
        let exact: f64 = neumaier_sum((0..n).flat_map(|i| {
            (0..n).map(move |j| ((i as f64 + 0.5) * h) + ((j as f64 + 0.5) * h))
        })) * h
            * h;
        let report =
            product_convergence_check(&[(0.5, ones.clone(), ones.clone())], phi, exact);
        assert!(report.rows[0].error <= 1e-14);
    }

    #[test]
    fn product_check_manufactured_sequence_converges() {
        let pi = std::f64::consts::PI;
        let a = |x: f64| (pi * x).sin() + 1.5;
        let c = |x: f64| (2.0 * pi * x).cos() + 0.3;
        let bb = |y: f64| (2.0 * pi * y).sin() + 1.0;
        let dd = |y: f64| (4.0 * pi * y).cos() + 0.7;
        let phi = |x: f64, _y: f64| x * (1.0 - x);
        // limit: int a c phi dx * int b d dy with the separable test below.
        let quad = |f: &dyn Fn(f64) -> f64| -> f64 {
            let m = 40_000;
            (0..m).map(|k| f((k as f64 + 0.5) / m as f64)).sum::<f64>() / m as f64
        };
        let limit = quad(&|x| a(x) * c(x) * phi(x, 0.0)) * quad(&|y| bb(y) * dd(y));
        let mut seq = Vec::new();
        for blocks in [2usize, 4, 8, 16] {
            let n = blocks * 16;
            let h = 1.0 / n as f64;
            let eps = 1.0 / blocks as f64;
            let u = Array2::from_shape_fn((n, n), |(i, _)| {
                let x = (i as f64 + 0.5) * h;
                a(x) * bb((x / eps).fract())
            });
            let v = Array2::from_shape_fn((n, n), |(i, _)| {
                let x = (i as f64 + 0.5) * h;
                c(x) * dd((x / eps).fract())
            });
            seq.push((eps, u, v));
        }
        let report = product_convergence_check(&seq, phi, limit);
        assert!(report.converging, "{:?}", report.rows);
        assert!(report.rows.last().unwrap().error < 0.05 * report.rows[0].error.max(1e-3));
    }
}
