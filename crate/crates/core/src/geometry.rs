//! Unit reference cell with solid inclusion and its periodic tiling into
//! the perforated domain.
//!
//! The indicator is sampled at cell centers (midpoint rule) so it lines up
//! with the cell-centered scalar fields of the solvers. The scale
//! parameter is restricted to eps = 1/N with n_macro = N * n_cell, which
//! makes the tiling, the porosity count, and the unfolding operator exact.

use ndarray::{Array2, ArrayD, Dimension, IxDyn};

use crate::error::{Error, Result};
use crate::grid::{connectivity_check, Grid2, Topology};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Inclusion {
    None,
    Disc { radius: f64 },
    Square { half_width: f64 },
}

impl Inclusion {
    /// Largest distance from the cell center (0.5, ...) still inside the solid.
    fn extent(&self) -> f64 {
        match *self {
            Inclusion::None => 0.0,
            Inclusion::Disc { radius } => radius,
            Inclusion::Square { half_width } => half_width,
        }
    }

    /// Point-in-solid test in cell coordinates.
    fn contains(&self, x: &[f64]) -> bool {
        match *self {
            Inclusion::None => false,
            Inclusion::Disc { radius } => {
                x.iter().map(|xi| (xi - 0.5) * (xi - 0.5)).sum::<f64>() <= radius * radius
            }
            Inclusion::Square { half_width } => {
                x.iter().all(|xi| (xi - 0.5).abs() <= half_width)
            }
        }
    }
}

/// The unit reference cell Y = (0,1)^d split into pore and solid parts.
#[derive(Clone, Debug)]
pub struct UnitCell {
    pub dim: usize,
    pub n_cell: usize,
    pub inclusion: Inclusion,
    /// Indicator of the pore part: 1 on pore, 0 on solid; shape [n_cell; dim].
    pub chi: ArrayD<u8>,
    pub porosity: f64,
}

pub fn build_unit_cell(dim: usize, n_cell: usize, inclusion: Inclusion) -> Result<UnitCell> {
    if dim != 2 && dim != 3 {
        return Err(Error::ParamError(format!("dim must be 2 or 3 (got {dim})")));
    }
    if n_cell < 8 {
        return Err(Error::ParamError(format!("n_cell must be at least 8 (got {n_cell})")));
    }
    let margin = 1.0 / n_cell as f64;
    if inclusion.extent() > 0.0 && inclusion.extent() + margin > 0.5 {
        return Err(Error::InclusionTouchesBoundary);
    }

    let shape = vec![n_cell; dim];
    let mut chi = ArrayD::from_elem(IxDyn(&shape), 1u8);
    let mut x = vec![0.0; dim];
    for (idx, v) in chi.indexed_iter_mut() {
        for k in 0..dim {
            x[k] = (idx[k] as f64 + 0.5) / n_cell as f64;
        }
        if inclusion.contains(&x) {
            *v = 0;
        }
    }

    // Solid cells must keep one full cell of clearance from the cell boundary.
    for (idx, &v) in chi.indexed_iter() {
        if v == 0 && (0..dim).any(|k| idx[k] == 0 || idx[k] == n_cell - 1) {
            return Err(Error::InclusionTouchesBoundary);
        }
    }

    if !connectivity_nd(&chi) {
        return Err(Error::DisconnectedPore);
    }

    let pore_count = chi.iter().filter(|&&v| v == 1).count();
    let porosity = pore_count as f64 / (n_cell as f64).powi(dim as i32);
    Ok(UnitCell {
        dim,
        n_cell,
        inclusion,
        chi,
        porosity,
    })
}

/// Build a cell from an explicit pore mask. Skips the interior-margin
/// check: geometries such as a solid slab wrap across the cell boundary
/// and are perfectly valid on the discrete torus, but cannot be expressed
/// through the centered shape descriptors.
pub fn unit_cell_from_mask(dim: usize, n_cell: usize, mask: Array2<bool>) -> Result<UnitCell> {
    if dim != 2 {
        return Err(Error::ParamError("mask construction is 2-D only".into()));
    }
    if mask.dim() != (n_cell, n_cell) {
        return Err(Error::ParamError(format!(
            "mask shape {:?} does not match n_cell {n_cell}",
            mask.dim()
        )));
    }
    if !connectivity_check(&mask) {
        return Err(Error::DisconnectedPore);
    }
    let chi = ArrayD::from_shape_fn(IxDyn(&[n_cell, n_cell]), |ix| u8::from(mask[[ix[0], ix[1]]]));
    let pore_count = chi.iter().filter(|&&v| v == 1).count();
    let porosity = pore_count as f64 / (n_cell * n_cell) as f64;
    Ok(UnitCell {
        dim,
        n_cell,
        inclusion: Inclusion::None,
        chi,
        porosity,
    })
}

impl UnitCell {
    /// 2-D pore mask view; panics for d = 3 cells (only 2-D kernels exist).
    pub fn mask2(&self) -> Array2<bool> {
        assert_eq!(self.dim, 2, "2-D kernels require a 2-D cell");
        let n = self.n_cell;
        Array2::from_shape_fn((n, n), |(i, j)| self.chi[IxDyn(&[i, j])] == 1)
    }

    /// Solver grid on the discrete torus spanned by this cell.
    pub fn torus_grid(&self) -> Grid2 {
        Grid2::from_mask(self.mask2(), 1.0 / self.n_cell as f64, Topology::Torus)
    }

    pub fn has_solid(&self) -> bool {
        self.chi.iter().any(|&v| v == 0)
    }
}

/// The perforated domain: an N x N tiling of the unit cell over (0,1)^2.
#[derive(Clone, Debug)]
pub struct PerforatedGrid {
    pub cell: UnitCell,
    pub epsilon: f64,
    pub n_blocks: usize,
    pub n_macro: usize,
    pub chi_eps: Array2<u8>,
    pub h: f64,
}

pub fn tile_domain(cell: &UnitCell, epsilon: f64, n_blocks: usize) -> Result<PerforatedGrid> {
    if cell.dim != 2 {
        return Err(Error::ValidationError(
            "tiling kernels are implemented for d = 2 only".into(),
        ));
    }
    if n_blocks == 0 || (epsilon * n_blocks as f64 - 1.0).abs() > 1e-12 {
        return Err(Error::NonUnitFractionEpsilon(epsilon));
    }
    let n_cell = cell.n_cell;
    let n_macro = n_blocks * n_cell;
    let chi_eps = Array2::from_shape_fn((n_macro, n_macro), |(i, j)| {
        cell.chi[IxDyn(&[i % n_cell, j % n_cell])]
    });
    if !connectivity_check(&chi_eps.map(|&v| v == 1)) {
        return Err(Error::DisconnectedPore);
    }
    Ok(PerforatedGrid {
        cell: cell.clone(),
        epsilon: 1.0 / n_blocks as f64,
        n_blocks,
        n_macro,
        chi_eps,
        h: 1.0 / n_macro as f64,
    })
}

/// Convenience constructor from the block count alone.
pub fn tile_domain_n(cell: &UnitCell, n_blocks: usize) -> Result<PerforatedGrid> {
    tile_domain(cell, 1.0 / n_blocks as f64, n_blocks)
}

impl PerforatedGrid {
    pub fn porosity(&self) -> f64 {
        let pore = self.chi_eps.iter().filter(|&&v| v == 1).count();
        pore as f64 / (self.n_macro * self.n_macro) as f64
    }

    /// Solver grid over the bounded perforated domain.
    pub fn solver_grid(&self) -> Grid2 {
        Grid2::from_mask(self.chi_eps.map(|&v| v == 1), self.h, Topology::Box)
    }
}

/// Face-connectivity flood fill for a d-dimensional indicator.
fn connectivity_nd(chi: &ArrayD<u8>) -> bool {
    let shape: Vec<usize> = chi.shape().to_vec();
    let total: usize = chi.iter().filter(|&&v| v == 1).count();
    if total == 0 {
        return false;
    }
    let start = chi
        .indexed_iter()
        .find(|(_, &v)| v == 1)
        .map(|(ix, _)| ix.slice().to_vec())
        .unwrap();
    let mut seen = ArrayD::from_elem(IxDyn(&shape), false);
    seen[IxDyn(&start)] = true;
    let mut stack = vec![start];
    let mut count = 0usize;
    while let Some(idx) = stack.pop() {
        count += 1;
        for k in 0..shape.len() {
            for step in [-1isize, 1] {
                let pos = idx[k] as isize + step;
                if pos < 0 || pos >= shape[k] as isize {
                    continue;
                }
                let mut nb = idx.clone();
                nb[k] = pos as usize;
                let key = IxDyn(&nb);
                if chi[&key] == 1 && !seen[&key] {
                    seen[key] = true;
                    stack.push(nb);
                }
            }
        }
    }
    count == total
}

/// Write a mask as an ASCII PGM-style grid: magic, dims, then 0/1 values
/// row-major (one row of cells per line).
pub fn write_mask_pgm<W: std::io::Write>(w: &mut W, mask: &Array2<u8>) -> std::io::Result<()> {
    let (nx, ny) = mask.dim();
    writeln!(w, "P1")?;
    writeln!(w, "{} {}", nx, ny)?;
    for j in 0..ny {
        let row: Vec<String> = (0..nx).map(|i| mask[[i, j]].to_string()).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_cell_has_unit_porosity() {
        let c = build_unit_cell(2, 64, Inclusion::None).unwrap();
        assert_eq!(c.porosity, 1.0);
        assert!(!c.has_solid());
    }

    #[test]
    fn disc_porosity_close_to_analytic() {
        let c = build_unit_cell(2, 64, Inclusion::Disc { radius: 0.25 }).unwrap();
        let exact = 1.0 - std::f64::consts::PI * 0.25 * 0.25;
        assert!(
            (c.porosity - exact).abs() <= 2.0 / 64.0,
            "porosity {} vs {}",
            c.porosity,
            exact
        );
    }

    #[test]
    fn aligned_square_porosity_exact() {
        let c = build_unit_cell(2, 64, Inclusion::Square { half_width: 0.25 }).unwrap();
        assert_eq!(c.porosity, 0.75);
    }

    #[test]
    fn disc_cell_is_connected() {
        let c = build_unit_cell(2, 64, Inclusion::Disc { radius: 0.25 }).unwrap();
        assert!(connectivity_check(&c.mask2()));
    }

    #[test]
    fn oversized_inclusion_rejected() {
        assert!(matches!(
            build_unit_cell(2, 64, Inclusion::Disc { radius: 0.495 }),
            Err(Error::InclusionTouchesBoundary)
        ));
        assert!(matches!(
            build_unit_cell(2, 16, Inclusion::Square { half_width: 0.45 }),
            Err(Error::InclusionTouchesBoundary)
        ));
    }

    #[test]
    fn three_dimensional_cell_constructs() {
        let c = build_unit_cell(3, 8, Inclusion::Disc { radius: 0.3 }).unwrap();
        assert_eq!(c.chi.shape(), &[8, 8, 8]);
        assert!(c.porosity > 0.85 && c.porosity < 1.0);
    }

    #[test]
    fn construction_is_deterministic() {
        let a = build_unit_cell(2, 32, Inclusion::Disc { radius: 0.3 }).unwrap();
        let b = build_unit_cell(2, 32, Inclusion::Disc { radius: 0.3 }).unwrap();
        assert_eq!(a.chi, b.chi);
    }

    #[test]
    fn identity_tiling() {
        let c = build_unit_cell(2, 16, Inclusion::Disc { radius: 0.25 }).unwrap();
        let g = tile_domain(&c, 1.0, 1).unwrap();
        assert_eq!(g.chi_eps, c.chi.clone().into_dimensionality().unwrap());
    }

    #[test]
    fn tiling_preserves_porosity_exactly() {
        let c = build_unit_cell(2, 16, Inclusion::Square { half_width: 0.25 }).unwrap();
        let g = tile_domain_n(&c, 4).unwrap();
        assert_eq!(g.porosity(), c.porosity);
    }

    #[test]
    fn tiling_matches_fractional_evaluation() {
        let c = build_unit_cell(2, 16, Inclusion::Disc { radius: 0.3 }).unwrap();
        let g = tile_domain_n(&c, 2).unwrap();
        // chi_eps(x) = chi(frac(x / eps)) at every lattice point.
        for i in 0..g.n_macro {
            for j in 0..g.n_macro {
                let x = (i as f64 + 0.5) * g.h;
                let y = (j as f64 + 0.5) * g.h;
                let fx = (x / g.epsilon).fract();
                let fy = (y / g.epsilon).fract();
                let ci = (fx * c.n_cell as f64).floor() as usize;
                let cj = (fy * c.n_cell as f64).floor() as usize;
                assert_eq!(g.chi_eps[[i, j]], c.chi[IxDyn(&[ci, cj])], "at ({i}, {j})");
            }
        }
    }

    #[test]
    fn non_unit_fraction_epsilon_rejected() {
        let c = build_unit_cell(2, 16, Inclusion::None).unwrap();
        assert!(matches!(
            tile_domain(&c, 0.3, 3),
            Err(Error::NonUnitFractionEpsilon(_))
        ));
    }

    #[test]
    fn pgm_export_roundtrip_header() {
        let c = build_unit_cell(2, 8, Inclusion::None).unwrap();
        let mask: Array2<u8> = c.chi.clone().into_dimensionality().unwrap();
        let mut buf = Vec::new();
        write_mask_pgm(&mut buf, &mask).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("P1\n8 8\n"));
        assert_eq!(text.lines().count(), 2 + 8);
    }
}
