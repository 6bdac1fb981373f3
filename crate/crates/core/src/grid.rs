//! Masked staggered grids and the discrete operators built on them.
//!
//! Scalars (order parameter, chemical potential, pressure) live at cell
//! centers, velocity components on faces (MAC arrangement). A boolean pore
//! mask disables solid cells; faces are active only when both adjacent
//! cells are pore cells. All divergence/gradient pairs below are exact
//! discrete adjoints of each other provided face fields vanish on inactive
//! faces, which every constructor here guarantees.

use ndarray::Array2;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Topology {
    /// Bounded box; faces on the domain boundary are inactive (no-slip / no-flux).
    Box,
    /// Periodic wrap-around in both directions (unit reference cell).
    Torus,
}

/// A 2-D cell-centered lattice with pore mask and derived face activity masks.
#[derive(Clone, Debug)]
pub struct Grid2 {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub topology: Topology,
    pub pore: Array2<bool>,
    /// x-normal faces; shape (nx+1, ny) on a box, (nx, ny) on a torus.
    pub u_active: Array2<bool>,
    /// y-normal faces; shape (nx, ny+1) on a box, (nx, ny) on a torus.
    pub v_active: Array2<bool>,
    pub n_pore: usize,
}

impl Grid2 {
    pub fn from_mask(pore: Array2<bool>, h: f64, topology: Topology) -> Self {
        let (nx, ny) = pore.dim();
        let (ux, uy, vx, vy) = match topology {
            Topology::Box => (nx + 1, ny, nx, ny + 1),
            Topology::Torus => (nx, ny, nx, ny),
        };
        let mut u_active = Array2::from_elem((ux, uy), false);
        for i in 0..ux {
            for j in 0..uy {
                let pair = match topology {
                    Topology::Box => {
                        if i == 0 || i == nx {
                            None
                        } else {
                            Some(((i - 1, j), (i, j)))
                        }
                    }
                    Topology::Torus => Some((((i + nx - 1) % nx, j), (i, j))),
                };
                if let Some((l, r)) = pair {
                    u_active[[i, j]] = pore[l] && pore[r];
                }
            }
        }
        let mut v_active = Array2::from_elem((vx, vy), false);
        for i in 0..vx {
            for j in 0..vy {
                let pair = match topology {
                    Topology::Box => {
                        if j == 0 || j == ny {
                            None
                        } else {
                            Some(((i, j - 1), (i, j)))
                        }
                    }
                    Topology::Torus => Some(((i, (j + ny - 1) % ny), (i, j))),
                };
                if let Some((b, t)) = pair {
                    v_active[[i, j]] = pore[b] && pore[t];
                }
            }
        }
        let n_pore = pore.iter().filter(|&&p| p).count();
        Grid2 {
            nx,
            ny,
            h,
            topology,
            pore,
            u_active,
            v_active,
            n_pore,
        }
    }

    /// Grid over the full box with no solid cells.
    pub fn full_box(nx: usize, ny: usize, h: f64) -> Self {
        Self::from_mask(Array2::from_elem((nx, ny), true), h, Topology::Box)
    }

    pub fn u_shape(&self) -> (usize, usize) {
        self.u_active.dim()
    }

    pub fn v_shape(&self) -> (usize, usize) {
        self.v_active.dim()
    }

    /// Cells adjacent to the x-normal face (i, j): (left, right).
    #[inline]
    pub fn u_cells(&self, i: usize, j: usize) -> Option<((usize, usize), (usize, usize))> {
        match self.topology {
            Topology::Box => {
                if i == 0 || i == self.nx {
                    None
                } else {
                    Some(((i - 1, j), (i, j)))
                }
            }
            Topology::Torus => Some((((i + self.nx - 1) % self.nx, j), (i, j))),
        }
    }

    /// Cells adjacent to the y-normal face (i, j): (bottom, top).
    #[inline]
    pub fn v_cells(&self, i: usize, j: usize) -> Option<((usize, usize), (usize, usize))> {
        match self.topology {
            Topology::Box => {
                if j == 0 || j == self.ny {
                    None
                } else {
                    Some(((i, j - 1), (i, j)))
                }
            }
            Topology::Torus => Some(((i, (j + self.ny - 1) % self.ny), (i, j))),
        }
    }

    /// Face indices bounding cell (i, j): (left u, right u, bottom v, top v).
    #[inline]
    pub fn cell_faces(&self, i: usize, j: usize) -> ((usize, usize), (usize, usize), (usize, usize), (usize, usize)) {
        match self.topology {
            Topology::Box => ((i, j), (i + 1, j), (i, j), (i, j + 1)),
            Topology::Torus => ((i, j), ((i + 1) % self.nx, j), (i, j), (i, (j + 1) % self.ny)),
        }
    }

    pub fn x_cell(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.h
    }

    pub fn y_cell(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.h
    }

    pub fn porosity(&self) -> f64 {
        self.n_pore as f64 / (self.nx * self.ny) as f64
    }

    pub fn zero_cells(&self) -> Array2<f64> {
        Array2::zeros((self.nx, self.ny))
    }

    pub fn zero_u(&self) -> Array2<f64> {
        Array2::zeros(self.u_shape())
    }

    pub fn zero_v(&self) -> Array2<f64> {
        Array2::zeros(self.v_shape())
    }

    /// Gradient of a cell field on faces; zero on inactive faces.
    pub fn grad_to_faces(&self, c: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut gx = self.zero_u();
        let mut gy = self.zero_v();
        let (ux, uy) = self.u_shape();
        for i in 0..ux {
            for j in 0..uy {
                if self.u_active[[i, j]] {
                    let (l, r) = self.u_cells(i, j).unwrap();
                    gx[[i, j]] = (c[r] - c[l]) / self.h;
                }
            }
        }
        let (vx, vy) = self.v_shape();
        for i in 0..vx {
            for j in 0..vy {
                if self.v_active[[i, j]] {
                    let (b, t) = self.v_cells(i, j).unwrap();
                    gy[[i, j]] = (c[t] - c[b]) / self.h;
                }
            }
        }
        (gx, gy)
    }

    /// Divergence of a face field at pore cells; zero on solid cells.
    /// Face fields must vanish on inactive faces.
    pub fn div_faces(&self, fx: &Array2<f64>, fy: &Array2<f64>) -> Array2<f64> {
        let mut d = self.zero_cells();
        for i in 0..self.nx {
            for j in 0..self.ny {
                if self.pore[[i, j]] {
                    let (l, r, b, t) = self.cell_faces(i, j);
                    d[[i, j]] = (fx[r] - fx[l] + fy[t] - fy[b]) / self.h;
                }
            }
        }
        d
    }

    /// div(kappa grad c) with a face-valued coefficient; homogeneous Neumann
    /// across inactive faces.
    pub fn div_kappa_grad(&self, kx: &Array2<f64>, ky: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
        let (mut gx, mut gy) = self.grad_to_faces(c);
        gx *= kx;
        gy *= ky;
        self.div_faces(&gx, &gy)
    }

    /// Masked Neumann Laplacian of a cell field.
    pub fn laplacian_scalar(&self, c: &Array2<f64>) -> Array2<f64> {
        let (gx, gy) = self.grad_to_faces(c);
        self.div_faces(&gx, &gy)
    }

    /// Cell field averaged to faces; zero on inactive faces.
    pub fn cell_to_faces(&self, c: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut cx = self.zero_u();
        let mut cy = self.zero_v();
        let (ux, uy) = self.u_shape();
        for i in 0..ux {
            for j in 0..uy {
                if self.u_active[[i, j]] {
                    let (l, r) = self.u_cells(i, j).unwrap();
                    cx[[i, j]] = 0.5 * (c[l] + c[r]);
                }
            }
        }
        let (vx, vy) = self.v_shape();
        for i in 0..vx {
            for j in 0..vy {
                if self.v_active[[i, j]] {
                    let (b, t) = self.v_cells(i, j).unwrap();
                    cy[[i, j]] = 0.5 * (c[b] + c[t]);
                }
            }
        }
        (cx, cy)
    }

    /// MAC velocity averaged to cell centers (componentwise); zero on solid.
    pub fn faces_to_cells(&self, u: &Array2<f64>, v: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut uc = self.zero_cells();
        let mut vc = self.zero_cells();
        for i in 0..self.nx {
            for j in 0..self.ny {
                if self.pore[[i, j]] {
                    let (l, r, b, t) = self.cell_faces(i, j);
                    uc[[i, j]] = 0.5 * (u[l] + u[r]);
                    vc[[i, j]] = 0.5 * (v[b] + v[t]);
                }
            }
        }
        (uc, vc)
    }

    /// Five-point Laplacian of the u velocity component on active faces.
    ///
    /// Neighbors along x sit on the no-slip line when inactive (value 0);
    /// neighbors along y are mirrored across the wall (ghost value -u).
    pub fn laplacian_u(&self, u: &Array2<f64>) -> Array2<f64> {
        let (ux, uy) = self.u_shape();
        let mut out = Array2::zeros((ux, uy));
        let h2 = self.h * self.h;
        for i in 0..ux {
            for j in 0..uy {
                if !self.u_active[[i, j]] {
                    continue;
                }
                let c = u[[i, j]];
                let mut acc = -4.0 * c;
                // x neighbors: same row of u-faces
                for di in [-1isize, 1] {
                    let ii = i as isize + di;
                    let val = match self.topology {
                        Topology::Box => {
                            if ii < 0 || ii > self.nx as isize {
                                0.0
                            } else {
                                let ii = ii as usize;
                                if self.u_active[[ii, j]] {
                                    u[[ii, j]]
                                } else {
                                    0.0
                                }
                            }
                        }
                        Topology::Torus => {
                            let ii = ((ii + self.nx as isize) % self.nx as isize) as usize;
                            if self.u_active[[ii, j]] {
                                u[[ii, j]]
                            } else {
                                0.0
                            }
                        }
                    };
                    acc += val;
                }
                // y neighbors: mirror across walls
                for dj in [-1isize, 1] {
                    let jj = j as isize + dj;
                    let val = match self.topology {
                        Topology::Box => {
                            if jj < 0 || jj >= uy as isize {
                                -c
                            } else {
                                let jj = jj as usize;
                                if self.u_active[[i, jj]] {
                                    u[[i, jj]]
                                } else {
                                    -c
                                }
                            }
                        }
                        Topology::Torus => {
                            let jj = ((jj + uy as isize) % uy as isize) as usize;
                            if self.u_active[[i, jj]] {
                                u[[i, jj]]
                            } else {
                                -c
                            }
                        }
                    };
                    acc += val;
                }
                out[[i, j]] = acc / h2;
            }
        }
        out
    }

    /// Five-point Laplacian of the v velocity component on active faces.
    pub fn laplacian_v(&self, v: &Array2<f64>) -> Array2<f64> {
        let (vx, vy) = self.v_shape();
        let mut out = Array2::zeros((vx, vy));
        let h2 = self.h * self.h;
        for i in 0..vx {
            for j in 0..vy {
                if !self.v_active[[i, j]] {
                    continue;
                }
                let c = v[[i, j]];
                let mut acc = -4.0 * c;
                // y neighbors: same column of v-faces (walls lie on face lines)
                for dj in [-1isize, 1] {
                    let jj = j as isize + dj;
                    let val = match self.topology {
                        Topology::Box => {
                            if jj < 0 || jj > self.ny as isize {
                                0.0
                            } else {
                                let jj = jj as usize;
                                if self.v_active[[i, jj]] {
                                    v[[i, jj]]
                                } else {
                                    0.0
                                }
                            }
                        }
                        Topology::Torus => {
                            let jj = ((jj + self.ny as isize) % self.ny as isize) as usize;
                            if self.v_active[[i, jj]] {
                                v[[i, jj]]
                            } else {
                                0.0
                            }
                        }
                    };
                    acc += val;
                }
                // x neighbors: mirror across walls
                for di in [-1isize, 1] {
                    let ii = i as isize + di;
                    let val = match self.topology {
                        Topology::Box => {
                            if ii < 0 || ii >= vx as isize {
                                -c
                            } else {
                                let ii = ii as usize;
                                if self.v_active[[ii, j]] {
                                    v[[ii, j]]
                                } else {
                                    -c
                                }
                            }
                        }
                        Topology::Torus => {
                            let ii = ((ii + vx as isize) % vx as isize) as usize;
                            if self.v_active[[ii, j]] {
                                v[[ii, j]]
                            } else {
                                -c
                            }
                        }
                    };
                    acc += val;
                }
                out[[i, j]] = acc / h2;
            }
        }
        out
    }

    /// Mean of a cell field over pore cells (compensated sum).
    pub fn pore_mean(&self, c: &Array2<f64>) -> f64 {
        let s = neumaier_sum(
            self.pore
                .indexed_iter()
                .filter(|(_, &p)| p)
                .map(|(ix, _)| c[ix]),
        );
        s / self.n_pore as f64
    }

    /// Integral of a cell field over pore cells.
    pub fn pore_integral(&self, c: &Array2<f64>) -> f64 {
        let s = neumaier_sum(
            self.pore
                .indexed_iter()
                .filter(|(_, &p)| p)
                .map(|(ix, _)| c[ix]),
        );
        s * self.h * self.h
    }

    /// Subtract the pore mean in place.
    pub fn project_zero_mean(&self, c: &mut Array2<f64>) {
        let m = self.pore_mean(c);
        for ((i, j), v) in c.indexed_iter_mut() {
            if self.pore[[i, j]] {
                *v -= m;
            }
        }
    }

    /// Discrete L2 norm over pore cells.
    pub fn l2_cells(&self, c: &Array2<f64>) -> f64 {
        let s = neumaier_sum(
            self.pore
                .indexed_iter()
                .filter(|(_, &p)| p)
                .map(|(ix, _)| c[ix] * c[ix]),
        );
        (s * self.h * self.h).sqrt()
    }

    /// Discrete L2 norm of a MAC velocity (both components, active faces).
    pub fn l2_faces(&self, u: &Array2<f64>, v: &Array2<f64>) -> f64 {
        self.face_dot(u, v, u, v).sqrt()
    }

    /// Inner product of two MAC velocities over active faces, weighted by h^2.
    pub fn face_dot(&self, ua: &Array2<f64>, va: &Array2<f64>, ub: &Array2<f64>, vb: &Array2<f64>) -> f64 {
        let su = neumaier_sum(
            self.u_active
                .indexed_iter()
                .filter(|(_, &a)| a)
                .map(|(ix, _)| ua[ix] * ub[ix]),
        );
        let sv = neumaier_sum(
            self.v_active
                .indexed_iter()
                .filter(|(_, &a)| a)
                .map(|(ix, _)| va[ix] * vb[ix]),
        );
        (su + sv) * self.h * self.h
    }

    /// Inner product of two cell fields over pore cells, weighted by h^2.
    pub fn cell_dot(&self, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let s = neumaier_sum(
            self.pore
                .indexed_iter()
                .filter(|(_, &p)| p)
                .map(|(ix, _)| a[ix] * b[ix]),
        );
        s * self.h * self.h
    }

    /// Max |.| over pore cells.
    pub fn max_abs_cells(&self, c: &Array2<f64>) -> f64 {
        self.pore
            .indexed_iter()
            .filter(|(_, &p)| p)
            .map(|(ix, _)| c[ix].abs())
            .fold(0.0, f64::max)
    }

    /// Max |.| over active faces of both components.
    pub fn max_abs_faces(&self, u: &Array2<f64>, v: &Array2<f64>) -> f64 {
        let mu = self
            .u_active
            .indexed_iter()
            .filter(|(_, &a)| a)
            .map(|(ix, _)| u[ix].abs())
            .fold(0.0, f64::max);
        let mv = self
            .v_active
            .indexed_iter()
            .filter(|(_, &a)| a)
            .map(|(ix, _)| v[ix].abs())
            .fold(0.0, f64::max);
        mu.max(mv)
    }

    /// Fused d*x - lap(x) on pore cells (single pass, no temporaries).
    pub fn helmholtz_apply(&self, d: &Array2<f64>, x: &Array2<f64>, out: &mut Array2<f64>) {
        let h2 = self.h * self.h;
        let (nx, ny) = (self.nx, self.ny);
        let wrap = self.topology == Topology::Torus;
        for i in 0..nx {
            for j in 0..ny {
                if !self.pore[[i, j]] {
                    out[[i, j]] = 0.0;
                    continue;
                }
                let xc = x[[i, j]];
                let mut lap = 0.0;
                let nb = |ii: isize, jj: isize, lap: &mut f64| {
                    let (pi, pj) = if wrap {
                        (
                            ((ii + nx as isize) % nx as isize) as usize,
                            ((jj + ny as isize) % ny as isize) as usize,
                        )
                    } else {
                        if ii < 0 || jj < 0 || ii >= nx as isize || jj >= ny as isize {
                            return;
                        }
                        (ii as usize, jj as usize)
                    };
                    if self.pore[[pi, pj]] {
                        *lap += x[[pi, pj]] - xc;
                    }
                };
                nb(i as isize - 1, j as isize, &mut lap);
                nb(i as isize + 1, j as isize, &mut lap);
                nb(i as isize, j as isize - 1, &mut lap);
                nb(i as isize, j as isize + 1, &mut lap);
                out[[i, j]] = d[[i, j]] * xc - lap / h2;
            }
        }
    }

    /// Fused <d*a - lap(a), b> over pore cells, weighted by h^2.
    pub fn helmholtz_dot(&self, d: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let h2 = self.h * self.h;
        let (nx, ny) = (self.nx, self.ny);
        let wrap = self.topology == Topology::Torus;
        let mut acc = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                if !self.pore[[i, j]] {
                    continue;
                }
                let ac = a[[i, j]];
                let mut lap = 0.0;
                let nb = |ii: isize, jj: isize, lap: &mut f64| {
                    let (pi, pj) = if wrap {
                        (
                            ((ii + nx as isize) % nx as isize) as usize,
                            ((jj + ny as isize) % ny as isize) as usize,
                        )
                    } else {
                        if ii < 0 || jj < 0 || ii >= nx as isize || jj >= ny as isize {
                            return;
                        }
                        (ii as usize, jj as usize)
                    };
                    if self.pore[[pi, pj]] {
                        *lap += a[[pi, pj]] - ac;
                    }
                };
                nb(i as isize - 1, j as isize, &mut lap);
                nb(i as isize + 1, j as isize, &mut lap);
                nb(i as isize, j as isize - 1, &mut lap);
                nb(i as isize, j as isize + 1, &mut lap);
                acc += (d[[i, j]] * ac - lap / h2) * b[[i, j]];
            }
        }
        acc * h2
    }

    /// Fused div(kappa grad x) on pore cells with face coefficients.
    pub fn div_kappa_grad_into(
        &self,
        kx: &Array2<f64>,
        ky: &Array2<f64>,
        x: &Array2<f64>,
        out: &mut Array2<f64>,
    ) {
        let h2 = self.h * self.h;
        for i in 0..self.nx {
            for j in 0..self.ny {
                if !self.pore[[i, j]] {
                    out[[i, j]] = 0.0;
                    continue;
                }
                let xc = x[[i, j]];
                let (l, r, b, t) = self.cell_faces(i, j);
                let mut acc = 0.0;
                if self.u_active[l] {
                    let (lc, _) = self.u_cells(l.0, l.1).unwrap();
                    acc += kx[l] * (x[lc] - xc);
                }
                if self.u_active[r] {
                    let (_, rc) = self.u_cells(r.0, r.1).unwrap();
                    acc += kx[r] * (x[rc] - xc);
                }
                if self.v_active[b] {
                    let (bc, _) = self.v_cells(b.0, b.1).unwrap();
                    acc += ky[b] * (x[bc] - xc);
                }
                if self.v_active[t] {
                    let (_, tc) = self.v_cells(t.0, t.1).unwrap();
                    acc += ky[t] * (x[tc] - xc);
                }
                out[[i, j]] = acc / h2;
            }
        }
    }

    /// Fused -lap(x) on pore cells.
    pub fn neg_laplacian_into(&self, x: &Array2<f64>, out: &mut Array2<f64>) {
        let h2 = self.h * self.h;
        let (nx, ny) = (self.nx, self.ny);
        let wrap = self.topology == Topology::Torus;
        for i in 0..nx {
            for j in 0..ny {
                if !self.pore[[i, j]] {
                    out[[i, j]] = 0.0;
                    continue;
                }
                let xc = x[[i, j]];
                let mut lap = 0.0;
                let nb = |ii: isize, jj: isize, lap: &mut f64| {
                    let (pi, pj) = if wrap {
                        (
                            ((ii + nx as isize) % nx as isize) as usize,
                            ((jj + ny as isize) % ny as isize) as usize,
                        )
                    } else {
                        if ii < 0 || jj < 0 || ii >= nx as isize || jj >= ny as isize {
                            return;
                        }
                        (ii as usize, jj as usize)
                    };
                    if self.pore[[pi, pj]] {
                        *lap += x[[pi, pj]] - xc;
                    }
                };
                nb(i as isize - 1, j as isize, &mut lap);
                nb(i as isize + 1, j as isize, &mut lap);
                nb(i as isize, j as isize - 1, &mut lap);
                nb(i as isize, j as isize + 1, &mut lap);
                out[[i, j]] = -lap / h2;
            }
        }
    }

    /// Zero out values on inactive faces (enforces the face-field invariant).
    pub fn mask_faces(&self, u: &mut Array2<f64>, v: &mut Array2<f64>) {
        for (ix, a) in self.u_active.indexed_iter() {
            if !a {
                u[ix] = 0.0;
            }
        }
        for (ix, a) in self.v_active.indexed_iter() {
            if !a {
                v[ix] = 0.0;
            }
        }
    }
}

/// Flat neighbor lists for the hot CG kernels. Arrays are addressed by
/// row-major linear index; each pore-cell record points at its pore
/// neighbors together with the flat index of the shared face (u-faces
/// first, then v-faces), so face-coefficient operators need no index
/// arithmetic in the inner loop.
#[derive(Clone, Debug)]
pub struct CellStencil {
    pub cells: Vec<u32>,
    pub offsets: Vec<u32>,
    /// (neighbor cell linear index, shared face flat index)
    pub nbrs: Vec<(u32, u32)>,
    pub n_u_faces: usize,
    pub h2: f64,
}

impl Grid2 {
    pub fn cell_stencil(&self) -> CellStencil {
        let ny = self.ny;
        let (_, uy) = self.u_shape();
        let u_len = self.u_active.len();
        let lin = |i: usize, j: usize| (i * ny + j) as u32;
        let u_flat = |i: usize, j: usize| (i * uy + j) as u32;
        let (_, vy) = self.v_shape();
        let v_flat = |i: usize, j: usize| (u_len + i * vy + j) as u32;
        let mut cells = Vec::new();
        let mut offsets = vec![0u32];
        let mut nbrs = Vec::new();
        for i in 0..self.nx {
            for j in 0..self.ny {
                if !self.pore[[i, j]] {
                    continue;
                }
                cells.push(lin(i, j));
                let (l, r, b, t) = self.cell_faces(i, j);
                if self.u_active[l] {
                    let (lc, _) = self.u_cells(l.0, l.1).unwrap();
                    nbrs.push((lin(lc.0, lc.1), u_flat(l.0, l.1)));
                }
                if self.u_active[r] {
                    let (_, rc) = self.u_cells(r.0, r.1).unwrap();
                    nbrs.push((lin(rc.0, rc.1), u_flat(r.0, r.1)));
                }
                if self.v_active[b] {
                    let (bc, _) = self.v_cells(b.0, b.1).unwrap();
                    nbrs.push((lin(bc.0, bc.1), v_flat(b.0, b.1)));
                }
                if self.v_active[t] {
                    let (_, tc) = self.v_cells(t.0, t.1).unwrap();
                    nbrs.push((lin(tc.0, tc.1), v_flat(t.0, t.1)));
                }
                offsets.push(nbrs.len() as u32);
            }
        }
        CellStencil {
            cells,
            offsets,
            nbrs,
            n_u_faces: u_len,
            h2: self.h * self.h,
        }
    }
}

impl CellStencil {
    /// out = d*x - lap(x) on pore cells (flat slices, unit coefficients).
    pub fn helmholtz_apply(&self, d: &[f64], x: &[f64], out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = 0.0;
        }
        let inv_h2 = 1.0 / self.h2;
        for (k, &c) in self.cells.iter().enumerate() {
            let c = c as usize;
            let xc = x[c];
            let lo = self.offsets[k] as usize;
            let hi = self.offsets[k + 1] as usize;
            let mut lap = 0.0;
            for &(nb, _) in &self.nbrs[lo..hi] {
                lap += x[nb as usize] - xc;
            }
            out[c] = d[c] * xc - lap * inv_h2;
        }
    }

    /// <d*a - lap(a), b> over pore cells, weighted by h^2.
    pub fn helmholtz_dot(&self, d: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let inv_h2 = 1.0 / self.h2;
        let mut acc = 0.0;
        for (k, &c) in self.cells.iter().enumerate() {
            let c = c as usize;
            let ac = a[c];
            let lo = self.offsets[k] as usize;
            let hi = self.offsets[k + 1] as usize;
            let mut lap = 0.0;
            for &(nb, _) in &self.nbrs[lo..hi] {
                lap += a[nb as usize] - ac;
            }
            acc += (d[c] * ac - lap * inv_h2) * b[c];
        }
        acc * self.h2
    }

    /// out = div(kappa grad x) with flat face coefficients (u then v).
    pub fn div_kappa_grad(&self, kappa_flat: &[f64], x: &[f64], out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = 0.0;
        }
        let inv_h2 = 1.0 / self.h2;
        for (k, &c) in self.cells.iter().enumerate() {
            let c = c as usize;
            let xc = x[c];
            let lo = self.offsets[k] as usize;
            let hi = self.offsets[k + 1] as usize;
            let mut acc = 0.0;
            for &(nb, f) in &self.nbrs[lo..hi] {
                acc += kappa_flat[f as usize] * (x[nb as usize] - xc);
            }
            out[c] = acc * inv_h2;
        }
    }

    /// Max |.| over pore cells of a flat field.
    pub fn max_abs(&self, x: &[f64]) -> f64 {
        self.cells
            .iter()
            .map(|&c| x[c as usize].abs())
            .fold(0.0, f64::max)
    }

    /// Plain h^2-weighted dot over pore cells.
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &c in &self.cells {
            acc += a[c as usize] * b[c as usize];
        }
        acc * self.h2
    }

    /// out = -lap(x) on pore cells.
    pub fn neg_laplacian(&self, x: &[f64], out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = 0.0;
        }
        let inv_h2 = 1.0 / self.h2;
        for (k, &c) in self.cells.iter().enumerate() {
            let c = c as usize;
            let xc = x[c];
            let lo = self.offsets[k] as usize;
            let hi = self.offsets[k + 1] as usize;
            let mut lap = 0.0;
            for &(nb, _) in &self.nbrs[lo..hi] {
                lap += x[nb as usize] - xc;
            }
            out[c] = -lap * inv_h2;
        }
    }
}

/// Compensated (Neumaier) summation; order-stable against cancellation.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(items: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in items {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Face-connectivity check of a boolean mask (non-periodic flood fill).
pub fn connectivity_check(mask: &Array2<bool>) -> bool {
    let (nx, ny) = mask.dim();
    let total = mask.iter().filter(|&&p| p).count();
    if total == 0 {
        return false;
    }
    let start = mask
        .indexed_iter()
        .find(|(_, &p)| p)
        .map(|(ix, _)| ix)
        .unwrap();
    let mut seen = Array2::from_elem((nx, ny), false);
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0usize;
    while let Some((i, j)) = stack.pop() {
        count += 1;
        let push = |ii: usize, jj: usize, seen: &mut Array2<bool>, stack: &mut Vec<(usize, usize)>| {
            if mask[[ii, jj]] && !seen[[ii, jj]] {
                seen[[ii, jj]] = true;
                stack.push((ii, jj));
            }
        };
        if i > 0 {
            push(i - 1, j, &mut seen, &mut stack);
        }
        if i + 1 < nx {
            push(i + 1, j, &mut seen, &mut stack);
        }
        if j > 0 {
            push(i, j - 1, &mut seen, &mut stack);
        }
        if j + 1 < ny {
            push(i, j + 1, &mut seen, &mut stack);
        }
    }
    count == total
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(topology: Topology, seed: u64) -> Grid2 {
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Random small solid blob away from the boundary so the pore stays connected.
        let mut mask = Array2::from_elem((n, n), true);
        let ci = rng.gen_range(3..n - 5);
        let cj = rng.gen_range(3..n - 5);
        for i in ci..ci + 2 {
            for j in cj..cj + 2 {
                mask[[i, j]] = false;
            }
        }
        Grid2::from_mask(mask, 1.0 / n as f64, topology)
    }

    fn random_cell_field(g: &Grid2, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut c = g.zero_cells();
        for ((i, j), v) in c.indexed_iter_mut() {
            if g.pore[[i, j]] {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        c
    }

    fn random_face_field(g: &Grid2, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
        let mut u = g.zero_u();
        let mut v = g.zero_v();
        for (ix, a) in g.u_active.indexed_iter() {
            if *a {
                u[ix] = rng.gen_range(-1.0..1.0);
            }
        }
        for (ix, a) in g.v_active.indexed_iter() {
            if *a {
                v[ix] = rng.gen_range(-1.0..1.0);
            }
        }
        (u, v)
    }

    #[test]
    fn div_grad_adjointness() {
        for topology in [Topology::Box, Topology::Torus] {
            for seed in 0..5 {
                let g = random_grid(topology, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let q = random_cell_field(&g, &mut rng);
                let (fu, fv) = random_face_field(&g, &mut rng);
                let divf = g.div_faces(&fu, &fv);
                let (gu, gv) = g.grad_to_faces(&q);
                let lhs = g.cell_dot(&divf, &q);
                let rhs = -g.face_dot(&fu, &fv, &gu, &gv);
                assert!(
                    (lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()),
                    "{topology:?}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn divergence_telescopes_to_zero() {
        for topology in [Topology::Box, Topology::Torus] {
            let g = random_grid(topology, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let (fu, fv) = random_face_field(&g, &mut rng);
            let d = g.div_faces(&fu, &fv);
            let total = g.pore_integral(&d);
            assert!(total.abs() < 1e-13, "{topology:?}: {total}");
        }
    }

    #[test]
    fn velocity_laplacians_symmetric() {
        for topology in [Topology::Box, Topology::Torus] {
            let g = random_grid(topology, 11);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let (ua, va) = random_face_field(&g, &mut rng);
            let (ub, vb) = random_face_field(&g, &mut rng);
            let (la_u, la_v) = (g.laplacian_u(&ua), g.laplacian_v(&va));
            let (lb_u, lb_v) = (g.laplacian_u(&ub), g.laplacian_v(&vb));
            let lhs = g.face_dot(&la_u, &la_v, &ub, &vb);
            let rhs = g.face_dot(&ua, &va, &lb_u, &lb_v);
            assert!(
                (lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()),
                "{topology:?}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn velocity_laplacian_negative_semidefinite() {
        for topology in [Topology::Box, Topology::Torus] {
            let g = random_grid(topology, 13);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let (u, v) = random_face_field(&g, &mut rng);
            let (lu, lv) = (g.laplacian_u(&u), g.laplacian_v(&v));
            let q = g.face_dot(&lu, &lv, &u, &v);
            assert!(q <= 1e-12, "{topology:?}: {q}");
        }
    }

    #[test]
    fn scalar_laplacian_of_constant_vanishes() {
        let g = random_grid(Topology::Box, 17);
        let c = Array2::from_elem((g.nx, g.ny), 3.25);
        let l = g.laplacian_scalar(&c);
        assert!(g.max_abs_cells(&l) == 0.0);
    }

    #[test]
    fn fused_kernels_match_composed_operators() {
        for topology in [Topology::Box, Topology::Torus] {
            let g = random_grid(topology, 23);
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let x = random_cell_field(&g, &mut rng);
            let b = random_cell_field(&g, &mut rng);
            let d = random_cell_field(&g, &mut rng).mapv(|v| v.abs() + 0.5);

            let lap = g.laplacian_scalar(&x);
            let mut composed = &d * &x;
            composed -= &lap;
            for ((i, j), v) in composed.indexed_iter_mut() {
                if !g.pore[[i, j]] {
                    *v = 0.0;
                }
            }
            let mut fused = g.zero_cells();
            g.helmholtz_apply(&d, &x, &mut fused);
            for (a, c) in composed.iter().zip(fused.iter()) {
                assert!((a - c).abs() < 1e-12, "{topology:?}");
            }
            let dot_fused = g.helmholtz_dot(&d, &x, &b);
            let dot_composed = g.cell_dot(&composed, &b);
            assert!((dot_fused - dot_composed).abs() < 1e-12 * dot_composed.abs().max(1.0));

            let mut neg = g.zero_cells();
            g.neg_laplacian_into(&x, &mut neg);
            for ((i, j), v) in neg.indexed_iter() {
                let expect = if g.pore[[i, j]] { -lap[[i, j]] } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
            }

            let mut kx = g.zero_u();
            let mut ky = g.zero_v();
            for (ix, a) in g.u_active.indexed_iter() {
                if *a {
                    kx[ix] = 1.0 + 0.3 * (ix.0 as f64).sin().abs();
                }
            }
            for (ix, a) in g.v_active.indexed_iter() {
                if *a {
                    ky[ix] = 1.0 + 0.2 * (ix.1 as f64).cos().abs();
                }
            }
            let slow = g.div_kappa_grad(&kx, &ky, &x);
            let mut fast = g.zero_cells();
            g.div_kappa_grad_into(&kx, &ky, &x, &mut fast);
            for (a, c) in slow.iter().zip(fast.iter()) {
                assert!((a - c).abs() < 1e-11, "{topology:?}");
            }
        }
    }

    #[test]
    fn connectivity_detects_isolated_cell() {
        let mut mask = Array2::from_elem((8, 8), false);
        mask[[1, 1]] = true;
        mask[[4, 4]] = true;
        assert!(!connectivity_check(&mask));
        let all = Array2::from_elem((8, 8), true);
        assert!(connectivity_check(&all));
    }
}
