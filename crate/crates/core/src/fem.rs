//! Bilinear finite elements on the unit square, periodic in `x₁` and with
//! natural boundary conditions in `x₂`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Operator;
use crate::model::{build_model, orthonormal_modes, LinearAffineModel, LowRankState};
use crate::rng::Stream;

const GAUSS: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];
const CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];

/// Structured grid of `nx × ny` nodes. Nodes on `x₁ = 1` are identified with
/// those on `x₁ = 0`, leaving `(nx − 1)·ny` unknowns.
#[derive(Debug, Clone)]
pub struct QuadMesh {
    pub nx: usize,
    pub ny: usize,
    /// Coordinates of the free nodes, indexed like the unknowns.
    pub coords: Vec<[f64; 2]>,
    /// Unknown index of the four corners of every element, counter-clockwise
    /// from the lower-left one.
    pub elements: Vec<[usize; 4]>,
    /// Lower-left corner of every element.
    pub origins: Vec<[f64; 2]>,
    pub hx: f64,
    pub hy: f64,
}

impl QuadMesh {
    pub fn n_dofs(&self) -> usize {
        self.coords.len()
    }

    /// Unknown index of grid node `(i, j)` after periodic identification.
    pub fn dof(&self, i: usize, j: usize) -> usize {
        let period = self.nx - 1;
        j * period + (i % period)
    }

    /// Nodal interpolant of `g`.
    pub fn interpolate(&self, g: impl Fn(f64, f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.n_dofs(), self.coords.iter().map(|c| g(c[0], c[1])))
    }
}

pub fn build_mesh(nx: usize, ny: usize) -> Result<QuadMesh> {
    if nx < 3 || ny < 3 {
        return Err(Error::InvalidGrid(format!("need at least 3x3 nodes, got {nx}x{ny}")));
    }
    let hx = 1.0 / (nx - 1) as f64;
    let hy = 1.0 / (ny - 1) as f64;
    let mut mesh = QuadMesh { nx, ny, coords: Vec::new(), elements: Vec::new(), origins: Vec::new(), hx, hy };
    for j in 0..ny {
        for i in 0..nx - 1 {
            mesh.coords.push([i as f64 * hx, j as f64 * hy]);
        }
    }
    for ej in 0..ny - 1 {
        for ei in 0..nx - 1 {
            mesh.elements.push([
                mesh.dof(ei, ej),
                mesh.dof(ei + 1, ej),
                mesh.dof(ei + 1, ej + 1),
                mesh.dof(ei, ej + 1),
            ]);
            mesh.origins.push([ei as f64 * hx, ej as f64 * hy]);
        }
    }
    Ok(mesh)
}

fn shape(a: usize, xi: f64, eta: f64) -> f64 {
    let (ca, cb) = CORNERS[a];
    0.25 * (1.0 + ca * xi) * (1.0 + cb * eta)
}

/// Reference-coordinate gradient of shape function `a`.
fn shape_grad(a: usize, xi: f64, eta: f64) -> (f64, f64) {
    let (ca, cb) = CORNERS[a];
    (0.25 * ca * (1.0 + cb * eta), 0.25 * cb * (1.0 + ca * xi))
}

/// Assembled mass matrix and advection–diffusion operator.
#[derive(Debug, Clone)]
pub struct FemOperators {
    pub mass: Operator,
    pub a: Operator,
    pub diffusion: f64,
    pub velocity: [f64; 2],
}

/// `M_ij = ∫φᵢφⱼ` and `A_ij = −a∫∇φⱼ·∇φᵢ + ∫(b·∇φⱼ)φᵢ`, 2×2 Gauss per element.
pub fn assemble_operators(mesh: &QuadMesh, diffusion: f64, velocity: [f64; 2]) -> Result<FemOperators> {
    if !(diffusion > 0.0) {
        return Err(Error::AssemblyFailure(format!("diffusion must be positive, got {diffusion}")));
    }
    let (hx, hy) = (mesh.hx, mesh.hy);
    if !(hx > 0.0 && hy > 0.0) {
        return Err(Error::AssemblyFailure("degenerate element".into()));
    }
    let jac = 0.25 * hx * hy;
    let mut me = [[0.0; 4]; 4];
    let mut ae = [[0.0; 4]; 4];
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            for i in 0..4 {
                let ni = shape(i, xi, eta);
                let (gi_x, gi_y) = shape_grad(i, xi, eta);
                let (gi_x, gi_y) = (gi_x * 2.0 / hx, gi_y * 2.0 / hy);
                for j in 0..4 {
                    let nj = shape(j, xi, eta);
                    let (gj_x, gj_y) = shape_grad(j, xi, eta);
                    let (gj_x, gj_y) = (gj_x * 2.0 / hx, gj_y * 2.0 / hy);
                    me[i][j] += ni * nj * jac;
                    ae[i][j] += (-diffusion * (gj_x * gi_x + gj_y * gi_y)
                        + (velocity[0] * gj_x + velocity[1] * gj_y) * ni)
                        * jac;
                }
            }
        }
    }
    for i in 0..4 {
        for j in 0..i {
            me[i][j] = me[j][i];
        }
    }
    let d = mesh.n_dofs();
    let mut m = DMatrix::<f64>::zeros(d, d);
    let mut a = DMatrix::<f64>::zeros(d, d);
    for el in &mesh.elements {
        for i in 0..4 {
            for j in 0..4 {
                m[(el[i], el[j])] += me[i][j];
                a[(el[i], el[j])] += ae[i][j];
            }
        }
    }
    if m.iter().chain(a.iter()).any(|v| !v.is_finite()) {
        return Err(Error::AssemblyFailure("non-finite entry".into()));
    }
    Ok(FemOperators {
        mass: Operator::sparse_from_dense(&m),
        a: Operator::sparse_from_dense(&a),
        diffusion,
        velocity,
    })
}

/// Axis-aligned observation square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Square {
    pub center: [f64; 2],
    pub side: f64,
}

/// 5×5 squares of side 0.12 centered at `((2i+1)/10, (2j+1)/10)`, ordered
/// with `i` (along `x₁`) varying fastest.
pub fn default_squares() -> Vec<Square> {
    let mut out = Vec::with_capacity(25);
    for j in 0..5 {
        for i in 0..5 {
            out.push(Square { center: [(2 * i + 1) as f64 / 10.0, (2 * j + 1) as f64 / 10.0], side: 0.12 });
        }
    }
    out
}

/// `H(ℓ, j) = ∫ φⱼ χ_ℓ`, integrating each element's overlap with the square
/// exactly by Gauss quadrature on the clipped rectangle.
pub fn assemble_partial_observation(mesh: &QuadMesh, squares: &[Square]) -> Result<Operator> {
    let d = mesh.n_dofs();
    let mut h = DMatrix::zeros(squares.len(), d);
    for (l, sq) in squares.iter().enumerate() {
        let half = 0.5 * sq.side;
        let (sx0, sx1) = (sq.center[0] - half, sq.center[0] + half);
        let (sy0, sy1) = (sq.center[1] - half, sq.center[1] + half);
        let mut hit = false;
        for (el, o) in mesh.elements.iter().zip(&mesh.origins) {
            let x0 = sx0.max(o[0]);
            let x1 = sx1.min(o[0] + mesh.hx);
            let y0 = sy0.max(o[1]);
            let y1 = sy1.min(o[1] + mesh.hy);
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            hit = true;
            let w = 0.25 * (x1 - x0) * (y1 - y0);
            for &gx in &GAUSS {
                for &gy in &GAUSS {
                    let px = 0.5 * (x0 + x1) + 0.5 * (x1 - x0) * gx;
                    let py = 0.5 * (y0 + y1) + 0.5 * (y1 - y0) * gy;
                    let xi = 2.0 * (px - o[0]) / mesh.hx - 1.0;
                    let eta = 2.0 * (py - o[1]) / mesh.hy - 1.0;
                    for a in 0..4 {
                        h[(l, el[a])] += shape(a, xi, eta) * w;
                    }
                }
            }
        }
        if !hit {
            return Err(Error::EmptySquare(l));
        }
    }
    Ok(Operator::sparse_from_dense(&h))
}

/// `M ΔW̃` with `ΔW̃` i.i.d. `N(0, dt)` per node.
pub fn qwiener_increment(mass: &Operator, stream: &mut Stream, dt: f64) -> DVector<f64> {
    mass.mul_vec(&stream.increment(mass.ncols(), dt))
}

/// Observation operator of the pollution model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsMode {
    /// `h(u) = u`; `H = I` on the coefficients with adjoint `M`.
    Full,
    /// Square averages; `H = H_part` with adjoint `H_partᵀ`.
    Partial,
}

/// Coefficients of the pollution model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FemConfig {
    pub nodes: usize,
    pub diffusion: f64,
    pub velocity: [f64; 2],
    pub sigma: f64,
    pub gamma: f64,
    pub obs: ObsMode,
    pub squares: Vec<Square>,
}

impl Default for FemConfig {
    fn default() -> Self {
        Self {
            nodes: 21,
            diffusion: 0.1,
            velocity: [1.0, 0.0],
            sigma: 1e-5,
            gamma: 1e-2,
            obs: ObsMode::Full,
            squares: default_squares(),
        }
    }
}

/// Mesh, operators and filter model of the pollution problem.
#[derive(Debug, Clone)]
pub struct FemProblem {
    pub mesh: QuadMesh,
    pub ops: FemOperators,
    pub model: LinearAffineModel,
}

pub fn build_fem_problem(cfg: &FemConfig) -> Result<FemProblem> {
    let mesh = build_mesh(cfg.nodes, cfg.nodes)?;
    let ops = assemble_operators(&mesh, cfg.diffusion, cfg.velocity)?;
    let d = mesh.n_dofs();
    let (h, k) = match cfg.obs {
        ObsMode::Full => (Operator::identity(d), d),
        ObsMode::Partial => {
            let h = assemble_partial_observation(&mesh, &cfg.squares)?;
            (h, cfg.squares.len())
        }
    };
    let model = build_model(
        ops.a.clone(),
        DVector::zeros(d),
        Operator::scaled_identity(d, cfg.sigma),
        h,
        Operator::scaled_identity(k, cfg.gamma),
        Some(ops.mass.clone()),
    )?;
    let model = match cfg.obs {
        ObsMode::Full => model.with_observation_adjoint(ops.mass.clone())?,
        ObsMode::Partial => model,
    };
    Ok(FemProblem { mesh, ops, model })
}

/// Mean `exp(−(x₁−½)² − (x₂−½)²)` and fluctuation
/// `Σᵢ i⁻² sin(iπx₁)cos(iπx₂) ξᵢ`, `i = 1..rank`, with `M`-orthonormal modes.
pub fn fem_initial_condition(mesh: &QuadMesh, mass: &Operator, rank: usize) -> Result<LowRankState> {
    let u0 = mesh.interpolate(|x, y| (-(x - 0.5).powi(2) - (y - 0.5).powi(2)).exp());
    let pi = std::f64::consts::PI;
    let d = mesh.n_dofs();
    let mut raw = DMatrix::zeros(d, rank);
    for i in 0..rank {
        let f = (i + 1) as f64 * pi;
        raw.set_column(i, &mesh.interpolate(|x, y| (f * x).sin() * (f * y).cos()));
    }
    let coefficients: Vec<f64> = (1..=rank).map(|i| 1.0 / (i * i) as f64).collect();
    let (u, my) = orthonormal_modes(&raw, &coefficients, Some(mass))?;
    LowRankState::new(u0, u, my)
}

/// Writes an operator in matrix-market coordinate format.
pub fn write_matrix_market(path: impl AsRef<Path>, op: &Operator) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    let entries: Vec<(usize, usize, f64)> = match op {
        Operator::Sparse(m) => m.triplet_iter().map(|(i, j, v)| (i, j, *v)).collect(),
        Operator::Dense(m) => {
            let mut e = Vec::new();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if m[(i, j)] != 0.0 {
                        e.push((i, j, m[(i, j)]));
                    }
                }
            }
            e
        }
    };
    writeln!(out, "{} {} {}", op.nrows(), op.ncols(), entries.len())?;
    for (i, j, v) in entries {
        writeln!(out, "{} {} {v}", i + 1, j + 1)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn node_counts() {
        let m = build_mesh(21, 21).unwrap();
        assert_eq!(m.n_dofs(), 420);
        assert_eq!(m.elements.len(), 400);
        assert_eq!(build_mesh(3, 3).unwrap().n_dofs(), 6);
        assert!(matches!(build_mesh(2, 5), Err(Error::InvalidGrid(_))));
        assert_eq!(m.dof(20, 3), m.dof(0, 3));
    }

    #[test]
    fn mass_row_sums_and_symmetry() {
        let mesh = build_mesh(21, 21).unwrap();
        let ops = assemble_operators(&mesh, 0.1, [1.0, 0.0]).unwrap();
        let m = ops.mass.to_dense();
        assert_eq!(&m, &m.transpose());
        let h2 = mesh.hx * mesh.hy;
        let sums = m.column_sum();
        let interior = mesh.dof(5, 5);
        assert_relative_eq!(sums[interior], h2, max_relative = 1e-12);
        let edge = mesh.dof(5, 0);
        assert_relative_eq!(sums[edge], 0.5 * h2, max_relative = 1e-12);
        assert_relative_eq!(sums.sum(), 1.0, max_relative = 1e-12);
        assert!(m.clone().cholesky().is_some());
    }

    #[test]
    fn constants_are_steady() {
        let mesh = build_mesh(9, 7).unwrap();
        let ops = assemble_operators(&mesh, 0.1, [1.0, 0.0]).unwrap();
        let c = DVector::from_element(mesh.n_dofs(), 2.5);
        assert!(ops.a.mul_vec(&c).amax() < 1e-12);
        let no_adv = assemble_operators(&mesh, 0.3, [0.0, 0.0]).unwrap();
        assert!(no_adv.a.mul_vec(&c).amax() < 1e-12);
        assert!(matches!(assemble_operators(&mesh, 0.0, [1.0, 0.0]), Err(Error::AssemblyFailure(_))));
    }

    #[test]
    fn observation_rows() {
        let mesh = build_mesh(21, 21).unwrap();
        let ops = assemble_operators(&mesh, 0.1, [1.0, 0.0]).unwrap();
        let whole = Square { center: [0.5, 0.5], side: 1.0 };
        let h = assemble_partial_observation(&mesh, &[whole]).unwrap().to_dense();
        let sums = ops.mass.to_dense().column_sum();
        for j in 0..mesh.n_dofs() {
            assert_relative_eq!(h[(0, j)], sums[j], max_relative = 1e-12);
        }
        let hp = assemble_partial_observation(&mesh, &default_squares()).unwrap().to_dense();
        assert_eq!(hp.nrows(), 25);
        for l in 0..25 {
            assert_relative_eq!(hp.row(l).sum(), 0.12 * 0.12, max_relative = 1e-12);
        }
        let outside = Square { center: [5.0, 5.0], side: 0.1 };
        assert!(matches!(assemble_partial_observation(&mesh, &[outside]), Err(Error::EmptySquare(0))));
    }

    #[test]
    fn h_norm_of_constant() {
        let mesh = build_mesh(21, 21).unwrap();
        let ops = assemble_operators(&mesh, 0.1, [1.0, 0.0]).unwrap();
        let one = DVector::from_element(mesh.n_dofs(), 1.0);
        assert_relative_eq!(crate::metrics::h_norm(&ops.mass, &one), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn qwiener_zero_dt() {
        let mesh = build_mesh(5, 5).unwrap();
        let ops = assemble_operators(&mesh, 0.1, [1.0, 0.0]).unwrap();
        let v = qwiener_increment(&ops.mass, &mut Stream::from_seed(1), 0.0);
        assert_eq!(v, DVector::zeros(mesh.n_dofs()));
    }

    #[test]
    fn fem_ic_is_m_orthonormal() {
        let p = build_fem_problem(&FemConfig::default()).unwrap();
        let ic = fem_initial_condition(&p.mesh, &p.ops.mass, 12).unwrap();
        assert!(crate::dlr::stiefel_defect(&ic.u, Some(&p.ops.mass)) < 1e-10);
        assert_eq!(p.model.s.nrows(), 420);
        let s = p.model.s.to_dense();
        assert_relative_eq!(s, p.ops.mass.to_dense() * 100.0, max_relative = 1e-12);
    }
}
