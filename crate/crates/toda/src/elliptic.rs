//! P1 finite elements on the disk: stiffness/mass assembly (including the
//! boundary-lens contributions), a cached direct solver for the Neumann
//! Laplacian with exact mean-zero handling, H¹ inner products, the coupled
//! quadratic form Q, and the Krylov helpers used by the nonlinear solvers.
//!
//! The mean constraint is treated with Lagrange-multiplier semantics: the
//! solved system is `K u + λ w = F`, `wᵀ u = 0` with `w_i = ∫φ_i`, so
//! `-Δu = f - f̄`, `∫u = 0` regardless of load compatibility (λ returns the
//! load mean). The factorized matrix is the grounded `K + α e₀e₀ᵀ`, which is
//! SPD and keeps the skyline profile; multiplier and grounding corrections are
//! eliminated exactly through two cached auxiliary solves.

use crate::geometry::{Surface, Vec2};
use nalgebra::DVector;
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("factorization breakdown at pivot {0} (value {1:.3e})")]
    Breakdown(usize, f64),
    #[error("iterative solver stalled: {0}")]
    Stalled(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Invalid(String),
}

/// Nodal P1 field. `mean_zero` marks fields produced by the Neumann solver
/// (|∫u| ≤ 1e-10·‖u‖ is enforced there).
#[derive(Debug, Clone)]
pub struct Field {
    pub values: DVector<f64>,
    pub mean_zero: bool,
}

impl Field {
    pub fn new(values: DVector<f64>) -> Self {
        Self { values, mean_zero: false }
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: DVector::zeros(n), mean_zero: true }
    }
}

/// A pair of fields (the two Toda components).
#[derive(Debug, Clone)]
pub struct PairField {
    pub f1: Field,
    pub f2: Field,
}

/// Compressed sparse rows, symmetric matrices stored with full pattern.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub data: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(n: usize, triplets: &mut Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::new();
        let mut data = Vec::new();
        let mut k = 0;
        for row in 0..n as u32 {
            while k < triplets.len() && triplets[k].0 == row {
                let col = triplets[k].1;
                let mut v = triplets[k].2;
                k += 1;
                while k < triplets.len() && triplets[k].0 == row && triplets[k].1 == col {
                    v += triplets[k].2;
                    k += 1;
                }
                indices.push(col);
                data.push(v);
            }
            indptr[row as usize + 1] = indices.len();
        }
        Csr { n, indptr, indices, data }
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                s += self.data[k] * x[self.indices[k] as usize];
            }
            y[i] = s;
        }
        y
    }

    pub fn bilinear(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            for k in self.indptr[i]..self.indptr[i + 1] {
                s += ui * self.data[k] * v[self.indices[k] as usize];
            }
        }
        s
    }
}

/// Reverse Cuthill–McKee ordering from a pseudo-peripheral start node.
fn rcm_order(csr: &Csr) -> Vec<u32> {
    let n = csr.n;
    let degree = |i: usize| csr.indptr[i + 1] - csr.indptr[i];
    // Pseudo-peripheral node by double BFS.
    let bfs_far = |start: u32| -> u32 {
        let mut seen = vec![false; n];
        let mut q = vec![start];
        seen[start as usize] = true;
        let mut last = start;
        while !q.is_empty() {
            let mut next = Vec::new();
            for &i in &q {
                last = i;
                for k in csr.indptr[i as usize]..csr.indptr[i as usize + 1] {
                    let j = csr.indices[k];
                    if !seen[j as usize] {
                        seen[j as usize] = true;
                        next.push(j);
                    }
                }
            }
            q = next;
        }
        last
    };
    let s0 = (0..n).min_by_key(|&i| degree(i)).unwrap_or(0) as u32;
    let start = bfs_far(bfs_far(s0));

    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(start);
    seen[start as usize] = true;
    while order.len() < n {
        if let Some(i) = queue.pop_front() {
            order.push(i);
            let mut nb: Vec<u32> = (csr.indptr[i as usize]..csr.indptr[i as usize + 1])
                .map(|k| csr.indices[k])
                .filter(|&j| !seen[j as usize])
                .collect();
            nb.sort_unstable_by_key(|&j| degree(j as usize));
            for j in nb {
                seen[j as usize] = true;
                queue.push_back(j);
            }
        } else {
            // Disconnected component (should not happen on a mesh).
            let i = (0..n).find(|&i| !seen[i]).unwrap() as u32;
            seen[i as usize] = true;
            queue.push_back(i);
        }
    }
    order.reverse();
    order
}

/// Symmetric profile (skyline) LDLᵀ factorization without pivoting.
struct Skyline {
    n: usize,
    fnz: Vec<usize>,
    offset: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl Skyline {
    /// Builds from a CSR matrix already in the target ordering.
    fn factor(csr: &Csr) -> Result<Self, SolveError> {
        let n = csr.n;
        let mut fnz = vec![0usize; n];
        for i in 0..n {
            let mut first = i;
            for k in csr.indptr[i]..csr.indptr[i + 1] {
                first = first.min(csr.indices[k] as usize);
            }
            fnz[i] = first;
        }
        let mut offset = vec![0usize; n + 1];
        for i in 0..n {
            offset[i + 1] = offset[i] + (i - fnz[i]);
        }
        let mut vals = vec![0.0; offset[n]];
        let mut diag = vec![0.0; n];
        for i in 0..n {
            for k in csr.indptr[i]..csr.indptr[i + 1] {
                let j = csr.indices[k] as usize;
                if j < i {
                    vals[offset[i] + (j - fnz[i])] = csr.data[k];
                } else if j == i {
                    diag[i] = csr.data[k];
                }
            }
        }
        // Row-oriented LDLᵀ inside the profile.
        for i in 0..n {
            let fi = fnz[i];
            for j in fi..i {
                let fj = fnz[j];
                let lo = fi.max(fj);
                let mut s = vals[offset[i] + (j - fi)];
                for k in lo..j {
                    s -= vals[offset[i] + (k - fi)] * diag[k] * vals[offset[j] + (k - fj)];
                }
                vals[offset[i] + (j - fi)] = s / diag[j];
            }
            let mut d = diag[i];
            for k in fi..i {
                let l = vals[offset[i] + (k - fi)];
                d -= l * l * diag[k];
            }
            if d.abs() < 1e-300 || !d.is_finite() {
                return Err(SolveError::Breakdown(i, d));
            }
            diag[i] = d;
        }
        Ok(Skyline { n, fnz, offset, vals, diag })
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        for i in 0..self.n {
            let fi = self.fnz[i];
            let mut s = x[i];
            for k in fi..i {
                s -= self.vals[self.offset[i] + (k - fi)] * x[k];
            }
            x[i] = s;
        }
        for i in 0..self.n {
            x[i] /= self.diag[i];
        }
        for i in (0..self.n).rev() {
            let fi = self.fnz[i];
            let xi = x[i];
            for k in fi..i {
                x[k] -= self.vals[self.offset[i] + (k - fi)] * xi;
            }
        }
        x
    }
}

/// Assembled discretization plus cached factorization for the mean-zero
/// Neumann Laplacian on a surface.
pub struct NeumannSolver {
    surf: Arc<Surface>,
    stiffness: Csr,
    mass: Csr,
    iperm: Vec<u32>,
    factor: Skyline,
    /// K̂⁻¹ w and K̂⁻¹ e₀ in original ordering.
    aux_w: DVector<f64>,
    aux_e: DVector<f64>,
    alpha: f64,
    i0: usize,
    area: f64,
}

fn tri_grads(a: Vec2, b: Vec2, c: Vec2) -> ([Vec2; 3], f64) {
    let area = 0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x));
    let g = [
        Vec2::new(b.y - c.y, c.x - b.x) / (2.0 * area),
        Vec2::new(c.y - a.y, a.x - c.x) / (2.0 * area),
        Vec2::new(a.y - b.y, b.x - a.x) / (2.0 * area),
    ];
    (g, area)
}

impl NeumannSolver {
    pub fn new(surf: Arc<Surface>) -> Result<Self, SolveError> {
        let mesh = surf.mesh();
        let n = mesh.nodes.len();
        let mut kt: Vec<(u32, u32, f64)> = Vec::with_capacity(12 * mesh.tris.len());
        let mut mt: Vec<(u32, u32, f64)> = Vec::with_capacity(12 * mesh.tris.len());

        // Straight-triangle part: exact P1 stiffness and mass.
        for t in &mesh.tris {
            let (pa, pb, pc) = (
                mesh.nodes[t[0] as usize],
                mesh.nodes[t[1] as usize],
                mesh.nodes[t[2] as usize],
            );
            let (g, area) = tri_grads(pa, pb, pc);
            for a in 0..3 {
                for b in 0..3 {
                    kt.push((t[a], t[b], area * g[a].dot(&g[b])));
                    let mab = if a == b { area / 6.0 } else { area / 12.0 };
                    mt.push((t[a], t[b], mab));
                }
            }
        }
        // Lens part: the adjacent triangle's shape functions extend affinely.
        let n_tri_pts = mesh.tris.len() * tri_points_per_elem(&surf);
        for qp in &surf.quad_points()[n_tri_pts..] {
            let t = mesh.tris[qp.tri as usize];
            let (pa, pb, pc) = (
                mesh.nodes[t[0] as usize],
                mesh.nodes[t[1] as usize],
                mesh.nodes[t[2] as usize],
            );
            let (g, _) = tri_grads(pa, pb, pc);
            for a in 0..3 {
                for b in 0..3 {
                    kt.push((t[a], t[b], qp.w * g[a].dot(&g[b])));
                    mt.push((t[a], t[b], qp.w * qp.bary[a] * qp.bary[b]));
                }
            }
        }
        let stiffness = Csr::from_triplets(n, &mut kt);
        let mass = Csr::from_triplets(n, &mut mt);

        let perm = rcm_order(&stiffness);
        let mut iperm = vec![0u32; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old as usize] = new as u32;
        }

        // Grounded SPD matrix K + α e₀ e₀ᵀ in RCM ordering.
        let i0 = 0usize;
        let alpha = stiffness.data[stiffness.indptr[i0]
            ..stiffness.indptr[i0 + 1]]
            .iter()
            .zip(&stiffness.indices[stiffness.indptr[i0]..stiffness.indptr[i0 + 1]])
            .find(|&(_, &c)| c as usize == i0)
            .map(|(&v, _)| v)
            .unwrap_or(1.0);
        let mut pt: Vec<(u32, u32, f64)> = Vec::with_capacity(stiffness.data.len() + 1);
        for i in 0..n {
            for k in stiffness.indptr[i]..stiffness.indptr[i + 1] {
                pt.push((
                    iperm[i],
                    iperm[stiffness.indices[k] as usize],
                    stiffness.data[k],
                ));
            }
        }
        pt.push((iperm[i0], iperm[i0], alpha));
        let khat = Csr::from_triplets(n, &mut pt);
        let factor = Skyline::factor(&khat)?;

        let area = surf.area();
        let w = surf.node_weights().clone();
        let solve_khat = |rhs: &DVector<f64>| -> DVector<f64> {
            let mut pb = DVector::zeros(n);
            for i in 0..n {
                pb[iperm[i] as usize] = rhs[i];
            }
            let px = factor.solve(&pb);
            let mut x = DVector::zeros(n);
            for i in 0..n {
                x[i] = px[iperm[i] as usize];
            }
            x
        };
        let aux_w = solve_khat(&w);
        let mut e0 = DVector::zeros(n);
        e0[i0] = 1.0;
        let aux_e = solve_khat(&e0);

        Ok(Self {
            surf,
            stiffness,
            mass,
            iperm,
            factor,
            aux_w,
            aux_e,
            alpha,
            i0,
            area,
        })
    }

    pub fn surface(&self) -> &Surface {
        &self.surf
    }

    pub fn surface_arc(&self) -> Arc<Surface> {
        self.surf.clone()
    }

    pub fn node_count(&self) -> usize {
        self.stiffness.n
    }

    pub fn stiffness(&self) -> &Csr {
        &self.stiffness
    }

    pub fn mass(&self) -> &Csr {
        &self.mass
    }

    /// Load vector F_i = ∫ f φ_i over triangles and lenses.
    pub fn assemble_load(&self, mut f: impl FnMut(Vec2) -> f64) -> DVector<f64> {
        let mesh = self.surf.mesh();
        let mut load = DVector::zeros(self.stiffness.n);
        for qp in self.surf.quad_points() {
            let t = mesh.tris[qp.tri as usize];
            let fv = qp.w * f(qp.pos);
            for k in 0..3 {
                load[t[k] as usize] += fv * qp.bary[k];
            }
        }
        load
    }

    /// Boundary load vector b_i = ∮_∂Σ g φ_i ds over the exact circle arcs.
    /// Adds the natural-boundary-data term of a weak Neumann problem.
    pub fn assemble_boundary_load(&self, mut g: impl FnMut(Vec2) -> f64) -> DVector<f64> {
        let mesh = self.surf.mesh();
        let mut load = DVector::zeros(self.stiffness.n);
        for qp in self.surf.boundary_quad_points() {
            let t = mesh.tris[qp.tri as usize];
            let gv = qp.w * g(qp.pos);
            for k in 0..3 {
                load[t[k] as usize] += gv * qp.bary[k];
            }
        }
        load
    }

    /// Mean value (w·u)/|Σ| of a nodal field.
    pub fn mean(&self, u: &DVector<f64>) -> f64 {
        self.surf.node_weights().dot(u) / self.area
    }

    /// Solve of K̂ x = b (grounded SPD matrix), used directly as the Krylov
    /// preconditioner.
    pub fn precondition(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.stiffness.n;
        let mut pb = DVector::zeros(n);
        for i in 0..n {
            pb[self.iperm[i] as usize] = b[i];
        }
        let px = self.factor.solve(&pb);
        let mut x = DVector::zeros(n);
        for i in 0..n {
            x[i] = px[self.iperm[i] as usize];
        }
        x
    }

    /// Solves `-Δu = f - f̄`, `∂_ν u = 0`, `∫u = 0` for the nodal load
    /// F_i = ∫ f φ_i. Exact Lagrange semantics: `K u + λ w = F`, `wᵀu = 0`.
    pub fn solve_neumann(&self, load: &DVector<f64>) -> Result<Field, SolveError> {
        if load.len() != self.stiffness.n {
            return Err(SolveError::Dimension(format!(
                "load length {} vs {} nodes",
                load.len(),
                self.stiffness.n
            )));
        }
        let a = self.precondition(load);
        let w = self.surf.node_weights();
        // Unknown scalars: multiplier λ and ground correction s = α u_{i0}.
        //   u = A - λ B + s C,   wᵀu = 0,   s = α e₀ᵀ u.
        let (wa, wb, wc) = (w.dot(&a), w.dot(&self.aux_w), w.dot(&self.aux_e));
        let (ea, eb, ec) = (a[self.i0], self.aux_w[self.i0], self.aux_e[self.i0]);
        // [ wb  -wc ] [λ]   [ wa ]
        // [ αeb  1-αec ] [s] = [ αea ]
        let m11 = wb;
        let m12 = -wc;
        let m21 = self.alpha * eb;
        let m22 = 1.0 - self.alpha * ec;
        let det = m11 * m22 - m12 * m21;
        if det.abs() < 1e-300 {
            return Err(SolveError::Breakdown(0, det));
        }
        let lambda = (wa * m22 - m12 * self.alpha * ea) / det;
        let s = (m11 * self.alpha * ea - m21 * wa) / det;
        let mut u = a - &self.aux_w * lambda + &self.aux_e * s;
        // Exact mean shift guards against roundoff.
        let mu = w.dot(&u) / self.area;
        u.add_scalar_mut(-mu);

        debug_assert!({
            let res = self.residual_neumann(&u, load);
            res <= 1e-9
        });
        Ok(Field { values: u, mean_zero: true })
    }

    /// Relative residual ‖K u + λ w - F‖ / ‖F‖ with λ = mean load.
    pub fn residual_neumann(&self, u: &DVector<f64>, load: &DVector<f64>) -> f64 {
        let w = self.surf.node_weights();
        let lambda = load.iter().sum::<f64>() / self.area;
        let r = self.stiffness.matvec(u) + w * lambda - load;
        let nf = load.norm().max(1e-300);
        r.norm() / nf
    }

    /// H¹ seminorm inner product ⟨∇u, ∇v⟩ (stiffness bilinear form).
    pub fn h1_inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.stiffness.bilinear(u, v)
    }

    pub fn h1_norm(&self, u: &DVector<f64>) -> f64 {
        self.h1_inner(u, u).max(0.0).sqrt()
    }

    /// Coupled quadratic form
    /// Q(v, w) = ⅓⟨∇v₁,∇w₁⟩ + ⅓⟨∇v₂,∇w₂⟩ + ⅙⟨∇v₁,∇w₂⟩ + ⅙⟨∇v₂,∇w₁⟩.
    pub fn quad_form_q(&self, v: &PairField, w: &PairField) -> f64 {
        let a11 = self.h1_inner(&v.f1.values, &w.f1.values);
        let a22 = self.h1_inner(&v.f2.values, &w.f2.values);
        let a12 = self.h1_inner(&v.f1.values, &w.f2.values);
        let a21 = self.h1_inner(&v.f2.values, &w.f1.values);
        (a11 + a22) / 3.0 + (a12 + a21) / 6.0
    }

    /// Adjoint embedding: i*(f) solves -Δu = f - f̄ with ∫u = 0, so that
    /// ⟨i*(f), h⟩_{H¹} = ∫(f - f̄)h for all mean-zero h.
    pub fn i_star(&self, f: impl FnMut(Vec2) -> f64) -> Result<Field, SolveError> {
        let load = self.assemble_load(f);
        self.solve_neumann(&load)
    }

    /// L² norm via the mass matrix.
    pub fn l2_norm(&self, u: &DVector<f64>) -> f64 {
        self.mass.bilinear(u, u).max(0.0).sqrt()
    }

    /// Lp norm of a quadrature-evaluable function.
    pub fn lp_norm_fn(&self, p: f64, mut f: impl FnMut(Vec2) -> f64) -> f64 {
        let s = self.surf.integrate(|x| f(x).abs().powf(p));
        s.powf(1.0 / p)
    }

    /// Removes the mean in place and flags the field.
    pub fn project_mean_zero(&self, f: &mut Field) {
        let mu = self.mean(&f.values);
        f.values.add_scalar_mut(-mu);
        f.mean_zero = true;
    }
}

fn tri_points_per_elem(surf: &Surface) -> usize {
    match surf.quad_order() {
        1 => 1,
        2 => 3,
        4 => 6,
        6 => 12,
        _ => unreachable!(),
    }
}

/// Preconditioned conjugate gradients for a symmetric operator whose kernel
/// is the constants (stiffness-like: A·1 = 0, range ⊥ 1). The system is
/// regularized by the rank-one augmentation A + β w wᵀ, which is SPD on the
/// whole space and reproduces the weighted-mean-zero solution exactly once
/// the load is made compatible (1ᵀb = 0).
pub fn pcg(
    apply: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    precond: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    w: &DVector<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize), SolveError> {
    let ones_b: f64 = b.iter().sum();
    let ones_w: f64 = w.iter().sum();
    let b = b - w * (ones_b / ones_w);
    let beta_reg = 1.0 / w.norm_squared();
    let apply_aug = |v: &DVector<f64>| -> DVector<f64> {
        let mut y = apply(v);
        y.axpy(beta_reg * w.dot(v), w, 1.0);
        y
    };
    let nb = b.norm().max(1e-300);
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 0..max_iter {
        if r.norm() <= tol * nb {
            return Ok((x, it));
        }
        let ap = apply_aug(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(SolveError::Stalled(format!(
                "PCG: non-positive curvature {pap:.3e} at iteration {it}"
            )));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = precond(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + &p * beta;
    }
    if r.norm() <= 10.0 * tol * nb {
        return Ok((x, max_iter));
    }
    Err(SolveError::Stalled(format!(
        "PCG: residual {:.3e} after {max_iter} iterations (target {:.3e})",
        r.norm() / nb,
        tol
    )))
}

/// Restarted GMRES with right preconditioning for the nonsymmetric coupled
/// operators of the reduction step.
pub fn gmres(
    apply: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    precond: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    restart: usize,
    tol: f64,
    max_outer: usize,
) -> Result<(DVector<f64>, usize), SolveError> {
    let n = b.len();
    let nb = b.norm().max(1e-300);
    let mut x = DVector::zeros(n);
    let mut total_it = 0;
    for _ in 0..max_outer {
        let r = b - apply(&x);
        let beta = r.norm();
        if beta <= tol * nb {
            return Ok((x, total_it));
        }
        let mut v: Vec<DVector<f64>> = vec![&r / beta];
        let m = restart;
        let mut h = nalgebra::DMatrix::<f64>::zeros(m + 1, m);
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = DVector::zeros(m + 1);
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            total_it += 1;
            let zk = precond(&v[k]);
            let mut wv = apply(&zk);
            for i in 0..=k {
                h[(i, k)] = wv.dot(&v[i]);
                wv.axpy(-h[(i, k)], &v[i], 1.0);
            }
            h[(k + 1, k)] = wv.norm();
            // Givens rotations to maintain the QR of H.
            for i in 0..k {
                let t = cs[i] * h[(i, k)] + sn[i] * h[(i + 1, k)];
                h[(i + 1, k)] = -sn[i] * h[(i, k)] + cs[i] * h[(i + 1, k)];
                h[(i, k)] = t;
            }
            let denom = (h[(k, k)] * h[(k, k)] + h[(k + 1, k)] * h[(k + 1, k)]).sqrt();
            if denom < 1e-300 {
                k_used = k;
                break;
            }
            cs[k] = h[(k, k)] / denom;
            sn[k] = h[(k + 1, k)] / denom;
            h[(k, k)] = denom;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if h[(k + 1, k)].abs() > 1e-300 {
                v.push(&wv / h[(k + 1, k)]);
            }
            if g[k + 1].abs() <= tol * nb {
                break;
            }
            if v.len() == k + 1 {
                break;
            }
        }
        // Back substitution.
        let k = k_used;
        let mut y = DVector::zeros(k);
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in i + 1..k {
                s -= h[(i, j)] * y[j];
            }
            y[i] = s / h[(i, i)];
        }
        let mut dz = DVector::zeros(n);
        for i in 0..k {
            dz.axpy(y[i], &v[i], 1.0);
        }
        x += precond(&dz);
        let res = (b - apply(&x)).norm();
        if res <= tol * nb {
            return Ok((x, total_it));
        }
    }
    let res = (b - apply(&x)).norm() / nb;
    if res <= 10.0 * tol {
        return Ok((x, total_it));
    }
    Err(SolveError::Stalled(format!(
        "GMRES: relative residual {res:.3e} after {total_it} iterations"
    )))
}
