//! Singular mean-field equation for z(·,ξ): the weight with exact quadratic
//! vanishing at the poles, the energy and its solver, the linearized
//! non-degeneracy margin, and the ξ-derivative of the solution.

use std::sync::Arc;

use nalgebra::DVector;

use crate::elliptic::{pcg, Field, NeumannSolver, SolveError};
use crate::geometry::{CutOff, Vec2};
use crate::green::GreenTable;

/// Nodal weight Ṽ₂(·,ξ) = V₂·exp(-Σ_j (ϱ_j/2) G(·,ξ_j)), stored through the
/// factorization V₂·exp(-Σ_j (ϱ_j/2)·regular_j)·Π_j |y_j|^{2χ_j}. The power
/// form vanishes exactly at the poles; exp∘log would route through log 0.
pub struct SingularWeight {
    values: DVector<f64>,
    v2: DVector<f64>,
    xis: Vec<Vec2>,
}

impl SingularWeight {
    pub fn new(table: &GreenTable, v2: DVector<f64>) -> Result<Self, SolveError> {
        let solver = table.solver();
        let n = solver.node_count();
        if v2.len() != n {
            return Err(SolveError::Dimension(format!(
                "V₂ has {} values for {} nodes",
                v2.len(),
                n
            )));
        }
        if v2.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(SolveError::Invalid(
                "V₂ must be positive and finite at every node".into(),
            ));
        }
        let nodes = &solver.surface().mesh().nodes;
        let mut values = v2.clone();
        for j in 0..table.len() {
            let reg = table.regular_nodal(j)?;
            let rho = table.rho(j);
            let chart = table.chart(j);
            let cut = CutOff::new(table.r0(j));
            for i in 0..n {
                let s = chart.to_chart(nodes[i]).norm();
                let chi = cut.value(s);
                let mut f = (-0.5 * rho * reg[i]).exp();
                if chi > 0.0 {
                    f *= s.powf(2.0 * chi);
                }
                values[i] *= f;
            }
        }
        Ok(Self { values, v2, xis: table.xis() })
    }

    /// Uniform V₂ ≡ 1.
    pub fn unit(table: &GreenTable) -> Result<Self, SolveError> {
        let n = table.solver().node_count();
        Self::new(table, DVector::from_element(n, 1.0))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn v2(&self) -> &DVector<f64> {
        &self.v2
    }

    pub fn pole_count(&self) -> usize {
        self.xis.len()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Solved mean-field state. `margin` is NaN until `mf_linearized_margin`
/// fills it; `converged` is false when Newton returned its last iterate
/// without reaching the residual target.
pub struct MfSolution {
    pub z: Field,
    pub rho2: f64,
    pub energy: f64,
    pub residual: f64,
    pub margin: f64,
    pub converged: bool,
}

/// Normalized exponential weights p_i = w_i Ṽ_i e^{z_i} / M and log M,
/// evaluated with a max shift so e^z never overflows. p sums to one and
/// is the Jacobian structure shared by the load, the energy gradient and
/// the Hessian.
fn weighted_exp(
    solver: &NeumannSolver,
    weight: &SingularWeight,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, f64), SolveError> {
    let w = solver.surface().node_weights();
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = DVector::zeros(z.len());
    let mut s = 0.0;
    for i in 0..z.len() {
        let v = w[i] * weight.values[i] * (z[i] - zmax).exp();
        p[i] = v;
        s += v;
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(SolveError::Invalid(format!(
            "weighted mass ∫Ṽ₂e^z degenerate: {s}"
        )));
    }
    p /= s;
    Ok((p, zmax + s.ln()))
}

/// I_ξ(z) = ½∫|∇z|² - 2ρ₂ log ∫Ṽ₂ e^z on mean-zero z.
pub fn mf_energy(
    solver: &NeumannSolver,
    weight: &SingularWeight,
    rho2: f64,
    z: &Field,
) -> Result<f64, SolveError> {
    let scale = 1.0 + z.values.amax();
    if solver.mean(&z.values).abs() > 1e-9 * scale {
        return Err(SolveError::Invalid("mf_energy needs a mean-zero field".into()));
    }
    energy_unchecked(solver, weight, rho2, &z.values)
}

fn energy_unchecked(
    solver: &NeumannSolver,
    weight: &SingularWeight,
    rho2: f64,
    z: &DVector<f64>,
) -> Result<f64, SolveError> {
    let dirichlet = 0.5 * solver.stiffness().bilinear(z, z);
    if rho2 == 0.0 {
        return Ok(dirichlet);
    }
    let (_, ln_mass) = weighted_exp(solver, weight, z)?;
    Ok(dirichlet - 2.0 * rho2 * ln_mass)
}

/// Weak-form residual r = b(z) - Kz with b_i = 2ρ₂(p_i - w_i). Its entries
/// sum to zero: the right-hand side of the equation integrates to zero.
pub fn mf_residual(
    solver: &NeumannSolver,
    weight: &SingularWeight,
    rho2: f64,
    z: &DVector<f64>,
) -> Result<DVector<f64>, SolveError> {
    let (p, _) = weighted_exp(solver, weight, z)?;
    let w = solver.surface().node_weights();
    let load = (p - w) * (2.0 * rho2);
    Ok(load - solver.stiffness().matvec(z))
}

fn hessian_apply(
    solver: &NeumannSolver,
    rho2: f64,
    p: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let mut y = solver.stiffness().matvec(v);
    let pv = p.dot(v);
    for i in 0..y.len() {
        y[i] -= 2.0 * rho2 * p[i] * (v[i] - pv);
    }
    y
}

const RESONANCE_GUARD: f64 = 1e-9;

/// ρ₂ distance to the resonant set 2πℕ; the solver refuses values inside
/// the guard band.
pub fn resonance_distance(rho2: f64) -> f64 {
    let k = (rho2 / (2.0 * std::f64::consts::PI)).round();
    if k < 1.0 {
        return rho2.abs().min((rho2 - 2.0 * std::f64::consts::PI).abs());
    }
    (rho2 - 2.0 * std::f64::consts::PI * k).abs()
}

/// Solves -Δz = 2ρ₂(Ṽ₂e^z/∫Ṽ₂e^z - 1), Neumann, ∫z = 0: H¹ descent with
/// Armijo line search down to ‖r‖ ≤ 1e-4, then Newton with PCG solves to
/// ‖r‖ ≤ 1e-8. Newton divergence returns the last iterate flagged.
pub fn solve_mf(
    solver: &NeumannSolver,
    weight: &SingularWeight,
    rho2: f64,
    init: Option<&Field>,
) -> Result<MfSolution, SolveError> {
    if rho2 < 0.0 || !rho2.is_finite() {
        return Err(SolveError::Invalid(format!("ρ₂ = {rho2} out of range")));
    }
    if rho2 > 0.0 && resonance_distance(rho2) < RESONANCE_GUARD {
        return Err(SolveError::Invalid(format!(
            "ρ₂ = {rho2} is resonant (within {RESONANCE_GUARD} of 2πℕ)"
        )));
    }
    if rho2 >= 2.0 * std::f64::consts::PI && init.is_none() {
        return Err(SolveError::Invalid(
            "ρ₂ ≥ 2π is outside the coercive range: supply an initial guess".into(),
        ));
    }
    let n = solver.node_count();
    let mut z = match init {
        Some(f) => f.values.clone(),
        None => DVector::zeros(n),
    };
    let mu = solver.mean(&z);
    z.add_scalar_mut(-mu);

    let w = solver.surface().node_weights();
    let mut energy = energy_unchecked(solver, weight, rho2, &z)?;
    let mut r = mf_residual(solver, weight, rho2, &z)?;

    // H¹ steepest descent: the Riesz lift of the residual through the
    // Laplace factorization, safeguarded by Armijo on I.
    const GD_TOL: f64 = 1e-4;
    for _ in 0..200 {
        if r.norm() <= GD_TOL {
            break;
        }
        let d = solver.solve_neumann(&r)?;
        let slope = r.dot(&d.values);
        if slope <= 0.0 {
            break;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &z + &d.values * step;
            let e = energy_unchecked(solver, weight, rho2, &trial)?;
            if e <= energy - 1e-4 * step * slope {
                debug_assert!(e < energy);
                z = trial;
                energy = e;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(SolveError::Stalled(
                "mean-field line search found no descent".into(),
            ));
        }
        let mu = solver.mean(&z);
        z.add_scalar_mut(-mu);
        r = mf_residual(solver, weight, rho2, &z)?;
    }

    // Newton on the weak residual; the Hessian shares the kernel of the
    // Neumann stiffness, so the augmented PCG applies unchanged.
    const NEWTON_TOL: f64 = 1e-8;
    let mut converged = r.norm() <= NEWTON_TOL;
    for _ in 0..30 {
        if r.norm() <= NEWTON_TOL {
            converged = true;
            break;
        }
        let (p, _) = weighted_exp(solver, weight, &z)?;
        let apply = |v: &DVector<f64>| hessian_apply(solver, rho2, &p, v);
        let pre = |b: &DVector<f64>| solver.precondition(b);
        let (dz, _) = pcg(&apply, &pre, w, &r, 1e-12, 800)?;
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let trial = &z + &dz * step;
            let rt = mf_residual(solver, weight, rho2, &trial)?;
            if rt.norm() < r.norm() {
                z = trial;
                r = rt;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            converged = false;
            break;
        }
        let mu = solver.mean(&z);
        z.add_scalar_mut(-mu);
    }

    energy = energy_unchecked(solver, weight, rho2, &z)?;
    let residual = r.norm();
    Ok(MfSolution {
        z: Field { values: z, mean_zero: true },
        rho2,
        energy,
        residual,
        margin: f64::NAN,
        converged: converged && residual <= NEWTON_TOL,
    })
}

/// Smallest eigenvalue of the linearized operator -Δ - K' against the mass
/// matrix on mean-zero fields (inverse iteration; the pencil generalizes
/// the Neumann eigenproblem, which it reproduces at ρ₂ = 0). Positive
/// margin certifies discrete non-degeneracy.
pub fn mf_linearized_margin(
    solver: &NeumannSolver,
    weight: &SingularWeight,
    sol: &MfSolution,
) -> Result<f64, SolveError> {
    let (p, _) = weighted_exp(solver, weight, &sol.z.values)?;
    let rho2 = sol.rho2;
    let apply = |v: &DVector<f64>| hessian_apply(solver, rho2, &p, v);
    let pre = |b: &DVector<f64>| solver.precondition(b);
    let w = solver.surface().node_weights();
    let n = solver.node_count();

    // Deterministic start with no special symmetry.
    let mut x = DVector::from_fn(n, |i, _| (1.0 + (i as f64) * 0.7391).sin());
    let mu0 = solver.mean(&x);
    x.add_scalar_mut(-mu0);
    let mut rayleigh = f64::INFINITY;
    for it in 0..80 {
        let mx = solver.mass().matvec(&x);
        let (y, _) = pcg(&apply, &pre, w, &mx, 1e-10, 800)?;
        let ym = solver.mass().bilinear(&y, &y).max(1e-300).sqrt();
        x = y / ym;
        let num = x.dot(&apply(&x));
        let den = solver.mass().bilinear(&x, &x);
        let mu = num / den;
        if (mu - rayleigh).abs() <= 1e-8 * mu.abs().max(1e-12) {
            return Ok(mu);
        }
        rayleigh = mu;
        if it == 79 {
            return Err(SolveError::Stalled(format!(
                "margin iteration stopped at {mu:.6e} without settling"
            )));
        }
    }
    unreachable!()
}

/// ∂z/∂ξ along `dir` at pole j by the implicit function theorem: the
/// linearized operator against the ∂_ξ Ṽ₂ forcing, with the weight
/// derivative taken by central differences of rebuilt tables. Boundary
/// poles move along the arc: `dir` is projected on the tangent and the
/// derivative is per unit arc length times the tangential speed.
pub fn dz_dxi(
    table: &GreenTable,
    weight: &SingularWeight,
    sol: &MfSolution,
    j: usize,
    dir: Vec2,
) -> Result<Field, SolveError> {
    if j >= table.len() {
        return Err(SolveError::Invalid(format!("pole index {j} out of range")));
    }
    if !(sol.margin.is_finite() && sol.margin > 1e-6) {
        return Err(SolveError::Invalid(
            "dz_dxi needs a certified margin > 1e-6 (run mf_linearized_margin)".into(),
        ));
    }
    let solver = table.solver();
    let radius = solver.surface().radius();
    let eps = 1e-4;
    let shifted = |sign: f64| -> Result<DVector<f64>, SolveError> {
        let mut xis = table.xis();
        if table.chart(j).dof() == 2 {
            xis[j] += dir * (sign * eps);
        } else {
            let xi = xis[j];
            let tangent = Vec2::new(-xi.y, xi.x) / xi.norm();
            let speed = dir.dot(&tangent);
            let ang = sign * eps * speed / radius;
            let (s, c) = ang.sin_cos();
            xis[j] = Vec2::new(c * xi.x - s * xi.y, s * xi.x + c * xi.y);
        }
        let t = GreenTable::with_radii(table.solver_arc(), &xis, &table.radii())?;
        Ok(SingularWeight::new(&t, weight.v2.clone())?.values)
    };
    let vp = shifted(1.0)?;
    let vm = shifted(-1.0)?;

    let w = solver.surface().node_weights();
    let z = &sol.z.values;
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (p, _) = weighted_exp(solver, weight, z)?;
    // a_i = w_i (∂Ṽ)_i e^{z_i} / M, with the same shift as p.
    let mut s_ref = 0.0;
    for i in 0..z.len() {
        s_ref += w[i] * weight.values[i] * (z[i] - zmax).exp();
    }
    let mut a = DVector::zeros(z.len());
    for i in 0..z.len() {
        let dv = (vp[i] - vm[i]) / (2.0 * eps);
        a[i] = w[i] * dv * (z[i] - zmax).exp() / s_ref;
    }
    let asum = a.sum();
    let forcing = (a - &p * asum) * (2.0 * sol.rho2);

    let rho2 = sol.rho2;
    let apply = |v: &DVector<f64>| hessian_apply(solver, rho2, &p, v);
    let pre = |b: &DVector<f64>| solver.precondition(b);
    let (dz, _) = pcg(&apply, &pre, w, &forcing, 1e-10, 800)?;
    Ok(Field { values: dz, mean_zero: true })
}
