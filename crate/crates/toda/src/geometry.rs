//! The flat unit-area disk, graded triangle meshes on it, isothermal charts at
//! interior and boundary points, and the radial cutoff profile.
//!
//! Geometry conventions used throughout the crate:
//! * the surface is the closed disk of radius R = 1/√π, so |Σ| = 1 exactly;
//! * boundary mesh nodes sit exactly on the circle, and quadrature integrates
//!   each straight-edge triangle plus the circular segment (lens) outside its
//!   boundary chords, so ∫1 = 1 holds to machine precision;
//! * charts at interior points are translations (conformal factor ≡ 0); charts
//!   at boundary points rotate the point to (R, 0) and apply the Möbius map
//!   w ↦ 2iR(R−w)/(R+w) onto the upper half-plane, normalized so the metric
//!   distortion at the point is 1.

use nalgebra::{DVector, Matrix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::f64::consts::PI;

pub type Vec2 = nalgebra::Vector2<f64>;

/// Radius of the unit-area disk.
pub fn disk_radius() -> f64 {
    1.0 / PI.sqrt()
}

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mesh generation failed: {0}")]
    MeshGeneration(String),
    #[error("point outside the disk: ({0}, {1})")]
    PointOutside(f64, f64),
    #[error("unsupported quadrature order {0} (supported: 1, 2, 4, 6)")]
    QuadratureOrder(usize),
}

/// Local mesh-size request: size `h_min` inside `radius` around `center`,
/// growing linearly (slope 0.35) outside. Centers become exact mesh nodes.
#[derive(Debug, Clone, Copy)]
pub struct Grading {
    pub center: Vec2,
    pub radius: f64,
    pub h_min: f64,
}

/// Lipschitz mesh-size field: minimum of the base size and all gradings.
#[derive(Debug, Clone)]
pub struct SizeField {
    h_base: f64,
    gradings: Vec<Grading>,
}

const GRADE_SLOPE: f64 = 0.35;

impl SizeField {
    pub fn new(h_base: f64, gradings: &[Grading]) -> Self {
        Self { h_base, gradings: gradings.to_vec() }
    }

    pub fn eval(&self, x: Vec2) -> f64 {
        let mut h = self.h_base;
        for g in &self.gradings {
            let d = (x - g.center).norm();
            let s = g.h_min + GRADE_SLOPE * (d - g.radius).max(0.0);
            h = h.min(s);
        }
        h.max(1e-6)
    }

    pub fn h_base(&self) -> f64 {
        self.h_base
    }
}

/// Smooth radial cutoff: χ ≡ 1 on [0, r₀], χ ≡ 0 outside [0, 2r₀], monotone
/// in between. Quintic profile, C² with vanishing first and second derivatives
/// at both joints; `d1`/`d2` are derivatives in the radial variable s = |y|.
#[derive(Debug, Clone, Copy)]
pub struct CutOff {
    pub r0: f64,
}

impl CutOff {
    pub fn new(r0: f64) -> Self {
        assert!(r0 > 0.0, "cutoff radius must be positive");
        Self { r0 }
    }

    pub fn value(&self, s: f64) -> f64 {
        let t = s / self.r0;
        if t <= 1.0 {
            1.0
        } else if t >= 2.0 {
            0.0
        } else {
            let u = t - 1.0;
            1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
        }
    }

    pub fn d1(&self, s: f64) -> f64 {
        let t = s / self.r0;
        if !(1.0..=2.0).contains(&t) {
            0.0
        } else {
            let u = t - 1.0;
            -(30.0 * u * u - 60.0 * u * u * u + 30.0 * u * u * u * u) / self.r0
        }
    }

    pub fn d2(&self, s: f64) -> f64 {
        let t = s / self.r0;
        if !(1.0..=2.0).contains(&t) {
            0.0
        } else {
            let u = t - 1.0;
            -(60.0 * u - 180.0 * u * u + 120.0 * u * u * u) / (self.r0 * self.r0)
        }
    }
}

/// Chart classification; fixes the concentration mass ϱ and the number of
/// free translation directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartKind {
    Interior,
    Boundary,
}

/// Isothermal chart `y_ξ` at a point of the disk. `to_chart` maps the point to
/// the origin; the pullback of the flat metric is `e^{φ̂(y)} |dy|²` with
/// φ̂(0) = 0. Interior charts are translations (φ̂ ≡ 0 exactly). Boundary
/// charts flatten ∂Σ onto {y₂ = 0} with the outer normal mapped to
/// −e^{−φ̂/2} ∂_{y₂}; their conformal factor has ∂_{y₁}φ̂(0) = 0 but
/// ∂_{y₂}φ̂(0) = −2/R (twice the geodesic curvature, unavoidable for any
/// conformal flattening of a curved boundary).
#[derive(Debug, Clone, Copy)]
pub struct Chart {
    kind: ChartKind,
    xi: Vec2,
    /// Rotation taking ξ to (R, 0); identity for interior charts.
    cos_a: f64,
    sin_a: f64,
    radius: f64,
    r_chart: f64,
}

impl Chart {
    pub fn kind(&self) -> ChartKind {
        self.kind
    }

    pub fn xi(&self) -> Vec2 {
        self.xi
    }

    /// Concentration mass carried by a blow-up point in this chart:
    /// 8π at interior points, 4π at boundary points.
    pub fn rho(&self) -> f64 {
        match self.kind {
            ChartKind::Interior => 8.0 * PI,
            ChartKind::Boundary => 4.0 * PI,
        }
    }

    /// Coefficient of log(1/|y|) in the Green-function singularity: 4/ϱ,
    /// i.e. 1/2π at interior points and 1/π at boundary points.
    pub fn gamma_coeff(&self) -> f64 {
        4.0 / self.rho()
    }

    /// Number of free translation directions: 2 interior, 1 boundary.
    pub fn dof(&self) -> usize {
        match self.kind {
            ChartKind::Interior => 2,
            ChartKind::Boundary => 1,
        }
    }

    /// Radius of validity used to cap cutoff radii.
    pub fn r_chart(&self) -> f64 {
        self.r_chart
    }

    pub fn to_chart(&self, x: Vec2) -> Vec2 {
        match self.kind {
            ChartKind::Interior => x - self.xi,
            ChartKind::Boundary => {
                let r = self.radius;
                // w = e^{-iα} x
                let w = Vec2::new(
                    self.cos_a * x.x + self.sin_a * x.y,
                    -self.sin_a * x.x + self.cos_a * x.y,
                );
                // y = 2iR (R - w)/(R + w) = 2R (2R w₂, R² - |w|²) / |R + w|²
                let den = (r + w.x) * (r + w.x) + w.y * w.y;
                Vec2::new(2.0 * r * 2.0 * r * w.y / den, 2.0 * r * (r * r - w.norm_squared()) / den)
            }
        }
    }

    pub fn from_chart(&self, y: Vec2) -> Vec2 {
        match self.kind {
            ChartKind::Interior => y + self.xi,
            ChartKind::Boundary => {
                let r = self.radius;
                // w = R (2iR - y)/(2iR + y)
                let den = y.x * y.x + (2.0 * r + y.y) * (2.0 * r + y.y);
                let w = Vec2::new(
                    r * (4.0 * r * r - y.norm_squared()) / den,
                    r * 4.0 * r * y.x / den,
                );
                // x = e^{iα} w
                Vec2::new(
                    self.cos_a * w.x - self.sin_a * w.y,
                    self.sin_a * w.x + self.cos_a * w.y,
                )
            }
        }
    }

    /// Conformal factor φ̂(y) of the pullback metric; φ̂(0) = 0.
    pub fn phi_hat(&self, y: Vec2) -> f64 {
        match self.kind {
            ChartKind::Interior => 0.0,
            ChartKind::Boundary => {
                let r = self.radius;
                let q = y.x * y.x + (y.y + 2.0 * r) * (y.y + 2.0 * r);
                (16.0 * r * r * r * r).ln() - 2.0 * q.ln()
            }
        }
    }

    /// Analytic gradient of φ̂.
    pub fn phi_hat_grad(&self, y: Vec2) -> Vec2 {
        match self.kind {
            ChartKind::Interior => Vec2::zeros(),
            ChartKind::Boundary => {
                let r = self.radius;
                let q = y.x * y.x + (y.y + 2.0 * r) * (y.y + 2.0 * r);
                Vec2::new(-4.0 * y.x / q, -4.0 * (y.y + 2.0 * r) / q)
            }
        }
    }
}

/// One quadrature point: location, weight, owning triangle and barycentric
/// coordinates (affinely extended past [0,1] for lens points).
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub pos: Vec2,
    pub w: f64,
    pub tri: u32,
    pub bary: [f64; 3],
}

/// Triangle mesh of the disk. Boundary nodes are exactly on the circle and
/// `boundary` lists them in counterclockwise order.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<Vec2>,
    pub tris: Vec<[u32; 3]>,
    pub boundary: Vec<u32>,
    /// Per-triangle neighbor across edge (i, i+1), -1 on the hull.
    pub neighbors: Vec<[i32; 3]>,
}

/// Quadratic local fit: value, gradient and Hessian at the fit center.
#[derive(Debug, Clone, Copy)]
pub struct QuadFit {
    pub value: f64,
    pub grad: Vec2,
    pub hess: Matrix2<f64>,
}

/// The unit-area flat disk with a graded mesh and cached quadrature.
pub struct Surface {
    radius: f64,
    mesh: Mesh,
    size: SizeField,
    quad_order: usize,
    quad: Vec<QuadPoint>,
    node_weight: DVector<f64>,
    anchors: Vec<(Vec2, u32)>,
    node_grid: HashMap<(i64, i64), Vec<u32>>,
    node_grid_cell: f64,
    node_tri: Vec<u32>,
    /// Arc-length quadrature on the exact circle, for boundary loads.
    boundary_quad: Vec<QuadPoint>,
    lens_area_total: f64,
}

/// Builds the disk mesh. `h_target` is the base element size, `quad_order`
/// the triangle quadrature order (1, 2, 4 or 6); grading centers are forced
/// to be mesh nodes.
pub fn build_surface(
    h_target: f64,
    quad_order: usize,
    gradings: &[Grading],
) -> Result<Surface, GeometryError> {
    if !(1e-4..=0.2).contains(&h_target) {
        return Err(GeometryError::InvalidParameter(format!(
            "h_target = {h_target} out of range (1e-4 ..= 0.2)"
        )));
    }
    if ![1usize, 2, 4, 6].contains(&quad_order) {
        return Err(GeometryError::QuadratureOrder(quad_order));
    }
    let radius = disk_radius();
    for g in gradings {
        if g.h_min <= 0.0 || g.h_min > h_target + 1e-15 {
            return Err(GeometryError::InvalidParameter(format!(
                "grading h_min = {} must lie in (0, h_target]",
                g.h_min
            )));
        }
        if g.center.norm() > radius + 1e-9 {
            return Err(GeometryError::PointOutside(g.center.x, g.center.y));
        }
    }
    let size = SizeField::new(h_target, gradings);

    // Deduplicated anchor points, boundary ones snapped onto the circle.
    let mut anchors: Vec<Vec2> = Vec::new();
    for g in gradings {
        let c = snap_to_circle(g.center, radius);
        if !anchors.iter().any(|a| (a - c).norm() < 1e-12) {
            anchors.push(c);
        }
    }

    for attempt in 0..3 {
        match try_build(radius, &size, &anchors, quad_order, attempt) {
            Ok(s) => return Ok(s),
            Err(e) if attempt == 2 => return Err(e),
            Err(_) => continue,
        }
    }
    unreachable!()
}

fn snap_to_circle(c: Vec2, radius: f64) -> Vec2 {
    if (c.norm() - radius).abs() < 1e-9 {
        let n = c.norm();
        c * (radius / n)
    } else {
        c
    }
}

fn try_build(
    radius: f64,
    size: &SizeField,
    anchors: &[Vec2],
    quad_order: usize,
    attempt: usize,
) -> Result<Surface, GeometryError> {
    let boundary_anchor_angles: Vec<f64> = {
        let mut a: Vec<f64> = anchors
            .iter()
            .filter(|p| (p.norm() - radius).abs() < 1e-12)
            .map(|p| p.y.atan2(p.x))
            .collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        a
    };
    let interior_anchors: Vec<Vec2> = anchors
        .iter()
        .copied()
        .filter(|p| (p.norm() - radius).abs() >= 1e-12)
        .collect();
    for p in &interior_anchors {
        if radius - p.norm() < 1.5 * size.eval(*p) {
            return Err(GeometryError::InvalidParameter(format!(
                "interior anchor ({}, {}) closer to the boundary than 1.5 local h",
                p.x, p.y
            )));
        }
    }

    let boundary_nodes = sample_boundary(radius, size, &boundary_anchor_angles);
    let interior = sample_interior(radius, size, &interior_anchors, &boundary_nodes, attempt);

    let mut nodes = boundary_nodes.clone();
    nodes.extend_from_slice(&interior);
    let n_boundary = boundary_nodes.len();

    // Smoothing rounds: Laplacian average of Delaunay neighbors, interior
    // non-anchor nodes only.
    let n_anchor_interior = interior_anchors.len();
    let mut tris = delaunay(&nodes)?;
    for _ in 0..2 {
        let adj = node_adjacency(nodes.len(), &tris);
        let mut moved = nodes.clone();
        for i in n_boundary + n_anchor_interior..nodes.len() {
            let nb = &adj[i];
            if nb.is_empty() {
                continue;
            }
            let mut c = Vec2::zeros();
            for &j in nb {
                c += nodes[j as usize];
            }
            c /= nb.len() as f64;
            // Reject moves that leave the interior band; projecting onto the
            // band circle would pile up co-circular nodes and breed slivers.
            let margin = radius - 0.62 * size.eval(c);
            if c.norm() <= margin {
                moved[i] = c;
            }
        }
        nodes = moved;
        tris = delaunay(&nodes)?;
    }

    // Quality and size checks.
    let min_angle = mesh_min_angle(&nodes, &tris);
    if min_angle < 18.0_f64.to_radians() {
        return Err(GeometryError::MeshGeneration(format!(
            "minimum triangle angle {:.2}° below 18°",
            min_angle.to_degrees()
        )));
    }
    for t in &tris {
        for k in 0..3 {
            let p = nodes[t[k] as usize];
            let q = nodes[t[(k + 1) % 3] as usize];
            let len = (p - q).norm();
            let allowed = 1.5 * size.eval(Vec2::new(0.5 * (p.x + q.x), 0.5 * (p.y + q.y)));
            if len > allowed.max(1.5 * size.h_base()) {
                return Err(GeometryError::MeshGeneration(format!(
                    "edge of length {len:.4} exceeds 1.5 local h"
                )));
            }
        }
    }

    let boundary_loop: Vec<u32> = {
        // Boundary nodes were generated in angular order, indices 0..n_boundary.
        (0..n_boundary as u32).collect()
    };
    let neighbors = build_neighbors(&tris)?;

    let mesh = Mesh { nodes, tris, boundary: boundary_loop, neighbors };
    finish_surface(radius, size.clone(), mesh, quad_order, anchors)
}

/// Boundary nodes exactly on the circle, spaced by the size field, anchors as
/// exact nodes. Counterclockwise, starting from the first anchor (or angle 0).
fn sample_boundary(radius: f64, size: &SizeField, anchor_angles: &[f64]) -> Vec<Vec2> {
    let mut arcs: Vec<(f64, f64)> = Vec::new();
    if anchor_angles.is_empty() {
        arcs.push((0.0, 2.0 * PI));
    } else {
        for i in 0..anchor_angles.len() {
            let a = anchor_angles[i];
            let b = if i + 1 < anchor_angles.len() {
                anchor_angles[i + 1]
            } else {
                anchor_angles[0] + 2.0 * PI
            };
            arcs.push((a, b));
        }
    }
    let mut out = Vec::new();
    for &(a, b) in &arcs {
        // Cumulative ∫ R dθ / h along the arc; equal increments give local
        // spacing ~ h while keeping both endpoints exact.
        let fine = 256.max(((b - a) * radius / 1e-3) as usize);
        let mut cum = vec![0.0; fine + 1];
        for k in 0..fine {
            let th = a + (b - a) * (k as f64 + 0.5) / fine as f64;
            let p = Vec2::new(radius * th.cos(), radius * th.sin());
            cum[k + 1] = cum[k] + (b - a) / fine as f64 * radius / size.eval(p);
        }
        let total = cum[fine];
        let n = (total.round() as usize).max(2);
        for m in 0..n {
            let target = total * m as f64 / n as f64;
            // Invert the cumulative function by binary search.
            let mut lo = 0;
            let mut hi = fine;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if cum[mid] <= target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let frac = if cum[hi] > cum[lo] { (target - cum[lo]) / (cum[hi] - cum[lo]) } else { 0.0 };
            let th = a + (b - a) * (lo as f64 + frac) / fine as f64;
            out.push(Vec2::new(radius * th.cos(), radius * th.sin()));
        }
    }
    out
}

/// Variable-radius Bridson sampling of the interior; anchors seeded first and
/// never displaced. Deterministic (fixed seed + attempt index).
fn sample_interior(
    radius: f64,
    size: &SizeField,
    anchors: &[Vec2],
    boundary: &[Vec2],
    attempt: usize,
) -> Vec<Vec2> {
    let spacing = |p: Vec2| 0.66 * size.eval(p);
    // The size field attains its minimum at grading centers.
    let mut r_min = 0.66 * size.eval(Vec2::zeros());
    for p in boundary {
        r_min = r_min.min(spacing(*p));
    }
    for a in anchors {
        r_min = r_min.min(spacing(*a));
    }
    let cell = (r_min / 2f64.sqrt()).max(1e-7);
    let key = |p: Vec2| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);

    let mut pts: Vec<Vec2> = Vec::new();
    let mut grid: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
    let push = |p: Vec2, pts: &mut Vec<Vec2>, grid: &mut HashMap<(i64, i64), Vec<u32>>| {
        grid.entry(key(p)).or_default().push(pts.len() as u32);
        pts.push(p);
    };

    // Boundary nodes participate in the spacing checks but are not output.
    for p in boundary {
        push(*p, &mut pts, &mut grid);
    }
    let n_fixed = pts.len();
    let mut active: Vec<u32> = Vec::new();
    for a in anchors {
        push(*a, &mut pts, &mut grid);
        active.push((pts.len() - 1) as u32);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x7D15_C0DE + attempt as u64);
    if anchors.is_empty() {
        let p = Vec2::new(0.0, 0.0);
        push(p, &mut pts, &mut grid);
        active.push((pts.len() - 1) as u32);
    }

    // Accept p only if no existing q has |p - q| < min(r(p), r(q)). The size
    // field is Lipschitz, so scanning radius 1.6 r(p) is conservative.
    let ok = |p: Vec2, pts: &[Vec2], grid: &HashMap<(i64, i64), Vec<u32>>| -> bool {
        if p.norm() > radius - 0.62 * size.eval(p) {
            return false;
        }
        let rp = spacing(p);
        let scan = 1.6 * rp;
        let (kx, ky) = key(p);
        let m = (scan / cell).ceil() as i64;
        for ix in (kx - m)..=(kx + m) {
            for iy in (ky - m)..=(ky + m) {
                if let Some(list) = grid.get(&(ix, iy)) {
                    for &qi in list {
                        let q = pts[qi as usize];
                        let d = (p - q).norm();
                        if d < rp.min(spacing(q)) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    };

    while let Some(pos) = {
        if active.is_empty() {
            None
        } else {
            let idx = rng.gen_range(0..active.len());
            Some(idx)
        }
    } {
        let pi = active[pos];
        let p = pts[pi as usize];
        let rp = spacing(p);
        let mut found = false;
        for _ in 0..30 {
            let ang = rng.gen_range(0.0..2.0 * PI);
            let rad = rng.gen_range(rp..1.5 * rp);
            let c = p + rad * Vec2::new(ang.cos(), ang.sin());
            if c.norm() < radius && ok(c, &pts, &grid) {
                push(c, &mut pts, &mut grid);
                active.push((pts.len() - 1) as u32);
                found = true;
                break;
            }
        }
        if !found {
            active.swap_remove(pos);
        }
    }
    pts.split_off(n_fixed)
}

/// Bowyer–Watson Delaunay triangulation. Returns CCW triangles covering the
/// convex hull of the nodes.
fn delaunay(nodes: &[Vec2]) -> Result<Vec<[u32; 3]>, GeometryError> {
    let n = nodes.len();
    if n < 3 {
        return Err(GeometryError::MeshGeneration("fewer than 3 nodes".into()));
    }
    let big = 40.0 * disk_radius();
    let sup = [
        Vec2::new(-big, -big),
        Vec2::new(big, -big),
        Vec2::new(0.0, big),
    ];
    let mut all: Vec<Vec2> = nodes.to_vec();
    all.extend_from_slice(&sup);
    let (s0, s1, s2) = (n as u32, n as u32 + 1, n as u32 + 2);

    let mut tris: Vec<[u32; 3]> = vec![[s0, s1, s2]];
    let mut alive: Vec<bool> = vec![true];

    for (pi, p) in nodes.iter().enumerate() {
        let mut bad: Vec<usize> = Vec::new();
        for (ti, t) in tris.iter().enumerate() {
            if alive[ti] && in_circumcircle(&all, *t, *p) {
                bad.push(ti);
            }
        }
        if bad.is_empty() {
            return Err(GeometryError::MeshGeneration(format!(
                "point {pi} not inside any circumcircle (duplicate node?)"
            )));
        }
        // Cavity boundary: directed edges whose reverse is not in the cavity.
        let mut edges: Vec<(u32, u32)> = Vec::new();
        for &ti in &bad {
            let t = tris[ti];
            for k in 0..3 {
                edges.push((t[k], t[(k + 1) % 3]));
            }
        }
        for &ti in &bad {
            alive[ti] = false;
        }
        for &(a, b) in &edges {
            if !edges.contains(&(b, a)) {
                tris.push([pi as u32, a, b]);
                alive.push(true);
            }
        }
        // Compact occasionally to keep the scan linear in live triangles.
        if tris.len() > 4 * n {
            let mut nt = Vec::with_capacity(2 * n);
            for (ti, t) in tris.iter().enumerate() {
                if alive[ti] {
                    nt.push(*t);
                }
            }
            tris = nt;
            alive = vec![true; tris.len()];
        }
    }

    let mut out = Vec::new();
    for (ti, t) in tris.iter().enumerate() {
        if alive[ti] && t.iter().all(|&v| v < n as u32) {
            let (a, b, c) = (all[t[0] as usize], all[t[1] as usize], all[t[2] as usize]);
            let orient = robust::orient2d(rc(a), rc(b), rc(c));
            if orient > 0.0 {
                out.push(*t);
            } else if orient < 0.0 {
                out.push([t[0], t[2], t[1]]);
            }
            // Exactly degenerate triangles (collinear hull runs) are dropped.
        }
    }
    Ok(out)
}

fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn rc(p: Vec2) -> robust::Coord<f64> {
    robust::Coord { x: p.x, y: p.y }
}

/// Exact in-circle predicate. Triangles are kept CCW by construction, and the
/// cavity degeneracies from exactly co-circular boundary nodes are decided
/// consistently (strictly inside only).
fn in_circumcircle(nodes: &[Vec2], t: [u32; 3], p: Vec2) -> bool {
    robust::incircle(
        rc(nodes[t[0] as usize]),
        rc(nodes[t[1] as usize]),
        rc(nodes[t[2] as usize]),
        rc(p),
    ) > 0.0
}

fn node_adjacency(n: usize, tris: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut adj = vec![Vec::new(); n];
    for t in tris {
        for k in 0..3 {
            let (a, b) = (t[k] as usize, t[(k + 1) % 3]);
            if !adj[a].contains(&b) {
                adj[a].push(b);
            }
            let (a, b) = (t[(k + 1) % 3] as usize, t[k]);
            if !adj[a].contains(&b) {
                adj[a].push(b);
            }
        }
    }
    adj
}

fn build_neighbors(tris: &[[u32; 3]]) -> Result<Vec<[i32; 3]>, GeometryError> {
    let mut map: HashMap<(u32, u32), (usize, usize)> = HashMap::new();
    let mut nb = vec![[-1i32; 3]; tris.len()];
    for (ti, t) in tris.iter().enumerate() {
        for k in 0..3 {
            let a = t[k];
            let b = t[(k + 1) % 3];
            let key = (a.min(b), a.max(b));
            if let Some(&(tj, kj)) = map.get(&key) {
                nb[ti][k] = tj as i32;
                nb[tj][kj] = ti as i32;
            } else {
                map.insert(key, (ti, k));
            }
        }
    }
    Ok(nb)
}

fn mesh_min_angle(nodes: &[Vec2], tris: &[[u32; 3]]) -> f64 {
    let mut min = f64::INFINITY;
    for t in tris {
        let a = nodes[t[0] as usize];
        let b = nodes[t[1] as usize];
        let c = nodes[t[2] as usize];
        for (p, q, r) in [(a, b, c), (b, c, a), (c, a, b)] {
            let u = q - p;
            let v = r - p;
            let ang = cross(u, v).abs().atan2(u.dot(&v));
            min = min.min(ang);
        }
    }
    min
}

/// Triangle quadrature rules in barycentric coordinates, weights normalized
/// to sum to 1 (Dunavant tables).
fn tri_rule(order: usize) -> Vec<([f64; 3], f64)> {
    match order {
        1 => vec![([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1.0)],
        2 => {
            let a = 2.0 / 3.0;
            let b = 1.0 / 6.0;
            vec![
                ([a, b, b], 1.0 / 3.0),
                ([b, a, b], 1.0 / 3.0),
                ([b, b, a], 1.0 / 3.0),
            ]
        }
        4 => {
            let mut r = Vec::new();
            for (a, w) in [
                (0.445_948_490_915_965, 0.223_381_589_678_011),
                (0.091_576_213_509_771, 0.109_951_743_655_322),
            ] {
                let b = 1.0 - 2.0 * a;
                r.push(([b, a, a], w));
                r.push(([a, b, a], w));
                r.push(([a, a, b], w));
            }
            r
        }
        6 => {
            let mut r = Vec::new();
            for (a, w) in [
                (0.063_089_014_491_502, 0.050_844_906_370_207),
                (0.249_286_745_170_910, 0.116_786_275_726_379),
            ] {
                let b = 1.0 - 2.0 * a;
                r.push(([b, a, a], w));
                r.push(([a, b, a], w));
                r.push(([a, a, b], w));
            }
            let (a, b, w) = (
                0.310_352_451_033_785,
                0.053_145_049_844_816,
                0.082_851_075_618_374,
            );
            let c = 1.0 - a - b;
            for perm in [
                [a, b, c],
                [b, a, c],
                [a, c, b],
                [b, c, a],
                [c, a, b],
                [c, b, a],
            ] {
                r.push((perm, w));
            }
            r
        }
        _ => unreachable!("validated at build"),
    }
}

fn finish_surface(
    radius: f64,
    size: SizeField,
    mesh: Mesh,
    quad_order: usize,
    anchors: &[Vec2],
) -> Result<Surface, GeometryError> {
    // Triangle quadrature points.
    let rule = tri_rule(quad_order);
    let mut quad: Vec<QuadPoint> = Vec::new();
    for (ti, t) in mesh.tris.iter().enumerate() {
        let a = mesh.nodes[t[0] as usize];
        let b = mesh.nodes[t[1] as usize];
        let c = mesh.nodes[t[2] as usize];
        let area = 0.5 * cross(b - a, c - a);
        for (bc, w) in &rule {
            let pos = a * bc[0] + b * bc[1] + c * bc[2];
            quad.push(QuadPoint { pos, w: w * area, tri: ti as u32, bary: *bc });
        }
    }

    // Lens (circular segment) quadrature: 4x4 Gauss product between each
    // boundary chord and its arc, attributed to the adjacent triangle's
    // affinely-extended shape functions.
    let nb = mesh.boundary.len();
    let tri_of_edge = |a: u32, b: u32| -> Option<usize> {
        for (ti, t) in mesh.tris.iter().enumerate() {
            for k in 0..3 {
                if t[k] == a && t[(k + 1) % 3] == b || t[k] == b && t[(k + 1) % 3] == a {
                    return Some(ti);
                }
            }
        }
        None
    };
    let (gx, gw) = crate::numerics::gauss_legendre(4);
    let (bx, bw) = crate::numerics::gauss_legendre(8);
    let mut boundary_quad: Vec<QuadPoint> = Vec::with_capacity(nb * bx.len());
    let mut lens_area_total = 0.0;
    for i in 0..nb {
        let vi = mesh.boundary[i];
        let vj = mesh.boundary[(i + 1) % nb];
        let p = mesh.nodes[vi as usize];
        let q = mesh.nodes[vj as usize];
        let ti = tri_of_edge(vi, vj).ok_or_else(|| {
            GeometryError::MeshGeneration("boundary edge without adjacent triangle".into())
        })?;
        let t = mesh.tris[ti];
        let (ta, tb, tc) = (
            mesh.nodes[t[0] as usize],
            mesh.nodes[t[1] as usize],
            mesh.nodes[t[2] as usize],
        );
        let tri_area = 0.5 * cross(tb - ta, tc - ta);
        let mut segment: Vec<QuadPoint> = Vec::with_capacity(16);
        let mut raw_area = 0.0;
        for (si, swt) in gx.iter().zip(&gw) {
            let s = 0.5 * (si + 1.0);
            let cpt = p + (q - p) * s;
            let cn = cpt.norm();
            let apt = cpt * (radius / cn);
            let cprime = q - p;
            let aprime = (cprime * cn * cn - cpt * cpt.dot(&cprime)) * (radius / (cn * cn * cn));
            for (tj, twt) in gx.iter().zip(&gw) {
                let tpar = 0.5 * (tj + 1.0);
                let pos = cpt + (apt - cpt) * tpar;
                let dxds = cprime + (aprime - cprime) * tpar;
                let dxdt = apt - cpt;
                let jac = cross(dxds, dxdt).abs();
                let w = 0.25 * swt * twt * jac;
                // Affine barycentric extension w.r.t. the adjacent triangle.
                let bary = barycentric(ta, tb, tc, tri_area, pos);
                segment.push(QuadPoint { pos, w, tri: ti as u32, bary });
                raw_area += w;
            }
        }
        // Renormalize to the exact circular-segment area so the total
        // quadrature weight reproduces |Σ| to machine precision.
        let half = 0.5 * (q - p).norm();
        let theta = 2.0 * (half / radius).asin();
        let exact = 0.5 * radius * radius * (theta - theta.sin());
        if raw_area > 0.0 {
            let scale = exact / raw_area;
            for qp in &mut segment {
                qp.w *= scale;
            }
        }
        lens_area_total += exact;
        quad.extend(segment);

        // Arc-length rule on the same edge, traces taken from the adjacent
        // triangle's affinely-extended shape functions (matching the lens).
        let th_p = p.y.atan2(p.x);
        let mut th_q = q.y.atan2(q.x);
        if th_q <= th_p {
            th_q += std::f64::consts::TAU;
        }
        for (xi, wt) in bx.iter().zip(&bw) {
            let th = th_p + 0.5 * (xi + 1.0) * (th_q - th_p);
            let pos = Vec2::new(radius * th.cos(), radius * th.sin());
            let w = 0.5 * (th_q - th_p) * radius * wt;
            let bary = barycentric(ta, tb, tc, tri_area, pos);
            boundary_quad.push(QuadPoint { pos, w, tri: ti as u32, bary });
        }
    }

    // Node weights ∫φ_i (triangle part exact, lens part by the Gauss points).
    let n = mesh.nodes.len();
    let mut node_weight: DVector<f64> = DVector::zeros(n);
    for t in &mesh.tris {
        let a = mesh.nodes[t[0] as usize];
        let b = mesh.nodes[t[1] as usize];
        let c = mesh.nodes[t[2] as usize];
        let area = 0.5 * cross(b - a, c - a);
        for k in 0..3 {
            node_weight[t[k] as usize] += area / 3.0;
        }
    }
    let n_tri_pts = mesh.tris.len() * rule.len();
    for qp in &quad[n_tri_pts..] {
        let t = mesh.tris[qp.tri as usize];
        for k in 0..3 {
            node_weight[t[k] as usize] += qp.w * qp.bary[k];
        }
    }

    // Node grid for radius queries.
    let cell = 2.0 * size.h_base();
    let mut node_grid: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in mesh.nodes.iter().enumerate() {
        let k = ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
        node_grid.entry(k).or_default().push(i as u32);
    }

    // One incident triangle per node (walk seeds).
    let mut node_tri = vec![u32::MAX; n];
    for (ti, t) in mesh.tris.iter().enumerate() {
        for k in 0..3 {
            if node_tri[t[k] as usize] == u32::MAX {
                node_tri[t[k] as usize] = ti as u32;
            }
        }
    }

    // Anchor bookkeeping.
    let mut anchor_pairs = Vec::new();
    for a in anchors {
        let mut best = (f64::INFINITY, 0u32);
        for (i, p) in mesh.nodes.iter().enumerate() {
            let d = (p - a).norm();
            if d < best.0 {
                best = (d, i as u32);
            }
        }
        if best.0 > 1e-9 {
            return Err(GeometryError::MeshGeneration(format!(
                "anchor ({}, {}) is not a mesh node (nearest at distance {:.2e})",
                a.x, a.y, best.0
            )));
        }
        anchor_pairs.push((*a, best.1));
    }

    Ok(Surface {
        radius,
        mesh,
        size,
        quad_order,
        quad,
        node_weight,
        anchors: anchor_pairs,
        node_grid,
        node_grid_cell: cell,
        node_tri,
        boundary_quad,
        lens_area_total,
    })
}

fn barycentric(a: Vec2, b: Vec2, c: Vec2, area: f64, p: Vec2) -> [f64; 3] {
    let l0 = 0.5 * cross(b - p, c - p) / area;
    let l1 = 0.5 * cross(c - p, a - p) / area;
    [l0, l1, 1.0 - l0 - l1]
}

impl Surface {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn node_count(&self) -> usize {
        self.mesh.nodes.len()
    }

    pub fn tri_count(&self) -> usize {
        self.mesh.tris.len()
    }

    pub fn quad_order(&self) -> usize {
        self.quad_order
    }

    pub fn h_base(&self) -> f64 {
        self.size.h_base()
    }

    pub fn h_local(&self, x: Vec2) -> f64 {
        self.size.eval(x)
    }

    /// Exact disk area: straight-edge polygon plus closed-form circular
    /// segments. Equals 1 to machine precision.
    pub fn area(&self) -> f64 {
        let mut poly = 0.0;
        for t in &self.mesh.tris {
            let a = self.mesh.nodes[t[0] as usize];
            let b = self.mesh.nodes[t[1] as usize];
            let c = self.mesh.nodes[t[2] as usize];
            poly += 0.5 * cross(b - a, c - a);
        }
        let nb = self.mesh.boundary.len();
        let mut seg = 0.0;
        for i in 0..nb {
            let p = self.mesh.nodes[self.mesh.boundary[i] as usize];
            let q = self.mesh.nodes[self.mesh.boundary[(i + 1) % nb] as usize];
            let theta = angle_between(p, q);
            seg += 0.5 * self.radius * self.radius * (theta - theta.sin());
        }
        poly + seg
    }

    /// Total boundary length (sum of exact arcs) = 2πR.
    pub fn boundary_length(&self) -> f64 {
        let nb = self.mesh.boundary.len();
        let mut len = 0.0;
        for i in 0..nb {
            let p = self.mesh.nodes[self.mesh.boundary[i] as usize];
            let q = self.mesh.nodes[self.mesh.boundary[(i + 1) % nb] as usize];
            len += self.radius * angle_between(p, q);
        }
        len
    }

    /// Quadrature points (triangles plus boundary lenses) at the build order.
    pub fn quad_points(&self) -> &[QuadPoint] {
        &self.quad
    }

    /// Arc-length quadrature on ∂Σ (exact circle, per boundary edge).
    pub fn boundary_quad_points(&self) -> &[QuadPoint] {
        &self.boundary_quad
    }

    /// ∫_Σ f.
    pub fn integrate(&self, mut f: impl FnMut(Vec2) -> f64) -> f64 {
        self.quad.iter().map(|q| q.w * f(q.pos)).sum()
    }

    /// ∮_∂Σ f ds.
    pub fn integrate_boundary(&self, mut f: impl FnMut(Vec2) -> f64) -> f64 {
        self.boundary_quad.iter().map(|q| q.w * f(q.pos)).sum()
    }

    /// ∫_Σ u for a P1 nodal field (exact: uses the ∫φ_i weights).
    pub fn integrate_nodal(&self, u: &DVector<f64>) -> f64 {
        self.node_weight.dot(u)
    }

    /// Weights w_i = ∫φ_i; Σ w_i = |Σ|.
    pub fn node_weights(&self) -> &DVector<f64> {
        &self.node_weight
    }

    pub fn lens_area(&self) -> f64 {
        self.lens_area_total
    }

    /// Chart at ξ; boundary charts are selected when ξ is within 1e-9 of the
    /// circle (and ξ is snapped onto it).
    pub fn make_chart(&self, xi: Vec2) -> Result<Chart, GeometryError> {
        let r = self.radius;
        if xi.norm() > r + 1e-9 {
            return Err(GeometryError::PointOutside(xi.x, xi.y));
        }
        if (xi.norm() - r).abs() < 1e-9 {
            let p = xi * (r / xi.norm());
            let alpha = p.y.atan2(p.x);
            Ok(Chart {
                kind: ChartKind::Boundary,
                xi: p,
                cos_a: alpha.cos(),
                sin_a: alpha.sin(),
                radius: r,
                r_chart: 0.75 * r,
            })
        } else {
            Ok(Chart {
                kind: ChartKind::Interior,
                xi,
                cos_a: 1.0,
                sin_a: 0.0,
                radius: r,
                r_chart: 0.5 * (r - xi.norm()),
            })
        }
    }

    /// Mesh node index matching an anchor (grading center) position.
    pub fn anchor_node(&self, xi: Vec2) -> Option<u32> {
        self.anchors
            .iter()
            .find(|(a, _)| (a - xi).norm() < 1e-9)
            .map(|&(_, i)| i)
    }

    /// Nodes within `radius` of `center`.
    pub fn nodes_within(&self, center: Vec2, radius: f64) -> Vec<u32> {
        let cell = self.node_grid_cell;
        let m = (radius / cell).ceil() as i64 + 1;
        let kx = (center.x / cell).floor() as i64;
        let ky = (center.y / cell).floor() as i64;
        let mut out = Vec::new();
        for ix in (kx - m)..=(kx + m) {
            for iy in (ky - m)..=(ky + m) {
                if let Some(list) = self.node_grid.get(&(ix, iy)) {
                    for &i in list {
                        if (self.mesh.nodes[i as usize] - center).norm() <= radius {
                            out.push(i);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn nearest_node(&self, x: Vec2) -> u32 {
        let mut r = self.node_grid_cell;
        for _ in 0..40 {
            let cand = self.nodes_within(x, r);
            if let Some(&best) = cand
                .iter()
                .min_by(|&&a, &&b| {
                    let da = (self.mesh.nodes[a as usize] - x).norm();
                    let db = (self.mesh.nodes[b as usize] - x).norm();
                    da.partial_cmp(&db).unwrap()
                })
            {
                return best;
            }
            r *= 2.0;
        }
        0
    }

    /// Locate the triangle containing x (walk from the nearest node). Points
    /// slightly outside the hull are clamped to the closest boundary triangle.
    pub fn locate(&self, x: Vec2) -> (u32, [f64; 3]) {
        let start = self.node_tri[self.nearest_node(x) as usize];
        let mut t = start;
        for _ in 0..self.mesh.tris.len() {
            let tri = self.mesh.tris[t as usize];
            let a = self.mesh.nodes[tri[0] as usize];
            let b = self.mesh.nodes[tri[1] as usize];
            let c = self.mesh.nodes[tri[2] as usize];
            let area = 0.5 * cross(b - a, c - a);
            let bc = barycentric(a, b, c, area, x);
            let (mut worst, mut wk) = (bc[0], 0usize);
            for k in 1..3 {
                if bc[k] < worst {
                    worst = bc[k];
                    wk = k;
                }
            }
            if worst >= -1e-12 {
                return (t, bc);
            }
            // Edge opposite to vertex wk is (wk+1, wk+2).
            let edge = (wk + 1) % 3;
            let nb = self.mesh.neighbors[t as usize][edge];
            if nb < 0 {
                // Clamp: project barycentrics.
                let bc = [bc[0].max(0.0), bc[1].max(0.0), bc[2].max(0.0)];
                let s = bc[0] + bc[1] + bc[2];
                return (t, [bc[0] / s, bc[1] / s, bc[2] / s]);
            }
            t = nb as u32;
        }
        let tri = self.mesh.tris[start as usize];
        let a = self.mesh.nodes[tri[0] as usize];
        let b = self.mesh.nodes[tri[1] as usize];
        let c = self.mesh.nodes[tri[2] as usize];
        (start, barycentric(a, b, c, 0.5 * cross(b - a, c - a), x))
    }

    /// P1 evaluation of a nodal field.
    pub fn eval_p1(&self, u: &DVector<f64>, x: Vec2) -> f64 {
        let (t, bc) = self.locate(x);
        let tri = self.mesh.tris[t as usize];
        bc[0] * u[tri[0] as usize] + bc[1] * u[tri[1] as usize] + bc[2] * u[tri[2] as usize]
    }

    /// Weighted quadratic least-squares fit of a nodal field around `center`;
    /// recovers value, gradient and Hessian. The patch radius grows until at
    /// least 10 nodes participate.
    pub fn fit_quadratic(
        &self,
        u: &DVector<f64>,
        center: Vec2,
        radius: f64,
    ) -> Result<QuadFit, GeometryError> {
        let mut r = radius;
        for _ in 0..8 {
            let ids = self.nodes_within(center, r);
            if ids.len() >= 10 {
                let mut a = nalgebra::DMatrix::zeros(ids.len(), 6);
                let mut rhs = DVector::zeros(ids.len());
                for (row, &i) in ids.iter().enumerate() {
                    let d = self.mesh.nodes[i as usize] - center;
                    let wt = (1.0 - (d.norm() / (1.05 * r)).powi(2)).max(0.05);
                    a[(row, 0)] = wt;
                    a[(row, 1)] = wt * d.x;
                    a[(row, 2)] = wt * d.y;
                    a[(row, 3)] = wt * 0.5 * d.x * d.x;
                    a[(row, 4)] = wt * d.x * d.y;
                    a[(row, 5)] = wt * 0.5 * d.y * d.y;
                    rhs[row] = wt * u[i as usize];
                }
                let svd = a.svd(true, true);
                let coef = svd
                    .solve(&rhs, 1e-12)
                    .map_err(|e| GeometryError::MeshGeneration(e.to_string()))?;
                return Ok(QuadFit {
                    value: coef[0],
                    grad: Vec2::new(coef[1], coef[2]),
                    hess: Matrix2::new(coef[3], coef[4], coef[4], coef[5]),
                });
            }
            r *= 1.5;
        }
        Err(GeometryError::MeshGeneration(
            "quadratic fit: not enough nodes in patch".into(),
        ))
    }
}

fn angle_between(p: Vec2, q: Vec2) -> f64 {
    let d = cross(p, q).atan2(p.dot(&q));
    if d < 0.0 {
        d + 2.0 * PI
    } else {
        d
    }
}
