//! Uniform right-triangle P1 discretization of the unit square: mesh,
//! stiffness/mass/lumped-mass assembly on interior nodes, data ingestion,
//! quasi-interpolation, and discrete L1 norms.

use crate::sparse::CsrMatrix;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum FemError {
    /// n_side < 2 leaves no interior degrees of freedom.
    TooCoarse { n_side: usize },
    NegativeCoefficient { c0: f64 },
    NonFiniteSample { x: f64, y: f64 },
    LengthMismatch { expected: usize, got: usize },
}

impl fmt::Display for FemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FemError::TooCoarse { n_side } => {
                write!(f, "n_side must be at least 2 (got {n_side}): no interior DOF")
            }
            FemError::NegativeCoefficient { c0 } => {
                write!(f, "reaction coefficient must be nonnegative (got {c0})")
            }
            FemError::NonFiniteSample { x, y } => {
                write!(f, "field evaluated to a non-finite value at ({x}, {y})")
            }
            FemError::LengthMismatch { expected, got } => {
                write!(f, "coefficient vector has length {got}, expected {expected}")
            }
        }
    }
}

impl std::error::Error for FemError {}

/// Uniform triangulation of [0,1]^2: every cell is split by its
/// bottom-left-to-top-right diagonal, so each interior node has exactly six
/// incident triangles and the diagonal neighbors (+1,+1)/(-1,-1) are mesh edges.
#[derive(Debug, Clone)]
pub struct TriMesh {
    n_side: usize,
    h: f64,
    node_coords: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
    dof_of_node: Vec<Option<usize>>,
    node_of_dof: Vec<usize>,
}

impl TriMesh {
    pub fn unit_square(n_side: usize) -> Result<Self, FemError> {
        if n_side < 2 {
            return Err(FemError::TooCoarse { n_side });
        }
        let np = n_side + 1;
        let h = 1.0 / n_side as f64;
        let mut node_coords = Vec::with_capacity(np * np);
        for j in 0..np {
            for i in 0..np {
                node_coords.push([i as f64 * h, j as f64 * h]);
            }
        }
        let node = |i: usize, j: usize| j * np + i;
        let mut elements = Vec::with_capacity(2 * n_side * n_side);
        for j in 0..n_side {
            for i in 0..n_side {
                // Both triangles oriented counterclockwise.
                elements.push([node(i, j), node(i + 1, j), node(i + 1, j + 1)]);
                elements.push([node(i, j), node(i + 1, j + 1), node(i, j + 1)]);
            }
        }
        let mut dof_of_node = vec![None; np * np];
        let mut node_of_dof = Vec::with_capacity((n_side - 1) * (n_side - 1));
        for j in 1..n_side {
            for i in 1..n_side {
                dof_of_node[node(i, j)] = Some(node_of_dof.len());
                node_of_dof.push(node(i, j));
            }
        }
        Ok(TriMesh {
            n_side,
            h,
            node_coords,
            elements,
            dof_of_node,
            node_of_dof,
        })
    }

    pub fn n_side(&self) -> usize {
        self.n_side
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_dof(&self) -> usize {
        self.node_of_dof.len()
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn node_xy(&self, node: usize) -> [f64; 2] {
        self.node_coords[node]
    }

    pub fn dof_of_node(&self, node: usize) -> Option<usize> {
        self.dof_of_node[node]
    }

    pub fn node_of_dof(&self, dof: usize) -> usize {
        self.node_of_dof[dof]
    }

    pub fn dof_xy(&self, dof: usize) -> [f64; 2] {
        self.node_coords[self.node_of_dof[dof]]
    }

    /// Value of the P1 function with interior coefficients `z` (zero on the
    /// boundary) at an arbitrary point of [0,1]^2.
    pub fn eval_p1(&self, z: &[f64], x: f64, y: f64) -> f64 {
        assert_eq!(z.len(), self.n_dof(), "coefficient length mismatch");
        let n = self.n_side;
        let np = n + 1;
        let cx = ((x / self.h).floor() as isize).clamp(0, n as isize - 1) as usize;
        let cy = ((y / self.h).floor() as isize).clamp(0, n as isize - 1) as usize;
        let xi = (x - cx as f64 * self.h) / self.h;
        let eta = (y - cy as f64 * self.h) / self.h;
        let val = |i: usize, j: usize| -> f64 {
            match self.dof_of_node[j * np + i] {
                Some(d) => z[d],
                None => 0.0,
            }
        };
        if xi >= eta {
            // Lower triangle: vertices (cx,cy), (cx+1,cy), (cx+1,cy+1).
            val(cx, cy) * (1.0 - xi) + val(cx + 1, cy) * (xi - eta) + val(cx + 1, cy + 1) * eta
        } else {
            // Upper triangle: vertices (cx,cy), (cx+1,cy+1), (cx,cy+1).
            val(cx, cy) * (1.0 - eta) + val(cx + 1, cy + 1) * xi + val(cx, cy + 1) * (eta - xi)
        }
    }
}

/// Interior-node operators: stiffness (with optional reaction term), consistent
/// mass, and the diagonal lumped mass. `gamma` is the constant with
/// zᵀMz ≤ zᵀWz ≤ gamma·zᵀMz on this mesh family (4 in 2D).
#[derive(Debug, Clone)]
pub struct FemOperators {
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
    pub lumped: Vec<f64>,
    pub gamma: f64,
}

impl FemOperators {
    pub fn n_dof(&self) -> usize {
        self.lumped.len()
    }
}

fn element_geometry(mesh: &TriMesh, elem: &[usize; 3]) -> ([[f64; 2]; 3], f64) {
    let p: [[f64; 2]; 3] = [
        mesh.node_xy(elem[0]),
        mesh.node_xy(elem[1]),
        mesh.node_xy(elem[2]),
    ];
    let area = 0.5
        * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
    (p, area)
}

/// Assembles K (= stiffness + c0·mass), M, and W over interior DOFs by exact
/// element integration of P1 basis products.
pub fn assemble_operators(mesh: &TriMesh, c0: f64) -> Result<FemOperators, FemError> {
    if !(c0 >= 0.0) {
        return Err(FemError::NegativeCoefficient { c0 });
    }
    let n_dof = mesh.n_dof();
    let mut k_trip = Vec::new();
    let mut m_trip = Vec::new();
    let mut lumped = vec![0.0; n_dof];
    for elem in mesh.elements() {
        let (p, area) = element_geometry(mesh, elem);
        debug_assert!(area > 0.0, "elements must be counterclockwise");
        // Gradient coefficients of the barycentric basis: grad phi_l = (b_l, c_l)/(2A).
        let b = [
            p[1][1] - p[2][1],
            p[2][1] - p[0][1],
            p[0][1] - p[1][1],
        ];
        let c = [
            p[2][0] - p[1][0],
            p[0][0] - p[2][0],
            p[1][0] - p[0][0],
        ];
        for l in 0..3 {
            let Some(row) = mesh.dof_of_node(elem[l]) else {
                continue;
            };
            lumped[row] += area / 3.0;
            for m in 0..3 {
                let Some(col) = mesh.dof_of_node(elem[m]) else {
                    continue;
                };
                let k_lm = (b[l] * b[m] + c[l] * c[m]) / (4.0 * area);
                let m_lm = if l == m { area / 6.0 } else { area / 12.0 };
                k_trip.push((row, col, k_lm + c0 * m_lm));
                m_trip.push((row, col, m_lm));
            }
        }
    }
    Ok(FemOperators {
        stiffness: CsrMatrix::from_triplets(n_dof, n_dof, &k_trip),
        mass: CsrMatrix::from_triplets(n_dof, n_dof, &m_trip),
        lumped,
        gamma: 4.0,
    })
}

/// Values of `f` at the interior nodes, in DOF order.
pub fn nodal_sample<F>(mesh: &TriMesh, f: F) -> Result<Vec<f64>, FemError>
where
    F: Fn(f64, f64) -> f64,
{
    let mut out = Vec::with_capacity(mesh.n_dof());
    for dof in 0..mesh.n_dof() {
        let [x, y] = mesh.dof_xy(dof);
        let v = f(x, y);
        if !v.is_finite() {
            return Err(FemError::NonFiniteSample { x, y });
        }
        out.push(v);
    }
    Ok(out)
}

/// Degree-4 quadrature on the reference triangle: (barycentric point, weight),
/// weights summing to 1.
const TRI_QUAD_DEG4: [([f64; 3], f64); 6] = [
    (
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        0.223381589678011,
    ),
    (
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        0.223381589678011,
    ),
    (
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        0.223381589678011,
    ),
    (
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        0.109951743655322,
    ),
    (
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        0.109951743655322,
    ),
    (
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
        0.109951743655322,
    ),
];

/// Local averages pi_i(w) = (integral of w·phi_i) / (integral of phi_i) at
/// interior nodes; reproduces constants and maps P1 coefficients z to W^{-1}Mz.
pub fn quasi_interpolate<F>(
    mesh: &TriMesh,
    ops: &FemOperators,
    w: F,
) -> Result<Vec<f64>, FemError>
where
    F: Fn(f64, f64) -> f64,
{
    let n_dof = mesh.n_dof();
    assert_eq!(ops.n_dof(), n_dof, "operators do not match the mesh");
    let mut numer = vec![0.0; n_dof];
    for elem in mesh.elements() {
        let (p, area) = element_geometry(mesh, elem);
        for (bary, weight) in TRI_QUAD_DEG4 {
            let x = bary[0] * p[0][0] + bary[1] * p[1][0] + bary[2] * p[2][0];
            let y = bary[0] * p[0][1] + bary[1] * p[1][1] + bary[2] * p[2][1];
            let v = w(x, y);
            if !v.is_finite() {
                return Err(FemError::NonFiniteSample { x, y });
            }
            for l in 0..3 {
                if let Some(dof) = mesh.dof_of_node(elem[l]) {
                    numer[dof] += weight * area * v * bary[l];
                }
            }
        }
    }
    Ok(numer
        .iter()
        .zip(&ops.lumped)
        .map(|(n, w)| n / w)
        .collect())
}

/// L2(Omega) distance between the P1 function with coefficients `z` and a
/// smooth field, by degree-4 quadrature per element.
pub fn l2_error_vs_field<F>(mesh: &TriMesh, z: &[f64], f: F) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    assert_eq!(z.len(), mesh.n_dof(), "coefficient length mismatch");
    let mut acc = 0.0;
    for elem in mesh.elements() {
        let (p, area) = element_geometry(mesh, elem);
        let v: Vec<f64> = elem
            .iter()
            .map(|&node| mesh.dof_of_node(node).map_or(0.0, |d| z[d]))
            .collect();
        for (bary, weight) in TRI_QUAD_DEG4 {
            let x = bary[0] * p[0][0] + bary[1] * p[1][0] + bary[2] * p[2][0];
            let y = bary[0] * p[0][1] + bary[1] * p[1][1] + bary[2] * p[2][1];
            let uh = bary[0] * v[0] + bary[1] * v[1] + bary[2] * v[2];
            let d = uh - f(x, y);
            acc += weight * area * d * d;
        }
    }
    acc.sqrt()
}

/// The three discrete L1 quantities of a P1 coefficient vector:
/// (trueL1, mL1, wL1) = (∫|z_h|, ‖Mz‖₁, ‖Wz‖₁), with ∫|z_h| exact per element
/// (each triangle split along the zero line of the linear function).
/// Always mL1 ≤ trueL1 ≤ wL1.
pub fn discrete_l1_norms(
    ops: &FemOperators,
    mesh: &TriMesh,
    z: &[f64],
) -> Result<(f64, f64, f64), FemError> {
    if z.len() != mesh.n_dof() {
        return Err(FemError::LengthMismatch {
            expected: mesh.n_dof(),
            got: z.len(),
        });
    }
    let mut true_l1 = 0.0;
    for elem in mesh.elements() {
        let (_, area) = element_geometry(mesh, elem);
        let v: Vec<f64> = elem
            .iter()
            .map(|&node| mesh.dof_of_node(node).map_or(0.0, |d| z[d]))
            .collect();
        true_l1 += abs_integral_linear(area, [v[0], v[1], v[2]]);
    }
    let mz = ops.mass.matvec(z);
    let m_l1: f64 = mz.iter().map(|v| v.abs()).sum();
    let w_l1: f64 = z
        .iter()
        .zip(&ops.lumped)
        .map(|(zi, wi)| wi * zi.abs())
        .sum();
    Ok((true_l1, m_l1, w_l1))
}

/// Exact integral of |linear function| over a triangle of given area with the
/// given vertex values. If the values change sign, the zero line cuts off a
/// sub-triangle at the single strictly-minority vertex.
fn abs_integral_linear(area: f64, v: [f64; 3]) -> f64 {
    let total = area * (v[0] + v[1] + v[2]) / 3.0;
    let pos = v.iter().filter(|&&x| x > 0.0).count();
    let neg = v.iter().filter(|&&x| x < 0.0).count();
    if pos == 0 || neg == 0 {
        return total.abs();
    }
    // Pick the strict-minority side; it has exactly one vertex.
    let want_positive = pos <= neg;
    let a = (0..3)
        .find(|&i| if want_positive { v[i] > 0.0 } else { v[i] < 0.0 })
        .unwrap();
    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
    let t_ab = v[a] / (v[a] - v[b]);
    let t_ac = v[a] / (v[a] - v[c]);
    let minor = area * t_ab * t_ac * v[a] / 3.0;
    (2.0 * minor - total).abs()
}

/// Mesh and operators rendered as a JSON document (node list, element list,
/// CSR triplets) for debugging.
pub fn debug_dump(mesh: &TriMesh, ops: &FemOperators) -> String {
    let mut s = String::new();
    s.push_str("{\n  \"n_side\": ");
    s.push_str(&mesh.n_side().to_string());
    s.push_str(",\n  \"nodes\": [");
    for (i, [x, y]) in (0..mesh.n_nodes()).map(|n| (n, mesh.node_xy(n))) {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("[{x:.17e},{y:.17e}]"));
    }
    s.push_str("],\n  \"elements\": [");
    for (i, e) in mesh.elements().iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("[{},{},{}]", e[0], e[1], e[2]));
    }
    s.push_str("],\n  \"interior_nodes\": [");
    for dof in 0..mesh.n_dof() {
        if dof > 0 {
            s.push(',');
        }
        s.push_str(&mesh.node_of_dof(dof).to_string());
    }
    s.push_str("],\n");
    let dump_csr = |s: &mut String, name: &str, m: &CsrMatrix| {
        s.push_str(&format!("  \"{name}\": ["));
        for (k, (i, j, v)) in m.triplets().into_iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            s.push_str(&format!("[{i},{j},{v:.17e}]"));
        }
        s.push_str("]");
    };
    dump_csr(&mut s, "stiffness", &ops.stiffness);
    s.push_str(",\n");
    dump_csr(&mut s, "mass", &ops.mass);
    s.push_str(",\n  \"lumped\": [");
    for (i, w) in ops.lumped.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("{w:.17e}"));
    }
    s.push_str("]\n}\n");
    s
}
