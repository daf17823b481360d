//! TOML configuration: [problem], [solver], [study] sections with validation.

use crate::error::HarnessError;
use crate::expr::Expr;
use octrl_core::fem::{assemble_operators, nodal_sample, TriMesh};
use octrl_core::prox::BoxBounds;
use octrl_core::solver::ProblemSpec;
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: ProblemSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub study: StudySection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// Mesh subdivisions per side for single-mesh commands.
    pub n_side: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    /// Control bounds a <= 0 <= b.
    pub a: f64,
    pub b: f64,
    /// Target state, as an analytic expression in x, y.
    pub y_d: String,
    /// Residual source term; defaults to zero.
    pub y_r: Option<String>,
    /// Zeroth-order coefficient of the elliptic operator; defaults to zero.
    pub c0: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub kkt_tol: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    /// Mesh list for the study commands; strictly increasing.
    pub meshes: Option<Vec<usize>>,
    /// Control accuracy for k_h(eps); defaults to 1e-3 * (b - a).
    pub epsilon: Option<f64>,
    /// Initial dual triple for the tau study, as expressions; default zero.
    pub z0_lambda: Option<String>,
    pub z0_p: Option<String>,
    pub z0_mu: Option<String>,
}

/// A validated configuration with parsed expressions.
#[derive(Debug)]
pub struct Config {
    pub n_side: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub bounds: BoxBounds,
    pub c0: f64,
    pub yd_expr: Expr,
    pub yr_expr: Expr,
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub meshes: Option<Vec<usize>>,
    pub epsilon: f64,
    pub z0_lambda: Expr,
    pub z0_p: Expr,
    pub z0_mu: Expr,
}

pub const DEFAULT_KKT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 20_000;

impl Config {
    pub fn from_path(path: &Path) -> Result<Config, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Config::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Config, HarnessError> {
        let file: ConfigFile = toml::from_str(text)
            .map_err(|e| HarnessError::Config(format!("config parse error: {e}")))?;
        Config::validate(file)
    }

    fn validate(file: ConfigFile) -> Result<Config, HarnessError> {
        let p = file.problem;
        if !(p.alpha > 0.0 && p.alpha.is_finite()) {
            return Err(HarnessError::Validation(format!(
                "problem.alpha must be positive, got {}",
                p.alpha
            )));
        }
        if !(p.beta > 0.0 && p.beta.is_finite()) {
            return Err(HarnessError::Validation(format!(
                "problem.beta must be positive, got {}",
                p.beta
            )));
        }
        if !(p.a <= 0.0 && 0.0 <= p.b && p.a.is_finite() && p.b.is_finite() && p.a < p.b) {
            return Err(HarnessError::Validation(format!(
                "problem bounds must satisfy a <= 0 <= b with a < b, got [{}, {}]",
                p.a, p.b
            )));
        }
        let bounds = BoxBounds::new(p.a, p.b)
            .map_err(|e| HarnessError::Validation(format!("problem bounds: {e}")))?;
        if let Some(n) = p.n_side {
            if n < 2 {
                return Err(HarnessError::Validation(format!(
                    "problem.n_side must be at least 2, got {n}"
                )));
            }
        }
        let c0 = p.c0.unwrap_or(0.0);
        if !(c0 >= 0.0 && c0.is_finite()) {
            return Err(HarnessError::Validation(format!(
                "problem.c0 must be nonnegative, got {c0}"
            )));
        }
        let parse_expr = |field: &str, src: &str| {
            Expr::parse(src).map_err(|e| {
                HarnessError::Validation(format!("expression {field} = \"{src}\": {e}"))
            })
        };
        let yd_expr = parse_expr("problem.y_d", &p.y_d)?;
        let yr_expr = parse_expr("problem.y_r", p.y_r.as_deref().unwrap_or("0"))?;

        let s = file.solver;
        let kkt_tol = s.kkt_tol.unwrap_or(DEFAULT_KKT_TOL);
        if !(kkt_tol > 0.0 && kkt_tol.is_finite()) {
            return Err(HarnessError::Validation(format!(
                "solver.kkt_tol must be positive, got {kkt_tol}"
            )));
        }
        let max_iter = s.max_iter.unwrap_or(DEFAULT_MAX_ITER);
        if max_iter == 0 {
            return Err(HarnessError::Validation(
                "solver.max_iter must be at least 1".into(),
            ));
        }

        let st = file.study;
        if let Some(meshes) = &st.meshes {
            if meshes.iter().any(|&n| n < 2) {
                return Err(HarnessError::Validation(
                    "study.meshes entries must be at least 2".into(),
                ));
            }
            if meshes.windows(2).any(|w| w[0] >= w[1]) {
                return Err(HarnessError::Validation(
                    "study.meshes must be strictly increasing".into(),
                ));
            }
        }
        let epsilon = st.epsilon.unwrap_or(1e-3 * (p.b - p.a));
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(HarnessError::Validation(format!(
                "study.epsilon must be positive, got {epsilon}"
            )));
        }
        let z0_lambda = parse_expr("study.z0_lambda", st.z0_lambda.as_deref().unwrap_or("0"))?;
        let z0_p = parse_expr("study.z0_p", st.z0_p.as_deref().unwrap_or("0"))?;
        let z0_mu = parse_expr("study.z0_mu", st.z0_mu.as_deref().unwrap_or("0"))?;

        Ok(Config {
            n_side: p.n_side,
            alpha: p.alpha,
            beta: p.beta,
            bounds,
            c0,
            yd_expr,
            yr_expr,
            kkt_tol,
            max_iter,
            meshes: st.meshes,
            epsilon,
            z0_lambda,
            z0_p,
            z0_mu,
        })
    }

    /// Instantiate the problem on one mesh: expressions sampled at the nodes.
    pub fn build_spec(&self, n_side: usize) -> Result<ProblemSpec, HarnessError> {
        let mesh = TriMesh::unit_square(n_side)
            .map_err(|e| HarnessError::Validation(format!("mesh n_side = {n_side}: {e}")))?;
        let ops = assemble_operators(&mesh, self.c0)
            .map_err(|e| HarnessError::Validation(format!("assembly at n_side = {n_side}: {e}")))?;
        let yd = nodal_sample(&mesh, |x, y| self.yd_expr.eval(x, y)).map_err(|e| {
            HarnessError::Validation(format!("sampling y_d at n_side = {n_side}: {e}"))
        })?;
        let yr = nodal_sample(&mesh, |x, y| self.yr_expr.eval(x, y)).map_err(|e| {
            HarnessError::Validation(format!("sampling y_r at n_side = {n_side}: {e}"))
        })?;
        ProblemSpec::new(mesh, ops, self.alpha, self.beta, self.bounds, yd, yr)
            .map_err(|e| HarnessError::Validation(format!("problem assembly: {e}")))
    }

    /// Mesh list for a study command, with the minimum-count check.
    pub fn study_meshes(&self, min_count: usize) -> Result<&[usize], HarnessError> {
        let meshes = self
            .meshes
            .as_deref()
            .ok_or_else(|| HarnessError::Validation("study.meshes is required".into()))?;
        if meshes.len() < min_count {
            return Err(HarnessError::Validation(format!(
                "need >= {min_count} meshes, got {}",
                meshes.len()
            )));
        }
        Ok(meshes)
    }

    /// The single mesh used by solve and the rate study.
    pub fn single_mesh(&self) -> Result<usize, HarnessError> {
        self.n_side.ok_or_else(|| {
            HarnessError::Validation("problem.n_side is required for this command".into())
        })
    }
}
