//! Frozen barycenter maps. A [`StageMap`] holds everything one solved
//! barycenter problem needs for closed-form inversion,
//! `X(y, z) = y + 2λ Σ_k σ_k f_k(z) ∇g_k(y)`, together with its y-Jacobian
//! and the extracted factors f_k(z). A [`BarycenterModel`] chains the stage
//! maps of successive problems; simulation and density evaluation compose
//! the inversions in reverse training order.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::basis::OrthoBasis;
use crate::data::{embed_row, RawValue, Schema};
use crate::kernelspace::KernelSpace;
use crate::{Error, Result};

/// The z side of a stage: either a kernel feature space with its
/// orthogonalization and left principal vectors, or the fixed two-valued
/// function of the binary-covariate optimal-transport reduction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FactorSide {
    Kernel {
        space: KernelSpace,
        basis: OrthoBasis,
        /// n_z × K left principal vectors of A.
        #[serde(with = "crate::serialize::mat2")]
        a_vecs: Array2<f64>,
    },
    Binary {
        /// f_k evaluated at z = 0, length K.
        #[serde(with = "crate::serialize::vec1")]
        at_zero: Array1<f64>,
        /// f_k evaluated at z = 1, length K.
        #[serde(with = "crate::serialize::vec1")]
        at_one: Array1<f64>,
    },
}

/// One solved barycenter problem, frozen at termination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageMap {
    pub f_side: FactorSide,
    pub g_space: KernelSpace,
    pub g_basis: OrthoBasis,
    /// n_y × K right principal vectors of A.
    #[serde(with = "crate::serialize::mat2")]
    pub b_vecs: Array2<f64>,
    /// Top singular values of A at termination, length K.
    #[serde(with = "crate::serialize::vec1")]
    pub sigmas: Array1<f64>,
    /// Penalization parameter frozen at termination.
    pub lambda: f64,
}

/// Kernel values below e^{−8} at every F center mark a query z outside the
/// training support; inversion there extrapolates.
const EXTRAPOLATION_KERNEL_FLOOR: f64 = 3.354_626_279_025e-4; // e^{-8}

impl StageMap {
    /// Number of tracked singular triplets.
    pub fn k(&self) -> usize {
        self.sigmas.len()
    }

    /// Extracted factors f_k(z) = F(z)·B_z·a_k (zero-mean-adjusted F), one
    /// row per query point, K columns.
    pub fn extract_factors(&self, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.f_side {
            FactorSide::Kernel { space, basis, a_vecs } => {
                let features = space.eval(z)?;
                let q = basis.apply(&features.view())?;
                Ok(q.dot(a_vecs))
            }
            FactorSide::Binary { at_zero, at_one } => {
                if z.ncols() != 1 {
                    return Err(Error::shape("StageMap::extract_factors (binary)", 1usize, z.ncols()));
                }
                let k = self.k();
                let mut out = Array2::zeros((z.nrows(), k));
                for (i, row) in z.rows().into_iter().enumerate() {
                    let src = if row[0] < 0.5 { at_zero } else { at_one };
                    for j in 0..k {
                        out[(i, j)] = src[j];
                    }
                }
                Ok(out)
            }
        }
    }

    /// True when z falls outside the effective support of the F kernels
    /// (every raw kernel value below e^{−8}); the delta-mollifier identity
    /// behind factor extraction is only valid inside the support.
    pub fn extrapolates(&self, z: &ArrayView1<f64>) -> bool {
        match &self.f_side {
            FactorSide::Kernel { space, .. } => {
                if space.centers().is_empty() {
                    return false;
                }
                let row = z.to_owned().insert_axis(Axis(0));
                match space.eval_raw(&row.view()) {
                    Ok(vals) => vals.iter().cloned().fold(f64::MIN, f64::max) < EXTRAPOLATION_KERNEL_FLOOR,
                    Err(_) => true,
                }
            }
            FactorSide::Binary { .. } => false,
        }
    }

    /// B_y·b_vecs, the coefficient matrix turning feature gradients into ∇g_k.
    fn g_coefficients(&self) -> Array2<f64> {
        self.g_basis.b().dot(&self.b_vecs)
    }

    /// Closed-form inversion X(y, z) = y + 2λ Σ_k σ_k f_k(z) ∇g_k(y) with
    /// one z row per y row.
    pub fn invert(&self, y: &ArrayView2<f64>, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if y.nrows() != z.nrows() {
            return Err(Error::shape("StageMap::invert", y.nrows(), z.nrows()));
        }
        if y.iter().any(|v| !v.is_finite()) || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite inversion inputs".into()));
        }
        let factors = self.extract_factors(z)?;
        self.invert_with_factors(y, &factors.view())
    }

    /// Inversion at a single covariate value shared by all y rows.
    pub fn invert_at(&self, y: &ArrayView2<f64>, z: &ArrayView1<f64>) -> Result<Array2<f64>> {
        let zrow = z.to_owned().insert_axis(Axis(0));
        let f_one = self.extract_factors(&zrow.view())?;
        let mut factors = Array2::zeros((y.nrows(), self.k()));
        for mut row in factors.rows_mut() {
            row.assign(&f_one.row(0));
        }
        self.invert_with_factors(y, &factors.view())
    }

    fn invert_with_factors(&self, y: &ArrayView2<f64>, factors: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let k = self.k();
        let mut out = y.to_owned();
        if k == 0 {
            return Ok(out);
        }
        let grads = self.g_space.eval_grad(y)?; // p × m × d
        let w = self.g_coefficients(); // m × K
        let d = y.ncols();
        let m = w.nrows();
        // t_{ij} = Σ_k σ_k f_k(z_i) w_{jk}
        let coef = factors * &self.sigmas; // p × K (row-wise scaling)
        let t = coef.dot(&w.t()); // p × m
        for i in 0..y.nrows() {
            for j in 0..m {
                let tij = t[(i, j)];
                if tij == 0.0 {
                    continue;
                }
                for a in 0..d {
                    out[(i, a)] += 2.0 * self.lambda * tij * grads[(i, j, a)];
                }
            }
        }
        Ok(out)
    }

    /// y-Jacobian of the inversion, one d×d block per point:
    /// ∂X^p/∂y^q = δ_pq + 2λ Σ_k σ_k f_k(z) (∂²G/∂y^p∂y^q · B_y · b_k).
    pub fn jacobian(&self, y: &ArrayView2<f64>, z: &ArrayView2<f64>) -> Result<Array3<f64>> {
        if y.nrows() != z.nrows() {
            return Err(Error::shape("StageMap::jacobian", y.nrows(), z.nrows()));
        }
        let factors = self.extract_factors(z)?;
        self.jacobian_with_factors(y, &factors.view())
    }

    /// Jacobian at a single covariate value shared by all y rows.
    pub fn jacobian_at(&self, y: &ArrayView2<f64>, z: &ArrayView1<f64>) -> Result<Array3<f64>> {
        let zrow = z.to_owned().insert_axis(Axis(0));
        let f_one = self.extract_factors(&zrow.view())?;
        let mut factors = Array2::zeros((y.nrows(), self.k()));
        for mut row in factors.rows_mut() {
            row.assign(&f_one.row(0));
        }
        self.jacobian_with_factors(y, &factors.view())
    }

    fn jacobian_with_factors(&self, y: &ArrayView2<f64>, factors: &ArrayView2<f64>) -> Result<Array3<f64>> {
        let p = y.nrows();
        let d = y.ncols();
        let mut out = Array3::zeros((p, d, d));
        for i in 0..p {
            for a in 0..d {
                out[(i, a, a)] = 1.0;
            }
        }
        if self.k() == 0 {
            return Ok(out);
        }
        let hess = self.g_space.eval_hess(y)?; // p × m × d × d
        let w = self.g_coefficients();
        let m = w.nrows();
        let coef = factors * &self.sigmas;
        let t = coef.dot(&w.t()); // p × m
        for i in 0..p {
            for j in 0..m {
                let tij = t[(i, j)];
                if tij == 0.0 {
                    continue;
                }
                for a in 0..d {
                    for b in 0..d {
                        out[(i, a, b)] += 2.0 * self.lambda * tij * hess[(i, j, a, b)];
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// A fitted (possibly multi-run) barycenter model: stage maps in application
/// order x→y, the final barycenter samples, and the covariate schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarycenterModel {
    pub schema: Schema,
    pub stages: Vec<StageMap>,
    #[serde(with = "crate::serialize::mat2")]
    pub y_final: Array2<f64>,
    pub provenance: Provenance,
}

pub const MODEL_VERSION: &str = "otbary-model/1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: String,
    #[serde(flatten)]
    model: BarycenterModel,
}

/// Conditional simulation output. `extrapolation` is set when the target z
/// lies outside the kernel support of any stage.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub samples: Array2<f64>,
    pub extrapolation: bool,
}

/// Conditional quantile curves on a z grid; `monotonic[i]` is false when
/// ∂X/∂y ≤ 0 somewhere along the i-th z row (values there are unreliable).
#[derive(Debug, Clone)]
pub struct QuantileCurves {
    /// One row per z grid point, one column per probability level.
    pub values: Array2<f64>,
    pub monotonic: Vec<bool>,
}

impl BarycenterModel {
    pub fn d_x(&self) -> usize {
        self.y_final.ncols()
    }

    pub fn n(&self) -> usize {
        self.y_final.nrows()
    }

    /// Apply the stage inversions in reverse training order at a fixed
    /// embedded covariate value: maps barycenter points to data space.
    pub fn push_back_at(&self, y: &ArrayView2<f64>, z_emb: &ArrayView1<f64>) -> Result<Array2<f64>> {
        let mut cur = y.to_owned();
        for stage in self.stages.iter().rev() {
            cur = stage.invert_at(&cur.view(), z_emb)?;
        }
        Ok(cur)
    }

    /// Same as [`push_back_at`](Self::push_back_at), also accumulating the
    /// determinant of the composite y-Jacobian per point.
    pub fn push_back_with_jacobian(
        &self,
        y: &ArrayView2<f64>,
        z_emb: &ArrayView1<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let p = y.nrows();
        let d = y.ncols();
        let mut cur = y.to_owned();
        let mut dets = Array1::ones(p);
        for stage in self.stages.iter().rev() {
            let jac = stage.jacobian_at(&cur.view(), z_emb)?;
            for i in 0..p {
                let block = nalgebra::DMatrix::from_fn(d, d, |a, b| jac[(i, a, b)]);
                dets[i] *= block.determinant();
            }
            cur = stage.invert_at(&cur.view(), z_emb)?;
        }
        Ok((cur, dets))
    }

    /// Whether any stage extrapolates at the embedded covariate value.
    pub fn extrapolates(&self, z_emb: &ArrayView1<f64>) -> bool {
        self.stages.iter().any(|s| s.extrapolates(z_emb))
    }

    /// Embed a raw covariate row per the model schema.
    pub fn embed(&self, z_star: &[RawValue]) -> Result<Array1<f64>> {
        embed_row(&self.schema, z_star)
    }

    /// Simulate ρ(x|z*): push the barycenter samples (optionally a subset)
    /// back through every stage at the target covariate value.
    pub fn simulate_conditional(&self, z_star: &[RawValue], subset: Option<&[usize]>) -> Result<Simulation> {
        let z_emb = self.embed(z_star)?;
        let y = match subset {
            None => self.y_final.clone(),
            Some(idx) => {
                let mut sel = Array2::zeros((idx.len(), self.d_x()));
                for (r, &i) in idx.iter().enumerate() {
                    if i >= self.n() {
                        return Err(Error::InvalidInput(format!("subset index {i} out of range")));
                    }
                    sel.row_mut(r).assign(&self.y_final.row(i));
                }
                sel
            }
        };
        let samples = self.push_back_at(&y.view(), &z_emb.view())?;
        Ok(Simulation { samples, extrapolation: self.extrapolates(&z_emb.view()) })
    }

    /// Conditional quantile curves for 1D outcomes: the q-quantile of
    /// ρ(x|z) is X(quantile_q(y), z) by monotonicity of the 1D map; the
    /// derivative sign is checked numerically per grid point.
    pub fn conditional_quantiles(&self, z_grid: &[Vec<RawValue>], probs: &[f64]) -> Result<QuantileCurves> {
        if self.d_x() != 1 {
            return Err(Error::InvalidInput("conditional quantiles require d_x = 1".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
        }
        let ys: Vec<f64> = self.y_final.column(0).to_vec();
        let y_q: Vec<f64> = probs.iter().map(|&q| crate::stats::quantile(&ys, q)).collect();
        let yq_mat = Array2::from_shape_vec((y_q.len(), 1), y_q).unwrap();
        let mut values = Array2::zeros((z_grid.len(), probs.len()));
        let mut monotonic = Vec::with_capacity(z_grid.len());
        for (zi, z_raw) in z_grid.iter().enumerate() {
            let z_emb = self.embed(z_raw)?;
            let (x, dets) = self.push_back_with_jacobian(&yq_mat.view(), &z_emb.view())?;
            for (qi, _) in probs.iter().enumerate() {
                values[(zi, qi)] = x[(qi, 0)];
            }
            monotonic.push(dets.iter().all(|d| *d > 0.0));
        }
        Ok(QuantileCurves { values, monotonic })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile { version: MODEL_VERSION.to_string(), model: self.clone() };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value
            .get("version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Model("missing version field".into()))?;
        if version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "model version mismatch: file has '{version}', this build reads '{MODEL_VERSION}'"
            )));
        }
        let file: ModelFile = serde_json::from_value(value)?;
        Ok(file.model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}
