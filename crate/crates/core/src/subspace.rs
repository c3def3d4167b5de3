//! Discrimination of a task subspace against other tasks, application of
//! the result to a model, and subspace similarity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{frobenius_norm, matmul, norm, project_out, reconstruct, svd, Matrix, SvdFactors, DEFAULT_SVD_TOL};
use crate::model::{AttnRole, ModelWeights};
use crate::training::TaskSubspace;

/// Projected singular vectors shorter than this are dropped together with
/// their singular value.
pub const DROP_NORM: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionSide {
    Left,
    Right,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminationConfig {
    pub apply_to: ProjectionSide,
    /// Rescale projected singular vectors to unit norm.
    pub renormalize: bool,
    /// Relative singular-value cutoff used for both decompositions.
    pub tol: f64,
    /// Scale of the applied delta.
    pub alpha: f64,
}

impl Default for DiscriminationConfig {
    fn default() -> Self {
        Self {
            apply_to: ProjectionSide::Both,
            renormalize: true,
            tol: DEFAULT_SVD_TOL,
            alpha: 1.0,
        }
    }
}

impl DiscriminationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(invalid(format!("discrimination tol must be positive, got {}", self.tol)));
        }
        if !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be finite, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-layer, per-role matrices.
pub type LayerMatrices = Vec<BTreeMap<AttnRole, Matrix>>;

/// `T_o = Σ T_j` over `others`, shaped like `template`. An empty list gives
/// zero matrices.
pub fn merge_others(template: &TaskSubspace, others: &[&TaskSubspace]) -> Result<LayerMatrices> {
    let mut out: LayerMatrices = template
        .layers
        .iter()
        .map(|l| l.iter().map(|(&r, f)| (r, Matrix::zeros(f.t.rows(), f.t.cols()))).collect())
        .collect();
    for s in others {
        check_compatible(template, s)?;
        for (acc, layer) in out.iter_mut().zip(&s.layers) {
            for (r, f) in layer {
                acc.get_mut(r).expect("compatible subspaces share roles").add_scaled(&f.t, 1.0)?;
            }
        }
    }
    Ok(out)
}

fn check_compatible(a: &TaskSubspace, b: &TaskSubspace) -> Result<()> {
    if a.layers.len() != b.layers.len() || a.dim != b.dim || a.roles != b.roles {
        return Err(invalid(format!(
            "subspaces `{}` ({} layers, dim {}, roles {:?}) and `{}` ({} layers, dim {}, roles {:?}) are incompatible",
            a.task,
            a.layers.len(),
            a.dim,
            a.roles,
            b.task,
            b.layers.len(),
            b.dim,
            b.roles
        )));
    }
    Ok(())
}

/// Outcome for one layer and role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatedMatrix {
    pub matrix: Matrix,
    /// Rank of the target matrix before projection.
    pub rank_before: usize,
    /// Original singular values of the directions that survived projection.
    pub singular_values: Vec<f64>,
    /// Rank of the merged matrix of the other tasks.
    pub others_rank: usize,
}

impl DiscriminatedMatrix {
    pub fn rank_after(&self) -> usize {
        self.singular_values.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatedSubspace {
    pub task: String,
    pub others: Vec<String>,
    pub config: DiscriminationConfig,
    pub layers: Vec<BTreeMap<AttnRole, DiscriminatedMatrix>>,
}

/// Removes from `target` the row and/or column directions spanned by `others`.
pub fn discriminate_matrix(target: &Matrix, others: &Matrix, config: &DiscriminationConfig) -> Result<DiscriminatedMatrix> {
    if target.shape() != others.shape() {
        return Err(invalid(format!(
            "target {:?} and others {:?} differ in shape",
            target.shape(),
            others.shape()
        )));
    }
    config.validate()?;
    let fo = svd(others, config.tol)?;
    let ft = svd(target, config.tol)?;
    if fo.rank() == 0 {
        return Ok(DiscriminatedMatrix {
            matrix: target.clone(),
            rank_before: ft.rank(),
            singular_values: ft.s,
            others_rank: 0,
        });
    }
    let (uo, vo) = (fo.left_vectors(), fo.right_vectors());
    let (mut us, mut vs, mut ss) = (Vec::new(), Vec::new(), Vec::new());
    for (j, (u, v)) in ft.left_vectors().into_iter().zip(ft.right_vectors()).enumerate() {
        let u = match config.apply_to {
            ProjectionSide::Left | ProjectionSide::Both => survivor(project_out(&u, &uo)?, config.renormalize),
            ProjectionSide::Right => Some(u),
        };
        let v = match config.apply_to {
            ProjectionSide::Right | ProjectionSide::Both => survivor(project_out(&v, &vo)?, config.renormalize),
            ProjectionSide::Left => Some(v),
        };
        if let (Some(u), Some(v)) = (u, v) {
            us.push(u);
            vs.push(v);
            ss.push(ft.s[j]);
        }
    }
    let n = target.rows();
    let m = target.cols();
    let matrix = reconstruct(&SvdFactors {
        u: Matrix::from_columns(n, &us)?,
        s: ss.clone(),
        v: Matrix::from_columns(m, &vs)?,
    })?;
    Ok(DiscriminatedMatrix {
        matrix,
        rank_before: ft.rank(),
        singular_values: ss,
        others_rank: fo.rank(),
    })
}

fn survivor(mut v: Vec<f64>, renormalize: bool) -> Option<Vec<f64>> {
    let n = norm(&v);
    if n < DROP_NORM {
        return None;
    }
    if renormalize {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Some(v)
}

/// Discriminates `target` against the other tasks' merged matrices.
/// `others` names those tasks for provenance only.
pub fn discriminate(
    target: &TaskSubspace,
    merged_other: &LayerMatrices,
    others: &[String],
    config: &DiscriminationConfig,
) -> Result<DiscriminatedSubspace> {
    config.validate()?;
    if others.contains(&target.task) {
        return Err(invalid(format!("task `{}` cannot be discriminated against itself", target.task)));
    }
    if merged_other.len() != target.layers.len() {
        return Err(invalid(format!(
            "merged matrices cover {} layers, subspace has {}",
            merged_other.len(),
            target.layers.len()
        )));
    }
    let layers = target
        .layers
        .iter()
        .zip(merged_other)
        .enumerate()
        .map(|(l, (tl, ol))| {
            tl.iter()
                .map(|(&r, f)| {
                    let o = ol
                        .get(&r)
                        .ok_or_else(|| invalid(format!("merged matrices lack layer {l} role {r}")))?;
                    Ok((r, discriminate_matrix(&f.t, o, config)?))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscriminatedSubspace {
        task: target.task.clone(),
        others: others.to_vec(),
        config: config.clone(),
        layers,
    })
}

/// Merges `others` and discriminates `target` against the result.
pub fn discriminate_against(
    target: &TaskSubspace,
    others: &[&TaskSubspace],
    config: &DiscriminationConfig,
) -> Result<DiscriminatedSubspace> {
    let merged = merge_others(target, others)?;
    let names: Vec<String> = others.iter().map(|o| o.task.clone()).collect();
    discriminate(target, &merged, &names, config)
}

impl DiscriminatedSubspace {
    /// Wraps a subspace unchanged, for the ablation without discrimination.
    pub fn undiscriminated(target: &TaskSubspace, config: &DiscriminationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            task: target.task.clone(),
            others: Vec::new(),
            config: config.clone(),
            layers: target
                .layers
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|(&r, f)| {
                            (
                                r,
                                DiscriminatedMatrix {
                                    matrix: f.t.clone(),
                                    rank_before: target.k,
                                    singular_values: Vec::new(),
                                    others_rank: 0,
                                },
                            )
                        })
                        .collect()
                })
                .collect(),
        })
    }

    pub fn matrix(&self, layer: usize, role: AttnRole) -> Option<&Matrix> {
        self.layers.get(layer)?.get(&role).map(|d| &d.matrix)
    }

    /// `W ← W + sign · α · T'` on every layer and role carried here, with
    /// `α` from the discrimination config. `sign = -1` removes the task,
    /// `+1` adds it.
    pub fn apply(&self, base: &ModelWeights, sign: f64) -> Result<ModelWeights> {
        let alpha = self.config.alpha;
        self.config.validate()?;
        if self.layers.len() != base.layers.len() {
            return Err(invalid(format!(
                "subspace has {} layers, model has {}",
                self.layers.len(),
                base.layers.len()
            )));
        }
        let mut out = base.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            for (&r, d) in layer {
                out.apply_delta_in_place(l, r, &d.matrix.scaled(alpha), sign)?;
            }
        }
        Ok(out)
    }
}

/// Fraction of `a`'s energy captured by `b`'s singular subspaces, averaged
/// over the left and right sides, then over layers and roles.
pub fn similarity(a: &TaskSubspace, b: &TaskSubspace, tol: f64) -> Result<f64> {
    check_compatible(a, b)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (r, fa) in la {
            total += matrix_similarity(&fa.t, &lb[r].t, tol)?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `½ (‖U_b U_bᵀ T_a‖ + ‖T_a V_b V_bᵀ‖) / ‖T_a‖`, or 0 when `T_a = 0`.
pub fn matrix_similarity(ta: &Matrix, tb: &Matrix, tol: f64) -> Result<f64> {
    if ta.shape() != tb.shape() {
        return Err(invalid(format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape())));
    }
    let na = frobenius_norm(ta);
    if na == 0.0 {
        return Ok(0.0);
    }
    let fb = svd(tb, tol)?;
    if fb.rank() == 0 {
        return Ok(0.0);
    }
    // ‖U Uᵀ T‖_F = ‖Uᵀ T‖_F for orthonormal U
    let left = frobenius_norm(&fb.u.t_mul(ta));
    let right = frobenius_norm(&matmul(ta, &fb.v)?);
    Ok(0.5 * (left + right) / na)
}
