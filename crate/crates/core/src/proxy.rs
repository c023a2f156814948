//! Update identifiers: the full value proxy, the rank-r singular proxy and
//! the baseline state families they are compared against.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd_f64, Matrix};
use crate::model::{rmsnorm_rows, LayerActivations, ModelWeights};

/// Rank-r factor `W_r = Λ_r V_rᵀ` of a value projection `W` (`v = W h`).
#[derive(Clone, Debug)]
pub struct SingularProxy {
    rank: usize,
    /// `r x d`, row i is `λ_i v_iᵀ`.
    projection: Matrix,
    /// `d x r`, the same factor laid out for row-major batches.
    projection_t: Matrix,
    singular_values: Vec<f32>,
    right_vectors: Vec<Vec<f64>>,
    bound_coefficient: f64,
}

impl SingularProxy {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn singular_values(&self) -> &[f32] {
        &self.singular_values
    }

    /// `2 (λ_{r+1} / λ_r)²`, zero at full rank.
    pub fn bound_coefficient(&self) -> f64 {
        self.bound_coefficient
    }

    /// Top-r right singular vectors (`f64`, unit norm).
    pub fn right_vectors(&self) -> &[Vec<f64>] {
        &self.right_vectors
    }

    /// Maps each row of `h` (`N x d`) to `W_r h_i` (`N x r`).
    pub fn project(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "proxy of width {} applied to rows of width {}",
                self.dim(),
                h.cols()
            )));
        }
        h.matmul(&self.projection_t)
    }

    /// Multiply-adds spent by [`SingularProxy::project`] on `n` rows.
    pub fn project_macs(&self, n: usize) -> u64 {
        (n * self.rank * self.dim()) as u64
    }
}

/// Builds the rank-`r` singular proxy of `w` (column convention, `v = W h`).
pub fn build_singular_proxy(w: &Matrix, r: usize) -> Result<SingularProxy> {
    let d = w.rows();
    if !w.is_square() {
        return Err(Error::Shape(format!(
            "value projection must be square, got {:?}",
            w.shape()
        )));
    }
    if r == 0 || r > d {
        return Err(Error::Argument(format!("proxy rank {r} outside [1, {d}]")));
    }
    let f = svd_f64(w)?;
    let lambda_r = f.s[r - 1];
    if lambda_r <= 0.0 {
        // the bound coefficient would be +inf
        return Err(Error::Degenerate(format!(
            "λ_{r} = 0: rank-{r} proxy carries no similarity guarantee"
        )));
    }
    let bound_coefficient = if r == d {
        0.0
    } else {
        2.0 * (f.s[r] / lambda_r).powi(2)
    };
    let projection = Matrix::from_fn(r, d, |i, j| (f.s[i] * f.v[i][j]) as f32);
    Ok(SingularProxy {
        rank: r,
        projection_t: projection.transpose(),
        projection,
        singular_values: f.s.iter().map(|&s| s as f32).collect(),
        right_vectors: f.v[..r].to_vec(),
        bound_coefficient,
    })
}

/// Which per-token state family drives update identification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "param")]
pub enum IdentifierKind {
    ValueFull,
    Singular(usize),
    Query,
    Key,
    AttnInput,
    AttnOutput,
    Random(u64),
    /// Ground-truth layer-output drift; evaluation only.
    Oracle,
}

impl IdentifierKind {
    /// Width of the identifier vectors for a model of width `d`.
    pub fn width(&self, d: usize) -> usize {
        match self {
            IdentifierKind::Singular(r) => *r,
            _ => d,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            IdentifierKind::Singular(r) if *r == 0 || *r > d => Err(Error::Argument(format!(
                "singular rank {r} outside [1, {d}]"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for IdentifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdentifierKind::ValueFull => write!(f, "value"),
            IdentifierKind::Singular(r) => write!(f, "singular:{r}"),
            IdentifierKind::Query => write!(f, "query"),
            IdentifierKind::Key => write!(f, "key"),
            IdentifierKind::AttnInput => write!(f, "attn-input"),
            IdentifierKind::AttnOutput => write!(f, "attn-output"),
            IdentifierKind::Random(s) => write!(f, "random:{s}"),
            IdentifierKind::Oracle => write!(f, "oracle"),
        }
    }
}

impl FromStr for IdentifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, param) = match s.split_once(':') {
            Some((h, p)) => (h, Some(p)),
            None => (s, None),
        };
        let parse_num = |p: Option<&str>| -> Result<u64> {
            p.ok_or_else(|| Error::Argument(format!("identifier `{s}` needs a parameter")))?
                .parse()
                .map_err(|_| Error::Argument(format!("bad identifier parameter in `{s}`")))
        };
        Ok(match head {
            "value" | "value-full" => IdentifierKind::ValueFull,
            "singular" => IdentifierKind::Singular(parse_num(param)? as usize),
            "query" => IdentifierKind::Query,
            "key" => IdentifierKind::Key,
            "attn-input" => IdentifierKind::AttnInput,
            "attn-output" => IdentifierKind::AttnOutput,
            "random" => IdentifierKind::Random(param.map_or(Ok(0), |p| parse_num(Some(p)))?),
            "oracle" => IdentifierKind::Oracle,
            _ => return Err(Error::Argument(format!("unknown identifier `{s}`"))),
        })
    }
}

/// Seeded standard-normal rows.
pub fn random_identifiers(n: usize, width: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng))
}

fn check_proxy(
    kind: IdentifierKind,
    proxy: Option<&SingularProxy>,
) -> Result<Option<&SingularProxy>> {
    match (kind, proxy) {
        (IdentifierKind::Singular(r), Some(p)) if p.rank() == r => Ok(Some(p)),
        (IdentifierKind::Singular(r), Some(p)) => Err(Error::Argument(format!(
            "identifier asks for rank {r}, proxy has rank {}",
            p.rank()
        ))),
        (IdentifierKind::Singular(_), None) => {
            Err(Error::Argument("singular identifier needs a proxy".into()))
        }
        (_, Some(_)) => Err(Error::Argument(format!("{kind} identifier takes no proxy"))),
        (_, None) => Ok(None),
    }
}

/// The identifier vectors of `kind` read off a dense layer pass.
pub fn identifier_vectors(
    kind: IdentifierKind,
    acts: &LayerActivations,
    proxy: Option<&SingularProxy>,
) -> Result<Matrix> {
    let proxy = check_proxy(kind, proxy)?;
    Ok(match kind {
        IdentifierKind::ValueFull => acts.v.clone(),
        IdentifierKind::Singular(_) => proxy.expect("checked").project(&acts.attn_norm)?,
        IdentifierKind::Query => acts.q.clone(),
        IdentifierKind::Key => acts.k.clone(),
        IdentifierKind::AttnInput => acts.attn_input.clone(),
        IdentifierKind::AttnOutput => acts.attn_output.clone(),
        IdentifierKind::Random(seed) => {
            random_identifiers(acts.attn_input.rows(), acts.attn_input.cols(), seed)
        }
        IdentifierKind::Oracle => acts.output.clone(),
    })
}

/// Identifier vectors computed straight from a layer input `h`, without a
/// dense layer pass, plus the multiply-adds the projection cost.
pub fn project_identifier(
    kind: IdentifierKind,
    h: &Matrix,
    model: &ModelWeights,
    layer: usize,
    proxy: Option<&SingularProxy>,
) -> Result<(Matrix, u64)> {
    let proxy = check_proxy(kind, proxy)?;
    let cfg = model.config();
    let lw = &model.layers[layer];
    let (n, d) = (h.rows() as u64, cfg.d as u64);
    let normed = || rmsnorm_rows(h, &lw.attn_norm, cfg.rms_eps);
    Ok(match kind {
        IdentifierKind::ValueFull => (normed().matmul(&lw.wv)?, n * d * d),
        IdentifierKind::Query => (normed().matmul(&lw.wq)?, n * d * d),
        IdentifierKind::Key => (normed().matmul(&lw.wk)?, n * d * d),
        IdentifierKind::Singular(_) => {
            let p = proxy.expect("checked");
            (p.project(&normed())?, p.project_macs(h.rows()))
        }
        IdentifierKind::AttnInput => (h.clone(), 0),
        IdentifierKind::AttnOutput => {
            let acts = model.attention_full(h, layer)?;
            (acts.attn_output, 4 * n * d * d + 2 * n * n * d)
        }
        IdentifierKind::Random(seed) => (random_identifiers(h.rows(), cfg.d, seed), 0),
        IdentifierKind::Oracle => {
            return Err(Error::Argument(
                "the oracle identifier needs a dense trace; use it for evaluation only".into(),
            ))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine_sim;
    use crate::model::{init_weights, ModelConfig};

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        random_identifiers(rows, cols, seed)
    }

    #[test]
    fn diag_bound_coefficient() {
        let p = build_singular_proxy(&Matrix::diag(&[3.0, 2.0, 1.0]), 2).unwrap();
        assert!((p.bound_coefficient() - 0.5).abs() < 1e-12);
        let full = build_singular_proxy(&Matrix::diag(&[3.0, 2.0, 1.0]), 3).unwrap();
        assert_eq!(full.bound_coefficient(), 0.0);
    }

    #[test]
    fn rank_out_of_range() {
        let w = Matrix::identity(4);
        assert!(matches!(
            build_singular_proxy(&w, 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            build_singular_proxy(&w, 5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_lambda_r_is_refused() {
        let w = Matrix::diag(&[2.0, 0.0, 0.0]);
        assert!(matches!(
            build_singular_proxy(&w, 2),
            Err(Error::Degenerate(_))
        ));
        assert!(build_singular_proxy(&w, 1).is_ok());
    }

    #[test]
    fn projection_of_zero_is_zero() {
        let p = build_singular_proxy(&seeded(8, 8, 1), 3).unwrap();
        let out = p.project(&Matrix::zeros(4, 8)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.project_macs(4), 4 * 3 * 8);
    }

    #[test]
    fn project_matches_loop_oracle() {
        let w = seeded(16, 16, 5);
        let p = build_singular_proxy(&w, 8).unwrap();
        let h = seeded(6, 16, 6);
        let got = p.project(&h).unwrap();
        for i in 0..6 {
            for a in 0..8 {
                let mut s = 0.0f64;
                for j in 0..16 {
                    s += p.projection().get(a, j) as f64 * h.get(i, j) as f64;
                }
                assert!((got.get(i, a) as f64 - s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn full_rank_preserves_cosines() {
        let w = seeded(12, 12, 2);
        let p = build_singular_proxy(&w, 12).unwrap();
        let h = seeded(5, 12, 3);
        let full = h.matmul(&w.transpose()).unwrap();
        let proj = p.project(&h).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let a = cosine_sim(full.row(i), full.row(j)).unwrap();
                let b = cosine_sim(proj.row(i), proj.row(j)).unwrap();
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identifier_kind_roundtrips_text() {
        for k in [
            IdentifierKind::ValueFull,
            IdentifierKind::Singular(8),
            IdentifierKind::Query,
            IdentifierKind::Key,
            IdentifierKind::AttnInput,
            IdentifierKind::AttnOutput,
            IdentifierKind::Random(9),
            IdentifierKind::Oracle,
        ] {
            assert_eq!(k.to_string().parse::<IdentifierKind>().unwrap(), k);
        }
        assert!("singular".parse::<IdentifierKind>().is_err());
        assert!("bogus".parse::<IdentifierKind>().is_err());
    }

    #[test]
    fn identifier_vectors_contract() {
        let model = init_weights(&ModelConfig::tiny()).unwrap();
        let h = model.embed(&[1, 2, 3, 4, 31]).unwrap();
        let acts = model.layer_forward(&h, 0).unwrap();
        assert_eq!(
            identifier_vectors(IdentifierKind::ValueFull, &acts, None).unwrap(),
            acts.v
        );
        let r1 = identifier_vectors(IdentifierKind::Random(4), &acts, None).unwrap();
        let r2 = identifier_vectors(IdentifierKind::Random(4), &acts, None).unwrap();
        assert_eq!(r1, r2);
        assert!(identifier_vectors(IdentifierKind::Singular(4), &acts, None).is_err());
        let p = build_singular_proxy(&model.layers[0].value_projection(), 4).unwrap();
        assert!(identifier_vectors(IdentifierKind::ValueFull, &acts, Some(&p)).is_err());
        assert!(identifier_vectors(IdentifierKind::Singular(5), &acts, Some(&p)).is_err());

        let d = model.config.d;
        let full = build_singular_proxy(&model.layers[0].value_projection(), d).unwrap();
        let s = identifier_vectors(IdentifierKind::Singular(d), &acts, Some(&full)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let a = cosine_sim(acts.v.row(i), acts.v.row(j)).unwrap();
                let b = cosine_sim(s.row(i), s.row(j)).unwrap();
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn projected_identifiers_match_dense_pass() {
        let model = init_weights(&ModelConfig::tiny()).unwrap();
        let h = model.embed(&[7, 2, 9, 31, 31]).unwrap();
        let acts = model.layer_forward(&h, 1).unwrap();
        let p = build_singular_proxy(&model.layers[1].value_projection(), 6).unwrap();
        for kind in [
            IdentifierKind::ValueFull,
            IdentifierKind::Query,
            IdentifierKind::Key,
            IdentifierKind::AttnInput,
            IdentifierKind::AttnOutput,
            IdentifierKind::Random(3),
            IdentifierKind::Singular(6),
        ] {
            let proxy = matches!(kind, IdentifierKind::Singular(_)).then_some(&p);
            let (a, _) = project_identifier(kind, &h, &model, 1, proxy).unwrap();
            let b = identifier_vectors(kind, &acts, proxy).unwrap();
            assert_eq!(a, b, "{kind}");
        }
        assert!(project_identifier(IdentifierKind::Oracle, &h, &model, 1, None).is_err());
    }
}
