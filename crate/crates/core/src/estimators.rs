//! Causal estimators as contractions of the stage-one weight with feature
//! embeddings.
//!
//! | parameter | back-door                        | front-door                          |
//! |-----------|----------------------------------|-------------------------------------|
//! | ATE(a)    | `ŵᵀ(φ_A(a) ⊗ mean φ_X)`           | `ŵᵀ(mean φ_A ⊗ f̂_M(a))`              |
//! | ATT(a;a′) | `ŵᵀ(φ_A(a) ⊗ f̂_X(a′))`            | `ŵᵀ(φ_A(a′) ⊗ f̂_M(a))`               |
//!
//! With an observed confounder `O` the stage-one model has three factors
//! `(A, O, X)` or `(A, O, M)`:
//!
//! - back-door ATE: `ŵᵀ(φ_A(a) ⊗ mean(φ_O ⊗ φ_X))`
//! - back-door ATT: `ŵᵀ(φ_A(a) ⊗ f̂_{O⊗X}(a′))`
//! - back-door CATE: `ŵᵀ(φ_A(a) ⊗ φ_O(o) ⊗ f̂_X(o))`
//! - front-door ATE: `ŵᵀ(mean φ_A ⊗ mean_j(φ_O(o_j) ⊗ f̂_M(o_j, a)))`
//! - front-door ATT: `ŵᵀ(φ_A(a′) ⊗ mean_j(φ_O(o_j) ⊗ f̂_M(o_j, a)))`
//! - front-door CATE: `ŵᵀ(mean φ_A ⊗ φ_O(o) ⊗ f̂_M(o, a))`
//!
//! The front-door ATT evaluates the treatment feature at `a′` and the
//! mediator embedding at `a`: `E[g(a′, M) | A = a]`, which equals
//! `E[Y^(a) | A = a′]` because `M` depends on the confounders only through
//! `A`. The
//! three front-door formulas with an observed confounder average over the
//! marginal law of `O`; they match the interventional quantities when `A`
//! and `O` are independent.

use std::cell::OnceCell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{ColumnarDataset, Role};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, tensor_product_all, Vector};
use crate::stage1::{tensor_rows, StageOneModel};
use crate::stage2::{mean_rows, ConditionalEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameter {
    Ate,
    Att,
    Cate,
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameter::Ate => "ate",
            Parameter::Att => "att",
            Parameter::Cate => "cate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adjustment {
    BackDoor,
    FrontDoor,
}

impl fmt::Display for Adjustment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Adjustment::BackDoor => "back-door",
            Adjustment::FrontDoor => "front-door",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalQuery {
    pub parameter: Parameter,
    pub adjustment: Adjustment,
    pub treatment: Vec<f64>,
    /// `a′`, present only for ATT.
    pub conditioning_treatment: Option<Vec<f64>>,
    /// `o`, present only for CATE.
    pub confounder: Option<Vec<f64>>,
}

impl CausalQuery {
    pub fn ate(adjustment: Adjustment, a: Vec<f64>) -> Self {
        CausalQuery {
            parameter: Parameter::Ate,
            adjustment,
            treatment: a,
            conditioning_treatment: None,
            confounder: None,
        }
    }

    pub fn att(adjustment: Adjustment, a: Vec<f64>, a_prime: Vec<f64>) -> Self {
        CausalQuery {
            parameter: Parameter::Att,
            conditioning_treatment: Some(a_prime),
            ..Self::ate(adjustment, a)
        }
    }

    pub fn cate(adjustment: Adjustment, a: Vec<f64>, o: Vec<f64>) -> Self {
        CausalQuery {
            parameter: Parameter::Cate,
            confounder: Some(o),
            ..Self::ate(adjustment, a)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.conditioning_treatment.is_some() == (self.parameter == Parameter::Att)
            && self.confounder.is_some() == (self.parameter == Parameter::Cate);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} query carries the wrong conditioning values",
                self.parameter
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalEstimate {
    pub query: CausalQuery,
    pub value: f64,
    /// Rows of the sample used for marginal embeddings.
    pub n_used: usize,
    /// Stage-one fingerprint followed by those of the regressors involved.
    pub fingerprints: Vec<String>,
}

/// The conditional embeddings an estimator may need.
#[derive(Default, Clone, Copy)]
pub struct Regressors<'r> {
    /// `E[φ_X | A]`
    pub backdoor_given_treatment: Option<&'r dyn ConditionalEmbedding>,
    /// `E[φ_M | A]`
    pub frontdoor_given_treatment: Option<&'r dyn ConditionalEmbedding>,
    /// `E[φ_O ⊗ φ_X | A]`
    pub confounder_backdoor_given_treatment: Option<&'r dyn ConditionalEmbedding>,
    /// `E[φ_X | O]`
    pub backdoor_given_confounder: Option<&'r dyn ConditionalEmbedding>,
    /// `E[φ_M | O, A]`
    pub frontdoor_given_confounder_treatment: Option<&'r dyn ConditionalEmbedding>,
}

/// Evaluates estimators for one stage-one model against one marginal
/// sample. Marginal embeddings are computed on first use and reused.
pub struct Estimator<'a> {
    model: &'a StageOneModel,
    data: &'a ColumnarDataset,
    fingerprint: String,
    means: [OnceCell<Vector>; 3],
}

const TREATMENT_MEAN: usize = 0;
const SECOND_MEAN: usize = 1;
const JOINT_MEAN: usize = 2;

fn expect<'r>(
    reg: Option<&'r dyn ConditionalEmbedding>,
    name: &'static str,
    conditioning: &[Role],
    targets: &[Role],
) -> Result<&'r dyn ConditionalEmbedding> {
    let reg = reg.ok_or(Error::MissingRegressor(name))?;
    if reg.conditioning_roles() != conditioning || reg.target_roles() != targets {
        return Err(Error::RoleMismatch {
            expected: format!("{conditioning:?} -> {targets:?}"),
            got: format!("{:?} -> {:?}", reg.conditioning_roles(), reg.target_roles()),
        });
    }
    Ok(reg)
}

impl<'a> Estimator<'a> {
    /// `data` supplies the empirical marginal laws; it must contain every
    /// factor role of `model`.
    pub fn new(model: &'a StageOneModel, data: &'a ColumnarDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("estimation sample"));
        }
        for f in model.factors() {
            check_dim("estimation sample input", f.map.input_dim(), data.dim(f.role)?)?;
        }
        Ok(Estimator {
            model,
            data,
            fingerprint: model.fingerprint(),
            means: Default::default(),
        })
    }

    pub fn model(&self) -> &StageOneModel {
        self.model
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    fn require_roles(&self, roles: &[Role]) -> Result<()> {
        let have = self.model.roles();
        if have != roles {
            return Err(Error::RoleMismatch {
                expected: format!("{roles:?}"),
                got: format!("{have:?}"),
            });
        }
        Ok(())
    }

    fn feature(&self, role: Role, input: &[f64]) -> Result<Vector> {
        self.model.map(role)?.forward(input)
    }

    fn factor_mean(&self, slot: usize, role: Role) -> Result<&Vector> {
        if let Some(v) = self.means[slot].get() {
            return Ok(v);
        }
        let feats = self.model.map(role)?.forward_batch(self.data.block(role)?)?;
        let v = mean_rows(&feats)?;
        Ok(self.means[slot].get_or_init(|| v))
    }

    fn joint_mean(&self, second: Role) -> Result<&Vector> {
        if let Some(v) = self.means[JOINT_MEAN].get() {
            return Ok(v);
        }
        let o = self.model.map(Role::ObservedConfounder)?;
        let x = self.model.map(second)?;
        let feats = [
            o.forward_batch(self.data.block(Role::ObservedConfounder)?)?,
            x.forward_batch(self.data.block(second)?)?,
        ];
        let v = mean_rows(&tensor_rows(&feats))?;
        Ok(self.means[JOINT_MEAN].get_or_init(|| v))
    }

    /// `ŵᵀ(v_1 ⊗ … ⊗ v_k)` where the `v_j` may span several factors.
    fn contract(&self, parts: &[&[f64]]) -> Result<f64> {
        let t = tensor_product_all(parts);
        check_dim("contraction", self.model.weight().len(), t.len())?;
        let v = dot(self.model.weight(), &t);
        if !v.is_finite() {
            return Err(Error::NonFinite("estimate"));
        }
        Ok(v)
    }

    /// `mean_j φ_O(o_j) ⊗ f̂_M(o_j, a)` over the estimation sample.
    fn confounder_mediator_mean(&self, reg: &dyn ConditionalEmbedding, a: &[f64]) -> Result<Vector> {
        let o_block = self.data.block(Role::ObservedConfounder)?;
        let o_feats = self.model.map(Role::ObservedConfounder)?.forward_batch(o_block)?;
        let mut input = Vec::with_capacity(o_block.cols() + a.len());
        let mut rows = Vec::with_capacity(self.n());
        for j in 0..self.n() {
            input.clear();
            input.extend_from_slice(o_block.row(j));
            input.extend_from_slice(a);
            let m = reg.embed(&input)?;
            rows.push(tensor_product_all(&[o_feats.row(j), &m]).into_inner());
        }
        mean_rows(&crate::linalg::Matrix::from_rows(&rows)?)
    }

    fn finish(&self, query: CausalQuery, value: f64, regs: &[&dyn ConditionalEmbedding]) -> CausalEstimate {
        let mut fingerprints = vec![self.fingerprint.clone()];
        fingerprints.extend(regs.iter().map(|r| r.fingerprint()));
        CausalEstimate {
            query,
            value,
            n_used: self.n(),
            fingerprints,
        }
    }

    pub fn ate_backdoor(&self, a: &[f64]) -> Result<CausalEstimate> {
        self.require_roles(&[Role::Treatment, Role::BackDoor])?;
        let fa = self.feature(Role::Treatment, a)?;
        let mx = self.factor_mean(SECOND_MEAN, Role::BackDoor)?;
        let v = self.contract(&[&fa, mx])?;
        Ok(self.finish(CausalQuery::ate(Adjustment::BackDoor, a.to_vec()), v, &[]))
    }

    pub fn att_backdoor(&self, reg: &dyn ConditionalEmbedding, a: &[f64], a_prime: &[f64]) -> Result<CausalEstimate> {
        self.require_roles(&[Role::Treatment, Role::BackDoor])?;
        let reg = expect(Some(reg), "backdoor_given_treatment", &[Role::Treatment], &[Role::BackDoor])?;
        let fa = self.feature(Role::Treatment, a)?;
        let ex = reg.embed(a_prime)?;
        let v = self.contract(&[&fa, &ex])?;
        let q = CausalQuery::att(Adjustment::BackDoor, a.to_vec(), a_prime.to_vec());
        Ok(self.finish(q, v, &[reg]))
    }

    pub fn ate_frontdoor(&self, reg: &dyn ConditionalEmbedding, a: &[f64]) -> Result<CausalEstimate> {
        self.require_roles(&[Role::Treatment, Role::FrontDoor])?;
        let reg = expect(Some(reg), "frontdoor_given_treatment", &[Role::Treatment], &[Role::FrontDoor])?;
        let ma = self.factor_mean(TREATMENT_MEAN, Role::Treatment)?;
        let em = reg.embed(a)?;
        let v = self.contract(&[ma, &em])?;
        Ok(self.finish(CausalQuery::ate(Adjustment::FrontDoor, a.to_vec()), v, &[reg]))
    }

    pub fn att_frontdoor(&self, reg: &dyn ConditionalEmbedding, a: &[f64], a_prime: &[f64]) -> Result<CausalEstimate> {
        self.require_roles(&[Role::Treatment, Role::FrontDoor])?;
        let reg = expect(Some(reg), "frontdoor_given_treatment", &[Role::Treatment], &[Role::FrontDoor])?;
        let fa = self.feature(Role::Treatment, a_prime)?;
        let em = reg.embed(a)?;
        let v = self.contract(&[&fa, &em])?;
        let q = CausalQuery::att(Adjustment::FrontDoor, a.to_vec(), a_prime.to_vec());
        Ok(self.finish(q, v, &[reg]))
    }

    pub fn ate_backdoor_confounded(&self, a: &[f64]) -> Result<CausalEstimate> {
        self.require_roles(&[Role::Treatment, Role::ObservedConfounder, Role::BackDoor])?;
        let fa = self.feature(Role::Treatment, a)?;
        let joint = self.joint_mean(Role::BackDoor)?;
        let v = self.contract(&[&fa, joint])?;
        Ok(self.finish(CausalQuery::ate(Adjustment::BackDoor, a.to_vec()), v, &[]))
    }

    pub fn att_backdoor_confounded(
        &self,
        reg: Option<&dyn ConditionalEmbedding>,
        a: &[f64],
        a_prime: &[f64],
    ) -> Result<CausalEstimate> {
        self.require_roles(&[Role::Treatment, Role::ObservedConfounder, Role::BackDoor])?;
        let reg = expect(
            reg,
            "confounder_backdoor_given_treatment",
            &[Role::Treatment],
            &[Role::ObservedConfounder, Role::BackDoor],
        )?;
        let fa = self.feature(Role::Treatment, a)?;
        let e = reg.embed(a_prime)?;
        let v = self.contract(&[&fa, &e])?;
        let q = CausalQuery::att(Adjustment::BackDoor, a.to_vec(), a_prime.to_vec());
        Ok(self.finish(q, v, &[reg]))
    }

    pub fn cate_backdoor_confounded(
        &self,
        reg: Option<&dyn ConditionalEmbedding>,
        a: &[f64],
        o: &[f64],
    ) -> Result<CausalEstimate> {
        self.require_roles(&[Role::Treatment, Role::ObservedConfounder, Role::BackDoor])?;
        let reg = expect(reg, "backdoor_given_confounder", &[Role::ObservedConfounder], &[Role::BackDoor])?;
        let fa = self.feature(Role::Treatment, a)?;
        let fo = self.feature(Role::ObservedConfounder, o)?;
        let ex = reg.embed(o)?;
        let v = self.contract(&[&fa, &fo, &ex])?;
        let q = CausalQuery::cate(Adjustment::BackDoor, a.to_vec(), o.to_vec());
        Ok(self.finish(q, v, &[reg]))
    }

    fn frontdoor_confounded_reg<'r>(&self, reg: Option<&'r dyn ConditionalEmbedding>) -> Result<&'r dyn ConditionalEmbedding> {
        self.require_roles(&[Role::Treatment, Role::ObservedConfounder, Role::FrontDoor])?;
        expect(
            reg,
            "frontdoor_given_confounder_treatment",
            &[Role::ObservedConfounder, Role::Treatment],
            &[Role::FrontDoor],
        )
    }

    pub fn ate_frontdoor_confounded(&self, reg: Option<&dyn ConditionalEmbedding>, a: &[f64]) -> Result<CausalEstimate> {
        let reg = self.frontdoor_confounded_reg(reg)?;
        let ma = self.factor_mean(TREATMENT_MEAN, Role::Treatment)?;
        let om = self.confounder_mediator_mean(reg, a)?;
        let v = self.contract(&[ma, &om])?;
        Ok(self.finish(CausalQuery::ate(Adjustment::FrontDoor, a.to_vec()), v, &[reg]))
    }

    pub fn att_frontdoor_confounded(
        &self,
        reg: Option<&dyn ConditionalEmbedding>,
        a: &[f64],
        a_prime: &[f64],
    ) -> Result<CausalEstimate> {
        let reg = self.frontdoor_confounded_reg(reg)?;
        let fa = self.feature(Role::Treatment, a_prime)?;
        let om = self.confounder_mediator_mean(reg, a)?;
        let v = self.contract(&[&fa, &om])?;
        let q = CausalQuery::att(Adjustment::FrontDoor, a.to_vec(), a_prime.to_vec());
        Ok(self.finish(q, v, &[reg]))
    }

    pub fn cate_frontdoor_confounded(
        &self,
        reg: Option<&dyn ConditionalEmbedding>,
        a: &[f64],
        o: &[f64],
    ) -> Result<CausalEstimate> {
        let reg = self.frontdoor_confounded_reg(reg)?;
        let ma = self.factor_mean(TREATMENT_MEAN, Role::Treatment)?;
        let fo = self.feature(Role::ObservedConfounder, o)?;
        let input: Vec<f64> = o.iter().chain(a).copied().collect();
        let em = reg.embed(&input)?;
        let v = self.contract(&[ma, &fo, &em])?;
        let q = CausalQuery::cate(Adjustment::FrontDoor, a.to_vec(), o.to_vec());
        Ok(self.finish(q, v, &[reg]))
    }

    /// Dispatches `query` to the formula matching the model's factor roles.
    pub fn estimate(&self, query: &CausalQuery, regs: &Regressors<'_>) -> Result<CausalEstimate> {
        query.validate()?;
        let a = &query.treatment;
        let confounded = self.model.roles().contains(&Role::ObservedConfounder);
        let a_prime = || query.conditioning_treatment.as_deref().unwrap_or_default();
        let o = || query.confounder.as_deref().unwrap_or_default();
        let miss = |name| Error::MissingRegressor(name);
        match (query.adjustment, query.parameter, confounded) {
            (Adjustment::BackDoor, Parameter::Ate, false) => self.ate_backdoor(a),
            (Adjustment::BackDoor, Parameter::Att, false) => self.att_backdoor(
                regs.backdoor_given_treatment.ok_or(miss("backdoor_given_treatment"))?,
                a,
                a_prime(),
            ),
            (Adjustment::FrontDoor, Parameter::Ate, false) => self.ate_frontdoor(
                regs.frontdoor_given_treatment.ok_or(miss("frontdoor_given_treatment"))?,
                a,
            ),
            (Adjustment::FrontDoor, Parameter::Att, false) => self.att_frontdoor(
                regs.frontdoor_given_treatment.ok_or(miss("frontdoor_given_treatment"))?,
                a,
                a_prime(),
            ),
            (_, Parameter::Cate, false) => Err(Error::RoleMismatch {
                expected: "a model with an observed-confounder factor".into(),
                got: format!("{:?}", self.model.roles()),
            }),
            (Adjustment::BackDoor, Parameter::Ate, true) => self.ate_backdoor_confounded(a),
            (Adjustment::BackDoor, Parameter::Att, true) => {
                self.att_backdoor_confounded(regs.confounder_backdoor_given_treatment, a, a_prime())
            }
            (Adjustment::BackDoor, Parameter::Cate, true) => {
                self.cate_backdoor_confounded(regs.backdoor_given_confounder, a, o())
            }
            (Adjustment::FrontDoor, Parameter::Ate, true) => {
                self.ate_frontdoor_confounded(regs.frontdoor_given_confounder_treatment, a)
            }
            (Adjustment::FrontDoor, Parameter::Att, true) => {
                self.att_frontdoor_confounded(regs.frontdoor_given_confounder_treatment, a, a_prime())
            }
            (Adjustment::FrontDoor, Parameter::Cate, true) => {
                self.cate_frontdoor_confounded(regs.frontdoor_given_confounder_treatment, a, o())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{self, FeatureMap, OutputActivation};
    use crate::stage1::Factor;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Returns the same vector for every input.
    struct Fixed {
        conditioning: Vec<Role>,
        targets: Vec<Role>,
        dim: usize,
        value: Vec<f64>,
    }

    impl ConditionalEmbedding for Fixed {
        fn conditioning_roles(&self) -> &[Role] {
            &self.conditioning
        }
        fn target_roles(&self) -> &[Role] {
            &self.targets
        }
        fn conditioning_dim(&self) -> usize {
            self.dim
        }
        fn output_dim(&self) -> usize {
            self.value.len()
        }
        fn embed(&self, input: &[f64]) -> Result<Vector> {
            check_dim("fixed input", self.dim, input.len())?;
            Ok(Vector::from(self.value.clone()))
        }
        fn fingerprint(&self) -> String {
            "fixed".into()
        }
    }

    fn identity_1d() -> FeatureMap {
        FeatureMap::from_layers(&[1, 1], &[(vec![1.0], vec![0.0])], OutputActivation::Identity).unwrap()
    }

    fn column(v: Vec<f64>) -> Matrix {
        let n = v.len();
        Matrix::from_row_major(n, 1, v).unwrap()
    }

    fn random_data(roles: &[Role], dims: &[usize], n: usize, seed: u64) -> ColumnarDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut d = ColumnarDataset::new(n);
        d.insert(Role::Outcome, None, column((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .unwrap();
        for (&r, &k) in roles.iter().zip(dims) {
            let v = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            d.insert(r, None, Matrix::from_row_major(n, k, v).unwrap()).unwrap();
        }
        d
    }

    fn random_model(roles: &[Role], dims: &[usize], feat: usize, seed: u64) -> StageOneModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let factors: Vec<Factor> = roles
            .iter()
            .zip(dims)
            .map(|(&role, &k)| Factor {
                role,
                map: nn::build(k, &[6], feat, OutputActivation::Identity, &mut rng).unwrap(),
            })
            .collect();
        let d = feat.pow(roles.len() as u32);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        StageOneModel::new(factors, Vector::from(w), 0.1).unwrap()
    }

    fn scalar_model(w: f64, second: Role) -> StageOneModel {
        let factors = vec![
            Factor { role: Role::Treatment, map: identity_1d() },
            Factor { role: second, map: identity_1d() },
        ];
        StageOneModel::new(factors, Vector::from(vec![w]), 0.1).unwrap()
    }

    fn fixed(conditioning: Vec<Role>, targets: Vec<Role>, dim: usize, value: Vec<f64>) -> Fixed {
        Fixed { conditioning, targets, dim, value }
    }

    #[test]
    fn scalar_backdoor_ate_closed_form() {
        let data = random_data(&[Role::Treatment, Role::BackDoor], &[1, 1], 50, 1);
        let model = scalar_model(1.5, Role::BackDoor);
        let est = Estimator::new(&model, &data).unwrap();
        let x = data.block(Role::BackDoor).unwrap();
        let mean_x = x.as_slice().iter().sum::<f64>() / 50.0;
        let v = est.ate_backdoor(&[0.7]).unwrap().value;
        assert!((v - 1.5 * 0.7 * mean_x).abs() < 1e-14);
    }

    #[test]
    fn scalar_frontdoor_closed_forms() {
        let data = random_data(&[Role::Treatment, Role::FrontDoor], &[1, 1], 40, 2);
        let model = scalar_model(-2.0, Role::FrontDoor);
        let est = Estimator::new(&model, &data).unwrap();
        let mean_a = data.block(Role::Treatment).unwrap().as_slice().iter().sum::<f64>() / 40.0;
        let reg = fixed(vec![Role::Treatment], vec![Role::FrontDoor], 1, vec![0.3]);
        let ate = est.ate_frontdoor(&reg, &[1.0]).unwrap();
        assert!((ate.value - (-2.0 * mean_a * 0.3)).abs() < 1e-14);
        let att = est.att_frontdoor(&reg, &[1.0], &[0.5]).unwrap();
        assert!((att.value - (-2.0 * 0.5 * 0.3)).abs() < 1e-15);
        assert_eq!(att.fingerprints.len(), 2);
        assert_eq!(att.n_used, 40);
    }

    #[test]
    fn zero_weight_gives_zero_everywhere() {
        let two = random_data(&[Role::Treatment, Role::BackDoor], &[2, 1], 20, 3);
        let model = random_model(&[Role::Treatment, Role::BackDoor], &[2, 1], 3, 4).with_scaled_weight(0.0);
        let est = Estimator::new(&model, &two).unwrap();
        let reg = fixed(vec![Role::Treatment], vec![Role::BackDoor], 2, vec![1.0, 2.0, 3.0]);
        assert_eq!(est.ate_backdoor(&[0.1, 0.2]).unwrap().value, 0.0);
        assert_eq!(est.att_backdoor(&reg, &[0.1, 0.2], &[1.0, 1.0]).unwrap().value, 0.0);
        let zero_reg = fixed(vec![Role::Treatment], vec![Role::BackDoor], 2, vec![0.0; 3]);
        let m = random_model(&[Role::Treatment, Role::BackDoor], &[2, 1], 3, 5);
        let est2 = Estimator::new(&m, &two).unwrap();
        assert_eq!(est2.att_backdoor(&zero_reg, &[0.1, 0.2], &[1.0, 1.0]).unwrap().value, 0.0);

        let roles = [Role::Treatment, Role::ObservedConfounder, Role::FrontDoor];
        let three = random_data(&roles, &[1, 1, 1], 20, 6);
        let model = random_model(&roles, &[1, 1, 1], 2, 7).with_scaled_weight(0.0);
        let est = Estimator::new(&model, &three).unwrap();
        let reg = fixed(vec![Role::ObservedConfounder, Role::Treatment], vec![Role::FrontDoor], 2, vec![0.5, 0.5]);
        assert_eq!(est.ate_frontdoor_confounded(Some(&reg), &[0.1]).unwrap().value, 0.0);
        assert_eq!(est.att_frontdoor_confounded(Some(&reg), &[0.1], &[0.2]).unwrap().value, 0.0);
        assert_eq!(est.cate_frontdoor_confounded(Some(&reg), &[0.1], &[0.3]).unwrap().value, 0.0);

        let roles = [Role::Treatment, Role::ObservedConfounder, Role::BackDoor];
        let three = random_data(&roles, &[1, 1, 1], 20, 8);
        let model = random_model(&roles, &[1, 1, 1], 2, 9).with_scaled_weight(0.0);
        let est = Estimator::new(&model, &three).unwrap();
        let joint = fixed(vec![Role::Treatment], vec![Role::ObservedConfounder, Role::BackDoor], 1, vec![1.0; 4]);
        let by_o = fixed(vec![Role::ObservedConfounder], vec![Role::BackDoor], 1, vec![1.0; 2]);
        assert_eq!(est.ate_backdoor_confounded(&[0.1]).unwrap().value, 0.0);
        assert_eq!(est.att_backdoor_confounded(Some(&joint), &[0.1], &[0.2]).unwrap().value, 0.0);
        assert_eq!(est.cate_backdoor_confounded(Some(&by_o), &[0.1], &[0.3]).unwrap().value, 0.0);
    }

    #[test]
    fn confounded_backdoor_matches_explicit_sums() {
        let roles = [Role::Treatment, Role::ObservedConfounder, Role::BackDoor];
        let data = random_data(&roles, &[1, 2, 1], 30, 10);
        let model = random_model(&roles, &[1, 2, 1], 2, 11);
        let est = Estimator::new(&model, &data).unwrap();
        let w = model.weight();
        let fa = model.map(Role::Treatment).unwrap().forward(&[0.4]).unwrap();
        // ATE: triple loop over explicit per-sample products.
        let mut oracle = 0.0;
        for i in 0..30 {
            let fo = model.map(Role::ObservedConfounder).unwrap().forward(data.block(Role::ObservedConfounder).unwrap().row(i)).unwrap();
            let fx = model.map(Role::BackDoor).unwrap().forward(data.block(Role::BackDoor).unwrap().row(i)).unwrap();
            for p in 0..2 {
                for q in 0..2 {
                    for r in 0..2 {
                        oracle += w[p * 4 + q * 2 + r] * fa[p] * fo[q] * fx[r] / 30.0;
                    }
                }
            }
        }
        let v = est.ate_backdoor_confounded(&[0.4]).unwrap().value;
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - model.predict_dataset(&with_treatment(&data, 0.4)).unwrap().iter().sum::<f64>() / 30.0).abs() < 1e-10);

        let by_o = fixed(vec![Role::ObservedConfounder], vec![Role::BackDoor], 2, vec![0.25, -1.0]);
        let fo = model.map(Role::ObservedConfounder).unwrap().forward(&[0.1, 0.2]).unwrap();
        let mut cate = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                for r in 0..2 {
                    cate += w[p * 4 + q * 2 + r] * fa[p] * fo[q] * [0.25, -1.0][r];
                }
            }
        }
        let v = est.cate_backdoor_confounded(Some(&by_o), &[0.4], &[0.1, 0.2]).unwrap().value;
        assert!((v - cate).abs() < 1e-12);
    }

    fn with_treatment(data: &ColumnarDataset, a: f64) -> ColumnarDataset {
        let n = data.len();
        let mut d = ColumnarDataset::new(n);
        for role in data.roles().collect::<Vec<_>>() {
            let block = if role == Role::Treatment { column(vec![a; n]) } else { data.block(role).unwrap().clone() };
            d.insert(role, None, block).unwrap();
        }
        d
    }

    #[test]
    fn confounded_frontdoor_matches_explicit_sums() {
        let roles = [Role::Treatment, Role::ObservedConfounder, Role::FrontDoor];
        let data = random_data(&roles, &[1, 1, 1], 25, 12);
        let model = random_model(&roles, &[1, 1, 1], 2, 13);
        let est = Estimator::new(&model, &data).unwrap();
        // f̂_M(o, a) = (o + a, o·a) makes the inner average depend on o.
        struct Affine;
        impl ConditionalEmbedding for Affine {
            fn conditioning_roles(&self) -> &[Role] {
                &[Role::ObservedConfounder, Role::Treatment]
            }
            fn target_roles(&self) -> &[Role] {
                &[Role::FrontDoor]
            }
            fn conditioning_dim(&self) -> usize {
                2
            }
            fn output_dim(&self) -> usize {
                2
            }
            fn embed(&self, x: &[f64]) -> Result<Vector> {
                Ok(Vector::from(vec![x[0] + x[1], x[0] * x[1]]))
            }
            fn fingerprint(&self) -> String {
                "affine".into()
            }
        }
        let w = model.weight();
        let fa_map = model.map(Role::Treatment).unwrap();
        let fo_map = model.map(Role::ObservedConfounder).unwrap();
        let a_col = data.block(Role::Treatment).unwrap();
        let o_col = data.block(Role::ObservedConfounder).unwrap();
        let mut mean_a = [0.0; 2];
        for i in 0..25 {
            let f = fa_map.forward(a_col.row(i)).unwrap();
            mean_a[0] += f[0] / 25.0;
            mean_a[1] += f[1] / 25.0;
        }
        let (a, a_prime) = (0.3, -0.6);
        let mut inner = [[0.0; 2]; 2];
        for j in 0..25 {
            let fo = fo_map.forward(o_col.row(j)).unwrap();
            let m = Affine.embed(&[o_col.get(j, 0), a]).unwrap();
            for q in 0..2 {
                for r in 0..2 {
                    inner[q][r] += fo[q] * m[r] / 25.0;
                }
            }
        }
        let contract = |left: &[f64]| {
            let mut s = 0.0;
            for p in 0..2 {
                for q in 0..2 {
                    for r in 0..2 {
                        s += w[p * 4 + q * 2 + r] * left[p] * inner[q][r];
                    }
                }
            }
            s
        };
        let ate = est.ate_frontdoor_confounded(Some(&Affine), &[a]).unwrap().value;
        assert!((ate - contract(&mean_a)).abs() < 1e-12);
        let fap = fa_map.forward(&[a_prime]).unwrap();
        let att = est.att_frontdoor_confounded(Some(&Affine), &[a], &[a_prime]).unwrap().value;
        assert!((att - contract(&fap)).abs() < 1e-12);

        let o = 0.9;
        let fo = fo_map.forward(&[o]).unwrap();
        let m = Affine.embed(&[o, a]).unwrap();
        let mut cate = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                for r in 0..2 {
                    cate += w[p * 4 + q * 2 + r] * mean_a[p] * fo[q] * m[r];
                }
            }
        }
        let v = est.cate_frontdoor_confounded(Some(&Affine), &[a], &[o]).unwrap().value;
        assert!((v - cate).abs() < 1e-12);
    }

    #[test]
    fn scaling_the_weight_scales_estimates() {
        let data = random_data(&[Role::Treatment, Role::FrontDoor], &[2, 1], 30, 14);
        let model = random_model(&[Role::Treatment, Role::FrontDoor], &[2, 1], 3, 15);
        let reg = fixed(vec![Role::Treatment], vec![Role::FrontDoor], 2, vec![0.2, -0.4, 0.9]);
        let base = Estimator::new(&model, &data).unwrap();
        for c in [4.0, 0.5, -2.0] {
            let scaled = model.with_scaled_weight(c);
            let est = Estimator::new(&scaled, &data).unwrap();
            assert_eq!(est.ate_frontdoor(&reg, &[0.1, 0.3]).unwrap().value, c * base.ate_frontdoor(&reg, &[0.1, 0.3]).unwrap().value);
            assert_eq!(
                est.att_frontdoor(&reg, &[0.1, 0.3], &[1.0, 0.0]).unwrap().value,
                c * base.att_frontdoor(&reg, &[0.1, 0.3], &[1.0, 0.0]).unwrap().value
            );
        }
        let scaled = model.with_scaled_weight(1.7);
        let est = Estimator::new(&scaled, &data).unwrap();
        let lhs = est.ate_frontdoor(&reg, &[0.1, 0.3]).unwrap().value;
        let rhs = 1.7 * base.ate_frontdoor(&reg, &[0.1, 0.3]).unwrap().value;
        assert!((lhs - rhs).abs() <= 1e-14 * rhs.abs().max(1.0));
    }

    #[test]
    fn roles_and_regressors_are_checked() {
        let data = random_data(&[Role::Treatment, Role::BackDoor, Role::FrontDoor], &[1, 1, 1], 10, 16);
        let model = random_model(&[Role::Treatment, Role::BackDoor], &[1, 1], 2, 17);
        let est = Estimator::new(&model, &data).unwrap();
        let wrong = fixed(vec![Role::Treatment], vec![Role::FrontDoor], 1, vec![1.0, 1.0]);
        assert!(matches!(est.att_backdoor(&wrong, &[0.0], &[0.0]), Err(Error::RoleMismatch { .. })));
        assert!(matches!(est.ate_frontdoor(&wrong, &[0.0]), Err(Error::RoleMismatch { .. })));
        let q = CausalQuery::att(Adjustment::BackDoor, vec![0.0], vec![1.0]);
        assert!(matches!(est.estimate(&q, &Regressors::default()), Err(Error::MissingRegressor(_))));
        let bad = CausalQuery { confounder: Some(vec![0.0]), ..CausalQuery::ate(Adjustment::BackDoor, vec![0.0]) };
        assert!(est.estimate(&bad, &Regressors::default()).is_err());

        let roles = [Role::Treatment, Role::ObservedConfounder, Role::BackDoor];
        let three = random_data(&roles, &[1, 1, 1], 10, 18);
        let model = random_model(&roles, &[1, 1, 1], 2, 19);
        let est = Estimator::new(&model, &three).unwrap();
        assert!(matches!(est.cate_backdoor_confounded(None, &[0.0], &[0.0]), Err(Error::MissingRegressor(_))));
        assert!(matches!(est.ate_backdoor(&[0.0]), Err(Error::RoleMismatch { .. })));
    }

    #[test]
    fn estimates_are_deterministic() {
        let data = random_data(&[Role::Treatment, Role::BackDoor], &[3, 2], 64, 20);
        let model = random_model(&[Role::Treatment, Role::BackDoor], &[3, 2], 4, 21);
        let a = [0.3, -0.1, 0.8];
        let first = Estimator::new(&model, &data).unwrap().ate_backdoor(&a).unwrap();
        let copy = model.clone();
        let second = Estimator::new(&copy, &data).unwrap().ate_backdoor(&a).unwrap();
        assert_eq!(first, second);
    }

    proptest! {
        #[test]
        fn ate_equals_mean_prediction(seed in 0u64..10_000, a in -2.0f64..2.0) {
            let data = random_data(&[Role::Treatment, Role::BackDoor], &[1, 2], 40, seed);
            let model = random_model(&[Role::Treatment, Role::BackDoor], &[1, 2], 3, seed + 1);
            let v = Estimator::new(&model, &data).unwrap().ate_backdoor(&[a]).unwrap().value;
            let preds = model.predict_dataset(&with_treatment(&data, a)).unwrap();
            let mean = preds.iter().sum::<f64>() / preds.len() as f64;
            prop_assert!((v - mean).abs() <= 1e-10);
        }
    }
}
