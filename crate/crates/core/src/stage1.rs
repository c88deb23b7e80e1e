//! Stage one: the outcome regression `ĝ = ŵᵀ(φ_1 ⊗ … ⊗ φ_k)`.
//!
//! Feature maps are trained on the profiled objective: on every minibatch
//! the ridge weight is solved in closed form for the current features, and
//! Adam descends the resulting loss in the feature parameters. Because `ŵ`
//! is the exact minimizer, the gradient with respect to each tensor feature
//! row is `-(2/b) r_i ŵ` (the partial derivative at fixed `ŵ`).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ColumnarDataset, Role};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, ridge_weight, tensor_product_all, Matrix, Vector};
use crate::nn::{self, AdamConfig, AdamState, FeatureMap, OutputActivation};
use crate::rng::{permutation, stream, Stream};

const FORMAT: &str = "causal-embed/stage1";

/// One factor of the tensor-product regression: a feature map applied to the
/// columns of a role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factor {
    pub role: Role,
    pub map: FeatureMap,
}

/// How to build a factor's feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    pub role: Role,
    /// Hidden widths; `None` picks [`nn::default_hidden`] from the input dim.
    pub hidden: Option<Vec<usize>>,
    pub feature_dim: usize,
    pub output: OutputActivation,
    /// Leave the randomly initialized map untouched during training.
    pub frozen: bool,
    /// Replace the network by the frozen scalar map `x ↦ value`.
    pub constant: Option<f64>,
    /// Append a coordinate fixed at 1 to the network outputs, so the tensor
    /// product also spans lower-order (e.g. additive) terms.
    pub constant_feature: bool,
}

impl FactorSpec {
    pub fn new(role: Role, feature_dim: usize) -> Self {
        FactorSpec {
            role,
            hidden: None,
            feature_dim,
            output: OutputActivation::Identity,
            frozen: false,
            constant: None,
            constant_feature: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `None` uses `1e-3 · mean(y²)` over the training data.
    pub ridge_lambda: Option<f64>,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 penalty on the weights (not biases) of the trained feature maps.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ridge_lambda: None,
            adam: AdamConfig::default(),
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.ridge_lambda {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("ridge_lambda must be > 0, got {l}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.adam.validate()
    }
}

/// Scale-aware default ridge parameter.
pub fn default_lambda(y: &[f64]) -> f64 {
    let ms = y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64;
    let l = 1e-3 * ms;
    if l > 0.0 && l.is_finite() {
        l
    } else {
        1e-3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean profiled minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Profiled loss on the full data with the final features.
    pub final_loss: f64,
    pub ridge_lambda: f64,
}

/// Trained stage-one regression.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneModel {
    factors: Vec<Factor>,
    weight: Vector,
    ridge_lambda: f64,
}

impl StageOneModel {
    pub fn new(factors: Vec<Factor>, weight: Vector, ridge_lambda: f64) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Config("stage-one model needs at least one factor".into()));
        }
        if factors[0].role != Role::Treatment {
            return Err(Error::RoleMismatch {
                expected: "treatment as first factor".into(),
                got: factors[0].role.to_string(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &factors {
            if !seen.insert(f.role) || f.role == Role::Outcome {
                return Err(Error::Config(format!("invalid factor role `{}`", f.role)));
            }
        }
        let d: usize = factors.iter().map(|f| f.map.output_dim()).product();
        check_dim("stage-one weight", d, weight.len())?;
        if !(ridge_lambda > 0.0) {
            return Err(Error::Config(format!("ridge_lambda must be > 0, got {ridge_lambda}")));
        }
        Ok(StageOneModel {
            factors,
            weight,
            ridge_lambda,
        })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn roles(&self) -> Vec<Role> {
        self.factors.iter().map(|f| f.role).collect()
    }

    pub fn map(&self, role: Role) -> Result<&FeatureMap> {
        self.factors
            .iter()
            .find(|f| f.role == role)
            .map(|f| &f.map)
            .ok_or_else(|| Error::RoleMismatch {
                expected: format!("a `{role}` factor"),
                got: format!("{:?}", self.roles()),
            })
    }

    pub fn weight(&self) -> &Vector {
        &self.weight
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.ridge_lambda
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.map.output_dim()).collect()
    }

    /// Same features, weight multiplied by `c`.
    pub fn with_scaled_weight(&self, c: f64) -> StageOneModel {
        StageOneModel {
            weight: self.weight.scaled(c),
            ..self.clone()
        }
    }

    pub fn with_weight(&self, weight: Vector) -> Result<StageOneModel> {
        StageOneModel::new(self.factors.clone(), weight, self.ridge_lambda)
    }

    /// `ŵᵀ(v_1 ⊗ … ⊗ v_k)` for per-factor feature vectors.
    pub fn contract(&self, features: &[&[f64]]) -> Result<f64> {
        check_dim("contraction factors", self.factors.len(), features.len())?;
        for (f, v) in self.factors.iter().zip(features) {
            check_dim("contraction factor dim", f.map.output_dim(), v.len())?;
        }
        Ok(dot(&self.weight, &tensor_product_all(features)))
    }

    /// `ĝ` at one point; `inputs` holds one raw input per factor, in factor
    /// order.
    pub fn predict(&self, inputs: &[&[f64]]) -> Result<f64> {
        check_dim("prediction inputs", self.factors.len(), inputs.len())?;
        let feats = self
            .factors
            .iter()
            .zip(inputs)
            .map(|(f, x)| f.map.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = feats.iter().map(|v| v.as_slice()).collect();
        self.contract(&refs)
    }

    /// Per-factor feature matrices for the rows of `data`.
    pub fn features(&self, data: &ColumnarDataset) -> Result<Vec<Matrix>> {
        self.factors
            .iter()
            .map(|f| f.map.forward_batch(data.block(f.role)?))
            .collect()
    }

    /// `ĝ` at every row of `data`.
    pub fn predict_dataset(&self, data: &ColumnarDataset) -> Result<Vec<f64>> {
        let feats = self.features(data)?;
        let psi = tensor_rows(&feats);
        Ok(psi.mul_vec(&self.weight)?.into_inner())
    }

    pub fn to_json(&self) -> String {
        let repr = StageOneRepr {
            format: FORMAT.into(),
            ridge_lambda: self.ridge_lambda,
            factors: self.factors.clone(),
            weight: self.weight.as_slice().to_vec(),
        };
        serde_json::to_string_pretty(&repr).expect("finite model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: StageOneRepr =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if repr.format != FORMAT {
            return Err(Error::Format(format!(
                "expected format `{FORMAT}`, found `{}`",
                repr.format
            )));
        }
        StageOneModel::new(repr.factors, Vector::new(repr.weight)?, repr.ridge_lambda)
    }

    /// SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageOneRepr {
    format: String,
    ridge_lambda: f64,
    factors: Vec<Factor>,
    weight: Vec<f64>,
}

/// Row-wise tensor products of per-factor feature matrices.
pub fn tensor_rows(features: &[Matrix]) -> Matrix {
    let n = features.first().map_or(0, Matrix::rows);
    let d: usize = features.iter().map(Matrix::cols).product();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let rows: Vec<&[f64]> = features.iter().map(|m| m.row(i)).collect();
        out.extend_from_slice(&tensor_product_all(&rows));
    }
    Matrix::from_row_major(n, d, out).expect("consistent tensor dims")
}

/// Builds the (untrained) feature maps for `specs`.
pub fn init_factors(data: &ColumnarDataset, specs: &[FactorSpec], seed: u64) -> Result<Vec<Factor>> {
    specs
        .iter()
        .map(|spec| {
            let input_dim = data.dim(spec.role)?;
            let map = match spec.constant {
                Some(c) => FeatureMap::constant(input_dim, spec.feature_dim, c)?,
                None => {
                    let hidden = spec
                        .hidden
                        .clone()
                        .unwrap_or_else(|| nn::default_hidden(input_dim));
                    let mut rng = stream(seed, Stream::FeatureInit(spec.role));
                    let mut m = nn::build(input_dim, &hidden, spec.feature_dim, spec.output, &mut rng)?;
                    m.set_frozen(spec.frozen);
                    m.set_constant_feature(spec.constant_feature);
                    m
                }
            };
            Ok(Factor {
                role: spec.role,
                map,
            })
        })
        .collect()
}

/// Result of evaluating the profiled objective on one batch.
pub struct Profiled {
    pub loss: f64,
    pub weight: Vector,
    /// Per-factor cotangents `∂loss/∂φ_j(x_i)` (rows = samples).
    pub cotangents: Option<Vec<Matrix>>,
}

/// Profiled stage-one loss on a batch of per-factor features: solves the
/// ridge weight, then evaluates `(1/b)‖y − Ψŵ‖² + λ‖ŵ‖²`.
pub fn profiled_from_features(
    features: &[Matrix],
    y: &[f64],
    lambda: f64,
    with_cotangents: bool,
) -> Result<Profiled> {
    let b = y.len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    for f in features {
        check_dim("profiled batch rows", b, f.rows())?;
    }
    let psi = tensor_rows(features);
    let w = ridge_weight(&psi, y, lambda)?;
    let pred = psi.mul_vec(&w)?;
    let resid: Vec<f64> = y.iter().zip(pred.iter()).map(|(t, p)| t - p).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / b as f64 + lambda * dot(&w, &w);

    let cotangents = with_cotangents.then(|| {
        let dims: Vec<usize> = features.iter().map(Matrix::cols).collect();
        let mut cts: Vec<Matrix> = dims.iter().map(|&d| Matrix::zeros(b, d)).collect();
        for i in 0..b {
            let scale = -2.0 * resid[i] / b as f64;
            let rows: Vec<&[f64]> = features.iter().map(|m| m.row(i)).collect();
            for j in 0..rows.len() {
                let prefix = tensor_product_all(&rows[..j]);
                let suffix = tensor_product_all(&rows[j + 1..]);
                let (dj, s_len) = (dims[j], suffix.len());
                let out = cts[j].row_mut(i);
                for (t, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (p, &pv) in prefix.iter().enumerate() {
                        let base = (p * dj + t) * s_len;
                        for (s, &sv) in suffix.iter().enumerate() {
                            acc += w[base + s] * (pv * sv);
                        }
                    }
                    *o = scale * acc;
                }
            }
        }
        cts
    });
    Ok(Profiled {
        loss,
        weight: w,
        cotangents,
    })
}

/// Profiled loss and ridge weight of `factors` on the rows of `batch`.
pub fn profiled_loss(factors: &[Factor], batch: &ColumnarDataset, lambda: f64) -> Result<(f64, Vector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let y = batch.outcome()?;
    let feats = factors
        .iter()
        .map(|f| f.map.forward_batch(batch.block(f.role)?))
        .collect::<Result<Vec<_>>>()?;
    let p = profiled_from_features(&feats, &y, lambda, false)?;
    Ok((p.loss, p.weight))
}

/// Initializes feature maps from `specs` and trains them.
pub fn train_stage1(
    data: &ColumnarDataset,
    specs: &[FactorSpec],
    config: &TrainConfig,
) -> Result<(StageOneModel, TrainReport)> {
    let factors = init_factors(data, specs, config.seed)?;
    fit_stage1(factors, data, config)
}

/// Trains the non-frozen maps of `factors` on the profiled objective, then
/// refits the weight on the full data.
pub fn fit_stage1(
    mut factors: Vec<Factor>,
    data: &ColumnarDataset,
    config: &TrainConfig,
) -> Result<(StageOneModel, TrainReport)> {
    config.validate()?;
    let y = data.outcome()?;
    if y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inputs = factors
        .iter()
        .map(|f| data.block(f.role))
        .collect::<Result<Vec<_>>>()?;
    let lambda = config.ridge_lambda.unwrap_or_else(|| default_lambda(&y));
    let n = y.len();
    let batch = config.batch_size.min(n);
    let mut adam: Vec<Option<AdamState>> = factors
        .iter()
        .map(|f| (!f.map.is_frozen()).then(|| AdamState::new(config.adam, f.map.num_params())))
        .collect();
    let trainable = adam.iter().any(Option::is_some);

    let mut shuffle = stream(config.seed, Stream::Shuffle);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    if trainable {
        for epoch in 0..config.epochs {
            let perm = permutation(&mut shuffle, n);
            let mut total = 0.0;
            let mut batches = 0usize;
            for idx in perm.chunks(batch) {
                let xs: Vec<Matrix> = inputs.iter().map(|m| m.select_rows(idx)).collect();
                let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                let caches = factors
                    .iter()
                    .zip(&xs)
                    .map(|(f, x)| f.map.forward_cached(x))
                    .collect::<Result<Vec<_>>>()?;
                let feats: Vec<Matrix> = caches.iter().map(|c| c.output().clone()).collect();
                let prof = profiled_from_features(&feats, &yb, lambda, true)?;
                if !prof.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch });
                }
                total += prof.loss;
                batches += 1;
                let cts = prof.cotangents.expect("requested");
                for ((f, st), (cache, ct)) in factors
                    .iter_mut()
                    .zip(adam.iter_mut())
                    .zip(caches.iter().zip(&cts))
                {
                    if let Some(st) = st {
                        let mut g = f.map.backward_batch(cache, ct, false)?.params;
                        if config.weight_decay > 0.0 {
                            for r in f.map.weight_ranges() {
                                for k in r {
                                    g[k] += 2.0 * config.weight_decay * f.map.params()[k];
                                }
                            }
                        }
                        st.step(f.map.params_mut(), &g)?;
                    }
                }
            }
            let mean = total / batches as f64;
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            log::debug!("stage1 epoch {epoch}: loss {mean:.6}");
            epoch_losses.push(mean);
        }
    }

    let feats = factors
        .iter()
        .zip(&inputs)
        .map(|(f, x)| f.map.forward_batch(x))
        .collect::<Result<Vec<_>>>()?;
    let full = profiled_from_features(&feats, &y, lambda, false)?;
    if !full.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: config.epochs,
        });
    }
    let model = StageOneModel::new(factors, full.weight, lambda)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            final_loss: full.loss,
            ridge_lambda: lambda,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn linear_map(dim_in: usize) -> FeatureMap {
        let mut w = vec![0.0; dim_in];
        w[0] = 1.0;
        FeatureMap::from_layers(&[dim_in, 1], &[(w, vec![0.0])], OutputActivation::Identity).unwrap()
    }

    fn dataset(a: &[f64], x: &[f64], y: &[f64]) -> ColumnarDataset {
        let n = y.len();
        let mut d = ColumnarDataset::new(n);
        d.insert(Role::Outcome, None, Matrix::from_row_major(n, 1, y.to_vec()).unwrap()).unwrap();
        d.insert(Role::Treatment, None, Matrix::from_row_major(n, 1, a.to_vec()).unwrap()).unwrap();
        d.insert(Role::BackDoor, None, Matrix::from_row_major(n, 1, x.to_vec()).unwrap()).unwrap();
        d
    }

    fn uniform_data(n: usize, seed: u64, f: impl Fn(f64, f64) -> f64) -> ColumnarDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = a.iter().zip(&x).map(|(&a, &x)| f(a, x)).collect();
        dataset(&a, &x, &y)
    }

    fn small_specs(d: usize) -> Vec<FactorSpec> {
        [Role::Treatment, Role::BackDoor]
            .into_iter()
            .map(|r| FactorSpec {
                hidden: Some(vec![16]),
                ..FactorSpec::new(r, d)
            })
            .collect()
    }

    #[test]
    fn zero_outcome_gives_zero_weight_and_loss() {
        let data = uniform_data(40, 1, |_, _| 0.0);
        let factors = init_factors(&data, &small_specs(3), 2).unwrap();
        let (loss, w) = profiled_loss(&factors, &data, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_ridge_by_hand() {
        // Ψ = [1; 2], y = [1; 2], λ = 0.5: w = (5/2)/(5/2 + 1/2) = 5/6.
        let data = dataset(&[1.0, 2.0], &[7.0, 7.0], &[1.0, 2.0]);
        let factors = vec![
            Factor { role: Role::Treatment, map: linear_map(1) },
            Factor { role: Role::BackDoor, map: FeatureMap::constant(1, 1, 1.0).unwrap() },
        ];
        let (loss, w) = profiled_loss(&factors, &data, 0.5).unwrap();
        assert!((w[0] - 5.0 / 6.0).abs() < 1e-14);
        let expected = ((1.0 - 5.0 / 6.0f64).powi(2) + (2.0 - 10.0 / 6.0f64).powi(2)) / 2.0
            + 0.5 * (5.0 / 6.0f64).powi(2);
        assert!((loss - expected).abs() < 1e-14);
    }

    #[test]
    fn empty_batch_and_bad_dims_are_rejected() {
        let data = uniform_data(10, 3, |a, _| a);
        let factors = init_factors(&data, &small_specs(2), 0).unwrap();
        let empty = data.select_rows(&[]);
        assert!(matches!(profiled_loss(&factors, &empty, 0.1), Err(Error::EmptyBatch)));
        let feats = vec![Matrix::zeros(10, 2), Matrix::zeros(9, 2)];
        assert!(matches!(
            profiled_from_features(&feats, &data.outcome().unwrap(), 0.1, false),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_features_recover_product_outcome() {
        let data = uniform_data(500, 4, |a, x| 3.0 * a * x);
        let factors = vec![
            Factor { role: Role::Treatment, map: linear_map(1) },
            Factor { role: Role::BackDoor, map: linear_map(1) },
        ];
        let config = TrainConfig { ridge_lambda: Some(1e-6), epochs: 1, ..Default::default() };
        let (model, _) = fit_stage1(factors, &data, &config).unwrap();
        let pred = model.predict_dataset(&data).unwrap();
        let y = data.outcome().unwrap();
        let mse = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
        assert!(mse <= 1e-3, "mse {mse}");
    }

    #[test]
    fn trained_networks_fit_product_outcome() {
        let data = uniform_data(400, 5, |a, x| 3.0 * a * x);
        let config = TrainConfig {
            ridge_lambda: Some(1e-5),
            epochs: 300,
            batch_size: 400,
            adam: AdamConfig { step_size: 1e-2, ..Default::default() },
            seed: 6,
            weight_decay: 0.0,
        };
        let (model, report) = train_stage1(&data, &small_specs(4), &config).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
        let pred = model.predict_dataset(&data).unwrap();
        let y = data.outcome().unwrap();
        let mse = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
        assert!(mse <= 1e-3, "mse {mse}");
    }

    #[test]
    fn constant_outcome_with_constant_features() {
        let data = uniform_data(30, 7, |_, _| 2.5);
        let factors = vec![
            Factor { role: Role::Treatment, map: FeatureMap::constant(1, 1, 1.0).unwrap() },
            Factor { role: Role::BackDoor, map: FeatureMap::constant(1, 1, 1.0).unwrap() },
        ];
        let (model, report) = fit_stage1(factors, &data, &TrainConfig { ridge_lambda: Some(0.25), ..Default::default() }).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert!((model.weight()[0] - 2.5 / 1.25).abs() < 1e-14);
    }

    #[test]
    fn default_lambda_scales_with_outcome() {
        assert!((default_lambda(&[2.0, -2.0]) - 4e-3).abs() < 1e-18);
        assert_eq!(default_lambda(&[0.0, 0.0]), 1e-3);
    }

    #[test]
    fn weight_is_the_minimizer_for_the_batch() {
        let data = uniform_data(60, 8, |a, x| a.sin() + x * x);
        let factors = init_factors(&data, &small_specs(3), 9).unwrap();
        let feats: Vec<Matrix> = factors
            .iter()
            .map(|f| f.map.forward_batch(data.block(f.role).unwrap()).unwrap())
            .collect();
        let y = data.outcome().unwrap();
        let p = profiled_from_features(&feats, &y, 0.05, false).unwrap();
        let psi = tensor_rows(&feats);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        for _ in 0..50 {
            let w: Vec<f64> = p.weight.iter().map(|v| v + rng.random_range(-1e-3..1e-3)).collect();
            let l = crate::linalg::ridge_objective(&psi, &y, &w, 0.05).unwrap();
            assert!(l >= p.loss - 1e-14);
        }
    }

    #[test]
    fn outcome_scaling_scales_weight() {
        let data = uniform_data(50, 11, |a, x| a + 2.0 * x);
        let factors = init_factors(&data, &small_specs(3), 12).unwrap();
        let (_, w) = profiled_loss(&factors, &data, 0.1).unwrap();
        let y: Vec<f64> = data.outcome().unwrap().iter().map(|v| -4.0 * v).collect();
        let mut scaled = data.select_rows(&(0..50).collect::<Vec<_>>());
        scaled = {
            let mut d = ColumnarDataset::new(50);
            d.insert(Role::Outcome, None, Matrix::from_row_major(50, 1, y).unwrap()).unwrap();
            d.insert(Role::Treatment, None, scaled.block(Role::Treatment).unwrap().clone()).unwrap();
            d.insert(Role::BackDoor, None, scaled.block(Role::BackDoor).unwrap().clone()).unwrap();
            d
        };
        let (_, w2) = profiled_loss(&factors, &scaled, 0.1).unwrap();
        for (a, b) in w.iter().zip(w2.iter()) {
            assert!((-4.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_middle_factor_reproduces_two_factor_training() {
        let mut data = uniform_data(120, 13, |a, x| a * x + x);
        data.insert(Role::ObservedConfounder, None, Matrix::zeros(120, 2)).unwrap();
        let config = TrainConfig { epochs: 3, batch_size: 50, seed: 14, ..Default::default() };
        let (two, _) = train_stage1(&data, &small_specs(3), &config).unwrap();
        let mut specs = small_specs(3);
        specs.insert(1, FactorSpec { constant: Some(1.0), ..FactorSpec::new(Role::ObservedConfounder, 1) });
        let (three, _) = train_stage1(&data, &specs, &config).unwrap();
        assert_eq!(two.weight(), three.weight());
        assert_eq!(two.factors()[0], three.factors()[0]);
        assert_eq!(two.factors()[1], three.factors()[2]);
    }

    #[test]
    fn profiled_gradient_matches_finite_differences() {
        let data = uniform_data(30, 15, |a, x| (2.0 * a).cos() * x);
        let specs: Vec<FactorSpec> = [Role::Treatment, Role::BackDoor]
            .into_iter()
            .map(|r| FactorSpec { hidden: Some(vec![5]), ..FactorSpec::new(r, 2) })
            .collect();
        let factors = init_factors(&data, &specs, 16).unwrap();
        let y = data.outcome().unwrap();
        let lambda = 0.05;
        let inputs: Vec<&Matrix> = factors.iter().map(|f| data.block(f.role).unwrap()).collect();
        let caches: Vec<_> = factors.iter().zip(&inputs).map(|(f, x)| f.map.forward_cached(x).unwrap()).collect();
        let feats: Vec<Matrix> = caches.iter().map(|c| c.output().clone()).collect();
        let p = profiled_from_features(&feats, &y, lambda, true).unwrap();
        let cts = p.cotangents.unwrap();
        let loss_with = |fs: &[Factor]| profiled_loss(fs, &data, lambda).unwrap().0;
        for (j, f) in factors.iter().enumerate() {
            let g = f.map.backward_batch(&caches[j], &cts[j], false).unwrap().params;
            for k in 0..f.map.num_params() {
                let h = 1e-6;
                let mut plus = factors.clone();
                plus[j].map.params_mut()[k] += h;
                let mut minus = factors.clone();
                minus[j].map.params_mut()[k] -= h;
                let fd = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                assert!(err < 1e-4, "factor {j} param {k}: fd {fd} analytic {}", g[k]);
            }
        }
    }

    #[test]
    fn json_roundtrip_preserves_predictions() {
        let data = uniform_data(40, 17, |a, x| a - x);
        let config = TrainConfig { epochs: 2, ..Default::default() };
        let (model, _) = train_stage1(&data, &small_specs(3), &config).unwrap();
        let back = StageOneModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.fingerprint(), model.fingerprint());
        assert_eq!(back.predict_dataset(&data).unwrap(), model.predict_dataset(&data).unwrap());
        assert!(StageOneModel::from_json("{}").is_err());
    }

    #[test]
    fn overflowing_loss_fails_fast() {
        let data = uniform_data(20, 18, |a, _| a * 1e200);
        let config = TrainConfig { epochs: 2, ..Default::default() };
        assert!(matches!(
            train_stage1(&data, &small_specs(2), &config),
            Err(Error::NonFiniteLoss { epoch: 0 })
        ));
    }

    proptest! {
        #[test]
        fn profiled_loss_never_exceeds_mean_square(seed in 0u64..1000, lambda in 1e-4f64..10.0) {
            let data = uniform_data(25, seed, |a, x| 3.0 * a - x * x + 0.5);
            let factors = init_factors(&data, &small_specs(2), seed).unwrap();
            let (loss, _) = profiled_loss(&factors, &data, lambda).unwrap();
            let y = data.outcome().unwrap();
            let ms = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
            prop_assert!(loss <= ms + 1e-12);
        }
    }
}
