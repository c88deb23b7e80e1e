//! Stage two: marginal and conditional means of stage-one features.
//!
//! Marginal embeddings are plain empirical averages. Conditional embeddings
//! `E[φ(V) | C = c]` are fit by a vector-valued network regression of the
//! cached (frozen) stage-one features on the conditioning columns.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ColumnarDataset, Role};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::nn::{self, AdamConfig, AdamState, FeatureMap, OutputActivation};
use crate::rng::{permutation, stream, Stream};
use crate::stage1::{tensor_rows, StageOneModel};

const FORMAT: &str = "causal-embed/regressor";

/// Column means of `rows`. Each coordinate is summed in sorted order, so the
/// result does not depend on the row order.
pub fn mean_rows(rows: &Matrix) -> Result<Vector> {
    let n = rows.rows();
    if n == 0 {
        return Err(Error::EmptyInput("embedding samples"));
    }
    let mut col = vec![0.0; n];
    let mut out = Vec::with_capacity(rows.cols());
    for j in 0..rows.cols() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = rows.get(i, j);
        }
        col.sort_by(f64::total_cmp);
        out.push(col.iter().sum::<f64>() / n as f64);
    }
    Ok(Vector::from(out))
}

/// `(1/n) Σ φ(x_i)` over the rows of `samples`.
pub fn marginal_embedding(map: &FeatureMap, samples: &Matrix) -> Result<Vector> {
    if samples.rows() == 0 {
        return Err(Error::EmptyInput("embedding samples"));
    }
    mean_rows(&map.forward_batch(samples)?)
}

/// Something that maps a conditioning input to an estimated feature mean.
pub trait ConditionalEmbedding {
    fn conditioning_roles(&self) -> &[Role];
    fn target_roles(&self) -> &[Role];
    fn conditioning_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn embed(&self, input: &[f64]) -> Result<Vector>;
    /// SHA-256 of the underlying serialized model.
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Coefficient of the squared-norm penalty on layer weights (not biases).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            hidden: vec![64, 64],
            epochs: 100,
            batch_size: 256,
            adam: AdamConfig::default(),
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage-two epochs and batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.adam.validate()
    }
}

/// Trained network estimating `E[φ_targets | conditioning]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRegressor {
    conditioning: Vec<Role>,
    targets: Vec<Role>,
    network: FeatureMap,
    /// Clamp outputs to `[0, 1]` (used when the target features are ramps).
    clamp: bool,
}

impl EmbeddingRegressor {
    pub fn new(conditioning: Vec<Role>, targets: Vec<Role>, network: FeatureMap, clamp: bool) -> Result<Self> {
        if conditioning.is_empty() || targets.is_empty() {
            return Err(Error::Config("regressor needs conditioning and target roles".into()));
        }
        Ok(EmbeddingRegressor {
            conditioning,
            targets,
            network,
            clamp,
        })
    }

    pub fn network(&self) -> &FeatureMap {
        &self.network
    }

    pub fn clamps(&self) -> bool {
        self.clamp
    }

    /// Embeddings for every row of `inputs`.
    pub fn embed_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut out = self.network.forward_batch(inputs)?;
        if self.clamp {
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let repr = RegressorRepr {
            format: FORMAT.into(),
            conditioning: self.conditioning.clone(),
            targets: self.targets.clone(),
            clamp: self.clamp,
            network: self.network.clone(),
        };
        serde_json::to_string_pretty(&repr).expect("finite regressor serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: RegressorRepr =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if repr.format != FORMAT {
            return Err(Error::Format(format!(
                "expected format `{FORMAT}`, found `{}`",
                repr.format
            )));
        }
        EmbeddingRegressor::new(repr.conditioning, repr.targets, repr.network, repr.clamp)
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

impl ConditionalEmbedding for EmbeddingRegressor {
    fn conditioning_roles(&self) -> &[Role] {
        &self.conditioning
    }

    fn target_roles(&self) -> &[Role] {
        &self.targets
    }

    fn conditioning_dim(&self) -> usize {
        self.network.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    fn embed(&self, input: &[f64]) -> Result<Vector> {
        let mut v = self.network.forward(input)?;
        if self.clamp {
            v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        }
        Ok(v)
    }

    fn fingerprint(&self) -> String {
        EmbeddingRegressor::fingerprint(self)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegressorRepr {
    format: String,
    conditioning: Vec<Role>,
    targets: Vec<Role>,
    clamp: bool,
    network: FeatureMap,
}

/// Presents an embedding under different role labels, ignoring the first
/// `skip` entries of each conditioning input. Lets a regressor fit on `a`
/// stand in for one conditioned on `(o, a)` when `o` carries no information.
pub struct EmbeddingView<'a, E: ConditionalEmbedding + ?Sized> {
    inner: &'a E,
    skip: usize,
    conditioning: Vec<Role>,
    targets: Vec<Role>,
}

impl<'a, E: ConditionalEmbedding + ?Sized> EmbeddingView<'a, E> {
    pub fn new(inner: &'a E, skip: usize, conditioning: Vec<Role>, targets: Vec<Role>) -> Self {
        EmbeddingView {
            inner,
            skip,
            conditioning,
            targets,
        }
    }
}

impl<E: ConditionalEmbedding + ?Sized> ConditionalEmbedding for EmbeddingView<'_, E> {
    fn conditioning_roles(&self) -> &[Role] {
        &self.conditioning
    }

    fn target_roles(&self) -> &[Role] {
        &self.targets
    }

    fn conditioning_dim(&self) -> usize {
        self.inner.conditioning_dim() + self.skip
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn embed(&self, input: &[f64]) -> Result<Vector> {
        check_dim("embedding input", self.conditioning_dim(), input.len())?;
        self.inner.embed(&input[self.skip..])
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorReport {
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn objective(net: &FeatureMap, inputs: &Matrix, targets: &Matrix, weight_decay: f64) -> Result<f64> {
    let out = net.forward_batch(inputs)?;
    let sq: f64 = out
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sq / inputs.rows() as f64 + weight_decay * weight_norm_sq(net))
}

fn weight_norm_sq(net: &FeatureMap) -> f64 {
    net.weight_ranges()
        .into_iter()
        .flat_map(|r| net.params()[r].iter())
        .map(|w| w * w)
        .sum()
}

/// Fits `f` minimizing `(1/n) Σ ‖t_i − f(c_i)‖² + decay·‖W‖²` with Adam.
///
/// `targets` holds precomputed feature rows, `inputs` the conditioning rows.
/// The stream tag keeps different regressions of one replication on
/// separate random streams. If training ends above the starting loss the
/// initial network is returned.
pub fn train_embedding(
    targets: &Matrix,
    inputs: &Matrix,
    conditioning: Vec<Role>,
    target_roles: Vec<Role>,
    clamp: bool,
    config: &RegressorConfig,
    tag: u64,
) -> Result<(EmbeddingRegressor, RegressorReport)> {
    config.validate()?;
    let n = inputs.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    check_dim("regression targets", n, targets.rows())?;
    let mut net = nn::build(
        inputs.cols(),
        &config.hidden,
        targets.cols(),
        OutputActivation::Identity,
        &mut stream(config.seed, Stream::RegressorInit(tag)),
    )?;
    let initial = net.clone();
    let initial_loss = objective(&net, inputs, targets, config.weight_decay)?;
    let mut adam = AdamState::new(config.adam, net.num_params());
    let mut shuffle = stream(config.seed, Stream::RegressorShuffle(tag));
    let batch = config.batch_size.min(n);
    let weight_ranges = net.weight_ranges();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let perm = permutation(&mut shuffle, n);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in perm.chunks(batch) {
            let xb = inputs.select_rows(idx);
            let tb = targets.select_rows(idx);
            let cache = net.forward_cached(&xb)?;
            let b = idx.len() as f64;
            let mut ct = cache.output().clone();
            let mut sq = 0.0;
            for (c, t) in ct.as_mut_slice().iter_mut().zip(tb.as_slice()) {
                let r = *c - t;
                sq += r * r;
                *c = 2.0 * r / b;
            }
            let decay = config.weight_decay * weight_norm_sq(&net);
            let loss = sq / b + decay;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            total += loss;
            batches += 1;
            let mut g = net.backward_batch(&cache, &ct, false)?.params;
            for r in &weight_ranges {
                for k in r.clone() {
                    g[k] += 2.0 * config.weight_decay * net.params()[k];
                }
            }
            adam.step(net.params_mut(), &g)?;
        }
        let mean = total / batches as f64;
        log::debug!("stage2[{tag}] epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let mut final_loss = objective(&net, inputs, targets, config.weight_decay)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: config.epochs,
        });
    }
    if final_loss > initial_loss {
        net = initial;
        final_loss = initial_loss;
    }
    let reg = EmbeddingRegressor::new(conditioning, target_roles, net, clamp)?;
    Ok((
        reg,
        RegressorReport {
            epoch_losses,
            initial_loss,
            final_loss,
        },
    ))
}

/// Columns of `roles`, concatenated in order.
pub fn stack_roles(data: &ColumnarDataset, roles: &[Role]) -> Result<Matrix> {
    let blocks = roles
        .iter()
        .map(|&r| data.block(r))
        .collect::<Result<Vec<_>>>()?;
    let cols: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Vec::with_capacity(data.len() * cols);
    for i in 0..data.len() {
        for b in &blocks {
            out.extend_from_slice(b.row(i));
        }
    }
    Matrix::from_row_major(data.len(), cols, out)
}

/// Row-wise tensor product of the frozen stage-one features for `roles`.
pub fn target_features(model: &StageOneModel, data: &ColumnarDataset, roles: &[Role]) -> Result<Matrix> {
    let feats = roles
        .iter()
        .map(|&r| model.map(r)?.forward_batch(data.block(r)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(tensor_rows(&feats))
}

/// Regresses the stage-one features of `targets` on the columns of
/// `conditioning`. Outputs are clamped when every target map is a ramp.
pub fn fit_conditional_embedding(
    model: &StageOneModel,
    data: &ColumnarDataset,
    conditioning: &[Role],
    targets: &[Role],
    config: &RegressorConfig,
    tag: u64,
) -> Result<(EmbeddingRegressor, RegressorReport)> {
    let t = target_features(model, data, targets)?;
    let x = stack_roles(data, conditioning)?;
    let clamp = targets
        .iter()
        .map(|&r| model.map(r).map(|m| m.output_activation() == OutputActivation::Ramp))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .all(|b| b);
    train_embedding(&t, &x, conditioning.to_vec(), targets.to_vec(), clamp, config, tag)
}
