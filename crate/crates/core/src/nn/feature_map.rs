use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{gemm_view, MatRef, Matrix, Trans, Vector};
use crate::rng::Rng;

/// Activation applied to the last layer's pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Identity,
    /// `min(1, max(0, z))`; keeps every feature in `[0, 1]`.
    Ramp,
}

impl OutputActivation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputActivation::Identity => z,
            OutputActivation::Ramp => z.clamp(0.0, 1.0),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            OutputActivation::Identity => 1.0,
            OutputActivation::Ramp => {
                if z > 0.0 && z < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Feed-forward network with ReLU hidden layers.
///
/// Parameters live in one flat buffer; layer `l` stores its `out × in`
/// weight matrix (row-major) followed by its `out` biases. Gradients use the
/// same layout, which is what the optimizer consumes.
///
/// With `constant_feature` set, a coordinate fixed at 1 is appended after
/// the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    output: OutputActivation,
    frozen: bool,
    constant_feature: bool,
}

/// Intermediate values from a batched forward pass, needed by
/// [`FeatureMap::backward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Inputs to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    /// Pre-activations of each layer.
    pre: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn into_output(self) -> Matrix {
        self.output
    }

    /// Smallest |pre-activation| over all hidden units (and ramp output
    /// units); distance of this batch from an activation kink.
    pub fn kink_margin(&self, output: OutputActivation) -> f64 {
        let last = self.pre.len() - 1;
        let mut margin = f64::INFINITY;
        for (l, z) in self.pre.iter().enumerate() {
            for &v in z.as_slice() {
                if l < last {
                    margin = margin.min(v.abs());
                } else if output == OutputActivation::Ramp {
                    margin = margin.min(v.abs()).min((v - 1.0).abs());
                }
            }
        }
        margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Option<Matrix>,
}

impl FeatureMap {
    /// Random network. Weights are uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// biases start at zero.
    pub fn new(layer_dims: &[usize], output: OutputActivation, rng: &mut Rng) -> Result<Self> {
        let mut map = Self::zeros(layer_dims, output)?;
        let mut offset = 0;
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut map.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(map)
    }

    pub fn zeros(layer_dims: &[usize], output: OutputActivation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "feature map needs at least two positive layer dims, got {layer_dims:?}"
            )));
        }
        let n: usize = layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(FeatureMap {
            layer_dims: layer_dims.to_vec(),
            params: vec![0.0; n],
            output,
            frozen: false,
            constant_feature: false,
        })
    }

    /// A frozen map returning `value` in every one of `dim` coordinates.
    pub fn constant(input_dim: usize, dim: usize, value: f64) -> Result<Self> {
        let mut map = Self::zeros(&[input_dim, dim], OutputActivation::Identity)?;
        let bias_start = input_dim * dim;
        map.params[bias_start..].iter_mut().for_each(|b| *b = value);
        map.frozen = true;
        Ok(map)
    }

    /// Builds a map from explicit per-layer `(weights out×in, bias)` pairs.
    pub fn from_layers(
        layer_dims: &[usize],
        layers: &[(Vec<f64>, Vec<f64>)],
        output: OutputActivation,
    ) -> Result<Self> {
        let mut map = Self::zeros(layer_dims, output)?;
        check_dim("layer count", layer_dims.len() - 1, layers.len())?;
        let mut params = Vec::with_capacity(map.params.len());
        for (l, (w, b)) in layers.iter().enumerate() {
            check_dim("layer weights", layer_dims[l] * layer_dims[l + 1], w.len())?;
            check_dim("layer bias", layer_dims[l + 1], b.len())?;
            params.extend_from_slice(w);
            params.extend_from_slice(b);
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map parameters"));
        }
        map.params = params;
        Ok(map)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims.last().unwrap() + usize::from(self.constant_feature)
    }

    pub fn has_constant_feature(&self) -> bool {
        self.constant_feature
    }

    pub fn set_constant_feature(&mut self, on: bool) {
        self.constant_feature = on;
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Frozen maps are left untouched by training.
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn offset(&self, layer: usize) -> usize {
        self.layer_dims[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weights, bias)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fi, fo) = (self.layer_dims[l], self.layer_dims[l + 1]);
        let start = self.offset(l);
        let w = &self.params[start..start + fi * fo];
        let b = &self.params[start + fi * fo..start + fi * fo + fo];
        (w, b)
    }

    /// Positions of weight (not bias) entries in the flat parameter buffer.
    pub fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.num_layers())
            .map(|l| {
                let start = self.offset(l);
                start..start + self.layer_dims[l] * self.layer_dims[l + 1]
            })
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vector> {
        check_dim("feature map input", self.input_dim(), input.len())?;
        let batch = Matrix::from_row_major(1, input.len(), input.to_vec())?;
        Ok(Vector::from(self.forward_batch(&batch)?.into_vec()))
    }

    /// Forward pass over the rows of `batch`.
    pub fn forward_batch(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(batch)?.output)
    }

    pub fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        check_dim("feature map input", self.input_dim(), batch.cols())?;
        let nl = self.num_layers();
        let mut inputs = Vec::with_capacity(nl);
        let mut pre = Vec::with_capacity(nl);
        let mut h = batch.clone();
        for l in 0..nl {
            let (fi, fo) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let (w, b) = self.layer(l);
            let mut z = gemm_view(1.0, h.view(), Trans::No, MatRef::new(fo, fi, w), Trans::Yes)?;
            for r in 0..z.rows() {
                for (v, bias) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bias;
                }
            }
            let next = if l + 1 < nl {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            } else {
                let mut a = z.clone();
                let act = self.output;
                a.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
                a
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        if self.constant_feature {
            let d = h.cols();
            let mut out = Matrix::zeros(h.rows(), d + 1);
            for r in 0..h.rows() {
                let row = out.row_mut(r);
                row[..d].copy_from_slice(h.row(r));
                row[d] = 1.0;
            }
            h = out;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Reverse-mode gradients of `Σ_rows ⟨cotangent_row, output_row⟩`.
    /// Activation kinks use subgradient 0.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        cotangent: &Matrix,
        want_input_grad: bool,
    ) -> Result<Gradients> {
        let nl = self.num_layers();
        check_dim("cotangent rows", cache.output.rows(), cotangent.rows())?;
        check_dim("cotangent dim", self.output_dim(), cotangent.cols())?;
        let mut grads = vec![0.0; self.params.len()];
        let mut dz = if self.constant_feature {
            let d = self.output_dim() - 1;
            let mut m = Matrix::zeros(cotangent.rows(), d);
            for r in 0..m.rows() {
                m.row_mut(r).copy_from_slice(&cotangent.row(r)[..d]);
            }
            m
        } else {
            cotangent.clone()
        };
        {
            let z = &cache.pre[nl - 1];
            let act = self.output;
            for (d, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *d *= act.derivative(zv);
            }
        }
        let mut input_grad = None;
        for l in (0..nl).rev() {
            let (fi, fo) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let start = self.offset(l);
            let dw = gemm_view(1.0, dz.view(), Trans::Yes, cache.inputs[l].view(), Trans::No)?;
            grads[start..start + fi * fo].copy_from_slice(dw.as_slice());
            let db = &mut grads[start + fi * fo..start + fi * fo + fo];
            for r in 0..dz.rows() {
                for (g, v) in db.iter_mut().zip(dz.row(r)) {
                    *g += v;
                }
            }
            if l > 0 || want_input_grad {
                let (w, _) = self.layer(l);
                let mut dh = gemm_view(1.0, dz.view(), Trans::No, MatRef::new(fo, fi, w), Trans::No)?;
                if l > 0 {
                    let z = &cache.pre[l - 1];
                    for (d, &zv) in dh.as_mut_slice().iter_mut().zip(z.as_slice()) {
                        if zv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    dz = dh;
                } else {
                    input_grad = Some(dh);
                }
            }
        }
        Ok(Gradients {
            params: grads,
            input: input_grad,
        })
    }

    /// Single-sample gradients of `⟨cotangent, forward(input)⟩` with respect
    /// to parameters and input.
    pub fn backward(&self, input: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vector)> {
        check_dim("feature map input", self.input_dim(), input.len())?;
        check_dim("cotangent dim", self.output_dim(), cotangent.len())?;
        let batch = Matrix::from_row_major(1, input.len(), input.to_vec())?;
        let cache = self.forward_cached(&batch)?;
        let ct = Matrix::from_row_major(1, cotangent.len(), cotangent.to_vec())?;
        let g = self.backward_batch(&cache, &ct, true)?;
        let input_grad = g.input.expect("input gradient requested").into_vec();
        Ok((g.params, Vector::from(input_grad)))
    }
}

/// On-disk representation; human-readable, one array per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct FeatureMapRepr {
    layer_dims: Vec<usize>,
    hidden_activation: String,
    output_activation: OutputActivation,
    frozen: bool,
    #[serde(default)]
    constant_feature: bool,
    layers: Vec<LayerRepr>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRepr {
    /// `out` rows of `in` weights.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<&FeatureMap> for FeatureMapRepr {
    fn from(m: &FeatureMap) -> Self {
        let layers = (0..m.num_layers())
            .map(|l| {
                let (w, b) = m.layer(l);
                LayerRepr {
                    weights: w.chunks(m.layer_dims[l]).map(<[f64]>::to_vec).collect(),
                    bias: b.to_vec(),
                }
            })
            .collect();
        FeatureMapRepr {
            layer_dims: m.layer_dims.clone(),
            hidden_activation: "relu".into(),
            output_activation: m.output,
            frozen: m.frozen,
            constant_feature: m.constant_feature,
            layers,
        }
    }
}

impl TryFrom<FeatureMapRepr> for FeatureMap {
    type Error = Error;
    fn try_from(r: FeatureMapRepr) -> Result<Self> {
        if r.hidden_activation != "relu" {
            return Err(Error::Format(format!(
                "unsupported hidden activation `{}`",
                r.hidden_activation
            )));
        }
        if r.layer_dims.len() < 2 {
            return Err(Error::Format("layer_dims needs at least two entries".into()));
        }
        let mut layers = Vec::with_capacity(r.layers.len());
        for (l, layer) in r.layers.into_iter().enumerate() {
            let fi = *r
                .layer_dims
                .get(l)
                .ok_or_else(|| Error::Format("more layers than layer_dims".into()))?;
            if layer.weights.iter().any(|row| row.len() != fi) {
                return Err(Error::Format(format!("layer {l}: weight row length != {fi}")));
            }
            layers.push((layer.weights.concat(), layer.bias));
        }
        let mut map = FeatureMap::from_layers(&r.layer_dims, &layers, r.output_activation)
            .map_err(|e| Error::Format(e.to_string()))?;
        map.frozen = r.frozen;
        map.constant_feature = r.constant_feature;
        Ok(map)
    }
}

impl Serialize for FeatureMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FeatureMapRepr::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = FeatureMapRepr::deserialize(d)?;
        FeatureMap::try_from(repr).map_err(serde::de::Error::custom)
    }
}
