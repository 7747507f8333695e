use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat, ShapeBuilder, Zip};
use num_traits::FromPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::CpcConfig;
use super::sampler::{NegativePlan, NegativeSampler};
use crate::error::{Error, Result};

/// Floating point type the model can run in: `f32` for training and
/// scoring, `f64` for gradient checks.
pub trait Real: NdFloat + FromPrimitive {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Weight matrix plus bias. Convolution weights are stored im2col-style as
/// `(kernel * channels_in, channels_out)` with row index `j * channels_in + i`
/// for kernel tap `j` and input channel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Dense<F> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(cols),
        }
    }

    fn map<G: Real>(&self, f: impl Fn(F) -> G + Copy) -> Dense<G> {
        Dense {
            weight: self.weight.mapv(f),
            bias: self.bias.mapv(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every trainable tensor of a CPC model. Gradients use the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct CpcParams<F> {
    pub encoder: Vec<Dense<F>>,
    pub aggregator: Vec<Dense<F>>,
    /// One affine map per prediction step, `predictors[k - 1]` for step k.
    pub predictors: Vec<Dense<F>>,
}

impl<F: Real> CpcParams<F> {
    pub fn zeros(config: &CpcConfig) -> Self {
        let mut encoder = Vec::with_capacity(config.encoder_layers.len());
        let mut c_in = 1;
        for layer in &config.encoder_layers {
            encoder.push(Dense::zeros(layer.kernel * c_in, layer.channels));
            c_in = layer.channels;
        }
        let d = config.embed_dim;
        Self {
            encoder,
            aggregator: (0..config.aggregator_layers)
                .map(|_| Dense::zeros(config.aggregator_kernel * d, d))
                .collect(),
            predictors: (0..config.prediction_steps)
                .map(|_| Dense::zeros(d, d))
                .collect(),
        }
    }

    /// Names and shapes in declared (serialization) order.
    pub fn shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let groups = [
            ("encoder", &self.encoder),
            ("aggregator", &self.aggregator),
            ("predictor", &self.predictors),
        ];
        for (group, layers) in groups {
            for (i, d) in layers.iter().enumerate() {
                out.push(ParamShape {
                    name: format!("{group}.{i}.weight"),
                    shape: d.weight.shape().to_vec(),
                });
                out.push(ParamShape {
                    name: format!("{group}.{i}.bias"),
                    shape: d.bias.shape().to_vec(),
                });
            }
        }
        out
    }

    fn dense(&self) -> impl Iterator<Item = &Dense<F>> {
        self.encoder
            .iter()
            .chain(&self.aggregator)
            .chain(&self.predictors)
    }

    fn dense_mut(&mut self) -> impl Iterator<Item = &mut Dense<F>> {
        self.encoder
            .iter_mut()
            .chain(&mut self.aggregator)
            .chain(&mut self.predictors)
    }

    /// Flat parameter blocks in the same order as [`CpcParams::shapes`].
    pub fn blocks(&self) -> Vec<&[F]> {
        self.dense()
            .flat_map(|d| {
                [
                    d.weight.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for d in self.dense_mut() {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G + Copy) -> CpcParams<G> {
        CpcParams {
            encoder: self.encoder.iter().map(|d| d.map(f)).collect(),
            aggregator: self.aggregator.iter().map(|d| d.map(f)).collect(),
            predictors: self.predictors.iter().map(|d| d.map(f)).collect(),
        }
    }
}

/// Per-frame and total contrastive loss of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    /// Loss attributed to each context frame that has at least one valid
    /// prediction step; `frames - 1` entries.
    pub frame_losses: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward<F> {
    input: Vec<F>,
    /// Output of each encoder layer; the last one is z.
    encoder: Vec<Array2<F>>,
    /// Left-padded input of each aggregator layer.
    aggregator_inputs: Vec<Array2<F>>,
    /// Output of each aggregator layer; the last one is c.
    aggregator: Vec<Array2<F>>,
}

impl<F: Real> Forward<F> {
    pub fn z(&self) -> ArrayView2<'_, F> {
        self.encoder.last().unwrap().view()
    }

    pub fn c(&self) -> ArrayView2<'_, F> {
        self.aggregator.last().unwrap().view()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpcModel<F = f32> {
    config: CpcConfig,
    pub params: CpcParams<F>,
}

impl<F: Real> CpcModel<F> {
    /// Fresh model with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and
    /// zero biases, drawn from `config.seed`.
    pub fn new(config: CpcConfig) -> Result<Self> {
        config.validate()?;
        let mut params = CpcParams::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for d in params.dense_mut() {
            let bound = 1.0 / (d.weight.nrows() as f64).sqrt();
            d.weight
                .mapv_inplace(|_| F::lit(rng.gen_range(-bound..bound)));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: CpcConfig, params: CpcParams<F>) -> Result<Self> {
        config.validate()?;
        let expected = CpcParams::<F>::zeros(&config).shapes();
        if params.shapes() != expected {
            return Err(Error::Format(
                "parameter shapes do not match the configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CpcConfig {
        &self.config
    }

    pub fn cast<G: Real>(&self) -> CpcModel<G> {
        CpcModel {
            config: self.config.clone(),
            params: self.params.map(|x| G::lit(x.to_f64().unwrap())),
        }
    }

    /// Zero every predictor weight and bias.
    pub fn zero_predictors(&mut self) {
        for p in &mut self.params.predictors {
            p.weight.fill(F::zero());
            p.bias.fill(F::zero());
        }
    }

    /// Strided convolutional encoder: ReLU after every layer but the last.
    pub fn encode(&self, input: &[F]) -> Result<Array2<F>> {
        Ok(self.run_encoder(input)?.pop().unwrap())
    }

    fn run_encoder(&self, input: &[F]) -> Result<Vec<Array2<F>>> {
        let layers = &self.config.encoder_layers;
        let mut outputs: Vec<Array2<F>> = Vec::with_capacity(layers.len());
        for (l, (geom, dense)) in layers.iter().zip(&self.params.encoder).enumerate() {
            let (flat, t_in, c_in) = match outputs.last() {
                None => (input, input.len(), 1),
                Some(prev) => (prev.as_slice().unwrap(), prev.nrows(), prev.ncols()),
            };
            if t_in < geom.kernel {
                return Err(Error::TooShort(format!(
                    "encoder layer {l} needs {} frames, got {t_in} (input {} samples)",
                    geom.kernel,
                    input.len()
                )));
            }
            let mut out = conv_forward(flat, t_in, c_in, dense, geom.kernel, geom.stride);
            if l + 1 < layers.len() {
                out.mapv_inplace(relu);
            }
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Causal aggregator: `c[t]` depends on `z[..=t]` only. ReLU follows
    /// every layer.
    pub fn contextualize(&self, z: ArrayView2<'_, F>) -> Array2<F> {
        self.run_aggregator(z).1.pop().unwrap()
    }

    fn run_aggregator(&self, z: ArrayView2<'_, F>) -> (Vec<Array2<F>>, Vec<Array2<F>>) {
        let k = self.config.aggregator_kernel;
        let (t, d) = z.dim();
        let mut inputs = Vec::with_capacity(self.params.aggregator.len());
        let mut outputs: Vec<Array2<F>> = Vec::with_capacity(self.params.aggregator.len());
        for dense in &self.params.aggregator {
            let mut padded = Array2::zeros((t + k - 1, d));
            padded
                .slice_mut(s![k - 1.., ..])
                .assign(&outputs.last().map_or(z, |o| o.view()));
            let mut out = conv_forward(padded.as_slice().unwrap(), t + k - 1, d, dense, k, 1);
            out.mapv_inplace(relu);
            inputs.push(padded);
            outputs.push(out);
        }
        (inputs, outputs)
    }

    pub fn forward(&self, input: &[F]) -> Result<Forward<F>> {
        let encoder = self.run_encoder(input)?;
        let (aggregator_inputs, aggregator) = self.run_aggregator(encoder.last().unwrap().view());
        Ok(Forward {
            input: input.to_vec(),
            encoder,
            aggregator_inputs,
            aggregator,
        })
    }

    /// Sigmoid contrastive loss. For context frame t and step k, with
    /// p = h_k(c_t), the term is
    /// `-log σ(z_{t+k}·p) - (1/N) Σ_j log σ(-z_{n_j}·p)`.
    /// A frame's loss averages its valid steps; the total averages frames.
    pub fn contrastive_loss(
        &self,
        z: ArrayView2<'_, F>,
        c: ArrayView2<'_, F>,
        plan: &NegativePlan,
    ) -> Result<LossOutput> {
        self.loss_pass(z, c, plan, None)
    }

    /// Frame losses of one (normalized) utterance, negatives from `sampler`.
    pub fn evaluate(&self, input: &[F], sampler: &mut NegativeSampler) -> Result<LossOutput> {
        let fw = self.forward(input)?;
        let plan = self.plan(fw.z().nrows(), sampler)?;
        self.loss_pass(fw.z(), fw.c(), &plan, None)
    }

    pub fn plan(&self, frames: usize, sampler: &mut NegativeSampler) -> Result<NegativePlan> {
        if frames < 2 {
            return Err(Error::TooShort(format!(
                "{frames} encoder frame(s); contrastive loss needs at least 2"
            )));
        }
        Ok(sampler.plan(
            frames,
            self.config.prediction_steps,
            self.config.negatives_per_positive,
        ))
    }

    /// Loss and analytic gradient of the total loss for one utterance.
    pub fn loss_gradient(
        &self,
        input: &[F],
        sampler: &mut NegativeSampler,
    ) -> Result<(LossOutput, CpcParams<F>)> {
        let fw = self.forward(input)?;
        let plan = self.plan(fw.z().nrows(), sampler)?;
        self.backward(&fw, &plan)
    }

    /// Loss under a fixed negative plan; the function whose gradient
    /// [`CpcModel::backward`] returns.
    pub fn loss_with_plan(&self, input: &[F], plan: &NegativePlan) -> Result<LossOutput> {
        let fw = self.forward(input)?;
        self.loss_pass(fw.z(), fw.c(), plan, None)
    }

    pub fn backward(
        &self,
        fw: &Forward<F>,
        plan: &NegativePlan,
    ) -> Result<(LossOutput, CpcParams<F>)> {
        let mut grads = CpcParams::zeros(&self.config);
        let z = fw.z();
        let mut dz = Array2::zeros(z.dim());
        let mut dc = Array2::zeros(z.dim());
        let out = self.loss_pass(
            z,
            fw.c(),
            plan,
            Some(LossGrads {
                predictors: &mut grads.predictors,
                dz: &mut dz,
                dc: &mut dc,
            }),
        )?;

        let k = self.config.aggregator_kernel;
        let mut d_out = dc;
        for l in (0..self.params.aggregator.len()).rev() {
            relu_mask(&mut d_out, &fw.aggregator[l]);
            let input = &fw.aggregator_inputs[l];
            let d_in = conv_backward(
                input.as_slice().unwrap(),
                input.nrows(),
                input.ncols(),
                &self.params.aggregator[l],
                k,
                1,
                d_out.view(),
                &mut grads.aggregator[l],
                true,
            )
            .unwrap();
            d_out = d_in.slice(s![k - 1.., ..]).to_owned();
        }
        dz += &d_out;

        let layers = &self.config.encoder_layers;
        let mut d_out = dz;
        for l in (0..layers.len()).rev() {
            if l + 1 < layers.len() {
                relu_mask(&mut d_out, &fw.encoder[l]);
            }
            let (flat, t_in, c_in) = if l == 0 {
                (fw.input.as_slice(), fw.input.len(), 1)
            } else {
                let prev = &fw.encoder[l - 1];
                (prev.as_slice().unwrap(), prev.nrows(), prev.ncols())
            };
            match conv_backward(
                flat,
                t_in,
                c_in,
                &self.params.encoder[l],
                layers[l].kernel,
                layers[l].stride,
                d_out.view(),
                &mut grads.encoder[l],
                l > 0,
            ) {
                Some(d_in) => d_out = d_in,
                None => break,
            }
        }
        Ok((out, grads))
    }

    fn loss_pass(
        &self,
        z: ArrayView2<'_, F>,
        c: ArrayView2<'_, F>,
        plan: &NegativePlan,
        mut grads: Option<LossGrads<'_, F>>,
    ) -> Result<LossOutput> {
        let frames = z.nrows();
        if frames < 2 {
            return Err(Error::TooShort(format!(
                "{frames} encoder frame(s); contrastive loss needs at least 2"
            )));
        }
        assert_eq!(c.dim(), z.dim(), "context and embedding shapes differ");
        assert_eq!(plan.frames(), frames, "negative plan built for another length");

        let steps = self.config.prediction_steps;
        let contexts = frames - 1;
        let valid = |t: usize| steps.min(frames - 1 - t);
        let inv_neg = 1.0 / plan.negatives() as f64;
        let mut frame_sum = vec![0.0f64; contexts];

        for k in 1..=plan.max_step().min(steps) {
            let rows = frames - k;
            let ctx = c.slice(s![..rows, ..]);
            let h = &self.params.predictors[k - 1];
            let mut pred = Array2::from_shape_fn((rows, h.bias.len()), |(_, j)| h.bias[j]);
            general_mat_mul(F::one(), &ctx, &h.weight, F::one(), &mut pred);
            let mut dpred = grads.as_ref().map(|_| Array2::<F>::zeros(pred.dim()));

            for t in 0..rows {
                let p = pred.row(t);
                let n_valid = valid(t) as f64;
                let weight = 1.0 / (contexts as f64 * n_valid);
                let pos = z.row(t + k).dot(&p).to_f64().unwrap();
                let mut term = softplus(-pos);
                let negs = plan.get(t, k);
                for &n in negs {
                    let logit = z.row(n as usize).dot(&p).to_f64().unwrap();
                    term += inv_neg * softplus(logit);
                    if let (Some(g), Some(dp)) = (grads.as_mut(), dpred.as_mut()) {
                        let coef = F::lit(weight * inv_neg * sigmoid(logit));
                        dp.row_mut(t).scaled_add(coef, &z.row(n as usize));
                        g.dz.row_mut(n as usize).scaled_add(coef, &p);
                    }
                }
                frame_sum[t] += term / n_valid;
                if let (Some(g), Some(dp)) = (grads.as_mut(), dpred.as_mut()) {
                    let coef = F::lit(weight * (sigmoid(pos) - 1.0));
                    dp.row_mut(t).scaled_add(coef, &z.row(t + k));
                    g.dz.row_mut(t + k).scaled_add(coef, &p);
                }
            }

            if let (Some(g), Some(dp)) = (grads.as_mut(), dpred.as_ref()) {
                let gh = &mut g.predictors[k - 1];
                general_mat_mul(F::one(), &ctx.t(), dp, F::one(), &mut gh.weight);
                gh.bias += &dp.sum_axis(Axis(0));
                let mut dctx = g.dc.slice_mut(s![..rows, ..]);
                general_mat_mul(F::one(), dp, &h.weight.t(), F::one(), &mut dctx);
            }
        }

        let total = frame_sum.iter().sum::<f64>() / contexts as f64;
        Ok(LossOutput {
            total,
            frame_losses: frame_sum,
        })
    }
}

struct LossGrads<'a, F> {
    predictors: &'a mut [Dense<F>],
    dz: &'a mut Array2<F>,
    dc: &'a mut Array2<F>,
}

/// Per-utterance zero-mean, unit-variance normalization (variance floor 1e-8).
pub fn normalize_waveform<F: Real>(samples: &[f32]) -> Vec<F> {
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let scale = 1.0 / var.max(1e-8).sqrt();
    samples
        .iter()
        .map(|&x| F::lit((x as f64 - mean) * scale))
        .collect()
}

fn relu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

fn relu_mask<F: Real>(grad: &mut Array2<F>, activation: &Array2<F>) {
    Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// im2col view of a time-major `(t_in, c_in)` buffer: row t is the
/// contiguous window starting at frame `t * stride`.
fn windows<F>(flat: &[F], t_out: usize, c_in: usize, kernel: usize, stride: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((t_out, kernel * c_in).strides((stride * c_in, 1)), flat)
        .expect("window view within bounds")
}

fn conv_forward<F: Real>(
    flat: &[F],
    t_in: usize,
    c_in: usize,
    dense: &Dense<F>,
    kernel: usize,
    stride: usize,
) -> Array2<F> {
    let t_out = (t_in - kernel) / stride + 1;
    let cols = windows(flat, t_out, c_in, kernel, stride);
    let mut out = Array2::from_shape_fn((t_out, dense.bias.len()), |(_, o)| dense.bias[o]);
    general_mat_mul(F::one(), &cols, &dense.weight, F::one(), &mut out);
    out
}

/// Accumulates weight and bias gradients into `grad`; returns the gradient
/// with respect to the layer input when `want_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv_backward<F: Real>(
    flat: &[F],
    t_in: usize,
    c_in: usize,
    dense: &Dense<F>,
    kernel: usize,
    stride: usize,
    d_out: ArrayView2<'_, F>,
    grad: &mut Dense<F>,
    want_input: bool,
) -> Option<Array2<F>> {
    let t_out = d_out.nrows();
    let cols = windows(flat, t_out, c_in, kernel, stride);
    general_mat_mul(F::one(), &cols.t(), &d_out, F::one(), &mut grad.weight);
    grad.bias += &d_out.sum_axis(Axis(0));
    if !want_input {
        return None;
    }
    let d_cols = d_out.dot(&dense.weight.t());
    let mut d_in = Array2::zeros((t_in, c_in));
    let d_flat = d_in.as_slice_mut().unwrap();
    let width = kernel * c_in;
    for (t, row) in d_cols.outer_iter().enumerate() {
        let start = t * stride * c_in;
        for (acc, &g) in d_flat[start..start + width].iter_mut().zip(row.iter()) {
            *acc += g;
        }
    }
    Some(d_in)
}
