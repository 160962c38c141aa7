//! The attribute-capsule network: conv stem, primary capsules, routed
//! attribute capsules, a linear malignancy head and a reconstruction decoder.

mod checkpoint;

use ndtensor::{softmax_along, Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::{fc_caps_layer, primary_caps_layer, RoutingConfig, RoutingTrace};
use crate::error::{Error, Result};
use crate::ratings::{confidence, to_class};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// How the malignancy head is read out and trained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MalignancyMode {
    /// Five logits matched to the raters' score distribution.
    #[default]
    Distribution,
    /// One sigmoid output regressed onto the normalized mean score.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XCapsConfig {
    pub image_size: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub primary_types: usize,
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub attr_count: usize,
    pub attr_dim: usize,
    pub malignancy_classes: usize,
    pub routing: RoutingConfig,
    pub decoder_widths: Vec<usize>,
    pub malignancy_mode: MalignancyMode,
}

impl Default for XCapsConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            conv_filters: 256,
            conv_kernel: 9,
            primary_types: 32,
            primary_dim: 8,
            primary_kernel: 9,
            primary_stride: 2,
            attr_count: 6,
            attr_dim: 16,
            malignancy_classes: 5,
            routing: RoutingConfig::sigmoid(),
            decoder_widths: vec![512, 1024],
            malignancy_mode: MalignancyMode::Distribution,
        }
    }
}

impl XCapsConfig {
    /// Full-size network.
    pub fn full() -> Self {
        Self::default()
    }

    /// Narrower stem and decoder that train in minutes on one CPU core.
    /// Capsule dimensions and counts of outputs are unchanged.
    pub fn desk() -> Self {
        Self {
            conv_filters: 16,
            primary_types: 8,
            decoder_widths: vec![128, 256],
            ..Self::default()
        }
    }

    /// 8x8 input, two attributes; small enough for finite differences.
    pub fn toy() -> Self {
        Self {
            image_size: 8,
            conv_filters: 4,
            conv_kernel: 3,
            primary_types: 2,
            primary_dim: 4,
            primary_kernel: 3,
            primary_stride: 2,
            attr_count: 2,
            attr_dim: 4,
            malignancy_classes: 5,
            routing: RoutingConfig::sigmoid(),
            decoder_widths: vec![8, 8],
            malignancy_mode: MalignancyMode::Distribution,
        }
    }

    pub fn conv_out(&self) -> usize {
        self.image_size + 1 - self.conv_kernel
    }

    pub fn primary_grid(&self) -> usize {
        (self.conv_out() - self.primary_kernel) / self.primary_stride + 1
    }

    pub fn child_capsules(&self) -> usize {
        self.primary_types * self.primary_grid() * self.primary_grid()
    }

    /// Length of the concatenated attribute vectors.
    pub fn head_inputs(&self) -> usize {
        self.attr_count * self.attr_dim
    }

    pub fn head_outputs(&self) -> usize {
        match self.malignancy_mode {
            MalignancyMode::Distribution => self.malignancy_classes,
            MalignancyMode::Mean => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.routing.validate()?;
        let positive = [
            ("image_size", self.image_size),
            ("conv_filters", self.conv_filters),
            ("conv_kernel", self.conv_kernel),
            ("primary_types", self.primary_types),
            ("primary_dim", self.primary_dim),
            ("primary_kernel", self.primary_kernel),
            ("primary_stride", self.primary_stride),
            ("attr_count", self.attr_count),
            ("attr_dim", self.attr_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.conv_kernel > self.image_size || self.primary_kernel > self.conv_out() {
            return Err(Error::Config(format!(
                "kernels {}/{} do not fit a {} pixel input",
                self.conv_kernel, self.primary_kernel, self.image_size
            )));
        }
        if self.malignancy_classes < 2 {
            return Err(Error::Config("need at least two malignancy classes".into()));
        }
        if self.decoder_widths.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = vec![
            ("conv.w".to_string(), vec![self.conv_filters, 1, self.conv_kernel, self.conv_kernel]),
            ("conv.b".to_string(), vec![self.conv_filters]),
            (
                "primary.w".to_string(),
                vec![
                    self.primary_types * self.primary_dim,
                    self.conv_filters,
                    self.primary_kernel,
                    self.primary_kernel,
                ],
            ),
            ("primary.b".to_string(), vec![self.primary_types * self.primary_dim]),
            (
                "caps.w".to_string(),
                vec![self.child_capsules(), self.attr_count, self.attr_dim, self.primary_dim],
            ),
            ("head.w".to_string(), vec![self.head_inputs(), self.head_outputs()]),
            ("head.b".to_string(), vec![self.head_outputs()]),
        ];
        let mut width = self.head_inputs();
        let out = self.image_size * self.image_size;
        for (i, &next) in self.decoder_widths.iter().chain(std::iter::once(&out)).enumerate() {
            shapes.push((format!("decoder.{i}.w"), vec![width, next]));
            shapes.push((format!("decoder.{i}.b"), vec![1, next]));
            width = next;
        }
        shapes
    }
}

// fixed positions in the parameter list
const CONV_W: usize = 0;
const CONV_B: usize = 1;
const PRIMARY_W: usize = 2;
const PRIMARY_B: usize = 3;
const CAPS_W: usize = 4;
const HEAD_W: usize = 5;
const HEAD_B: usize = 6;
const DECODER: usize = 7;

/// Glorot-style bound using Keras fan conventions: the last two axes are
/// (fan_in, fan_out) for matrices, and leading axes multiply both for
/// higher-rank tensors; convolutions use (in, out) channels times kernel area.
fn init_bound(name: &str, shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [co, ci, kh, kw] if name.ends_with("conv.w") || name == "primary.w" => (ci * kh * kw, co * kh * kw),
        [.., a, b] => {
            let field: usize = shape[..shape.len() - 2].iter().product();
            // caps.w is [children, parents, out, in]
            if name == "caps.w" {
                (b * field, a * field)
            } else {
                (a * field, b * field)
            }
        }
        _ => unreachable!("weights are at least 2-d"),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct XCapsModel {
    config: XCapsConfig,
    seed: u64,
    params: Vec<(String, Tensor)>,
}

/// Graph nodes for one sample.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    /// `[attr_count, attr_dim]`.
    pub attr_vectors: Var,
    /// `[attr_count]` capsule lengths.
    pub attr_scores: Var,
    /// `[head_outputs]`.
    pub malignancy_logits: Var,
    /// `[image_size, image_size]`, absent when the decoder is skipped.
    pub reconstruction: Option<Var>,
    pub routing: RoutingTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub attr_vectors: Tensor,
    pub attr_scores: Vec<f64>,
    pub malignancy_logits: Vec<f64>,
    pub reconstruction: Tensor,
    pub mode: MalignancyMode,
}

impl ForwardOutput {
    /// Softmax over classes; `None` for the mean-regression head.
    pub fn malignancy_probs(&self) -> Option<Vec<f64>> {
        match self.mode {
            MalignancyMode::Distribution => {
                let logits = Tensor::vector(self.malignancy_logits.clone()).ok()?;
                softmax_along(&logits, 0).ok().map(Tensor::into_data)
            }
            MalignancyMode::Mean => None,
        }
    }

    /// Argmax class (1-based), or the rounded regressed mean.
    pub fn malignancy_class(&self) -> u8 {
        match self.mode {
            MalignancyMode::Distribution => {
                let (best, _) = self
                    .malignancy_logits
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                best as u8 + 1
            }
            MalignancyMode::Mean => to_class(1.0 + 4.0 * ndtensor::sigmoid(self.malignancy_logits[0])),
        }
    }

    pub fn confidence(&self) -> Option<f64> {
        self.malignancy_probs().and_then(|p| confidence(&p).ok())
    }

    pub fn attribute_scale(&self) -> Vec<f64> {
        attribute_scores_to_scale(&self.attr_scores)
    }
}

/// `1 + 4 s`: capsule length to the 1..5 rating scale.
pub fn attribute_scores_to_scale(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|s| 1.0 + 4.0 * s).collect()
}

/// Offsets -0.25, -0.20, ..., +0.25.
pub fn default_deltas() -> Vec<f64> {
    (0..11).map(|i| (i as f64 - 5.0) * 0.05).collect()
}

impl XCapsModel {
    pub fn build(config: XCapsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".b") {
                    vec![0.0; numel]
                } else {
                    let bound = init_bound(&name, &shape);
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Ok((name, Tensor::new(&shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, seed, params })
    }

    pub(crate) fn from_parts(config: XCapsConfig, seed: u64, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, tensor)) in expected.iter().zip(&params) {
            if name != got_name || shape.as_slice() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    tensor.shape()
                )));
            }
            if !tensor.is_finite() {
                return Err(Error::Checkpoint(format!("{name} holds non-finite values")));
            }
        }
        Ok(Self { config, seed, params })
    }

    pub fn config(&self) -> &XCapsConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Mutable parameter tensors; shapes must not change.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("decoder.")
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|(_, t)| Ok(tape.param(t.clone())?))
            .collect()
    }

    /// Builds the per-sample graph over already-bound parameter nodes.
    pub fn forward_graph(&self, tape: &mut Tape, params: &[Var], image: &Tensor, with_decoder: bool) -> Result<GraphOutput> {
        let cfg = &self.config;
        let side = cfg.image_size;
        if image.shape() != [side, side] {
            return Err(Error::invalid(
                "forward",
                format!("expected a {side}x{side} image, got {:?}", image.shape()),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::invalid("forward", "parameter list does not match the model"));
        }
        let x = tape.constant(image.reshape(&[1, side, side])?)?;
        let conv = tape.conv2d(x, params[CONV_W], 1)?;
        let conv = tape.add_channel_bias(conv, params[CONV_B])?;
        let features = tape.relu(conv)?;
        let primary = primary_caps_layer(
            tape,
            features,
            params[PRIMARY_W],
            params[PRIMARY_B],
            cfg.primary_types,
            cfg.primary_dim,
            cfg.primary_stride,
        )?;
        let (attrs, routing) = fc_caps_layer(tape, &primary, params[CAPS_W], &cfg.routing)?;
        let attr_scores = tape.l2_norm(attrs.data, 1)?;
        let flat = tape.reshape(attrs.data, &[1, cfg.head_inputs()])?;
        let malignancy_logits = self.head_graph(tape, params, flat)?;
        let reconstruction = if with_decoder {
            Some(self.decoder_graph(tape, params, flat)?)
        } else {
            None
        };
        Ok(GraphOutput {
            attr_vectors: attrs.data,
            attr_scores,
            malignancy_logits,
            reconstruction,
            routing,
        })
    }

    fn head_graph(&self, tape: &mut Tape, params: &[Var], flat: Var) -> Result<Var> {
        let z = tape.matmul(flat, params[HEAD_W])?;
        let z = tape.reshape(z, &[self.config.head_outputs()])?;
        Ok(tape.add(z, params[HEAD_B])?)
    }

    fn decoder_graph(&self, tape: &mut Tape, params: &[Var], flat: Var) -> Result<Var> {
        let layers = self.config.decoder_widths.len() + 1;
        let mut h = flat;
        for layer in 0..layers {
            let z = tape.matmul(h, params[DECODER + 2 * layer])?;
            let z = tape.add(z, params[DECODER + 2 * layer + 1])?;
            h = if layer + 1 == layers { tape.sigmoid(z)? } else { tape.relu(z)? };
        }
        let side = self.config.image_size;
        Ok(tape.reshape(h, &[side, side])?)
    }

    pub fn forward_one(&self, image: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let params = self
            .params
            .iter()
            .map(|(_, t)| Ok(tape.constant(t.clone())?))
            .collect::<Result<Vec<_>>>()?;
        let out = self.forward_graph(&mut tape, &params, image, true)?;
        let recon = out.reconstruction.expect("decoder requested");
        Ok(ForwardOutput {
            attr_vectors: tape.value(out.attr_vectors).clone(),
            attr_scores: tape.value(out.attr_scores).data().to_vec(),
            malignancy_logits: tape.value(out.malignancy_logits).data().to_vec(),
            reconstruction: tape.value(recon).clone(),
            mode: self.config.malignancy_mode,
        })
    }

    pub fn forward(&self, images: &[Tensor]) -> Result<Vec<ForwardOutput>> {
        images.iter().map(|img| self.forward_one(img)).collect()
    }

    fn check_vectors(&self, attr_vectors: &Tensor) -> Result<()> {
        let expected = [self.config.attr_count, self.config.attr_dim];
        if attr_vectors.shape() != expected {
            return Err(Error::invalid(
                "attribute vectors",
                format!("expected {expected:?}, got {:?}", attr_vectors.shape()),
            ));
        }
        Ok(())
    }

    fn with_constants<T>(&self, names: &[usize], f: impl FnOnce(&mut Tape, &[Var]) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        // unused slots get a placeholder; only `names` are read
        let placeholder = tape.constant(Tensor::scalar(0.0))?;
        let mut vars = vec![placeholder; self.params.len()];
        for &i in names {
            vars[i] = tape.constant(self.params[i].1.clone())?;
        }
        f(&mut tape, &vars)
    }

    /// Malignancy head applied to given attribute vectors.
    pub fn head_logits(&self, attr_vectors: &Tensor) -> Result<Vec<f64>> {
        self.check_vectors(attr_vectors)?;
        let flat_len = self.config.head_inputs();
        self.with_constants(&[HEAD_W, HEAD_B], |tape, vars| {
            let flat = tape.constant(attr_vectors.reshape(&[1, flat_len])?)?;
            let logits = self.head_graph(tape, vars, flat)?;
            Ok(tape.value(logits).data().to_vec())
        })
    }

    /// Decoder applied to given attribute vectors.
    pub fn decode(&self, attr_vectors: &Tensor) -> Result<Tensor> {
        self.check_vectors(attr_vectors)?;
        let flat_len = self.config.head_inputs();
        let decoder: Vec<usize> = (DECODER..self.params.len()).collect();
        self.with_constants(&decoder, |tape, vars| {
            let flat = tape.constant(attr_vectors.reshape(&[1, flat_len])?)?;
            let img = self.decoder_graph(tape, vars, flat)?;
            Ok(tape.value(img).clone())
        })
    }

    /// Per-attribute share of each malignancy logit: entry `(n, k)` is
    /// `sum_d v[n, d] * W[n * dim + d, k]`. Rows plus the head bias sum to
    /// the logits.
    pub fn contribution_report(&self, attr_vectors: &Tensor) -> Result<Tensor> {
        self.check_vectors(attr_vectors)?;
        let (n_attr, dim) = (self.config.attr_count, self.config.attr_dim);
        let k = self.config.head_outputs();
        let w = self.params[HEAD_W].1.data();
        let v = attr_vectors.data();
        let mut out = vec![0.0; n_attr * k];
        for n in 0..n_attr {
            for d in 0..dim {
                let row = n * dim + d;
                for c in 0..k {
                    out[n * k + c] += v[row] * w[row * k + c];
                }
            }
        }
        Ok(Tensor::new(&[n_attr, k], out)?)
    }

    pub fn head_bias(&self) -> &[f64] {
        self.params[HEAD_B].1.data()
    }

    /// Decodes copies of `attr_vectors` with `deltas[i]` added to one component.
    pub fn perturb_and_decode(
        &self,
        attr_vectors: &Tensor,
        attr_idx: usize,
        dim_idx: usize,
        deltas: &[f64],
    ) -> Result<Vec<Tensor>> {
        self.check_vectors(attr_vectors)?;
        if attr_idx >= self.config.attr_count || dim_idx >= self.config.attr_dim {
            return Err(Error::invalid(
                "perturb_and_decode",
                format!(
                    "index ({attr_idx}, {dim_idx}) outside {}x{}",
                    self.config.attr_count, self.config.attr_dim
                ),
            ));
        }
        deltas
            .iter()
            .map(|&delta| {
                let mut v = attr_vectors.clone();
                v.data_mut()[attr_idx * self.config.attr_dim + dim_idx] += delta;
                self.decode(&v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndtensor::gradcheck::{check_gradients, DEFAULT_STEP};

    fn ramp(side: usize) -> Tensor {
        let data = (0..side * side).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        Tensor::new(&[side, side], data).unwrap()
    }

    #[test]
    fn full_config_shapes() {
        let cfg = XCapsConfig::full();
        assert_eq!(cfg.conv_out(), 24);
        assert_eq!(cfg.primary_grid(), 8);
        assert_eq!(cfg.child_capsules(), 2048);
        assert_eq!(cfg.head_inputs(), 96);
        let shapes = cfg.param_shapes();
        assert_eq!(shapes[CAPS_W].1, vec![2048, 6, 16, 8]);
        assert_eq!(shapes.last().unwrap().1, vec![1, 1024]);
    }

    #[test]
    fn conv_stage_output_is_256_by_24() {
        let model = XCapsModel::build(XCapsConfig::full(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(ramp(32).reshape(&[1, 32, 32]).unwrap()).unwrap();
        let w = tape.constant(model.params[CONV_W].1.clone()).unwrap();
        let conv = tape.conv2d(x, w, 1).unwrap();
        assert_eq!(tape.shape(conv), &[256, 24, 24]);
    }

    #[test]
    fn build_is_deterministic_and_bounded() {
        let a = XCapsModel::build(XCapsConfig::toy(), 7).unwrap();
        assert_eq!(a, XCapsModel::build(XCapsConfig::toy(), 7).unwrap());
        assert_ne!(a, XCapsModel::build(XCapsConfig::toy(), 8).unwrap());
        for (name, t) in a.params() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = init_bound(name, t.shape());
                assert!(t.data().iter().all(|v| v.abs() < bound), "{name}");
            }
        }
        let bad = XCapsConfig {
            conv_kernel: 40,
            ..XCapsConfig::toy()
        };
        assert!(XCapsModel::build(bad, 0).is_err());
    }

    #[test]
    fn forward_ranges_and_determinism() {
        let model = XCapsModel::build(XCapsConfig::toy(), 1).unwrap();
        let img = ramp(8);
        let out = model.forward_one(&img).unwrap();
        assert_eq!(out, model.forward_one(&img).unwrap());
        assert_eq!(out.attr_vectors.shape(), &[2, 4]);
        assert!(out.attr_scores.iter().all(|s| (0.0..1.0).contains(s)));
        assert!(out.reconstruction.data().iter().all(|p| (0.0..=1.0).contains(p)));
        for (n, s) in out.attr_scores.iter().enumerate() {
            let v = &out.attr_vectors.data()[n * 4..n * 4 + 4];
            assert!((s - v.iter().map(|x| x * x).sum::<f64>().sqrt()).abs() < 1e-15);
        }
        let probs = out.malignancy_probs().unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((1..=5).contains(&out.malignancy_class()));
        assert!(model.forward_one(&ramp(9)).is_err());
    }

    #[test]
    fn head_depends_only_on_attribute_vectors() {
        let model = XCapsModel::build(XCapsConfig::toy(), 2).unwrap();
        let out = model.forward_one(&ramp(8)).unwrap();
        assert_eq!(model.head_logits(&out.attr_vectors).unwrap(), out.malignancy_logits);
        let zero = Tensor::zeros(&[2, 4]).unwrap();
        assert_eq!(model.head_logits(&zero).unwrap(), model.head_bias());
    }

    #[test]
    fn contributions_decompose_logits() {
        let mut model = XCapsModel::build(XCapsConfig::toy(), 3).unwrap();
        for (name, t) in model.params_mut() {
            if name == "head.b" {
                t.data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 0.05]);
            }
        }
        let out = model.forward_one(&ramp(8)).unwrap();
        let report = model.contribution_report(&out.attr_vectors).unwrap();
        for k in 0..5 {
            let total = report.data()[k] + report.data()[5 + k] + model.head_bias()[k];
            assert!((total - out.malignancy_logits[k]).abs() < 1e-10);
        }
        let mut v = out.attr_vectors.clone();
        v.data_mut()[..4].fill(0.0);
        let zeroed = model.contribution_report(&v).unwrap();
        assert!(zeroed.data()[..5].iter().all(|&c| c == 0.0));
        v = out.attr_vectors.clone();
        v.data_mut()[4..].iter_mut().for_each(|x| *x *= 2.0);
        let doubled = model.contribution_report(&v).unwrap();
        assert_eq!(doubled.data()[..5], report.data()[..5]);
        for k in 0..5 {
            assert!((doubled.data()[5 + k] - 2.0 * report.data()[5 + k]).abs() < 1e-15);
        }
    }

    #[test]
    fn perturbation_sweep() {
        let model = XCapsModel::build(XCapsConfig::toy(), 4).unwrap();
        let out = model.forward_one(&ramp(8)).unwrap();
        let deltas = default_deltas();
        assert_eq!(deltas.len(), 11);
        assert!((deltas[0] + 0.25).abs() < 1e-15 && deltas[5] == 0.0);
        let images = model.perturb_and_decode(&out.attr_vectors, 1, 3, &deltas).unwrap();
        assert_eq!(images.len(), 11);
        assert_eq!(images[5], out.reconstruction);
        assert!(images.iter().all(|im| im.data().iter().all(|p| (0.0..=1.0).contains(p))));
        assert!(model.perturb_and_decode(&out.attr_vectors, 2, 0, &deltas).is_err());
        assert!(model.perturb_and_decode(&out.attr_vectors, 0, 4, &deltas).is_err());
    }

    #[test]
    fn scale_mapping() {
        let s = attribute_scores_to_scale(&[0.0, 0.5, 0.731]);
        assert_eq!(s[..2], [1.0, 3.0]);
        assert!((s[2] - 3.924).abs() < 1e-12);
    }

    #[test]
    fn mean_mode_head_has_one_output() {
        let cfg = XCapsConfig {
            malignancy_mode: MalignancyMode::Mean,
            ..XCapsConfig::toy()
        };
        let model = XCapsModel::build(cfg, 5).unwrap();
        let out = model.forward_one(&ramp(8)).unwrap();
        assert_eq!(out.malignancy_logits.len(), 1);
        assert!(out.malignancy_probs().is_none() && out.confidence().is_none());
        let expected = to_class(1.0 + 4.0 * ndtensor::sigmoid(out.malignancy_logits[0]));
        assert_eq!(out.malignancy_class(), expected);
    }

    #[test]
    fn head_and_decoder_gradients_match_finite_differences() {
        // With the decoder and head alone the graph is smooth apart from relu.
        let model = XCapsModel::build(XCapsConfig::toy(), 6).unwrap();
        let v = Tensor::new(&[2, 4], vec![0.1, -0.3, 0.2, 0.05, 0.4, 0.0, -0.1, 0.2]).unwrap();
        let inputs: Vec<Tensor> = std::iter::once(v)
            .chain(model.params[HEAD_W..].iter().map(|(_, t)| t.clone()))
            .collect();
        let check = check_gradients(&inputs, DEFAULT_STEP, |tape, vars| {
            let mut params = vec![vars[0]; model.params.len()];
            params[HEAD_W..].copy_from_slice(&vars[1..]);
            let flat = tape.reshape(vars[0], &[1, 8])?;
            let logits = model.head_graph(tape, &params, flat).unwrap();
            let recon = model.decoder_graph(tape, &params, flat).unwrap();
            let a = tape.sum_all(logits)?;
            let sq = tape.mul(recon, recon)?;
            let b = tape.sum_all(sq)?;
            tape.add(a, b)
        })
        .unwrap();
        assert!(check.max_rel_err < 1e-5, "{check:?}");
    }
}
