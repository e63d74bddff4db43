//! Segmentation network: a same-padded conv stack `g`, a single 1x1-conv
//! classifier `h`, and the compensation conv used by the class-drop branch.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::Padding;
use crate::tensor::{LabelMap, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each extractor conv; the last entry is the
    /// feature width `k`.
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub num_classes: usize,
    pub compensation_kernel: usize,
    /// Fixed input gain of the compensation conv. `None` uses
    /// `h * w * num_classes`, which cancels the `1/(h*w)` of the importance
    /// scores and the `1/|C|` of the aggregation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensation_gain: Option<f32>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        ModelConfig {
            widths: vec![16, 32, 32],
            kernel_size: 3,
            num_classes,
            compensation_kernel: 1,
            compensation_gain: None,
            seed: 0,
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated config has widths")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "extractor widths must be >= 1, got {:?}",
                self.widths
            )));
        }
        if self.kernel_size % 2 == 0 || self.compensation_kernel % 2 == 0 {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if let Some(g) = self.compensation_gain {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config(format!(
                    "compensation_gain must be positive, got {g}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let c: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn kaiming(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> Self {
        let fan_in = (k * k * cin) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let data = (0..k * k * cin * cout)
            .map(|_| normal.sample(rng))
            .collect();
        ConvLayer {
            kernel: Tensor::from_parts(vec![k, k, cin, cout], data),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// Centre tap is the identity over channels.
    fn identity(k: usize, channels: usize) -> Self {
        let mut kernel = Tensor::zeros(&[k, k, channels, channels]);
        for c in 0..channels {
            let off = kernel.offset(&[k / 2, k / 2, c, c]);
            kernel.data_mut()[off] = 1.0;
        }
        ConvLayer {
            kernel,
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn cout(&self) -> usize {
        self.bias.len()
    }
}

/// Graph handles of a model's parameters within one [`Graph`].
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub extractor: Vec<(NodeId, NodeId)>,
    pub classifier: (NodeId, NodeId),
    pub compensation: (NodeId, NodeId),
}

impl ModelNodes {
    /// Parameter nodes in [`Model::params`] order.
    pub fn all(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.extractor.iter().flat_map(|&(k, b)| [k, b]).collect();
        ids.extend([
            self.classifier.0,
            self.classifier.1,
            self.compensation.0,
            self.compensation.1,
        ]);
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: Vec<ConvLayer>,
    /// `[1, 1, k, |C|]` kernel and `[|C|]` bias.
    pub classifier: ConvLayer,
    pub compensation: ConvLayer,
}

/// Kaiming-normal extractor and classifier weights, zero biases, identity
/// compensation conv. Deterministic in `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = Vec::with_capacity(config.widths.len());
    let mut cin = 3;
    for &w in &config.widths {
        extractor.push(ConvLayer::kaiming(&mut rng, config.kernel_size, cin, w));
        cin = w;
    }
    let k = config.feature_channels();
    let classifier = ConvLayer::kaiming(&mut rng, 1, k, config.num_classes);
    let compensation = ConvLayer::identity(config.compensation_kernel, k);
    let mut config = config.clone();
    config.seed = seed;
    Ok(Model {
        config,
        extractor,
        classifier,
        compensation,
    })
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Model> {
        init_model(config, config.seed)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels()
    }

    /// Classifier weight `W[c, k]`.
    pub fn classifier_weight(&self, class: usize, channel: usize) -> f32 {
        self.classifier.kernel.get(&[0, 0, channel, class])
    }

    /// Fixed order: extractor (kernel, bias) pairs, classifier, compensation.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self
            .extractor
            .iter()
            .flat_map(|l| [&l.kernel, &l.bias])
            .collect();
        out.extend([
            &self.classifier.kernel,
            &self.classifier.bias,
            &self.compensation.kernel,
            &self.compensation.bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .extractor
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect();
        out.extend([
            &mut self.classifier.kernel,
            &mut self.classifier.bias,
            &mut self.compensation.kernel,
            &mut self.compensation.bias,
        ]);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.extractor.len())
            .flat_map(|i| {
                [
                    format!("extractor.{i}.kernel"),
                    format!("extractor.{i}.bias"),
                ]
            })
            .collect();
        names.extend(
            [
                "classifier.kernel",
                "classifier.bias",
                "compensation.kernel",
                "compensation.bias",
            ]
            .map(String::from),
        );
        names
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> ModelNodes {
        self.bind_with(g, true)
    }

    /// Records parameters as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> ModelNodes {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, track: bool) -> ModelNodes {
        let mut leaf = |t: &Tensor| {
            if track {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        };
        let extractor = self
            .extractor
            .iter()
            .map(|l| (leaf(&l.kernel), leaf(&l.bias)))
            .collect();
        let classifier = (leaf(&self.classifier.kernel), leaf(&self.classifier.bias));
        let compensation = (
            leaf(&self.compensation.kernel),
            leaf(&self.compensation.bias),
        );
        ModelNodes {
            extractor,
            classifier,
            compensation,
        }
    }

    /// `A = g(x)`: conv + ReLU for every extractor layer.
    pub fn features_node(&self, g: &mut Graph, nodes: &ModelNodes, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for &(k, b) in &nodes.extractor {
            h = g.conv2d(h, k, b, Padding::Same)?;
            h = g.relu(h)?;
        }
        Ok(h)
    }

    /// `y = h(A)`: the 1x1 classifier, producing logits.
    pub fn classify_node(&self, g: &mut Graph, nodes: &ModelNodes, a: NodeId) -> Result<NodeId> {
        let (k, b) = nodes.classifier;
        g.conv2d(a, k, b, Padding::Same)
    }

    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x)?;
        let mut g = Graph::new();
        let nodes = self.bind_frozen(&mut g);
        let xi = g.input(x.clone());
        let a = self.features_node(&mut g, &nodes, xi)?;
        Ok(g.value(a).clone())
    }

    pub fn classify(&self, a: &Tensor) -> Result<Tensor> {
        if a.channels() != self.feature_channels() {
            return Err(Error::shape(
                "classify",
                format!(
                    "features have {} channels, classifier expects {}",
                    a.channels(),
                    self.feature_channels()
                ),
            ));
        }
        let mut g = Graph::new();
        let nodes = self.bind_frozen(&mut g);
        let ai = g.input(a.clone());
        let y = self.classify_node(&mut g, &nodes, ai)?;
        Ok(g.value(y).clone())
    }

    /// Returns `(A, logits)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_image(x)?;
        let mut g = Graph::new();
        let nodes = self.bind_frozen(&mut g);
        let xi = g.input(x.clone());
        let a = self.features_node(&mut g, &nodes, xi)?;
        let y = self.classify_node(&mut g, &nodes, a)?;
        Ok((g.value(a).clone(), g.value(y).clone()))
    }

    /// Per-pixel argmax of the logits of one `[h,w,3]` image.
    pub fn predict(&self, x: &Tensor) -> Result<LabelMap> {
        let (_, logits) = self.forward(x)?;
        let [h, w, c] = *logits.shape() else {
            return Err(Error::shape("predict", "expected a single [h,w,3] image"));
        };
        let labels = logits
            .data()
            .chunks_exact(c)
            .map(|px| argmax(px) as u8)
            .collect();
        LabelMap::new(h, w, labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let params = self.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Model> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(origin, "missing checkpoint magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "not a DCM1 checkpoint"));
        }
        let version = read_u32(&mut r, origin)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("checkpoint format version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let text_len = read_u32(&mut r, origin)? as usize;
        if r.len() < text_len {
            return Err(Error::format(origin, "truncated config block"));
        }
        let (text, rest) = r.split_at(text_len);
        r = rest;
        let text = std::str::from_utf8(text)
            .map_err(|_| Error::format(origin, "config block is not UTF-8"))?;
        let config = ModelConfig::from_text(text)?;
        let count = read_u32(&mut r, origin)? as usize;

        let mut model = init_model(&config, config.seed)?;
        let expected = model.params().len();
        if count != expected {
            return Err(Error::format(
                origin,
                format!("{count} tensors, config implies {expected}"),
            ));
        }
        let names = model.param_names();
        for (slot, name) in model.params_mut().into_iter().zip(names) {
            let t = Tensor::read_from(&mut r, origin)?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    origin,
                    format!(
                        "{name} has shape {:?}, config implies {:?}",
                        t.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = t;
        }
        if !r.is_empty() {
            return Err(Error::format(origin, "trailing bytes after parameters"));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &model.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_bytes(&bytes, path)
}

/// Loads a checkpoint and rejects it unless it was built for `num_classes`.
pub fn load_checkpoint_for(path: &Path, num_classes: usize) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.num_classes() != num_classes {
        return Err(Error::CheckpointMismatch(format!(
            "{} has {} classes, expected {}",
            path.display(),
            model.num_classes(),
            num_classes
        )));
    }
    Ok(model)
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_image(x: &Tensor) -> Result<()> {
    match x.shape() {
        [_, _, 3] | [_, _, _, 3] => Ok(()),
        s => Err(Error::shape(
            "extract_features",
            format!("expected [h,w,3] image, got {s:?}"),
        )),
    }
}

fn read_u32(r: &mut &[u8], origin: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(origin, "truncated checkpoint header"))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 6],
            ..ModelConfig::new(3)
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_model(&config(), 5).unwrap();
        let b = init_model(&config(), 5).unwrap();
        let c = init_model(&config(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for l in a.extractor.iter().chain([&a.classifier]) {
            assert!(l.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn kaiming_std_matches_fan_in() {
        let cfg = ModelConfig {
            widths: vec![16, 32],
            ..ModelConfig::new(4)
        };
        let m = init_model(&cfg, 11).unwrap();
        // second layer: fan-in 3*3*16 = 144, 4608 weights
        let w = m.extractor[1].kernel.data();
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let want = (2.0f64 / 144.0).sqrt();
        assert!(n >= 1000.0);
        assert!((std - want).abs() <= 0.2 * want, "std {std} vs {want}");
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let m = init_model(&config(), 1).unwrap();
        let a = m.extract_features(&Tensor::zeros(&[5, 7, 3])).unwrap();
        assert_eq!(a.shape(), [5, 7, 6]);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_closed_forms_and_matmul_oracle() {
        let mut m = init_model(&config(), 2).unwrap();
        m.classifier.bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let y = m.classify(&Tensor::zeros(&[2, 2, 6])).unwrap();
        for px in y.data().chunks(3) {
            assert_eq!(px, [0.1, -0.2, 0.3]);
        }

        let a = random(&[3, 4, 6], 3);
        let y = m.classify(&a).unwrap();
        for (i, px) in a.data().chunks(6).enumerate() {
            for c in 0..3 {
                let want: f64 = m.classifier.bias.data()[c] as f64
                    + (0..6)
                        .map(|k| m.classifier_weight(c, k) as f64 * px[k] as f64)
                        .sum::<f64>();
                assert!((y.data()[i * 3 + c] as f64 - want).abs() <= 1e-5);
            }
        }

        // one-hot feature channel copied through an identity row
        let mut w = Tensor::zeros(&[1, 1, 6, 3]);
        let off = w.offset(&[0, 0, 2, 1]);
        w.data_mut()[off] = 1.0;
        m.classifier = ConvLayer {
            kernel: w,
            bias: Tensor::zeros(&[3]),
        };
        let mut a = Tensor::zeros(&[1, 2, 6]);
        a.data_mut()[2] = 0.7;
        a.data_mut()[8] = -1.5;
        let y = m.classify(&a).unwrap();
        assert_eq!(y.get(&[0, 0, 1]), 0.7);
        assert_eq!(y.get(&[0, 1, 1]), -1.5);

        assert!(m.classify(&Tensor::zeros(&[2, 2, 5])).is_err());
    }

    #[test]
    fn classify_is_affine_in_features() {
        let m = init_model(&config(), 4).unwrap();
        let a1 = random(&[3, 3, 6], 5);
        let a2 = random(&[3, 3, 6], 6);
        let sum = Tensor::new(
            vec![3, 3, 6],
            a1.data()
                .iter()
                .zip(a2.data())
                .map(|(x, y)| x + y)
                .collect(),
        )
        .unwrap();
        let y0 = m.classify(&Tensor::zeros(&[3, 3, 6])).unwrap();
        let (y1, y2, y12) = (
            m.classify(&a1).unwrap(),
            m.classify(&a2).unwrap(),
            m.classify(&sum).unwrap(),
        );
        for i in 0..y0.len() {
            let lhs = y12.data()[i] - y0.data()[i];
            let rhs = (y1.data()[i] - y0.data()[i]) + (y2.data()[i] - y0.data()[i]);
            assert!((lhs - rhs).abs() <= 1e-5);
        }
    }

    #[test]
    fn forward_preserves_resolution() {
        let m = init_model(&config(), 7).unwrap();
        let (a, y) = m.forward(&random(&[9, 5, 3], 8)).unwrap();
        assert_eq!(a.shape(), [9, 5, 6]);
        assert_eq!(y.shape(), [9, 5, 3]);
        assert!(m.forward(&Tensor::zeros(&[4, 4, 2])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dcm");
        let m = init_model(&config(), 9).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back, m);

        assert!(matches!(
            load_checkpoint_for(&path, 5),
            Err(Error::CheckpointMismatch(_))
        ));
        assert!(load_checkpoint_for(&path, 3).is_ok());

        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(
            Model::from_bytes(cut, &path),
            Err(Error::Format { .. })
        ));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            Model::from_bytes(&wrong_version, &path),
            Err(Error::Format { .. })
        ));
    }
}
