//! Teacher, student and T-Net parameter bundles.
//!
//! * teacher: `fusion(concat(backbone_p(prevalent), backbone_q(privileged)))`
//! * T-Net: `decoder(encoder(prevalent))`, regressed onto `backbone_q` output
//! * student: `fusion'(concat(backbone_p'(prevalent), tnet(prevalent)))`
//!
//! The fusion head has one hidden layer; its activation is the embedding used
//! for similarity structure and its linear output gives logits or predictions.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, DiffGraph, NodeId, ParamSet, Tensor2};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!("invalid MLP layer dims {layer_dims:?}")));
        }
        Ok(Self { layer_dims, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }
}

/// An MLP whose weights live in a [`ParamSet`] under `prefix`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub spec: MlpSpec,
}

impl Mlp {
    fn new(prefix: &str, layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        Ok(Self {
            prefix: prefix.to_string(),
            spec: MlpSpec::new(layer_dims, activation)?,
        })
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.prefix)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.prefix)
    }

    fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        for (l, w) in self.spec.layer_dims.windows(2).enumerate() {
            params.insert(self.weight_name(l), rng::glorot_uniform(rng, w[0], w[1]))?;
            params.insert(self.bias_name(l), Tensor2::zeros(1, w[1]))?;
        }
        Ok(())
    }

    /// Output of every layer; hidden layers are activated, the last is linear.
    fn forward(&self, g: &mut DiffGraph, params: &ParamSet, bound: &Bound, x: NodeId) -> Result<Vec<NodeId>> {
        let (b, d) = g.value(x).shape();
        if d != self.spec.input_dim() {
            return Err(Error::Shape {
                op: "mlp input",
                left: (b, d),
                right: (b, self.spec.input_dim()),
            });
        }
        let n_layers = self.spec.layer_dims.len() - 1;
        let mut outs = Vec::with_capacity(n_layers);
        let mut h = x;
        for l in 0..n_layers {
            let w = bound.id(params, &self.weight_name(l))?;
            let bias = bound.id(params, &self.bias_name(l))?;
            let z = g.matmul(h, w)?;
            let bias = g.repeat_rows(bias, b)?;
            let z = g.add(z, bias)?;
            h = if l + 1 < n_layers {
                match self.spec.activation {
                    Activation::Tanh => g.tanh(z)?,
                    Activation::Relu => g.relu(z)?,
                }
            } else {
                z
            };
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Layer widths shared by every model in an experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    #[serde(default = "Architecture::default_hidden")]
    pub hidden: usize,
    /// Output width of each backbone and of the T-Net.
    #[serde(default = "Architecture::default_feature_dim")]
    pub feature_dim: usize,
    /// Embedding width `m` used for similarity matrices.
    #[serde(default = "Architecture::default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "Architecture::default_tnet_code")]
    pub tnet_code: usize,
    #[serde(default = "Architecture::default_activation")]
    pub activation: Activation,
}

impl Architecture {
    fn default_hidden() -> usize {
        32
    }
    fn default_feature_dim() -> usize {
        32
    }
    fn default_embed_dim() -> usize {
        32
    }
    fn default_tnet_code() -> usize {
        16
    }
    fn default_activation() -> Activation {
        Activation::Tanh
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("tnet_code", self.tnet_code),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("architecture.{name} must be > 0")));
            }
        }
        Ok(())
    }

    fn backbone(&self, prefix: &str, input: usize) -> Result<Mlp> {
        Mlp::new(prefix, vec![input, self.hidden, self.feature_dim], self.activation)
    }

    fn fusion(&self, prefix: &str, input: usize, out_dim: usize) -> Result<Mlp> {
        Mlp::new(prefix, vec![input, self.embed_dim, out_dim], self.activation)
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: Self::default_hidden(),
            feature_dim: Self::default_feature_dim(),
            embed_dim: Self::default_embed_dim(),
            tnet_code: Self::default_tnet_code(),
            activation: Self::default_activation(),
        }
    }
}

fn check_input(x: &Tensor2, expected: usize, what: &'static str) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::Shape {
            op: what,
            left: x.shape(),
            right: (x.rows(), expected),
        });
    }
    Ok(())
}

/// Graph nodes produced by a model forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub embeddings: NodeId,
    pub outputs: NodeId,
    /// Privileged-branch features (teacher backbone or T-Net hallucination).
    pub privileged_features: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherModel {
    pub arch: Architecture,
    pub prevalent_backbone: Mlp,
    pub privileged_backbone: Mlp,
    pub fusion_head: Mlp,
    pub params: ParamSet,
}

impl TeacherModel {
    pub fn new(
        arch: &Architecture,
        d_prevalent: usize,
        d_privileged: usize,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let prevalent_backbone = arch.backbone("prevalent", d_prevalent)?;
        let privileged_backbone = arch.backbone("privileged", d_privileged)?;
        let fusion_head = arch.fusion("fusion", 2 * arch.feature_dim, out_dim)?;
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, Stream::TeacherInit);
        for m in [&prevalent_backbone, &privileged_backbone, &fusion_head] {
            m.init(&mut params, &mut rng)?;
        }
        Ok(Self {
            arch: arch.clone(),
            prevalent_backbone,
            privileged_backbone,
            fusion_head,
            params,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fusion_head.spec.output_dim()
    }

    pub fn forward(&self, g: &mut DiffGraph, bound: &Bound, prevalent: NodeId, privileged: NodeId) -> Result<Forward> {
        let hp = *self
            .prevalent_backbone
            .forward(g, &self.params, bound, prevalent)?
            .last()
            .unwrap();
        let hq = *self
            .privileged_backbone
            .forward(g, &self.params, bound, privileged)?
            .last()
            .unwrap();
        let fused = g.concat_cols(hp, hq)?;
        let layers = self.fusion_head.forward(g, &self.params, bound, fused)?;
        Ok(Forward {
            embeddings: layers[0],
            outputs: layers[1],
            privileged_features: Some(hq),
        })
    }

    /// Value-level forward: `(embeddings, outputs, privileged features)`.
    pub fn predict(&self, prevalent: &Tensor2, privileged: &Tensor2) -> Result<(Tensor2, Tensor2, Tensor2)> {
        check_input(
            prevalent,
            self.prevalent_backbone.spec.input_dim(),
            "teacher prevalent input",
        )?;
        check_input(
            privileged,
            self.privileged_backbone.spec.input_dim(),
            "teacher privileged input",
        )?;
        let mut g = DiffGraph::new();
        let bound = self.params.bind(&mut g, false);
        let p = g.constant(prevalent.clone());
        let q = g.constant(privileged.clone());
        let f = self.forward(&mut g, &bound, p, q)?;
        Ok((
            g.value(f.embeddings).clone(),
            g.value(f.outputs).clone(),
            g.value(f.privileged_features.unwrap()).clone(),
        ))
    }
}

/// Teacher forward pass returning `(embeddings, outputs)`.
pub fn forward_teacher(model: &TeacherModel, prevalent: &Tensor2, privileged: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    let (e, o, _) = model.predict(prevalent, privileged)?;
    Ok((e, o))
}

/// Encoder-decoder that hallucinates privileged features from the prevalent input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TNet {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub params: ParamSet,
    pub frozen: bool,
}

impl TNet {
    pub fn new(arch: &Architecture, d_prevalent: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        let encoder = Mlp::new(
            "tnet.encoder",
            vec![d_prevalent, arch.hidden, arch.tnet_code],
            arch.activation,
        )?;
        let decoder = Mlp::new(
            "tnet.decoder",
            vec![arch.tnet_code, arch.hidden, arch.feature_dim],
            arch.activation,
        )?;
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, Stream::TNetInit);
        encoder.init(&mut params, &mut rng)?;
        decoder.init(&mut params, &mut rng)?;
        Ok(Self {
            encoder,
            decoder,
            params,
            frozen: false,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.spec.output_dim()
    }

    pub fn forward(&self, g: &mut DiffGraph, bound: &Bound, prevalent: NodeId) -> Result<NodeId> {
        let code = *self.encoder.forward(g, &self.params, bound, prevalent)?.last().unwrap();
        Ok(*self.decoder.forward(g, &self.params, bound, code)?.last().unwrap())
    }

    /// Binds parameters as trainable unless frozen.
    pub fn bind(&self, g: &mut DiffGraph) -> Bound {
        self.params.bind(g, !self.frozen)
    }
}

pub fn forward_tnet(tnet: &TNet, prevalent: &Tensor2) -> Result<Tensor2> {
    check_input(prevalent, tnet.encoder.spec.input_dim(), "tnet input")?;
    let mut g = DiffGraph::new();
    let bound = tnet.params.bind(&mut g, false);
    let p = g.constant(prevalent.clone());
    let out = tnet.forward(&mut g, &bound, p)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub arch: Architecture,
    pub prevalent_backbone: Mlp,
    pub fusion_head: Mlp,
    pub params: ParamSet,
    /// Frozen hallucinator; `None` for the prevalent-only baseline.
    pub tnet: Option<TNet>,
}

impl StudentModel {
    pub fn new(arch: &Architecture, d_prevalent: usize, out_dim: usize, tnet: Option<TNet>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let tnet = tnet.map(|mut t| {
            t.frozen = true;
            t
        });
        let prevalent_backbone = arch.backbone("prevalent", d_prevalent)?;
        let fused = arch.feature_dim + tnet.as_ref().map_or(0, TNet::output_dim);
        let fusion_head = arch.fusion("fusion", fused, out_dim)?;
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, Stream::StudentInit);
        prevalent_backbone.init(&mut params, &mut rng)?;
        fusion_head.init(&mut params, &mut rng)?;
        Ok(Self {
            arch: arch.clone(),
            prevalent_backbone,
            fusion_head,
            params,
            tnet,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fusion_head.spec.output_dim()
    }

    /// `bound` covers the student's own parameters; the T-Net is bound here as constants.
    pub fn forward(&self, g: &mut DiffGraph, bound: &Bound, prevalent: NodeId) -> Result<Forward> {
        let hp = *self
            .prevalent_backbone
            .forward(g, &self.params, bound, prevalent)?
            .last()
            .unwrap();
        let (fused, hq) = match &self.tnet {
            Some(t) => {
                let tb = t.params.bind(g, false);
                let hq = t.forward(g, &tb, prevalent)?;
                (g.concat_cols(hp, hq)?, Some(hq))
            }
            None => (hp, None),
        };
        let layers = self.fusion_head.forward(g, &self.params, bound, fused)?;
        Ok(Forward {
            embeddings: layers[0],
            outputs: layers[1],
            privileged_features: hq,
        })
    }

    pub fn predict(&self, prevalent: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        check_input(
            prevalent,
            self.prevalent_backbone.spec.input_dim(),
            "student prevalent input",
        )?;
        let mut g = DiffGraph::new();
        let bound = self.params.bind(&mut g, false);
        let p = g.constant(prevalent.clone());
        let f = self.forward(&mut g, &bound, p)?;
        Ok((g.value(f.embeddings).clone(), g.value(f.outputs).clone()))
    }
}

pub fn forward_student(model: &StudentModel, prevalent: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    model.predict(prevalent)
}

/// Serialized model file: dims, layer specs and parameters in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checkpoint {
    Teacher { teacher: TeacherModel, tnet: TNet },
    Student { student: StudentModel },
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string(checkpoint).expect("checkpoint serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}
