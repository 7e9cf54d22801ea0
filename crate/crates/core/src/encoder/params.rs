use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Architecture hyperparameters of the CNN + transformer classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each stride-`stride` conv layer.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            image_size: 16,
            conv_channels: vec![8, 16],
            kernel: 3,
            stride: 2,
            dim: 32,
            depth: 2,
            heads: 2,
            ff: 64,
            num_classes: 8,
        }
    }
}

impl ModelConfig {
    /// Side length of the CNN output feature map.
    pub fn feature_side(&self) -> Result<usize> {
        let mut side = self.image_size;
        for _ in &self.conv_channels {
            if self.kernel > side {
                return Err(Error::Config(format!(
                    "kernel {} does not fit a {side}×{side} feature map",
                    self.kernel
                )));
            }
            side = (side - self.kernel) / self.stride + 1;
        }
        Ok(side)
    }

    /// Number of tokens per view, `S = h·w`.
    pub fn tokens_per_view(&self) -> Result<usize> {
        Ok(self.feature_side()?.pow(2))
    }

    pub fn feature_channels(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("image_size", self.image_size),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("ff", self.ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("model.conv_channels needs positive sizes".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.dim {} not divisible by model.heads {}",
                self.dim, self.heads
            )));
        }
        self.feature_side().map(|_| ())
    }
}

/// The single named parameter store shared by every view and every subset.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Index of a parameter inside an [`EncoderParams`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Resolved parameter ids for one transformer block.
#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub wq: (ParamId, ParamId),
    pub wk: (ParamId, ParamId),
    pub wv: (ParamId, ParamId),
    pub wo: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
}

/// Resolved ids for the whole model, so forward passes avoid name lookups.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub convs: Vec<(ParamId, ParamId)>,
    pub proj: ParamId,
    pub pos: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<BlockIds>,
    pub head_ln: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
}

impl EncoderParams {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = named.into_iter().unzip();
        EncoderParams { names, tensors }
    }

    /// Freshly initialized parameters: Glorot-uniform weight matrices and
    /// kernels, zero biases, unit layer-norm gains, N(0, 0.02) class token and
    /// positional encoding.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut named = Vec::new();
        let glorot = |shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect()).unwrap()
        };
        let normal = Normal::new(0.0, 0.02).unwrap();
        let gauss = |shape: &[usize], rng: &mut Rng| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
        };

        let k = config.kernel;
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.conv_channels.iter().enumerate() {
            let w = glorot(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, rng);
            named.push((format!("conv{i}.weight"), w));
            named.push((format!("conv{i}.bias"), Tensor::zeros(&[c_out])));
            c_in = c_out;
        }
        let d = config.dim;
        let s = config.tokens_per_view()?;
        named.push(("proj".into(), glorot(&[c_in, d], c_in, d, rng)));
        named.push(("pos".into(), gauss(&[s, d], rng)));
        named.push(("cls".into(), gauss(&[1, d], rng)));

        let linear = |named: &mut Vec<(String, Tensor)>, name: String, i: usize, o: usize, rng: &mut Rng| {
            named.push((format!("{name}.weight"), glorot(&[i, o], i, o, rng)));
            named.push((format!("{name}.bias"), Tensor::zeros(&[o])));
        };
        let norm = |named: &mut Vec<(String, Tensor)>, name: String| {
            named.push((format!("{name}.gain"), Tensor::full(&[d], 1.0)));
            named.push((format!("{name}.bias"), Tensor::zeros(&[d])));
        };
        for b in 0..config.depth {
            norm(&mut named, format!("block{b}.ln1"));
            for proj in ["wq", "wk", "wv", "wo"] {
                linear(&mut named, format!("block{b}.{proj}"), d, d, rng);
            }
            norm(&mut named, format!("block{b}.ln2"));
            linear(&mut named, format!("block{b}.ff1"), d, config.ff, rng);
            linear(&mut named, format!("block{b}.ff2"), config.ff, d, rng);
        }
        norm(&mut named, "head.ln".into());
        linear(&mut named, "head".into(), d, config.num_classes, rng);
        Ok(EncoderParams::from_named(named))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(ParamId)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id.0])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub(crate) fn layout(&self, config: &ModelConfig) -> Result<Layout> {
        let pair = |a: &str, b: &str| -> Result<(ParamId, ParamId)> { Ok((self.id(a)?, self.id(b)?)) };
        let convs = (0..config.conv_channels.len())
            .map(|i| pair(&format!("conv{i}.weight"), &format!("conv{i}.bias")))
            .collect::<Result<_>>()?;
        let lin = |name: String| pair(&format!("{name}.weight"), &format!("{name}.bias"));
        let ln = |name: String| pair(&format!("{name}.gain"), &format!("{name}.bias"));
        let blocks = (0..config.depth)
            .map(|b| {
                Ok(BlockIds {
                    ln1: ln(format!("block{b}.ln1"))?,
                    wq: lin(format!("block{b}.wq"))?,
                    wk: lin(format!("block{b}.wk"))?,
                    wv: lin(format!("block{b}.wv"))?,
                    wo: lin(format!("block{b}.wo"))?,
                    ln2: ln(format!("block{b}.ln2"))?,
                    ff1: lin(format!("block{b}.ff1"))?,
                    ff2: lin(format!("block{b}.ff2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Layout {
            convs,
            proj: self.id("proj")?,
            pos: self.id("pos")?,
            cls: self.id("cls")?,
            blocks,
            head_ln: ln("head.ln".into())?,
            head: lin("head".into())?,
        })
    }

    /// Places every parameter on `tape`: as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Binds caller-made variables, one per parameter in store order, so a
    /// function of the parameters can be differentiated from outside.
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>) -> Result<BoundParams<'t>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!("{} variables for {} parameters", vars.len(), self.tensors.len())));
        }
        for ((v, t), name) in vars.iter().zip(&self.tensors).zip(&self.names) {
            if v.shape() != t.shape() {
                return Err(dim_err!("variable for {name} has shape {:?}, expected {:?}", v.shape(), t.shape()));
            }
        }
        Ok(BoundParams { vars })
    }

    /// Collects per-parameter gradients from a backward pass.
    pub fn gradients(&self, bound: &BoundParams<'_>, grads: &Gradients) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, v)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Plain SGD update `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if t.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
            for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }
}

/// Parameters placed on a particular tape.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}
