//! Shared-weight CNN feature extractor, token projection and transformer head.
//!
//! Every view goes through the same conv stack. The resulting `C_f × h × w`
//! map is flattened into `S = h·w` tokens, projected by `E` and offset by the
//! positional encoding `E_pos`. A learnable class token is prepended before
//! the transformer blocks and the classifier reads its final state.
//!
//! The class token carries no positional encoding and views carry no slot
//! embedding, so the logits of a token sequence do not depend on the order of
//! its tokens.

mod checkpoint;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{BoundParams, EncoderParams, ModelConfig, ParamId};

use std::sync::atomic::{AtomicUsize, Ordering};

use params::Layout;

use crate::error::{dim_err, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// CNN output for one view (`f_i`).
#[derive(Debug, Clone, Copy)]
pub struct ViewFeatureMap<'t> {
    pub view: usize,
    pub features: Var<'t>,
}

/// Projected, position-encoded tokens for one view, `[S × d]`.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence<'t> {
    pub view: usize,
    pub tokens: Var<'t>,
}

/// Forward-pass instrumentation.
#[derive(Debug, Default)]
pub struct CallCounters {
    cnn: AtomicUsize,
    transformer: AtomicUsize,
}

impl CallCounters {
    pub fn cnn_calls(&self) -> usize {
        self.cnn.load(Ordering::Relaxed)
    }

    pub fn transformer_calls(&self) -> usize {
        self.transformer.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.cnn.store(0, Ordering::Relaxed);
        self.transformer.store(0, Ordering::Relaxed);
    }
}

/// The multi-view classifier: configuration, its one parameter store, and
/// call counters.
#[derive(Debug)]
pub struct Encoder {
    config: ModelConfig,
    params: EncoderParams,
    layout: Layout,
    counters: CallCounters,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Encoder {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            counters: CallCounters::default(),
        }
    }
}

impl Encoder {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = EncoderParams::init(&config, rng)?;
        Encoder::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        let layout = params.layout(&config)?;
        let s = config.tokens_per_view()?;
        let d = config.dim;
        let pos = params.get("pos")?;
        if pos.shape() != [s, d] {
            return Err(dim_err!("positional encoding {:?} does not match S={s}, d={d}", pos.shape()));
        }
        if params.get("proj")?.shape() != [config.feature_channels(), d] {
            return Err(dim_err!("projection matrix shape does not match the model config"));
        }
        Ok(Encoder {
            config,
            params,
            layout,
            counters: CallCounters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut EncoderParams {
        &mut self.params
    }

    pub fn counters(&self) -> &CallCounters {
        &self.counters
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        self.params.bind(tape, trainable)
    }

    /// Runs the shared conv stack on one `C×H×W` image.
    pub fn extract_features<'t>(
        &self,
        bound: &BoundParams<'t>,
        view: usize,
        image: Var<'t>,
    ) -> Result<ViewFeatureMap<'t>> {
        let c = &self.config;
        let expected = [c.in_channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(dim_err!("view image {:?} does not match configured {:?}", image.shape(), expected));
        }
        self.counters.cnn.fetch_add(1, Ordering::Relaxed);
        let mut x = image;
        for &(w, b) in &self.layout.convs {
            x = x.conv2d(bound.var(w), c.stride)?.add_channel_bias(bound.var(b))?.relu();
        }
        Ok(ViewFeatureMap { view, features: x })
    }

    /// Flattens a feature map into tokens, projects by `E` and adds `E_pos`.
    pub fn tokenize<'t>(&self, bound: &BoundParams<'t>, fmap: &ViewFeatureMap<'t>) -> Result<TokenSequence<'t>> {
        let shape = fmap.features.shape();
        let proj = bound.var(self.layout.proj);
        if shape.len() != 3 || shape[0] != proj.shape()[0] {
            return Err(dim_err!(
                "feature map {:?} does not match projection input {:?}",
                shape,
                proj.shape()
            ));
        }
        let tokens = fmap.features.spatial_tokens()?.matmul(proj)?;
        let tokens = tokens.add(bound.var(self.layout.pos))?;
        Ok(TokenSequence {
            view: fmap.view,
            tokens,
        })
    }

    /// CNN and tokenization for one view image.
    pub fn encode_view<'t>(&self, bound: &BoundParams<'t>, view: usize, image: Var<'t>) -> Result<TokenSequence<'t>> {
        let fmap = self.extract_features(bound, view, image)?;
        self.tokenize(bound, &fmap)
    }

    /// Transformer over `[L × d]` fused tokens; returns class logits `[K]`.
    pub fn transform_predict<'t>(&self, bound: &BoundParams<'t>, fused: Var<'t>) -> Result<Var<'t>> {
        let shape = fused.shape();
        if shape.len() != 2 || shape[1] != self.config.dim {
            return Err(dim_err!("fused tokens {:?} do not have width d={}", shape, self.config.dim));
        }
        self.counters.transformer.fetch_add(1, Ordering::Relaxed);
        let tape = fused.tape();
        let lin = |x: Var<'t>, (w, b): (ParamId, ParamId)| x.linear(bound.var(w), bound.var(b));
        let norm = |x: Var<'t>, (g, b): (ParamId, ParamId)| x.layer_norm(bound.var(g), bound.var(b));

        let mut x = tape.concat_rows(&[bound.var(self.layout.cls), fused])?;
        for block in &self.layout.blocks {
            let h = norm(x, block.ln1)?;
            let q = lin(h, block.wq)?;
            let k = lin(h, block.wk)?;
            let v = lin(h, block.wv)?;
            let attn = tape.attention(q, k, v, self.config.heads)?;
            x = x.add(lin(attn, block.wo)?)?;
            let h = norm(x, block.ln2)?;
            let h = lin(lin(h, block.ff1)?.relu(), block.ff2)?;
            x = x.add(h)?;
        }
        let x = norm(x, self.layout.head_ln)?;
        lin(x, self.layout.head)?.select_row(0)
    }

    /// Convenience: logits for a single image sequence on an inference tape.
    pub fn predict_views(&self, images: &[Tensor]) -> Result<Tensor> {
        let tape = Tape::inference();
        let bound = self.bind(&tape, false);
        let mut seqs = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            seqs.push(self.encode_view(&bound, i, tape.constant(img.clone()))?.tokens);
        }
        let fused = tape.concat_rows(&seqs)?;
        Ok(self.transform_predict(&bound, fused)?.tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad_check_many;
    use rand::Rng as _;

    fn small_config(classes: usize) -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            image_size: 8,
            conv_channels: vec![3, 4],
            kernel: 3,
            stride: 1,
            dim: 8,
            depth: 1,
            heads: 2,
            ff: 12,
            num_classes: classes,
        }
    }

    fn random_image(config: &ModelConfig, rng: &mut Rng) -> Tensor {
        let n = config.in_channels * config.image_size * config.image_size;
        Tensor::new(
            vec![config.in_channels, config.image_size, config.image_size],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_config_has_nine_tokens() {
        let c = ModelConfig::default();
        assert_eq!(c.feature_side().unwrap(), 3);
        assert_eq!(c.tokens_per_view().unwrap(), 9);
    }

    #[test]
    fn features_and_tokens_have_expected_shapes() {
        let mut r = rng::stream(0, "test");
        let enc = Encoder::new(ModelConfig::default(), &mut r).unwrap();
        let tape = Tape::inference();
        let bound = enc.bind(&tape, false);
        let a = enc
            .extract_features(&bound, 0, tape.constant(random_image(enc.config(), &mut r)))
            .unwrap();
        let b = enc
            .extract_features(&bound, 1, tape.constant(random_image(enc.config(), &mut r)))
            .unwrap();
        assert_eq!(a.features.shape(), vec![16, 3, 3]);
        assert_eq!(a.features.shape(), b.features.shape());
        assert_ne!(a.features.tensor(), b.features.tensor());
        let t = enc.tokenize(&bound, &a).unwrap();
        assert_eq!(t.tokens.shape(), vec![9, 32]);
    }

    #[test]
    fn zero_image_gives_zero_features_and_pos_tokens() {
        let mut r = rng::stream(1, "test");
        let enc = Encoder::new(ModelConfig::default(), &mut r).unwrap();
        let tape = Tape::inference();
        let bound = enc.bind(&tape, false);
        let img = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let f = enc.extract_features(&bound, 0, img).unwrap();
        assert!(f.features.value().data().iter().all(|&v| v == 0.0));
        let t = enc.tokenize(&bound, &f).unwrap();
        assert_eq!(&t.tokens.tensor(), enc.params().get("pos").unwrap());
    }

    #[test]
    fn wrong_image_size_is_a_dimension_error() {
        let mut r = rng::stream(2, "test");
        let enc = Encoder::new(ModelConfig::default(), &mut r).unwrap();
        let tape = Tape::inference();
        let bound = enc.bind(&tape, false);
        let err = enc
            .extract_features(&bound, 0, tape.constant(Tensor::zeros(&[3, 15, 16])))
            .unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }

    #[test]
    fn variable_lengths_are_deterministic() {
        let mut r = rng::stream(3, "test");
        let enc = Encoder::new(ModelConfig::default(), &mut r).unwrap();
        let s = 9;
        for views in 1..=3 {
            let tokens = Tensor::new(
                vec![views * s, 32],
                (0..views * s * 32).map(|_| r.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let run = || {
                let tape = Tape::inference();
                let bound = enc.bind(&tape, false);
                enc.transform_predict(&bound, tape.constant(tokens.clone())).unwrap().tensor()
            };
            let a = run();
            assert_eq!(a.shape(), &[8]);
            assert_eq!(a, run());
        }
    }

    #[test]
    fn token_permutation_leaves_logits_unchanged() {
        let mut r = rng::stream(4, "test");
        let enc = Encoder::new(ModelConfig::default(), &mut r).unwrap();
        let len = 18;
        let tokens: Vec<f64> = (0..len * 32).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..len).collect();
        perm.reverse();
        perm.swap(2, 7);
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| tokens[i * 32..(i + 1) * 32].to_vec()).collect();
        let run = |data: Vec<f64>| {
            let tape = Tape::inference();
            let bound = enc.bind(&tape, false);
            let x = tape.constant(Tensor::new(vec![len, 32], data).unwrap());
            enc.transform_predict(&bound, x).unwrap().tensor()
        };
        assert!(run(tokens).max_abs_diff(&run(permuted)) < 1e-9);
    }

    #[test]
    fn mutating_shared_params_changes_every_prediction() {
        let mut r = rng::stream(5, "test");
        let mut enc = Encoder::new(small_config(3), &mut r).unwrap();
        let imgs: Vec<Tensor> = (0..2).map(|_| random_image(enc.config(), &mut r)).collect();
        let before: Vec<Tensor> = [vec![0], vec![1], vec![0, 1]]
            .iter()
            .map(|s| enc.predict_views(&s.iter().map(|&i| imgs[i].clone()).collect::<Vec<_>>()).unwrap())
            .collect();
        enc.params_mut().get_mut("conv0.weight").unwrap().data_mut()[0] += 0.5;
        for (i, s) in [vec![0], vec![1], vec![0, 1]].iter().enumerate() {
            let after = enc.predict_views(&s.iter().map(|&i| imgs[i].clone()).collect::<Vec<_>>()).unwrap();
            assert!(after.max_abs_diff(&before[i]) > 0.0);
        }
    }

    #[test]
    fn tokenize_gradient_matches_finite_differences() {
        let mut r = rng::stream(6, "test");
        let enc = Encoder::new(small_config(2), &mut r).unwrap();
        let fmap = Tensor::new(vec![4, 4, 4], (0..64).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let proj = enc.params().get("proj").unwrap().clone();
        let pos = enc.params().get("pos").unwrap().clone();
        let weights = Tensor::new(vec![16, 8], (0..128).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check_many(
            |tape, v| {
                let toks = v[0].spatial_tokens()?.matmul(v[1])?.add(v[2])?;
                Ok(toks.mul(tape.constant(weights.clone()))?.sum())
            },
            &[fmap, proj, pos],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
