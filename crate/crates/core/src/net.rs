//! The audio and tag autoencoders, their projection heads and the supervised
//! baseline head.
//!
//! Every network is always built, in a fixed order, so that a given seed
//! yields the same initial weights whichever objective is later trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoalaError, Result};
use crate::objectives::Mode;
use crate::tensor::{Graph, LayerSpec, ParamGroup, ParamStore, Scalar, Sequential, Var};

/// Patch height (frames) and width (mel bands).
pub const PATCH: usize = 96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Tag vocabulary size.
    pub classes: usize,
    /// Filters in every audio conv block.
    pub channels: usize,
    pub conv_blocks: usize,
    /// Tag encoder widths; the last one is the tag latent size.
    pub tag_layers: Vec<usize>,
    pub cnn_hidden: usize,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            classes: 1000,
            channels: 128,
            conv_blocks: 5,
            tag_layers: vec![512, 512, 1152],
            cnn_hidden: 512,
            dropout: 0.25,
        }
    }
}

impl NetConfig {
    /// Spatial side of the audio latent.
    pub fn latent_side(&self) -> usize {
        PATCH >> self.conv_blocks
    }

    /// Flattened audio latent size.
    pub fn embedding_dim(&self) -> usize {
        self.channels * self.latent_side() * self.latent_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.channels == 0 || self.cnn_hidden == 0 {
            return Err(CoalaError::Invalid("network sizes must be positive".into()));
        }
        if self.conv_blocks == 0 || PATCH % (1 << self.conv_blocks) != 0 {
            return Err(CoalaError::Invalid(format!(
                "{} stride-2 blocks do not divide a {PATCH}-wide patch",
                self.conv_blocks
            )));
        }
        if self.tag_layers.last() != Some(&self.embedding_dim()) {
            return Err(CoalaError::Invalid(format!(
                "tag latent size {:?} must equal the audio embedding size {}",
                self.tag_layers.last(),
                self.embedding_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoalaError::Invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

fn conv(cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_channels: cin,
        out_channels: cout,
        kernel: (4, 4),
        stride: (2, 2),
        padding: (1, 1),
    }
}

fn deconv(cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::ConvTranspose {
        in_channels: cin,
        out_channels: cout,
        kernel: (4, 4),
        stride: (2, 2),
        padding: (1, 1),
    }
}

fn linear(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Linear {
        in_features: i,
        out_features: o,
    }
}

/// `[layer, BN, ReLU, dropout]`
fn block(layer: LayerSpec, features: usize, dropout: f64) -> Vec<LayerSpec> {
    vec![
        layer,
        LayerSpec::BatchNorm { features },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
    ]
}

pub fn audio_encoder_specs(c: &NetConfig) -> Vec<LayerSpec> {
    (0..c.conv_blocks)
        .flat_map(|i| {
            let cin = if i == 0 { 1 } else { c.channels };
            block(conv(cin, c.channels), c.channels, c.dropout)
        })
        .collect()
}

pub fn audio_decoder_specs(c: &NetConfig) -> Vec<LayerSpec> {
    let mut specs: Vec<LayerSpec> = (0..c.conv_blocks - 1)
        .flat_map(|_| block(deconv(c.channels, c.channels), c.channels, c.dropout))
        .collect();
    specs.push(deconv(c.channels, 1));
    specs.push(LayerSpec::Sigmoid);
    specs
}

pub fn tag_encoder_specs(c: &NetConfig) -> Vec<LayerSpec> {
    let mut prev = c.classes;
    let mut specs = Vec::new();
    for &w in &c.tag_layers {
        specs.extend(block(linear(prev, w), w, c.dropout));
        prev = w;
    }
    specs
}

pub fn tag_decoder_specs(c: &NetConfig) -> Vec<LayerSpec> {
    let widths: Vec<usize> = c.tag_layers.iter().rev().copied().collect();
    let mut specs = Vec::new();
    for pair in widths.windows(2) {
        specs.extend(block(linear(pair[0], pair[1]), pair[1], c.dropout));
    }
    specs.push(linear(widths[widths.len() - 1], c.classes));
    specs.push(LayerSpec::Sigmoid);
    specs
}

pub fn projection_specs(c: &NetConfig) -> Vec<LayerSpec> {
    let d = c.embedding_dim();
    vec![linear(d, d), LayerSpec::Relu]
}

pub fn cnn_head_specs(c: &NetConfig) -> Vec<LayerSpec> {
    vec![
        linear(c.embedding_dim(), c.cnn_hidden),
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: c.dropout },
        linear(c.cnn_hidden, c.classes),
        LayerSpec::Sigmoid,
    ]
}

/// Parameter groups the optimizer updates in each mode.
pub fn trainable_groups(mode: Mode) -> &'static [ParamGroup] {
    match mode {
        Mode::AeC => &[
            ParamGroup::AudioEncoder,
            ParamGroup::AudioDecoder,
            ParamGroup::TagEncoder,
            ParamGroup::TagDecoder,
            ParamGroup::AudioProjection,
            ParamGroup::TagProjection,
        ],
        Mode::EC => &[
            ParamGroup::AudioEncoder,
            ParamGroup::AudioProjection,
            ParamGroup::TagEncoder,
            ParamGroup::TagProjection,
        ],
        Mode::Cnn => &[ParamGroup::AudioEncoder, ParamGroup::CnnHead],
    }
}

/// All networks and their parameters.
#[derive(Clone, Debug)]
pub struct Coala<T: Scalar = f32> {
    pub config: NetConfig,
    pub store: ParamStore<T>,
    audio_encoder: Sequential,
    audio_decoder: Sequential,
    tag_encoder: Sequential,
    tag_decoder: Sequential,
    audio_projection: Sequential,
    tag_projection: Sequential,
    cnn_head: Sequential,
}

impl<T: Scalar> Coala<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut build = |prefix: &str, group, specs| {
            Sequential::build(prefix, group, specs, &mut store, &mut rng)
        };
        let audio_encoder = build("audio_encoder", ParamGroup::AudioEncoder, audio_encoder_specs(&config))?;
        let audio_decoder = build("audio_decoder", ParamGroup::AudioDecoder, audio_decoder_specs(&config))?;
        let tag_encoder = build("tag_encoder", ParamGroup::TagEncoder, tag_encoder_specs(&config))?;
        let tag_decoder = build("tag_decoder", ParamGroup::TagDecoder, tag_decoder_specs(&config))?;
        let audio_projection =
            build("audio_projection", ParamGroup::AudioProjection, projection_specs(&config))?;
        let tag_projection = build("tag_projection", ParamGroup::TagProjection, projection_specs(&config))?;
        let cnn_head = build("cnn_head", ParamGroup::CnnHead, cnn_head_specs(&config))?;
        Ok(Coala {
            config,
            store,
            audio_encoder,
            audio_decoder,
            tag_encoder,
            tag_decoder,
            audio_projection,
            tag_projection,
            cnn_head,
        })
    }

    fn expect(&self, g: &Graph<T>, x: Var, shape: &[Option<usize>], op: &'static str) -> Result<()> {
        let s = g.value(x).shape();
        let ok = s.len() == shape.len() && s.iter().zip(shape).all(|(a, b)| b.is_none_or(|b| *a == b));
        if !ok {
            let want: Vec<usize> = shape.iter().map(|d| d.unwrap_or(0)).collect();
            return Err(CoalaError::shape(op, s, &want));
        }
        Ok(())
    }

    /// `[B, 1, 96, 96]` patches to the `[B, K, 3, 3]` audio latent.
    pub fn encode_audio(&mut self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        self.expect(g, patches, &[None, Some(1), Some(PATCH), Some(PATCH)], "encode_audio")?;
        self.audio_encoder.forward(g, &mut self.store, patches)
    }

    pub fn decode_audio(&mut self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        let side = self.config.latent_side();
        self.expect(
            g,
            latent,
            &[None, Some(self.config.channels), Some(side), Some(side)],
            "decode_audio",
        )?;
        self.audio_decoder.forward(g, &mut self.store, latent)
    }

    /// `[B, C]` multi-hot vectors to the `[B, M]` tag latent.
    pub fn encode_tags(&mut self, g: &mut Graph<T>, tags: Var) -> Result<Var> {
        self.expect(g, tags, &[None, Some(self.config.classes)], "encode_tags")?;
        self.tag_encoder.forward(g, &mut self.store, tags)
    }

    pub fn decode_tags(&mut self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        self.expect(g, latent, &[None, Some(self.config.embedding_dim())], "decode_tags")?;
        self.tag_decoder.forward(g, &mut self.store, latent)
    }

    /// Flattens the audio latent channel-major (`c, t, f`) to `[B, K*T'*F']`.
    pub fn flatten(&self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        let b = g.value(latent).shape()[0];
        g.reshape(latent, &[b, self.config.embedding_dim()])
    }

    pub fn project_audio(&mut self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        let flat = self.flatten(g, latent)?;
        self.audio_projection.forward(g, &mut self.store, flat)
    }

    pub fn project_tags(&mut self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        self.expect(g, latent, &[None, Some(self.config.embedding_dim())], "project_tags")?;
        self.tag_projection.forward(g, &mut self.store, latent)
    }

    /// Baseline tag predictions from the audio latent.
    pub fn cnn_predict(&mut self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        let flat = self.flatten(g, latent)?;
        self.cnn_head.forward(g, &mut self.store, flat)
    }

    pub fn count(&self, groups: &[ParamGroup]) -> usize {
        self.store.count_weights(groups)
    }

    /// Names and shapes of every stored tensor, in order.
    pub fn topology(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }
}
