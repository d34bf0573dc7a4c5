//! Desk-scale end-to-end model: a small strided-conv video encoder, a word
//! embedding table, query fusion and decoding, the mask heads, refinement,
//! training and inference.

mod checkpoint;
mod eval;
mod model;
mod noise;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use eval::{evaluate_records, predict_records};
pub use model::{
    decode, encode_pyramid, encode_video, forward_train, fuse_pyramid, fuse_queries, head_params, infer,
    positional_encoding, refiner_params, word_features, Features, ForwardOutput, Inference, QuerySet,
};
pub use noise::{inject_noise, inject_noise_learnable, noise_weight, NOISE_SCHEDULE};
pub use train::{smooth, train, LogRow, TrainConfig, TrainOutcome, LOG_HEADER};

use serde::{Deserialize, Serialize};

use crate::corpus::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::heads::{dynamic_layout, num_dynamic_params, HeadKind};
use crate::matching::LossWeights;
use crate::params::ParamStore;
use crate::refine::RefineKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub channels: usize,
    /// Pixel-level upsampling rate; heads emit `d²` channels.
    pub d: usize,
    pub head_kind: HeadKind,
    pub refine_kind: RefineKind,
    pub noise_timestep: Option<u32>,
    /// Replaces the fixed schedule weight with a learnable scalar that
    /// starts at the smallest scheduled weight.
    pub learnable_noise: bool,
    pub seed: u64,
    pub dynamic_hidden: Vec<usize>,
    pub coord_channels: bool,
    pub refine_mid: usize,
    pub refine_c4: usize,
    pub loss_weights: LossWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 4,
            decoder_layers: 4,
            num_queries: 5,
            channels: 16,
            d: 4,
            head_kind: HeadKind::Hcd,
            refine_kind: RefineKind::Tcmr,
            noise_timestep: None,
            learnable_noise: false,
            seed: 7,
            dynamic_hidden: vec![8, 8],
            coord_channels: true,
            refine_mid: 16,
            refine_c4: 8,
            loss_weights: LossWeights::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1".into());
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return bad(format!("channels must be a positive multiple of 4, got {}", self.channels));
        }
        if ![1, 2, 4, 8].contains(&self.d) {
            return bad(format!("upsampling rate {} must divide 8", self.d));
        }
        if self.dynamic_hidden.contains(&0) || self.refine_mid == 0 || self.refine_c4 == 0 {
            return bad("layer widths must be positive".into());
        }
        if let Some(t) = self.noise_timestep {
            noise_weight(t)?;
            if self.learnable_noise {
                return bad("a fixed noise timestep and a learnable noise weight are exclusive".into());
            }
        }
        self.loss_weights.validate()
    }

    pub fn has_noise(&self) -> bool {
        self.noise_timestep.is_some() || self.learnable_noise
    }

    pub fn dynamic_layout(&self) -> Vec<usize> {
        dynamic_layout(self.d, &self.dynamic_hidden, self.coord_channels)
    }
}

/// Every learnable tensor of `config`, seeded from `config.seed`.
pub fn init_params(config: &PipelineConfig) -> Result<ParamStore> {
    config.validate()?;
    let c = config.channels;
    let mut p = ParamStore::new(config.seed);
    fn conv(p: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize) {
        p.init_uniform(name, &[k, k, cin, cout], k * k * cin);
        p.init_constant(&format!("{name}_bias"), &[cout], 0.0);
    }
    fn norm(p: &mut ParamStore, name: &str, c: usize) {
        p.init_constant(&format!("{name}.gain"), &[c], 1.0);
        p.init_constant(&format!("{name}.bias"), &[c], 0.0);
    }
    // encoder convolutions feed a layer norm, which makes a bias redundant
    fn conv_norm(p: &mut ParamStore, name: &str, cin: usize, cout: usize) {
        p.init_uniform(name, &[3, 3, cin, cout], 9 * cin);
        norm(p, &format!("{name}_norm"), cout);
    }

    conv_norm(&mut p, "enc.stem", 3, c);
    conv_norm(&mut p, "enc.down8", c, c);
    for i in 0..config.encoder_layers {
        conv_norm(&mut p, &format!("enc.block{i}.conv"), c, c);
        p.init_uniform(&format!("enc.block{i}.temporal"), &[3, c, c], 3 * c);
    }
    norm(&mut p, "enc.f8_norm", c);
    conv_norm(&mut p, "enc.down16", c, c);
    conv_norm(&mut p, "enc.down32", c, c);

    p.init_uniform("text.embed", &[VOCAB_SIZE, c], 1);
    // zero queries start as pure text summaries; matching breaks the tie
    p.init_constant("query.embed", &[config.num_queries, c], 0.0);
    for name in ["fuse.wq", "fuse.wk", "fuse.wv"] {
        p.init_uniform(name, &[c, c], c);
    }
    for l in 0..config.decoder_layers {
        for w in ["wq", "wk", "wv"] {
            p.init_uniform(&format!("dec.{l}.{w}"), &[c, c], c);
        }
        p.init_uniform(&format!("dec.{l}.ffn1"), &[c, 2 * c], c);
        p.init_constant(&format!("dec.{l}.ffn1_bias"), &[2 * c], 0.0);
        p.init_uniform(&format!("dec.{l}.ffn2"), &[2 * c, c], 2 * c);
        p.init_constant(&format!("dec.{l}.ffn2_bias"), &[c], 0.0);
        norm(&mut p, &format!("dec.{l}.norm1"), c);
        norm(&mut p, &format!("dec.{l}.norm2"), c);
    }
    p.init_uniform("dec.box", &[c, 4], c);
    p.init_constant("dec.box_bias", &[4], 0.0);
    p.init_uniform("dec.presence", &[c, 1], c);
    p.init_constant("dec.presence_bias", &[1], 0.0);

    let d2 = config.d * config.d;
    if config.head_kind.uses_dot() {
        p.init_uniform("head.w_d", &[c, d2], c);
    }
    if config.head_kind.uses_dynamic() {
        p.init_uniform("head.w_c", &[c, d2], c);
        let n_k = num_dynamic_params(&config.dynamic_layout());
        p.init_uniform("head.w_q", &[c, n_k], c);
    }

    if config.refine_kind != RefineKind::None {
        let (mid, c4) = (config.refine_mid, config.refine_c4);
        conv(&mut p, "refine.conv8", 3, d2 + c, mid);
        conv(&mut p, "refine.conv4", 3, mid + c4, 1);
        conv(&mut p, "refine.f4_stem", 3, 3, c4);
        if config.refine_kind == RefineKind::Tcmr {
            p.init_uniform("refine.f4_temporal", &[3, c4, c4], 3 * c4);
        }
    }

    if config.learnable_noise {
        p.init_constant("noise.weight", &[], NOISE_SCHEDULE[0].1);
    }
    Ok(p)
}

/// Checks that `params` holds exactly the tensors `config` needs, with the
/// right shapes.
pub fn check_compatible(config: &PipelineConfig, params: &ParamStore) -> Result<()> {
    let expected = init_params(config)?;
    for (name, t) in expected.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::Incompatible(format!("missing parameter `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(Error::Incompatible(format!(
                "parameter `{name}` has shape {:?}, config needs {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
        return Err(Error::Incompatible(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}
