//! The full model: text encoder, conditioning augmentation, multi-stage
//! generator, one discriminator per stage and the matching image encoder.

use crate::config::ModelConfig;
use crate::encoder::ConvEncoder;
use crate::error::Result;
use crate::gan::{Discriminator, Generator, StageOutput};
use crate::nn::{Binder, ParamStore};
use crate::rng::{self, Rng64};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::text::{CaOutput, CondAugment, SentenceFeature, TextEncoder, WordFeatures};

const INIT_STREAM: u64 = 0x1A17;
pub const MATCHER_PREFIX: &str = "match";

/// Parameter-name prefixes updated by the generator optimiser.
pub const GENERATOR_PREFIXES: [&str; 4] = ["g", "mem.", "ca.", "text."];

#[derive(Clone, Debug, PartialEq)]
pub struct DmGan {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub ca: CondAugment,
    pub generator: Generator,
    pub discriminators: Vec<Discriminator>,
    pub matcher: ConvEncoder,
}

/// Graph handles of one generation pass.
#[derive(Clone, Debug)]
pub struct Generation {
    pub words: WordFeatures,
    pub sentence: SentenceFeature,
    pub ca: CaOutput,
    /// Lowest resolution first.
    pub stages: Vec<StageOutput>,
}

impl Generation {
    pub fn final_image(&self) -> Var {
        self.stages.last().expect("at least one stage").image
    }
}

impl DmGan {
    pub fn new(config: &ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let word_dim = config.word_dim;
        Ok(Self {
            config: config.clone(),
            text: TextEncoder::new(vocab_size, config.embed_dim, word_dim, config.max_len)?,
            ca: CondAugment::new(word_dim, config.cond_dim),
            generator: Generator::new(config),
            discriminators: (0..config.stages)
                .map(|i| Discriminator::new(i, config.resolution(i), config.d_channels, word_dim))
                .collect(),
            matcher: ConvEncoder::new(MATCHER_PREFIX, config.final_resolution(), config.d_channels, word_dim)?,
        })
    }

    /// Fresh parameters. Each component draws from its own stream, so
    /// components a configuration change does not touch initialise identically.
    pub fn init(&self, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let r = |k: u64| rng::stream(seed, &[INIT_STREAM, k]);
        self.text.init(&mut store, &mut r(0));
        self.ca.init(&mut store, &mut r(1));
        self.generator.init(&mut store, &mut r(2));
        self.matcher.init(&mut store, &mut r(3));
        for (i, d) in self.discriminators.iter().enumerate() {
            d.init(&mut store, &mut r(16 + i as u64));
        }
        store
    }

    pub fn stages(&self) -> usize {
        self.discriminators.len()
    }

    /// Caption to multi-stage images. `eps` feeds conditioning augmentation and
    /// is ignored when `train_mode` is off.
    pub fn generate<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binder<S>,
        tokens: &[usize],
        z: &Tensor<S>,
        eps: &Tensor<S>,
        train_mode: bool,
    ) -> Result<Generation> {
        let (words, sentence) = self.text.encode(g, b, tokens)?;
        let ca = self.ca.forward(g, b, sentence, eps, train_mode)?;
        let z = g.constant(z.clone().reshaped(&[1, self.config.z_dim])?);
        let stages = self.generator.forward(g, b, z, ca.code, words)?;
        Ok(Generation {
            words,
            sentence,
            ca,
            stages,
        })
    }

    /// Global embedding of a final-resolution image, comparable with sentence
    /// features.
    pub fn embed_image<S: Scalar>(&self, g: &mut Graph<S>, b: &mut Binder<S>, image: Var) -> Result<Var> {
        self.matcher.forward(g, b, image)
    }

    /// Generator noise and augmentation noise from `rng`.
    pub fn draw_noise(&self, rng: &mut Rng64) -> (Tensor<f32>, Tensor<f32>) {
        let z = rng::normal_vec(rng, self.config.z_dim);
        let eps = rng::normal_vec(rng, self.config.cond_dim);
        (
            Tensor::new(&[self.config.z_dim], z).expect("z_dim > 0"),
            Tensor::new(&[self.config.cond_dim], eps).expect("cond_dim > 0"),
        )
    }
}
