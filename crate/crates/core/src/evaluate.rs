//! Sampling, metric evaluation and memory inspection of a trained model.

use serde::Serialize;

use crate::data::{self, ShapesSample};
use crate::error::{Error, Result};
use crate::memory::{top_k_words, RankingsJson, WordRankings};
use crate::metrics::{self, FeatureExtractor, MetricReport, RetrievalConfig};
use crate::model::DmGan;
use crate::nn::{Binder, ParamStore};
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::text::Vocabulary;

const EVAL_STREAM: u64 = 0xE7A1;
/// Mixed into the data seed so test captions never coincide with training ones.
const TEST_SPLIT: u64 = 0x7E57_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub n: usize,
    /// Seed of the dataset the model was trained on; test samples use a
    /// disjoint stream derived from it.
    pub data_seed: u64,
    /// Seeds generator noise and mismatch sampling.
    pub seed: u64,
    pub is_splits: usize,
    pub retrieval: RetrievalConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n: 2000,
            data_seed: 1,
            seed: 0,
            is_splits: 10,
            retrieval: RetrievalConfig::default(),
        }
    }
}

pub fn test_set(data_seed: u64, n: usize, res: usize) -> Result<Vec<ShapesSample>> {
    data::gen_dataset(data_seed ^ TEST_SPLIT, n, res)
}

/// Eval-mode generations for a list of captions.
#[derive(Clone, Debug)]
pub struct Generated {
    /// Final-stage images.
    pub images: Vec<Tensor<f32>>,
    /// `M×N_w` matcher embeddings of the images.
    pub image_embs: Tensor<f64>,
    /// `M×N_w` sentence features of the captions.
    pub caption_embs: Tensor<f64>,
}

/// Generates one image per caption; caption `i` uses noise stream `(seed, i)`.
pub fn generate_all(model: &DmGan, store: &ParamStore<f32>, captions: &[Vec<usize>], seed: u64) -> Result<Generated> {
    let one = |(i, tokens): (usize, &Vec<usize>)| -> Result<(Tensor<f32>, Vec<f64>, Vec<f64>)> {
        let (z, eps) = model.draw_noise(&mut rng::stream(seed, &[EVAL_STREAM, i as u64]));
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(store).freeze("");
        let gen = model.generate(&mut g, &mut b, tokens, &z, &eps, false)?;
        let img = gen.final_image();
        let emb = model.embed_image(&mut g, &mut b, img)?;
        let to64 = |t: &Tensor<f32>| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
        Ok((g.value(img).clone(), to64(g.value(emb)), to64(g.value(gen.sentence.0))))
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Result<_>> = {
        use rayon::prelude::*;
        captions.par_iter().enumerate().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Result<_>> = captions.iter().enumerate().map(one).collect();
    let m = captions.len();
    let d = model.config.word_dim;
    let (mut images, mut ie, mut ce) = (Vec::with_capacity(m), Vec::with_capacity(m * d), Vec::with_capacity(m * d));
    for r in rows {
        let (img, a, b) = r?;
        images.push(img);
        ie.extend(a);
        ce.extend(b);
    }
    Ok(Generated {
        images,
        image_embs: Tensor::new(&[m, d], ie)?,
        caption_embs: Tensor::new(&[m, d], ce)?,
    })
}

/// Metric report plus the generated images it was computed from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub generated: Generated,
}

/// FID between the extractor features of two image sets.
pub fn image_fid(extractor: &dyn FeatureExtractor, a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f64> {
    let fa = metrics::gaussian_stats(&extractor.extract(a)?.features)?;
    let fb = metrics::gaussian_stats(&extractor.extract(b)?.features)?;
    metrics::fid(&fa, &fb)
}

pub fn evaluate(
    model: &DmGan,
    store: &ParamStore<f32>,
    extractor: &dyn FeatureExtractor,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let res = model.config.final_resolution();
    let test = test_set(opts.data_seed, opts.n, res)?;
    let captions: Vec<Vec<usize>> = test.iter().map(|s| s.tokens.clone()).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.class_id()).collect();
    let real: Vec<Tensor<f32>> = test.into_iter().map(|s| s.image).collect();
    let generated = generate_all(model, store, &captions, opts.seed)?;

    let fake = extractor.extract(&generated.images)?;
    let real_stats = metrics::gaussian_stats(&extractor.extract(&real)?.features)?;
    let fake_stats = metrics::gaussian_stats(&fake.features)?;
    let is = metrics::inception_score(&fake.probs, opts.is_splits)?;
    let fid = metrics::fid(&real_stats, &fake_stats)?;
    let retrieval = RetrievalConfig {
        seed: opts.seed,
        ..opts.retrieval
    };
    let rp = metrics::r_precision(
        &generated.image_embs,
        &generated.caption_embs,
        &labels,
        &generated.caption_embs,
        &labels,
        &retrieval,
    )?;
    Ok(Evaluation {
        report: MetricReport::new(is, fid, rp),
        generated,
    })
}

/// Word rankings of one refinement stage.
#[derive(Clone, Debug, Serialize)]
pub struct StageRankings {
    pub stage: usize,
    pub resolution: usize,
    #[serde(flatten)]
    pub rankings: RankingsJson,
}

#[derive(Clone, Debug, Serialize)]
pub struct Inspection {
    pub caption: String,
    pub tokens: Vec<String>,
    pub stages: Vec<StageRankings>,
    #[serde(skip)]
    pub raw: Vec<WordRankings>,
    /// One image per stage, lowest resolution first.
    #[serde(skip)]
    pub images: Vec<Tensor<f32>>,
}

/// Generator and augmentation noise used by [`inspect`].
pub fn inspection_noise(model: &DmGan, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    model.draw_noise(&mut rng::stream(seed, &[EVAL_STREAM, u64::MAX]))
}

/// Runs one eval-mode generation of `caption` and ranks its words per
/// refinement stage, by write gate and by mean addressing weight.
pub fn inspect(
    model: &DmGan,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    caption: &str,
    k: usize,
    seed: u64,
) -> Result<Inspection> {
    let tokens = vocab.tokenize(caption)?;
    let ids = model.text.check_tokens(&tokens)?;
    let (z, eps) = inspection_noise(model, seed);
    let mut g = Graph::<f32>::new();
    let mut b = Binder::new(store).freeze("");
    let gen = model.generate(&mut g, &mut b, &ids, &z, &eps, false)?;
    let mut stages = Vec::new();
    let mut raw = Vec::new();
    for (s, out) in gen.stages.iter().enumerate() {
        let Some(trace) = out.memory else { continue };
        let gates = trace.memory.write_gates.map(|v| g.value(v).data().to_vec());
        let r = top_k_words(g.value(trace.alpha.0), gates.as_deref(), k)?;
        stages.push(StageRankings {
            stage: s,
            resolution: model.config.resolution(s),
            rankings: r.to_json(vocab, &ids),
        });
        raw.push(r);
    }
    if stages.is_empty() {
        return Err(Error::Contract("a single-stage model has no memory to inspect".into()));
    }
    Ok(Inspection {
        caption: caption.to_string(),
        tokens: ids.iter().map(|&i| vocab.token(i).unwrap_or("?").to_string()).collect(),
        stages,
        raw,
        images: gen.stages.iter().map(|o| g.value(o.image).clone()).collect(),
    })
}
