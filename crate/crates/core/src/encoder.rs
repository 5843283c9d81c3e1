//! Small convolutional image encoders: the image side of the matching loss and
//! the classifier that stands in for Inception-v3 during evaluation.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data;
use crate::error::{Error, Result};
use crate::metrics::{Extraction, FeatureExtractor};
use crate::nn::{Binder, Conv3x3, Linear, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng64};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Largest resolution the encoder convolves at; bigger inputs are average-pooled
/// down first.
pub const WORK_RES: usize = 16;

/// Pool → two stride-2 convolutions → linear head, giving a `1×out_dim` code.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    pub input_res: usize,
    pub work_res: usize,
    pub convs: [Conv3x3; 2],
    pub fc: Linear,
}

impl ConvEncoder {
    pub fn new(prefix: &str, input_res: usize, channels: usize, out_dim: usize) -> Result<Self> {
        let work_res = input_res.min(WORK_RES);
        if !input_res.is_power_of_two() || work_res < 4 {
            return Err(Error::Config(format!("encoder input {input_res} must be a power of two ≥ 4")));
        }
        let side = work_res / 4;
        Ok(Self {
            input_res,
            work_res,
            convs: [
                Conv3x3::new(format!("{prefix}.conv0"), 3, channels).stride(2),
                Conv3x3::new(format!("{prefix}.conv1"), channels, 2 * channels).stride(2),
            ],
            fc: Linear::new(format!("{prefix}.fc"), 2 * channels * side * side, out_dim),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.fc.d_out
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut Rng64) {
        for c in &self.convs {
            c.init(store, rng);
        }
        self.fc.init(store, rng);
    }

    /// `x` is `[3, input_res, input_res]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &mut Binder<S>, x: Var) -> Result<Var> {
        let r = self.input_res;
        if g.shape(x) != [3, r, r] {
            return Err(crate::error::dim_err!("encoder for {r}x{r} got {:?}", g.shape(x)));
        }
        let mut h = x;
        let mut res = r;
        while res > self.work_res {
            h = g.avg_pool2(h)?;
            res /= 2;
        }
        for c in &self.convs {
            h = c.forward(g, b, h)?;
            h = g.leaky_relu(h);
        }
        let n = g.shape(h).iter().product();
        let flat = g.reshape(h, &[1, n])?;
        self.fc.forward(g, b, flat)
    }
}

/// Feature width of the evaluation classifier.
pub const FEATURE_DIM: usize = 32;
const CLASSIFIER_PREFIX: &str = "cls";

/// Shape × color × background classifier used for IS and FID.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub encoder: ConvEncoder,
    pub head: Linear,
    pub store: ParamStore<f32>,
}

/// Settings for fitting the classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierTraining {
    pub res: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_accuracy: f64,
    pub lr: f64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            res: 64,
            seed: 0xC1A55,
            train_samples: 2400,
            test_samples: 960,
            batch_size: 16,
            max_epochs: 30,
            target_accuracy: 0.95,
            lr: 2e-3,
        }
    }
}

/// Command that produces the classifier file, quoted in error messages.
pub const TRAIN_COMMAND: &str = "dmgan train-extractor --out FILE --res R";

impl Classifier {
    fn layers(res: usize) -> Result<(ConvEncoder, Linear)> {
        Ok((
            ConvEncoder::new(CLASSIFIER_PREFIX, res, 16, FEATURE_DIM)?,
            Linear::new(format!("{CLASSIFIER_PREFIX}.head"), FEATURE_DIM, data::NUM_CLASSES),
        ))
    }

    pub fn new(res: usize, seed: u64) -> Result<Self> {
        let (encoder, head) = Self::layers(res)?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[0xC1]);
        encoder.init(&mut store, &mut r);
        head.init(&mut store, &mut r);
        Ok(Self { encoder, head, store })
    }

    pub fn res(&self) -> usize {
        self.encoder.input_res
    }

    /// `(features 1×D, logits 1×C)`.
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &mut Binder<S>, x: Var) -> Result<(Var, Var)> {
        let f = self.encoder.forward(g, b, x)?;
        let h = g.leaky_relu(f);
        let logits = self.head.forward(g, b, h)?;
        Ok((f, logits))
    }

    fn predict(&self, image: &Tensor<f32>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&self.store).freeze("");
        let x = g.constant(image.clone());
        let (f, logits) = self.forward(&mut g, &mut b, x)?;
        let p = g.softmax(logits, 1)?;
        let to64 = |t: &Tensor<f32>| t.data().iter().map(|&v| f64::from(v)).collect();
        Ok((to64(g.value(p)), to64(g.value(f))))
    }

    pub fn accuracy(&self, samples: &[data::ShapesSample]) -> Result<f64> {
        let mut hits = 0;
        for s in samples {
            let (p, _) = self.predict(&s.image)?;
            let best = (0..p.len()).fold(0, |a, i| if p[i] > p[a] { i } else { a });
            hits += usize::from(best == s.class_id());
        }
        Ok(hits as f64 / samples.len() as f64)
    }

    /// Trains until held-out accuracy reaches the target; returns the accuracy.
    pub fn fit(&mut self, t: &ClassifierTraining) -> Result<f64> {
        let train = data::gen_dataset(t.seed, t.train_samples, t.res)?;
        let test = data::gen_dataset(t.seed ^ 0x7E57, t.test_samples, t.res)?;
        let cfg = AdamConfig {
            lr: t.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &[CLASSIFIER_PREFIX]);
        let mut acc = 0.0;
        for epoch in 0..t.max_epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(t.seed, &[0x5F, epoch as u64]));
            for batch in order.chunks(t.batch_size) {
                let mut g = Graph::<f32>::new();
                let mut b = Binder::new(&self.store);
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let x = g.constant(train[i].image.clone());
                    let (_, logits) = self.forward(&mut g, &mut b, x)?;
                    let lp = g.log_softmax(logits, 1)?;
                    let picked = g.slice(lp, 1, train[i].class_id(), 1)?;
                    losses.push(picked);
                }
                let all = g.concat(&losses, 0)?;
                let mean = g.mean(all);
                let loss = g.scale(mean, -1.0);
                g.backward(loss)?;
                let grads = b.grads(&g);
                drop(b);
                opt.step(&mut self.store, &grads)?;
            }
            acc = self.accuracy(&test)?;
            log::info!("classifier epoch {epoch}: held-out accuracy {acc:.4}");
            if acc >= t.target_accuracy {
                break;
            }
        }
        Ok(acc)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (n, t) in self.store.params() {
            c.insert(n.clone(), t.clone());
        }
        c.insert("meta.res", Tensor::scalar(self.res() as f32));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let res = c.get("meta.res")?.item() as usize;
        let (encoder, head) = Self::layers(res)?;
        let mut store = ParamStore::new();
        for (n, t) in &c.tensors {
            if n.starts_with(CLASSIFIER_PREFIX) {
                store.insert(n.clone(), t.clone());
            }
        }
        let me = Self { encoder, head, store };
        for l in me.encoder.convs.iter().map(|c| c.weight_name()).chain([me.head.weight_name()]) {
            me.store.get(&l).map_err(|_| Error::Format(format!("classifier file lacks {l}")))?;
        }
        Ok(me)
    }

    /// Loads the cached classifier, explaining how to create it if absent.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                path: path.to_path_buf(),
                hint: format!("no trained feature extractor; create it with `{TRAIN_COMMAND}`"),
            });
        }
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

impl FeatureExtractor for Classifier {
    fn num_classes(&self) -> usize {
        data::NUM_CLASSES
    }

    fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, images: &[Tensor<f32>]) -> Result<Extraction> {
        if images.is_empty() {
            return Err(Error::Contract("no images to extract".into()));
        }
        let run = |img: &Tensor<f32>| self.predict(img);
        #[cfg(feature = "parallel")]
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = {
            use rayon::prelude::*;
            images.par_iter().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = images.iter().map(run).collect();
        let mut probs = Vec::with_capacity(images.len() * data::NUM_CLASSES);
        let mut feats = Vec::with_capacity(images.len() * FEATURE_DIM);
        for r in rows {
            let (p, f) = r?;
            probs.extend(p);
            feats.extend(f);
        }
        Ok(Extraction {
            probs: Tensor::new(&[images.len(), data::NUM_CLASSES], probs)?,
            features: Tensor::new(&[images.len(), FEATURE_DIM], feats)?,
        })
    }
}
