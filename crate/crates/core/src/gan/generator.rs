use crate::config::ModelConfig;
use crate::error::Result;
use crate::memory::{DynamicMemory, ImageFeatureMap, MemoryTrace};
use crate::nn::{map_to_pixels, pixels_to_map, Binder, Conv3x3, Linear, ParamStore};
use crate::rng::Rng64;
use crate::tensor::{Graph, Scalar, Var};
use crate::text::WordFeatures;

/// Nearest-neighbour 2× upsampling followed by a 3×3 convolution and leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock {
    pub conv: Conv3x3,
}

impl UpBlock {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &mut Binder<S>, x: Var) -> Result<Var> {
        let up = g.upsample_nearest(x)?;
        let y = self.conv.forward(g, b, up)?;
        Ok(g.leaky_relu(y))
    }
}

/// `x + conv(lrelu(conv(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

impl ResBlock {
    fn new(prefix: &str, c: usize) -> Self {
        Self {
            conv1: Conv3x3::new(format!("{prefix}.conv1"), c, c),
            conv2: Conv3x3::new(format!("{prefix}.conv2"), c, c),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &mut Binder<S>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, b, x)?;
        let h = g.leaky_relu(h);
        let h = self.conv2.forward(g, b, h)?;
        g.add(x, h)
    }
}

/// Images and features of one generator stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// `[3,H,W]` in `[-1, 1]`.
    pub image: Var,
    /// `[N_r,H,W]` feature map.
    pub map: Var,
    /// The same features as an `N×N_r` pixel matrix.
    pub features: ImageFeatureMap,
    /// Memory internals for refinement stages.
    pub memory: Option<MemoryTrace>,
}

/// `[z, ŝ]` → FC → 4×4 map → upsampling blocks to the base resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialStage {
    pub fc: Linear,
    pub channels: usize,
    pub ups: Vec<UpBlock>,
    pub to_image: Conv3x3,
}

/// Memory block → residual blocks → upsampling block.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineStage {
    pub memory: DynamicMemory,
    pub residuals: Vec<ResBlock>,
    pub up: UpBlock,
    pub to_image: Conv3x3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub initial: InitialStage,
    pub refiners: Vec<RefineStage>,
}

fn to_pixels<S: Scalar>(g: &mut Graph<S>, map: Var) -> Result<ImageFeatureMap> {
    let s = g.shape(map).to_vec();
    Ok(ImageFeatureMap {
        features: map_to_pixels(g, map)?,
        height: s[1],
        width: s[2],
    })
}

impl InitialStage {
    fn new(cfg: &ModelConfig) -> Self {
        let c0 = cfg.g_channels;
        let n_up = (cfg.base_res / 4).trailing_zeros() as usize;
        let mut ups = Vec::new();
        let mut c = c0;
        for i in 0..n_up {
            let out = if i + 1 == n_up {
                cfg.pixel_dim
            } else {
                (c / 2).max(cfg.pixel_dim)
            };
            ups.push(UpBlock {
                conv: Conv3x3::new(format!("g0.up{i}"), c, out),
            });
            c = out;
        }
        Self {
            fc: Linear::new("g0.fc", cfg.z_dim + cfg.cond_dim, c0 * 16),
            channels: c0,
            ups,
            to_image: Conv3x3::new("g0.to_image", cfg.pixel_dim, 3),
        }
    }

    /// `z` and `code` are `1×z_dim` and `1×cond_dim`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &mut Binder<S>, z: Var, code: Var) -> Result<StageOutput> {
        let input = g.concat(&[z, code], 1)?;
        let h = self.fc.forward(g, b, input)?;
        let h = g.leaky_relu(h);
        let mut map = g.reshape(h, &[self.channels, 4, 4])?;
        for up in &self.ups {
            map = up.forward(g, b, map)?;
        }
        let img = self.to_image.forward(g, b, map)?;
        let image = g.tanh(img);
        Ok(StageOutput {
            image,
            map,
            features: to_pixels(g, map)?,
            memory: None,
        })
    }
}

impl RefineStage {
    fn new(cfg: &ModelConfig, stage: usize) -> Self {
        let mem_prefix = if cfg.share_memory {
            "mem".to_string()
        } else {
            format!("g{stage}.mem")
        };
        let memory = DynamicMemory::new(&mem_prefix, cfg.memory, cfg.word_dim, cfg.pixel_dim, cfg.mem_dim);
        let c = memory.out_dim();
        Self {
            residuals: (0..cfg.residual_blocks)
                .map(|i| ResBlock::new(&format!("g{stage}.res{i}"), c))
                .collect(),
            up: UpBlock {
                conv: Conv3x3::new(format!("g{stage}.up"), c, cfg.pixel_dim),
            },
            to_image: Conv3x3::new(format!("g{stage}.to_image"), cfg.pixel_dim, 3),
            memory,
        }
    }

    /// Fused memory features after the residual blocks, before upsampling.
    pub fn pre_upsample<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binder<S>,
        prev: ImageFeatureMap,
        words: WordFeatures,
    ) -> Result<(Var, MemoryTrace)> {
        let trace = self.memory.forward(g, b, words, prev)?;
        let mut map = pixels_to_map(g, trace.output, prev.height, prev.width)?;
        for r in &self.residuals {
            map = r.forward(g, b, map)?;
        }
        Ok((map, trace))
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binder<S>,
        prev: ImageFeatureMap,
        words: WordFeatures,
    ) -> Result<StageOutput> {
        let (map, trace) = self.pre_upsample(g, b, prev, words)?;
        let map = self.up.forward(g, b, map)?;
        let img = self.to_image.forward(g, b, map)?;
        let image = g.tanh(img);
        Ok(StageOutput {
            image,
            map,
            features: to_pixels(g, map)?,
            memory: Some(trace),
        })
    }
}

impl Generator {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            initial: InitialStage::new(cfg),
            refiners: (1..cfg.stages).map(|i| RefineStage::new(cfg, i)).collect(),
        }
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut Rng64) {
        let i = &self.initial;
        i.fc.init(store, rng);
        for u in &i.ups {
            u.conv.init(store, rng);
        }
        i.to_image.init(store, rng);
        for r in &self.refiners {
            r.memory.init(store, rng);
            for res in &r.residuals {
                res.conv1.init(store, rng);
                res.conv2.init(store, rng);
            }
            r.up.conv.init(store, rng);
            r.to_image.init(store, rng);
        }
    }

    /// Runs every stage; returns one output per stage, lowest resolution first.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binder<S>,
        z: Var,
        code: Var,
        words: WordFeatures,
    ) -> Result<Vec<StageOutput>> {
        let mut outs = vec![self.initial.forward(g, b, z, code)?];
        for r in &self.refiners {
            let prev = outs.last().expect("initial stage").features;
            outs.push(r.forward(g, b, prev, words)?);
        }
        Ok(outs)
    }
}
