//! Synthetic captioned-shapes dataset.
//!
//! Every sample is a pure function of `(seed, index, resolution)`: a single
//! flat-filled shape near the image centre on a uniform background, with the
//! caption `a {color} {shape} on a {background} background`.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use rand::RngExt;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const BACKGROUNDS: [&str; 3] = ["black", "white", "gray"];
pub const NUM_CLASSES: usize = SHAPES.len() * COLORS.len() * BACKGROUNDS.len();

const COLOR_RGB: [[f32; 3]; 4] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
];
const BACKGROUND_RGB: [[f32; 3]; 3] = [[-1.0; 3], [1.0; 3], [0.0; 3]];

/// The fixed vocabulary of all captions the generator can emit.
pub fn vocabulary() -> Vocabulary {
    let words = ["a", "on", "background"]
        .into_iter()
        .chain(SHAPES)
        .chain(COLORS)
        .chain(BACKGROUNDS);
    Vocabulary::new(words).expect("static vocabulary is valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub shape: usize,
    pub color: usize,
    pub background: usize,
}

impl Attributes {
    pub fn from_class(class_id: usize) -> Self {
        Self {
            shape: class_id / 12,
            color: (class_id / 3) % 4,
            background: class_id % 3,
        }
    }

    /// Dense id in `[0, 48)`.
    pub fn class_id(&self) -> usize {
        (self.shape * COLORS.len() + self.color) * BACKGROUNDS.len() + self.background
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} on a {} background",
            COLORS[self.color], SHAPES[self.shape], BACKGROUNDS[self.background]
        )
    }
}

/// Placement of the shape in unit coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

impl Geometry {
    /// Whether the unit-square point `(x, y)` lies inside `shape`.
    pub fn contains(&self, shape: usize, x: f32, y: f32) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.radius);
        match shape {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            2 => {
                let (apex, base) = (self.cy - r, self.cy + 0.7 * r);
                if y < apex || y > base {
                    return false;
                }
                dx.abs() <= r * (y - apex) / (base - apex)
            }
            _ => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSample {
    /// `[3, res, res]` with values in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub attributes: Attributes,
    pub geometry: Geometry,
}

impl ShapesSample {
    pub fn class_id(&self) -> usize {
        self.attributes.class_id()
    }
}

const SAMPLE_STREAM: u64 = 0x5348_4150;

/// Attributes and placement of sample `index`, independent of resolution.
pub fn layout(seed: u64, index: u64) -> (Attributes, Geometry) {
    let mut r = rng::stream(seed, &[SAMPLE_STREAM, index]);
    let attributes = Attributes {
        shape: r.random_range(0..SHAPES.len()),
        color: r.random_range(0..COLORS.len()),
        background: r.random_range(0..BACKGROUNDS.len()),
    };
    let geometry = Geometry {
        cx: 0.5 + r.random_range(-0.06f32..0.06),
        cy: 0.5 + r.random_range(-0.06f32..0.06),
        radius: r.random_range(0.24f32..0.34),
    };
    (attributes, geometry)
}

/// Rasterises `attributes` at `res`×`res`, sampling each pixel at its centre.
pub fn render(attributes: Attributes, geometry: Geometry, res: usize) -> Tensor<f32> {
    let fg = COLOR_RGB[attributes.color];
    let bg = BACKGROUND_RGB[attributes.background];
    let mut data = vec![0.0f32; 3 * res * res];
    for y in 0..res {
        for x in 0..res {
            let (ux, uy) = ((x as f32 + 0.5) / res as f32, (y as f32 + 0.5) / res as f32);
            let rgb = if geometry.contains(attributes.shape, ux, uy) { fg } else { bg };
            for c in 0..3 {
                data[(c * res + y) * res + x] = rgb[c];
            }
        }
    }
    Tensor::new(&[3, res, res], data).expect("positive resolution")
}

/// Sample `index` of the stream named by `seed`.
pub fn sample(seed: u64, index: u64, res: usize, vocab: &Vocabulary) -> ShapesSample {
    let (attributes, geometry) = layout(seed, index);
    let caption = attributes.caption();
    let tokens = vocab.tokenize(&caption).expect("captions use the dataset vocabulary");
    ShapesSample {
        image: render(attributes, geometry, res),
        caption,
        tokens,
        attributes,
        geometry,
    }
}

/// Samples `0..count` at `res`, in index order.
pub fn gen_dataset(seed: u64, count: usize, res: usize) -> Result<Vec<ShapesSample>> {
    if count == 0 || res == 0 {
        return Err(Error::Contract("count and resolution must be positive".into()));
    }
    let vocab = vocabulary();
    let make = |i: usize| sample(seed, i as u64, res, &vocab);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok((0..count).into_par_iter().map(make).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok((0..count).map(make).collect())
    }
}
