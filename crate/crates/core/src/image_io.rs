//! PNG output for `[3,H,W]` images in `[-1, 1]`.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn side(img: &Tensor<f32>) -> Result<usize> {
    match img.shape() {
        &[3, h, w] if h == w && h > 0 => Ok(h),
        s => Err(dim_err!("expected a square [3,H,W] image, got {s:?}")),
    }
}

/// Tiles images row-major into an RGB8 buffer, `cols` per row, each
/// nearest-neighbour scaled to the largest side and separated by `pad` pixels.
pub fn grid_rgb(images: &[Tensor<f32>], cols: usize, pad: usize) -> Result<(usize, usize, Vec<u8>)> {
    if images.is_empty() || cols == 0 {
        return Err(Error::Contract("a grid needs at least one image and one column".into()));
    }
    let sides = images.iter().map(side).collect::<Result<Vec<_>>>()?;
    let cell = *sides.iter().max().expect("non-empty");
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (w, h) = (cols * cell + (cols + 1) * pad, rows * cell + (rows + 1) * pad);
    let mut buf = vec![255u8; w * h * 3];
    for (k, (img, &s)) in images.iter().zip(&sides).enumerate() {
        let (ox, oy) = (pad + (k % cols) * (cell + pad), pad + (k / cols) * (cell + pad));
        let d = img.data();
        for y in 0..cell {
            for x in 0..cell {
                let (sy, sx) = (y * s / cell, x * s / cell);
                let o = ((oy + y) * w + ox + x) * 3;
                for c in 0..3 {
                    buf[o + c] = to_byte(d[(c * s + sy) * s + sx]);
                }
            }
        }
    }
    Ok((w, h, buf))
}

pub fn save_grid(path: &Path, images: &[Tensor<f32>], cols: usize) -> Result<()> {
    let (w, h, buf) = grid_rgb(images, cols, 2)?;
    write_png(path, w, h, &buf)
}

pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (w, h, buf) = grid_rgb(std::slice::from_ref(image), 1, 0)?;
    write_png(path, w, h, &buf)
}

fn write_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    let file = BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format(format!("png: {e}"));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)
}
