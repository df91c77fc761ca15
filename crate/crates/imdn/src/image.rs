//! 8-bit RGB image buffers, PNG I/O, luminance conversion and bicubic
//! resampling.
//!
//! Tensors exchanged with this module are `1 x 3 x H x W` with values in
//! `[0, 1]`. The bicubic kernel is the Catmull-Rom style cubic with
//! `a = -0.5`; when antialiasing is on and the target is smaller, the kernel
//! support is widened by the downscale factor. Weights at every output pixel
//! are normalized to sum to one, so constant images are preserved at any
//! size.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png decode: {0}")]
    Decode(String),
    #[error("png encode: {0}")]
    Encode(String),
    #[error("unsupported bit depth {0:?}; only 8-bit images are handled")]
    UnsupportedBitDepth(String),
    #[error("unsupported color type {0:?}")]
    UnsupportedColorType(String),
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
}

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize) -> Self {
        ImageBuffer {
            height,
            width,
            pixels: vec![0; 3 * height * width],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), 3 * height * width);
        ImageBuffer {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn rgb(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_rgb(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = 3 * (row * self.width + col);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Normalized `1 x 3 x H x W` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut t = Tensor::zeros(1, 3, h, w);
        for c in 0..3 {
            let plane = t.plane_mut(0, c);
            for i in 0..h * w {
                plane[i] = self.pixels[3 * i + c] as f64 / 255.0;
            }
        }
        t
    }

    /// Quantize a `1 x 3 x H x W` tensor back to 8 bits, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let [n, c, h, w] = t.shape();
        assert_eq!((n, c), (1, 3), "expected a 1x3xHxW tensor, got {:?}", t.shape());
        let mut pixels = vec![0u8; 3 * h * w];
        for ch in 0..3 {
            let plane = t.plane(0, ch);
            for i in 0..h * w {
                pixels[3 * i + ch] = (plane[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        ImageBuffer {
            height: h,
            width: w,
            pixels,
        }
    }
}

/// Decode an 8-bit PNG. Grayscale images load as replicated RGB; alpha
/// channels are dropped; 16-bit and palette images are rejected.
pub fn load_png(path: &Path) -> Result<ImageBuffer, ImageError> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageError::Decode(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::Decode(e.to_string()))?;

    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedBitDepth(format!("{:?}", info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let data = &buf[..info.buffer_size()];
    let mut pixels = Vec::with_capacity(3 * h * w);
    match info.color_type {
        png::ColorType::Rgb => pixels.extend_from_slice(data),
        png::ColorType::Rgba => {
            for px in data.chunks_exact(4) {
                pixels.extend_from_slice(&px[..3]);
            }
        }
        png::ColorType::Grayscale => {
            for &g in data {
                pixels.extend_from_slice(&[g, g, g]);
            }
        }
        png::ColorType::GrayscaleAlpha => {
            for px in data.chunks_exact(2) {
                pixels.extend_from_slice(&[px[0], px[0], px[0]]);
            }
        }
        other => return Err(ImageError::UnsupportedColorType(format!("{other:?}"))),
    }
    Ok(ImageBuffer::from_pixels(h, w, pixels))
}

/// Encode as 8-bit RGB PNG.
pub fn save_png(image: &ImageBuffer, path: &Path) -> Result<(), ImageError> {
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(file, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| ImageError::Encode(e.to_string()))?;
    writer
        .write_image_data(&image.pixels)
        .map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(())
}

/// BT.601 studio-swing luminance of a normalized RGB tensor, as an
/// `1 x 1 x H x W` plane: `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`.
pub fn rgb_to_y(rgb: &Tensor) -> Tensor {
    let [n, c, h, w] = rgb.shape();
    assert_eq!((n, c), (1, 3), "expected a 1x3xHxW tensor, got {:?}", rgb.shape());
    let (r, g, b) = (rgb.plane(0, 0), rgb.plane(0, 1), rgb.plane(0, 2));
    let mut y = Tensor::zeros(1, 1, h, w);
    let plane = y.plane_mut(0, 0);
    for i in 0..h * w {
        plane[i] = (65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i] + 16.0) / 255.0;
    }
    y
}

/// Cubic interpolation kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Sample positions and normalized weights for one output coordinate along
/// one axis. Indices are clamped to the valid range (edge replication).
fn axis_weights(out_len: usize, in_len: usize, antialias: bool) -> Vec<(usize, Vec<f64>)> {
    let scale = out_len as f64 / in_len as f64;
    // widen the kernel when shrinking with antialias on
    let kernel_scale = if antialias && scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / kernel_scale;

    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
            let mut sum = 0.0;
            for i in lo..=hi {
                let wv = cubic((i as f64 - center) * kernel_scale);
                weights.push(wv);
                sum += wv;
            }
            for wv in &mut weights {
                *wv /= sum;
            }
            // fold out-of-range taps onto the clamped edge pixels
            let mut clamped: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
            for (idx, wv) in (lo..=hi).zip(weights) {
                let ci = idx.clamp(0, in_len as isize - 1) as usize;
                match clamped.last_mut() {
                    Some((last, acc)) if *last == ci => *acc += wv,
                    _ => clamped.push((ci, wv)),
                }
            }
            let start = clamped.first().expect("cubic kernel has taps").0;
            let ws = clamped.into_iter().map(|(_, wv)| wv).collect();
            (start, ws)
        })
        .collect()
}

/// Separable bicubic resize of a rank-4 tensor's spatial dimensions.
pub fn bicubic_resize(input: &Tensor, out_h: usize, out_w: usize, antialias: bool) -> Tensor {
    let [n, c, h, w] = input.shape();
    assert!(out_h >= 1 && out_w >= 1);
    let row_weights = axis_weights(out_h, h, antialias);
    let col_weights = axis_weights(out_w, w, antialias);

    let mut out = Tensor::zeros(n, c, out_h, out_w);
    for ni in 0..n {
        for ci in 0..c {
            let src = input.plane(ni, ci);
            // horizontal pass
            let mut tmp = vec![0.0f64; h * out_w];
            for (ow, (start, ws)) in col_weights.iter().enumerate() {
                for row in 0..h {
                    let base = row * w + start;
                    let mut acc = 0.0;
                    for (k, wv) in ws.iter().enumerate() {
                        acc += wv * src[base + k];
                    }
                    tmp[row * out_w + ow] = acc;
                }
            }
            // vertical pass
            let dst = out.plane_mut(ni, ci);
            for (oh, (start, ws)) in row_weights.iter().enumerate() {
                for ow in 0..out_w {
                    let mut acc = 0.0;
                    for (k, wv) in ws.iter().enumerate() {
                        acc += wv * tmp[(start + k) * out_w + ow];
                    }
                    dst[oh * out_w + ow] = acc;
                }
            }
        }
    }
    out
}

/// Bicubic resize of an 8-bit image, quantizing the result.
pub fn bicubic_resize_image(
    image: &ImageBuffer,
    out_h: usize,
    out_w: usize,
    antialias: bool,
) -> ImageBuffer {
    ImageBuffer::from_tensor(&bicubic_resize(&image.to_tensor(), out_h, out_w, antialias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rgb(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            [1, 3, h, w],
            (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn png_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<u8> = (0..3 * 9 * 7).map(|_| rng.gen()).collect();
        let img = ImageBuffer::from_pixels(9, 7, pixels);
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }

    #[test]
    fn png_one_pixel_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.png");
        let img = ImageBuffer::from_pixels(1, 1, vec![12, 200, 34]);
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }

    #[test]
    fn grayscale_png_loads_as_replicated_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let file = std::fs::File::create(&path).unwrap();
        let mut enc = png::Encoder::new(file, 3, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(&[0, 60, 120, 180, 240, 255]).unwrap();
        drop(writer);

        let img = load_png(&path).unwrap();
        assert_eq!((img.height(), img.width()), (2, 3));
        assert_eq!(img.rgb(0, 1), [60, 60, 60]);
        assert_eq!(img.rgb(1, 2), [255, 255, 255]);
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let file = std::fs::File::create(&path).unwrap();
        let mut enc = png::Encoder::new(file, 1, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(&[0xAB, 0xCD]).unwrap();
        drop(writer);
        assert!(matches!(
            load_png(&path),
            Err(ImageError::UnsupportedBitDepth(_))
        ));
    }

    #[test]
    fn luminance_known_values() {
        let white = Tensor::filled(1, 3, 1, 1, 1.0);
        assert!((rgb_to_y(&white).item() - 235.0 / 255.0).abs() < 1e-12);
        let black = Tensor::zeros(1, 3, 1, 1);
        assert!((rgb_to_y(&black).item() - 16.0 / 255.0).abs() < 1e-12);
        let gray = Tensor::filled(1, 3, 1, 1, 0.5);
        assert!((rgb_to_y(&gray).item() - (109.5 + 16.0) / 255.0).abs() < 1e-12);
    }

    #[test]
    fn luminance_stays_in_studio_range() {
        let x = random_rgb(11, 8, 8);
        let y = rgb_to_y(&x);
        for &v in y.plane(0, 0) {
            assert!(v >= 16.0 / 255.0 - 1e-12 && v <= 235.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn identity_resize_is_identity() {
        let x = random_rgb(5, 6, 9);
        for antialias in [false, true] {
            let y = bicubic_resize(&x, 6, 9, antialias);
            assert!(x.max_abs_diff(&y) < 1e-12, "antialias {antialias}");
        }
    }

    #[test]
    fn constant_image_preserved_at_any_size() {
        let x = Tensor::filled(1, 3, 7, 5, 0.37);
        for (oh, ow, aa) in [(14, 10, false), (3, 2, true), (9, 13, true), (1, 1, true)] {
            let y = bicubic_resize(&x, oh, ow, aa);
            for &v in y.data() {
                assert!((v - 0.37).abs() < 1e-12, "{oh}x{ow} antialias {aa}: {v}");
            }
        }
    }

    /// Direct 2-D weighted-sum oracle: no separability, no passes.
    fn bicubic_direct(input: &Tensor, out_h: usize, out_w: usize, antialias: bool) -> Tensor {
        let [n, c, h, w] = input.shape();
        let rows = axis_weights(out_h, h, antialias);
        let cols = axis_weights(out_w, w, antialias);
        let mut out = Tensor::zeros(n, c, out_h, out_w);
        for ni in 0..n {
            for ci in 0..c {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let (r0, rws) = &rows[oh];
                        let (c0, cws) = &cols[ow];
                        let mut acc = 0.0;
                        for (i, rw) in rws.iter().enumerate() {
                            for (j, cw) in cws.iter().enumerate() {
                                acc += rw * cw * input.at(ni, ci, r0 + i, c0 + j);
                            }
                        }
                        out.set(ni, ci, oh, ow, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn downscale_checkerboard_matches_direct_oracle() {
        let mut x = Tensor::zeros(1, 1, 4, 4);
        for r in 0..4 {
            for ccol in 0..4 {
                x.set(0, 0, r, ccol, ((r + ccol) % 2) as f64);
            }
        }
        let fast = bicubic_resize(&x, 2, 2, true);
        let direct = bicubic_direct(&x, 2, 2, true);
        assert!(fast.max_abs_diff(&direct) < 1e-9);
    }

    #[test]
    fn random_resizes_match_direct_oracle() {
        let x = random_rgb(21, 11, 13);
        for (oh, ow, aa) in [(5, 6, true), (5, 6, false), (22, 27, false), (3, 29, true)] {
            let fast = bicubic_resize(&x, oh, ow, aa);
            let direct = bicubic_direct(&x, oh, ow, aa);
            assert!(
                fast.max_abs_diff(&direct) < 1e-9,
                "{oh}x{ow} antialias {aa}"
            );
        }
    }

    #[test]
    fn kernel_weights_sum_to_one() {
        for (out_len, in_len, aa) in [(10, 40, true), (40, 10, false), (7, 7, true), (33, 16, false)] {
            for (_, ws) in axis_weights(out_len, in_len, aa) {
                let sum: f64 = ws.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tensor_image_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pixels: Vec<u8> = (0..3 * 5 * 4).map(|_| rng.gen()).collect();
        let img = ImageBuffer::from_pixels(5, 4, pixels);
        let back = ImageBuffer::from_tensor(&img.to_tensor());
        assert_eq!(back, img);
    }
}
