//! Dataset ingestion and training-patch augmentation.

pub mod augment;
pub mod loaders;
pub mod synth;

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use loaders::{decode_image, load_dataset, DatasetFormat, LoadSummary};

use crate::error::Result;
use crate::geometry::{generate_labels, LabelMaps, RBox};
use crate::losses::LabelBatch;
use crate::tensor::{Elem, Tensor};

/// Plain 8-bit RGB raster, row-major HWC. Kept separate from decoder
/// types so every pixel operation in the pipeline is this crate's own
/// deterministic arithmetic.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    /// h * w * 3 bytes.
    pub data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(h: usize, w: usize) -> ImageBuf {
        ImageBuf {
            h,
            w,
            data: vec![0; h * w * 3],
        }
    }

    pub fn from_raw(h: usize, w: usize, data: Vec<u8>) -> ImageBuf {
        assert_eq!(data.len(), h * w * 3, "HWC byte count");
        ImageBuf { h, w, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> u8 {
        self.data[(i * self.w + j) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: u8) {
        self.data[(i * self.w + j) * 3 + c] = v;
    }

    /// Bilinear sample at continuous (y, x); outside pixels read as 0.
    pub fn sample(&self, y: f64, x: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let at = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= self.h as f64 || xx >= self.w as f64 {
                0.0
            } else {
                self.get(yy as usize, xx as usize, c) as f64
            }
        };
        let v00 = at(y0, x0);
        let v01 = at(y0, x0 + 1.0);
        let v10 = at(y0 + 1.0, x0);
        let v11 = at(y0 + 1.0, x0 + 1.0);
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
    }

    /// Bilinear resize with half-pixel sample alignment.
    pub fn resized(&self, out_h: usize, out_w: usize) -> ImageBuf {
        if self.h == out_h && self.w == out_w {
            return self.clone();
        }
        let mut out = ImageBuf::new(out_h, out_w);
        let sy = self.h as f64 / out_h as f64;
        let sx = self.w as f64 / out_w as f64;
        for i in 0..out_h {
            let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, self.h as f64 - 1.0);
            for j in 0..out_w {
                let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, self.w as f64 - 1.0);
                for c in 0..3 {
                    out.set(i, j, c, self.sample(y, x, c).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// Extend the canvas to (out_h, out_w) with `fill`, content anchored
    /// at the top-left so existing coordinates stay valid.
    pub fn padded_to(&self, out_h: usize, out_w: usize, fill: [u8; 3]) -> ImageBuf {
        assert!(out_h >= self.h && out_w >= self.w, "padding cannot shrink");
        if self.h == out_h && self.w == out_w {
            return self.clone();
        }
        let mut out = ImageBuf::new(out_h, out_w);
        for i in 0..out_h {
            for j in 0..out_w {
                for c in 0..3 {
                    let v = if i < self.h && j < self.w {
                        self.get(i, j, c)
                    } else {
                        fill[c]
                    };
                    out.set(i, j, c, v);
                }
            }
        }
        out
    }

    pub fn channel_means(&self) -> [u8; 3] {
        let mut sums = [0u64; 3];
        for px in 0..self.h * self.w {
            for c in 0..3 {
                sums[c] += self.data[px * 3 + c] as u64;
            }
        }
        let n = (self.h * self.w).max(1) as u64;
        [
            (sums[0] / n) as u8,
            (sums[1] / n) as u8,
            (sums[2] / n) as u8,
        ]
    }
}

/// One image as a network input tensor, values in [-1, 1].
pub fn image_tensor(image: &ImageBuf) -> Tensor {
    let (h, w) = (image.h, image.w);
    let mut data = vec![0.0 as Elem; 3 * h * w];
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                data[(c * h + i) * w + j] = (image.get(i, j, c) as Elem) / 127.5 - 1.0;
            }
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// One annotated text region.
#[derive(Clone, Debug)]
pub struct BoxAnnotation {
    pub rbox: RBox,
    /// false for regions the evaluator must not penalize.
    pub care: bool,
    pub text: String,
}

/// An image plus its annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageBuf,
    pub boxes: Vec<BoxAnnotation>,
}

/// Stack augmented samples into the network input tensor and the label
/// batch. Pixels map linearly onto [-1, 1].
pub fn rasterize_batch(samples: &[Sample]) -> Result<(Tensor, LabelBatch)> {
    assert!(!samples.is_empty(), "empty batch");
    let (h, w) = (samples[0].image.h, samples[0].image.w);
    let n = samples.len();
    let mut data = vec![0.0 as Elem; n * 3 * h * w];
    let mut maps: Vec<LabelMaps> = Vec::with_capacity(n);
    for (s_idx, sample) in samples.iter().enumerate() {
        assert_eq!(
            (sample.image.h, sample.image.w),
            (h, w),
            "mixed sizes in one batch"
        );
        let img = &sample.image;
        for c in 0..3 {
            let plane = &mut data[(s_idx * 3 + c) * h * w..(s_idx * 3 + c + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    plane[i * w + j] = (img.get(i, j, c) as Elem) / 127.5 - 1.0;
                }
            }
        }
        let boxes: Vec<(RBox, bool)> = sample.boxes.iter().map(|b| (b.rbox, b.care)).collect();
        maps.push(generate_labels(&boxes, h, w)?);
    }
    let images = Tensor::from_vec(&[n, 3, h, w], data);
    Ok((images, LabelBatch::from_maps(&maps)?))
}
