//! Grad-CAM sensitivity maps over the last convolution, colour mapping and
//! overlays.

use crate::data::netpbm::{GrayImage, RgbImage};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::SNeurodCnn;
use crate::tensor::{Prng, Tensor};

/// Normalised class-sensitivity map at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H, W]`, values in `[0, 1]`.
    pub values: Tensor,
    /// Spatial size of the feature map the heatmap was computed on.
    pub source_dims: (usize, usize),
    pub class_index: usize,
}

impl Heatmap {
    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    /// Row-major position of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let w = self.values.shape()[1];
        let mut best = 0;
        for (i, &v) in self.values.data().iter().enumerate() {
            if v > self.values.data()[best] {
                best = i;
            }
        }
        (best / w, best % w)
    }

    pub fn to_gray(&self) -> Result<GrayImage> {
        GrayImage::from_tensor(&self.values)
    }
}

/// Grad-CAM for one image `[1, C, H, W]`: channel weights are the spatial
/// means of the gradient of the class logit with respect to the post-ReLU
/// last-convolution maps; the rectified weighted sum is divided by its
/// maximum and bilinearly upsampled.
pub fn grad_cam(model: &SNeurodCnn, image: &Tensor, class_index: usize) -> Result<Heatmap> {
    let cfg = model.config();
    if class_index >= cfg.num_classes {
        return Err(Error::Parameter(format!(
            "class index {class_index} out of range for {} classes",
            cfg.num_classes
        )));
    }
    if image.shape().first() != Some(&1) {
        return Err(Error::Shape(format!("expected a single image [1, C, H, W], got {:?}", image.shape())));
    }
    let (_, cache) = model.forward(image, Mode::Eval, &mut Prng::new(0))?;
    let mut d_logits = Tensor::zeros(&[1, cfg.num_classes]);
    d_logits.data_mut()[class_index] = 1.0;
    let (grad, _) = model.backward_to_last_conv(&cache, &d_logits)?;
    let acts = cache.last_conv_activation();
    let (_, channels, h, w) = acts.dims4()?;
    let plane = h * w;

    let mut raw = vec![0.0; plane];
    for k in 0..channels {
        let g = &grad.data()[k * plane..(k + 1) * plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        let a = &acts.data()[k * plane..(k + 1) * plane];
        for (r, &av) in raw.iter_mut().zip(a) {
            *r += alpha * av;
        }
    }
    let max = raw.iter().fold(0.0f64, |m, &v| m.max(v));
    let raw = raw.into_iter().map(|v| if max > 0.0 { v.max(0.0) / max } else { 0.0 });
    let small = Tensor::new(&[h, w], raw.collect())?;
    let values = upsample_bilinear(&small, cfg.input_height, cfg.input_width)?;
    Ok(Heatmap { values, source_dims: (h, w), class_index })
}

/// Corner-aligned bilinear resize of an `[h, w]` map.
pub fn upsample_bilinear(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if height == 0 || width == 0 {
        return Err(Error::Parameter(format!("target size {height}x{width} must be positive")));
    }
    let coord = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        if out == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (out - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 2);
        (lo, lo + 1, pos - lo as f64)
    };
    let src = map.data();
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        let (y0, y1, fy) = coord(i, height, h);
        for j in 0..width {
            let (x0, x1, fx) = coord(j, width, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(&[height, width], out)
}

/// 256-entry purple-to-yellow lookup table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorMap {
    pub table: Vec<[u8; 3]>,
}

const CONTROL_POINTS: [[f64; 3]; 5] =
    [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];

impl Default for ColorMap {
    fn default() -> Self {
        let segments = (CONTROL_POINTS.len() - 1) as f64;
        let table = (0..256)
            .map(|i| {
                let pos = i as f64 / 255.0 * segments;
                let seg = (pos.floor() as usize).min(CONTROL_POINTS.len() - 2);
                let t = pos - seg as f64;
                let (a, b) = (CONTROL_POINTS[seg], CONTROL_POINTS[seg + 1]);
                [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * t).round() as u8)
            })
            .collect();
        Self { table }
    }
}

impl ColorMap {
    pub fn color(&self, v: f64) -> [u8; 3] {
        self.table[(v.clamp(0.0, 1.0) * 255.0).round() as usize]
    }
}

pub fn colorize(heatmap: &Heatmap, cmap: &ColorMap) -> RgbImage {
    let (height, width) = heatmap.dims();
    let pixels = heatmap.values.data().iter().flat_map(|&v| cmap.color(v)).collect();
    RgbImage { width, height, pixels }
}

/// `alpha * rgb + (1 - alpha) * gray` per channel, rounded.
pub fn overlay(rgb: &RgbImage, gray: &GrayImage, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if (rgb.width, rgb.height) != (gray.width, gray.height) {
        return Err(Error::Shape(format!(
            "colour image {}x{} vs grayscale {}x{}",
            rgb.width, rgb.height, gray.width, gray.height
        )));
    }
    let pixels = rgb
        .pixels
        .chunks(3)
        .zip(&gray.pixels)
        .flat_map(|(c, &g)| {
            let blend = |v: u8| (alpha * v as f64 + (1.0 - alpha) * g as f64).round() as u8;
            [blend(c[0]), blend(c[1]), blend(c[2])]
        })
        .collect();
    Ok(RgbImage { width: rgb.width, height: rgb.height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    /// Delta kernels, unit classifier weights: the only path from the
    /// bright input pixel to the class-1 logit runs through its own
    /// location.
    fn one_path_model() -> SNeurodCnn {
        let cfg = ModelConfig {
            input_height: 21,
            input_width: 21,
            conv1_filters: 1,
            conv2_filters: 1,
            dense_units: 1,
            dropout_rate: 0.0,
            ..ModelConfig::default()
        };
        let mut m = SNeurodCnn::build(cfg, &mut Prng::new(0)).unwrap();
        for conv in [&mut m.conv1, &mut m.conv2, &mut m.conv3] {
            conv.weights.data_mut().fill(0.0);
            conv.weights.data_mut()[4] = 1.0;
        }
        m.dense1.weights.data_mut().fill(1.0);
        m.dense2.weights.data_mut().copy_from_slice(&[0.0, 1.0]);
        m
    }

    #[test]
    fn one_path_network_peaks_at_bright_pixel() {
        let m = one_path_model();
        let mut x = Tensor::zeros(&[1, 1, 21, 21]);
        x.data_mut()[10 * 21 + 10] = 1.0;
        let h = grad_cam(&m, &x, 1).unwrap();
        assert_eq!(h.source_dims, (5, 5));
        assert_eq!(h.dims(), (21, 21));
        assert_eq!(h.argmax(), (10, 10));
        assert_eq!(h.values.data()[10 * 21 + 10], 1.0);
    }

    #[test]
    fn zero_classifier_gives_zero_map() {
        let mut m = one_path_model();
        m.dense2.weights.data_mut().fill(0.0);
        let x = Tensor::from_fn(&[1, 1, 21, 21], |i| (i % 7) as f64 / 7.0);
        let h = grad_cam(&m, &x, 1).unwrap();
        assert!(h.values.data().iter().all(|&v| v == 0.0));
        assert!(matches!(grad_cam(&m, &x, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn random_models_stay_in_unit_range_and_scale_invariant() {
        let cfg = ModelConfig {
            input_height: 20,
            input_width: 18,
            conv1_filters: 3,
            conv2_filters: 4,
            dense_units: 6,
            ..ModelConfig::default()
        };
        for seed in 0..5 {
            let mut rng = Prng::new(seed);
            let m = SNeurodCnn::build(cfg.clone(), &mut rng).unwrap();
            let x = Tensor::from_fn(&[1, 1, 20, 18], |_| rng.next_f64());
            for class in 0..2 {
                let h = grad_cam(&m, &x, class).unwrap();
                assert_eq!(h.dims(), (20, 18));
                assert!(h.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                let mut scaled = m.clone();
                scaled.dense2.weights.data_mut().iter_mut().for_each(|w| *w *= 3.0);
                scaled.dense2.bias.data_mut().iter_mut().for_each(|b| *b *= 3.0);
                let hs = grad_cam(&scaled, &x, class).unwrap();
                for (a, b) in h.values.data().iter().zip(hs.values.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert_eq!(h.argmax(), hs.argmax());
            }
        }
    }

    #[test]
    fn bilinear_cases() {
        let c = Tensor::new(&[1, 1], vec![0.3]).unwrap();
        assert!(upsample_bilinear(&c, 4, 5).unwrap().data().iter().all(|&v| v == 0.3));
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = upsample_bilinear(&m, 3, 3).unwrap();
        assert_eq!(up.data()[4], 0.5);
        assert_eq!(up.data()[0], 0.0);
        assert_eq!(up.data()[2], 1.0);
        let r = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        assert_eq!(upsample_bilinear(&r, 3, 4).unwrap(), r);
        assert!(matches!(upsample_bilinear(&r, 0, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn palette_endpoints_and_midpoint() {
        let cm = ColorMap::default();
        assert_eq!(cm.table.len(), 256);
        assert_eq!(cm.color(0.0), [68, 1, 84]);
        assert_eq!(cm.color(1.0), [253, 231, 37]);
        assert_eq!(cm.color(0.5), [33, 145, 140]);
    }

    #[test]
    fn overlay_blending() {
        let h = Heatmap { values: Tensor::filled(&[2, 3], 0.25), source_dims: (1, 1), class_index: 1 };
        let rgb = colorize(&h, &ColorMap::default());
        assert!(rgb.pixels.chunks(3).all(|p| p == rgb.pixel(0, 0)));
        let gray = GrayImage { width: 3, height: 2, pixels: vec![0, 50, 100, 150, 200, 250] };
        let o = overlay(&rgb, &gray, 0.0).unwrap();
        for (i, &g) in gray.pixels.iter().enumerate() {
            assert_eq!(&o.pixels[3 * i..3 * i + 3], &[g, g, g]);
        }
        assert_eq!(overlay(&rgb, &gray, 1.0).unwrap(), rgb);
        assert!(overlay(&rgb, &gray, 1.5).is_err());
    }
}
