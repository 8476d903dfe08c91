//! Channel-mean feature heatmaps blended over the input image.

use crate::kernels::resize_bilinear;
use crate::scalar::Scalar;
use crate::synth_data::ImageSample;
use crate::tensor::Tensor;

pub const HEATMAP_ALPHA: f64 = 0.5;

/// Mean over channels of a `C x h x w` map.
pub fn channel_mean<T: Scalar>(feature: &Tensor<T>) -> Vec<f64> {
    let s = feature.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; hw];
    for ch in feature.data().chunks(hw) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v.f64();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    out
}

/// Min-max scaling to `[0, 255]`; a constant map becomes all zeros.
pub fn normalize_heat(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo) * 255.0).collect()
}

/// "hot" colormap on `[0, 1]`: black, red, yellow, white.
pub fn hot(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        (3.0 * t).min(1.0),
        (3.0 * t - 1.0).clamp(0.0, 1.0),
        (3.0 * t - 2.0).clamp(0.0, 1.0),
    ]
}

/// The normalised heat layer resized to the image, values in `[0, 255]`.
pub fn heat_layer<T: Scalar>(feature: &Tensor<T>, width: usize, height: usize) -> Vec<f64> {
    let s = feature.shape();
    let heat = normalize_heat(&channel_mean(feature));
    resize_bilinear(&heat, s[1], s[2], height, width)
}

/// Channel mean, min-max to `[0, 255]`, bilinear resize, colour map, then a
/// 50/50 blend with the image.
pub fn export_feature_heatmap<T: Scalar>(
    feature: &Tensor<T>,
    image: &ImageSample,
) -> image::RgbImage {
    let (w, h) = (image.width, image.height);
    let heat = heat_layer(feature, w, h);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let color = hot(heat[y * w + x] / 255.0);
            let px = &image.pixels[(y * w + x) * 3..(y * w + x) * 3 + 3];
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let v = (1.0 - HEATMAP_ALPHA) * px[c] as f64 + HEATMAP_ALPHA * color[c];
                rgb[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    out
}
