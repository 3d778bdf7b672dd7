//! Grad-CAM heatmaps and the original / heatmap / blend triple shown to
//! users.
//!
//! Channel weights are the spatial mean of the gradient of the target logit
//! with respect to the final conv block output `A`; the coarse map is
//! `ReLU(Σ_k w_k A_k)`. It is bilinearly upsampled to the input resolution
//! and min-max normalized. A map with no contrast (max - min below
//! [`DEGENERATE_RANGE`]) is reported as all zeros with `degenerate = true`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{argmax, Checkpoint};
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    #[default]
    GradCam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub image_id: String,
    pub method: AttributionMethod,
    pub target_class: usize,
    pub predicted_class: usize,
    pub height: usize,
    pub width: usize,
    /// Normalized importance in `[0, 1]`, row-major at image resolution.
    pub values: Vec<f64>,
    /// Maximum of the upsampled map before normalization.
    pub raw_max: f64,
    pub degenerate: bool,
    pub coarse_height: usize,
    pub coarse_width: usize,
    /// `ReLU(Σ_k w_k A_k)` at the final block's resolution.
    pub coarse: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Mean heatmap value inside and outside `mask` (row-major).
    pub fn inside_outside_means(&self, mask: &[bool]) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.iter().zip(mask) {
            if m {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        (si / ni.max(1) as f64, so / no.max(1) as f64)
    }

    /// Writes `<stem>.png` (colorized) and `<stem>.json` (raw values).
    pub fn export(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}.png"));
        colorize(self).save_png(&png)?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok((png, json))
    }
}

/// Grad-CAM of `image` for `target_class`, or for the predicted class when
/// `None`.
pub fn grad_cam(checkpoint: &Checkpoint, image_id: &str, image: &Image, target_class: Option<usize>) -> Result<Heatmap> {
    let net = checkpoint.network();
    net.check_input(image)?;
    let trace = net.forward(image);
    let predicted = argmax(&trace.logits);
    let target = target_class.unwrap_or(predicted);
    if target >= net.num_classes() {
        return Err(Error::invalid(
            "class",
            format!("{target} is not a class index below {}", net.num_classes()),
        ));
    }
    let mut onehot = vec![0.0; net.num_classes()];
    onehot[target] = 1.0;
    let grad = net.final_activation_gradient(&trace, &onehot);
    let activation = trace.final_activation();
    let (channels, h, w) = net.final_map_shape();
    let plane = h * w;

    let mut coarse = vec![0.0; plane];
    for k in 0..channels {
        let weight = grad[k * plane..(k + 1) * plane].iter().sum::<f64>() / plane as f64;
        for (c, &a) in coarse.iter_mut().zip(&activation[k * plane..(k + 1) * plane]) {
            *c += weight * a;
        }
    }
    for c in &mut coarse {
        *c = c.max(0.0);
    }

    let up = bilinear_upsample(&coarse, h, w, image.height(), image.width());
    let max = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = up.iter().copied().fold(f64::INFINITY, f64::min);
    let degenerate = !(max - min >= DEGENERATE_RANGE);
    let values = if degenerate {
        vec![0.0; up.len()]
    } else {
        up.iter().map(|&v| ((v - min) / (max - min)).clamp(0.0, 1.0)).collect()
    };
    Ok(Heatmap {
        image_id: image_id.to_owned(),
        method: AttributionMethod::GradCam,
        target_class: target,
        predicted_class: predicted,
        height: image.height(),
        width: image.width(),
        values,
        raw_max: max,
        degenerate,
        coarse_height: h,
        coarse_width: w,
        coarse,
    })
}

/// Bilinear resize with edge clamping. With scale `r = out / in`, input
/// sample `i` lands on output pixel `i·r + ⌊r/2⌋`, which lies inside the
/// sample's own cell, so every input value appears exactly once in its cell
/// and the output maximum sits in the cell of the input maximum. For odd
/// integer scales this is the usual half-pixel-center mapping.
pub fn bilinear_upsample(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |o: usize, in_len: usize, out_len: usize| -> (usize, usize, f64) {
        let r = out_len as f64 / in_len as f64;
        let s = ((o as f64 - (r / 2.0).floor()) / r).max(0.0);
        let i0 = (s.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ty) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = axis(x, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - tx) + map[y0 * w + x1] * tx;
            let bottom = map[y1 * w + x0] * (1.0 - tx) + map[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Stops of the color ramp: blue (low) through cyan, green and yellow to red
/// (high).
pub const RAMP: [(f64, [f64; 3]); 5] = [
    (0.00, [0.0, 0.0, 1.0]),
    (0.25, [0.0, 1.0, 1.0]),
    (0.50, [0.0, 1.0, 0.0]),
    (0.75, [1.0, 1.0, 0.0]),
    (1.00, [1.0, 0.0, 0.0]),
];

/// Piecewise-linear lookup into [`RAMP`].
pub fn ramp_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    for pair in RAMP.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = (v - a) / (b - a);
            return std::array::from_fn(|c| ca[c] + t * (cb[c] - ca[c]));
        }
    }
    RAMP[RAMP.len() - 1].1
}

pub fn colorize(heatmap: &Heatmap) -> Image {
    let mut img = Image::filled(heatmap.height, heatmap.width, [0.0; 3]);
    for y in 0..heatmap.height {
        for x in 0..heatmap.width {
            let rgb = ramp_color(heatmap.get(y, x));
            for (c, v) in rgb.into_iter().enumerate() {
                img.set(c, y, x, v);
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub original: Image,
    pub heatmap: Image,
    pub blend: Image,
}

/// `(original, colorized heatmap, (1 - alpha) · original + alpha · color)`.
pub fn overlay(image: &Image, heatmap: &Heatmap, alpha: f64) -> Result<Overlay> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", format!("{alpha} is outside [0, 1]")));
    }
    if image.height() != heatmap.height || image.width() != heatmap.width {
        return Err(Error::shape(
            format!("{}x{}", heatmap.height, heatmap.width),
            format!("{}x{}", image.height(), image.width()),
        ));
    }
    let colored = colorize(heatmap);
    let data = image
        .data()
        .iter()
        .zip(colored.data())
        .map(|(&o, &c)| (1.0 - alpha) * o + alpha * c)
        .collect();
    Ok(Overlay {
        original: image.clone(),
        heatmap: colored,
        blend: Image::new(image.height(), image.width(), data)?,
    })
}
