//! Gradient-weighted class activation maps for segmentation concepts.
//!
//! Gradients are produced outside this crate, with the concept score taken as
//! the sum of the concept's output activation over the pixels labeled with it.

use serde::{Deserialize, Serialize};

use crate::activation::ActivationSet;
use crate::colormap::VIRIDIS;
use crate::error::{DumpRef, Error, Result};
use crate::manifest::ProbeManifest;
use crate::npy;
use crate::resample::Bilinear;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    pub concept: i32,
    pub sample: String,
    pub layer: String,
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
}

/// Grad-CAM: channel weights are spatially averaged gradients, the map is the
/// ReLU of the weighted channel sum, upsampled and min-max normalized.
pub fn grad_cam(a: &FeatureMap, g: &FeatureMap, out_shape: (usize, usize)) -> Result<Vec<f64>> {
    if a.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "activation {:?} and gradient {:?} differ",
            a.shape(),
            g.shape()
        )));
    }
    let plane = a.plane_len();
    let mut raw = vec![0.0f64; plane];
    for k in 0..a.channels {
        let weight = g.channel(k).iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        if weight == 0.0 {
            continue;
        }
        for (r, &v) in raw.iter_mut().zip(a.channel(k)) {
            *r += weight * v as f64;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let up = Bilinear::new((a.height, a.width), out_shape).forward(&raw);
    Ok(normalize(up))
}

/// Min-max normalization; an identically zero map stays zero and any other
/// constant map becomes all ones.
fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if v.is_empty() || hi <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else if hi - lo <= f64::EPSILON * hi {
        v.iter_mut().for_each(|x| *x = 1.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    }
    v
}

impl CamMap {
    pub fn compute(
        concept: i32,
        sample: &str,
        layer: &str,
        a: &FeatureMap,
        g: &FeatureMap,
        out_shape: (usize, usize),
    ) -> Result<CamMap> {
        Ok(CamMap {
            concept,
            sample: sample.to_string(),
            layer: layer.to_string(),
            height: out_shape.0,
            width: out_shape.1,
            values: grad_cam(a, g, out_shape)?,
        })
    }
}

/// CAM of `concept` on sample `i` of `acts`, from the dumped gradient,
/// at the manifest's label resolution.
pub fn cam_for_sample(m: &ProbeManifest, acts: &ActivationSet, concept: i32, i: usize) -> Result<CamMap> {
    let sample = &acts.samples()[i];
    let path = m.gradient_path(acts.model_key(), acts.layer_key(), concept, sample);
    if !path.is_file() {
        return Err(Error::MissingDump(vec![DumpRef {
            model: acts.model_key().to_string(),
            layer: acts.layer_key().to_string(),
            sample: sample.clone(),
            path,
        }]));
    }
    let g = FeatureMap::try_from(npy::read_tensor(&path)?)?;
    let a = acts.get(i)?;
    let out = (m.label_shape[0], m.label_shape[1]);
    CamMap::compute(concept, sample, acts.layer_key(), &a, &g, out)
}

/// Optional backdrop for a heatmap: grayscale `(h, w)` or RGB `(h, w, 3)` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Underlay {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Underlay {
    fn rgb(&self, p: usize) -> [u8; 3] {
        if self.channels == 1 {
            [self.data[p]; 3]
        } else {
            [self.data[3 * p], self.data[3 * p + 1], self.data[3 * p + 2]]
        }
    }
}

impl TryFrom<&crate::tensor::Tensor> for Underlay {
    type Error = Error;

    fn try_from(t: &crate::tensor::Tensor) -> Result<Self> {
        let data = t
            .as_u8()
            .ok_or_else(|| Error::Shape("underlay must be uint8".into()))?
            .to_vec();
        match *t.shape() {
            [h, w] => Ok(Underlay {
                height: h,
                width: w,
                channels: 1,
                data,
            }),
            [h, w, 3] => Ok(Underlay {
                height: h,
                width: w,
                channels: 3,
                data,
            }),
            ref s => Err(Error::Shape(format!("underlay shape {s:?} is not (h, w) or (h, w, 3)"))),
        }
    }
}

/// Map a value in `[0, 1]` to an 8-bit viridis color.
pub fn colormap(v: f64) -> [u8; 3] {
    let idx = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    VIRIDIS[idx]
}

/// Color a CAM and, with an underlay, blend the two half and half.
pub fn render_rgb(c: &CamMap, underlay: Option<&Underlay>) -> Result<Vec<u8>> {
    if let Some(u) = underlay {
        if (u.height, u.width) != (c.height, c.width) {
            return Err(Error::Shape(format!(
                "underlay is {}x{}, map is {}x{}",
                u.height, u.width, c.height, c.width
            )));
        }
    }
    let mut rgb = Vec::with_capacity(c.values.len() * 3);
    for (p, &v) in c.values.iter().enumerate() {
        let color = colormap(v);
        match underlay {
            None => rgb.extend_from_slice(&color),
            Some(u) => {
                let under = u.rgb(p);
                for ch in 0..3 {
                    let blended = 0.5 * color[ch] as f64 + 0.5 * under[ch] as f64;
                    rgb.push(blended.round() as u8);
                }
            }
        }
    }
    Ok(rgb)
}

/// Render to PNG bytes (8-bit RGB).
pub fn render_heatmap(c: &CamMap, underlay: Option<&Underlay>) -> Result<Vec<u8>> {
    let rgb = render_rgb(c, underlay)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, c.width as u32, c.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}
