//! Linear centered kernel alignment between representations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{open_activation_set, ActivationSet, FeatureCache};
use crate::error::{Error, Result};
use crate::manifest::ProbeManifest;

/// How a `(K, h, w)` activation becomes rows of a feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One row per sample: per-channel global average.
    #[default]
    SpatialMean,
    /// One row per sample: every activation value.
    Flatten,
    /// `k` rows per sample, at seeded random spatial positions.
    Subsample { k: usize, seed: u64 },
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pooling::SpatialMean => f.write_str("spatial_mean"),
            Pooling::Flatten => f.write_str("flatten"),
            Pooling::Subsample { k, seed } => write!(f, "subsample:{k}:{seed}"),
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;

    /// `spatial_mean`, `flatten`, or `subsample:<k>[:<seed>]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown pooling '{s}'"));
        match s {
            "spatial_mean" => Ok(Pooling::SpatialMean),
            "flatten" => Ok(Pooling::Flatten),
            _ => {
                let mut parts = s.split(':');
                if parts.next() != Some("subsample") {
                    return Err(bad());
                }
                let k = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .filter(|&k: &usize| k > 0)
                    .ok_or_else(bad)?;
                let seed = match parts.next() {
                    Some(v) => v.parse().map_err(|_| bad())?,
                    None => 0,
                };
                if parts.next().is_some() {
                    return Err(bad());
                }
                Ok(Pooling::Subsample { k, seed })
            }
        }
    }
}

/// Row-major `rows × cols` matrix of features, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub pooling: Pooling,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateFeatures("non-finite feature value".into()));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            data,
            pooling: Pooling::Flatten,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn centered(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= self.rows as f64);
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(self.cols) {
            for (v, m) in row.iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }
}

/// Pool an activation set into a feature matrix (rows in sample order).
pub fn feature_matrix(acts: &ActivationSet, pooling: Pooling) -> Result<FeatureMatrix> {
    let (k, h, w) = acts.shape();
    let plane = h * w;
    let (rows, cols) = match pooling {
        Pooling::SpatialMean => (acts.len(), k),
        Pooling::Flatten => (acts.len(), k * plane),
        Pooling::Subsample { k: per, .. } => (acts.len() * per, k),
    };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..acts.len() {
        let a = acts.get(i)?;
        match pooling {
            Pooling::SpatialMean => {
                for c in 0..k {
                    let s: f64 = a.channel(c).iter().map(|&v| v as f64).sum();
                    data.push(s / plane as f64);
                }
            }
            Pooling::Flatten => data.extend(a.data.iter().map(|&v| v as f64)),
            Pooling::Subsample { k: per, seed } => {
                // positions depend only on (seed, sample index, h, w), so two
                // representations of equal spatial size share them
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                for _ in 0..per {
                    let p = rng.random_range(0..plane);
                    for c in 0..k {
                        data.push(a.channel(c)[p] as f64);
                    }
                }
            }
        }
    }
    let mut m = FeatureMatrix::new(rows, cols, data)?;
    m.pooling = pooling;
    Ok(m)
}

/// Frobenius norm squared of `A'B` for column-centered `a` (n×da), `b` (n×db),
/// summed in an order that does not depend on argument order.
fn cross_frobenius_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut m = vec![0.0f64; da * db];
    for i in 0..n {
        let ra = &a[i * da..(i + 1) * da];
        let rb = &b[i * db..(i + 1) * db];
        for (p, &x) in ra.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut m[p * db..(p + 1) * db];
            for (acc, &y) in row.iter_mut().zip(rb) {
                *acc += x * y;
            }
        }
    }
    let by_rows: f64 = m.iter().map(|v| v * v).sum();
    let mut by_cols = 0.0;
    for q in 0..db {
        for p in 0..da {
            let v = m[p * db + q];
            by_cols += v * v;
        }
    }
    0.5 * (by_rows + by_cols)
}

fn gram(a: &[f64], d: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = a[i * d..(i + 1) * d]
                .iter()
                .zip(&a[j * d..(j + 1) * d])
                .map(|(x, y)| x * y)
                .sum();
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    g
}

/// `‖Y'X‖_F² / (‖X'X‖_F · ‖Y'Y‖_F)` on column-centered inputs, clamped to `[0, 1]`.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::Shape(format!(
            "CKA needs equal sample counts, got {} and {}",
            x.rows, y.rows
        )));
    }
    let n = x.rows;
    if n < 2 {
        return Err(Error::DegenerateFeatures(format!(
            "CKA needs at least 2 samples, got {n}"
        )));
    }
    let xc = x.centered();
    let yc = y.centered();
    let (hsic, nx, ny) = if x.cols.max(y.cols) < n {
        (
            cross_frobenius_sq(&xc, x.cols, &yc, y.cols, n),
            cross_frobenius_sq(&xc, x.cols, &xc, x.cols, n).sqrt(),
            cross_frobenius_sq(&yc, y.cols, &yc, y.cols, n).sqrt(),
        )
    } else {
        let gx = gram(&xc, x.cols, n);
        let gy = gram(&yc, y.cols, n);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        (dot(&gx, &gy), dot(&gx, &gx).sqrt(), dot(&gy, &gy).sqrt())
    };
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateFeatures(
            "a representation has zero variance across samples".into(),
        ));
    }
    Ok((hsic / (nx * ny)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCka {
    pub layer: String,
    pub cka: f64,
}

/// CKA between two models, layer by layer.
pub fn cka_cross_modal(
    m: &ProbeManifest,
    model_a: &str,
    model_b: &str,
    layers: &[String],
    pooling: Pooling,
    cache: std::sync::Arc<FeatureCache>,
) -> Result<Vec<LayerCka>> {
    layers
        .iter()
        .map(|layer| {
            let a = feature_matrix(&open_activation_set(m, model_a, layer, cache.clone())?, pooling)?;
            let b = feature_matrix(&open_activation_set(m, model_b, layer, cache.clone())?, pooling)?;
            Ok(LayerCka {
                layer: layer.clone(),
                cka: linear_cka(&a, &b)?,
            })
        })
        .collect()
}

/// Per-layer change between two cross-modal CKA curves (`second - first`).
pub fn cka_delta(first: &[LayerCka], second: &[LayerCka]) -> Result<Vec<LayerCka>> {
    if first.len() != second.len() || first.iter().zip(second).any(|(a, b)| a.layer != b.layer) {
        return Err(Error::Shape("CKA curves cover different layers".into()));
    }
    Ok(first
        .iter()
        .zip(second)
        .map(|(a, b)| LayerCka {
            layer: a.layer.clone(),
            cka: b.cka - a.cka,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major values.
    pub values: Vec<f64>,
}

impl CkaMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols.len() + j]
    }
}

/// Symmetric layer-by-layer CKA matrix of one model.
pub fn cka_cross_level(
    m: &ProbeManifest,
    model: &str,
    layers: &[String],
    pooling: Pooling,
    cache: std::sync::Arc<FeatureCache>,
) -> Result<CkaMatrix> {
    let mats: Vec<FeatureMatrix> = layers
        .iter()
        .map(|l| feature_matrix(&open_activation_set(m, model, l, cache.clone())?, pooling))
        .collect::<Result<_>>()?;
    cka_matrix_of(layers, &mats)
}

pub(crate) fn cka_matrix_of(names: &[String], mats: &[FeatureMatrix]) -> Result<CkaMatrix> {
    let n = mats.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = linear_cka(&mats[i], &mats[j])?;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(CkaMatrix {
        rows: names.to_vec(),
        cols: names.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        FeatureMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn pooling_parse_roundtrip() {
        for s in ["spatial_mean", "flatten", "subsample:3:9"] {
            assert_eq!(s.parse::<Pooling>().unwrap().to_string(), s);
        }
        assert_eq!(
            "subsample:2".parse::<Pooling>().unwrap(),
            Pooling::Subsample { k: 2, seed: 0 }
        );
        assert!("subsample:0".parse::<Pooling>().is_err());
        assert!("mean".parse::<Pooling>().is_err());
    }

    #[test]
    fn self_and_scaled_similarity() {
        let x = random(20, 5, 1);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let y = FeatureMatrix::new(20, 5, x.data.iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gram_and_feature_routes_agree() {
        // 6 samples: 3 features uses the feature route, 9 the Gram route
        let x = random(6, 3, 2);
        let y = random(6, 9, 3);
        let y_small = random(6, 4, 3);
        let a = linear_cka(&x, &y).unwrap();
        assert!((0.0..=1.0).contains(&a));
        // force both routes on the same data by padding with zero columns
        let pad = |m: &FeatureMatrix, extra: usize| {
            let mut d = Vec::new();
            for i in 0..m.rows {
                d.extend_from_slice(m.row(i));
                d.extend(std::iter::repeat_n(0.0, extra));
            }
            FeatureMatrix::new(m.rows, m.cols + extra, d).unwrap()
        };
        let feat = linear_cka(&x, &y_small).unwrap();
        let gram = linear_cka(&pad(&x, 6), &pad(&y_small, 6)).unwrap();
        assert!((feat - gram).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_and_zero_variance() {
        let x = random(1, 3, 4);
        assert!(matches!(linear_cka(&x, &x), Err(Error::DegenerateFeatures(_))));
        let c = FeatureMatrix::new(4, 2, vec![1.0; 8]).unwrap();
        let y = random(4, 2, 5);
        assert!(matches!(linear_cka(&c, &y), Err(Error::DegenerateFeatures(_))));
    }

    #[test]
    fn independent_features_are_less_similar() {
        let x = random(200, 3, 6);
        let y = random(200, 3, 7);
        let v = linear_cka(&x, &y).unwrap();
        assert!(v < 0.2 && v > 0.0, "{v}");
    }

    #[test]
    fn shared_signal_decreases_with_noise_dimension() {
        // column 0 shared, remaining columns independent noise
        let n = 60;
        let shared = random(n, 1, 10);
        let mut prev = 1.0;
        for extra in [1usize, 4, 16] {
            let na = random(n, extra, 11 + extra as u64);
            let nb = random(n, extra, 101 + extra as u64);
            let build = |noise: &FeatureMatrix| {
                let mut d = Vec::new();
                for i in 0..n {
                    d.push(shared.data[i]);
                    d.extend_from_slice(noise.row(i));
                }
                FeatureMatrix::new(n, 1 + extra, d).unwrap()
            };
            let v = linear_cka(&build(&na), &build(&nb)).unwrap();
            assert!(v > 0.0 && v < 1.0);
            assert!(v < prev, "{v} !< {prev} at {extra}");
            prev = v;
        }
    }

    #[test]
    fn cross_level_matrix_on_noisy_stack() {
        // layer i = layer i-1 + independent noise
        let n = 100;
        let mut layers = vec![random(n, 4, 20)];
        for i in 1..4 {
            let noise = random(n, 4, 21 + i);
            let prev = layers.last().unwrap();
            let d = prev.data.iter().zip(&noise.data).map(|(a, b)| a + 0.8 * b).collect();
            layers.push(FeatureMatrix::new(n, 4, d).unwrap());
        }
        let names: Vec<String> = (1..=4).map(|i| format!("l{i}")).collect();
        let m = cka_matrix_of(&names, &layers).unwrap();
        for i in 0..4 {
            assert!((m.get(i, i) - 1.0).abs() < 1e-6);
            for j in 0..4 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        for d in 1..3 {
            assert!(m.get(0, d) > m.get(0, d + 1));
        }
        let one = cka_matrix_of(&names[..1], &layers[..1]).unwrap();
        assert_eq!(one.values.len(), 1);
        assert!((one.values[0] - 1.0).abs() < 1e-6);
    }
}
