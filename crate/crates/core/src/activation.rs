//! Lazy, ordered access to one representation's activations over the probe set.

use std::path::PathBuf;
use std::sync::Arc;

use crate::cache::DumpCache;
use crate::error::{Error, Result};
use crate::manifest::ProbeManifest;
use crate::npy;
use crate::tensor::FeatureMap;

pub type FeatureCache = DumpCache<FeatureMap>;

#[derive(Debug, Clone)]
enum Source {
    Dump(Vec<PathBuf>),
    Concat(Box<ActivationSet>, Box<ActivationSet>),
}

/// Activations of one representation for every probe sample, decoded on demand.
///
/// Iteration order is the manifest's sample order.
#[derive(Debug, Clone)]
pub struct ActivationSet {
    name: String,
    model_key: String,
    layer_key: String,
    samples: Vec<String>,
    shape: (usize, usize, usize),
    source: Source,
    cache: Arc<FeatureCache>,
}

/// Open the dumped activations of `(model, layer)`.
pub fn open_activation_set(
    m: &ProbeManifest,
    model: &str,
    layer: &str,
    cache: Arc<FeatureCache>,
) -> Result<ActivationSet> {
    if m.model(model).is_none() {
        return Err(Error::UnknownModel(model.to_string()));
    }
    if !m.has_layer(model, layer) {
        return Err(Error::UnknownLayer {
            model: model.to_string(),
            layer: layer.to_string(),
        });
    }
    let entry = m.layer(layer).expect("checked by has_layer");
    Ok(ActivationSet {
        name: format!("{model}:{layer}"),
        model_key: model.to_string(),
        layer_key: layer.to_string(),
        samples: m.samples.clone(),
        shape: (entry.channels, entry.height, entry.width),
        source: Source::Dump(
            m.samples
                .iter()
                .map(|s| m.activation_path(model, layer, s))
                .collect(),
        ),
        cache,
    })
}

impl ActivationSet {
    /// Channel-wise concatenation `Cat(a, b)`; `a`'s channels come first.
    pub fn concat(a: ActivationSet, b: ActivationSet) -> Result<ActivationSet> {
        if a.samples != b.samples {
            return Err(Error::Shape(format!(
                "cannot concatenate {} and {}: sample lists differ",
                a.name, b.name
            )));
        }
        if (a.shape.1, a.shape.2) != (b.shape.1, b.shape.2) {
            return Err(Error::Shape(format!(
                "cannot concatenate {} ({}x{}) and {} ({}x{})",
                a.name, a.shape.1, a.shape.2, b.name, b.shape.1, b.shape.2
            )));
        }
        if a.shape.0 == 0 || b.shape.0 == 0 {
            return Err(Error::Shape("concatenation needs channels on both sides".into()));
        }
        let name = format!("cat({},{})", a.name, b.name);
        Ok(ActivationSet {
            model_key: "cat".to_string(),
            layer_key: sanitize(&name),
            samples: a.samples.clone(),
            shape: (a.shape.0 + b.shape.0, a.shape.1, a.shape.2),
            cache: Arc::clone(&a.cache),
            name,
            source: Source::Concat(Box::new(a), Box::new(b)),
        })
    }

    /// Selector-style name, e.g. `rgb_sep:layer4` or `cat(a:l4,b:l4)`.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Directory keys used for persisted embeddings.
    pub fn model_key(&self) -> &str {
        &self.model_key
    }

    pub fn layer_key(&self) -> &str {
        &self.layer_key
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(K, h, w)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.0
    }

    /// Decode sample `i`.
    pub fn get(&self, i: usize) -> Result<Arc<FeatureMap>> {
        match &self.source {
            Source::Dump(paths) => {
                let path = &paths[i];
                if let Some(hit) = self.cache.get(path) {
                    return Ok(hit);
                }
                if !path.is_file() {
                    return Err(Error::MissingDump(vec![crate::error::DumpRef {
                        model: self.model_key.clone(),
                        layer: self.layer_key.clone(),
                        sample: self.samples[i].clone(),
                        path: path.clone(),
                    }]));
                }
                let fm = FeatureMap::try_from(npy::read_tensor(path)?)?;
                if fm.shape() != self.shape {
                    return Err(Error::CorruptDump {
                        path: path.clone(),
                        reason: format!(
                            "shape {:?} differs from declared {:?}",
                            fm.shape(),
                            self.shape
                        ),
                    });
                }
                let fm = Arc::new(fm);
                self.cache
                    .insert(path, Arc::clone(&fm), fm.data.len() * 4);
                Ok(fm)
            }
            Source::Concat(a, b) => Ok(Arc::new(a.get(i)?.concat(&*b.get(i)?)?)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Arc<FeatureMap>>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Replace anything outside `[A-Za-z0-9_-]` so a selector can name a directory.
pub fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{generate_probe_dataset, SynthConfig};

    fn fixture() -> (tempfile::TempDir, ProbeManifest) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            samples: 3,
            channels: 4,
            height: 8,
            width: 8,
            label_height: 8,
            label_width: 8,
            concepts: 2,
            layers: 1,
            ..SynthConfig::default()
        };
        let m = generate_probe_dataset(&cfg, dir.path()).unwrap();
        (dir, m)
    }

    #[test]
    fn yields_declared_shape_in_manifest_order() {
        let (_d, m) = fixture();
        let set = open_activation_set(&m, "A_sep", "layer1", Arc::new(FeatureCache::disabled())).unwrap();
        assert_eq!(set.len(), 3);
        for fm in set.iter() {
            assert_eq!(fm.unwrap().shape(), (4, 8, 8));
        }
        assert_eq!(set.samples(), m.samples.as_slice());
    }

    #[test]
    fn unknown_layer_rejected() {
        let (_d, m) = fixture();
        let err = open_activation_set(&m, "A_sep", "layer9", Arc::new(FeatureCache::disabled()));
        assert!(matches!(err, Err(Error::UnknownLayer { .. })));
    }

    #[test]
    fn repeated_iteration_is_identical() {
        let (_d, m) = fixture();
        let set = open_activation_set(&m, "B_sep", "layer1", Arc::new(FeatureCache::new(1 << 20))).unwrap();
        let a: Vec<_> = set.iter().map(|f| f.unwrap().data.clone()).collect();
        let b: Vec<_> = set.iter().map(|f| f.unwrap().data.clone()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn concat_stacks_channels() {
        let (_d, m) = fixture();
        let cache = Arc::new(FeatureCache::disabled());
        let a = open_activation_set(&m, "A_sep", "layer1", cache.clone()).unwrap();
        let b = open_activation_set(&m, "B_sep", "layer1", cache).unwrap();
        let c = ActivationSet::concat(a.clone(), b.clone()).unwrap();
        assert_eq!(c.shape(), (8, 8, 8));
        let fc = c.get(1).unwrap();
        assert_eq!(fc.channel(0), a.get(1).unwrap().channel(0));
        assert_eq!(fc.channel(4), b.get(1).unwrap().channel(0));
        assert_eq!(c.name(), "cat(A_sep:layer1,B_sep:layer1)");
    }
}
