//! Datasets on disk: a directory with `manifest.json` listing image and
//! annotation files in a fixed order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::density::{generate_density_map, pool_to, GtParams, SceneAnnotation};
use crate::error::{Error, Result};
use crate::format;
use crate::fusion::predicted_count;
use crate::metrics::{count_metrics, MetricReport};
use crate::network::NetworkConfig;
use crate::params::Params;
use crate::synth::{synth_scene, SynthSpec};
use crate::tensor::Tensor;
use crate::train::Sample;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_split")]
    pub split: String,
    pub items: Vec<ManifestEntry>,
}

fn default_split() -> String {
    "train".into()
}

/// A loaded dataset: every image and annotation parsed and checked.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: String,
    pub items: Vec<(PathBuf, PathBuf)>,
    pub images: Vec<Tensor>,
    pub annotations: Vec<SceneAnnotation>,
}

impl Dataset {
    /// Loads `dir/manifest.json` (or a manifest file given directly).
    pub fn load(path: &Path) -> Result<Self> {
        let (root, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST))
        } else {
            let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            (root, path.to_path_buf())
        };
        let manifest: Manifest = format::read_json(&manifest_path)?;
        if manifest.items.is_empty() {
            return Err(Error::arg(format!("{} lists no items", manifest_path.display())));
        }
        let mut ds = Dataset {
            root: root.clone(),
            split: manifest.split,
            items: Vec::new(),
            images: Vec::new(),
            annotations: Vec::new(),
        };
        for entry in manifest.items {
            let img_path = root.join(&entry.image);
            let ann_path = root.join(&entry.annotation);
            let image = format::load_image(&img_path)?;
            let ann = format::load_annotation(&ann_path)?;
            if (image.h(), image.w()) != (ann.height, ann.width) {
                return Err(Error::arg(format!(
                    "{} is {}x{} but {} describes {}x{}",
                    img_path.display(),
                    image.w(),
                    image.h(),
                    ann_path.display(),
                    ann.width,
                    ann.height
                )));
            }
            ds.items.push((img_path, ann_path));
            ds.images.push(image);
            ds.annotations.push(ann);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Training samples with targets pooled to the network's output size.
    pub fn samples(&self, net: &NetworkConfig, gt: &GtParams) -> Result<Vec<Sample>> {
        self.images
            .iter()
            .zip(&self.annotations)
            .map(|(image, ann)| make_sample(net, gt, image.clone(), ann))
            .collect()
    }

    /// Predicted vs annotated counts over the whole dataset, in manifest order.
    pub fn evaluate(&self, net: &NetworkConfig, params: &Params) -> Result<MetricReport> {
        evaluate(net, params, self.images.iter().zip(self.annotations.iter().map(|a| a.count())))
    }
}

pub fn make_sample(net: &NetworkConfig, gt: &GtParams, image: Tensor, ann: &SceneAnnotation) -> Result<Sample> {
    let (oh, ow) = net.output_size(image.h(), image.w())?;
    let full = generate_density_map(ann, gt)?;
    let target = pool_to(&full, oh, ow)?;
    Ok(Sample { image, target })
}

pub fn evaluate<'a>(
    net: &NetworkConfig,
    params: &Params,
    items: impl IntoIterator<Item = (&'a Tensor, usize)>,
) -> Result<MetricReport> {
    let pairs = items
        .into_iter()
        .map(|(image, count)| {
            let density = net.predict(params, image)?;
            Ok((predicted_count(&density)[0], count as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    count_metrics(&pairs)
}

/// Writes `spec.scenes` scenes as `scene_NNNN.pgm` / `scene_NNNN.json` plus a manifest.
pub fn write_synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut items = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        let (image, ann) = synth_scene(spec, i)?;
        let entry = ManifestEntry {
            image: format!("scene_{i:04}.pgm"),
            annotation: format!("scene_{i:04}.json"),
        };
        let pgm = format::encode_pgm(image.plane(0, 0), image.w(), image.h());
        format::write_bytes(&dir.join(&entry.image), &pgm)?;
        format::write_json(&dir.join(&entry.annotation), &ann)?;
        items.push(entry);
    }
    let manifest = Manifest {
        split: default_split(),
        items,
    };
    format::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}
