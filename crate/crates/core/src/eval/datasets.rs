//! The four edit benchmarks as prompt/image pairs.
//!
//! Fake datasets are fully synthetic. Real datasets read their sources from
//! an assets directory:
//!
//! ```text
//! <assets>/car_real/images/*.{png,jpg,jpeg}      source photos, sorted by name
//! <assets>/car_real/source_colors.json            optional {file: color} cache
//! <assets>/imagenet/queries.tsv                   image<TAB>source_label<TAB>target_label
//! <assets>/imagenet/images/...                    paths referenced by queries.tsv
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::clip::ClipEncoder;
use crate::error::{Error, Result};
use crate::io::image::read_rgb;
use crate::probing::corpus::ANIMALS;

pub const EDIT_COLORS: [&str; 28] = [
    "red", "green", "blue", "yellow", "orange", "purple", "pink", "black", "white", "gray", "brown", "beige", "cyan",
    "magenta", "teal", "lime", "olive", "navy", "maroon", "silver", "gold", "bronze", "peach", "coral", "indigo",
    "violet", "turquoise", "chocolate",
];

pub const IMAGENET_TEMPLATES: [&str; 28] = [
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "the photo of a {}",
    "a photo of a clean {}",
    "a photo of a dirty {}",
    "a dark photo of the {}",
    "a photo of my {}",
    "a photo of the cool {}",
    "a close-up photo of a {}",
    "a bright photo of the {}",
    "a cropped photo of a {}",
    "a photo of the {}",
    "a good photo of the {}",
    "a photo of one {}",
    "a close-up photo of the {}",
    "a rendition of the {}",
    "a photo of the clean {}",
    "a rendition of a {}",
    "a photo of a nice {}",
    "a good photo of a {}",
    "a photo of the nice {}",
    "a photo of the small {}",
    "a photo of the weird {}",
    "a photo of the large {}",
    "a photo of a cool {}",
    "a photo of a small {}",
    "a {} in the park",
];

/// Number of ImageNet queries the real and fake ImageNet sets are built from.
pub const IMAGENET_QUERIES: usize = 1092;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    CarFake,
    CarReal,
    ImagenetFake,
    ImagenetReal,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId::CarFake,
        DatasetId::CarReal,
        DatasetId::ImagenetFake,
        DatasetId::ImagenetReal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::CarFake => "car_fake",
            DatasetId::CarReal => "car_real",
            DatasetId::ImagenetFake => "imagenet_fake",
            DatasetId::ImagenetReal => "imagenet_real",
        }
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown dataset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PairSource {
    SeededPrompt { seed: u64, prompt: String },
    Image { path: PathBuf, prompt: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub pair_id: String,
    pub dataset_id: DatasetId,
    pub source: PairSource,
    pub target_prompt: String,
}

impl EditPair {
    pub fn source_prompt(&self) -> &str {
        match &self.source {
            PairSource::SeededPrompt { prompt, .. } | PairSource::Image { prompt, .. } => prompt,
        }
    }
}

/// Debug knobs; defaults build the full datasets.
#[derive(Debug, Clone, Default)]
pub struct DatasetOptions {
    /// Use only the first `n` colors for the car datasets.
    pub color_limit: Option<usize>,
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn missing(root: &Path, files: &[&str]) -> Error {
    Error::MissingAssets {
        root: root.to_path_buf(),
        files: files.iter().map(|s| s.to_string()).collect(),
    }
}

fn colors(opts: &DatasetOptions) -> &'static [&'static str] {
    &EDIT_COLORS[..opts.color_limit.unwrap_or(EDIT_COLORS.len()).min(EDIT_COLORS.len())]
}

fn car_fake(opts: &DatasetOptions) -> Vec<EditPair> {
    let colors = colors(opts);
    let mut pairs = Vec::new();
    for (i, src) in colors.iter().enumerate() {
        for dst in colors.iter().filter(|c| *c != src) {
            pairs.push(EditPair {
                pair_id: format!("car_fake-{:05}", pairs.len()),
                dataset_id: DatasetId::CarFake,
                source: PairSource::SeededPrompt {
                    seed: i as u64,
                    prompt: format!("a {src} car"),
                },
                target_prompt: format!("a {dst} car"),
            });
        }
    }
    pairs
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Source colors for each car photo: the cached file when present,
/// otherwise the encoder's zero-shot argmax over the color prompts.
fn car_colors(
    root: &Path,
    images: &[PathBuf],
    colors: &[&str],
    encoder: Option<&dyn ClipEncoder>,
) -> Result<Vec<String>> {
    let cache = root.join("car_real/source_colors.json");
    if cache.exists() {
        let map: BTreeMap<String, String> = serde_json::from_slice(&std::fs::read(&cache)?)?;
        return images
            .iter()
            .map(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                map.get(name)
                    .filter(|c| colors.contains(&c.as_str()))
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("{} has no usable color for {name}", cache.display())))
            })
            .collect();
    }
    let encoder = encoder.ok_or_else(|| {
        Error::validation("car_real needs a CLIP encoder or car_real/source_colors.json to label source colors")
    })?;
    let text: Vec<Vec<f32>> = colors
        .iter()
        .map(|c| encoder.embed_text(&format!("a {c} car")))
        .collect::<Result<_>>()?;
    images
        .iter()
        .map(|p| {
            let e = encoder.embed_image(&read_rgb(p)?)?;
            let best = text
                .iter()
                .enumerate()
                .map(|(i, t)| (i, super::metrics::cosine(&e, t).unwrap_or(f64::NEG_INFINITY)))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            Ok(colors[best.0].to_string())
        })
        .collect()
}

fn car_real(root: &Path, opts: &DatasetOptions, encoder: Option<&dyn ClipEncoder>) -> Result<Vec<EditPair>> {
    let dir = root.join("car_real/images");
    if !dir.is_dir() {
        return Err(missing(root, &["car_real/images/*.png (Stanford Cars photos)"]));
    }
    let mut images: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(missing(root, &["car_real/images/*.png (Stanford Cars photos)"]));
    }
    let colors = colors(opts);
    let sources = car_colors(root, &images, colors, encoder)?;
    let mut pairs = Vec::new();
    for (path, src) in images.iter().zip(&sources) {
        for dst in colors.iter().filter(|c| **c != src.as_str()) {
            pairs.push(EditPair {
                pair_id: format!("car_real-{:05}", pairs.len()),
                dataset_id: DatasetId::CarReal,
                source: PairSource::Image {
                    path: path.clone(),
                    prompt: format!("a {src} car"),
                },
                target_prompt: format!("a {dst} car"),
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
struct Query {
    image: PathBuf,
    source: String,
    target: String,
}

fn imagenet_queries(root: &Path) -> Result<Vec<Query>> {
    let path = root.join("imagenet/queries.tsv");
    if !path.exists() {
        return Err(missing(root, &["imagenet/queries.tsv (image, source label, target label)"]));
    }
    let text = std::fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::validation(format!(
                "{}:{}: expected 3 tab-separated columns, got {}",
                path.display(),
                n + 1,
                cols.len()
            )));
        }
        out.push(Query {
            image: root.join("imagenet").join(cols[0]),
            source: cols[1].to_string(),
            target: cols[2].to_string(),
        });
    }
    if out.len() != IMAGENET_QUERIES {
        return Err(Error::validation(format!(
            "{} lists {} queries, expected {IMAGENET_QUERIES}",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

fn fill(template: &str, word: &str) -> String {
    template.replace("{}", word)
}

fn imagenet_fake(root: &Path) -> Result<Vec<EditPair>> {
    let queries = imagenet_queries(root)?;
    let mut labels: Vec<(String, String)> = queries.into_iter().map(|q| (q.source, q.target)).collect();
    for src in ANIMALS {
        for dst in ANIMALS.iter().filter(|d| **d != src) {
            labels.push((src.to_string(), dst.to_string()));
        }
    }
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, (src, dst))| {
            let template = IMAGENET_TEMPLATES[i % IMAGENET_TEMPLATES.len()];
            EditPair {
                pair_id: format!("imagenet_fake-{i:05}"),
                dataset_id: DatasetId::ImagenetFake,
                source: PairSource::SeededPrompt {
                    seed: i as u64,
                    prompt: fill(template, &src),
                },
                target_prompt: fill(template, &dst),
            }
        })
        .collect())
}

fn imagenet_real(root: &Path) -> Result<Vec<EditPair>> {
    let queries = imagenet_queries(root)?;
    let absent: Vec<String> = queries
        .iter()
        .filter(|q| !q.image.exists())
        .map(|q| q.image.display().to_string())
        .collect();
    if !absent.is_empty() {
        return Err(Error::MissingAssets {
            root: root.to_path_buf(),
            files: absent,
        });
    }
    Ok(queries
        .into_iter()
        .enumerate()
        .map(|(i, q)| EditPair {
            pair_id: format!("imagenet_real-{i:05}"),
            dataset_id: DatasetId::ImagenetReal,
            source: PairSource::Image {
                path: q.image,
                prompt: format!("a photo of {} {}", article(&q.source), q.source),
            },
            target_prompt: format!("a photo of {} {}", article(&q.target), q.target),
        })
        .collect())
}

/// Builds a dataset in a fixed order.
pub fn build_dataset(
    id: DatasetId,
    assets_dir: &Path,
    opts: &DatasetOptions,
    encoder: Option<&dyn ClipEncoder>,
) -> Result<Vec<EditPair>> {
    match id {
        DatasetId::CarFake => Ok(car_fake(opts)),
        DatasetId::CarReal => car_real(assets_dir, opts, encoder),
        DatasetId::ImagenetFake => imagenet_fake(assets_dir),
        DatasetId::ImagenetReal => imagenet_real(assets_dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn car_fake_counts() {
        let full = build_dataset(DatasetId::CarFake, Path::new("/nonexistent"), &DatasetOptions::default(), None).unwrap();
        assert_eq!(full.len(), 756);
        assert_eq!(full[0].target_prompt, "a green car");
        let small = build_dataset(
            DatasetId::CarFake,
            Path::new("/nonexistent"),
            &DatasetOptions { color_limit: Some(2) },
            None,
        )
        .unwrap();
        assert_eq!(small.len(), 2);
    }

    #[test]
    fn missing_assets_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        for id in [DatasetId::CarReal, DatasetId::ImagenetFake, DatasetId::ImagenetReal] {
            let err = build_dataset(id, dir.path(), &DatasetOptions::default(), None).unwrap_err();
            assert!(matches!(err, Error::MissingAssets { .. }), "{id:?}: {err}");
        }
    }

    #[test]
    fn article_follows_vowels() {
        assert_eq!(article("otter"), "an");
        assert_eq!(article("dog"), "a");
    }
}
