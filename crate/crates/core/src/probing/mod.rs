pub mod corpus;
pub mod harvest;
pub mod probe;
pub mod report;

pub use corpus::{build_corpus, PromptCorpus, RenderedPrompt, TemplateFamily, TokenRole};
pub use harvest::{harvest, load_dataset, FeatureKey, HarvestConfig, HarvestManifest, ProbeDataset};
pub use probe::{
    evaluate, sanity_gate, stratified_split, train_probe, ProbeConfig, ProbeModel, ProbeReportRow, SanityResult,
    SplitSpec,
};
pub use report::{ProbeReport, ReportMetadata, MAIN_TEXT_LAYERS};

use crate::attention::site::AttnKind;
use crate::error::{Error, Result};

/// Trains one probe per layer of `kind` (at `role` for cross maps) and
/// collects the per-class accuracies.
pub fn probe_table(
    dataset: &ProbeDataset,
    manifest: &HarvestManifest,
    kind: AttnKind,
    role: Option<TokenRole>,
    split: SplitSpec,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let role = match kind {
        AttnKind::Cross => Some(role.unwrap_or(TokenRole::EditWord)),
        AttnKind::SelfAttn => None,
    };
    let meta = ReportMetadata {
        corpus: manifest.family.to_string(),
        backbone: manifest.backbone.clone(),
        kind,
        role,
        split,
        classifier: cfg.clone(),
        multi_token_words: manifest.multi_token_words.clone(),
        invalid_layers: Vec::new(),
    };
    let mut report = ProbeReport::new(dataset.class_labels.clone(), meta);
    let keys: Vec<FeatureKey> = dataset
        .features
        .keys()
        .filter(|k| k.kind == kind && k.role == role)
        .copied()
        .collect();
    if keys.is_empty() {
        return Err(Error::validation(format!(
            "dataset has no {} features{}",
            kind.as_str(),
            role.map(|r| format!(" for {}", r.as_str())).unwrap_or_default()
        )));
    }
    for key in keys {
        let (_, row) = train_probe(
            dataset.features(key)?,
            &dataset.labels,
            dataset.class_labels.len(),
            split,
            cfg,
        )?;
        report.push_layer(key.layer, &row);
    }
    Ok(report)
}

/// Probes the cross maps of a non-edit token (`article_a` or `noun_car`).
pub fn token_probe(
    dataset: &ProbeDataset,
    manifest: &HarvestManifest,
    role: TokenRole,
    split: SplitSpec,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    probe_table(dataset, manifest, AttnKind::Cross, Some(role), split, cfg)
}

/// Scores a probe trained on one corpus against another corpus's features
/// at the same layer.
pub fn evaluate_transfer(model: &ProbeModel, dataset: &ProbeDataset, key: FeatureKey) -> Result<ProbeReportRow> {
    let features = dataset.features(key)?;
    if let Some(f) = features.first() {
        if f.len() != model.input_dim {
            return Err(Error::Shape(format!(
                "transfer at {}: probe expects {} features, dataset has {}",
                key.name(),
                model.input_dim,
                f.len()
            )));
        }
    }
    evaluate(model, features, &dataset.labels)
}
