use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::corpus::TokenRole;
use super::probe::{ProbeConfig, ProbeReportRow, SplitSpec};
use crate::attention::site::AttnKind;

/// Layers shown in the compact view.
pub const MAIN_TEXT_LAYERS: [usize; 7] = [3, 6, 9, 10, 12, 14, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub corpus: String,
    pub backbone: String,
    pub kind: AttnKind,
    pub role: Option<TokenRole>,
    pub split: SplitSpec,
    pub classifier: ProbeConfig,
    /// Class words whose feature column is their first subtoken.
    pub multi_token_words: Vec<String>,
    /// Layers whose test split missed a class.
    pub invalid_layers: Vec<usize>,
}

/// Per-class, per-layer probe accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub class_labels: Vec<String>,
    pub layers: Vec<usize>,
    /// `accuracy[class][layer_column]`
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub metadata: ReportMetadata,
}

impl ProbeReport {
    pub fn new(class_labels: Vec<String>, metadata: ReportMetadata) -> Self {
        Self {
            accuracy: vec![Vec::new(); class_labels.len()],
            class_labels,
            layers: Vec::new(),
            metadata,
        }
    }

    pub fn push_layer(&mut self, layer: usize, row: &ProbeReportRow) {
        self.layers.push(layer);
        for (c, col) in self.accuracy.iter_mut().enumerate() {
            col.push(row.per_class.get(c).copied().flatten());
        }
        if !row.valid {
            self.metadata.invalid_layers.push(layer);
        }
    }

    /// Layers of `wanted` present in the report, in report order.
    pub fn shown(&self, wanted: Option<&[usize]>) -> Vec<usize> {
        match wanted {
            Some(w) => self.layers.iter().copied().filter(|l| w.contains(l)).collect(),
            None => self.layers.clone(),
        }
    }

    pub fn get(&self, class: usize, layer: usize) -> Option<f64> {
        let col = self.layers.iter().position(|&l| l == layer)?;
        self.accuracy[class][col]
    }

    /// Mean over the shown layers that have a value.
    pub fn average(&self, class: usize, shown: &[usize]) -> Option<f64> {
        let v: Vec<f64> = shown.iter().filter_map(|&l| self.get(class, l)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn cell(v: Option<f64>, places: usize) -> String {
        v.map_or_else(|| "-".to_string(), |x| format!("{x:.places$}"))
    }

    /// `class,L<n>...,Avg.` with four decimals.
    pub fn to_csv(&self, wanted: Option<&[usize]>) -> String {
        let shown = self.shown(wanted);
        let mut out = String::from("class");
        for l in &shown {
            let _ = write!(out, ",L{l}");
        }
        out.push_str(",Avg.\n");
        for (c, name) in self.class_labels.iter().enumerate() {
            out.push_str(name);
            for &l in &shown {
                let _ = write!(out, ",{}", Self::cell(self.get(c, l), 4));
            }
            let _ = writeln!(out, ",{}", Self::cell(self.average(c, &shown), 4));
        }
        out
    }

    /// Aligned text table with two decimals.
    pub fn to_text(&self, wanted: Option<&[usize]>) -> String {
        let shown = self.shown(wanted);
        let name_w = self.class_labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut out = format!("{:<name_w$}", "class");
        for l in &shown {
            let _ = write!(out, " {:>5}", format!("L{l}"));
        }
        out.push_str("  Avg.\n");
        for (c, name) in self.class_labels.iter().enumerate() {
            let _ = write!(out, "{name:<name_w$}");
            for &l in &shown {
                let _ = write!(out, " {:>5}", Self::cell(self.get(c, l), 2));
            }
            let _ = writeln!(out, " {:>5}", Self::cell(self.average(c, &shown), 2));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> ProbeReport {
        let meta = ReportMetadata {
            corpus: "color_car".into(),
            backbone: "tiny-test".into(),
            kind: AttnKind::Cross,
            role: Some(TokenRole::EditWord),
            split: SplitSpec::default(),
            classifier: ProbeConfig::default(),
            multi_token_words: vec![],
            invalid_layers: vec![],
        };
        let mut r = ProbeReport::new(vec!["red".into(), "blue".into()], meta);
        for (layer, a, b) in [(3, 1.0, 0.5), (4, 0.5, 0.25), (6, 0.0, 0.0)] {
            r.push_layer(
                layer,
                &ProbeReportRow {
                    per_class: vec![Some(a), Some(b)],
                    overall: 0.0,
                    valid: true,
                    note: None,
                },
            );
        }
        r
    }

    #[test]
    fn average_is_row_mean_of_shown_layers() {
        let r = report();
        assert_eq!(r.average(0, &[3, 4, 6]), Some(0.5));
        let shown = r.shown(Some(&MAIN_TEXT_LAYERS));
        assert_eq!(shown, vec![3, 6]);
        assert_eq!(r.average(1, &shown), Some(0.25));
    }

    #[test]
    fn renders_stable_layout() {
        let r = report();
        assert_eq!(
            r.to_csv(Some(&MAIN_TEXT_LAYERS)),
            "class,L3,L6,Avg.\nred,1.0000,0.0000,0.5000\nblue,0.5000,0.0000,0.2500\n"
        );
        assert_eq!(
            r.to_text(None),
            "class    L3    L4    L6  Avg.\nred    1.00  0.50  0.00  0.50\nblue   0.50  0.25  0.00  0.25\n"
        );
    }
}
