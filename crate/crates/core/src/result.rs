//! The user-facing classification result shared by the service and the
//! offline `predict` command.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::Probabilities;
use crate::labels::ClassLabel;
use crate::rewards::{carbon_for, CarbonFactorTable};
use crate::scalar::Scalar;

/// Disposal guidance per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SuggestionMap(pub BTreeMap<ClassLabel, String>);

impl Default for SuggestionMap {
    /// Generic guidance; local recycling rules vary and should override these.
    fn default() -> Self {
        Self(BTreeMap::from([
            (ClassLabel::Cardboard, "Flatten and place in the paper/cardboard recycling bin. Keep it dry.".into()),
            (ClassLabel::Glass, "Rinse and place in the glass recycling bin. Remove lids and corks.".into()),
            (ClassLabel::Metal, "Rinse cans and place them in the metal/packaging recycling bin.".into()),
            (ClassLabel::Paper, "Place clean, dry paper in the paper recycling bin.".into()),
            (ClassLabel::Plastic, "Empty and rinse, then place in the plastics recycling bin if your area accepts it.".into()),
            (ClassLabel::Trash, "Not recyclable: place in general waste.".into()),
        ]))
    }
}

impl SuggestionMap {
    pub fn get(&self, label: ClassLabel) -> &str {
        self.0.get(&label).map(String::as_str).unwrap_or("")
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let map: Self = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        match ClassLabel::ALL.iter().find(|l| !map.0.contains_key(l)) {
            Some(l) => Err(format!("{}: no suggestion for {l}", path.display())),
            None => Ok(map),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub event_id: String,
    pub label: ClassLabel,
    pub confidence: f64,
    pub probabilities: BTreeMap<ClassLabel, f64>,
    pub suggestion: String,
    pub carbon_saved_g: f64,
    pub points_awarded: u64,
    pub factor_table_version: String,
}

impl ClassificationResult {
    /// `label` is the argmax of `probs` (lowest index on ties) and
    /// `confidence` its probability.
    pub fn assemble<T: Scalar>(
        event_id: String,
        probs: &Probabilities<T>,
        suggestions: &SuggestionMap,
        table: &CarbonFactorTable,
        points_awarded: u64,
    ) -> Self {
        let label = probs.label();
        let p = probs.to_f64();
        Self {
            event_id,
            label,
            confidence: p[label.index()],
            probabilities: ClassLabel::ALL.iter().map(|l| (*l, p[l.index()])).collect(),
            suggestion: suggestions.get(label).to_string(),
            carbon_saved_g: carbon_for(label, table),
            points_awarded,
            factor_table_version: table.version.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assembled_fields_agree() {
        let probs = Probabilities::<f32>::from_logits(&[0.1, 3.0, 0.2, 0.0, 0.0, -1.0]);
        let table = CarbonFactorTable::default();
        let r = ClassificationResult::assemble("e1".into(), &probs, &SuggestionMap::default(), &table, 10);
        assert_eq!(r.label, ClassLabel::Glass);
        assert_eq!(r.confidence, r.probabilities[&ClassLabel::Glass]);
        assert_eq!(r.carbon_saved_g, carbon_for(ClassLabel::Glass, &table));
        assert!((r.probabilities.values().sum::<f64>() - 1.0).abs() < 1e-6);
        let json = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = json["probabilities"].as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 6);
        assert_eq!(json["label"], "glass");
    }

    #[test]
    fn default_suggestions_cover_all_classes() {
        let s = SuggestionMap::default();
        assert!(ClassLabel::ALL.iter().all(|l| !s.get(*l).is_empty()));
    }
}
