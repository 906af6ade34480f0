//! Algorithm descriptors used by the server to pick a training method.

use super::FedError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const BUILTIN: &str = include_str!("../../assets/registry.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Classical,
    Personalized,
    Regularization,
    Distillation,
    DomainGeneralization,
    OptimizationScheduling,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Classical,
        Family::Personalized,
        Family::Regularization,
        Family::Distillation,
        Family::DomainGeneralization,
        Family::OptimizationScheduling,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmDescriptor {
    pub id: String,
    pub name: String,
    pub family: Family,
    pub description: String,
    pub tags: Vec<String>,
    pub executable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub schema_version: u32,
    pub capacity: usize,
    pub algorithms: Vec<AlgorithmDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub id: String,
    pub rationale: String,
}

/// Keyword → tag table for free-text preferences.
const PREFERENCE_TAGS: &[(&str, &str)] = &[
    ("baseline", "baseline"),
    ("personaliz", "personalization"),
    ("personalis", "personalization"),
    ("non-iid", "non_iid_robustness"),
    ("non iid", "non_iid_robustness"),
    ("noniid", "non_iid_robustness"),
    ("drift", "client_drift"),
    ("convergence", "convergence_stability"),
    ("stability", "convergence_stability"),
    ("heterogene", "heterogeneity"),
    ("domain", "domain_generalization"),
    ("model-agnostic", "model_agnostic"),
];

/// Tags implied by a free-text preference string.
pub fn preference_tags(preferences: &str) -> BTreeSet<&'static str> {
    let lower = preferences.to_ascii_lowercase();
    PREFERENCE_TAGS
        .iter()
        .filter(|(kw, _)| lower.contains(kw))
        .map(|(_, tag)| *tag)
        .collect()
}

impl Registry {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled registry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, FedError> {
        let reg: Registry =
            serde_json::from_str(text).map_err(|e| FedError::InvalidConfig(format!("registry: {e}")))?;
        if reg.algorithms.len() > reg.capacity {
            return Err(FedError::InvalidConfig("registry exceeds its capacity".into()));
        }
        let mut ids = BTreeSet::new();
        for a in &reg.algorithms {
            if !ids.insert(a.id.to_ascii_lowercase()) {
                return Err(FedError::InvalidConfig(format!("duplicate registry id {}", a.id)));
            }
        }
        Ok(reg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    /// Case-insensitive id lookup.
    pub fn get(&self, id: &str) -> Option<&AlgorithmDescriptor> {
        self.algorithms.iter().find(|a| a.id.eq_ignore_ascii_case(id.trim()))
    }

    pub fn executable_ids(&self) -> Vec<String> {
        self.algorithms.iter().filter(|a| a.executable).map(|a| a.id.clone()).collect()
    }

    /// Entries matching every given tag and containing `text` (case-insensitive)
    /// in the id, name, family or description. Empty filters match all.
    pub fn query(&self, text: &str, tags: &[String]) -> Vec<&AlgorithmDescriptor> {
        let needle = text.trim().to_ascii_lowercase();
        self.algorithms
            .iter()
            .filter(|a| tags.iter().all(|t| a.tags.iter().any(|x| x.eq_ignore_ascii_case(t))))
            .filter(|a| {
                needle.is_empty()
                    || a.id.to_ascii_lowercase().contains(&needle)
                    || a.name.to_ascii_lowercase().contains(&needle)
                    || a.description.to_ascii_lowercase().contains(&needle)
                    || serde_json::to_string(&a.family).unwrap().contains(&needle)
            })
            .collect()
    }

    /// Acceptable ids for a preference string: entries carrying any implied
    /// tag, or the executable classical entries when no tag is implied.
    pub fn suitable_for(&self, preferences: &str) -> BTreeSet<String> {
        let tags = preference_tags(preferences);
        self.algorithms
            .iter()
            .filter(|a| {
                if tags.is_empty() {
                    a.executable && a.family == Family::Classical
                } else {
                    a.tags.iter().any(|t| tags.contains(t.as_str()))
                }
            })
            .map(|a| a.id.clone())
            .collect()
    }
}

/// Picks the first executable entry, in registry order, of the suitable set.
pub fn select_algorithm(preferences: &str, registry: &Registry) -> Result<Selection, FedError> {
    let suitable = registry.suitable_for(preferences);
    let tags = preference_tags(preferences);
    let pick = registry
        .algorithms
        .iter()
        .find(|a| a.executable && suitable.contains(&a.id))
        .ok_or_else(|| FedError::UnknownAlgorithm(preferences.to_string()))?;
    let rationale = if tags.is_empty() {
        format!("no stated preference; {} is an executable classical method", pick.id)
    } else {
        let matched: Vec<&str> = pick.tags.iter().map(String::as_str).filter(|t| tags.contains(t)).collect();
        format!("{} matches preference tags {}", pick.id, matched.join(", "))
    };
    Ok(Selection {
        id: pick.id.clone(),
        rationale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn builtin_covers_families_and_executables() {
        let reg = Registry::builtin();
        assert!(reg.algorithms.len() >= 13);
        assert_eq!(reg.capacity, 40);
        for f in Family::ALL {
            assert!(reg.algorithms.iter().any(|a| a.family == f), "{f:?}");
        }
        assert_eq!(
            reg.executable_ids().into_iter().collect::<BTreeSet<_>>(),
            set(&["FedAvg", "FedProx", "SCAFFOLD", "FedNova", "Ditto"])
        );
    }

    #[test]
    fn suitable_sets_follow_tags() {
        let reg = Registry::builtin();
        assert_eq!(
            reg.suitable_for("personalization desired"),
            set(&["Ditto", "pFedMe", "Per-FedAvg", "FedRep"])
        );
        assert_eq!(reg.suitable_for("baseline aggregation"), set(&["FedAvg"]));
        assert_eq!(reg.suitable_for(""), set(&["FedAvg", "FedProx", "SCAFFOLD"]));
    }

    #[test]
    fn every_preference_has_an_executable_choice() {
        let reg = Registry::builtin();
        for pref in [
            "",
            "baseline aggregation",
            "personalization desired",
            "non-IID robustness",
            "client drift correction",
            "convergence stability",
        ] {
            let sel = select_algorithm(pref, &reg).unwrap();
            assert!(reg.suitable_for(pref).contains(&sel.id), "{pref}");
            assert!(reg.get(&sel.id).unwrap().executable);
        }
    }

    #[test]
    fn query_filters() {
        let reg = Registry::builtin();
        assert_eq!(reg.query("", &[]).len(), reg.algorithms.len());
        let ids: Vec<_> = reg.query("", &["client_drift".into()]).iter().map(|a| a.id.clone()).collect();
        assert_eq!(ids, vec!["FedProx", "SCAFFOLD"]);
        assert_eq!(reg.query("distill", &[]).len(), 1);
        assert!(reg.get("scaffold").is_some());
    }

    #[test]
    fn rejects_duplicates_and_overflow() {
        let mut reg = Registry::builtin();
        reg.algorithms.push(reg.algorithms[0].clone());
        assert!(Registry::from_json(&reg.to_json()).is_err());
        let mut reg = Registry::builtin();
        reg.capacity = 3;
        assert!(Registry::from_json(&reg.to_json()).is_err());
    }
}
