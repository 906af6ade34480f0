//! Imaging modalities, their intensity bands, and the fixed fine-grained
//! label vocabularies with their coarse harmonization targets.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Dermatoscopy,
    Ultrasound,
    Fundus,
    Histopathology,
    Mri,
    Xray,
}

/// Spacing between neighbouring modality band centres.
pub const BAND_SPACING: f64 = 35.0;
/// Stddev of per-image mean brightness around the band centre.
pub const BAND_STDDEV: f64 = 1.5;
/// Per-image mean deviation from the dataset median beyond which an image is
/// treated as belonging to another modality (half the band spacing).
pub const OFF_MODALITY_THRESHOLD: f64 = BAND_SPACING / 2.0;

impl Modality {
    pub const ALL: [Modality; 6] = [
        Self::Dermatoscopy,
        Self::Ultrasound,
        Self::Fundus,
        Self::Histopathology,
        Self::Mri,
        Self::Xray,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dermatoscopy => "dermatoscopy",
            Self::Ultrasound => "ultrasound",
            Self::Fundus => "fundus",
            Self::Histopathology => "histopathology",
            Self::Mri => "mri",
            Self::Xray => "xray",
        }
    }

    /// Short prefix used when naming datasets.
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Dermatoscopy => "derm",
            Self::Ultrasound => "us",
            Self::Fundus => "fundus",
            Self::Histopathology => "histo",
            Self::Mri => "mri",
            Self::Xray => "cxr",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }

    /// Intensity band `(mean, stddev)` of per-image mean brightness.
    pub fn band(self) -> (f64, f64) {
        (40.0 + BAND_SPACING * self.index() as f64, BAND_STDDEV)
    }

    pub fn vocabulary(self) -> &'static Vocabulary {
        &VOCABULARIES[self.index()]
    }

    /// Short natural-language label for the target application.
    pub fn application(self) -> &'static str {
        match self {
            Self::Dermatoscopy => "skin lesion malignancy classification",
            Self::Ultrasound => "breast ultrasound lesion classification",
            Self::Fundus => "diabetic retinopathy referral screening",
            Self::Histopathology => "breast histopathology tumor classification",
            Self::Mri => "brain MRI tumor detection",
            Self::Xray => "chest X-ray pneumonia detection",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '_', ' '], "");
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == norm || (norm == "dermatology" && *m == Self::Dermatoscopy))
            .ok_or_else(|| format!("unknown modality `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Segmentation,
    Detection,
    Regression,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        Self::Classification,
        Self::Segmentation,
        Self::Detection,
        Self::Regression,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Classification => "classification",
            Self::Segmentation => "segmentation",
            Self::Detection => "detection",
            Self::Regression => "regression",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| format!("unknown task kind `{s}`"))
    }
}

/// Fine-grained class names of one modality and the coarse class each maps to.
#[derive(Debug)]
pub struct Vocabulary {
    pub coarse: &'static [&'static str],
    pub fine: &'static [(&'static str, &'static str)],
}

impl Vocabulary {
    pub fn coarse_of(&self, fine: &str) -> Option<&'static str> {
        self.fine.iter().find(|(f, _)| *f == fine).map(|(_, c)| *c)
    }

    pub fn fine_index(&self, fine: &str) -> Option<usize> {
        self.fine.iter().position(|(f, _)| *f == fine)
    }

    pub fn coarse_index(&self, coarse: &str) -> Option<usize> {
        self.coarse.iter().position(|c| *c == coarse)
    }
}

static VOCABULARIES: [Vocabulary; 6] = [
    Vocabulary {
        coarse: &["benign", "malignant"],
        fine: &[
            ("melanoma", "malignant"),
            ("basal_cell_carcinoma", "malignant"),
            ("squamous_cell_carcinoma", "malignant"),
            ("melanoma_metastasis", "malignant"),
            ("nevus", "benign"),
            ("seborrheic_keratosis", "benign"),
            ("dermatofibroma", "benign"),
            ("vascular_lesion", "benign"),
        ],
    },
    Vocabulary {
        coarse: &["normal", "benign", "malignant"],
        fine: &[
            ("normal_tissue", "normal"),
            ("no_lesion", "normal"),
            ("fibroadenoma", "benign"),
            ("simple_cyst", "benign"),
            ("invasive_ductal_carcinoma", "malignant"),
            ("invasive_lobular_carcinoma", "malignant"),
        ],
    },
    Vocabulary {
        coarse: &["non_referable", "referable"],
        fine: &[
            ("no_dr", "non_referable"),
            ("mild_npdr", "non_referable"),
            ("moderate_npdr", "referable"),
            ("severe_npdr", "referable"),
            ("proliferative_dr", "referable"),
            ("diabetic_macular_edema", "referable"),
        ],
    },
    Vocabulary {
        coarse: &["benign", "malignant"],
        fine: &[
            ("adenosis", "benign"),
            ("fibroadenoma", "benign"),
            ("phyllodes_tumor", "benign"),
            ("tubular_adenoma", "benign"),
            ("ductal_carcinoma", "malignant"),
            ("lobular_carcinoma", "malignant"),
            ("mucinous_carcinoma", "malignant"),
            ("papillary_carcinoma", "malignant"),
        ],
    },
    Vocabulary {
        coarse: &["no_tumor", "tumor"],
        fine: &[
            ("healthy_brain", "no_tumor"),
            ("no_finding", "no_tumor"),
            ("glioma", "tumor"),
            ("meningioma", "tumor"),
            ("pituitary_adenoma", "tumor"),
            ("glioblastoma", "tumor"),
        ],
    },
    Vocabulary {
        coarse: &["normal", "pneumonia"],
        fine: &[
            ("clear_lungs", "normal"),
            ("no_acute_finding", "normal"),
            ("bacterial_pneumonia", "pneumonia"),
            ("viral_pneumonia", "pneumonia"),
            ("covid19_pneumonia", "pneumonia"),
            ("lung_opacity", "pneumonia"),
        ],
    },
];

/// Side of the block grid the class patterns are drawn on.
pub const PATTERN_GRID: u32 = 8;

/// Entry `(row, col)` of the 64×64 Sylvester–Hadamard matrix.
fn hadamard(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Zero-mean spatial pattern on the 8×8 block grid for a fine class.
///
/// Half of the energy comes from the coarse class and half from the fine
/// class; distinct rows of the Hadamard matrix are orthogonal, so fine
/// classes are separable and coarse classes are linearly separable.
pub fn class_pattern(modality: Modality, fine: &str) -> Option<[f64; 64]> {
    let vocab = modality.vocabulary();
    let fi = vocab.fine_index(fine)?;
    let ci = vocab.coarse_index(vocab.coarse_of(fine)?)?;
    let coarse_row = 1 + ci;
    let fine_row = 16 + fi;
    let mut out = [0.0; 64];
    for (cell, v) in out.iter_mut().enumerate() {
        *v = 0.5 * hadamard(coarse_row, cell) + 0.5 * hadamard(fine_row, cell);
    }
    Some(out)
}
