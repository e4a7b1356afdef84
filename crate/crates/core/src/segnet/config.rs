use std::fmt;
use std::str::FromStr;

use crate::data::HierarchySpec;
use crate::error::{invalid, Result};

/// What prior concatenation appends to the subclassifier input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorKind {
    /// Raw superclass logits.
    #[default]
    Logits,
    /// Superclass softmax probabilities.
    Probs,
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorKind::Logits => "logits",
            PriorKind::Probs => "probs",
        })
    }
}

impl FromStr for PriorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "logits" => Ok(PriorKind::Logits),
            "probs" => Ok(PriorKind::Probs),
            other => Err(format!("unknown prior kind `{other}` (logits|probs)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Prior concatenation.
    pub enable_pc: bool,
    /// Separate normalization.
    pub enable_sn: bool,
    pub base_channels: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub prior: PriorKind,
    pub hierarchy: HierarchySpec,
}

impl ModelConfig {
    pub fn new(hierarchy: HierarchySpec) -> Self {
        Self {
            enable_pc: false,
            enable_sn: false,
            base_channels: 16,
            depth: 3,
            in_channels: 1,
            prior: PriorKind::Logits,
            hierarchy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(invalid("model_config", format!("depth {} < 2", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(invalid("model_config", format!("base_channels {} < 4", self.base_channels)));
        }
        if self.in_channels == 0 {
            return Err(invalid("model_config", "in_channels must be positive"));
        }
        Ok(())
    }

    /// Short tag naming the enabled mechanisms, e.g. `mod`, `pc+sn`.
    pub fn arch_tag(&self) -> String {
        match (self.enable_pc, self.enable_sn) {
            (false, false) => "mod".into(),
            (true, false) => "pc".into(),
            (false, true) => "sn".into(),
            (true, true) => "pc+sn".into(),
        }
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}
