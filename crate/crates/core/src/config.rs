//! Model and training configuration, including the ablation switches.

use serde::{Deserialize, Serialize};

use crate::corpus::TextOptions;
use crate::error::{NliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// BiLSTM encoding and composition.
    Esim,
    /// Tree-LSTM encoding and composition over syntactic parses.
    Tree,
    /// Tree-LSTM over full binary trees built by pairing adjacent words.
    Fulltree,
}

impl ModelKind {
    pub fn is_tree(self) -> bool {
        !matches!(self, ModelKind::Esim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Avemax,
    Sum,
}

/// Contextual layer used for encoding or composition in the sequential model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Bilstm,
    /// Per-position one-layer ReLU network of the same output width.
    Ff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub pooling: Pooling,
    /// Include the difference and product blocks in the enhancement.
    pub diff_prod: bool,
    pub premise_attention: bool,
    pub hypothesis_attention: bool,
    pub encoder: LayerKind,
    pub composition: LayerKind,
    /// Gate biases in LSTM and tree-LSTM cells.
    pub gate_biases: bool,
    /// Share the input projection of the two tree-LSTM forget gates.
    pub tie_forget_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Esim,
            embed_dim: 300,
            hidden_dim: 300,
            mlp_dim: 300,
            pooling: Pooling::Avemax,
            diff_prod: true,
            premise_attention: true,
            hypothesis_attention: true,
            encoder: LayerKind::Bilstm,
            composition: LayerKind::Bilstm,
            gate_biases: true,
            tie_forget_input: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.mlp_dim == 0 {
            return Err(NliError::contract("dimensions must be positive"));
        }
        if !self.premise_attention && !self.hypothesis_attention {
            return Err(NliError::contract(
                "premise and hypothesis attention cannot both be disabled",
            ));
        }
        if self.kind.is_tree() && (self.encoder != LayerKind::Bilstm || self.composition != LayerKind::Bilstm) {
            return Err(NliError::contract(
                "feedforward encoder/composition replacements apply to the esim model only",
            ));
        }
        Ok(())
    }

    /// Width of one encoded state.
    pub fn state_dim(&self) -> usize {
        if self.kind.is_tree() {
            self.hidden_dim
        } else {
            2 * self.hidden_dim
        }
    }

    /// Width of an enhanced local-inference row.
    pub fn enhanced_dim(&self) -> usize {
        self.state_dim() * if self.diff_prod { 4 } else { 2 }
    }

    /// Width of the pooled vector fed to the classifier.
    pub fn pooled_dim(&self) -> usize {
        let s = self.state_dim();
        let blocks = match self.pooling {
            Pooling::Avemax => 4,
            Pooling::Sum => 2,
        };
        let roots = if self.kind.is_tree() { 2 } else { 0 };
        (blocks + roots) * s
    }

    /// Short description of which ablation row this configuration realises.
    pub fn variant_name(&self) -> String {
        let mut parts = vec![match self.kind {
            ModelKind::Esim => "esim".to_string(),
            ModelKind::Tree => "syntactic-tree".to_string(),
            ModelKind::Fulltree => "full-tree".to_string(),
        }];
        if self.pooling == Pooling::Sum {
            parts.push("-ave/max".into());
        }
        if !self.diff_prod {
            parts.push("-diff/prod".into());
        }
        if self.composition == LayerKind::Ff {
            parts.push("-inference BiLSTM".into());
        }
        if self.encoder == LayerKind::Ff {
            parts.push("-encoding BiLSTM".into());
        }
        if !self.premise_attention {
            parts.push("-P-based attention".into());
        }
        if !self.hypothesis_attention {
            parts.push("-H-based attention".into());
        }
        parts.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without dev improvement before stopping; `None` disables.
    pub patience: Option<usize>,
    /// Global gradient-norm clip; `None` disables.
    pub max_grad_norm: Option<f64>,
    /// Group examples of similar length into batches.
    pub bucket_by_length: bool,
    pub oov_std: f64,
    pub lowercase_fallback: bool,
    pub text: TextOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 32,
            dropout: 0.5,
            max_epochs: 10,
            seed: 1234,
            learning_rate: 0.0004,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: Some(5),
            max_grad_norm: None,
            bucket_by_length: false,
            oov_std: 0.1,
            lowercase_fallback: true,
            text: TextOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NliError::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(NliError::contract("batch size must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(NliError::contract("learning rate must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths() {
        let c = ModelConfig::default();
        assert_eq!(c.state_dim(), 600);
        assert_eq!(c.enhanced_dim(), 2400);
        assert_eq!(c.pooled_dim(), 2400);
        let sum = ModelConfig {
            pooling: Pooling::Sum,
            ..c.clone()
        };
        assert_eq!(sum.pooled_dim(), 1200);
        let tree = ModelConfig {
            kind: ModelKind::Tree,
            ..c.clone()
        };
        assert_eq!(tree.state_dim(), 300);
        assert_eq!(tree.enhanced_dim(), 1200);
        assert_eq!(tree.pooled_dim(), 1800);
        let nd = ModelConfig {
            diff_prod: false,
            ..c
        };
        assert_eq!(nd.enhanced_dim(), 1200);
    }

    #[test]
    fn rejects_bad_combinations() {
        let c = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.model.premise_attention = false;
        c.model.hypothesis_attention = false;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.model.kind = ModelKind::Tree;
        c.model.encoder = LayerKind::Ff;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn json_round_trip() {
        let c = TrainConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
        // partial configs fill in defaults
        let partial: TrainConfig = serde_json::from_str(r#"{"batch_size": 8}"#).unwrap();
        assert_eq!(partial.batch_size, 8);
        assert_eq!(partial.learning_rate, 0.0004);
    }
}
