//! Training configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderSpec;
use crate::grounding::{AlignConfig, LossWeights};
use crate::pcfg::GrammarSpec;

use super::{Result, TrainError};

/// Size of one modality's grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarSizes {
    pub nonterminals: usize,
    pub preterminals: usize,
    pub symbol_dim: usize,
    pub hidden: usize,
    /// Affine layers in the terminal net.
    pub terminal_layers: usize,
}

impl Default for GrammarSizes {
    fn default() -> Self {
        GrammarSizes {
            nonterminals: 6,
            preterminals: 12,
            symbol_dim: 32,
            hidden: 64,
            terminal_layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplies `lr` for every vision-side parameter.
    pub vis_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Hinge margin of the contrastive loss.
    pub delta: f64,
    pub weights: LossWeights,
    pub align: AlignConfig,
    pub z_dim: usize,
    pub rnn_hidden: usize,
    pub align_dim: usize,
    pub word_dim: usize,
    /// Widths of the perception net after the raw input; empty means identity.
    pub psi_dims: Vec<usize>,
    pub lang: GrammarSizes,
    pub vis: GrammarSizes,
    /// Nearest-mean initialisation of the vision clustering head.
    pub warm_start: bool,
    /// Longest sequence used during the first `curriculum_epochs`; 0 is off.
    pub length_cap: usize,
    pub curriculum_epochs: usize,
    /// Evaluate every this many epochs when an eval set is given; 0 means
    /// only after the last epoch.
    pub eval_every: usize,
    pub retrieval_trials: usize,
    pub retrieval_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            vis_lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            delta: 0.2,
            weights: LossWeights::default(),
            align: AlignConfig::default(),
            z_dim: 8,
            rnn_hidden: 32,
            align_dim: 64,
            word_dim: 32,
            psi_dims: Vec::new(),
            lang: GrammarSizes::default(),
            vis: GrammarSizes {
                terminal_layers: 1,
                ..GrammarSizes::default()
            },
            warm_start: false,
            length_cap: 0,
            curriculum_epochs: 0,
            eval_every: 0,
            retrieval_trials: 2000,
            retrieval_candidates: 8,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        let w = &self.weights;
        for (name, v) in [("lang", w.lang), ("vis", w.vis), ("contrastive", w.contrastive)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("weight {name} must be finite and >= 0, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if w.contrastive > 0.0 && self.batch_size < 2 {
            return bad("the contrastive loss needs batch_size >= 2".into());
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) || !(self.vis_lr_scale > 0.0) {
            return bad("lr, vis_lr_scale and adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.delta >= 0.0) {
            return bad("delta must be >= 0".into());
        }
        if self.rnn_hidden == 0 || self.align_dim == 0 || self.word_dim == 0 {
            return bad("encoder widths must be positive".into());
        }
        if self.psi_dims.contains(&0) {
            return bad("psi_dims must be positive".into());
        }
        if self.retrieval_candidates < 2 {
            return bad("retrieval_candidates must be at least 2".into());
        }
        if self.warm_start && self.vis.terminal_layers != 1 {
            return bad("warm_start needs vis.terminal_layers = 1".into());
        }
        for (name, g) in [("lang", &self.lang), ("vis", &self.vis)] {
            if g.nonterminals == 0 || g.preterminals == 0 || g.symbol_dim == 0 || g.hidden == 0 {
                return bad(format!("{name} grammar sizes must be positive"));
            }
            if g.terminal_layers > 2 {
                return bad(format!("{name}.terminal_layers must be 0, 1 or 2"));
            }
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            z_dim: self.z_dim,
            rnn_hidden: self.rnn_hidden,
            align_dim: self.align_dim,
            word_dim: self.word_dim,
        }
    }

    pub fn lang_spec(&self, vocab: usize) -> GrammarSpec {
        let mut s = GrammarSpec::language(self.lang.nonterminals, self.lang.preterminals, vocab);
        apply(&mut s, &self.lang, self.z_dim);
        s
    }

    pub fn vis_spec(&self, feature_dim: usize) -> GrammarSpec {
        let mut s = GrammarSpec::vision(self.vis.nonterminals, self.vis.preterminals, feature_dim);
        apply(&mut s, &self.vis, self.z_dim);
        s
    }

    /// `[raw, psi_dims..]`.
    pub fn psi_layout(&self, raw_dim: usize) -> Vec<usize> {
        let mut d = vec![raw_dim];
        d.extend(&self.psi_dims);
        d
    }
}

fn apply(spec: &mut GrammarSpec, sizes: &GrammarSizes, z_dim: usize) {
    spec.symbol_dim = sizes.symbol_dim;
    spec.hidden = sizes.hidden;
    spec.terminal_layers = sizes.terminal_layers;
    spec.z_dim = z_dim;
}
