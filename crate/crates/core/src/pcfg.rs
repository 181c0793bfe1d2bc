//! Compound PCFG parameterization: rule log-probabilities as functions of
//! symbol embeddings and a per-instance latent vector `z`.
//!
//! Symbol order follows [`crate::chart`]: nonterminals `0..N`, then
//! preterminals `N..N+P`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{repeat_rows, Activation, Bound, FeedForward, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcfgError {
    #[error("invalid grammar spec: {0}")]
    Spec(String),
    #[error("latent has {got} dims, grammar expects {expected}")]
    ZDim { expected: usize, got: usize },
    #[error("token id {token} is outside the vocabulary of {size}")]
    Token { token: usize, size: usize },
    #[error("no parts to score")]
    EmptyParts,
    #[error("terminal normalization over a single part cannot cover a sequence longer than 1")]
    SinglePart,
    #[error("part feature has {got} dims, expected {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PcfgError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Language,
    Vision,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Language => "lang",
            Modality::Vision => "vis",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub modality: Modality,
    pub n_nonterminals: usize,
    pub n_preterminals: usize,
    /// Language only.
    pub vocab_size: Option<usize>,
    /// Vision only: width of the perception features fed to `f_t`.
    pub feature_dim: Option<usize>,
    pub symbol_dim: usize,
    pub z_dim: usize,
    /// Hidden width of `f_s` and of a two-layer `f_t`.
    pub hidden: usize,
    /// Affine layers in `f_t`: 0 (identity), 1 or 2.
    pub terminal_layers: usize,
}

impl GrammarSpec {
    pub fn language(n_nt: usize, n_pt: usize, vocab: usize) -> Self {
        GrammarSpec {
            modality: Modality::Language,
            n_nonterminals: n_nt,
            n_preterminals: n_pt,
            vocab_size: Some(vocab),
            feature_dim: None,
            symbol_dim: 32,
            z_dim: 8,
            hidden: 64,
            terminal_layers: 2,
        }
    }

    pub fn vision(n_nt: usize, n_pt: usize, feature_dim: usize) -> Self {
        GrammarSpec {
            modality: Modality::Vision,
            n_nonterminals: n_nt,
            n_preterminals: n_pt,
            vocab_size: None,
            feature_dim: Some(feature_dim),
            symbol_dim: 32,
            z_dim: 8,
            hidden: 64,
            terminal_layers: 1,
        }
    }

    pub fn n_symbols(&self) -> usize {
        self.n_nonterminals + self.n_preterminals
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PcfgError::Spec(m.to_string()));
        if self.n_nonterminals == 0 || self.n_preterminals == 0 {
            return bad("need at least one nonterminal and one preterminal");
        }
        if self.symbol_dim == 0 || self.hidden == 0 {
            return bad("symbol_dim and hidden must be positive");
        }
        if self.terminal_layers > 2 {
            return bad("terminal_layers must be 0, 1 or 2");
        }
        match self.modality {
            Modality::Language => {
                if self.vocab_size.is_none_or(|v| v == 0) {
                    return bad("language grammar needs a vocabulary");
                }
                if self.feature_dim.is_some() {
                    return bad("language grammar takes no feature_dim");
                }
            }
            Modality::Vision => {
                if self.vocab_size.is_some() {
                    return bad("vision grammar has no fixed vocabulary");
                }
                if self.feature_dim.is_none_or(|d| d == 0) {
                    return bad("vision grammar needs feature_dim");
                }
            }
        }
        Ok(())
    }
}

/// Handles to one grammar's parameters inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct CompoundPcfg {
    spec: GrammarSpec,
    w_start: ParamId,
    w_nt: ParamId,
    w_pt: ParamId,
    u_root: ParamId,
    u_binary: ParamId,
    u_term: ParamId,
    f_s: FeedForward,
    f_t: FeedForward,
}

/// Rule log-probabilities of one grammar instance, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct RuleProbs {
    /// `[N]`
    pub root: Var,
    /// `[N, S·S]`, row `A` holds `log π(A → B C)` at `B·S + C`.
    pub binary: Var,
    /// Language only: `[P, V]`.
    pub terminal: Option<Var>,
}

impl CompoundPcfg {
    pub fn new(spec: GrammarSpec, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let pre = spec.modality.prefix();
        let (n, p, d, z) = (
            spec.n_nonterminals,
            spec.n_preterminals,
            spec.symbol_dim,
            spec.z_dim,
        );
        let s = n + p;
        let w_start = store.add_scaled(format!("{pre}.w_start"), &[d], 1, rng);
        let w_nt = store.add_scaled(format!("{pre}.w_nt"), &[n, d], 1, rng);
        let w_pt = store.add_scaled(format!("{pre}.w_pt"), &[p, d], 1, rng);
        let f_s = FeedForward::new(
            store,
            &format!("{pre}.f_s"),
            &[d + z, spec.hidden, d],
            Activation::Identity,
            rng,
        );
        let t_in = match spec.modality {
            Modality::Language => d + z,
            Modality::Vision => spec.feature_dim.unwrap(),
        };
        let t_dims: Vec<usize> = match spec.terminal_layers {
            0 => vec![t_in],
            1 => vec![t_in, d],
            _ => vec![t_in, spec.hidden, d],
        };
        let f_t = FeedForward::new(store, &format!("{pre}.f_t"), &t_dims, Activation::Identity, rng);
        let t_out = f_t.output_dim();
        let u_root = store.add_scaled(format!("{pre}.u_root"), &[d, n], d, rng);
        let u_binary = store.add_scaled(format!("{pre}.u_binary"), &[d + z, s * s], d + z, rng);
        let n_term = match spec.modality {
            Modality::Language => spec.vocab_size.unwrap(),
            Modality::Vision => p,
        };
        let u_term = store.add_scaled(format!("{pre}.u_term"), &[t_out, n_term], t_out, rng);
        Ok(CompoundPcfg {
            spec,
            w_start,
            w_nt,
            w_pt,
            u_root,
            u_binary,
            u_term,
            f_s,
            f_t,
        })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    /// Every parameter that belongs to this grammar.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.w_start,
            self.w_nt,
            self.w_pt,
            self.u_root,
            self.u_binary,
            self.u_term,
        ];
        for ff in [&self.f_s, &self.f_t] {
            for &(w, b) in ff.layers() {
                ids.extend([w, b]);
            }
        }
        ids
    }

    /// `u_term`: `[f_t output, V]` for language, `[f_t output, P]` for vision.
    pub fn u_term(&self) -> ParamId {
        self.u_term
    }

    pub fn terminal_net(&self) -> &FeedForward {
        &self.f_t
    }

    fn with_z(&self, g: &Graph, x: Var, rows: usize, z: Option<Var>) -> Result<Var> {
        let zd = self.spec.z_dim;
        let got = z.map_or(0, |z| g.value(z).len());
        if got != zd {
            return Err(PcfgError::ZDim {
                expected: zd,
                got,
            });
        }
        match z {
            Some(z) if zd > 0 => {
                let zr = repeat_rows(g, z, rows)?;
                Ok(g.concat(&[x, zr], 1)?)
            }
            _ => Ok(x),
        }
    }

    /// Start and binary rules, plus language terminals.
    pub fn rule_probs(&self, g: &Graph, p: &Bound, z: Option<Var>) -> Result<RuleProbs> {
        let (n, pt, d) = (
            self.spec.n_nonterminals,
            self.spec.n_preterminals,
            self.spec.symbol_dim,
        );
        let ws = g.reshape(p.var(self.w_start), &[1, d])?;
        let xs = self.with_z(g, ws, 1, z)?;
        let hs = self.f_s.forward(g, p, xs)?;
        let root = g.matmul(hs, p.var(self.u_root))?;
        let root = g.reshape(root, &[n])?;
        let root = g.log_softmax(root, 0)?;

        let xa = self.with_z(g, p.var(self.w_nt), n, z)?;
        let bin = g.matmul(xa, p.var(self.u_binary))?;
        let binary = g.log_softmax(bin, 1)?;

        let terminal = match self.spec.modality {
            Modality::Language => {
                let xt = self.with_z(g, p.var(self.w_pt), pt, z)?;
                let ht = self.f_t.forward(g, p, xt)?;
                let logits = g.matmul(ht, p.var(self.u_term))?;
                Some(g.log_softmax(logits, 1)?)
            }
            Modality::Vision => None,
        };
        Ok(RuleProbs {
            root,
            binary,
            terminal,
        })
    }

    /// `[n, P]` emission log-probabilities of a token sequence.
    pub fn token_emissions(&self, g: &Graph, rules: &RuleProbs, tokens: &[usize]) -> Result<Var> {
        let v = self.spec.vocab_size.unwrap_or(0);
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(PcfgError::Token {
                token: bad,
                size: v,
            });
        }
        let term = rules
            .terminal
            .ok_or_else(|| PcfgError::Spec("vision grammar has no token terminals".into()))?;
        let cols = g.cols(term, tokens)?;
        Ok(g.transpose(cols)?)
    }

    /// Raw scores `s(T, v_m) = u_T · f_t(ψ(v_m))` as an `[M, P]` matrix.
    pub fn terminal_scores(&self, g: &Graph, p: &Bound, features: Var) -> Result<Var> {
        let shape = g.shape(features);
        if shape.first().is_none_or(|&m| m == 0) {
            return Err(PcfgError::EmptyParts);
        }
        let fd = self.f_t.input_dim();
        if shape.len() != 2 || shape[1] != fd {
            return Err(PcfgError::FeatureDim {
                expected: fd,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let h = self.f_t.forward(g, p, features)?;
        Ok(g.matmul(h, p.var(self.u_term))?)
    }

    /// `log π(T → v_m)`: per tag, a softmax over all `M` parts. `[M, P]`.
    pub fn part_emissions(&self, g: &Graph, scores: Var) -> Result<Var> {
        match g.shape(scores).first() {
            None | Some(0) => Err(PcfgError::EmptyParts),
            Some(1) => Err(PcfgError::SinglePart),
            _ => Ok(g.log_softmax(scores, 0)?),
        }
    }
}

/// `p(T | v_m)`: per part, a softmax over tags. `[M, P]`.
pub fn clustering_posterior(g: &Graph, scores: Var) -> Result<Var> {
    if g.shape(scores).first().is_none_or(|&m| m == 0) {
        return Err(PcfgError::EmptyParts);
    }
    Ok(g.softmax(scores, 1)?)
}

/// Plain values of evaluated rules, ready for a [`crate::chart::GrammarView`].
#[derive(Clone, Debug)]
pub struct RuleValues {
    pub n_nt: usize,
    pub n_pt: usize,
    pub root: Tensor,
    pub binary: Tensor,
}

impl RuleValues {
    pub fn from_graph(g: &Graph, spec: &GrammarSpec, rules: &RuleProbs) -> Self {
        RuleValues {
            n_nt: spec.n_nonterminals,
            n_pt: spec.n_preterminals,
            root: (*g.value(rules.root)).clone(),
            binary: (*g.value(rules.binary)).clone(),
        }
    }

    pub fn view(&self) -> crate::chart::GrammarView<'_> {
        crate::chart::GrammarView {
            n_nt: self.n_nt,
            n_pt: self.n_pt,
            root: self.root.data(),
            binary: self.binary.data(),
        }
    }
}
