use rand_distr::{Distribution, StandardNormal};

use crate::chart::{chart_summary, spans, spans_with_leaves};
use crate::encoders::{LanguageEncoder, Posterior, VisionEncoder};
use crate::grounding::{
    contrastive_loss, pooled_embedding, score_matrix, total_loss, with_unit_spans, LossBundle,
    SpanSet,
};
use crate::nn::{Bound, ParamStore};
use crate::pcfg::{CompoundPcfg, RuleProbs};
use crate::synth::PairedInstance;
use crate::tensor::{Graph, Tensor, Var};

use super::{derived_rng, Result, Stream, TrainConfig, TrainError};

/// How the latent `z` is chosen for each instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    /// Posterior mean.
    Mean,
    /// Reparameterised sample keyed by the global step.
    Sample { seed: u64, step: u64 },
}

/// Both grammars, both encoders, one parameter store.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub store: ParamStore,
    pub lang: CompoundPcfg,
    pub vis: CompoundPcfg,
    pub lang_enc: LanguageEncoder,
    pub vis_enc: VisionEncoder,
    pub vocab_size: usize,
    pub raw_dim: usize,
}

/// Tape handles produced by [`JointModel::forward`].
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub total: Var,
    pub lang: Var,
    pub vis: Var,
    pub contrastive: Option<Var>,
    /// `[|spans(n)|]` per instance, canonical span order.
    pub lang_marginals: Vec<Var>,
    pub vis_marginals: Vec<Var>,
    /// `[1, align_dim]` pooled span embeddings, when alignment was requested.
    pub lang_pooled: Vec<Var>,
    pub vis_pooled: Vec<Var>,
    /// Raw tag scores `[M, P]` for all parts of the batch.
    pub part_scores: Var,
}

struct Side {
    loss: Var,
    marginals: Var,
    features: Var,
}

impl JointModel {
    /// Each component draws its initial values from its own stream, so the
    /// language half does not depend on the vision half and vice versa.
    pub fn new(cfg: &TrainConfig, vocab_size: usize, raw_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if vocab_size == 0 || raw_dim == 0 {
            return Err(TrainError::Data("empty vocabulary or feature dimension".into()));
        }
        let enc = cfg.encoder_spec();
        let mut store = ParamStore::new();
        let lang = CompoundPcfg::new(
            cfg.lang_spec(vocab_size),
            &mut store,
            &mut derived_rng(cfg.seed, Stream::Init, 0, 0),
        )?;
        let lang_enc = LanguageEncoder::new(
            &mut store,
            vocab_size,
            &enc,
            &mut derived_rng(cfg.seed, Stream::Init, 1, 0),
        );
        let vis_enc = VisionEncoder::new(
            &mut store,
            &cfg.psi_layout(raw_dim),
            &enc,
            &mut derived_rng(cfg.seed, Stream::Init, 2, 0),
        );
        let vis = CompoundPcfg::new(
            cfg.vis_spec(vis_enc.feature_dim()),
            &mut store,
            &mut derived_rng(cfg.seed, Stream::Init, 3, 0),
        )?;
        Ok(JointModel {
            store,
            lang,
            vis,
            lang_enc,
            vis_enc,
            vocab_size,
            raw_dim,
        })
    }

    pub fn check_instance(&self, inst: &PairedInstance) -> Result<()> {
        let bad = |m: String| Err(TrainError::Data(format!("{}: {m}", inst.id)));
        if inst.tokens.len() < 2 || inst.parts.len() < 2 {
            return bad("needs at least 2 tokens and 2 parts".into());
        }
        if let Some(t) = inst.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return bad(format!("token {t} outside vocabulary of {}", self.vocab_size));
        }
        if let Some(p) = inst.parts.iter().find(|p| p.len() != self.raw_dim) {
            return bad(format!("part has {} features, expected {}", p.len(), self.raw_dim));
        }
        Ok(())
    }

    /// Perception features `ψ(v)` for raw part rows, off the tape.
    pub fn features(&self, parts: &[Vec<f64>]) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.store.bind(&g);
        let raw = g.constant(stack(parts, self.raw_dim)?);
        let f = self.vis_enc.perceive(&g, &p, raw)?;
        Ok((*g.value(f)).clone())
    }

    /// Joint objective for one batch. `align` forces the pooled span
    /// embeddings even when the contrastive weight is zero.
    pub fn forward(
        &self,
        g: &Graph,
        p: &Bound,
        cfg: &TrainConfig,
        batch: &[&PairedInstance],
        noise: Noise,
        align: bool,
    ) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(TrainError::Data("empty batch".into()));
        }
        for inst in batch {
            self.check_instance(inst)?;
        }
        let b = batch.len();
        let z_dim = cfg.z_dim;
        let eps = |i: usize, modality: u64| -> Vec<f64> {
            match noise {
                Noise::Mean => Vec::new(),
                Noise::Sample { seed, step } => {
                    let mut rng = derived_rng(seed, Stream::Noise, step, 2 * i as u64 + modality);
                    (0..z_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
                }
            }
        };
        let latent = |post: Option<Posterior>, e: &[f64]| -> Result<(Option<Var>, Option<Var>)> {
            match post {
                None => Ok((None, None)),
                Some(q) => {
                    let z = if e.is_empty() { q.mean } else { q.sample(g, e)? };
                    Ok((Some(z), Some(q.kl(g)?)))
                }
            }
        };
        let elbo = |rules: &RuleProbs, emission: Var, kl: Option<Var>, n_nt, n_pt| -> Result<(Var, Var)> {
            let summary = chart_summary(g, rules.root, rules.binary, emission, n_nt, n_pt)?;
            let len = g.value(summary).len();
            let log_z = g.index(summary, 0)?;
            let marg = g.slice(summary, 1, len)?;
            let nll = g.scale(log_z, -1.0)?;
            let loss = match kl {
                Some(kl) => g.add(nll, kl)?,
                None => nll,
            };
            Ok((loss, marg))
        };

        let lspec = self.lang.spec();
        let mut lang_sides = Vec::with_capacity(b);
        for (i, inst) in batch.iter().enumerate() {
            let states = self.lang_enc.states(g, p, &inst.tokens)?;
            let post = self.lang_enc.posterior(g, p, states)?;
            let (z, kl) = latent(post, &eps(i, 0))?;
            let rules = self.lang.rule_probs(g, p, z)?;
            let em = self.lang.token_emissions(g, &rules, &inst.tokens)?;
            let (loss, marginals) =
                elbo(&rules, em, kl, lspec.n_nonterminals, lspec.n_preterminals)?;
            lang_sides.push(Side {
                loss,
                marginals,
                features: states,
            });
        }

        let vspec = self.vis.spec();
        let all_parts: Vec<Vec<f64>> = batch.iter().flat_map(|x| x.parts.iter().cloned()).collect();
        let raw = g.constant(stack(&all_parts, self.raw_dim)?);
        let psi = self.vis_enc.perceive(g, p, raw)?;
        let part_scores = self.vis.terminal_scores(g, p, psi)?;
        let emissions = self.vis.part_emissions(g, part_scores)?;
        let mut vis_sides = Vec::with_capacity(b);
        let mut offset = 0;
        for (i, inst) in batch.iter().enumerate() {
            let idx: Vec<usize> = (offset..offset + inst.parts.len()).collect();
            offset += inst.parts.len();
            let feats = g.rows(psi, &idx)?;
            let em = g.rows(emissions, &idx)?;
            let post = self.vis_enc.posterior(g, p, feats)?;
            let (z, kl) = latent(post, &eps(i, 1))?;
            let rules = self.vis.rule_probs(g, p, z)?;
            let (loss, marginals) =
                elbo(&rules, em, kl, vspec.n_nonterminals, vspec.n_preterminals)?;
            vis_sides.push(Side {
                loss,
                marginals,
                features: feats,
            });
        }

        let mean = |sides: &[Side]| -> Result<Var> {
            let terms: Vec<Var> = sides.iter().map(|s| s.loss).collect();
            Ok(g.scale(g.add_n(&terms)?, 1.0 / b as f64)?)
        };
        let lang = mean(&lang_sides)?;
        let vis = mean(&vis_sides)?;

        let want_contrastive = cfg.weights.contrastive > 0.0 && b >= 2;
        let (mut lang_pooled, mut vis_pooled, mut contrastive) = (Vec::new(), Vec::new(), None);
        if want_contrastive || align {
            let sets = |sides: &[Side], lens: Vec<usize>, lang_side: bool| -> Result<Vec<SpanSet>> {
                let mut out = Vec::new();
                for (s, n) in sides.iter().zip(lens) {
                    let sp = if cfg.align.include_unit_spans {
                        spans_with_leaves(n)
                    } else {
                        spans(n)
                    };
                    let embed = if lang_side {
                        self.lang_enc.embed_spans(g, p, s.features, &sp)?
                    } else {
                        self.vis_enc.embed_spans(g, p, s.features, &sp)?
                    };
                    let marginals = with_unit_spans(g, &cfg.align, n, s.marginals)?;
                    out.push(SpanSet {
                        marginals,
                        embed,
                        len: n,
                    });
                }
                Ok(out)
            };
            let lw = sets(&lang_sides, batch.iter().map(|x| x.tokens.len()).collect(), true)?;
            let lv = sets(&vis_sides, batch.iter().map(|x| x.parts.len()).collect(), false)?;
            if want_contrastive {
                let s = score_matrix(g, &cfg.align, &lw, &lv)?;
                contrastive = Some(contrastive_loss(g, s, cfg.delta)?);
            }
            if align {
                for s in &lw {
                    lang_pooled.push(pooled_embedding(g, s, "language")?);
                }
                for s in &lv {
                    vis_pooled.push(pooled_embedding(g, s, "vision")?);
                }
            }
        }
        let total = total_loss(g, [Some(lang), Some(vis), contrastive], &cfg.weights)?;
        Ok(BatchOutput {
            total,
            lang,
            vis,
            contrastive,
            lang_marginals: lang_sides.iter().map(|s| s.marginals).collect(),
            vis_marginals: vis_sides.iter().map(|s| s.marginals).collect(),
            lang_pooled,
            vis_pooled,
            part_scores,
        })
    }

    /// Plain values of the loss terms.
    pub fn bundle(&self, g: &Graph, cfg: &TrainConfig, out: &BatchOutput) -> LossBundle {
        let c = out.contrastive.map_or(0.0, |v| g.value(v).item());
        LossBundle::new(
            g.value(out.lang).item(),
            g.value(out.vis).item(),
            c,
            cfg.weights,
        )
    }
}

fn stack(rows: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::matrix(rows.len(), dim, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_grammars, sample_instance, SampleStats, SynthConfig, Vocabulary};

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.z_dim = 2;
        cfg.rnn_hidden = 3;
        cfg.align_dim = 4;
        cfg.word_dim = 3;
        for g in [&mut cfg.lang, &mut cfg.vis] {
            g.nonterminals = 2;
            g.preterminals = 3;
            g.symbol_dim = 4;
            g.hidden = 4;
        }
        cfg.psi_dims = vec![5];
        cfg
    }

    fn batch(n: usize) -> Vec<PairedInstance> {
        let grammars = default_grammars();
        let mut st = SampleStats::default();
        (0..n)
            .map(|i| sample_instance(&grammars[i % 4], &SynthConfig::default(), "t", i as u64, &mut st).unwrap())
            .collect()
    }

    #[test]
    fn both_grammars_receive_gradient_through_alignment() {
        let cfg = tiny_config();
        let data = batch(3);
        let model = JointModel::new(&cfg, Vocabulary::default().len(), 16).unwrap();
        let refs: Vec<&PairedInstance> = data.iter().collect();
        // contrastive term alone
        let mut only_c = cfg.clone();
        only_c.weights.lang = 0.0;
        only_c.weights.vis = 0.0;
        let g = Graph::new();
        let p = model.store.bind(&g);
        let out = model
            .forward(&g, &p, &only_c, &refs, Noise::Sample { seed: 1, step: 0 }, false)
            .unwrap();
        assert!(g.value(out.total).item() > 0.0);
        let grads = g.backward(out.total).unwrap();
        for grammar in [&model.lang, &model.vis] {
            let bin = grammar.param_ids()[4];
            let gb = grads.get(p.var(bin));
            assert!(gb.data().iter().any(|&x| x != 0.0), "{}", model.store.name(bin));
        }
    }

    #[test]
    fn mean_noise_is_deterministic_and_sampling_is_keyed() {
        let cfg = tiny_config();
        let data = batch(2);
        let refs: Vec<&PairedInstance> = data.iter().collect();
        let model = JointModel::new(&cfg, Vocabulary::default().len(), 16).unwrap();
        let run = |noise| {
            let g = Graph::new();
            let p = model.store.bind(&g);
            let out = model.forward(&g, &p, &cfg, &refs, noise, false).unwrap();
            model.bundle(&g, &cfg, &out)
        };
        assert_eq!(run(Noise::Mean), run(Noise::Mean));
        let a = run(Noise::Sample { seed: 3, step: 5 });
        assert_eq!(a, run(Noise::Sample { seed: 3, step: 5 }));
        assert_ne!(a, run(Noise::Sample { seed: 3, step: 6 }));
    }

    #[test]
    fn rejects_malformed_instances() {
        let cfg = tiny_config();
        let model = JointModel::new(&cfg, 35, 16).unwrap();
        let mut inst = batch(1).remove(0);
        inst.tokens.push(99);
        assert!(model.check_instance(&inst).is_err());
        let mut inst = batch(1).remove(0);
        inst.parts[0].pop();
        assert!(model.check_instance(&inst).is_err());
    }
}
