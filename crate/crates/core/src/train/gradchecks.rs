//! Finite-difference checks of every differentiable stage, callable outside
//! the test harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chart::{chart_summary, spans};
use crate::encoders::{LanguageEncoder, VisionEncoder};
use crate::grounding::{contrastive_loss, score_matrix, AlignConfig, SpanSet};
use crate::nn::{Bound, ParamStore};
use crate::pcfg::{clustering_posterior, CompoundPcfg, GrammarSpec};
use crate::synth::PairedInstance;
use crate::tensor::{gradcheck, GradcheckReport, Graph, Tensor, Var};

use super::{JointModel, Noise, Result, TrainConfig, TrainError};

/// Central-difference step used by every check.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub name: &'static str,
    pub report: GradcheckReport,
    pub tolerance: f64,
}

impl GradcheckEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Store values jittered so no parameter sits at an exact zero.
fn jittered(store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    store
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            for x in t.data_mut() {
                *x += 0.3 * rng.random_range(-1.0..1.0);
            }
            t
        })
        .collect()
}

fn weighted_sum(g: &Graph, xs: &[Var], rng_seed: u64) -> std::result::Result<Var, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut parts = Vec::new();
    for &x in xs {
        let w = rand_tensor(&mut rng, &g.shape(x), 1.0);
        let w = g.constant(w);
        parts.push(g.sum(g.mul(x, w)?)?);
    }
    Ok(g.add_n(&parts)?)
}

fn check<F>(name: &'static str, tol: f64, inputs: &[Tensor], f: F) -> Result<GradcheckEntry>
where
    F: Fn(&Graph, &[Var]) -> std::result::Result<Var, TrainError>,
{
    let report = gradcheck(inputs, FD_STEP, f)?;
    Ok(GradcheckEntry {
        name,
        report,
        tolerance: tol,
    })
}

/// Two length-3 pairs: the smallest batch the contrastive term accepts.
pub fn length3_batch(seed: u64, raw_dim: usize, vocab: usize) -> Vec<PairedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|i| PairedInstance {
            id: format!("fd-{i}"),
            category: "fd".into(),
            tokens: (0..3).map(|_| rng.random_range(0..vocab)).collect(),
            parts: (0..3)
                .map(|_| (0..raw_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect(),
            gold_lang_tree: vec![],
            gold_vis_tree: vec![],
            gold_part_tags: vec![0; 3],
        })
        .collect()
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.z_dim = 2;
    cfg.rnn_hidden = 3;
    cfg.align_dim = 3;
    cfg.word_dim = 3;
    cfg.psi_dims = vec![3];
    for g in [&mut cfg.lang, &mut cfg.vis] {
        g.nonterminals = 2;
        g.preterminals = 2;
        g.symbol_dim = 3;
        g.hidden = 3;
    }
    cfg
}

/// Per-stage checks at 1e-6 and the full objective at 1e-4.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // inside/outside node
    let (nn, np, n) = (2, 2, 4);
    let s = nn + np;
    let inputs = vec![
        rand_tensor(&mut rng, &[nn], 1.0),
        rand_tensor(&mut rng, &[nn, s * s], 1.0),
        rand_tensor(&mut rng, &[n, np], 1.0),
    ];
    out.push(check("chart_summary", 1e-6, &inputs, |g, v| {
        let r = g.log_softmax(v[0], 0)?;
        let b = g.log_softmax(v[1], 1)?;
        let e = g.log_softmax(v[2], 0)?;
        let summary = chart_summary(g, r, b, e, nn, np)?;
        weighted_sum(g, &[summary], 1)
    })?);

    // language rules
    let mut store = ParamStore::new();
    let spec = GrammarSpec {
        symbol_dim: 3,
        hidden: 4,
        z_dim: 2,
        ..GrammarSpec::language(2, 2, 5)
    };
    let gr = CompoundPcfg::new(spec, &mut store, &mut rng)?;
    let mut inputs = jittered(&store, &mut rng);
    let np_ = inputs.len();
    inputs.push(rand_tensor(&mut rng, &[2], 1.0));
    out.push(check("language_rules", 1e-6, &inputs, |g, v| {
        let p = Bound::from_vars(v[..np_].to_vec());
        let r = gr.rule_probs(g, &p, Some(v[np_]))?;
        let em = gr.token_emissions(g, &r, &[0, 3, 4])?;
        weighted_sum(g, &[r.root, r.binary, em], 2)
    })?);

    // vision rules, emissions and clustering posterior
    let mut store = ParamStore::new();
    let spec = GrammarSpec {
        symbol_dim: 3,
        hidden: 4,
        z_dim: 2,
        ..GrammarSpec::vision(2, 3, 4)
    };
    let gr = CompoundPcfg::new(spec, &mut store, &mut rng)?;
    let mut inputs = jittered(&store, &mut rng);
    let np_ = inputs.len();
    inputs.push(rand_tensor(&mut rng, &[2], 1.0));
    inputs.push(rand_tensor(&mut rng, &[3, 4], 1.0));
    out.push(check("vision_rules", 1e-6, &inputs, |g, v| {
        let p = Bound::from_vars(v[..np_].to_vec());
        let r = gr.rule_probs(g, &p, Some(v[np_]))?;
        let scores = gr.terminal_scores(g, &p, v[np_ + 1])?;
        let em = gr.part_emissions(g, scores)?;
        let post = clustering_posterior(g, scores)?;
        weighted_sum(g, &[r.root, r.binary, em, post], 3)
    })?);

    // encoders
    let enc = tiny_config().encoder_spec();
    let mut store = ParamStore::new();
    let le = LanguageEncoder::new(&mut store, 5, &enc, &mut rng);
    let inputs = jittered(&store, &mut rng);
    out.push(check("language_encoder", 1e-6, &inputs, |g, v| {
        let p = Bound::from_vars(v.to_vec());
        let st = le.states(g, &p, &[1, 4, 0])?;
        let q = le.posterior(g, &p, st)?.expect("z_dim > 0");
        let z = q.sample(g, &[0.7, -0.2])?;
        let kl = q.kl(g)?;
        let e = le.embed_spans(g, &p, st, &spans(3))?;
        weighted_sum(g, &[z, kl, e], 4)
    })?);
    let mut store = ParamStore::new();
    let ve = VisionEncoder::new(&mut store, &[4, 3], &enc, &mut rng);
    let mut inputs = jittered(&store, &mut rng);
    let np_ = inputs.len();
    inputs.push(rand_tensor(&mut rng, &[3, 4], 1.0));
    out.push(check("vision_encoder", 1e-6, &inputs, |g, v| {
        let p = Bound::from_vars(v[..np_].to_vec());
        let f = ve.perceive(g, &p, v[np_])?;
        let q = ve.posterior(g, &p, f)?.expect("z_dim > 0");
        let z = q.sample(g, &[-0.4, 1.1])?;
        let kl = q.kl(g)?;
        let e = ve.embed_spans(g, &p, f, &spans(3))?;
        weighted_sum(g, &[z, kl, e], 5)
    })?);

    // alignment scores and hinge loss
    let b = 3;
    let lens = [3usize, 4, 3];
    let mut inputs = Vec::new();
    for &len in &lens {
        let j = spans(len).len();
        inputs.push(rand_tensor(&mut rng, &[j], 1.0));
        inputs.push(rand_tensor(&mut rng, &[j, 3], 1.0));
    }
    for &len in lens.iter().rev() {
        let j = spans(len).len();
        inputs.push(rand_tensor(&mut rng, &[j], 1.0));
        inputs.push(rand_tensor(&mut rng, &[j, 3], 1.0));
    }
    out.push(check("alignment", 1e-6, &inputs, |g, v| {
        let cfg = AlignConfig::default();
        let set = |k: usize, len: usize| SpanSet {
            marginals: v[2 * k],
            embed: v[2 * k + 1],
            len,
        };
        let lw: Vec<SpanSet> = (0..b).map(|i| set(i, lens[i])).collect();
        let lv: Vec<SpanSet> = (0..b).map(|i| set(b + i, lens[b - 1 - i])).collect();
        let sm = score_matrix(g, &cfg, &lw, &lv)?;
        let hinge = contrastive_loss(g, sm, 0.2)?;
        weighted_sum(g, &[sm, hinge], 6)
    })?);

    // the whole objective on two length-3 pairs
    let cfg = tiny_config();
    let model = JointModel::new(&cfg, 6, 4)?;
    let batch = length3_batch(seed, 4, 6);
    let refs: Vec<&PairedInstance> = batch.iter().collect();
    let inputs = jittered(&model.store, &mut rng);
    out.push(check("end_to_end", 1e-4, &inputs, |g, v| {
        let p = Bound::from_vars(v.to_vec());
        let fwd = model.forward(g, &p, &cfg, &refs, Noise::Sample { seed, step: 0 }, false)?;
        Ok(fwd.total)
    })?);
    Ok(out)
}
