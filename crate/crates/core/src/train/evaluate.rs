use std::collections::{BTreeMap, HashMap};

use crate::chart::{mbr_decode, spans, SpanMarginals};
use crate::eval::{
    clustering_accuracy, f1_pair, left_branching_baseline, retrieval_eval,
    right_branching_baseline, Baselines, EvalReport, ModalityF1,
};
use crate::pcfg::clustering_posterior;
use crate::synth::PairedInstance;
use crate::tensor::Graph;
use crate::tree::{ParseTree, Span};

use super::{JointModel, Noise, Result, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Categories kept out of training; enables the seen/unseen sections.
    pub holdout: Vec<String>,
    pub retrieval: bool,
    pub retrieval_seed: u64,
}

/// Decoded structure of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedInstance {
    pub id: String,
    pub category: String,
    pub lang_tree: ParseTree,
    pub vis_tree: ParseTree,
    /// Most probable tag per part.
    pub part_tags: Vec<usize>,
    pub lang_pooled: Vec<f64>,
    pub vis_pooled: Vec<f64>,
}

fn to_marginals(n: usize, values: &[f64]) -> SpanMarginals {
    let index: HashMap<Span, usize> = spans(n).into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    SpanMarginals::from_fn(n, |a, b| values[index[&Span::new(a, b)]])
}

/// MBR trees for both modalities with `z` at the posterior mean. Instances
/// are processed in dataset order in chunks of the training batch size, which
/// fixes the set each part's emission is normalised over.
pub fn parse_instances(
    model: &JointModel,
    cfg: &TrainConfig,
    data: &[PairedInstance],
    align: bool,
) -> Result<Vec<ParsedInstance>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(cfg.batch_size.max(1)) {
        let g = Graph::new();
        let p = model.store.bind(&g);
        let refs: Vec<&PairedInstance> = chunk.iter().collect();
        let fwd = model.forward(&g, &p, cfg, &refs, Noise::Mean, align)?;
        let post = g.value(clustering_posterior(&g, fwd.part_scores)?);
        let (_, n_tags) = post.dims2().expect("2-D posterior");
        let mut row = 0;
        for (i, inst) in chunk.iter().enumerate() {
            let lm = to_marginals(inst.tokens.len(), g.value(fwd.lang_marginals[i]).data());
            let vm = to_marginals(inst.parts.len(), g.value(fwd.vis_marginals[i]).data());
            let part_tags = (0..inst.parts.len())
                .map(|m| {
                    let r = post.row(row + m);
                    (0..n_tags).fold(0, |best, t| if r[t] > r[best] { t } else { best })
                })
                .collect();
            row += inst.parts.len();
            let pooled = |v: &[crate::tensor::Var]| v.get(i).map(|&x| g.value(x).data().to_vec()).unwrap_or_default();
            out.push(ParsedInstance {
                id: inst.id.clone(),
                category: inst.category.clone(),
                lang_tree: mbr_decode(&lm),
                vis_tree: mbr_decode(&vm),
                part_tags,
                lang_pooled: pooled(&fwd.lang_pooled),
                vis_pooled: pooled(&fwd.vis_pooled),
            });
        }
    }
    Ok(out)
}

fn modality_f1(parsed: &[&ParsedInstance], gold: &[&PairedInstance]) -> Result<ModalityF1> {
    let lp: Vec<ParseTree> = parsed.iter().map(|x| x.lang_tree.clone()).collect();
    let vp: Vec<ParseTree> = parsed.iter().map(|x| x.vis_tree.clone()).collect();
    let lg = gold.iter().map(|x| x.lang_tree()).collect::<std::result::Result<Vec<_>, _>>();
    let vg = gold.iter().map(|x| x.vis_tree()).collect::<std::result::Result<Vec<_>, _>>();
    let (lg, vg) = match (lg, vg) {
        (Ok(l), Ok(v)) => (l, v),
        (Err(e), _) | (_, Err(e)) => return Err(super::TrainError::Data(e.to_string())),
    };
    Ok(ModalityF1 {
        lang: f1_pair(&lp, &lg)?,
        vis: f1_pair(&vp, &vg)?,
    })
}

fn baselines(gold: &[&PairedInstance]) -> Result<Baselines> {
    let lens_w: Vec<usize> = gold.iter().map(|x| x.tokens.len()).collect();
    let lens_v: Vec<usize> = gold.iter().map(|x| x.parts.len()).collect();
    let as_parsed = |lw: Vec<ParseTree>, lv: Vec<ParseTree>| -> Vec<ParsedInstance> {
        lw.into_iter()
            .zip(lv)
            .map(|(l, v)| ParsedInstance {
                id: String::new(),
                category: String::new(),
                lang_tree: l,
                vis_tree: v,
                part_tags: Vec::new(),
                lang_pooled: Vec::new(),
                vis_pooled: Vec::new(),
            })
            .collect()
    };
    let left = as_parsed(left_branching_baseline(&lens_w), left_branching_baseline(&lens_v));
    let right = as_parsed(right_branching_baseline(&lens_w), right_branching_baseline(&lens_v));
    Ok(Baselines {
        left: modality_f1(&left.iter().collect::<Vec<_>>(), gold)?,
        right: modality_f1(&right.iter().collect::<Vec<_>>(), gold)?,
    })
}

/// Alignment score between the pooled embeddings of two parsed instances.
pub fn score_pair(cfg: &TrainConfig, w: &ParsedInstance, v: &ParsedInstance) -> f64 {
    let dot: f64 = w.lang_pooled.iter().zip(&v.vis_pooled).map(|(a, b)| a * b).sum();
    dot / cfg.align.normalizer(w.lang_tree.len(), v.vis_tree.len())
}

pub fn evaluate(
    model: &JointModel,
    cfg: &TrainConfig,
    data: &[PairedInstance],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(super::TrainError::Data("empty evaluation set".into()));
    }
    let parsed = parse_instances(model, cfg, data, opts.retrieval)?;
    let all_p: Vec<&ParsedInstance> = parsed.iter().collect();
    let all_g: Vec<&PairedInstance> = data.iter().collect();

    let mut per_category = BTreeMap::new();
    let mut cats: Vec<&str> = data.iter().map(|x| x.category.as_str()).collect();
    cats.sort_unstable();
    cats.dedup();
    let subset = |keep: &dyn Fn(&str) -> bool| -> (Vec<&ParsedInstance>, Vec<&PairedInstance>) {
        parsed
            .iter()
            .zip(data)
            .filter(|(_, g)| keep(&g.category))
            .unzip()
    };
    for c in &cats {
        let (p, g) = subset(&|x| x == *c);
        per_category.insert(c.to_string(), modality_f1(&p, &g)?);
    }

    let (mut seen, mut unseen, mut unseen_baselines) = (None, None, None);
    if !opts.holdout.is_empty() {
        let held = |c: &str| opts.holdout.iter().any(|h| h == c);
        let (p, g) = subset(&|c| !held(c));
        if !p.is_empty() {
            seen = Some(modality_f1(&p, &g)?);
        }
        let (p, g) = subset(&held);
        if !p.is_empty() {
            unseen = Some(modality_f1(&p, &g)?);
            unseen_baselines = Some(baselines(&g)?);
        }
    }

    let pred: Vec<usize> = parsed.iter().flat_map(|x| x.part_tags.iter().copied()).collect();
    let gold: Vec<usize> = data.iter().flat_map(|x| x.gold_part_tags.iter().copied()).collect();
    let clustering = clustering_accuracy(&pred, &gold, model.vis.spec().n_preterminals)?;

    let retrieval = if opts.retrieval && data.len() >= cfg.retrieval_candidates {
        let score = |i: usize, j: usize| score_pair(cfg, &parsed[i], &parsed[j]);
        Some(retrieval_eval(
            data.len(),
            &score,
            cfg.retrieval_candidates,
            cfg.retrieval_trials,
            opts.retrieval_seed,
        )?)
    } else {
        None
    };

    Ok(EvalReport {
        instances: data.len(),
        f1: modality_f1(&all_p, &all_g)?,
        baselines: baselines(&all_g)?,
        per_category,
        clustering_accuracy: clustering,
        retrieval,
        seen,
        unseen,
        unseen_baselines,
    })
}
