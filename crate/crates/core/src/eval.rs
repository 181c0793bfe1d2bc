//! Evaluation metrics: unlabeled span F1, clustering accuracy under the best
//! one-to-one matching, and 1-of-k retrieval.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{ParseTree, Span};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{pred} predictions for {gold} gold items")]
    Count { pred: usize, gold: usize },
    #[error("predicted cluster {cluster} exceeds the {allowed} allowed clusters")]
    TooManyClusters { cluster: usize, allowed: usize },
    #[error("retrieval needs at least {k} instances, got {n}")]
    TooFewInstances { k: usize, n: usize },
    #[error("instance {index}: prediction covers {pred} positions, gold {gold}")]
    Length {
        index: usize,
        pred: usize,
        gold: usize,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1Mode {
    /// Pool true/false positives over the corpus.
    Corpus,
    /// Average per-instance F1.
    Instance,
}

/// Spans that count for F1: width ≥ 2 and not the whole sequence.
pub fn scored_spans(tree: &ParseTree) -> BTreeSet<Span> {
    let n = tree.len();
    tree.spans()
        .into_iter()
        .filter(|s| s.width() >= 2 && s.width() < n)
        .collect()
}

fn prf(tp: usize, pred: usize, gold: usize) -> f64 {
    if pred == 0 && gold == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / pred as f64;
    let r = tp as f64 / gold as f64;
    2.0 * p * r / (p + r)
}

/// F1 between two span sets; both empty counts as 1.
pub fn set_f1(pred: &BTreeSet<Span>, gold: &BTreeSet<Span>) -> f64 {
    prf(pred.intersection(gold).count(), pred.len(), gold.len())
}

pub fn span_f1(pred: &[ParseTree], gold: &[ParseTree], mode: F1Mode) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(EvalError::Count {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    let mut per = Vec::with_capacity(pred.len());
    for (index, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(EvalError::Length {
                index,
                pred: p.len(),
                gold: g.len(),
            });
        }
        let (ps, gs) = (scored_spans(p), scored_spans(g));
        let hit = ps.intersection(&gs).count();
        per.push(prf(hit, ps.len(), gs.len()));
        tp += hit;
        np += ps.len();
        ng += gs.len();
    }
    Ok(match mode {
        F1Mode::Corpus => prf(tp, np, ng),
        F1Mode::Instance if per.is_empty() => 1.0,
        F1Mode::Instance => per.iter().sum::<f64>() / per.len() as f64,
    })
}

/// Corpus and instance F1 in one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Pair {
    pub corpus: f64,
    pub instance: f64,
}

pub fn f1_pair(pred: &[ParseTree], gold: &[ParseTree]) -> Result<F1Pair> {
    Ok(F1Pair {
        corpus: span_f1(pred, gold, F1Mode::Corpus)?,
        instance: span_f1(pred, gold, F1Mode::Instance)?,
    })
}

pub fn left_branching_baseline(lengths: &[usize]) -> Vec<ParseTree> {
    lengths.iter().map(|&n| ParseTree::left_branching(n)).collect()
}

pub fn right_branching_baseline(lengths: &[usize]) -> Vec<ParseTree> {
    lengths.iter().map(|&n| ParseTree::right_branching(n)).collect()
}

/// Minimum-cost perfect matching on a square cost matrix; returns the column
/// assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return vec![];
    }
    // potentials and matching with a 1-based sentinel column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Accuracy after mapping predicted clusters to gold tags one-to-one so as to
/// maximize agreement. `max_clusters` bounds predicted ids.
pub fn clustering_accuracy(pred: &[usize], gold: &[usize], max_clusters: usize) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(EvalError::Count {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if let Some(&c) = pred.iter().find(|&&c| c >= max_clusters) {
        return Err(EvalError::TooManyClusters {
            cluster: c,
            allowed: max_clusters,
        });
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let k = max_clusters.max(gold.iter().max().map_or(0, |&g| g + 1));
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &g) in pred.iter().zip(gold) {
        counts[p][g] += 1;
    }
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let assign = hungarian(&cost);
    let matched: usize = assign.iter().enumerate().map(|(p, &g)| counts[p][g]).sum();
    Ok(matched as f64 / pred.len() as f64)
}

/// Image retrieval (language query) and text retrieval (vision query) accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub ir: f64,
    pub tr: f64,
    pub trials: usize,
}

/// `score(i, j)` is the alignment of sentence `i` with object `j`. Each trial
/// draws a query, `k − 1` distinct distractors, and places the positive at a
/// random slot; the argmax wins, ties to the lowest slot.
pub fn retrieval_eval(
    n: usize,
    score: &dyn Fn(usize, usize) -> f64,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<Retrieval> {
    if n < k || k == 0 {
        return Err(EvalError::TooFewInstances { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = [0usize; 2];
    for _ in 0..trials {
        for (dir, hit) in hits.iter_mut().enumerate() {
            let q = rng.random_range(0..n);
            let mut cands: Vec<usize> = rand::seq::index::sample(&mut rng, n - 1, k - 1)
                .into_iter()
                .map(|c| if c >= q { c + 1 } else { c })
                .collect();
            let slot = rng.random_range(0..k);
            cands.insert(slot, q);
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (i, &c) in cands.iter().enumerate() {
                let s = if dir == 0 { score(q, c) } else { score(c, q) };
                if s > best_s {
                    best_s = s;
                    best = i;
                }
            }
            *hit += usize::from(best == slot);
        }
    }
    let t = trials.max(1) as f64;
    Ok(Retrieval {
        ir: hits[0] as f64 / t,
        tr: hits[1] as f64 / t,
        trials,
    })
}

/// F1 for both modalities on one set of instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityF1 {
    pub lang: F1Pair,
    pub vis: F1Pair,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub left: ModalityF1,
    pub right: ModalityF1,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub f1: ModalityF1,
    pub baselines: Baselines,
    pub per_category: BTreeMap<String, ModalityF1>,
    pub clustering_accuracy: f64,
    pub retrieval: Option<Retrieval>,
    /// Present when some categories were held out of training.
    pub seen: Option<ModalityF1>,
    pub unseen: Option<ModalityF1>,
    pub unseen_baselines: Option<Baselines>,
}

impl EvalReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        let mut put_f1 = |prefix: &str, m: &ModalityF1| {
            out.push(format!("{prefix}.lang.corpus_f1 = {:.6}", m.lang.corpus));
            out.push(format!("{prefix}.lang.instance_f1 = {:.6}", m.lang.instance));
            out.push(format!("{prefix}.vis.corpus_f1 = {:.6}", m.vis.corpus));
            out.push(format!("{prefix}.vis.instance_f1 = {:.6}", m.vis.instance));
        };
        put_f1("model", &self.f1);
        put_f1("left_branching", &self.baselines.left);
        put_f1("right_branching", &self.baselines.right);
        for (c, m) in &self.per_category {
            put_f1(&format!("category.{c}"), m);
        }
        if let Some(s) = &self.seen {
            put_f1("seen", s);
        }
        if let Some(u) = &self.unseen {
            put_f1("unseen", u);
        }
        if let Some(b) = &self.unseen_baselines {
            put_f1("unseen.left_branching", &b.left);
            put_f1("unseen.right_branching", &b.right);
        }
        out.push(format!("clustering_accuracy = {:.6}", self.clustering_accuracy));
        if let Some(r) = &self.retrieval {
            out.push(format!("retrieval.ir = {:.6}", r.ir));
            out.push(format!("retrieval.tr = {:.6}", r.tr));
            out.push(format!("retrieval.trials = {}", r.trials));
        }
        out.push(format!("instances = {}", self.instances));
        out.join("\n") + "\n"
    }
}
