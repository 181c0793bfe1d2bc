//! Synthetic paired corpora drawn from hand-written object grammars.
//!
//! One derivation skeleton is sampled per instance. Its leaves are parts,
//! each with a global part tag and an attribute. The vision side emits one
//! feature vector per part; the language side emits a short phrase per part
//! (`[det] adj noun`). Both gold trees are read off the same skeleton, so
//! constituents correspond across modalities by construction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{ParseTree, Span, TreeError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grammar {category}: {msg}")]
    Grammar { category: String, msg: String },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("corpus sizes must be positive (train {train}, test {test})")]
    Size { train: usize, test: usize },
    #[error("feature_dim {got} is below the {need} tag and attribute dims")]
    FeatureDim { need: usize, got: usize },
    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("no derivation within depth {0} after {1} attempts")]
    Depth(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const TAGS: [&str; 12] = [
    "back_panel",
    "back_bar",
    "seat",
    "arm",
    "leg",
    "stretcher",
    "tabletop",
    "drawer",
    "headboard",
    "mattress",
    "bag_body",
    "handle",
];

const NOUNS: [[&str; 2]; 12] = [
    ["backrest", "back"],
    ["slat", "rail"],
    ["seat", "saddle"],
    ["arm", "armrest"],
    ["leg", "foot"],
    ["stretcher", "crossbar"],
    ["tabletop", "top"],
    ["drawer", "cabinet"],
    ["headboard", "headrest"],
    ["mattress", "bedding"],
    ["body", "pouch"],
    ["handle", "strap"],
];

const ADJECTIVES: [[&str; 2]; 4] = [
    ["red", "crimson"],
    ["wooden", "oak"],
    ["metal", "steel"],
    ["soft", "padded"],
];

const DETERMINERS: [&str; 3] = ["the", "a", "one"];

pub const N_ATTRIBUTES: usize = 4;

/// Fixed word inventory: determiners, then adjectives, then nouns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut words: Vec<String> = DETERMINERS.iter().map(|s| s.to_string()).collect();
        words.extend(ADJECTIVES.iter().flatten().map(|s| s.to_string()));
        words.extend(NOUNS.iter().flatten().map(|s| s.to_string()));
        Vocabulary { words }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn det(i: usize) -> usize {
        i
    }

    pub fn adjective(attr: usize, variant: usize) -> usize {
        DETERMINERS.len() + 2 * attr + variant
    }

    pub fn noun(tag: usize, variant: usize) -> usize {
        DETERMINERS.len() + 2 * N_ATTRIBUTES + 2 * tag + variant
    }

    pub fn render(&self, tokens: &[usize]) -> Vec<String> {
        tokens
            .iter()
            .map(|&t| self.words.get(t).cloned().unwrap_or_else(|| format!("<{t}>")))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sym {
    Nt(usize),
    Tag(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Rhs {
    Pair(Sym, Sym),
    /// The nonterminal is realized by a single part.
    Part(usize),
}

/// Explicit rule set of one object category.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthGrammar {
    pub category: String,
    pub nonterminals: Vec<String>,
    /// Alternatives per nonterminal; probabilities sum to 1.
    pub rules: Vec<Vec<(f64, Rhs)>>,
}

impl GroundTruthGrammar {
    /// Builds from `(lhs, [(prob, rhs)])` where `rhs` is one or two words;
    /// uppercase words are nonterminals, lowercase words are part tags. The
    /// first lhs is the start symbol.
    pub fn from_rules(category: &str, rules: &[(&str, &[(f64, &str)])]) -> Result<Self> {
        let err = |msg: String| SynthError::Grammar {
            category: category.to_string(),
            msg,
        };
        let nonterminals: Vec<String> = rules.iter().map(|(l, _)| l.to_string()).collect();
        let sym = |w: &str| -> Result<Sym> {
            if w.chars().next().is_some_and(char::is_uppercase) {
                nonterminals
                    .iter()
                    .position(|n| n == w)
                    .map(Sym::Nt)
                    .ok_or_else(|| err(format!("undefined nonterminal {w}")))
            } else {
                TAGS.iter()
                    .position(|t| *t == w)
                    .map(Sym::Tag)
                    .ok_or_else(|| err(format!("unknown part tag {w}")))
            }
        };
        let mut out = Vec::new();
        for (lhs, alts) in rules {
            let total: f64 = alts.iter().map(|(p, _)| p).sum();
            if (total - 1.0).abs() > 1e-9 || alts.iter().any(|(p, _)| *p < 0.0) {
                return Err(err(format!("rules of {lhs} sum to {total}")));
            }
            let mut parsed = Vec::new();
            for (p, rhs) in *alts {
                let words: Vec<&str> = rhs.split_whitespace().collect();
                let r = match words.as_slice() {
                    [a, b] => Rhs::Pair(sym(a)?, sym(b)?),
                    [a] => match sym(a)? {
                        Sym::Tag(t) => Rhs::Part(t),
                        Sym::Nt(_) => return Err(err(format!("unary chain {lhs} -> {a}"))),
                    },
                    _ => return Err(err(format!("rhs {rhs:?} must have one or two symbols"))),
                };
                parsed.push((*p, r));
            }
            out.push(parsed);
        }
        Ok(GroundTruthGrammar {
            category: category.to_string(),
            nonterminals,
            rules: out,
        })
    }

    /// Samples a skeleton whose leaves carry part tags; `None` past `max_depth`.
    pub fn sample_skeleton(&self, rng: &mut impl Rng, max_depth: usize) -> Option<Skeleton> {
        self.expand(0, rng, 0, max_depth)
    }

    fn expand(&self, nt: usize, rng: &mut impl Rng, depth: usize, max: usize) -> Option<Skeleton> {
        if depth > max {
            return None;
        }
        let alts = &self.rules[nt];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = alts.len() - 1;
        for (i, (p, _)) in alts.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        match &alts[pick].1 {
            Rhs::Part(t) => Some(Skeleton::Part(*t)),
            Rhs::Pair(a, b) => {
                let mut side = |s: &Sym| match s {
                    Sym::Tag(t) => Some(Skeleton::Part(*t)),
                    Sym::Nt(n) => self.expand(*n, rng, depth + 1, max),
                };
                let l = side(a)?;
                let r = side(b)?;
                Some(Skeleton::Join(Box::new(l), Box::new(r)))
            }
        }
    }
}

/// Shared derivation: binary joins over tagged parts.
#[derive(Clone, Debug, PartialEq)]
pub enum Skeleton {
    Part(usize),
    Join(Box<Skeleton>, Box<Skeleton>),
}

impl Skeleton {
    pub fn tags(&self) -> Vec<usize> {
        match self {
            Skeleton::Part(t) => vec![*t],
            Skeleton::Join(l, r) => {
                let mut v = l.tags();
                v.extend(r.tags());
                v
            }
        }
    }

    pub fn joins(&self) -> usize {
        match self {
            Skeleton::Part(_) => 0,
            Skeleton::Join(l, r) => 1 + l.joins() + r.joins(),
        }
    }
}

/// The four built-in categories: chair, table, bed, bag.
pub fn default_grammars() -> Vec<GroundTruthGrammar> {
    let chair = GroundTruthGrammar::from_rules(
        "chair",
        &[
            ("CHAIR", &[(1.0, "BACK BODY")]),
            (
                "BACK",
                &[(0.5, "back_panel"), (0.3, "back_bar back_bar"), (0.2, "back_panel back_bar")],
            ),
            ("BODY", &[(1.0, "SEAT LEGS")]),
            ("SEAT", &[(0.6, "seat"), (0.4, "seat ARMS")]),
            ("ARMS", &[(1.0, "arm arm")]),
            ("LEGS", &[(0.6, "PAIR PAIR"), (0.4, "PAIR stretcher")]),
            ("PAIR", &[(1.0, "leg leg")]),
        ],
    );
    let table = GroundTruthGrammar::from_rules(
        "table",
        &[
            ("TABLE", &[(1.0, "TOP BASE")]),
            ("TOP", &[(0.5, "tabletop"), (0.5, "tabletop DRAWERS")]),
            ("DRAWERS", &[(0.5, "drawer drawer"), (0.5, "drawer")]),
            ("BASE", &[(0.6, "LEGSET stretcher"), (0.4, "PAIR PAIR")]),
            ("LEGSET", &[(1.0, "PAIR PAIR")]),
            ("PAIR", &[(1.0, "leg leg")]),
        ],
    );
    let bed = GroundTruthGrammar::from_rules(
        "bed",
        &[
            ("BED", &[(1.0, "HEAD BODY")]),
            ("HEAD", &[(0.6, "headboard"), (0.4, "headboard PAIR")]),
            ("BODY", &[(1.0, "mattress FRAME")]),
            ("FRAME", &[(0.6, "PAIR PAIR"), (0.4, "PAIR stretcher")]),
            ("PAIR", &[(1.0, "leg leg")]),
        ],
    );
    let bag = GroundTruthGrammar::from_rules(
        "bag",
        &[
            ("BAG", &[(1.0, "BODY HANDLES")]),
            ("BODY", &[(0.4, "bag_body"), (0.6, "bag_body bag_body")]),
            ("HANDLES", &[(0.5, "HPAIR HPAIR"), (0.5, "HPAIR handle")]),
            ("HPAIR", &[(1.0, "handle handle")]),
        ],
    );
    [chair, table, bed, bag]
        .into_iter()
        .map(|g| g.expect("built-in grammars are well formed"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub feature_dim: usize,
    /// Distance, in noise standard deviations, from each tag mean to the
    /// nearest-mean decision boundary.
    pub separation: f64,
    pub sigma: f64,
    /// Weight of the attribute one-hot in part features.
    pub attr_strength: f64,
    /// Probability that a part takes its tag's usual attribute rather than a
    /// uniformly drawn one.
    pub attr_affinity: f64,
    pub det_prob: f64,
    /// Probability that a phrase names its part's attribute.
    pub adj_prob: f64,
    /// Probability of replacing a token by a uniformly random word.
    pub token_noise: f64,
    pub max_depth: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            feature_dim: 16,
            separation: 4.0,
            sigma: 1.0,
            attr_strength: 3.0,
            attr_affinity: 0.0,
            det_prob: 0.3,
            adj_prob: 1.0,
            token_noise: 0.0,
            max_depth: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let need = TAGS.len() + N_ATTRIBUTES;
        if self.feature_dim < need {
            return Err(SynthError::FeatureDim {
                need,
                got: self.feature_dim,
            });
        }
        Ok(())
    }

    /// Noise-free mean of a tag with a given attribute.
    pub fn mean(&self, tag: usize, attr: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.feature_dim];
        m[tag] = self.separation * std::f64::consts::SQRT_2 * self.sigma;
        m[TAGS.len() + attr] = self.attr_strength;
        m
    }
}

/// One paired sentence / part-sequence example.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedInstance {
    pub id: String,
    pub category: String,
    pub tokens: Vec<usize>,
    pub parts: Vec<Vec<f64>>,
    pub gold_lang_tree: Vec<Span>,
    pub gold_vis_tree: Vec<Span>,
    pub gold_part_tags: Vec<usize>,
}

impl PairedInstance {
    pub fn lang_tree(&self) -> std::result::Result<ParseTree, TreeError> {
        ParseTree::from_spans(self.tokens.len(), &self.gold_lang_tree)
    }

    pub fn vis_tree(&self) -> std::result::Result<ParseTree, TreeError> {
        ParseTree::from_spans(self.parts.len(), &self.gold_vis_tree)
    }
}

/// Per-instance generator state: derived seed and rejection counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleStats {
    pub depth_rejections: usize,
}

/// Samples one instance with its own RNG stream.
pub fn sample_instance(
    gt: &GroundTruthGrammar,
    cfg: &SynthConfig,
    id: &str,
    seed: u64,
    stats: &mut SampleStats,
) -> Result<PairedInstance> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const ATTEMPTS: usize = 1000;
    let mut skeleton = None;
    for _ in 0..ATTEMPTS {
        match gt.sample_skeleton(&mut rng, cfg.max_depth) {
            Some(s) if s.joins() >= 1 => {
                skeleton = Some(s);
                break;
            }
            _ => stats.depth_rejections += 1,
        }
    }
    let skeleton = skeleton.ok_or(SynthError::Depth(cfg.max_depth, ATTEMPTS))?;
    let tags = skeleton.tags();
    let noise = Normal::new(0.0, cfg.sigma).expect("finite sigma");
    let vocab_len = Vocabulary::default().len();

    let mut parts = Vec::with_capacity(tags.len());
    let mut phrases: Vec<Vec<usize>> = Vec::with_capacity(tags.len());
    for &t in &tags {
        let attr = if cfg.attr_affinity > 0.0 && rng.random_bool(cfg.attr_affinity) {
            t % N_ATTRIBUTES
        } else {
            rng.random_range(0..N_ATTRIBUTES)
        };
        let mut f = cfg.mean(t, attr);
        for x in &mut f {
            *x += noise.sample(&mut rng);
        }
        parts.push(f);
        let mut phrase = Vec::with_capacity(3);
        if rng.random_bool(cfg.det_prob) {
            phrase.push(Vocabulary::det(rng.random_range(0..DETERMINERS.len())));
        }
        if rng.random_bool(cfg.adj_prob) {
            phrase.push(Vocabulary::adjective(attr, rng.random_range(0..2)));
        }
        phrase.push(Vocabulary::noun(t, rng.random_range(0..2)));
        if cfg.token_noise > 0.0 {
            for w in &mut phrase {
                if rng.random_bool(cfg.token_noise) {
                    *w = rng.random_range(0..vocab_len);
                }
            }
        }
        phrases.push(phrase);
    }

    // vision tree: skeleton over part positions
    let mut vis = Vec::new();
    let mut pos = 0;
    collect_spans(&skeleton, &mut pos, &mut |_| 1, &mut vis);
    // language tree: skeleton over token offsets plus phrase-internal spans
    let mut lang = Vec::new();
    let mut pos = 0;
    let mut leaf_i = 0;
    collect_spans(
        &skeleton,
        &mut pos,
        &mut |_| {
            let w = phrases[leaf_i].len();
            leaf_i += 1;
            w
        },
        &mut lang,
    );
    let mut off = 0;
    for p in &phrases {
        if p.len() >= 2 {
            lang.push(Span::new(off + p.len() - 2, off + p.len()));
        }
        if p.len() == 3 {
            lang.push(Span::new(off, off + 3));
        }
        off += p.len();
    }
    lang.sort();
    vis.sort();
    Ok(PairedInstance {
        id: id.to_string(),
        category: gt.category.clone(),
        tokens: phrases.concat(),
        parts,
        gold_lang_tree: lang,
        gold_vis_tree: vis,
        gold_part_tags: tags,
    })
}

fn collect_spans(
    s: &Skeleton,
    pos: &mut usize,
    width: &mut impl FnMut(usize) -> usize,
    out: &mut Vec<Span>,
) {
    match s {
        Skeleton::Part(t) => *pos += width(*t),
        Skeleton::Join(l, r) => {
            let start = *pos;
            collect_spans(l, pos, width, out);
            collect_spans(r, pos, width, out);
            out.push(Span::new(start, *pos));
        }
    }
}

/// Stream-independent seed for one instance.
pub fn instance_seed(seed: u64, split: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split);
    rng.set_word_pos(2 * index as u128);
    rng.random()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<PairedInstance>,
    pub test: Vec<PairedInstance>,
    pub depth_rejections: usize,
}

/// Generates `n_train` / `n_test` instances split evenly over `grammars`
/// (earlier categories take the remainder). Categories in `holdout` are
/// dropped from the training split only.
pub fn generate_corpus(
    grammars: &[GroundTruthGrammar],
    cfg: &SynthConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
    holdout: &[String],
) -> Result<Corpus> {
    if n_train == 0 || n_test == 0 {
        return Err(SynthError::Size {
            train: n_train,
            test: n_test,
        });
    }
    for h in holdout {
        if !grammars.iter().any(|g| &g.category == h) {
            return Err(SynthError::UnknownCategory(h.clone()));
        }
    }
    let mut stats = SampleStats::default();
    let mut split = |total: usize, split_id: u64, keep: &dyn Fn(&str) -> bool| {
        let k = grammars.len();
        let mut out = Vec::new();
        let mut index = 0u64;
        for (ci, g) in grammars.iter().enumerate() {
            let count = total / k + usize::from(ci < total % k);
            for j in 0..count {
                let id = format!("{}-{}-{j:05}", g.category, if split_id == 0 { "train" } else { "test" });
                let s = instance_seed(seed, split_id, index);
                index += 1;
                if keep(&g.category) {
                    out.push(sample_instance(g, cfg, &id, s, &mut stats)?);
                }
            }
        }
        Ok::<_, SynthError>(out)
    };
    let train = split(n_train, 0, &|c| !holdout.iter().any(|h| h == c))?;
    let test = split(n_test, 1, &|_| true)?;
    Ok(Corpus {
        train,
        test,
        depth_rejections: stats.depth_rejections,
    })
}

/// Median token count, part count and skeleton join count.
pub fn corpus_medians(instances: &[PairedInstance]) -> (f64, f64, f64) {
    let median = |mut v: Vec<usize>| -> f64 {
        v.sort_unstable();
        let n = v.len();
        if n == 0 {
            0.0
        } else if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        }
    };
    (
        median(instances.iter().map(|i| i.tokens.len()).collect()),
        median(instances.iter().map(|i| i.parts.len()).collect()),
        median(instances.iter().map(|i| i.gold_vis_tree.len()).collect()),
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    category: String,
    tokens: Vec<usize>,
    parts: Vec<Vec<f64>>,
    gold_lang_tree: Vec<[usize; 2]>,
    gold_vis_tree: Vec<[usize; 2]>,
    gold_part_tags: Vec<usize>,
}

fn write_float(out: &mut String, x: f64) {
    write!(out, "{x:.16e}").unwrap();
}

fn write_spans(out: &mut String, spans: &[Span]) {
    out.push('[');
    for (i, s) in spans.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "[{},{}]", s.start, s.end).unwrap();
    }
    out.push(']');
}

/// One JSON object per line; floats carry 17 significant digits.
pub fn to_json_line(inst: &PairedInstance) -> String {
    let mut s = String::new();
    s.push_str("{\"id\":");
    s.push_str(&serde_json::to_string(&inst.id).unwrap());
    s.push_str(",\"category\":");
    s.push_str(&serde_json::to_string(&inst.category).unwrap());
    s.push_str(",\"tokens\":");
    s.push_str(&serde_json::to_string(&inst.tokens).unwrap());
    s.push_str(",\"parts\":[");
    for (i, p) in inst.parts.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push('[');
        for (j, &x) in p.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write_float(&mut s, x);
        }
        s.push(']');
    }
    s.push_str("],\"gold_lang_tree\":");
    write_spans(&mut s, &inst.gold_lang_tree);
    s.push_str(",\"gold_vis_tree\":");
    write_spans(&mut s, &inst.gold_vis_tree);
    s.push_str(",\"gold_part_tags\":");
    s.push_str(&serde_json::to_string(&inst.gold_part_tags).unwrap());
    s.push('}');
    s
}

/// Parses one record; `line` is 1-based and only used in errors.
pub fn from_json_line(text: &str, line: usize) -> Result<PairedInstance> {
    let rec: Record = serde_json::from_str(text).map_err(|e| SynthError::Record {
        line,
        msg: e.to_string(),
    })?;
    let bad = |msg: String| SynthError::Record { line, msg };
    let spans = |v: &[[usize; 2]]| -> Result<Vec<Span>> {
        v.iter()
            .map(|&[a, b]| {
                if a < b {
                    Ok(Span::new(a, b))
                } else {
                    Err(bad(format!("empty span [{a},{b}]")))
                }
            })
            .collect()
    };
    let inst = PairedInstance {
        id: rec.id,
        category: rec.category,
        tokens: rec.tokens,
        parts: rec.parts,
        gold_lang_tree: spans(&rec.gold_lang_tree)?,
        gold_vis_tree: spans(&rec.gold_vis_tree)?,
        gold_part_tags: rec.gold_part_tags,
    };
    if inst.tokens.len() < 2 || inst.parts.len() < 2 {
        return Err(bad("sequences need length >= 2".into()));
    }
    if inst.gold_part_tags.len() != inst.parts.len() {
        return Err(bad("gold_part_tags length differs from parts".into()));
    }
    if inst.parts.iter().any(|p| p.len() != inst.parts[0].len()) {
        return Err(bad("parts have unequal widths".into()));
    }
    inst.lang_tree().map_err(|e| bad(format!("gold_lang_tree: {e}")))?;
    inst.vis_tree().map_err(|e| bad(format!("gold_vis_tree: {e}")))?;
    Ok(inst)
}

pub fn write_dataset(path: &Path, instances: &[PairedInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        writeln!(f, "{}", to_json_line(inst))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a dataset; blank lines are skipped and an empty file is an empty corpus.
pub fn read_dataset(path: &Path) -> Result<Vec<PairedInstance>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_json_line(&line, i + 1)?);
    }
    Ok(out)
}

/// Dataset-level metadata written next to the splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub vocabulary: Vec<String>,
    pub tags: Vec<String>,
    pub categories: Vec<String>,
    pub holdout: Vec<String>,
    pub seed: u64,
    pub synth: SynthConfig,
    pub counts: BTreeMap<String, usize>,
}
