//! Exact inference for CNF grammars of the form `S → A`, `A → B C`, `T → x`.
//!
//! Symbols are laid out nonterminals first (`0..N`) then preterminals
//! (`N..N+P`). Width-1 cells only hold preterminals and wider cells only hold
//! nonterminals, so the binary rule table is consumed in four blocks by child
//! type.
//!
//! Chart cells are log scores. Each split is combined with a max-shifted
//! log-sum-exp: the child vectors are shifted by their maxima, contracted
//! against the exponentiated rule block, and the shift is added back before
//! taking the log.
//!
//! Besides log Z and the outside pass, the engine can carry a forward-mode
//! tangent along a direction over span scores. Because span marginals are the
//! derivative of log Z w.r.t. span scores, the tangent of the expected rule
//! counts is the gradient of `Σ ḡ[a,b]·m[a,b]` w.r.t. the rule log
//! probabilities; that is the backward rule for marginals on the tape.

use thiserror::Error;

use crate::tensor::{logsumexp_slice, Graph, Tensor, TensorError, Var};
use crate::tree::{ParseTree, Span};

/// Longest sequence the enumeration oracle accepts.
pub const BRUTE_FORCE_MAX_LEN: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChartError {
    #[error("sequence length {0} is below the minimum length 2")]
    TooShort(usize),
    #[error("zero-probability input: no derivation has nonzero probability")]
    ZeroProbability,
    #[error("{what}: expected {expected} values, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sequence length {len} exceeds the enumeration cap {cap}")]
    TooLong { len: usize, cap: usize },
    #[error("chart is missing its outside pass")]
    Inconsistent,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ChartError>;

/// Borrowed log rule probabilities of one grammar instance.
#[derive(Clone, Copy, Debug)]
pub struct GrammarView<'a> {
    pub n_nt: usize,
    pub n_pt: usize,
    /// `log π(S → A)`, length `N`.
    pub root: &'a [f64],
    /// `log π(A → B C)`, `N × S × S` row-major with `S = N + P`.
    pub binary: &'a [f64],
}

impl<'a> GrammarView<'a> {
    pub fn n_sym(&self) -> usize {
        self.n_nt + self.n_pt
    }

    fn check(&self, emission: &[f64], n: usize) -> Result<()> {
        if n < 2 {
            return Err(ChartError::TooShort(n));
        }
        let s = self.n_sym();
        let checks = [
            ("root", self.n_nt, self.root.len()),
            ("binary", self.n_nt * s * s, self.binary.len()),
            ("emission", n * self.n_pt, emission.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(ChartError::Shape {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

/// Canonical order of spans with width ≥ 2: by width, then start. The whole
/// span is last.
pub fn spans(n: usize) -> Vec<Span> {
    let mut out = Vec::new();
    for w in 2..=n {
        for a in 0..=n - w {
            out.push(Span::new(a, a + w));
        }
    }
    out
}

/// Like [`spans`] but starting with the `n` single-position spans.
pub fn spans_with_leaves(n: usize) -> Vec<Span> {
    let mut out: Vec<Span> = (0..n).map(|i| Span::new(i, i + 1)).collect();
    out.extend(spans(n));
    out
}

/// Probability-space rule blocks indexed `[left type][right type]`, type 0 =
/// nonterminal child, 1 = preterminal child.
struct Blocks {
    n_nt: usize,
    n_pt: usize,
    blk: [[Vec<f64>; 2]; 2],
}

impl Blocks {
    fn new(view: &GrammarView) -> Self {
        let (n, p) = (view.n_nt, view.n_pt);
        let s = n + p;
        let make = |tl: usize, tr: usize| {
            let (ol, sl) = if tl == 0 { (0, n) } else { (n, p) };
            let (or, sr) = if tr == 0 { (0, n) } else { (n, p) };
            let mut v = Vec::with_capacity(n * sl * sr);
            for a in 0..n {
                for b in 0..sl {
                    for c in 0..sr {
                        v.push(view.binary[a * s * s + (ol + b) * s + or + c].exp());
                    }
                }
            }
            v
        };
        Blocks {
            n_nt: n,
            n_pt: p,
            blk: [[make(0, 0), make(0, 1)], [make(1, 0), make(1, 1)]],
        }
    }

    fn size(&self, t: usize) -> usize {
        if t == 0 {
            self.n_nt
        } else {
            self.n_pt
        }
    }

}

/// Accumulates `(x, ẋ)` into `(acc, acċ)` in log space.
#[inline]
fn lae_tan(acc: &mut f64, acc_t: &mut f64, x: f64, xt: f64) {
    if x == f64::NEG_INFINITY {
        return;
    }
    if *acc == f64::NEG_INFINITY {
        *acc = x;
        *acc_t = xt;
        return;
    }
    let hi = acc.max(x);
    let new = hi + ((*acc - hi).exp() + (x - hi).exp()).ln();
    *acc_t = *acc_t * (*acc - new).exp() + xt * (x - new).exp();
    *acc = new;
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Inside and (optionally) outside log scores for one sequence.
#[derive(Clone, Debug)]
pub struct Chart {
    n: usize,
    n_nt: usize,
    n_pt: usize,
    /// `n × P` leaf inside scores (the emissions).
    emission: Vec<f64>,
    /// `(n+1)² × N` inside scores; only cells of width ≥ 2 are meaningful.
    inside: Vec<f64>,
    log_z: f64,
    outside: Option<Outside>,
    tangent: Option<Tangent>,
}

#[derive(Clone, Debug)]
struct Outside {
    inner: Vec<f64>,
    leaf: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Tangent {
    /// per-cell direction
    dir: Vec<f64>,
    inside: Vec<f64>,
    log_z: f64,
    outside_inner: Vec<f64>,
    outside_leaf: Vec<f64>,
}

/// Gradients of log Z w.r.t. the three log-probability inputs (expected rule
/// counts), laid out like the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleCounts {
    pub root: Vec<f64>,
    pub binary: Vec<f64>,
    pub emission: Vec<f64>,
}

/// Posterior probability that some constituent covers each span of width ≥ 2.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanMarginals {
    n: usize,
    cells: Vec<f64>,
}

impl SpanMarginals {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut cells = vec![0.0; (n + 1) * (n + 1)];
        for s in spans(n) {
            cells[s.start * (n + 1) + s.end] = f(s.start, s.end);
        }
        SpanMarginals { n, cells }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Marginal of `[a, b)`; single positions are 1 by definition.
    pub fn get(&self, a: usize, b: usize) -> f64 {
        if b - a == 1 {
            1.0
        } else {
            self.cells[a * (self.n + 1) + b]
        }
    }

    /// Values in [`spans`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        spans(self.n).iter().map(|s| self.get(s.start, s.end)).collect()
    }

    pub fn sum(&self) -> f64 {
        self.to_vec().iter().sum()
    }
}

impl Chart {
    /// Runs the inside pass. Fails on length < 2 or a zero-probability input.
    pub fn inside(view: &GrammarView, emission: &[f64], n: usize) -> Result<Chart> {
        Self::run(view, emission, n, None, false)
    }

    /// Inside and outside passes.
    pub fn inside_outside(view: &GrammarView, emission: &[f64], n: usize) -> Result<Chart> {
        Self::run(view, emission, n, None, true)
    }

    /// Inside and outside passes carrying tangents along `direction`, one
    /// value per span in [`spans`] order.
    pub fn with_tangent(
        view: &GrammarView,
        emission: &[f64],
        n: usize,
        direction: &[f64],
    ) -> Result<Chart> {
        let sp = spans(n);
        if direction.len() != sp.len() {
            return Err(ChartError::Shape {
                what: "span direction",
                expected: sp.len(),
                got: direction.len(),
            });
        }
        let mut dir = vec![0.0; (n + 1) * (n + 1)];
        for (s, &d) in sp.iter().zip(direction) {
            dir[s.start * (n + 1) + s.end] = d;
        }
        Self::run(view, emission, n, Some(dir), true)
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `d log Z / dε` when span scores are `ε·direction`; equals `Σ dir·m`.
    pub fn log_z_tangent(&self) -> Option<f64> {
        self.tangent.as_ref().map(|t| t.log_z)
    }

    /// Log inside score of nonterminal `a` over `[start, end)`, width ≥ 2.
    pub fn inside_score(&self, start: usize, end: usize, sym: usize) -> f64 {
        self.inside[self.cell(start, end) * self.n_nt + sym]
    }

    #[inline]
    fn cell(&self, a: usize, b: usize) -> usize {
        a * (self.n + 1) + b
    }

    fn run(
        view: &GrammarView,
        emission: &[f64],
        n: usize,
        dir: Option<Vec<f64>>,
        with_outside: bool,
    ) -> Result<Chart> {
        view.check(emission, n)?;
        let blocks = Blocks::new(view);
        let (nn, np) = (view.n_nt, view.n_pt);
        let ncell = (n + 1) * (n + 1);
        let mut chart = Chart {
            n,
            n_nt: nn,
            n_pt: np,
            emission: emission.to_vec(),
            inside: vec![f64::NEG_INFINITY; ncell * nn],
            log_z: f64::NEG_INFINITY,
            outside: None,
            tangent: None,
        };
        let tan = dir.is_some();
        let mut inside_t = vec![0.0; ncell * nn];
        let zeros_p = vec![0.0; np];

        let mut t_ab = vec![0.0; nn * nn.max(np)];
        let mut tt_ab = vec![0.0; nn * nn.max(np)];
        let mut acc = vec![0.0; nn];
        let mut acc_t = vec![0.0; nn];
        let mut ql = vec![0.0; nn.max(np)];
        let mut qr = vec![0.0; nn.max(np)];
        for w in 2..=n {
            for a in 0..=n - w {
                let b = a + w;
                acc.fill(f64::NEG_INFINITY);
                acc_t.fill(0.0);
                for k in a + 1..b {
                    let (tl, l, lt) = if k - a == 1 {
                        (1, &emission[a * np..(a + 1) * np], &zeros_p[..])
                    } else {
                        let c = chart.cell(a, k) * nn;
                        (0, &chart.inside[c..c + nn], &inside_t[c..c + nn])
                    };
                    let (tr, r, rt) = if b - k == 1 {
                        (1, &emission[k * np..(k + 1) * np], &zeros_p[..])
                    } else {
                        let c = chart.cell(k, b) * nn;
                        (0, &chart.inside[c..c + nn], &inside_t[c..c + nn])
                    };
                    let (ml, mr) = (max_of(l), max_of(r));
                    if ml == f64::NEG_INFINITY || mr == f64::NEG_INFINITY {
                        continue;
                    }
                    let (sl, sr) = (blocks.size(tl), blocks.size(tr));
                    for i in 0..sl {
                        ql[i] = (l[i] - ml).exp();
                    }
                    for i in 0..sr {
                        qr[i] = (r[i] - mr).exp();
                    }
                    let blk = &blocks.blk[tl][tr];
                    for x in 0..nn {
                        for y in 0..sl {
                            let row = &blk[(x * sl + y) * sr..(x * sl + y + 1) * sr];
                            let mut s = 0.0;
                            let mut st = 0.0;
                            for z in 0..sr {
                                let v = row[z] * qr[z];
                                s += v;
                                if tan {
                                    st += v * rt[z];
                                }
                            }
                            t_ab[x * sl + y] = s;
                            tt_ab[x * sl + y] = st;
                        }
                        let mut val = 0.0;
                        let mut vt = 0.0;
                        for y in 0..sl {
                            val += ql[y] * t_ab[x * sl + y];
                            if tan {
                                vt += ql[y] * (lt[y] * t_ab[x * sl + y] + tt_ab[x * sl + y]);
                            }
                        }
                        if val > 0.0 {
                            lae_tan(&mut acc[x], &mut acc_t[x], ml + mr + val.ln(), vt / val);
                        }
                    }
                }
                let c = chart.cell(a, b);
                let ds = dir.as_ref().map_or(0.0, |d| d[c]);
                for x in 0..nn {
                    chart.inside[c * nn + x] = acc[x];
                    inside_t[c * nn + x] = if acc[x] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        acc_t[x] + ds
                    };
                }
            }
        }
        let top = chart.cell(0, n) * nn;
        let terms: Vec<f64> = (0..nn).map(|x| view.root[x] + chart.inside[top + x]).collect();
        chart.log_z = logsumexp_slice(&terms);
        if chart.log_z == f64::NEG_INFINITY {
            return Err(ChartError::ZeroProbability);
        }
        let log_z_t = if tan {
            terms
                .iter()
                .zip(&inside_t[top..top + nn])
                .map(|(&t, &it)| {
                    let p = (t - chart.log_z).exp();
                    if p > 0.0 {
                        p * it
                    } else {
                        0.0
                    }
                })
                .sum()
        } else {
            0.0
        };
        if with_outside {
            let (outside, out_t) = chart.outside_pass(view, &blocks, &inside_t, dir.as_deref());
            chart.outside = Some(outside);
            if let Some(dir) = dir {
                let (oi, ol) = out_t.unwrap();
                chart.tangent = Some(Tangent {
                    dir,
                    inside: inside_t,
                    log_z: log_z_t,
                    outside_inner: oi,
                    outside_leaf: ol,
                });
            }
        }
        Ok(chart)
    }

    #[allow(clippy::type_complexity)]
    fn outside_pass(
        &self,
        view: &GrammarView,
        blocks: &Blocks,
        inside_t: &[f64],
        dir: Option<&[f64]>,
    ) -> (Outside, Option<(Vec<f64>, Vec<f64>)>) {
        let (n, nn, np) = (self.n, self.n_nt, self.n_pt);
        let tan = dir.is_some();
        let ncell = (n + 1) * (n + 1);
        let mut out_inner = vec![f64::NEG_INFINITY; ncell * nn];
        let mut out_inner_t = vec![0.0; ncell * nn];
        let mut out_leaf = vec![f64::NEG_INFINITY; n * np];
        let mut out_leaf_t = vec![0.0; n * np];
        let top = self.cell(0, n) * nn;
        out_inner[top..top + nn].copy_from_slice(view.root);

        let zeros_p = vec![0.0; np];
        let width = nn.max(np);
        let mut u = vec![0.0; nn];
        let mut ut = vec![0.0; nn];
        let mut ql = vec![0.0; width];
        let mut qr = vec![0.0; width];
        let mut t_ab = vec![0.0; nn * width];
        let mut tt_ab = vec![0.0; nn * width];
        let mut r_ac = vec![0.0; nn * width];
        let mut rt_ac = vec![0.0; nn * width];
        for w in (2..=n).rev() {
            for a in 0..=n - w {
                let b = a + w;
                let pc = self.cell(a, b);
                let ds = dir.map_or(0.0, |d| d[pc]);
                let beta = &out_inner[pc * nn..(pc + 1) * nn];
                let mp = max_of(beta);
                if mp == f64::NEG_INFINITY {
                    continue;
                }
                for x in 0..nn {
                    u[x] = (beta[x] - mp).exp();
                    ut[x] = u[x] * (out_inner_t[pc * nn + x] + ds);
                }
                for k in a + 1..b {
                    let (tl, l, lt) = if k - a == 1 {
                        (1, &self.emission[a * np..(a + 1) * np], &zeros_p[..])
                    } else {
                        let c = self.cell(a, k) * nn;
                        (0, &self.inside[c..c + nn], &inside_t[c..c + nn])
                    };
                    let (tr, r, rt) = if b - k == 1 {
                        (1, &self.emission[k * np..(k + 1) * np], &zeros_p[..])
                    } else {
                        let c = self.cell(k, b) * nn;
                        (0, &self.inside[c..c + nn], &inside_t[c..c + nn])
                    };
                    let (ml, mr) = (max_of(l), max_of(r));
                    if ml == f64::NEG_INFINITY || mr == f64::NEG_INFINITY {
                        continue;
                    }
                    let (sl, sr) = (blocks.size(tl), blocks.size(tr));
                    for i in 0..sl {
                        ql[i] = (l[i] - ml).exp();
                    }
                    for i in 0..sr {
                        qr[i] = (r[i] - mr).exp();
                    }
                    let blk = &blocks.blk[tl][tr];
                    for x in 0..nn {
                        for z in 0..sr {
                            r_ac[x * sr + z] = 0.0;
                            rt_ac[x * sr + z] = 0.0;
                        }
                        for y in 0..sl {
                            let row = &blk[(x * sl + y) * sr..(x * sl + y + 1) * sr];
                            let mut s = 0.0;
                            let mut st = 0.0;
                            for z in 0..sr {
                                let v = row[z] * qr[z];
                                s += v;
                                r_ac[x * sr + z] += ql[y] * row[z];
                                if tan {
                                    st += v * rt[z];
                                    rt_ac[x * sr + z] += ql[y] * lt[y] * row[z];
                                }
                            }
                            t_ab[x * sl + y] = s;
                            tt_ab[x * sl + y] = st;
                        }
                    }
                    // left child
                    let lc = if tl == 1 { None } else { Some(self.cell(a, k)) };
                    for y in 0..sl {
                        let mut val = 0.0;
                        let mut vt = 0.0;
                        for x in 0..nn {
                            val += u[x] * t_ab[x * sl + y];
                            if tan {
                                vt += ut[x] * t_ab[x * sl + y] + u[x] * tt_ab[x * sl + y];
                            }
                        }
                        if val > 0.0 {
                            let (slot, slot_t) = match lc {
                                None => (a * np + y, a * np + y),
                                Some(c) => (c * nn + y, c * nn + y),
                            };
                            let x = mp + mr + val.ln();
                            if lc.is_none() {
                                lae_tan(&mut out_leaf[slot], &mut out_leaf_t[slot_t], x, vt / val);
                            } else {
                                lae_tan(&mut out_inner[slot], &mut out_inner_t[slot_t], x, vt / val);
                            }
                        }
                    }
                    // right child
                    let rc = if tr == 1 { None } else { Some(self.cell(k, b)) };
                    for z in 0..sr {
                        let mut val = 0.0;
                        let mut vt = 0.0;
                        for x in 0..nn {
                            val += u[x] * r_ac[x * sr + z];
                            if tan {
                                vt += ut[x] * r_ac[x * sr + z] + u[x] * rt_ac[x * sr + z];
                            }
                        }
                        if val > 0.0 {
                            let x = mp + ml + val.ln();
                            match rc {
                                None => lae_tan(
                                    &mut out_leaf[k * np + z],
                                    &mut out_leaf_t[k * np + z],
                                    x,
                                    vt / val,
                                ),
                                Some(c) => lae_tan(
                                    &mut out_inner[c * nn + z],
                                    &mut out_inner_t[c * nn + z],
                                    x,
                                    vt / val,
                                ),
                            }
                        }
                    }
                }
            }
        }
        let outside = Outside {
            inner: out_inner,
            leaf: out_leaf,
        };
        (outside, tan.then_some((out_inner_t, out_leaf_t)))
    }

    fn outside(&self) -> Result<&Outside> {
        self.outside.as_ref().ok_or(ChartError::Inconsistent)
    }

    /// Span marginals from the inside and outside scores.
    pub fn marginals(&self) -> Result<SpanMarginals> {
        let out = self.outside()?;
        let nn = self.n_nt;
        Ok(SpanMarginals::from_fn(self.n, |a, b| {
            let c = self.cell(a, b) * nn;
            (0..nn)
                .map(|x| {
                    let s = self.inside[c + x] + out.inner[c + x] - self.log_z;
                    if s == f64::NEG_INFINITY {
                        0.0
                    } else {
                        s.exp()
                    }
                })
                .sum()
        }))
    }

    /// Expected rule counts, i.e. `∂ log Z` w.r.t. root, binary and emission
    /// log probabilities. With a tangent chart, also returns the tangents of
    /// those counts.
    pub fn rule_counts(&self, view: &GrammarView) -> Result<(RuleCounts, Option<RuleCounts>)> {
        let out = self.outside()?;
        let (n, nn, np) = (self.n, self.n_nt, self.n_pt);
        let s = nn + np;
        let tg = self.tangent.as_ref();
        let lz = self.log_z;
        let lzt = tg.map_or(0.0, |t| t.log_z);

        let top = self.cell(0, n) * nn;
        let mut root = vec![0.0; nn];
        let mut root_t = vec![0.0; nn];
        for x in 0..nn {
            let v = view.root[x] + self.inside[top + x] - lz;
            if v > f64::NEG_INFINITY {
                root[x] = v.exp();
                if let Some(t) = tg {
                    root_t[x] = root[x] * (t.inside[top + x] - lzt);
                }
            }
        }
        let mut emission = vec![0.0; n * np];
        let mut emission_t = vec![0.0; n * np];
        for i in 0..n * np {
            let v = self.emission[i] + out.leaf[i] - lz;
            if v > f64::NEG_INFINITY {
                emission[i] = v.exp();
                if let Some(t) = tg {
                    emission_t[i] = emission[i] * (t.outside_leaf[i] - lzt);
                }
            }
        }

        let mut binary = vec![0.0; nn * s * s];
        let mut binary_t = vec![0.0; nn * s * s];
        let zeros_p = vec![0.0; np];
        let zeros_n = vec![0.0; nn];
        let width = nn.max(np);
        let mut u = vec![0.0; nn];
        let mut ut = vec![0.0; nn];
        let mut ql = vec![0.0; width];
        let mut qr = vec![0.0; width];
        for w in 2..=n {
            for a in 0..=n - w {
                let b = a + w;
                let pc = self.cell(a, b);
                let ds = tg.map_or(0.0, |t| t.dir[pc]);
                let beta = &out.inner[pc * nn..(pc + 1) * nn];
                let mp = max_of(beta);
                if mp == f64::NEG_INFINITY {
                    continue;
                }
                for x in 0..nn {
                    u[x] = (beta[x] - mp).exp();
                    ut[x] = tg.map_or(0.0, |t| t.outside_inner[pc * nn + x]) + ds - lzt;
                }
                for k in a + 1..b {
                    let (tl, l, lt) = if k - a == 1 {
                        (1, &self.emission[a * np..(a + 1) * np], &zeros_p[..])
                    } else {
                        let c = self.cell(a, k) * nn;
                        let t = tg.map_or(&zeros_n[..], |t| &t.inside[c..c + nn]);
                        (0, &self.inside[c..c + nn], t)
                    };
                    let (tr, r, rt) = if b - k == 1 {
                        (1, &self.emission[k * np..(k + 1) * np], &zeros_p[..])
                    } else {
                        let c = self.cell(k, b) * nn;
                        let t = tg.map_or(&zeros_n[..], |t| &t.inside[c..c + nn]);
                        (0, &self.inside[c..c + nn], t)
                    };
                    let (ml, mr) = (max_of(l), max_of(r));
                    if ml == f64::NEG_INFINITY || mr == f64::NEG_INFINITY {
                        continue;
                    }
                    let scale = (mp + ml + mr - lz).exp();
                    let (sl, sr) = (blocks_size(tl, nn, np), blocks_size(tr, nn, np));
                    let (ol, or) = (if tl == 0 { 0 } else { nn }, if tr == 0 { 0 } else { nn });
                    for i in 0..sl {
                        ql[i] = (l[i] - ml).exp();
                    }
                    for i in 0..sr {
                        qr[i] = (r[i] - mr).exp();
                    }
                    for x in 0..nn {
                        let ux = scale * u[x];
                        if ux == 0.0 {
                            continue;
                        }
                        for y in 0..sl {
                            let uy = ux * ql[y];
                            if uy == 0.0 {
                                continue;
                            }
                            let base = x * s * s + (ol + y) * s + or;
                            for z in 0..sr {
                                let term = uy * view.binary[base + z].exp() * qr[z];
                                binary[base + z] += term;
                                if tg.is_some() {
                                    binary_t[base + z] += term * (ut[x] + lt[y] + rt[z]);
                                }
                            }
                        }
                    }
                }
            }
        }
        let counts = RuleCounts {
            root,
            binary,
            emission,
        };
        let tangents = tg.map(|_| RuleCounts {
            root: root_t,
            binary: binary_t,
            emission: emission_t,
        });
        Ok((counts, tangents))
    }
}

fn blocks_size(t: usize, nn: usize, np: usize) -> usize {
    if t == 0 {
        nn
    } else {
        np
    }
}

/// Inside log Z followed by span marginals, as one differentiable tape node.
///
/// Inputs: `root [N]`, `binary [N, S·S]` (any shape with `N·S·S` values) and
/// `emission [n, P]`. The output has `1 + |spans(n)|` entries: `log Z` then
/// the marginals in [`spans`] order.
pub fn chart_summary(
    g: &Graph,
    root: Var,
    binary: Var,
    emission: Var,
    n_nt: usize,
    n_pt: usize,
) -> Result<Var> {
    let (rv, bv, ev) = (g.value(root), g.value(binary), g.value(emission));
    let n = ev.len() / n_pt.max(1);
    let view = GrammarView {
        n_nt,
        n_pt,
        root: rv.data(),
        binary: bv.data(),
    };
    let chart = Chart::inside_outside(&view, ev.data(), n)?;
    let marg = chart.marginals()?;
    let mut out = vec![chart.log_z()];
    out.extend(marg.to_vec());
    let var = g.custom(
        "chart_summary",
        &[root, binary, emission],
        Tensor::vector(out),
        Box::new(move |gout, _, ins| {
            let view = GrammarView {
                n_nt,
                n_pt,
                root: ins[0].data(),
                binary: ins[1].data(),
            };
            let g0 = gout.data()[0];
            let dir = &gout.data()[1..];
            let (counts, tangents) = if dir.iter().any(|&d| d != 0.0) {
                let tc = Chart::with_tangent(&view, ins[2].data(), n, dir)
                    .expect("chart recomputation");
                let (c, t) = tc.rule_counts(&view).expect("outside present");
                (c, t)
            } else {
                (chart.rule_counts(&view).expect("outside present").0, None)
            };
            let combine = |c: &[f64], t: Option<&[f64]>, shape: &[usize]| {
                let data = match t {
                    Some(t) => c.iter().zip(t).map(|(c, t)| g0 * c + t).collect(),
                    None => c.iter().map(|c| g0 * c).collect(),
                };
                Tensor::new(shape.to_vec(), data).unwrap()
            };
            vec![
                combine(&counts.root, tangents.as_ref().map(|t| &t.root[..]), ins[0].shape()),
                combine(
                    &counts.binary,
                    tangents.as_ref().map(|t| &t.binary[..]),
                    ins[1].shape(),
                ),
                combine(
                    &counts.emission,
                    tangents.as_ref().map(|t| &t.emission[..]),
                    ins[2].shape(),
                ),
            ]
        }),
    )?;
    Ok(var)
}

/// Span marginals obtained by differentiating log Z through an inside chart
/// built from generic tape ops, with a zero-valued score leaf per span. Slow;
/// it exists as an independent route to check [`Chart::marginals`].
pub fn marginals_by_differentiation(
    view: &GrammarView,
    emission: &[f64],
    n: usize,
) -> Result<SpanMarginals> {
    view.check(emission, n)?;
    let (nn, np) = (view.n_nt, view.n_pt);
    let s = nn + np;
    let g = Graph::new();
    g.set_check_finite(false);
    let sp = spans(n);
    let score: Vec<Var> = sp.iter().map(|_| g.param(Tensor::scalar(0.0))).collect();
    let binary = g.constant(Tensor::new(vec![nn, s * s], view.binary.to_vec())?);
    // cell vars hold all S symbols so that the binary table applies uniformly
    let mut cells: Vec<Option<Var>> = vec![None; (n + 1) * (n + 1)];
    for i in 0..n {
        let mut v = vec![f64::NEG_INFINITY; s];
        v[nn..].copy_from_slice(&emission[i * np..(i + 1) * np]);
        cells[i * (n + 1) + i + 1] = Some(g.constant(Tensor::vector(v)));
    }
    for (si, span) in sp.iter().enumerate() {
        let (a, b) = (span.start, span.end);
        let mut per_split = Vec::new();
        for k in a + 1..b {
            let l = cells[a * (n + 1) + k].unwrap();
            let r = cells[k * (n + 1) + b].unwrap();
            // outer sum l[B] + r[C] as an [S·S] row broadcast over N
            let lm = g.reshape(l, &[s, 1])?;
            let rm = g.reshape(r, &[1, s])?;
            let ones_r = g.constant(Tensor::filled(&[1, s], 1.0));
            let ones_l = g.constant(Tensor::filled(&[s, 1], 1.0));
            let lo = g.matmul(lm, ones_r)?;
            let ro = g.matmul(ones_l, rm)?;
            let pair = g.add(lo, ro)?;
            let pair = g.reshape(pair, &[s * s])?;
            let tot = g.add_row(binary, pair)?;
            per_split.push(g.logsumexp(tot, 1)?);
        }
        let stacked = g.concat(&per_split, 0)?;
        let stacked = g.reshape(stacked, &[b - a - 1, nn])?;
        let inner = g.logsumexp(stacked, 0)?;
        let sc = g.reshape(score[si], &[1])?;
        let ones = g.constant(Tensor::filled(&[1, nn], 1.0));
        let sc = g.matmul(g.reshape(sc, &[1, 1])?, ones)?;
        let inner = g.add(inner, g.reshape(sc, &[nn])?)?;
        let pad = g.constant(Tensor::filled(&[np], f64::NEG_INFINITY));
        cells[a * (n + 1) + b] = Some(g.concat(&[inner, pad], 0)?);
    }
    let top = cells[n].unwrap();
    let top = g.slice(top, 0, nn)?;
    let root = g.constant(Tensor::vector(view.root.to_vec()));
    let tot = g.add(root, top)?;
    let log_z = g.logsumexp(tot, 0)?;
    if g.value(log_z).item() == f64::NEG_INFINITY {
        return Err(ChartError::ZeroProbability);
    }
    let grads = g.backward(log_z)?;
    let vals: Vec<f64> = score.iter().map(|&v| grads.get(v).item()).collect();
    Ok(SpanMarginals::from_fn(n, |a, b| {
        let idx = sp.iter().position(|s| s.start == a && s.end == b).unwrap();
        vals[idx]
    }))
}

/// Minimum-Bayes-risk bracketing: the binary tree maximizing the sum of its
/// span marginals. Ties go to the leftmost split.
pub fn mbr_decode(marginals: &SpanMarginals) -> ParseTree {
    let n = marginals.len();
    let idx = |a: usize, b: usize| a * (n + 1) + b;
    let mut best = vec![0.0; (n + 1) * (n + 1)];
    let mut split = vec![0usize; (n + 1) * (n + 1)];
    for w in 2..=n {
        for a in 0..=n - w {
            let b = a + w;
            let mut bk = a + 1;
            let mut bv = f64::NEG_INFINITY;
            for k in a + 1..b {
                let v = best[idx(a, k)] + best[idx(k, b)];
                if v > bv {
                    bv = v;
                    bk = k;
                }
            }
            best[idx(a, b)] = bv + marginals.get(a, b);
            split[idx(a, b)] = bk;
        }
    }
    fn build(a: usize, b: usize, n: usize, split: &[usize]) -> ParseTree {
        if b - a == 1 {
            return ParseTree::leaf(a);
        }
        let k = split[a * (n + 1) + b];
        ParseTree::node(build(a, k, n, split), build(k, b, n, split))
    }
    build(0, n, n, &split)
}

/// Highest-probability labeled derivation and its log probability.
/// Ties: leftmost split, then lowest symbol ids.
pub fn viterbi_decode(
    view: &GrammarView,
    emission: &[f64],
    n: usize,
) -> Result<(ParseTree, f64)> {
    view.check(emission, n)?;
    let (nn, np) = (view.n_nt, view.n_pt);
    let s = nn + np;
    let ncell = (n + 1) * (n + 1);
    let cell = |a: usize, b: usize| a * (n + 1) + b;
    // score[cell][sym] over all S symbols
    let mut score = vec![f64::NEG_INFINITY; ncell * s];
    let mut back = vec![(0usize, 0usize, 0usize); ncell * s];
    for i in 0..n {
        for t in 0..np {
            score[cell(i, i + 1) * s + nn + t] = emission[i * np + t];
        }
    }
    for w in 2..=n {
        for a in 0..=n - w {
            let b = a + w;
            let c = cell(a, b);
            for x in 0..nn {
                let mut bv = f64::NEG_INFINITY;
                let mut bb = (a + 1, 0, 0);
                for k in a + 1..b {
                    let (lc, rc) = (cell(a, k) * s, cell(k, b) * s);
                    for y in 0..s {
                        let ls = score[lc + y];
                        if ls == f64::NEG_INFINITY {
                            continue;
                        }
                        for z in 0..s {
                            let v = ls + score[rc + z] + view.binary[x * s * s + y * s + z];
                            if v > bv {
                                bv = v;
                                bb = (k, y, z);
                            }
                        }
                    }
                }
                score[c * s + x] = bv;
                back[c * s + x] = bb;
            }
        }
    }
    let top = cell(0, n) * s;
    let mut best = f64::NEG_INFINITY;
    let mut root_sym = 0;
    for x in 0..nn {
        let v = view.root[x] + score[top + x];
        if v > best {
            best = v;
            root_sym = x;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(ChartError::ZeroProbability);
    }
    fn build(
        a: usize,
        b: usize,
        sym: usize,
        n: usize,
        nn: usize,
        s: usize,
        back: &[(usize, usize, usize)],
    ) -> ParseTree {
        if b - a == 1 {
            return ParseTree::Leaf {
                pos: a,
                label: Some(sym - nn),
            };
        }
        let (k, y, z) = back[(a * (n + 1) + b) * s + sym];
        ParseTree::Node {
            span: Span::new(a, b),
            label: Some(sym),
            left: Box::new(build(a, k, y, n, nn, s, back)),
            right: Box::new(build(k, b, z, n, nn, s, back)),
        }
    }
    Ok((build(0, n, root_sym, n, nn, s, &back), best))
}

/// Every unlabeled binary tree over `[lo, hi)`.
pub fn all_tree_shapes(lo: usize, hi: usize) -> Vec<ParseTree> {
    if hi - lo == 1 {
        return vec![ParseTree::leaf(lo)];
    }
    let mut out = Vec::new();
    for k in lo + 1..hi {
        for l in all_tree_shapes(lo, k) {
            for r in all_tree_shapes(k, hi) {
                out.push(ParseTree::node(l.clone(), r.clone()));
            }
        }
    }
    out
}

/// Log probability of one tree shape, summed over every labeling of its nodes.
pub fn shape_log_prob(view: &GrammarView, emission: &[f64], tree: &ParseTree) -> f64 {
    let (nn, np) = (view.n_nt, view.n_pt);
    let s = nn + np;
    // per-node vector over all S symbols
    fn node(view: &GrammarView, emission: &[f64], t: &ParseTree, nn: usize, np: usize) -> Vec<f64> {
        let s = nn + np;
        match t {
            ParseTree::Leaf { pos, .. } => {
                let mut v = vec![f64::NEG_INFINITY; s];
                v[nn..].copy_from_slice(&emission[pos * np..(pos + 1) * np]);
                v
            }
            ParseTree::Node { left, right, .. } => {
                let l = node(view, emission, left, nn, np);
                let r = node(view, emission, right, nn, np);
                let mut v = vec![f64::NEG_INFINITY; s];
                let mut terms = Vec::with_capacity(s * s);
                for (x, slot) in v.iter_mut().enumerate().take(nn) {
                    terms.clear();
                    for y in 0..s {
                        for z in 0..s {
                            terms.push(view.binary[x * s * s + y * s + z] + l[y] + r[z]);
                        }
                    }
                    *slot = logsumexp_slice(&terms);
                }
                v
            }
        }
    }
    let top = node(view, emission, tree, nn, np);
    let terms: Vec<f64> = (0..nn).map(|x| view.root[x] + top[x]).collect();
    let _ = s;
    logsumexp_slice(&terms)
}

/// Reference log Z by enumerating every tree shape; only for `n ≤ 7`.
pub fn brute_force_log_z(view: &GrammarView, emission: &[f64], n: usize) -> Result<f64> {
    if n > BRUTE_FORCE_MAX_LEN {
        return Err(ChartError::TooLong {
            len: n,
            cap: BRUTE_FORCE_MAX_LEN,
        });
    }
    view.check(emission, n)?;
    let per_shape: Vec<f64> = all_tree_shapes(0, n)
        .iter()
        .map(|t| shape_log_prob(view, emission, t))
        .collect();
    Ok(logsumexp_slice(&per_shape))
}

/// Reference span marginals by enumerating every tree shape; only for `n ≤ 7`.
pub fn brute_force_marginals(
    view: &GrammarView,
    emission: &[f64],
    n: usize,
) -> Result<SpanMarginals> {
    let log_z = brute_force_log_z(view, emission, n)?;
    let mut cells = vec![0.0; (n + 1) * (n + 1)];
    for t in all_tree_shapes(0, n) {
        let p = (shape_log_prob(view, emission, &t) - log_z).exp();
        for s in t.spans() {
            cells[s.start * (n + 1) + s.end] += p;
        }
    }
    Ok(SpanMarginals::from_fn(n, |a, b| cells[a * (n + 1) + b]))
}
