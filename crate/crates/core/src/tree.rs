//! Binary constituency trees over a sequence and their bracket serializations.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Half-open span `[start, end)` over sequence positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Span { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.start, self.end)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("sequence length {0} is below the minimum of 2")]
    TooShort(usize),
    #[error("span {0} is out of range for length {1}")]
    OutOfRange(Span, usize),
    #[error("span {0} crosses span {1}")]
    Crossing(Span, Span),
    #[error("expected {expected} internal spans for length {len}, found {found}")]
    Count {
        len: usize,
        expected: usize,
        found: usize,
    },
    #[error("malformed bracket string: {0}")]
    Parse(String),
}

/// A binary tree whose leaves are the positions `0..n` in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseTree {
    Leaf {
        pos: usize,
        label: Option<usize>,
    },
    Node {
        span: Span,
        label: Option<usize>,
        left: Box<ParseTree>,
        right: Box<ParseTree>,
    },
}

impl ParseTree {
    pub fn leaf(pos: usize) -> Self {
        ParseTree::Leaf { pos, label: None }
    }

    pub fn node(left: ParseTree, right: ParseTree) -> Self {
        let span = Span::new(left.span().start, right.span().end);
        ParseTree::Node {
            span,
            label: None,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn span(&self) -> Span {
        match self {
            ParseTree::Leaf { pos, .. } => Span::new(*pos, pos + 1),
            ParseTree::Node { span, .. } => *span,
        }
    }

    pub fn label(&self) -> Option<usize> {
        match self {
            ParseTree::Leaf { label, .. } | ParseTree::Node { label, .. } => *label,
        }
    }

    pub fn len(&self) -> usize {
        self.span().width()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All internal-node spans (width ≥ 2), including the root, in pre-order.
    pub fn spans(&self) -> Vec<Span> {
        let mut out = Vec::new();
        self.collect_spans(&mut out);
        out
    }

    fn collect_spans(&self, out: &mut Vec<Span>) {
        if let ParseTree::Node {
            span, left, right, ..
        } = self
        {
            out.push(*span);
            left.collect_spans(out);
            right.collect_spans(out);
        }
    }

    /// Leaf labels left to right.
    pub fn leaf_labels(&self) -> Vec<Option<usize>> {
        match self {
            ParseTree::Leaf { label, .. } => vec![*label],
            ParseTree::Node { left, right, .. } => {
                let mut v = left.leaf_labels();
                v.extend(right.leaf_labels());
                v
            }
        }
    }

    /// Checks contiguity of every split and the `n − 1` internal-node count.
    pub fn validate(&self, n: usize) -> Result<(), TreeError> {
        if self.span() != Span::new(0, n) {
            return Err(TreeError::OutOfRange(self.span(), n));
        }
        fn walk(t: &ParseTree) -> Result<(), TreeError> {
            if let ParseTree::Node {
                span, left, right, ..
            } = t
            {
                let (l, r) = (left.span(), right.span());
                if l.start != span.start || l.end != r.start || r.end != span.end {
                    return Err(TreeError::Crossing(l, r));
                }
                walk(left)?;
                walk(right)?;
            }
            Ok(())
        }
        walk(self)?;
        let found = self.spans().len();
        if found != n - 1 {
            return Err(TreeError::Count {
                len: n,
                expected: n - 1,
                found,
            });
        }
        Ok(())
    }

    /// Rebuilds the unique binary tree whose internal spans are exactly `spans`.
    pub fn from_spans(n: usize, spans: &[Span]) -> Result<Self, TreeError> {
        if n < 2 {
            return Err(TreeError::TooShort(n));
        }
        let set: BTreeSet<Span> = spans.iter().copied().collect();
        for s in &set {
            if s.end > n || s.width() < 2 {
                return Err(TreeError::OutOfRange(*s, n));
            }
        }
        if set.len() != n - 1 || spans.len() != n - 1 {
            return Err(TreeError::Count {
                len: n,
                expected: n - 1,
                found: spans.len(),
            });
        }
        fn build(span: Span, set: &BTreeSet<Span>) -> Result<ParseTree, TreeError> {
            if span.width() == 1 {
                return Ok(ParseTree::leaf(span.start));
            }
            if !set.contains(&span) {
                return Err(TreeError::Parse(format!("missing constituent {span}")));
            }
            for k in span.start + 1..span.end {
                let l = Span::new(span.start, k);
                let r = Span::new(k, span.end);
                if (l.width() == 1 || set.contains(&l)) && (r.width() == 1 || set.contains(&r)) {
                    return Ok(ParseTree::node(build(l, set)?, build(r, set)?));
                }
            }
            Err(TreeError::Parse(format!("no binary split for {span}")))
        }
        let tree = build(Span::new(0, n), &set)?;
        tree.validate(n)?;
        Ok(tree)
    }

    pub fn left_branching(n: usize) -> Self {
        let mut t = ParseTree::leaf(0);
        for i in 1..n {
            t = ParseTree::node(t, ParseTree::leaf(i));
        }
        t
    }

    pub fn right_branching(n: usize) -> Self {
        let mut t = ParseTree::leaf(n - 1);
        for i in (0..n - 1).rev() {
            t = ParseTree::node(ParseTree::leaf(i), t);
        }
        t
    }

    /// `(a,b)` span list, e.g. `(0,4) (0,2) (2,4)`.
    pub fn to_span_list(&self) -> String {
        self.spans()
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses the output of [`ParseTree::to_span_list`].
    pub fn parse_span_list(n: usize, s: &str) -> Result<Self, TreeError> {
        let mut spans = Vec::new();
        for tok in s.split_whitespace() {
            let inner = tok
                .strip_prefix('(')
                .and_then(|t| t.strip_suffix(')'))
                .ok_or_else(|| TreeError::Parse(tok.to_string()))?;
            let (a, b) = inner
                .split_once(',')
                .ok_or_else(|| TreeError::Parse(tok.to_string()))?;
            let a: usize = a.trim().parse().map_err(|_| TreeError::Parse(tok.to_string()))?;
            let b: usize = b.trim().parse().map_err(|_| TreeError::Parse(tok.to_string()))?;
            if a >= b {
                return Err(TreeError::Parse(tok.to_string()));
            }
            spans.push(Span::new(a, b));
        }
        Self::from_spans(n, &spans)
    }

    /// S-expression with `NT<id>` / `T<id>` labels and the given leaf words.
    pub fn to_sexpr(&self, words: &[String]) -> String {
        match self {
            ParseTree::Leaf { pos, label } => {
                let w = words.get(*pos).map(String::as_str).unwrap_or("_");
                match label {
                    Some(l) => format!("(T{l} {w})"),
                    None => w.to_string(),
                }
            }
            ParseTree::Node {
                label, left, right, ..
            } => {
                let head = match label {
                    Some(l) => format!("NT{l}"),
                    None => "X".to_string(),
                };
                format!("({head} {} {})", left.to_sexpr(words), right.to_sexpr(words))
            }
        }
    }
}
