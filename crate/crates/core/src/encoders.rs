//! Sequence encoders: Gaussian posteriors over `z`, span embeddings for
//! alignment, and the perception map `ψ` over raw part features.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, Bound, FeedForward, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::tree::Span;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("cannot encode an empty sequence")]
    Empty,
    #[error("span embeddings need length >= 2, got {0}")]
    TooShort(usize),
    #[error("token id {token} is outside the vocabulary of {size}")]
    Token { token: usize, size: usize },
    #[error("input has {got} features, expected {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Diagonal Gaussian `q(z | x)`.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mean: Var,
    pub logvar: Var,
}

impl Posterior {
    /// `KL(q ‖ N(0, I))` as a scalar.
    pub fn kl(&self, g: &Graph) -> Result<Var> {
        let m2 = g.square(self.mean)?;
        let v = g.exp(self.logvar)?;
        let t = g.add(m2, v)?;
        let t = g.sub(t, self.logvar)?;
        let t = g.add_scalar(t, -1.0)?;
        let s = g.sum(t)?;
        Ok(g.scale(s, 0.5)?)
    }

    /// `μ + σ ⊙ ε`.
    pub fn sample(&self, g: &Graph, eps: &[f64]) -> Result<Var> {
        let half = g.scale(self.logvar, 0.5)?;
        let sd = g.exp(half)?;
        let e = g.constant(Tensor::vector(eps.to_vec()));
        let noise = g.mul(sd, e)?;
        Ok(g.add(self.mean, noise)?)
    }
}

/// Analytic `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn gaussian_kl(mean: &[f64], logvar: &[f64]) -> f64 {
    mean.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Single-layer tanh recurrence run in both directions.
#[derive(Clone, Debug)]
pub struct BiRnn {
    input: usize,
    hidden: usize,
    fwd: [ParamId; 3],
    bwd: [ParamId; 3],
}

impl BiRnn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dir = |name: &str| {
            [
                store.add_scaled(format!("{prefix}.{name}.w_in"), &[input, hidden], input, rng),
                store.add_scaled(format!("{prefix}.{name}.w_rec"), &[hidden, hidden], hidden, rng),
                store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[hidden])),
            ]
        };
        let fwd = dir("fwd");
        let bwd = dir("bwd");
        BiRnn {
            input,
            hidden,
            fwd,
            bwd,
        }
    }

    /// Width of each output state (both directions).
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// `x: [n, input]` to states `[n, 2·hidden]`.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let n = shape[0];
        if n == 0 {
            return Err(EncoderError::Empty);
        }
        if shape[1] != self.input {
            return Err(EncoderError::FeatureDim {
                expected: self.input,
                got: shape[1],
            });
        }
        let run = |w: &[ParamId; 3], order: Vec<usize>| -> Result<Vec<Var>> {
            let proj = g.affine(x, p.var(w[0]), p.var(w[2]))?;
            let mut states = vec![None; n];
            let mut prev: Option<Var> = None;
            for t in order {
                let xt = g.rows(proj, &[t])?;
                let pre = match prev {
                    Some(h) => {
                        let r = g.matmul(h, p.var(w[1]))?;
                        g.add(xt, r)?
                    }
                    None => xt,
                };
                let h = g.tanh(pre)?;
                states[t] = Some(h);
                prev = Some(h);
            }
            Ok(states.into_iter().map(Option::unwrap).collect())
        };
        let f = run(&self.fwd, (0..n).collect())?;
        let b = run(&self.bwd, (0..n).rev().collect())?;
        let f = g.concat(&f, 0)?;
        let b = g.concat(&b, 0)?;
        Ok(g.concat(&[f, b], 1)?)
    }
}

/// `[spans, n]` matrix whose row for `[a, b)` averages positions `a..b`.
pub fn span_average_matrix(n: usize, spans: &[Span]) -> Tensor {
    let mut data = vec![0.0; spans.len() * n];
    for (r, s) in spans.iter().enumerate() {
        let w = 1.0 / s.width() as f64;
        for i in s.start..s.end {
            data[r * n + i] = w;
        }
    }
    Tensor::new(vec![spans.len(), n], data).expect("shape matches")
}

fn mean_rows(g: &Graph, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let avg = g.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
    Ok(g.matmul(avg, x)?)
}

/// Mean pooling then an affine head split into `(μ, log σ²)`.
#[derive(Clone, Debug)]
struct PosteriorHead {
    w: ParamId,
    b: ParamId,
    z_dim: usize,
}

impl PosteriorHead {
    fn new(store: &mut ParamStore, prefix: &str, input: usize, z_dim: usize) -> Self {
        PosteriorHead {
            w: store.add(format!("{prefix}.post.weight"), Tensor::zeros(&[input, 2 * z_dim])),
            b: store.add(format!("{prefix}.post.bias"), Tensor::zeros(&[2 * z_dim])),
            z_dim,
        }
    }

    fn forward(&self, g: &Graph, p: &Bound, states: Var) -> Result<Posterior> {
        let pooled = mean_rows(g, states)?;
        let out = g.affine(pooled, p.var(self.w), p.var(self.b))?;
        Ok(Posterior {
            mean: g.slice(out, 0, self.z_dim)?,
            logvar: g.slice(out, self.z_dim, 2 * self.z_dim)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub z_dim: usize,
    pub rnn_hidden: usize,
    pub align_dim: usize,
    /// Language only.
    pub word_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            z_dim: 8,
            rnn_hidden: 32,
            align_dim: 64,
            word_dim: 32,
        }
    }
}

/// Token embeddings, a shared BiRNN, a posterior head and a span head.
#[derive(Clone, Debug)]
pub struct LanguageEncoder {
    vocab: usize,
    embed: ParamId,
    rnn: BiRnn,
    post: Option<PosteriorHead>,
    span_w: ParamId,
    span_b: ParamId,
}

impl LanguageEncoder {
    pub fn new(store: &mut ParamStore, vocab: usize, spec: &EncoderSpec, rng: &mut impl Rng) -> Self {
        let embed = store.add_scaled("lang.enc.embed", &[vocab, spec.word_dim], 1, rng);
        let rnn = BiRnn::new(store, "lang.enc.rnn", spec.word_dim, spec.rnn_hidden, rng);
        let d = rnn.output_dim();
        let post = (spec.z_dim > 0).then(|| PosteriorHead::new(store, "lang.enc", d, spec.z_dim));
        let span_w = store.add_scaled("lang.enc.span.weight", &[d, spec.align_dim], d, rng);
        let span_b = store.add("lang.enc.span.bias", Tensor::zeros(&[spec.align_dim]));
        LanguageEncoder {
            vocab,
            embed,
            rnn,
            post,
            span_w,
            span_b,
        }
    }

    pub fn span_head(&self) -> (ParamId, ParamId) {
        (self.span_w, self.span_b)
    }

    /// BiRNN states `[n, 2·hidden]`.
    pub fn states(&self, g: &Graph, p: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(EncoderError::Empty);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(EncoderError::Token {
                token: bad,
                size: self.vocab,
            });
        }
        let x = g.rows(p.var(self.embed), tokens)?;
        self.rnn.forward(g, p, x)
    }

    /// `None` when `z_dim = 0`.
    pub fn posterior(&self, g: &Graph, p: &Bound, states: Var) -> Result<Option<Posterior>> {
        self.post.as_ref().map(|h| h.forward(g, p, states)).transpose()
    }

    /// One embedding per span, rows in the order of `spans`.
    pub fn embed_spans(&self, g: &Graph, p: &Bound, states: Var, spans: &[Span]) -> Result<Var> {
        embed_spans(g, p, states, spans, self.span_w, self.span_b)
    }
}

fn embed_spans(
    g: &Graph,
    p: &Bound,
    states: Var,
    spans: &[Span],
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let n = g.shape(states)[0];
    if n < 2 {
        return Err(EncoderError::TooShort(n));
    }
    let avg = g.constant(span_average_matrix(n, spans));
    let pooled = g.matmul(avg, states)?;
    Ok(g.affine(pooled, p.var(w), p.var(b))?)
}

/// Perception `ψ`, a BiRNN over `ψ(v)` for the posterior, and the span head
/// `f_v` over mean `ψ` features.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    psi: FeedForward,
    rnn: BiRnn,
    post: Option<PosteriorHead>,
    span_w: ParamId,
    span_b: ParamId,
}

impl VisionEncoder {
    /// `psi_dims = [raw, .., feature]`; `[raw]` makes `ψ` the identity.
    pub fn new(
        store: &mut ParamStore,
        psi_dims: &[usize],
        spec: &EncoderSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let psi = FeedForward::new(store, "vis.psi", psi_dims, Activation::Tanh, rng);
        let d = psi.output_dim();
        let rnn = BiRnn::new(store, "vis.enc.rnn", d, spec.rnn_hidden, rng);
        let post = (spec.z_dim > 0)
            .then(|| PosteriorHead::new(store, "vis.enc", rnn.output_dim(), spec.z_dim));
        let span_w = store.add_scaled("vis.enc.span.weight", &[d, spec.align_dim], d, rng);
        let span_b = store.add("vis.enc.span.bias", Tensor::zeros(&[spec.align_dim]));
        VisionEncoder {
            psi,
            rnn,
            post,
            span_w,
            span_b,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.psi.output_dim()
    }

    pub fn psi(&self) -> &FeedForward {
        &self.psi
    }

    pub fn span_head(&self) -> (ParamId, ParamId) {
        (self.span_w, self.span_b)
    }

    /// `ψ` applied to raw part features `[M, raw]`.
    pub fn perceive(&self, g: &Graph, p: &Bound, raw: Var) -> Result<Var> {
        let shape = g.shape(raw);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(EncoderError::Empty);
        }
        if shape[1] != self.psi.input_dim() {
            return Err(EncoderError::FeatureDim {
                expected: self.psi.input_dim(),
                got: shape[1],
            });
        }
        Ok(self.psi.forward(g, p, raw)?)
    }

    pub fn posterior(&self, g: &Graph, p: &Bound, features: Var) -> Result<Option<Posterior>> {
        match &self.post {
            None => Ok(None),
            Some(h) => {
                let states = self.rnn.forward(g, p, features)?;
                h.forward(g, p, states).map(Some)
            }
        }
    }

    pub fn embed_spans(&self, g: &Graph, p: &Bound, features: Var, spans: &[Span]) -> Result<Var> {
        embed_spans(g, p, features, spans, self.span_w, self.span_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::spans;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> EncoderSpec {
        EncoderSpec {
            z_dim: 2,
            rnn_hidden: 3,
            align_dim: 4,
            word_dim: 3,
        }
    }

    #[test]
    fn kl_reference_values() {
        assert_eq!(gaussian_kl(&[0.0], &[0.0]), 0.0);
        assert_eq!(gaussian_kl(&[1.0], &[0.0]), 0.5);
        let g = Graph::new();
        let q = Posterior {
            mean: g.constant(Tensor::vector(vec![1.0, -0.5])),
            logvar: g.constant(Tensor::vector(vec![0.3, -0.2])),
        };
        let kl = g.value(q.kl(&g).unwrap()).item();
        assert!((kl - gaussian_kl(&[1.0, -0.5], &[0.3, -0.2])).abs() < 1e-15);
    }

    #[test]
    fn zero_head_gives_standard_posterior() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = LanguageEncoder::new(&mut store, 5, &spec(), &mut rng);
        let g = Graph::new();
        let p = store.bind(&g);
        let h = enc.states(&g, &p, &[0, 3, 4]).unwrap();
        let q = enc.posterior(&g, &p, h).unwrap().unwrap();
        assert_eq!(g.value(q.mean).data(), &[0.0, 0.0]);
        assert_eq!(g.value(q.logvar).data(), &[0.0, 0.0]);
        assert_eq!(g.value(q.kl(&g).unwrap()).item(), 0.0);
        assert!(enc.states(&g, &p, &[]).is_err());
        assert!(enc.states(&g, &p, &[5]).is_err());
    }

    #[test]
    fn vanishing_variance_returns_mean() {
        let g = Graph::new();
        let q = Posterior {
            mean: g.constant(Tensor::vector(vec![0.25, -1.5])),
            logvar: g.constant(Tensor::vector(vec![-800.0, -800.0])),
        };
        let z = q.sample(&g, &[1.3, -0.4]).unwrap();
        assert_eq!(g.value(z).data(), &[0.25, -1.5]);
    }

    #[test]
    fn span_embeddings_average_states() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = LanguageEncoder::new(&mut store, 6, &spec(), &mut rng);
        let g = Graph::new();
        let p = store.bind(&g);
        let h = enc.states(&g, &p, &[1, 2, 5, 0]).unwrap();
        let sp = vec![Span::new(0, 1), Span::new(0, 2), Span::new(0, 4)];
        let e = enc.embed_spans(&g, &p, h, &sp).unwrap();
        let hv = g.value(h);
        let (w, b) = enc.span_head();
        let (w, b) = (store.get(w), store.get(b));
        let direct = |avg: Vec<f64>| -> Vec<f64> {
            (0..4)
                .map(|j| (0..6).map(|k| avg[k] * w.at(k, j)).sum::<f64>() + b.data()[j])
                .collect()
        };
        let rows: Vec<Vec<f64>> = vec![
            hv.row(0).to_vec(),
            (0..6).map(|k| (hv.at(0, k) + hv.at(1, k)) / 2.0).collect(),
            (0..6).map(|k| (0..4).map(|i| hv.at(i, k)).sum::<f64>() / 4.0).collect(),
        ];
        let ev = g.value(e);
        for (r, avg) in rows.into_iter().enumerate() {
            for (j, x) in direct(avg).into_iter().enumerate() {
                assert!((ev.at(r, j) - x).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_features_share_one_embedding() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = VisionEncoder::new(&mut store, &[3], &spec(), &mut rng);
        let g = Graph::new();
        let p = store.bind(&g);
        let raw = g.constant(Tensor::matrix(4, 3, [0.2, -1.0, 0.5].repeat(4)).unwrap());
        let f = enc.perceive(&g, &p, raw).unwrap();
        assert_eq!(g.value(f).data(), g.value(raw).data());
        let e = enc.embed_spans(&g, &p, f, &spans(4)).unwrap();
        let ev = g.value(e);
        for r in 1..ev.dims2().unwrap().0 {
            for j in 0..4 {
                assert!((ev.at(r, j) - ev.at(0, j)).abs() < 1e-15);
            }
        }
        let wrong = g.constant(Tensor::zeros(&[2, 4]));
        assert!(enc.perceive(&g, &p, wrong).is_err());
    }

    #[test]
    fn perception_net_matches_direct_evaluation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = VisionEncoder::new(&mut store, &[2, 3, 2], &spec(), &mut rng);
        let (w0, b0) = enc.psi().layers()[0];
        let (w1, b1) = enc.psi().layers()[1];
        store.get_mut(b1).data_mut().copy_from_slice(&[0.1, -0.1]);
        let (w0, b0, w1, b1) = (
            store.get(w0).clone(),
            store.get(b0).clone(),
            store.get(w1).clone(),
            store.get(b1).clone(),
        );
        let x = [0.7, -0.2];
        let h: Vec<f64> = (0..3)
            .map(|j| (x[0] * w0.at(0, j) + x[1] * w0.at(1, j) + b0.data()[j]).tanh())
            .collect();
        let y: Vec<f64> = (0..2)
            .map(|j| ((0..3).map(|k| h[k] * w1.at(k, j)).sum::<f64>() + b1.data()[j]).tanh())
            .collect();
        let g = Graph::new();
        let p = store.bind(&g);
        let raw = g.constant(Tensor::matrix(1, 2, x.to_vec()).unwrap());
        let f = enc.perceive(&g, &p, raw).unwrap();
        for (a, b) in g.value(f).data().iter().zip(y) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = VisionEncoder::new(&mut store, &[3, 3], &spec(), &mut rng);
        // nonzero posterior head so μ and log σ² depend on the inputs
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains("post") {
                for (i, x) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                    *x = 0.1 * ((i % 5) as f64 - 2.0);
                }
            }
        }
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let np = inputs.len();
        inputs.push(
            Tensor::matrix(3, 3, vec![0.1, 0.5, -0.3, 0.9, -0.7, 0.2, 0.0, 0.4, 0.8]).unwrap(),
        );
        let report = gradcheck(&inputs, 1e-5, |g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let lift = |e: EncoderError| match e {
                EncoderError::Tensor(t) => t,
                other => panic!("{other}"),
            };
            let f = enc.perceive(g, &p, v[np]).map_err(lift)?;
            let q = enc.posterior(g, &p, f).map_err(lift)?.unwrap();
            let z = q.sample(g, &[0.3, -1.1]).map_err(lift)?;
            let kl = q.kl(g).map_err(lift)?;
            let e = enc.embed_spans(g, &p, f, &spans(3)).map_err(lift)?;
            let es = g.square(e)?;
            let es = g.sum(es)?;
            let zs = g.sum(z)?;
            g.add_n(&[kl, es, zs])
        })
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }
}
