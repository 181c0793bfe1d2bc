//! Randomised checks of structural properties across modules.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jointgram::chart::{
    brute_force_log_z, marginals_by_differentiation, mbr_decode, spans, viterbi_decode, Chart,
    GrammarView,
};
use jointgram::encoders::{EncoderSpec, LanguageEncoder, Posterior};
use jointgram::eval::{clustering_accuracy, f1_pair, retrieval_eval};
use jointgram::grounding::{contrastive_loss, contrastive_loss_value};
use jointgram::nn::ParamStore;
use jointgram::pcfg::{clustering_posterior, CompoundPcfg, GrammarSpec};
use jointgram::synth::{corpus_medians, default_grammars, generate_corpus, SynthConfig};
use jointgram::tensor::{gradcheck, logsumexp_slice, Graph, Tensor, TensorError, Var};
use jointgram::tree::{ParseTree, Span};

struct RandomGrammar {
    n_nt: usize,
    n_pt: usize,
    root: Vec<f64>,
    binary: Vec<f64>,
    emission: Vec<f64>,
}

impl RandomGrammar {
    fn new(seed: u64, n_nt: usize, n_pt: usize, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normalized = |k: usize| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = logsumexp_slice(&raw);
            raw.into_iter().map(|x| x - z).collect::<Vec<f64>>()
        };
        let s = n_nt + n_pt;
        let root = normalized(n_nt);
        let binary = (0..n_nt).flat_map(|_| normalized(s * s)).collect();
        let emission = (0..n).flat_map(|_| normalized(n_pt)).collect();
        RandomGrammar {
            n_nt,
            n_pt,
            root,
            binary,
            emission,
        }
    }

    fn view(&self) -> GrammarView<'_> {
        GrammarView {
            n_nt: self.n_nt,
            n_pt: self.n_pt,
            root: &self.root,
            binary: &self.binary,
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// A chain of `depth` ops on a `[3, 4]` input, picked by `ops`.
fn layered(g: &Graph, x: Var, w: Var, ops: &[u8]) -> Result<Var, TensorError> {
    let mut h = x;
    for &op in ops {
        h = match op % 6 {
            0 => g.tanh(h)?,
            1 => g.log_softmax(h, 1)?,
            2 => g.normalize_rows(h)?,
            3 => g.matmul(h, w)?,
            4 => g.mul(h, g.softmax(h, 0)?)?,
            _ => g.logsumexp(g.concat(&[h, g.square(h)?], 1)?, 1).and_then(|v| {
                let col = g.reshape(v, &[3, 1])?;
                g.concat(&[col, col, col, col], 1)
            })?,
        };
    }
    g.sum(g.square(h)?)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_graphs_pass_finite_differences(seed in any::<u64>(), ops in proptest::collection::vec(0u8..6, 5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 4])];
        let report = gradcheck(&inputs, 1e-5, |g, v| layered(g, v[0], v[1], &ops)).unwrap();
        prop_assert!(report.passes(1e-6), "{:?} on ops {:?}", report, ops);
    }

    #[test]
    fn forward_and_gradients_are_bitwise_repeatable(seed in any::<u64>(), ops in proptest::collection::vec(0u8..6, 5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, w) = (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 4]));
        let run = || {
            let g = Graph::new();
            let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
            let out = layered(&g, xv, wv, &ops).unwrap();
            let grads = g.backward(out).unwrap();
            (g.value(out).item().to_bits(), grads.get(xv), grads.get(wv))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.value(g.log_softmax(x, 1).unwrap());
        for r in 0..rows {
            let total: f64 = y.row(r).iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inside_equals_enumeration(seed in any::<u64>(), n_nt in 1usize..=4, n_pt in 1usize..=3, n in 2usize..=6) {
        let gr = RandomGrammar::new(seed, n_nt, n_pt, n);
        let chart = Chart::inside(&gr.view(), &gr.emission, n).unwrap();
        let reference = brute_force_log_z(&gr.view(), &gr.emission, n).unwrap();
        prop_assert!((chart.log_z() - reference).abs() < 1e-9);
    }

    #[test]
    fn outside_marginals_agree_with_differentiation(seed in any::<u64>(), n_nt in 1usize..=4, n_pt in 1usize..=3, n in 2usize..=7) {
        let gr = RandomGrammar::new(seed, n_nt, n_pt, n);
        let outside = Chart::inside_outside(&gr.view(), &gr.emission, n).unwrap().marginals().unwrap();
        let diff = marginals_by_differentiation(&gr.view(), &gr.emission, n).unwrap();
        for s in spans(n) {
            let m = outside.get(s.start, s.end);
            prop_assert!((m - diff.get(s.start, s.end)).abs() < 1e-8);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&m));
        }
        prop_assert!((outside.sum() - (n - 1) as f64).abs() < 1e-6);
    }

    #[test]
    fn decoded_trees_are_valid(seed in any::<u64>(), n_nt in 1usize..=3, n_pt in 1usize..=3, n in 2usize..=9) {
        let gr = RandomGrammar::new(seed, n_nt, n_pt, n);
        let m = Chart::inside_outside(&gr.view(), &gr.emission, n).unwrap().marginals().unwrap();
        mbr_decode(&m).validate(n).unwrap();
        let (tree, log_p) = viterbi_decode(&gr.view(), &gr.emission, n).unwrap();
        tree.validate(n).unwrap();
        let log_z = Chart::inside(&gr.view(), &gr.emission, n).unwrap().log_z();
        prop_assert!(log_p <= log_z + 1e-9);
    }

    #[test]
    fn rule_distributions_normalize(seed in any::<u64>(), n_nt in 1usize..=4, n_pt in 1usize..=4, z_dim in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lang = GrammarSpec { symbol_dim: 4, hidden: 5, z_dim, ..GrammarSpec::language(n_nt, n_pt, 6) };
        let vis = GrammarSpec { symbol_dim: 4, hidden: 5, z_dim, ..GrammarSpec::vision(n_nt, n_pt, 3) };
        let lg = CompoundPcfg::new(lang, &mut store, &mut rng).unwrap();
        let vg = CompoundPcfg::new(vis, &mut store, &mut rng).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let z = (z_dim > 0).then(|| g.constant(rand_tensor(&mut rng, &[z_dim])));
        let rows_sum_to_one = |t: &Tensor, log: bool| {
            let (r, c) = t.dims2().unwrap();
            (0..r).all(|i| {
                let s: f64 = (0..c).map(|j| if log { t.at(i, j).exp() } else { t.at(i, j) }).sum();
                (s - 1.0).abs() < 1e-12
            })
        };
        let r = lg.rule_probs(&g, &p, z).unwrap();
        prop_assert!(logsumexp_slice(g.value(r.root).data()).abs() < 1e-12);
        prop_assert!(rows_sum_to_one(&g.value(r.binary), true));
        prop_assert!(rows_sum_to_one(&g.value(r.terminal.unwrap()), true));

        let parts = g.constant(rand_tensor(&mut rng, &[5, 3]));
        let scores = vg.terminal_scores(&g, &p, parts).unwrap();
        let emissions = g.transpose(vg.part_emissions(&g, scores).unwrap()).unwrap();
        prop_assert!(rows_sum_to_one(&g.value(emissions), true));
        let post = clustering_posterior(&g, scores).unwrap();
        prop_assert!(rows_sum_to_one(&g.value(post), false));
    }

    #[test]
    fn grammar_without_latent_is_fixed(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = GrammarSpec { symbol_dim: 4, hidden: 5, z_dim: 0, ..GrammarSpec::language(3, 2, 5) };
        let gr = CompoundPcfg::new(spec, &mut store, &mut rng).unwrap();
        let eval = || {
            let g = Graph::new();
            let p = store.bind(&g);
            let r = gr.rule_probs(&g, &p, None).unwrap();
            ((*g.value(r.root)).clone(), (*g.value(r.binary)).clone(), (*g.value(r.terminal.unwrap())).clone())
        };
        prop_assert_eq!(eval(), eval());
    }

    #[test]
    fn vanishing_variance_sample_is_the_mean(mean in proptest::collection::vec(-5.0f64..5.0, 1..6), eps in -3.0f64..3.0) {
        let g = Graph::new();
        let k = mean.len();
        let q = Posterior {
            mean: g.constant(Tensor::vector(mean.clone())),
            logvar: g.constant(Tensor::filled(&[k], -2000.0)),
        };
        let z = q.sample(&g, &vec![eps; k]).unwrap();
        prop_assert_eq!(g.value(z).data().to_vec(), mean);
    }

    #[test]
    fn whole_span_embedding_is_affine_of_mean_state(seed in any::<u64>(), tokens in proptest::collection::vec(0usize..7, 2..8)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = EncoderSpec { z_dim: 2, rnn_hidden: 3, align_dim: 4, word_dim: 3 };
        let mut store = ParamStore::new();
        let enc = LanguageEncoder::new(&mut store, 7, &spec, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g);
        let st = enc.states(&g, &p, &tokens).unwrap();
        let n = tokens.len();
        let e = g.value(enc.embed_spans(&g, &p, st, &[Span::new(0, n)]).unwrap());
        let states = g.value(st);
        let (_, d) = states.dims2().unwrap();
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| states.at(i, j)).sum::<f64>() / n as f64).collect();
        let (w, b) = enc.span_head();
        let (w, b) = (store.get(w), store.get(b));
        for k in 0..4 {
            let direct = b.data()[k] + (0..d).map(|j| mean[j] * w.at(j, k)).sum::<f64>();
            prop_assert!((e.data()[k] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn hinge_is_zero_exactly_when_margins_hold(seed in any::<u64>(), b in 2usize..6, delta in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<Vec<f64>> = (0..b)
            .map(|i| (0..b).map(|m| rng.random_range(-1.0..1.0) + if i == m { rng.random_range(0.0..1.5) } else { 0.0 }).collect())
            .collect();
        let loss = contrastive_loss_value(&s, delta);
        prop_assert!(loss >= 0.0);
        let holds = (0..b).all(|i| (0..b).all(|m| m == i || (s[i][i] >= s[i][m] + delta && s[i][i] >= s[m][i] + delta)));
        prop_assert_eq!(loss == 0.0, holds);

        let g = Graph::new();
        let flat = s.iter().flatten().copied().collect();
        let sm = g.constant(Tensor::new(vec![b, b], flat).unwrap());
        let tape = g.value(contrastive_loss(&g, sm, delta).unwrap()).item();
        prop_assert!((tape - loss).abs() < 1e-12);
    }

    #[test]
    fn generated_gold_trees_are_valid(seed in any::<u64>(), separation in 1.0f64..6.0) {
        let cfg = SynthConfig { separation, ..SynthConfig::default() };
        let c = generate_corpus(&default_grammars(), &cfg, 8, 8, seed, &[]).unwrap();
        for x in c.train.iter().chain(&c.test) {
            prop_assert!(x.tokens.len() >= 2 && x.parts.len() >= 2);
            x.lang_tree().unwrap().validate(x.tokens.len()).unwrap();
            x.vis_tree().unwrap().validate(x.parts.len()).unwrap();
            prop_assert_eq!(x.gold_part_tags.len(), x.parts.len());
        }
    }

    #[test]
    fn corpus_statistics_follow_the_seed(seed in any::<u64>()) {
        let make = || generate_corpus(&default_grammars(), &SynthConfig::default(), 12, 4, seed, &[]).unwrap();
        let (a, b) = (make(), make());
        prop_assert_eq!(corpus_medians(&a.train), corpus_medians(&b.train));
        prop_assert_eq!(a.depth_rejections, b.depth_rejections);
    }

    #[test]
    fn identical_corpora_score_one(lens in proptest::collection::vec(2usize..10, 1..8), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees: Vec<ParseTree> = lens
            .iter()
            .map(|&n| {
                let m = jointgram::chart::SpanMarginals::from_fn(n, |_, _| rng.random_range(0.0..1.0));
                mbr_decode(&m)
            })
            .collect();
        let f = f1_pair(&trees, &trees).unwrap();
        prop_assert_eq!((f.corpus, f.instance), (1.0, 1.0));
    }

    #[test]
    fn clustering_ignores_gold_relabelling(pred in proptest::collection::vec(0usize..4, 1..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gold: Vec<usize> = pred.iter().map(|&p| if rng.random_bool(0.7) { p } else { rng.random_range(0..4) }).collect();
        let perm = [2usize, 0, 3, 1];
        let relabelled: Vec<usize> = gold.iter().map(|&x| perm[x]).collect();
        let a = clustering_accuracy(&pred, &gold, 4).unwrap();
        let b = clustering_accuracy(&pred, &relabelled, 4).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn retrieval_is_a_repeatable_fraction(n in 8usize..30, k in 2usize..8, seed in any::<u64>(), salt in any::<u64>()) {
        let score = |i: usize, j: usize| (((i * 31 + j * 17) as u64 ^ salt) % 97) as f64;
        let a = retrieval_eval(n, &score, k, 200, seed).unwrap();
        let b = retrieval_eval(n, &score, k, 200, seed).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a.ir) && (0.0..=1.0).contains(&a.tr));
    }
}
