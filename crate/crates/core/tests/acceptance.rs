//! End-to-end checks of the headline behaviours. Each criterion prints one
//! `PASS`/`FAIL` line; the test fails if any criterion does.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jointgram::chart::{brute_force_log_z, marginals_by_differentiation, Chart, GrammarView};
use jointgram::eval::EvalReport;
use jointgram::synth::{default_grammars, generate_corpus, Corpus, PairedInstance, SynthConfig, Vocabulary};
use jointgram::train::{evaluate, gradcheck_suite, Checkpoint, EvalOptions, TrainConfig, Trainer};

use common::{small_corpus, tiny_config};

const SEEDS: [u64; 4] = [0, 1, 2, 3];
const RETRIEVAL_CONTRASTIVE: f64 = 30.0;
const RETRIEVAL_EPOCHS: usize = 25;
const RETRIEVAL_BATCH: usize = 8;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("criterion {id} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    Outcome {
        id,
        name,
        pass,
        detail,
    }
}

fn log_softmax(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for x in xs {
        *x -= lse;
    }
}

/// Random normalised grammar plus a random sentence's emission scores.
struct RandomCase {
    nn: usize,
    np: usize,
    root: Vec<f64>,
    binary: Vec<f64>,
    emission: Vec<f64>,
    n: usize,
}

impl RandomCase {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(2..=6);
        Self::draw_len(rng, n)
    }

    fn draw_len(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let nn = rng.random_range(1..=4);
        let np = rng.random_range(1..=3);
        let vocab = rng.random_range(1..=10);
        let s = nn + np;
        let mut root: Vec<f64> = (0..nn).map(|_| rng.random_range(-2.0..2.0)).collect();
        log_softmax(&mut root);
        let mut binary: Vec<f64> = (0..nn * s * s).map(|_| rng.random_range(-2.0..2.0)).collect();
        for row in binary.chunks_mut(s * s) {
            log_softmax(row);
        }
        let mut lexicon: Vec<f64> = (0..np * vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        for row in lexicon.chunks_mut(vocab) {
            log_softmax(row);
        }
        let emission = (0..n)
            .flat_map(|_| {
                let w = rng.random_range(0..vocab);
                (0..np).map(move |p| (p, w)).collect::<Vec<_>>()
            })
            .map(|(p, w)| lexicon[p * vocab + w])
            .collect();
        RandomCase {
            nn,
            np,
            root,
            binary,
            emission,
            n,
        }
    }

    fn view(&self) -> GrammarView<'_> {
        GrammarView {
            n_nt: self.nn,
            n_pt: self.np,
            root: &self.root,
            binary: &self.binary,
        }
    }
}

fn inside_matches_enumeration() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let grammar_rng = ChaCha8Rng::seed_from_u64(rng.random());
        for n in 2..=6 {
            // a cloned stream draws the same grammar at every length
            let mut r = grammar_rng.clone();
            let c = RandomCase::draw_len(&mut r, n);
            let chart = Chart::inside(&c.view(), &c.emission, c.n).unwrap();
            let brute = brute_force_log_z(&c.view(), &c.emission, c.n).unwrap();
            worst = worst.max((chart.log_z() - brute).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        1,
        "inside log Z equals enumeration",
        worst < 1e-9 && secs < 60.0,
        format!("max |diff| {worst:.2e} over 200 grammars x lengths 2-6 in {secs:.2}s"),
    )
}

fn outside_matches_differentiation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut worst, mut worst_sum): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let c = RandomCase::draw(&mut rng);
        let m = Chart::inside_outside(&c.view(), &c.emission, c.n).unwrap().marginals().unwrap();
        let d = marginals_by_differentiation(&c.view(), &c.emission, c.n).unwrap();
        for (a, b) in m.to_vec().iter().zip(d.to_vec()) {
            worst = worst.max((a - b).abs());
        }
        worst_sum = worst_sum.max((m.sum() - (c.n - 1) as f64).abs());
    }
    outcome(
        2,
        "outside marginals equal gradients of log Z",
        worst < 1e-8 && worst_sum < 1e-6,
        format!("max |diff| {worst:.2e}, max |sum - (n-1)| {worst_sum:.2e}"),
    )
}

fn gradients_match_finite_differences() -> Outcome {
    let entries = gradcheck_suite(5).unwrap();
    let detail = entries
        .iter()
        .map(|e| format!("{} {:.1e}/{:.0e}", e.name, e.report.max_rel_error, e.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    let end_to_end = entries.iter().any(|e| e.name == "end_to_end" && e.tolerance <= 1e-4);
    outcome(
        3,
        "analytic gradients match finite differences",
        end_to_end && entries.iter().all(|e| e.passes()),
        detail,
    )
}

/// The configuration every training criterion uses.
fn train_config(seed: u64, contrastive: f64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.epochs = 20;
    cfg.lr = 1e-3;
    cfg.vis_lr_scale = 10.0;
    cfg.lang.nonterminals = 10;
    cfg.lang.preterminals = 20;
    cfg.warm_start = true;
    cfg.weights.contrastive = contrastive;
    cfg
}

fn synth(separation: f64) -> SynthConfig {
    SynthConfig {
        separation,
        attr_affinity: 0.8,
        ..SynthConfig::default()
    }
}

fn corpus(separation: f64, holdout: &[&str]) -> Corpus {
    let holdout: Vec<String> = holdout.iter().map(|s| s.to_string()).collect();
    generate_corpus(&default_grammars(), &synth(separation), 400, 200, 7, &holdout).unwrap()
}

fn train(cfg: TrainConfig, data: &[PairedInstance]) -> Trainer {
    let mut t = Trainer::new(cfg, Vocabulary::default().len(), data).unwrap();
    t.run(data, None, None, None).unwrap();
    t
}

fn retrieval_opts() -> EvalOptions {
    EvalOptions {
        retrieval: true,
        retrieval_seed: 11,
        ..EvalOptions::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Joint and single-modality runs over four categories.
fn joint_beats_baselines() -> Outcome {
    let t = Instant::now();
    let c = corpus(4.0, &[]);
    let run = |lc: f64| -> Vec<EvalReport> {
        SEEDS
            .iter()
            .map(|&s| {
                let cfg = train_config(s, lc);
                let tr = train(cfg.clone(), &c.train);
                let r = evaluate(&tr.model, &cfg, &c.test, &retrieval_opts()).unwrap();
                let ret = r.retrieval.unwrap_or_default();
                println!(
                    "  seed {s} contrastive {lc}: lang {:.3} vis {:.3} clustering {:.3} IR {:.3} TR {:.3}",
                    r.f1.lang.instance, r.f1.vis.instance, r.clustering_accuracy, ret.ir, ret.tr
                );
                r
            })
            .collect()
    };
    let joint = run(1.0);
    let single = run(0.0);
    let secs = t.elapsed().as_secs_f64();

    let f = |rs: &[EvalReport], lang: bool| -> Vec<f64> {
        rs.iter().map(|r| if lang { r.f1.lang.instance } else { r.f1.vis.instance }).collect()
    };
    let b = &joint[0].baselines;
    let (jl, jv, sl, sv) = (f(&joint, true), f(&joint, false), f(&single, true), f(&single, false));
    let beats_lang = max(&jl) > b.left.lang.instance.max(b.right.lang.instance);
    let beats_vis = max(&jv) > b.left.vis.instance.max(b.right.vis.instance);
    let joint_mean = (mean(&jl) + mean(&jv)) / 2.0;
    let single_mean = (mean(&sl) + mean(&sv)) / 2.0;
    let pass = beats_lang && beats_vis && joint_mean >= single_mean && secs < 1800.0;
    let detail = format!(
        "best joint lang {:.3} vis {:.3} vs LB {:.3}/{:.3} RB {:.3}/{:.3}; mean joint {:.3} (lang {:.3} vis {:.3}) vs single {:.3} (lang {:.3} vis {:.3}); {:.0}s",
        max(&jl),
        max(&jv),
        b.left.lang.instance,
        b.left.vis.instance,
        b.right.lang.instance,
        b.right.vis.instance,
        joint_mean,
        mean(&jl),
        mean(&jv),
        single_mean,
        mean(&sl),
        mean(&sv),
        secs
    );
    outcome(4, "joint induction beats branching baselines", pass, detail)
}

fn joint_training_sharpens_clusters() -> Outcome {
    let c = corpus(2.0, &[]);
    let mut warm = Vec::new();
    let mut trained = Vec::new();
    for &s in &SEEDS {
        let cfg = train_config(s, 1.0);
        let fresh = Trainer::new(cfg.clone(), Vocabulary::default().len(), &c.train).unwrap();
        warm.push(evaluate(&fresh.model, &cfg, &c.test, &EvalOptions::default()).unwrap().clustering_accuracy);
        let tr = train(cfg.clone(), &c.train);
        trained.push(evaluate(&tr.model, &cfg, &c.test, &EvalOptions::default()).unwrap().clustering_accuracy);
        println!("  seed {s}: warm start {:.3}, trained {:.3}", warm.last().unwrap(), trained.last().unwrap());
    }
    // each run against the warm start it began from
    let gains: Vec<f64> = trained.iter().zip(&warm).map(|(t, w)| 100.0 * (t - w)).collect();
    let gain = max(&gains);
    outcome(
        5,
        "joint training improves part clustering",
        gain >= 5.0,
        format!(
            "best per-seed gain {gain:.1} points; best warm start {:.3}, best trained {:.3}",
            max(&warm),
            max(&trained)
        ),
    )
}

/// Alignment-heavy run on a corpus whose parts take uniformly drawn
/// attributes, so instances of one category still differ.
fn retrieval_is_accurate() -> Outcome {
    let c = generate_corpus(&default_grammars(), &SynthConfig::default(), 400, 200, 7, &[]).unwrap();
    let mut cfg = train_config(1, RETRIEVAL_CONTRASTIVE);
    cfg.vis_lr_scale = 1.0;
    cfg.epochs = RETRIEVAL_EPOCHS;
    cfg.batch_size = RETRIEVAL_BATCH;
    let tr = train(cfg.clone(), &c.train);
    let r = evaluate(&tr.model, &cfg, &c.test, &retrieval_opts()).unwrap().retrieval.unwrap();
    outcome(
        6,
        "1-of-8 retrieval",
        r.ir >= 0.8 && r.tr >= 0.8 && r.trials == 2000,
        format!("IR {:.3}, TR {:.3} over {} trials", r.ir, r.tr, r.trials),
    )
}

fn unseen_categories_get_structure() -> Outcome {
    let holdout = ["bed", "bag"];
    let c = corpus(4.0, &holdout);
    let opts = EvalOptions {
        holdout: holdout.iter().map(|s| s.to_string()).collect(),
        ..EvalOptions::default()
    };
    let mut best: Option<(f64, EvalReport)> = None;
    for &s in &SEEDS {
        let cfg = train_config(s, 1.0);
        let tr = train(cfg.clone(), &c.train);
        let r = evaluate(&tr.model, &cfg, &c.test, &opts).unwrap();
        let (u, b) = (r.unseen.as_ref().unwrap(), r.unseen_baselines.as_ref().unwrap());
        let margin = (u.lang.instance - b.left.lang.instance).min(u.vis.instance - b.left.vis.instance);
        println!("  seed {s}: unseen lang {:.3} vis {:.3}", u.lang.instance, u.vis.instance);
        if best.as_ref().is_none_or(|(m, _)| margin > *m) {
            best = Some((margin, r));
        }
    }
    let r = best.unwrap().1;
    let text = r.to_text();
    let (seen, unseen, base) = (r.seen.unwrap(), r.unseen.unwrap(), r.unseen_baselines.unwrap());
    let in_report = ["seen.lang.instance_f1", "unseen.lang.instance_f1", "unseen.vis.instance_f1"]
        .iter()
        .all(|k| text.lines().any(|l| l.starts_with(k)));
    let pass = in_report
        && unseen.lang.instance > base.left.lang.instance
        && unseen.vis.instance > base.left.vis.instance;
    outcome(
        7,
        "held-out categories",
        pass,
        format!(
            "best of 4 seeds: seen lang {:.3} vis {:.3}; unseen lang {:.3} vis {:.3}; unseen LB {:.3}/{:.3}",
            seen.lang.instance,
            seen.vis.instance,
            unseen.lang.instance,
            unseen.vis.instance,
            base.left.lang.instance,
            base.left.vis.instance
        ),
    )
}

fn runs_repeat_and_resume() -> Outcome {
    let c = small_corpus(20, 10, 4);
    let opts = retrieval_opts();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let vocab = Vocabulary::default().len();
    let mut full = Vec::new();
    for d in &dirs[..2] {
        let mut t = Trainer::new(tiny_config(6), vocab, &c.train).unwrap();
        t.run(&c.train, Some((&c.test, &opts)), Some(d.path()), None).unwrap();
        full.push(t);
    }
    let log = |d: &tempfile::TempDir| std::fs::read_to_string(d.path().join("metrics.jsonl")).unwrap();
    let repeat = log(&dirs[0]) == log(&dirs[1]);

    let d = dirs[2].path();
    let mut first = Trainer::new(tiny_config(6), vocab, &c.train).unwrap();
    first.run(&c.train, Some((&c.test, &opts)), Some(d), Some(8)).unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&d.join("checkpoint.ckpt")).unwrap()).unwrap();
    resumed.run(&c.train, Some((&c.test, &opts)), Some(d), None).unwrap();
    let mut worst: f64 = 0.0;
    for ((_, a), (_, b)) in full[0].model.store.iter().zip(resumed.model.store.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    let same_log = log(&dirs[2]) == log(&dirs[0]);
    outcome(
        8,
        "determinism and resume",
        repeat && same_log && worst <= 1e-10,
        format!("repeat logs equal {repeat}, resumed log equal {same_log}, max param diff {worst:.1e}"),
    )
}

#[test]
fn primary_criteria() {
    let mut results = vec![
        inside_matches_enumeration(),
        outside_matches_differentiation(),
        gradients_match_finite_differences(),
        runs_repeat_and_resume(),
    ];
    results.push(joint_beats_baselines());
    results.push(joint_training_sharpens_clusters());
    results.push(retrieval_is_accurate());
    results.push(unseen_categories_get_structure());
    results.sort_by_key(|o| o.id);

    println!("\nsummary");
    for o in &results {
        println!("  {} {:<45} {}", o.id, o.name, if o.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({})", o.id, o.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join("; "));
}
