//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when
//! any criterion fails. Runs as a plain binary so the lines always print.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use mdug_core::autodiff::Graph;
use mdug_core::corpus::{generate_corpus, Corpus, GenConfig, Split};
use mdug_core::generation::LabelSource;
use mdug_core::harness::config::{parse_kv, RunConfig};
use mdug_core::harness::pipeline::{
    corpus_for, generate_config_for, infer, run_ablation, score_responses, stub_captioner, train_generator_for,
    train_understanding_mode,
};
use mdug_core::metrics::{
    bleu1, boundary_score, cider, gold_labels, majority_boundary, meteor_lite, random_boundary, rouge_l,
};
use mdug_core::understanding::{evaluate_split, joint_loss, PosWeights, TrainedUnderstanding};
use mdug_core::{AblationFlags, BoundaryPrediction, Captioner, MultiTaskConfig, TaskMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const BUDGET: Duration = Duration::from_secs(600);

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn record(&mut self, name: &str, pass: bool, detail: String, started: Instant) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag}  {name}: {detail} [{:.1}s]", started.elapsed().as_secs_f64());
        self.results.push((name.to_string(), pass));
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn desk_config(extra: &[(&str, &str)]) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    let mut kv = parse_kv(&std::fs::read_to_string(&path).expect("desk config")).expect("desk config parses");
    for (k, v) in extra {
        kv.insert(k.to_string(), v.to_string());
    }
    RunConfig::from_kv(&kv).expect("desk config validates")
}

fn f1_oracle(suite: &mut Suite) {
    let t = Instant::now();
    // (TP, FP, FN) giving the target precision and recall.
    let cases = [((56094, 43906, 408953), 0.56094, 0.12062, 0.19854), ((57811, 42189, 168032), 0.57811, 0.25598, 0.35484)];
    let mut ok = true;
    let mut detail = Vec::new();
    for ((tp, fp, fn_), p, r, f1) in cases {
        let mut preds = vec![1u8; tp + fp];
        let mut golds: Vec<u8> = std::iter::repeat_n(1, tp).chain(std::iter::repeat_n(0, fp)).collect();
        preds.extend(std::iter::repeat_n(0, fn_));
        golds.extend(std::iter::repeat_n(1, fn_));
        let s = boundary_score(&preds, &golds).unwrap();
        let harmonic = 2.0 * p * r / (p + r);
        ok &= within(s.precision, p, 1e-4) && within(s.recall, r, 1e-4);
        ok &= within(s.f1, f1, 1e-4) && within(harmonic, f1, 1e-4);
        detail.push(format!("P {:.5} R {:.5} -> F1 {:.5} (expected {f1})", s.precision, s.recall, s.f1));
    }
    suite.record("F1 oracle", ok, detail.join("; "), t);
}

fn majority_collapse(suite: &mut Suite, corpus: &Corpus) {
    let t = Instant::now();
    let (gs, gt) = gold_labels(corpus.split(Split::Test));
    let rate = |v: &[u8]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let m = majority_boundary(corpus.split(Split::Test)).unwrap();
    let ok = within(m.scene.acc * 100.0, 91.6, 0.5)
        && within(m.session.acc * 100.0, 87.4, 0.5)
        && m.scene.acc == 1.0 - rate(&gs)
        && m.session.acc == 1.0 - rate(&gt)
        && [m.scene.f1, m.scene.precision, m.scene.recall, m.session.f1].iter().all(|&v| v == 0.0);
    let detail = format!(
        "Acc_s {:.3} Acc_t {:.3} F1 {} / {} (scene rate {:.2}%, session rate {:.2}%)",
        m.scene.acc * 100.0,
        m.session.acc * 100.0,
        m.scene.f1,
        m.session.f1,
        rate(&gs) * 100.0,
        rate(&gt) * 100.0
    );
    suite.record("majority collapse", ok, detail, t);
}

fn random_mode(suite: &mut Suite, corpus: &Corpus) {
    let t = Instant::now();
    let n = corpus.n_utterances(Split::Test);
    let r = random_boundary(corpus.split(Split::Test), 1).unwrap();
    let other = random_boundary(corpus.split(Split::Test), 2).unwrap();
    let mut ok = n >= 5000 && other != r;
    for s in [r.scene, r.session] {
        ok &= within(s.acc * 100.0, 50.0, 2.0) && within(s.recall * 100.0, 50.0, 3.0);
    }
    let detail = format!(
        "{n} utterances; scene Acc {:.3} R {:.3}; session Acc {:.3} R {:.3}",
        r.scene.acc * 100.0,
        r.scene.recall * 100.0,
        r.session.acc * 100.0,
        r.session.recall * 100.0
    );
    suite.record("random mode", ok, detail, t);
}

fn generation_oracles(suite: &mut Suite) {
    let t = Instant::now();
    let docs = [
        "the kettle whistles on the stove now",
        "traffic crawls past the corner shop",
        "waves roll over warm sand at dusk",
    ];
    let cands: Vec<String> = docs.iter().map(|s| s.to_string()).collect();
    let refs: Vec<Vec<String>> = docs.iter().map(|s| vec![s.to_string()]).collect();
    let b = bleu1(&cands, &refs).unwrap();
    let r = rouge_l(&cands, &refs).unwrap();
    let c = cider(&cands, &refs).unwrap();
    let c_oracle = common::cider_reference(&docs, &docs.iter().map(|d| vec![*d]).collect::<Vec<_>>());
    let m = meteor_lite(&cands, &refs).unwrap();
    let m_oracle = docs
        .iter()
        .map(|d| 1.0 - 0.5 / (d.split_whitespace().count() as f64).powi(3))
        .sum::<f64>()
        / 3.0;
    let identical = within(b, 1.0, 1e-12) && within(r, 1.0, 1e-12) && within(c, 10.0, 1e-9) && within(c, c_oracle, 1e-9);

    let clip = bleu1(&["the the the".into()], &[vec!["the cat".into()]]).unwrap();
    let (cand, reference) = (["a", "b", "c", "d"], ["a", "c", "d"]);
    let l = common::lcs(&cand, &reference) as f64;
    let (prec, rec) = (l / cand.len() as f64, l / reference.len() as f64);
    let beta2 = 1.2f64 * 1.2;
    let rouge_oracle = (1.0 + beta2) * prec * rec / (rec + beta2 * prec);
    let rouge = rouge_l(&["a b c d".into()], &[vec!["a c d".into()]]).unwrap();
    let single = meteor_lite(&["cat".into()], &[vec!["cat".into()]]).unwrap();
    let hand = within(clip, 1.0 / 3.0, 1e-4)
        && within(rouge, rouge_oracle, 1e-4)
        && within(rouge, 0.8798, 1e-4)
        && within(m, m_oracle, 1e-12)
        && within(single, 0.5, 1e-12);
    let detail = format!(
        "identical: BLEU-1 {b} ROUGE-L {r} CIDEr {c:.9} (oracle {c_oracle:.9}) METEOR {m:.9} (oracle {m_oracle:.9}); \
         clipped BLEU-1 {clip:.6}; ROUGE-L {rouge:.6} (closed form {rouge_oracle:.6})"
    );
    suite.record("generation metric oracles", identical && hand, detail, t);
}

fn gradient_suite(suite: &mut Suite) {
    use mdug_core::fusion::{assemble_window, WindowUtterance};
    use mdug_core::generation::{GeneratorConfig, GeneratorModel};
    use mdug_core::prompting::GeneratorInput;
    use mdug_core::vocab::{BOS, EOS};
    use mdug_core::{EncoderConfig, UnderstandingModel};

    let t = Instant::now();
    let enc = EncoderConfig {
        vocab_size: 24,
        d_model: 16,
        feature_dim: 5,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_tokens: 64,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let utts: Vec<WindowUtterance> = (0..3)
        .map(|_| WindowUtterance {
            tokens: (0..rng.random_range(2..5)).map(|_| rng.random_range(6..24u32)).collect(),
            feature: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let input = assemble_window(&utts, 5, 64).unwrap();
    let loss = |m: &UnderstandingModel| {
        let mut g = Graph::new(&m.params);
        let (zs, zt) = m.logits(&mut g, &input, &[0, 1, 2]).unwrap();
        let weights = PosWeights { scene: 3.0, session: 2.0 };
        let l = joint_loss(&mut g, zs, zt, &[0, 1, 0], &[1, 1, 0], &MultiTaskConfig::default(), weights).unwrap();
        (g.scalar(l), g.backward(l))
    };
    let mut model = UnderstandingModel::new(enc.clone(), 3).unwrap();
    let (_, grads) = loss(&model);
    let mut reports = Vec::new();
    for (group, prefix) in [("projection", "enc.frame_proj"), ("encoder", "enc."), ("heads", "head.")] {
        let r = common::central_differences(
            &mut model,
            |m| &mut m.params,
            |m| loss(m).0,
            &grads,
            |n| n.starts_with(prefix) && (group != "encoder" || !n.contains("frame_proj")),
            6,
            1e-3,
        );
        reports.push((group, r));
    }
    let gen_cfg = GeneratorConfig {
        encoder: EncoderConfig { feature_dim: 1, ..enc },
        decoder_layers: 2,
        max_target_len: 12,
    };
    let mut generator = GeneratorModel::new(gen_cfg, 5).unwrap();
    let gen_input = GeneratorInput { token_ids: vec![0, 7, 9, 12, 1, 15, 8], segments: Vec::new() };
    let target = [BOS, 10, 17, 9, EOS];
    let gen_loss = |m: &GeneratorModel| {
        let mut g = Graph::new(&m.params);
        let l = m.ar_loss(&mut g, &gen_input, &target).unwrap();
        (g.scalar(l), g.backward(l))
    };
    let (_, grads) = gen_loss(&generator);
    let r = common::central_differences(
        &mut generator,
        |m| &mut m.params,
        |m| gen_loss(m).0,
        &grads,
        |n| n.starts_with("gen."),
        6,
        1e-3,
    );
    reports.push(("decoder", r));
    let ok = reports.iter().all(|(_, r)| r.passes(1e-4));
    let detail = reports
        .iter()
        .map(|(g, r)| format!("{g}: {} entries, worst rel {:.2e}", r.checked, r.worst_rel))
        .collect::<Vec<_>>()
        .join("; ");
    suite.record("gradient suite", ok, detail, t);
}

fn co_occurrence(suite: &mut Suite, trained: &[(u64, TrainedUnderstanding)], corpus: &Corpus) {
    let t = Instant::now();
    let big = GenConfig { n_train: 8000, n_dev: 1, n_test: 1, ..GenConfig::default() };
    let generated = generate_corpus(&big, 99).unwrap();
    let all: Vec<(u8, u8)> = generated.episodes.iter().flat_map(|e| e.utterances.iter().map(|u| u.labels())).collect();
    let bad_gold = all.iter().filter(|&&p| p == (1, 0)).count();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let ps: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let pt: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let unrepaired = BoundaryPrediction::from_probs(ps.clone(), pt.clone(), 0.5, false);
    let repaired = BoundaryPrediction::from_probs(ps, pt, 0.5, true);
    let count = |p: &BoundaryPrediction| p.scene_label.iter().zip(&p.session_label).filter(|&(&s, &t)| s == 1 && t == 0).count();

    let mut model_bad = 0;
    for (_, tr) in trained {
        let task = MultiTaskConfig { repair: true, ..tr.config.task };
        let (preds, _, _) = evaluate_split(&tr.model, corpus, Split::Test, &task, tr.config.window).unwrap();
        model_bad += preds.iter().map(|(_, p)| count(p)).sum::<usize>();
    }
    let ok = all.len() >= 100_000 && bad_gold == 0 && count(&unrepaired) > 0 && count(&repaired) == 0 && model_bad == 0;
    let detail = format!(
        "{} generated utterances with {bad_gold} (1,0) pairs; random probabilities {} -> {} after repair; \
         trained models with repair {model_bad}",
        all.len(),
        count(&unrepaired),
        count(&repaired)
    );
    suite.record("co-occurrence invariants", ok, detail, t);
}

fn train_boundaries(cfg: &RunConfig, corpus: &Corpus, mode: TaskMode) -> Vec<(u64, TrainedUnderstanding)> {
    SEEDS
        .iter()
        .map(|&seed| (seed, train_understanding_mode(cfg, corpus, mode, seed).expect("training succeeds")))
        .collect()
}

fn best_dev_scene(runs: &[(u64, TrainedUnderstanding)]) -> Vec<f64> {
    runs.iter().map(|(_, r)| r.history[r.best_epoch].dev_scene.acc * 100.0).collect()
}

fn multi_task_property(suite: &mut Suite, multi: &[(u64, TrainedUnderstanding)], scene_only: &[(u64, TrainedUnderstanding)], started: Instant) {
    let m = best_dev_scene(multi);
    let s = best_dev_scene(scene_only);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact = true;
    for _ in 0..50 {
        let n = rng.random_range(1..12);
        let store = mdug_core::autodiff::ParamStore::new();
        let mut g = Graph::new(&store);
        let zs = g.constant(ndarray::Array2::from_shape_fn((n, 1), |_| rng.random_range(-4.0..4.0)));
        let zt = g.constant(ndarray::Array2::from_shape_fn((n, 1), |_| rng.random_range(-4.0..4.0)));
        let gs: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let gt: Vec<u8> = gs.iter().map(|&s| s.max(rng.random_range(0..2))).collect();
        let w = PosWeights { scene: rng.random_range(1.0..10.0), session: rng.random_range(1.0..10.0) };
        let both = MultiTaskConfig::default();
        let scene = MultiTaskConfig { w_session: 0.0, mode: TaskMode::SceneOnly, ..both };
        let session = MultiTaskConfig { w_scene: 0.0, mode: TaskMode::SessionOnly, ..both };
        let lb = joint_loss(&mut g, zs, zt, &gs, &gt, &both, w).unwrap();
        let ls = joint_loss(&mut g, zs, zt, &gs, &gt, &scene, w).unwrap();
        let lt = joint_loss(&mut g, zs, zt, &gs, &gt, &session, w).unwrap();
        exact &= g.scalar(lb) == g.scalar(ls) + g.scalar(lt);
    }
    let in_budget = started.elapsed() < BUDGET;
    let ok = mean(&m) >= mean(&s) - 0.2 && exact && in_budget;
    let detail = format!(
        "dev scene Acc multi {:?} mean {:.3}; scene_only {:?} mean {:.3}; decomposition exact: {exact}; within budget: {in_budget}",
        m.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
        mean(&m),
        s.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
        mean(&s)
    );
    suite.record("multi-task property", ok, detail, started);
}

fn ablation_ordering(suite: &mut Suite, cfg: &RunConfig, corpus: &Corpus, multi: &[(u64, TrainedUnderstanding)]) {
    let t = Instant::now();
    let captioner = stub_captioner(corpus, cfg);
    let cap: &dyn Captioner = &captioner;
    let mut per_seed = BTreeMap::new();
    for (seed, tr) in multi {
        let predicted = LabelSource::Predicted {
            scene: &tr.model,
            session: &tr.model,
            task: &tr.config.task,
            window: tr.config.window,
        };
        let avg = |flags: AblationFlags, labels: LabelSource| {
            let trained = train_generator_for(cfg, corpus, flags, Some(cap), labels, *seed).unwrap();
            let gen_cfg = generate_config_for(cfg, corpus, flags);
            let responses = infer(corpus, Split::Test, &trained.model, &gen_cfg, Some(cap), labels).unwrap();
            score_responses(corpus, Split::Test, &responses).unwrap().avg * 100.0
        };
        let full = avg(AblationFlags::ALL_ON, predicted);
        let bare = avg(AblationFlags::ALL_OFF, LabelSource::Gold);
        per_seed.insert(*seed, (full, bare));
    }
    let in_budget = t.elapsed() < BUDGET;
    let ok = per_seed.values().all(|(f, b)| f > b) && in_budget;
    let mut detail = per_seed
        .iter()
        .map(|(s, (f, b))| format!("seed {s}: full {f:.3} vs w/o prompt {b:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    detail.push_str(&format!("; within budget: {in_budget}"));
    suite.record("ablation ordering", ok, detail, t);
}

fn determinism(suite: &mut Suite) {
    let t = Instant::now();
    let cfg = desk_config(&[
        ("corpus.n_train", "24"),
        ("corpus.n_dev", "6"),
        ("corpus.n_test", "6"),
        ("understand.epochs", "1"),
        ("generator.epochs", "1"),
        ("run.seeds", "4"),
        ("ablation.variants", "full,single_task,no_prompt"),
    ]);
    let run = || {
        let corpus = corpus_for(&cfg).unwrap();
        run_ablation(&cfg, &corpus).unwrap().to_json()
    };
    let (a, b) = (run(), run());
    suite.record(
        "determinism",
        a == b && !a.is_empty(),
        format!("two end-to-end runs, {} bytes each, identical: {}", a.len(), a == b),
        t,
    );
}

fn main() {
    let mut suite = Suite { results: Vec::new() };
    f1_oracle(&mut suite);
    generation_oracles(&mut suite);
    gradient_suite(&mut suite);

    let cfg = desk_config(&[]);
    let corpus = corpus_for(&cfg).unwrap();
    majority_collapse(&mut suite, &corpus);
    random_mode(&mut suite, &corpus);

    let started = Instant::now();
    let multi = train_boundaries(&cfg, &corpus, TaskMode::Multi);
    let scene_only = train_boundaries(&cfg, &corpus, TaskMode::SceneOnly);
    multi_task_property(&mut suite, &multi, &scene_only, started);
    co_occurrence(&mut suite, &multi, &corpus);
    ablation_ordering(&mut suite, &cfg, &corpus, &multi);
    determinism(&mut suite);

    let failed: Vec<&str> = suite.results.iter().filter(|(_, p)| !p).map(|(n, _)| n.as_str()).collect();
    println!("{} of {} criteria passed", suite.results.len() - failed.len(), suite.results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
