//! Acceptance run: one line per criterion, non-zero exit on any failure.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use albumseq::eval::{
    edit_score, levenshtein, mutual_information_estimate, run_evaluation, EvalConfig, EvalReport,
    InformationEstimate, Method, StepScorer,
};
use albumseq::ingest::{
    corpus_to_csv, generate_synthetic, split_corpus, CorpusSplit, SplitFractions,
};
use albumseq::nn::{load_checkpoint, save_checkpoint, train, AdamConfig, Matrix};
use albumseq::sequencer::{find_template, fit_to_template, rescale_unit, sample_orders, Sampling};
use albumseq::*;
use rand::Rng;

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn album(m: usize, d: usize, rng: &mut SeededRng) -> Album {
    let tracks = (0..m)
        .map(|i| {
            TrackFeatures::new(
                format!("t{i}"),
                (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    Album::new("probe", tracks).unwrap()
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let hyper = Hyperparams {
        input_dim: 6,
        hidden_dim: 4,
        essence_dim: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_len: 4,
        dropout: 0.0,
        ..Hyperparams::default()
    };
    let mut rng = seeded_rng(11);
    let album = album(3, 6, &mut rng);
    let sigma = Permutation::new(vec![2, 0, 1]).unwrap();
    let mut model = OrderingModel::new(hyper, ingest::FeatureScaler::identity(6), 3).unwrap();
    let (_, grads) = model.backward(&album, &sigma).unwrap();

    let eps = 1e-4;
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for b in 0..model.params.blocks.len() {
        for i in 0..model.params.blocks[b].value.data.len() {
            let orig = model.params.blocks[b].value.data[i];
            model.params.blocks[b].value.data[i] = orig + eps;
            let up = model.sequence_loss(&album, &sigma).unwrap();
            model.params.blocks[b].value.data[i] = orig - eps;
            let down = model.sequence_loss(&album, &sigma).unwrap();
            model.params.blocks[b].value.data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.blocks[b].data[i];
            let abs = (numeric - analytic).abs();
            let rel = abs / numeric.abs().max(analytic.abs());
            if abs > 1e-6 {
                ensure(rel <= 1e-3, || {
                    format!(
                        "{}[{i}]: analytic {analytic:e} vs numeric {numeric:e}",
                        model.params.blocks[b].name
                    )
                })?;
            }
            if numeric.abs().max(analytic.abs()) > 1e-6 {
                worst = worst.max(rel);
            }
            checked += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{checked} parameters, worst relative error {worst:.2e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

struct Oracle;

impl StepScorer for Oracle {
    fn step_nats(&self, album: &Album, _: &Permutation) -> Result<Vec<f64>> {
        Ok(vec![0.0; album.len()])
    }
}

fn uniform_calibration() -> Outcome {
    let corpus = generate_synthetic(&SyntheticSpec {
        seed: 5,
        n_albums: 30,
        min_tracks: 3,
        max_tracks: 6,
        dimension: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let hyper = Hyperparams {
        input_dim: 8,
        hidden_dim: 8,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len: 8,
        ..Hyperparams::default()
    };
    let mut model =
        OrderingModel::new(hyper, ingest::FeatureScaler::fit(&corpus).unwrap(), 1).unwrap();
    model.zero_output_head();
    let mut rng = seeded_rng(2);
    for a in &corpus.albums {
        let sigma = Permutation::random(a.len(), &mut rng).unwrap();
        let steps = model
            .sequence_loss_detailed(a, &sigma, true)
            .unwrap()
            .step_nats;
        for (t, nats) in steps.iter().enumerate() {
            let expected = ((a.len() - t) as f64).ln();
            ensure((nats - expected).abs() < 1e-9, || {
                format!("step {t} of M={}: {nats} vs {expected}", a.len())
            })?;
        }
    }
    let uniform = mutual_information_estimate(&model, &corpus, 4, &mut rng).unwrap();
    ensure(uniform.bits.mean.abs() <= 1e-6, || {
        format!("uniform model MI {}", uniform.bits.mean)
    })?;

    let three = Corpus {
        albums: corpus
            .albums
            .iter()
            .filter(|a| a.len() == 3)
            .cloned()
            .collect(),
        ..corpus.clone()
    };
    let oracle = mutual_information_estimate(&Oracle, &three, 4, &mut rng).unwrap();
    ensure((oracle.bits.mean - 6f64.log2()).abs() <= 1e-6, || {
        format!("oracle MI {}", oracle.bits.mean)
    })?;
    Ok(format!(
        "uniform MI {:.1e} bits, oracle MI {:.6} bits at M=3",
        uniform.bits.mean, oracle.bits.mean
    ))
}

fn recursive_edit(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let cost = usize::from(a[a.len() - 1] != b[b.len() - 1]);
    let v = (recursive_edit(&a[..a.len() - 1], b, memo) + 1)
        .min(recursive_edit(a, &b[..b.len() - 1], memo) + 1)
        .min(recursive_edit(&a[..a.len() - 1], &b[..b.len() - 1], memo) + cost);
    memo.insert((a.len(), b.len()), v);
    v
}

fn levenshtein_reference() -> Outcome {
    let mut rng = seeded_rng(21);
    let word = |rng: &mut SeededRng| -> Vec<u8> {
        let n = rng.gen_range(0..=8);
        (0..n).map(|_| rng.gen_range(0..4u8)).collect()
    };
    for _ in 0..5000 {
        let (a, b) = (word(&mut rng), word(&mut rng));
        let expected = recursive_edit(&a, &b, &mut HashMap::new());
        ensure(levenshtein(&a, &b) == expected, || {
            format!("{a:?} vs {b:?}")
        })?;
    }
    for _ in 0..5000 {
        let (a, b, c) = (word(&mut rng), word(&mut rng), word(&mut rng));
        let (ab, ba, bc, ac) = (
            levenshtein(&a, &b),
            levenshtein(&b, &a),
            levenshtein(&b, &c),
            levenshtein(&a, &c),
        );
        ensure(levenshtein(&a, &a) == 0, || {
            format!("d(a,a) != 0 for {a:?}")
        })?;
        ensure((ab == 0) == (a == b), || {
            format!("identity of indiscernibles {a:?} {b:?}")
        })?;
        ensure(ab == ba, || format!("symmetry {a:?} {b:?}"))?;
        ensure(ac <= ab + bc, || format!("triangle {a:?} {b:?} {c:?}"))?;
    }
    let score = edit_score(&[vec![0, 2, 1]], &[0, 1, 2]).unwrap();
    ensure((score - 1.0 / 3.0).abs() < 1e-12, || {
        format!("edit score {score}")
    })?;
    Ok("5000 pairs match the recursive definition; 5000 triples satisfy the metric axioms".into())
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

fn template_optimality() -> Outcome {
    let rising = find_template("rising").unwrap();
    let worked = fit_to_template(
        &EssenceSeries::new(vec![0.9, 0.1, 0.5]).unwrap(),
        &rising,
        3,
    )
    .unwrap();
    ensure(worked.order.as_slice() == [1, 2, 0], || {
        format!("worked example gave {}", worked.order)
    })?;
    ensure((worked.fit_cost.unwrap() - 1.0 / 3.0).abs() < 1e-12, || {
        format!("cost {:?}", worked.fit_cost)
    })?;

    let templates = sequencer::builtin_templates();
    let mut rng = seeded_rng(31);
    let cache: Vec<Vec<Vec<usize>>> = (0..=7).map(permutations).collect();
    for trial in 0..1000 {
        let m = rng.gen_range(1..=7);
        let values: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let template = &templates[trial % templates.len()];
        let fit =
            fit_to_template(&EssenceSeries::new(values.clone()).unwrap(), template, m).unwrap();
        let scaled = rescale_unit(&values);
        let targets: Vec<f64> = (0..m)
            .map(|i| template.value_at((i as f64 + 0.5) / m as f64))
            .collect();
        let cost = |order: &[usize]| -> f64 {
            order
                .iter()
                .enumerate()
                .map(|(p, &t)| (scaled[t] - targets[p]).abs())
                .sum()
        };
        let best = cache[m]
            .iter()
            .map(|p| cost(p))
            .fold(f64::INFINITY, f64::min);
        let got = cost(fit.order.as_slice());
        ensure((got - best).abs() <= 1e-9, || {
            format!("trial {trial}: cost {got} vs optimum {best}")
        })?;
        ensure((fit.fit_cost.unwrap() - got).abs() <= 1e-9, || {
            format!("trial {trial}: reported cost differs")
        })?;
    }
    Ok("worked example exact; 1000 random fits match exhaustive search".into())
}

const E2E_SPLIT: SplitFractions = SplitFractions {
    train: 200.0 / 300.0,
    validation: 50.0 / 300.0,
    test: 50.0 / 300.0,
};

struct PipelineRun {
    report: EvalReport,
    epochs: usize,
    elapsed: Duration,
}

fn run_pipeline(signal_strength: f64) -> PipelineRun {
    let started = Instant::now();
    let corpus = generate_synthetic(&SyntheticSpec {
        seed: 0,
        n_albums: 300,
        min_tracks: 3,
        max_tracks: 8,
        dimension: 32,
        signal_strength,
        noise_scale: 0.1,
    })
    .unwrap();
    let CorpusSplit {
        train: tr,
        validation,
        test,
    } = split_corpus(&corpus, E2E_SPLIT, 0).unwrap();
    let hyper = Hyperparams {
        input_dim: 32,
        ..Hyperparams::default()
    };
    let model = OrderingModel::new(hyper, ingest::FeatureScaler::fit(&tr).unwrap(), 0).unwrap();
    let config = TrainConfig {
        epochs: 200,
        batch_size: 16,
        adam: AdamConfig::default(),
        seed: 0,
        patience: Some(30),
        ..TrainConfig::default()
    };
    let outcome = train(model, &tr, &validation, &config).unwrap();
    let report = run_evaluation(
        &outcome.model,
        &test,
        &EvalConfig {
            k_values: vec![1],
            methods: Method::ALL.to_vec(),
            seed: 0,
            ..EvalConfig::default()
        },
    )
    .unwrap();
    PipelineRun {
        report,
        epochs: outcome.history.len(),
        elapsed: started.elapsed(),
    }
}

fn end_to_end_learning() -> Outcome {
    let run = run_pipeline(1.0);
    let direct = run.report.aggregate(Method::Direct, 1).unwrap().edit_score;
    let random = run.report.aggregate(Method::Random, 1).unwrap().edit_score;
    let combined = (direct.stderr.powi(2) + random.stderr.powi(2)).sqrt();
    let detail = format!(
        "direct {direct} vs random {random}, margin {:.1} SE, {} epochs, {:.0}s",
        (direct.mean - random.mean) / combined,
        run.epochs,
        run.elapsed.as_secs_f64()
    );
    ensure(run.elapsed <= Duration::from_secs(600), || {
        format!("too slow: {detail}")
    })?;
    ensure(direct.mean - random.mean > 3.0 * combined, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn no_signal_control() -> Outcome {
    let run = run_pipeline(0.0);
    let direct = run.report.aggregate(Method::Direct, 1).unwrap().edit_score;
    let random = run.report.aggregate(Method::Random, 1).unwrap().edit_score;
    let combined = (direct.stderr.powi(2) + random.stderr.powi(2)).sqrt();
    let info: &InformationEstimate = run.report.information.as_ref().unwrap();
    let detail = format!(
        "MI {} bits (clipped {}), direct {direct} vs random {random}",
        info.bits, info.bits_clipped
    );
    ensure(info.bits.mean.abs() <= 0.15, || detail.clone())?;
    ensure((direct.mean - random.mean).abs() <= 2.0 * combined, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let spec = SyntheticSpec {
        seed: 7,
        n_albums: 40,
        min_tracks: 3,
        max_tracks: 6,
        dimension: 8,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    ensure(
        corpus_to_csv(&corpus).unwrap()
            == corpus_to_csv(&generate_synthetic(&spec).unwrap()).unwrap(),
        || "synthetic corpus differs between runs".into(),
    )?;
    let split = split_corpus(&corpus, SplitFractions::default(), 7).unwrap();
    let again = split_corpus(&corpus, SplitFractions::default(), 7).unwrap();
    ensure(
        corpus_to_csv(&split.test).unwrap() == corpus_to_csv(&again.test).unwrap(),
        || "split differs".into(),
    )?;

    let hyper = Hyperparams {
        input_dim: 8,
        hidden_dim: 8,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len: 8,
        ..Hyperparams::default()
    };
    let config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 7,
        ..TrainConfig::default()
    };
    let fresh =
        || OrderingModel::new(hyper, ingest::FeatureScaler::fit(&split.train).unwrap(), 7).unwrap();
    let a = train(fresh(), &split.train, &split.validation, &config).unwrap();
    let b = train(fresh(), &split.train, &split.validation, &config).unwrap();
    ensure(a.history == b.history, || "loss history differs".into())?;
    ensure(a.model.params == b.model.params, || {
        "trained parameters differ".into()
    })?;

    let album = &split.test.albums[0];
    let draw = |seed| {
        sample_orders(
            &a.model,
            album,
            50,
            Sampling::Temperature(1.0),
            &mut seeded_rng(seed),
        )
        .unwrap()
    };
    ensure(draw(3) == draw(3), || "sampled orders differ".into())?;

    let eval = EvalConfig {
        k_values: vec![1, 2, 3],
        seed: 7,
        ..EvalConfig::default()
    };
    let r1 = run_evaluation(&a.model, &split.test, &eval)
        .unwrap()
        .to_json()
        .unwrap();
    let r2 = run_evaluation(&b.model, &split.test, &eval)
        .unwrap()
        .to_json()
        .unwrap();
    ensure(r1 == r2, || "evaluation reports differ".into())?;
    Ok("corpus, split, loss history, parameters, samples and report are bit-identical".into())
}

fn checkpoint_round_trip() -> Outcome {
    let corpus = generate_synthetic(&SyntheticSpec {
        seed: 9,
        n_albums: 24,
        min_tracks: 3,
        max_tracks: 8,
        dimension: 10,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let hyper = Hyperparams {
        input_dim: 10,
        hidden_dim: 12,
        d_model: 16,
        n_heads: 4,
        d_ff: 32,
        max_len: 10,
        ..Hyperparams::default()
    };
    let model = OrderingModel::new(hyper, ingest::FeatureScaler::fit(&corpus).unwrap(), 9).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let model = train(model, &corpus, &corpus, &cfg).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    ensure(loaded.params == model.params, || {
        "parameters differ after reload".into()
    })?;

    let same = |a: &Matrix, b: &Matrix| {
        a.rows == b.rows
            && a.data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits())
    };
    let mut rng = seeded_rng(99);
    for i in 0..100 {
        let m = rng.gen_range(2..=10);
        let probe = album(m, 10, &mut rng);
        let mut prefix: Vec<usize> = (0..m).collect();
        rand::seq::SliceRandom::shuffle(prefix.as_mut_slice(), &mut rng);
        prefix.truncate(rng.gen_range(0..m));
        let z1 = model
            .encode_tracks(&model.standardize(&probe).unwrap())
            .unwrap();
        let z2 = loaded
            .encode_tracks(&loaded.standardize(&probe).unwrap())
            .unwrap();
        ensure(same(&z1, &z2), || format!("input {i}: codes differ"))?;
        let l1 = model.forward_logits(&z1, &prefix, true).unwrap();
        let l2 = loaded.forward_logits(&z2, &prefix, true).unwrap();
        ensure(same(&l1, &l2), || format!("input {i}: logits differ"))?;
    }
    Ok("100 random inputs give bit-identical codes and logits after reload".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_check),
        ("uniform calibration", uniform_calibration),
        ("edit distance reference", levenshtein_reference),
        ("template fit optimality", template_optimality),
        ("end-to-end learning", end_to_end_learning),
        ("no-signal control", no_signal_control),
        ("determinism", determinism),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
