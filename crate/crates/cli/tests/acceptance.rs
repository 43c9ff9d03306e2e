//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines show up in `cargo test` output.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use promptalign::alignment::{batch_distributions, gradient_check, kl_contrastive_loss, random_problem, total_loss};
use promptalign::inference::{
    load_scores, multiclass_scores, posneg_probabilities, InferenceOptions, PreparedPrompts,
};
use promptalign::promptbank::{mask_to_subset, BankMode, Polarity, PromptEntry, SubsetPrompt, NUM_SUBSETS};
use promptalign::synth::null_ap_distribution;
use promptalign::{
    average_precision, load_dataset, load_prompt_bank, load_subset_bank, DenseMatrix, PromptBank, Split,
    Strategy, SubsetBank, NUM_CRITERIA,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut configs = 0;
    for i in 0..24u64 {
        let n = [2, 4, 8][(i % 3) as usize];
        let dim = [4, 8][((i / 3) % 2) as usize];
        let report = gradient_check(n, dim, 1000 + i, 1e-5, 1e-4).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_err);
        ensure(report.passed(), || {
            format!("config {i} (N={n}, D={dim}): max rel err {:.3e} at {:?}", report.max_rel_err, report.worst)
        })?;
        configs += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-4, || format!("max rel err {worst:.3e}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{configs} configs, max rel err {worst:.2e} (< 1e-4, h=1e-5), {secs:.2}s"))
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn uniform_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_banks(rng: &mut ChaCha8Rng, dim: usize) -> (PromptBank, SubsetBank) {
    let mut entries = Vec::new();
    for criterion in 0..NUM_CRITERIA {
        for polarity in [Polarity::Positive, Polarity::Negative] {
            entries.push(PromptEntry {
                criterion,
                polarity,
                text: format!("p{criterion}{polarity:?}"),
                embedding: uniform_vec(rng, dim),
                designated: true,
            });
        }
    }
    let subsets = (0..NUM_SUBSETS)
        .map(|m| SubsetPrompt {
            subset: mask_to_subset(m),
            text: format!("s{m}"),
            embedding: uniform_vec(rng, dim),
        })
        .collect();
    (
        PromptBank::new(dim, BankMode::FixedClass, entries).unwrap(),
        SubsetBank::new(dim, subsets).unwrap(),
    )
}

fn distribution_invariants() -> Check {
    let mut worst_row = 0.0f64;
    let mut worst_pair = 0.0f64;
    let mut worst_agg = 0.0f64;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let dim = rng.random_range(3..=8);
        let n = rng.random_range(2..=8);
        let (model, _) = random_problem(2, dim, 50_000 + case);

        let s = uniform_matrix(&mut rng, n, n);
        let (p_img, p_txt) = batch_distributions(&s, model.log_scale).map_err(|e| e.to_string())?;
        for p in [&p_img, &p_txt] {
            for r in 0..n {
                worst_row = worst_row.max((p.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }

        let (bank, subsets) = random_banks(&mut rng, dim);
        let options = InferenceOptions {
            use_temperature: rng.random_bool(0.5),
        };
        let prompts = PreparedPrompts::new(&model, &bank, Some(&subsets), options).map_err(|e| e.to_string())?;
        let x = DenseMatrix::from_vec(1, dim, uniform_vec(&mut rng, dim)).unwrap();
        let v = model.project_images(&x).map_err(|e| e.to_string())?;
        for [pos, neg] in posneg_probabilities(v.row(0), &prompts) {
            worst_pair = worst_pair.max((pos + neg - 1.0).abs());
        }
        let (scores, probs) = multiclass_scores(v.row(0), &prompts).map_err(|e| e.to_string())?;
        worst_row = worst_row.max((probs.iter().sum::<f64>() - 1.0).abs());
        for (i, &score) in scores.iter().enumerate() {
            let mut agg = 0.0;
            for (j, p) in probs.iter().enumerate() {
                if subsets.prompts()[j].subset[i] {
                    agg += p;
                }
            }
            worst_agg = worst_agg.max((score - agg).abs());
        }
    }
    ensure(worst_row <= 1e-9, || format!("softmax row sum off by {worst_row:.3e}"))?;
    ensure(worst_pair <= 1e-12, || format!("p+ + p- off by {worst_pair:.3e}"))?;
    ensure(worst_agg <= 1e-12, || format!("membership aggregation off by {worst_agg:.3e}"))?;
    Ok(format!(
        "1000 cases: row sums within {worst_row:.1e}, p+ + p- within {worst_pair:.1e}, aggregation within {worst_agg:.1e}"
    ))
}

/// O(n²) AP: each positive's rank and hit count are found by counting the
/// items ordered before or at it (higher score, or equal score and lower
/// index).
fn brute_force_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let mut terms: Vec<(usize, f64)> = Vec::new();
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        let rank = (0..scores.len()).filter(|&j| ahead(j, i)).count();
        let hits = (0..scores.len()).filter(|&j| labels[j] && ahead(j, i)).count();
        terms.push((rank, hits as f64 / rank as f64));
    }
    terms.sort_by_key(|t| t.0);
    terms.iter().fold(0.0, |acc, t| acc + t.1) / terms.len() as f64
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn ap_oracle() -> Check {
    let mut ties = 0;
    let mut worst_sigmoid = 0.0f64;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7_000 + case);
        let n = rng.random_range(1..=64);
        let discrete = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if discrete {
                    rng.random_range(-4..=4) as f64 / 4.0
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let forced = rng.random_range(0..n);
        labels[forced] = true;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            ties += 1;
        }
        let fast = average_precision(&scores, &labels).map_err(|e| e.to_string())?;
        let slow = brute_force_ap(&scores, &labels);
        ensure(fast == slow, || format!("case {case}: fast {fast:?} vs brute force {slow:?}"))?;
        let squashed: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        let after = average_precision(&squashed, &labels).map_err(|e| e.to_string())?;
        worst_sigmoid = worst_sigmoid.max((after - fast).abs());
    }
    ensure(ties >= 100, || format!("only {ties} instances had ties"))?;
    ensure(worst_sigmoid <= 1e-12, || format!("sigmoid changed AP by {worst_sigmoid:.3e}"))?;
    Ok(format!(
        "1000 instances ({ties} with ties) bit-identical to brute force; sigmoid moves AP by at most {worst_sigmoid:.1e}"
    ))
}

fn kl_properties() -> Check {
    let mut min_random = f64::INFINITY;
    let mut worst_equal = 0.0f64;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(90_000 + case);
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(2..=8);
        let mut q_rows = Vec::new();
        let mut p_rows = Vec::new();
        for _ in 0..rows {
            let mut support: Vec<bool> = (0..cols).map(|_| rng.random_bool(0.5)).collect();
            let k = rng.random_range(0..cols);
            support[k] = true;
            let m = support.iter().filter(|&&s| s).count() as f64;
            q_rows.push(support.iter().map(|&s| if s { 1.0 / m } else { 0.0 }).collect::<Vec<_>>());
            let logits: Vec<f64> = (0..cols).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            p_rows.push(e.iter().map(|x| x / z).collect::<Vec<_>>());
        }
        let q = DenseMatrix::from_rows(&q_rows).unwrap();
        let p = DenseMatrix::from_rows(&p_rows).unwrap();
        let random = kl_contrastive_loss(&p, &q).map_err(|e| e.to_string())?;
        ensure(random >= 0.0, || format!("case {case}: negative KL {random}"))?;
        ensure(random > 1e-12, || format!("case {case}: P != Q but KL = {random:e}"))?;
        min_random = min_random.min(random);
        let equal = kl_contrastive_loss(&q, &q).map_err(|e| e.to_string())?;
        worst_equal = worst_equal.max(equal.abs());

        let (model, batch) = random_problem(rng.random_range(2..=8), 4, 120_000 + case);
        let total = total_loss(&model, &batch).map_err(|e| e.to_string())?;
        ensure(total >= 0.0, || format!("case {case}: negative total loss {total}"))?;
    }
    ensure(worst_equal <= 1e-12, || format!("KL(Q||Q) = {worst_equal:e}"))?;
    let q = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
    let p = DenseMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
    let ln2 = kl_contrastive_loss(&p, &q).map_err(|e| e.to_string())?;
    ensure((ln2 - std::f64::consts::LN_2).abs() <= 1e-6, || format!("ln 2 case gave {ln2}"))?;
    Ok(format!(
        "1000 cases: KL >= 0 (min over P != Q {min_random:.2e}), |KL(Q||Q)| <= {worst_equal:.1e}, ln 2 case {ln2:.9}"
    ))
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_promptalign"));
    c.env_remove("PROMPTALIGN_OUT_DIR");
    c
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// synth → train → infer (all strategies) → eval, returning every artifact
/// that must be reproducible.
fn pipeline(root: &Path) -> Result<(Vec<PathBuf>, [f64; 3]), String> {
    let (data, model, scores, reports) = (root.join("data"), root.join("model"), root.join("scores"), root.join("reports"));
    let features = data.join("synth.features.jsonl");
    let prompts = data.join("synth.prompts.jsonl");
    let subsets = data.join("synth.subsets.jsonl");
    cli(&[
        "synth", "--dim", "16", "--n", "1000", "--prevalence", "0.5,0.5,0.5", "--sigma", "0.1", "--seed", "0",
        "--out-dir", p(&data),
    ])?;
    cli(&[
        "train", "--features", p(&features), "--prompts", p(&prompts), "--epochs", "5", "--batch-size", "32",
        "--seed", "0", "--out-dir", p(&model),
    ])?;
    let checkpoint = model.join("checkpoint.json");
    cli(&[
        "infer", "--features", p(&features), "--prompts", p(&prompts), "--subsets", p(&subsets), "--checkpoint",
        p(&checkpoint), "--strategy", "all", "--split", "test", "--out-dir", p(&scores),
    ])?;
    let mut artifacts = vec![
        features.clone(),
        prompts.clone(),
        subsets.clone(),
        checkpoint.clone(),
        model.join("last.checkpoint.json"),
        model.join("history.json"),
    ];
    let mut maps = [0.0; 3];
    for (k, strategy) in Strategy::ALL.iter().enumerate() {
        let score_file = scores.join(format!("{strategy}.scores.jsonl"));
        cli(&[
            "eval", "--features", p(&features), "--scores", p(&score_file), "--checkpoint", p(&checkpoint),
            "--out-dir", p(&reports),
        ])?;
        let report = reports.join(format!("{strategy}.test.report.json"));
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&report).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        maps[k] = json["map"].as_f64().ok_or("report without map")?;
        artifacts.extend([score_file, report, reports.join(format!("{strategy}.test.report.txt"))]);
    }
    Ok((artifacts, maps))
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (_, maps) = pipeline(tmp.path())?;
    let secs = start.elapsed().as_secs_f64();
    for (strategy, map) in Strategy::ALL.iter().zip(maps) {
        ensure(map >= 0.95, || format!("{strategy} test mAP {map:.4} < 0.95"))?;
    }
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "test mAP standard {:.4}, posneg {:.4}, multiclass {:.4} (>= 0.95) in {secs:.2}s",
        maps[0], maps[1], maps[2]
    ))
}

fn null_calibration() -> Check {
    let stats = null_ap_distribution(1000, 0.19, 100, 19).map_err(|e| e.to_string())?;
    ensure((0.17..=0.23).contains(&stats.mean), || format!("mean AP {:.4} outside [0.17, 0.23]", stats.mean))?;
    Ok(format!(
        "100 trials, n=1000, prevalence 0.19: mean AP {:.4} (std {:.4}) in [0.17, 0.23]",
        stats.mean,
        stats.std.unwrap_or(0.0)
    ))
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (files_a, _) = pipeline(a.path())?;
    let (files_b, _) = pipeline(b.path())?;
    for (x, y) in files_a.iter().zip(&files_b) {
        let bx = fs::read(x).map_err(|e| e.to_string())?;
        let by = fs::read(y).map_err(|e| e.to_string())?;
        ensure(bx == by, || format!("{} differs between runs", x.strip_prefix(a.path()).unwrap_or(x).display()))?;
    }
    Ok(format!(
        "{} artifacts (data, checkpoints, history, scores, reports) byte-identical across two runs",
        files_a.len()
    ))
}

fn unit(x: &[f64]) -> Vec<f64> {
    let n = x.iter().fold(0.0, |acc, v| acc + v * v).sqrt();
    x.iter().map(|v| v / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn zero_shot() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    let out = tmp.path().join("scores");
    cli(&["synth", "--dim", "12", "--n", "300", "--sigma", "0.6", "--seed", "5", "--out-dir", p(&data)])?;
    let features = data.join("synth.features.jsonl");
    let prompts = data.join("synth.prompts.jsonl");
    let subsets = data.join("synth.subsets.jsonl");
    cli(&[
        "infer", "--features", p(&features), "--prompts", p(&prompts), "--subsets", p(&subsets), "--zero-shot",
        "--strategy", "all", "--out-dir", p(&out),
    ])?;

    let dataset = load_dataset(&features).map_err(|e| e.to_string())?;
    let bank = load_prompt_bank(&prompts).map_err(|e| e.to_string())?;
    let subset_bank = load_subset_bank(&subsets).map_err(|e| e.to_string())?;
    let designated = |c: usize, positive: bool| {
        let e = bank
            .entries()
            .iter()
            .find(|e| e.criterion == c && e.designated && e.polarity.is_positive() == positive)
            .expect("designated prompt");
        unit(&e.embedding)
    };
    let pos: Vec<Vec<f64>> = (0..NUM_CRITERIA).map(|c| designated(c, true)).collect();
    let neg: Vec<Vec<f64>> = (0..NUM_CRITERIA).map(|c| designated(c, false)).collect();
    let subset_rows: Vec<Vec<f64>> = subset_bank.prompts().iter().map(|s| unit(&s.embedding)).collect();

    let records = dataset.split_view(Split::Test);
    let mut compared = 0;
    for strategy in Strategy::ALL {
        let scores = load_scores(&out.join(format!("{strategy}.scores.jsonl"))).map_err(|e| e.to_string())?;
        ensure(scores.records.len() == records.len(), || format!("{strategy}: wrong record count"))?;
        for (r, s) in records.iter().zip(&scores.records) {
            ensure(r.id == s.id, || format!("{strategy}: order mismatch at {}", r.id))?;
            let v = unit(&r.embedding);
            let expected: [f64; NUM_CRITERIA] = match strategy {
                Strategy::Standard => std::array::from_fn(|i| sigmoid(dot(&v, &pos[i]))),
                Strategy::PosNeg => std::array::from_fn(|i| {
                    let (a, b) = (dot(&v, &pos[i]), dot(&v, &neg[i]));
                    let m = a.max(b);
                    let (ea, eb) = ((a - m).exp(), (b - m).exp());
                    ea / (ea + eb)
                }),
                Strategy::MultiClass => {
                    let sims: Vec<f64> = subset_rows.iter().map(|t| dot(&v, t)).collect();
                    let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = sims.iter().map(|x| (x - m).exp()).collect();
                    let z = e.iter().fold(0.0, |acc, x| acc + x);
                    std::array::from_fn(|i| {
                        let mut acc = 0.0;
                        for (j, ej) in e.iter().enumerate() {
                            if subset_bank.prompts()[j].subset[i] {
                                acc += ej / z;
                            }
                        }
                        f64::min(acc, 1.0)
                    })
                }
            };
            ensure(s.scores == expected, || {
                format!("{strategy} {}: {:?} vs raw-embedding oracle {:?}", r.id, s.scores, expected)
            })?;
            compared += NUM_CRITERIA;
        }
    }
    Ok(format!(
        "no checkpoint read; {compared} scores over 3 strategies equal the raw normalized-embedding oracle exactly"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("distribution invariants", distribution_invariants),
        ("AP oracle equivalence", ap_oracle),
        ("KL properties", kl_properties),
        ("end-to-end separable run", end_to_end),
        ("null calibration", null_calibration),
        ("determinism", determinism),
        ("zero-shot path", zero_shot),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
