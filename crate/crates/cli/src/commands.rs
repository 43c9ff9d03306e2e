use std::fs;
use std::path::{Path, PathBuf};

use promptalign::alignment::gradient_check;
use promptalign::datamodel::split_view;
use promptalign::inference::{load_scores, save_scores, score_records, InferenceOptions, PreparedPrompts};
use promptalign::io::sha256_hex;
use promptalign::metrics::{aggregate, evaluate_records, load_report, save_report, EvalOptions};
use promptalign::numerics::CheckReport;
use promptalign::promptbank::BankMode;
use promptalign::synth::generate;
use promptalign::trainer::{load_checkpoint, save_checkpoint, Trainer};
use promptalign::{
    load_dataset, load_prompt_bank, load_subset_bank, AdapterModel, Dataset, Error, PromptBank, Strategy,
    SynthConfig, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::manifest::Recorder;
use crate::{CliError, EvalArgs, GradcheckArgs, InferArgs, StrategyArg, SynthArgs, TrainArgs};

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn check_dims(dataset: &Dataset, bank: &PromptBank) -> Result<(), CliError> {
    if dataset.dim != bank.dim() {
        return Err(Error::Schema(format!(
            "features are {}-dimensional but prompts are {}-dimensional",
            dataset.dim,
            bank.dim()
        ))
        .into());
    }
    Ok(())
}

pub fn synth(a: SynthArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut rec = Recorder::start("synth", argv);
    let prevalence: [f64; 3] = a
        .prevalence
        .as_slice()
        .try_into()
        .map_err(|_| CliError::config(format!("--prevalence needs 3 values, got {}", a.prevalence.len())))?;
    let n_train = a.n_train.unwrap_or(a.n * 6 / 10);
    let n_val = a.n_val.unwrap_or(a.n * 2 / 10);
    let n_test = a.n_test.unwrap_or(a.n - a.n * 6 / 10 - a.n * 2 / 10);
    let config = SynthConfig {
        dim: a.dim,
        n_train,
        n_val,
        n_test,
        prevalence,
        noise_sigma: a.sigma,
        seed: a.seed,
        paraphrases: a.paraphrases,
        prompt_jitter: a.jitter,
        mode: if a.fixed_class { BankMode::FixedClass } else { BankMode::TextAugmented },
    };
    let out = generate(&config)?;
    let files = out.save(&a.out.dir, "synth")?;
    for p in [&files.features, &files.prompts, &files.subsets] {
        rec.output(p)?;
        println!("wrote {}", p.display());
    }
    rec.finish(&a.out.dir, "synth", Some(a.seed), serde_json::to_value(&config).expect("config serializes"))?;
    Ok(())
}

fn read_train_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(config)
}

pub fn train(a: TrainArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut rec = Recorder::start("train", argv);
    let dataset = load_dataset(&a.features)?;
    rec.input(&a.features)?;
    let bank = load_prompt_bank(&a.prompts)?;
    rec.input(&a.prompts)?;
    check_dims(&dataset, &bank)?;

    let overrides = a.seed.is_some()
        || a.epochs.is_some()
        || a.batch_size.is_some()
        || a.lr_adapters.is_some()
        || a.lr_temp.is_some();
    let trainer = match &a.resume {
        Some(path) => {
            if overrides {
                return Err(CliError::config("--resume uses the checkpoint's config; drop the overrides"));
            }
            let ck = load_checkpoint(path)?;
            rec.input(path)?;
            Trainer::resume(&dataset, &bank, &ck)?
        }
        None => {
            let mut config = match &a.config {
                Some(path) => {
                    let c = read_train_config(path)?;
                    rec.input(path)?;
                    c
                }
                None => TrainConfig::default(),
            };
            config.seed = a.seed.unwrap_or(config.seed);
            config.epochs = a.epochs.unwrap_or(config.epochs);
            config.batch_size = a.batch_size.unwrap_or(config.batch_size);
            config.lr_adapters = a.lr_adapters.unwrap_or(config.lr_adapters);
            config.lr_temp = a.lr_temp.unwrap_or(config.lr_temp);
            Trainer::new(&dataset, &bank, config)?
        }
    };
    let config = trainer.config().clone();
    eprintln!(
        "training {} epochs x {} steps (batch {})",
        config.epochs,
        trainer.steps_per_epoch(),
        config.batch_size
    );
    let outcome = trainer.run()?;
    for e in &outcome.history.epochs {
        eprintln!(
            "epoch {:>3}  loss {:.6}  train loss {:.6}  val mAP {:.4}  theta {:.4}",
            e.epoch, e.mean_loss, e.train_loss, e.val_map, e.log_scale
        );
    }

    let best = a.out.dir.join("checkpoint.json");
    let last = a.out.dir.join("last.checkpoint.json");
    let history = a.out.dir.join("history.json");
    save_checkpoint(&outcome.best, &best)?;
    save_checkpoint(&outcome.last, &last)?;
    write(&history, &outcome.history.to_json())?;
    for p in [&best, &last, &history] {
        rec.output(p)?;
    }
    println!(
        "best epoch {} (val mAP {:.4}) -> {}",
        outcome.history.best_epoch,
        outcome.history.best_val_map,
        best.display()
    );
    rec.finish(&a.out.dir, "train", Some(config.seed), serde_json::to_value(&config).expect("config serializes"))?;
    Ok(())
}

pub fn infer(a: InferArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut rec = Recorder::start("infer", argv);
    let strategies: Vec<Strategy> = match a.strategy {
        StrategyArg::Standard => vec![Strategy::Standard],
        StrategyArg::Posneg => vec![Strategy::PosNeg],
        StrategyArg::Multiclass => vec![Strategy::MultiClass],
        StrategyArg::All => Strategy::ALL.to_vec(),
    };
    if strategies.contains(&Strategy::MultiClass) && a.subsets.is_none() {
        return Err(CliError::config("the multiclass strategy needs --subsets"));
    }
    let dataset = load_dataset(&a.features)?;
    rec.input(&a.features)?;
    let bank = load_prompt_bank(&a.prompts)?;
    rec.input(&a.prompts)?;
    check_dims(&dataset, &bank)?;
    let subsets = match &a.subsets {
        Some(path) => {
            let s = load_subset_bank(path)?;
            rec.input(path)?;
            if s.dim() != dataset.dim {
                return Err(Error::Schema(format!(
                    "features are {}-dimensional but subsets are {}-dimensional",
                    dataset.dim,
                    s.dim()
                ))
                .into());
            }
            Some(s)
        }
        None => None,
    };
    let (model, seed) = match &a.checkpoint {
        Some(path) if !a.zero_shot => {
            let ck = load_checkpoint(path)?;
            rec.input(path)?;
            if ck.model.dim() != dataset.dim {
                return Err(Error::Schema(format!(
                    "checkpoint is {}-dimensional but features are {}-dimensional",
                    ck.model.dim(),
                    dataset.dim
                ))
                .into());
            }
            (ck.model, Some(ck.config.seed))
        }
        _ => (AdapterModel::identity(dataset.dim), None),
    };

    let records = split_view(&dataset, a.split);
    if records.is_empty() {
        return Err(CliError::config(format!("the {} split is empty", a.split)));
    }
    let options = InferenceOptions {
        use_temperature: a.use_temperature,
    };
    let prompts = PreparedPrompts::new(&model, &bank, subsets.as_ref(), options)?;
    for strategy in &strategies {
        let scores = score_records(&model, records.iter().copied(), &prompts, *strategy)?;
        let path = a.out.dir.join(format!("{strategy}.scores.jsonl"));
        save_scores(&scores, &path)?;
        rec.output(&path)?;
        println!("wrote {}", path.display());
    }
    let config = json!({
        "strategies": strategies.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        "split": a.split.as_str(),
        "zero_shot": a.zero_shot,
        "use_temperature": a.use_temperature,
    });
    rec.finish(&a.out.dir, "infer", seed, config)?;
    Ok(())
}

pub fn eval(a: EvalArgs, argv: Vec<String>) -> Result<(), CliError> {
    if !a.aggregate.is_empty() {
        return eval_aggregate(&a.aggregate, &a.out.dir, argv);
    }
    let mut rec = Recorder::start("eval", argv);
    let (features, scores_path) = match (&a.features, &a.scores) {
        (Some(f), Some(s)) => (f, s),
        _ => return Err(CliError::config("eval needs --features and --scores, or --aggregate")),
    };
    let dataset = load_dataset(features)?;
    rec.input(features)?;
    let scores = load_scores(scores_path)?;
    rec.input(scores_path)?;
    let records = split_view(&dataset, a.split);
    if records.is_empty() {
        return Err(CliError::config(format!("the {} split is empty", a.split)));
    }
    let options = EvalOptions {
        skip_undefined: a.skip_undefined,
    };
    let mut report = evaluate_records(&scores, &records, a.split, options)?;
    if let Some(path) = &a.checkpoint {
        let ck = load_checkpoint(path)?;
        rec.input(path)?;
        report.seed = Some(ck.config.seed);
        report.config_digest = Some(sha256_hex(ck.config.to_json().as_bytes()));
    }
    let stem = format!("{}.{}", report.strategy, a.split);
    let json_path = a.out.dir.join(format!("{stem}.report.json"));
    let table_path = a.out.dir.join(format!("{stem}.report.txt"));
    save_report(&report, &json_path, &table_path)?;
    rec.output(&json_path)?;
    rec.output(&table_path)?;
    print!("{}", report.to_table());
    let config = json!({
        "split": a.split.as_str(),
        "skip_undefined": a.skip_undefined,
    });
    rec.finish(&a.out.dir, &stem, report.seed, config)?;
    Ok(())
}

fn eval_aggregate(paths: &[PathBuf], out_dir: &Path, argv: Vec<String>) -> Result<(), CliError> {
    let mut rec = Recorder::start("eval", argv);
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        reports.push(load_report(p)?);
        rec.input(p)?;
    }
    let agg = aggregate(&reports)?;
    let stem = format!("aggregate.{}", agg.strategy);
    let json_path = out_dir.join(format!("{stem}.report.json"));
    let table_path = out_dir.join(format!("{stem}.report.txt"));
    let mut text = serde_json::to_string_pretty(&agg).expect("report serializes");
    text.push('\n');
    write(&json_path, &text)?;
    write(&table_path, &agg.to_table())?;
    rec.output(&json_path)?;
    rec.output(&table_path)?;
    print!("{}", agg.to_table());
    rec.finish(out_dir, &stem, None, json!({ "aggregate": paths.len() }))?;
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRun {
    seed: u64,
    n: usize,
    dim: usize,
    passed: bool,
    report: CheckReport,
}

pub fn gradcheck(a: GradcheckArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut rec = Recorder::start("gradcheck", argv);
    if a.n < 2 {
        return Err(CliError::config("--n must be at least 2"));
    }
    if a.dim == 0 || a.configs == 0 {
        return Err(CliError::config("--dim and --configs must be positive"));
    }
    if !(a.h > 0.0 && a.h.is_finite()) || !(a.tol > 0.0 && a.tol.is_finite()) {
        return Err(CliError::config("--h and --tol must be positive"));
    }
    let mut runs = Vec::new();
    for seed in a.seed..a.seed + a.configs {
        let report = gradient_check(a.n, a.dim, seed, a.h, a.tol)?;
        let passed = report.passed();
        match &report.worst {
            Some(w) => println!(
                "seed {seed}: {} max rel err {:.3e} (worst {}[{}]: analytic {:.6e}, numeric {:.6e}) over {} coordinates",
                if passed { "PASS" } else { "FAIL" },
                report.max_rel_err,
                w.param,
                w.index,
                w.analytic,
                w.numeric,
                report.coordinates
            ),
            None => println!("seed {seed}: {}", if passed { "PASS" } else { "FAIL" }),
        }
        runs.push(GradcheckRun {
            seed,
            n: a.n,
            dim: a.dim,
            passed,
            report,
        });
    }
    let all_passed = runs.iter().all(|r| r.passed);
    let path = a.out.dir.join("gradcheck.json");
    let mut text = serde_json::to_string_pretty(&json!({ "passed": all_passed, "runs": runs })).expect("serializes");
    text.push('\n');
    write(&path, &text)?;
    rec.output(&path)?;
    let config = json!({ "n": a.n, "dim": a.dim, "configs": a.configs, "h": a.h, "tol": a.tol });
    rec.finish(&a.out.dir, "gradcheck", Some(a.seed), config)?;
    if all_passed {
        Ok(())
    } else {
        let failed = runs.iter().filter(|r| !r.passed).count();
        Err(CliError::numeric(format!(
            "gradient check failed for {failed} of {} configurations",
            runs.len()
        )))
    }
}
