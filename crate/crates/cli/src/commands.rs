use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use ptsr::data::{ingest, DatasetBundle, InputFormat, PrepareSettings, TargetMode};
use ptsr::eval::{explain as explain_one, key_item_recall, load_relations, metrics_from_ranks, rank_split, Explanation, ImportanceMode, Split};
use ptsr::model::{Ablation, Family, ItemId, ModelConfig};
use ptsr::synth::{generate, SynthConfig};
use ptsr::train::{AdamConfig, Checkpoint, TrainConfig, Trainer};

use crate::error::CliError;
use crate::{Ablate, EvaluateArgs, ExplainArgs, PrepareArgs, SplitArg, SynthArgs, TrainArgs};

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn append_line(out: &mut impl Write, path: &Path, value: &Value) -> Result<(), CliError> {
    writeln!(out, "{value}").and_then(|_| out.flush()).map_err(|e| CliError::io(path, e))
}

pub fn prepare(a: PrepareArgs) -> Result<(), CliError> {
    require_file(&a.input, "input file")?;
    let format: InputFormat = a.format.parse()?;
    if a.max_len == 0 {
        return Err(CliError::Usage("--max-len must be positive".into()));
    }
    let log = ingest(&a.input, &format)?;
    let settings = PrepareSettings { max_len: a.max_len, negatives: a.negatives, seed: a.seed, source: a.input.display().to_string() };
    let bundle = DatasetBundle::prepare(&log, settings)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    bundle.save(&a.output)?;
    let ds = &bundle.dataset;
    println!(
        "{} users, {} items, {} interactions after 5-core filtering; bundle {}",
        ds.users.len(),
        ds.num_items(),
        ds.num_interactions(),
        a.output.display()
    );
    Ok(())
}

fn ablation(flags: &[Ablate]) -> Ablation {
    Ablation {
        use_weight: !flags.contains(&Ablate::W),
        use_bias: !flags.contains(&Ablate::B),
        use_kl: !flags.contains(&Ablate::Kl),
        use_prob_embedding: !flags.contains(&Ablate::Probe),
    }
}

fn load_bundle(path: &Path) -> Result<DatasetBundle, CliError> {
    require_file(path, "dataset bundle")?;
    Ok(DatasetBundle::load(path)?)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&a.data)?;
    let family: Family = a.family.parse()?;
    let target_mode: TargetMode = a.target_mode.parse().map_err(CliError::Usage)?;
    let model_config = ModelConfig {
        dim: a.d,
        levels: a.levels,
        max_len: bundle.settings.max_len,
        gamma: a.gamma,
        lambda: a.lambda,
        family,
        ablation: ablation(&a.ablate),
        scorer_depth: a.scorer_depth,
        ..ModelConfig::default()
    };
    model_config.validate()?;
    if a.batch == 0 || a.epochs == 0 {
        return Err(CliError::Usage("--batch and --epochs must be positive".into()));
    }
    if !(a.lr >= 0.0 && a.lr.is_finite()) || !(a.weight_decay >= 0.0 && a.weight_decay.is_finite()) {
        return Err(CliError::Usage("--lr and --weight-decay must be finite and non-negative".into()));
    }
    let train_config = TrainConfig {
        adam: AdamConfig { lr: a.lr, weight_decay: a.weight_decay, ..AdamConfig::default() },
        batch_size: a.batch,
        max_epochs: a.epochs,
        patience: a.patience,
        data_seed: a.seed,
        init_seed: a.seed,
        target_mode,
        select_k: 10,
    };

    create_dir(&a.out)?;
    let last_path = a.out.join("last.ckpt");
    let best_path = a.out.join("best.ckpt");
    let log_path = a.out.join("run.jsonl");

    let mut trainer = if a.resume {
        require_file(&last_path, "checkpoint to resume")?;
        let state = Checkpoint::load(&last_path)?;
        if state.model_config != model_config || state.train != train_config {
            return Err(CliError::Usage(format!(
                "flags differ from the run stored in {}; resume with the original flags",
                last_path.display()
            )));
        }
        Trainer::resume(state, &bundle)?
    } else {
        Trainer::new(model_config, train_config, &bundle)?
    };

    let file = if a.resume {
        OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let state = trainer.checkpoint();
    write_json(&a.out.join("run_config.json"), &json!({ "run_config": state.run_config(), "config_hash": state.config_hash() }))?;
    append_line(
        &mut log,
        &log_path,
        &json!({
            "event": "start",
            "epoch": state.epoch,
            "run_config": state.run_config(),
            "config_hash": state.config_hash(),
        }),
    )?;

    while !trainer.is_done() {
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                let err = CliError::from(e);
                append_line(&mut log, &log_path, &json!({ "event": "error", "message": err.to_string() }))?;
                return Err(err);
            }
        };
        append_line(
            &mut log,
            &log_path,
            &json!({
                "event": "epoch",
                "epoch": record.epoch,
                "loss": record.loss,
                "valid_hr": record.valid.hr,
                "valid_ndcg": record.valid.ndcg,
                "k": record.valid.k,
            }),
        )?;
        let state = trainer.checkpoint();
        state.save(&last_path)?;
        if state.stale == 0 {
            state.best_snapshot().save(&best_path)?;
        }
        println!("epoch {:>3}  loss {:.4}  valid NDCG@10 {:.4}  HR@10 {:.4}", record.epoch, record.loss, record.valid.ndcg, record.valid.hr);
    }

    let state = trainer.checkpoint();
    let best = state.best_snapshot();
    let best_record = best.history.last().cloned();
    append_line(
        &mut log,
        &log_path,
        &json!({
            "event": "done",
            "epochs": state.epoch,
            "best_epoch": best.epoch,
            "best_valid_ndcg": best_record.as_ref().map(|r| r.valid.ndcg),
        }),
    )?;
    println!("best epoch {} written to {}", best.epoch, best_path.display());
    Ok(())
}

/// Loads a checkpoint and refuses when it was trained on a different bundle.
fn load_matching(checkpoint: &Path, bundle: &DatasetBundle) -> Result<Checkpoint, CliError> {
    require_file(checkpoint, "checkpoint")?;
    let state = Checkpoint::load(checkpoint)?;
    let data = bundle.fingerprint();
    if state.data_fingerprint != data {
        return Err(CliError::Usage(format!(
            "checkpoint and dataset do not match: checkpoint was trained on {}, --data is {}",
            state.data_fingerprint, data
        )));
    }
    Ok(state)
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&a.data)?;
    let state = load_matching(&a.checkpoint, &bundle)?;
    let model = state.model()?;
    let split = match a.split {
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    };
    let ranks = rank_split(&model, &bundle, split)?;
    let metrics = a.k.iter().map(|&k| metrics_from_ranks(&ranks, k)).collect::<Result<Vec<_>, _>>()?;
    for m in &metrics {
        println!("HR@{k} {:.4}  NDCG@{k} {:.4}", m.hr, m.ndcg, k = m.k);
    }
    let report = json!({
        "run_config": state.run_config(),
        "config_hash": state.config_hash(),
        "seed": state.train.init_seed,
        "data_seed": state.train.data_seed,
        "candidate_seed": bundle.candidates.seed,
        "checkpoint_epoch": state.epoch,
        "split": split,
        "users": ranks.len(),
        "metrics": metrics,
    });
    write_json(&a.out, &report)
}

fn explanation_record(bundle: &DatasetBundle, user: &str, e: &Explanation) -> Value {
    let ds = &bundle.dataset;
    let key = |id: ItemId| ds.item_key(id).unwrap_or("<pad>").to_string();
    let levels: Vec<Value> = e
        .levels
        .iter()
        .map(|l| {
            json!({
                "level": l.level,
                "fully_masked": l.fully_masked,
                "patterns": l.patterns.iter().map(|p| json!({
                    "start": p.start,
                    "items": p.items.iter().map(|&i| key(i)).collect::<Vec<_>>(),
                    "distance": p.distance,
                    "weight": p.weight,
                    "bias": p.bias,
                    "contribution": p.contribution,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "user": user,
        "target": key(e.target),
        "score": e.score,
        "mode": e.mode,
        "levels": levels,
        "items": e.items.iter().map(|x| json!({ "item": key(x.item), "importance": x.importance })).collect::<Vec<_>>(),
    })
}

pub fn explain(a: ExplainArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&a.data)?;
    let state = load_matching(&a.checkpoint, &bundle)?;
    let model = state.model()?;
    let mode: ImportanceMode = a.mode.parse().map_err(CliError::Usage)?;
    let ds = &bundle.dataset;
    let users: Vec<usize> = if a.user.is_empty() {
        (0..ds.users.len()).collect()
    } else {
        a.user
            .iter()
            .map(|u| ds.user_index(u).ok_or_else(|| CliError::Usage(format!("unknown user `{u}`"))))
            .collect::<Result<_, _>>()?
    };
    if let Some(rel) = &a.relations {
        require_file(rel, "relation file")?;
    }

    create_dir(&a.out)?;
    let path = a.out.join("explanations.jsonl");
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for &u in &users {
        let user = &ds.users[u];
        let e = explain_one(&model, user.test_input(ds.max_len), user.test, mode)?;
        writeln!(out, "{}", explanation_record(&bundle, &user.user, &e)).map_err(|e| CliError::io(&path, e))?;
    }
    out.flush().map_err(|e| CliError::io(&path, e))?;

    let mut report = json!({
        "run_config": state.run_config(),
        "config_hash": state.config_hash(),
        "seed": state.train.init_seed,
        "mode": mode,
        "users": users.len(),
    });
    if let Some(rel) = &a.relations {
        let (relations, unknown) = load_relations(rel, &bundle)?;
        let mut recall = Vec::new();
        for &k in &a.k {
            for r in key_item_recall(&model, &bundle, &relations, k, mode)? {
                println!("{} Recall@{} {:.4} over {} pairs ({} skipped)", r.relation, r.k, r.recall, r.pairs, r.skipped);
                recall.push(r);
            }
        }
        report["relations"] = json!({ "file": rel.display().to_string(), "rows": relations.len(), "unknown_rows": unknown });
        report["recall"] = serde_json::to_value(recall).expect("recall serializes");
    }
    write_json(&a.out.join("report.json"), &report)?;
    println!("{} explanations written to {}", users.len(), path.display());
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    require_file(&a.config, "synth config")?;
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::io(&a.config, e))?;
    let config: SynthConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.config.display())))?;
    let output = generate(&config)?;
    output.write(&a.out, &config)?;
    println!(
        "{} users, {} interactions, {} rule firings; interactions.csv sha256 {}",
        output.sequences.len(),
        output.sequences.iter().map(|(_, s)| s.len()).sum::<usize>(),
        output.keys.len(),
        output.log_sha256()
    );
    Ok(())
}
