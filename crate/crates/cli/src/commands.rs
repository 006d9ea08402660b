//! Subcommand implementations and the shared artifact plumbing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use drrd_core::corpus::{read_corpus_file, summarize, write_corpus, Event, Label};
use drrd_core::embed::{
    build_user_documents, tokenize, train_dbow, DocEmbeddingModel, Document,
};
use drrd_core::eval::{
    compute_metrics, early_detection_curve, metrics_rows, split_folds, stratified_holdout,
    write_curve_csv, write_metrics_csv, DeadlinePoint, Metrics, MetricsRow, HOLDOUT_FRACTION,
};
use drrd_core::model::{DrrdModel, EventEmbedder, Prediction, TrainOutcome};
use drrd_core::util::{fork_seed, sha256_file};

use crate::config::{parse_number_list, RunConfig};
use crate::{AppError, EvalArgs, PredictArgs, SynthArgs, TrainArgs, TrainFlags};

const TEXT_EMBED_FILE: &str = "text_embed.bin";
const USER_EMBED_FILE: &str = "user_embed.bin";
const MODEL_FILE: &str = "drrd.bin";
const CONFIG_ECHO_FILE: &str = "effective_config.toml";
const MANIFEST_FILE: &str = "manifest.json";
const TRAIN_LOG_FILE: &str = "train_log.csv";
const SPLIT_FILE: &str = "split.json";
const METRICS_FILE: &str = "metrics.csv";
const CURVE_FILE: &str = "early_detection.csv";

fn apply_train_flags(config: &mut RunConfig, flags: &TrainFlags) {
    if let Some(v) = flags.seed {
        config.seed = v;
    }
    if let Some(v) = flags.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = flags.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = flags.dropout {
        config.train.dropout = v;
    }
    if let Some(v) = flags.d_v {
        config.embed.d_v = v;
    }
    if let Some(v) = flags.d_f {
        config.train.d_f = v;
    }
    if let Some(v) = flags.dense_hidden {
        config.train.dense_hidden = v;
    }
    if let Some(v) = flags.max_hours {
        config.train.max_hours = v;
    }
    if let Some(v) = flags.patience {
        config.train.patience = v;
    }
    if let Some(v) = flags.embed_epochs {
        config.embed.epochs = v;
    }
    if let Some(v) = flags.infer_epochs {
        config.embed.infer_epochs = v;
    }
}

/// Writes the effective config into the output directory.
fn echo_config(dir: &Path, config: &RunConfig) -> Result<(), AppError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_ECHO_FILE), config.to_toml())?;
    Ok(())
}

/// Writes manifest.json listing the SHA-256 of every named artifact.
fn write_manifest(dir: &Path, files: &[&str]) -> Result<(), AppError> {
    let mut hashes = BTreeMap::new();
    for name in files {
        hashes.insert(name.to_string(), sha256_file(dir.join(name))?);
    }
    let manifest = serde_json::json!({ "files": hashes });
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(())
}

fn events_by_id(events: &[Event], ids: &[String]) -> Vec<Event> {
    let index: std::collections::HashMap<&str, &Event> =
        events.iter().map(|e| (e.event_id.as_str(), e)).collect();
    ids.iter().map(|id| index[id.as_str()].clone()).collect()
}

struct FitResult {
    text_model: DocEmbeddingModel,
    user_model: DocEmbeddingModel,
    outcome: TrainOutcome,
}

/// Trains both DBOW models on the training events and fits the detection
/// model, early-stopping on the validation events. `stage` namespaces the
/// forked seeds (e.g. per fold).
fn fit(
    train_events: &[Event],
    val_events: &[Event],
    all_events: &[Event],
    config: &RunConfig,
    stage: &str,
) -> Result<FitResult, AppError> {
    let post_docs: Vec<Document> = train_events
        .iter()
        .flat_map(|e| e.posts.iter())
        .map(|p| Document {
            key: p.post_id.clone(),
            tokens: tokenize(&p.text),
        })
        .collect();
    let text_model = train_dbow(
        &post_docs,
        &config.embed.text_config(),
        fork_seed(config.seed, &format!("{stage}/embed-text")),
    )?;

    let user_docs: Vec<Document> = build_user_documents(train_events)
        .into_iter()
        .map(Document::from)
        .collect();
    let user_model = train_dbow(
        &user_docs,
        &config.embed.user_config(),
        fork_seed(config.seed, &format!("{stage}/embed-user")),
    )?;

    let histories = build_user_documents(all_events);
    let embedder = EventEmbedder::new(
        &text_model,
        &user_model,
        fork_seed(config.seed, &format!("{stage}/infer")),
    )
    .with_user_histories(histories);

    let train_config = config.train.to_train_config(
        config.embed.d_v,
        fork_seed(config.seed, &format!("{stage}/train")),
    );
    let outcome = drrd_core::model::train(train_events, val_events, &embedder, &train_config)?;
    Ok(FitResult {
        text_model,
        user_model,
        outcome,
    })
}

fn classify(
    model: &DrrdModel,
    embedder: &EventEmbedder,
    events: &[Event],
) -> Result<Metrics, AppError> {
    let mut predictions = Vec::with_capacity(events.len());
    let mut labels = Vec::with_capacity(events.len());
    for event in events {
        match drrd_core::model::predict(event, model, embedder, None)? {
            Prediction::Classified { label, .. } => {
                predictions.push(label);
                labels.push(event.label);
            }
            Prediction::InsufficientEvidence => unreachable!("no deadline given"),
        }
    }
    Ok(compute_metrics(&predictions, &labels)?)
}

pub fn synth(args: SynthArgs) -> Result<(), AppError> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.events {
        config.synth.events = v;
    }
    if let Some(v) = args.balance {
        config.synth.balance = v;
    }
    if let Some(v) = args.horizon {
        config.synth.horizon_hours = v;
    }
    if let Some(s) = &args.rumour_profile {
        config.synth.rumour_intensity = parse_number_list(s)?;
    }
    if let Some(s) = &args.non_rumour_profile {
        config.synth.non_rumour_intensity = parse_number_list(s)?;
    }
    if let Some(v) = args.users {
        config.synth.users = v;
    }
    if let Some(v) = args.suspicious_fraction {
        config.synth.suspicious_fraction = v;
    }
    if let Some(v) = args.affinity {
        config.synth.rumour_affinity = v;
    }
    if let Some(v) = args.vocab_size {
        config.synth.vocab_size = v;
    }
    if let Some(v) = args.token_skew {
        config.synth.token_skew = v;
    }

    let synth_config = config
        .synth
        .to_synth_config(fork_seed(config.seed, "synth"));
    let events = drrd_core::synth::generate_corpus(&synth_config)?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(&args.out)?;
    write_corpus(&events, &mut file)?;
    file.flush()?;

    let summary = summarize(&events);
    println!(
        "wrote {} events ({} rumours, {} non-rumours), {} posts, {} users to {}",
        summary.events,
        summary.rumours,
        summary.non_rumours,
        summary.posts,
        summary.users,
        args.out.display()
    );
    print!("{}", config.to_toml());
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<(), AppError> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    apply_train_flags(&mut config, &args.flags);

    let events = read_corpus_file(&args.corpus)?;
    let ids: Vec<String> = events.iter().map(|e| e.event_id.clone()).collect();
    let labels: Vec<Label> = events.iter().map(|e| e.label).collect();
    let (holdout_ids, rest) = stratified_holdout(&ids, &labels, HOLDOUT_FRACTION, config.seed)?;
    let train_ids: Vec<String> = rest.into_iter().flatten().collect();
    let holdout_events = events_by_id(&events, &holdout_ids);
    let train_events = events_by_id(&events, &train_ids);

    let fitted = fit(&train_events, &holdout_events, &events, &config, "train")?;

    let dir = &args.out_dir;
    echo_config(dir, &config)?;
    fitted.text_model.save(dir.join(TEXT_EMBED_FILE))?;
    fitted.user_model.save(dir.join(USER_EMBED_FILE))?;

    let mut model = fitted.outcome.model;
    model.text_embed_hash = sha256_file(dir.join(TEXT_EMBED_FILE))?;
    model.user_embed_hash = sha256_file(dir.join(USER_EMBED_FILE))?;
    model.save(dir.join(MODEL_FILE))?;

    let mut log = String::from("epoch,train_loss,val_loss\n");
    for s in &fitted.outcome.log {
        let val = s.val_loss.map_or(String::new(), |v| v.to_string());
        log.push_str(&format!("{},{},{}\n", s.epoch, s.train_loss, val));
    }
    fs::write(dir.join(TRAIN_LOG_FILE), log)?;

    let split = serde_json::json!({
        "holdout": holdout_ids,
        "train": train_ids,
    });
    fs::write(
        dir.join(SPLIT_FILE),
        serde_json::to_string_pretty(&split).expect("split serializes") + "\n",
    )?;

    write_manifest(
        dir,
        &[
            TEXT_EMBED_FILE,
            USER_EMBED_FILE,
            MODEL_FILE,
            TRAIN_LOG_FILE,
            SPLIT_FILE,
            CONFIG_ECHO_FILE,
        ],
    )?;

    let last = fitted.outcome.log.last();
    println!(
        "trained on {} events ({} held out for fine-tuning), {} epochs{}, final train loss {}",
        train_events.len(),
        holdout_events.len(),
        fitted.outcome.log.len(),
        if fitted.outcome.stopped_early {
            " (early stop)"
        } else {
            ""
        },
        last.map_or(f64::NAN, |s| s.train_loss),
    );
    println!("checkpoints in {}", dir.display());
    Ok(())
}

/// Loads the three checkpoints and verifies the model was trained against
/// exactly these embedding files.
fn load_checkpoints(
    dir: &Path,
) -> Result<(DocEmbeddingModel, DocEmbeddingModel, DrrdModel), AppError> {
    let text_path = dir.join(TEXT_EMBED_FILE);
    let user_path = dir.join(USER_EMBED_FILE);
    let text_model = DocEmbeddingModel::load(&text_path)?;
    let user_model = DocEmbeddingModel::load(&user_path)?;
    let model = DrrdModel::load(dir.join(MODEL_FILE))?;

    let text_hash = sha256_file(&text_path)?;
    let user_hash = sha256_file(&user_path)?;
    if model.text_embed_hash != text_hash || model.user_embed_hash != user_hash {
        return Err(AppError::data(format!(
            "checkpoint mismatch in {}: the model was trained against different embedding files",
            dir.display()
        )));
    }
    Ok((text_model, user_model, model))
}

/// Rejects corpora that share no users, posts or events with the embedding
/// models' training universe.
fn check_universe(
    events: &[Event],
    text_model: &DocEmbeddingModel,
    user_model: &DocEmbeddingModel,
) -> Result<(), AppError> {
    let event_known = events
        .iter()
        .any(|e| user_model.vocab.index_of(&e.event_id).is_some());
    let user_known = events
        .iter()
        .flat_map(|e| e.posts.iter())
        .any(|p| user_model.contains_doc(&p.user_id));
    let post_known = events
        .iter()
        .flat_map(|e| e.posts.iter())
        .any(|p| text_model.contains_doc(&p.post_id));
    if !event_known && !user_known && !post_known {
        return Err(AppError::data(
            "checkpoint/corpus mismatch: the corpus shares no events, users or posts \
             with the user-embedding universe"
                .to_string(),
        ));
    }
    Ok(())
}

fn parse_deadlines(spec: &Option<String>) -> Result<Option<Vec<f64>>, AppError> {
    match spec {
        None => Ok(None),
        Some(s) => {
            let deadlines = parse_number_list(s)?;
            if deadlines.is_empty() || deadlines.iter().any(|&d| d <= 0.0) {
                return Err(AppError::usage("deadlines must be positive".to_string()));
            }
            Ok(Some(deadlines))
        }
    }
}

pub fn eval(args: EvalArgs) -> Result<(), AppError> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    apply_train_flags(&mut config, &args.flags);
    if let Some(s) = &args.deadlines {
        config.eval.deadlines = parse_number_list(s)?;
    }
    let deadlines = parse_deadlines(&args.deadlines)?;

    let events = read_corpus_file(&args.corpus)?;
    let dir = &args.out_dir;
    echo_config(dir, &config)?;

    let mut artifacts: Vec<&str> = vec![METRICS_FILE, CONFIG_ECHO_FILE];
    match &args.checkpoint_dir {
        Some(checkpoint_dir) => {
            let (text_model, user_model, model) = load_checkpoints(checkpoint_dir)?;
            check_universe(&events, &text_model, &user_model)?;
            let histories = build_user_documents(&events);
            let embedder = EventEmbedder::new(
                &text_model,
                &user_model,
                fork_seed(config.seed, "eval/infer"),
            )
            .with_user_histories(histories);

            let metrics = classify(&model, &embedder, &events)?;
            let rows = metrics_rows("checkpoint", "-", &metrics);
            let mut buf = Vec::new();
            write_metrics_csv(&rows, &mut buf)?;
            fs::write(dir.join(METRICS_FILE), buf)?;
            println!("checkpoint accuracy {:.4} over {} events", metrics.accuracy, metrics.total);

            if let Some(deadlines) = &deadlines {
                let points = early_detection_curve(&model, &embedder, &events, deadlines)?;
                let mut buf = Vec::new();
                write_curve_csv(&points, &mut buf)?;
                fs::write(dir.join(CURVE_FILE), buf)?;
                artifacts.push(CURVE_FILE);
            }
        }
        None => {
            let ids: Vec<String> = events.iter().map(|e| e.event_id.clone()).collect();
            let labels: Vec<Label> = events.iter().map(|e| e.label).collect();
            let split = split_folds(&ids, &labels, config.seed)?;
            let holdout_events = events_by_id(&events, &split.holdout);

            let mut rows: Vec<MetricsRow> = Vec::new();
            let mut fold_metrics: Vec<Metrics> = Vec::new();
            let mut combined_curve: Vec<(f64, usize, usize, usize)> = deadlines
                .as_deref()
                .unwrap_or(&[])
                .iter()
                .map(|&d| (d, 0usize, 0usize, 0usize))
                .collect();

            for (fold_idx, fold) in split.folds.iter().enumerate() {
                let train_events = events_by_id(&events, &fold.train);
                let test_events = events_by_id(&events, &fold.test);
                let stage = format!("fold{fold_idx}");
                let fitted = fit(&train_events, &holdout_events, &events, &config, &stage)?;
                let histories = build_user_documents(&events);
                let embedder = EventEmbedder::new(
                    &fitted.text_model,
                    &fitted.user_model,
                    fork_seed(config.seed, &format!("{stage}/infer")),
                )
                .with_user_histories(histories);

                let metrics = classify(&fitted.outcome.model, &embedder, &test_events)?;
                println!(
                    "fold {fold_idx}: accuracy {:.4} over {} test events ({} epochs{})",
                    metrics.accuracy,
                    metrics.total,
                    fitted.outcome.log.len(),
                    if fitted.outcome.stopped_early {
                        ", early stop"
                    } else {
                        ""
                    }
                );
                rows.extend(metrics_rows("extended", &fold_idx.to_string(), &metrics));
                fold_metrics.push(metrics);

                if let Some(deadlines) = &deadlines {
                    let points = early_detection_curve(
                        &fitted.outcome.model,
                        &embedder,
                        &test_events,
                        deadlines,
                    )?;
                    for (slot, point) in combined_curve.iter_mut().zip(&points) {
                        let correct =
                            (point.accuracy * test_events.len() as f64).round() as usize;
                        slot.1 += correct;
                        slot.2 += test_events.len();
                        slot.3 += point.n_no_evidence;
                    }
                }
            }

            // mean over folds, per class
            let n = fold_metrics.len() as f64;
            for class in [Label::Rumour, Label::NonRumour] {
                let pick = |m: &Metrics| match class {
                    Label::Rumour => m.rumour,
                    Label::NonRumour => m.non_rumour,
                };
                rows.push(MetricsRow {
                    setting: "extended".into(),
                    fold: "mean".into(),
                    class,
                    accuracy: fold_metrics.iter().map(|m| m.accuracy).sum::<f64>() / n,
                    precision: fold_metrics.iter().map(|m| pick(m).precision).sum::<f64>() / n,
                    recall: fold_metrics.iter().map(|m| pick(m).recall).sum::<f64>() / n,
                    f1: fold_metrics.iter().map(|m| pick(m).f1).sum::<f64>() / n,
                });
            }

            let mut buf = Vec::new();
            write_metrics_csv(&rows, &mut buf)?;
            fs::write(dir.join(METRICS_FILE), buf)?;
            let mean_accuracy =
                fold_metrics.iter().map(|m| m.accuracy).sum::<f64>() / fold_metrics.len() as f64;
            println!("mean accuracy over {} folds: {:.4}", fold_metrics.len(), mean_accuracy);

            if deadlines.is_some() {
                let points: Vec<DeadlinePoint> = combined_curve
                    .iter()
                    .map(|&(d, correct, total, no_evidence)| DeadlinePoint {
                        deadline_hours: d,
                        accuracy: correct as f64 / total as f64,
                        n_no_evidence: no_evidence,
                    })
                    .collect();
                let mut buf = Vec::new();
                write_curve_csv(&points, &mut buf)?;
                fs::write(dir.join(CURVE_FILE), buf)?;
                artifacts.push(CURVE_FILE);
            }
        }
    }

    write_manifest(dir, &artifacts)?;
    println!("reports in {}", dir.display());
    Ok(())
}

pub fn predict(args: PredictArgs) -> Result<(), AppError> {
    if let Some(d) = args.deadline {
        if d <= 0.0 {
            return Err(AppError::usage(format!(
                "deadline must be positive, got {d}"
            )));
        }
    }
    let (text_model, user_model, model) = load_checkpoints(&args.checkpoint_dir)?;
    let events = read_corpus_file(&args.corpus)?;
    check_universe(&events, &text_model, &user_model)?;

    let histories = build_user_documents(&events);
    let embedder = EventEmbedder::new(&text_model, &user_model, fork_seed(model.config.seed, "predict/infer"))
        .with_user_histories(histories);

    if let Some(dump_dir) = &args.dump_features {
        fs::create_dir_all(dump_dir)?;
        for event in &events {
            let restricted = match args.deadline {
                Some(t) => match drrd_core::corpus::filter_by_deadline(event, t) {
                    Ok(e) => e,
                    Err(drrd_core::corpus::CorpusError::NoEngagementsBeforeDeadline {
                        ..
                    }) => continue,
                    Err(other) => return Err(other.into()),
                },
                None => event.clone(),
            };
            let (text, user) = embedder.event_features(&restricted, model.config.max_hours)?;
            for (branch, features) in [("text", &text), ("user", &user)] {
                let mut csv = String::new();
                for k in 0..features.n() {
                    let row: Vec<String> =
                        features.x.row(k).iter().map(|v| v.to_string()).collect();
                    csv.push_str(&row.join(","));
                    csv.push('\n');
                }
                fs::write(
                    dump_dir.join(format!("{}.{branch}.csv", event.event_id)),
                    csv,
                )?;
            }
        }
    }

    let mut lines = String::new();
    for event in &events {
        match drrd_core::model::predict(event, &model, &embedder, args.deadline)? {
            Prediction::Classified { label, p_rumour } => {
                lines.push_str(&format!(
                    "{},{:.9},{:.9},{}\n",
                    event.event_id,
                    p_rumour,
                    1.0 - p_rumour,
                    label.as_str()
                ));
            }
            Prediction::InsufficientEvidence => {
                lines.push_str(&format!("{},,,insufficient_evidence\n", event.event_id));
            }
        }
    }

    match &args.out {
        Some(path) => fs::write(path, lines)?,
        None => print!("{lines}"),
    }
    Ok(())
}
