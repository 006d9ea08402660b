//! The dual-branch rumour detection model: a text branch and a user branch,
//! each hour-partitioned features -> two-layer GRU -> max-pooling-over-time,
//! whose pooled outputs are concatenated and fed through a tanh dense layer
//! into a two-class softmax. Trained with cross-entropy and Adam, one event
//! at a time with gradient accumulation over mini-batches.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{filter_by_deadline, partition_event, CorpusError, Event, Label, Post};
use crate::embed::{
    infer_vector, read_str, read_u32, read_u64, tokenize, write_str, write_u32, write_u64,
    DocEmbeddingModel, EmbedError, UserDocument,
};
use crate::features::{build_sequence, FeatureError, SequenceFeatures};
use crate::nn::{
    cross_entropy, dense_forward, gru_stack_backward, gru_stack_forward, layers::dense_backward,
    max_pool_backward, max_pool_with_argmax, softmax, AdamConfig, AdamState, DenseParams,
    DropoutMask, GruLayerParams, Mat, Mode, NnError,
};
use crate::util::fork_seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("branch sequence lengths differ: text {text_n} vs user {user_n}")]
    BranchLengthMismatch { text_n: usize, user_n: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch} on event '{event_id}'")]
    NonFiniteLoss { epoch: usize, event_id: String },
    #[error("embedding dimension {embed} does not match configured d_v {expected}")]
    EmbeddingDimMismatch { embed: usize, expected: usize },
    #[error("bad model checkpoint: {reason}")]
    BadCheckpoint { reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters; also the config snapshot stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Events per gradient-accumulation step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub d_v: usize,
    pub d_f: usize,
    /// Width of the tanh dense layer between the concatenated pooled
    /// outputs and the softmax.
    pub dense_hidden: usize,
    pub max_hours: usize,
    /// Early-stopping patience on the validation loss; 0 disables stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            dropout: 0.6,
            d_v: 100,
            d_f: 128,
            dense_hidden: 128,
            max_hours: crate::corpus::DEFAULT_MAX_HOURS,
            patience: 5,
            seed: 7,
        }
    }
}

/// Full parameter set of both GRU branches and the dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct DrrdModel {
    pub config: TrainConfig,
    pub text_layers: [GruLayerParams; 2],
    pub user_layers: [GruLayerParams; 2],
    pub head_hidden: DenseParams,
    pub head_out: DenseParams,
    /// SHA-256 of the embedding checkpoints this model was trained against;
    /// empty when the model was built in memory.
    pub text_embed_hash: String,
    pub user_embed_hash: String,
}

impl DrrdModel {
    pub fn zeros(config: &TrainConfig) -> Self {
        DrrdModel {
            config: config.clone(),
            text_layers: [
                GruLayerParams::zeros(config.d_v, config.d_f),
                GruLayerParams::zeros(config.d_f, config.d_f),
            ],
            user_layers: [
                GruLayerParams::zeros(config.d_v, config.d_f),
                GruLayerParams::zeros(config.d_f, config.d_f),
            ],
            head_hidden: DenseParams::zeros(2 * config.d_f, config.dense_hidden),
            head_out: DenseParams::zeros(config.dense_hidden, 2),
            text_embed_hash: String::new(),
            user_embed_hash: String::new(),
        }
    }

    pub fn init(config: &TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DrrdModel {
            config: config.clone(),
            text_layers: [
                GruLayerParams::init(config.d_v, config.d_f, &mut rng),
                GruLayerParams::init(config.d_f, config.d_f, &mut rng),
            ],
            user_layers: [
                GruLayerParams::init(config.d_v, config.d_f, &mut rng),
                GruLayerParams::init(config.d_f, config.d_f, &mut rng),
            ],
            head_hidden: DenseParams::init(2 * config.d_f, config.dense_hidden, &mut rng),
            head_out: DenseParams::init(config.dense_hidden, 2, &mut rng),
            text_embed_hash: String::new(),
            user_embed_hash: String::new(),
        }
    }

    pub fn value_count(&self) -> usize {
        self.text_layers.iter().map(GruLayerParams::value_count).sum::<usize>()
            + self.user_layers.iter().map(GruLayerParams::value_count).sum::<usize>()
            + self.head_hidden.value_count()
            + self.head_out.value_count()
    }

    /// Flattens all parameters in canonical order: text layers, user layers,
    /// hidden head, output head.
    pub fn append_values(&self, out: &mut Vec<f64>) {
        for layer in &self.text_layers {
            layer.append_values(out);
        }
        for layer in &self.user_layers {
            layer.append_values(out);
        }
        self.head_hidden.append_values(out);
        self.head_out.append_values(out);
    }

    pub fn load_values(&mut self, mut src: &[f64]) {
        for layer in &mut self.text_layers {
            layer.load_values(&mut src);
        }
        for layer in &mut self.user_layers {
            layer.load_values(&mut src);
        }
        self.head_hidden.load_values(&mut src);
        self.head_out.load_values(&mut src);
        debug_assert!(src.is_empty(), "flat parameter vector has trailing values");
    }

    pub fn is_finite(&self) -> bool {
        self.text_layers.iter().all(GruLayerParams::is_finite)
            && self.user_layers.iter().all(GruLayerParams::is_finite)
            && self.head_hidden.is_finite()
            && self.head_out.is_finite()
    }
}

/// Gradients shaped like the model parameters.
pub type DrrdGrads = DrrdModel;

/// Dropout masks for one training-mode forward pass: one over the
/// concatenated pooled vector, one over the dense hidden activation.
pub struct HeadMasks {
    pub concat: DropoutMask,
    pub hidden: DropoutMask,
}

impl HeadMasks {
    pub fn identity(model: &DrrdModel) -> Self {
        HeadMasks {
            concat: DropoutMask::identity(2 * model.config.d_f),
            hidden: DropoutMask::identity(model.config.dense_hidden),
        }
    }

    pub fn sample(model: &DrrdModel, rng: &mut impl Rng) -> Result<Self, NnError> {
        let rate = model.config.dropout;
        Ok(HeadMasks {
            concat: DropoutMask::sample(2 * model.config.d_f, rate, rng)?,
            hidden: DropoutMask::sample(model.config.dense_hidden, rate, rng)?,
        })
    }
}

struct ForwardTrace {
    text_trace: crate::nn::GruStackTrace,
    user_trace: crate::nn::GruStackTrace,
    text_argmax: Vec<usize>,
    user_argmax: Vec<usize>,
    concat_dropped: Vec<f64>,
    hidden_act: Vec<f64>,
    hidden_dropped: Vec<f64>,
    prob: Vec<f64>,
}

fn forward_traced(
    model: &DrrdModel,
    text_x: &Mat,
    user_x: &Mat,
    masks: &HeadMasks,
) -> Result<ForwardTrace, ModelError> {
    if text_x.rows() != user_x.rows() {
        return Err(ModelError::BranchLengthMismatch {
            text_n: text_x.rows(),
            user_n: user_x.rows(),
        });
    }
    let text_trace = gru_stack_forward(&model.text_layers, text_x)?;
    let user_trace = gru_stack_forward(&model.user_layers, user_x)?;
    let (text_pooled, text_argmax) = max_pool_with_argmax(text_trace.top_states())?;
    let (user_pooled, user_argmax) = max_pool_with_argmax(user_trace.top_states())?;

    let mut concat = text_pooled;
    concat.extend_from_slice(&user_pooled);
    let concat_dropped = masks.concat.apply(&concat);

    let mut hidden_act = dense_forward(&model.head_hidden, &concat_dropped)?;
    for v in &mut hidden_act {
        *v = v.tanh();
    }
    let hidden_dropped = masks.hidden.apply(&hidden_act);
    let logits = dense_forward(&model.head_out, &hidden_dropped)?;
    let prob = softmax(&logits);

    Ok(ForwardTrace {
        text_trace,
        user_trace,
        text_argmax,
        user_argmax,
        concat_dropped,
        hidden_act,
        hidden_dropped,
        prob,
    })
}

/// Forward pass over the two feature sequences; returns
/// [P(non-rumour), P(rumour)]. Train mode samples fresh dropout masks from
/// the rng; eval mode never touches it.
pub fn forward(
    text: &SequenceFeatures,
    user: &SequenceFeatures,
    model: &DrrdModel,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<[f64; 2], ModelError> {
    let masks = match mode {
        Mode::Train => HeadMasks::sample(model, rng)?,
        Mode::Eval => HeadMasks::identity(model),
    };
    let trace = forward_traced(model, &text.x, &user.x, &masks)?;
    Ok([trace.prob[0], trace.prob[1]])
}

/// Loss and full analytic gradients for one event (both branches, head and
/// the feature matrices). The masks are applied exactly as in the traced
/// forward pass, so eval-mode gradients use identity masks.
pub fn loss_and_grads(
    model: &DrrdModel,
    text_x: &Mat,
    user_x: &Mat,
    label: Label,
    masks: &HeadMasks,
) -> Result<(f64, DrrdGrads, Mat, Mat), ModelError> {
    let trace = forward_traced(model, text_x, user_x, masks)?;
    let loss = cross_entropy(&trace.prob, label.index());

    // softmax + cross-entropy combined: dlogits = p - onehot(label)
    let mut d_logits = trace.prob.clone();
    d_logits[label.index()] -= 1.0;

    let (g_head_out, d_hidden_dropped) =
        dense_backward(&model.head_out, &trace.hidden_dropped, &d_logits);
    let d_hidden_act = masks.hidden.apply(&d_hidden_dropped);
    let d_hidden_pre: Vec<f64> = d_hidden_act
        .iter()
        .zip(&trace.hidden_act)
        .map(|(&d, &a)| d * (1.0 - a * a))
        .collect();
    let (g_head_hidden, d_concat_dropped) =
        dense_backward(&model.head_hidden, &trace.concat_dropped, &d_hidden_pre);
    let d_concat = masks.concat.apply(&d_concat_dropped);

    let d_f = model.config.d_f;
    let n = text_x.rows();
    let d_text_states = max_pool_backward(&trace.text_argmax, &d_concat[..d_f], n);
    let d_user_states = max_pool_backward(&trace.user_argmax, &d_concat[d_f..], n);

    let (text_grads, d_text_x) =
        gru_stack_backward(&model.text_layers, text_x, &trace.text_trace, &d_text_states);
    let (user_grads, d_user_x) =
        gru_stack_backward(&model.user_layers, user_x, &trace.user_trace, &d_user_states);

    let grads = DrrdModel {
        config: model.config.clone(),
        text_layers: text_grads,
        user_layers: user_grads,
        head_hidden: g_head_hidden,
        head_out: g_head_out,
        text_embed_hash: String::new(),
        user_embed_hash: String::new(),
    };
    Ok((loss, grads, d_text_x, d_user_x))
}

/// Joins the trained embedding models with the inference fallbacks used for
/// posts and users outside the training corpus.
pub struct EventEmbedder<'a> {
    pub text_model: &'a DocEmbeddingModel,
    pub user_model: &'a DocEmbeddingModel,
    /// Engagement histories observable at prediction time, for users absent
    /// from the trained user model.
    user_histories: HashMap<String, Vec<String>>,
    infer_seed: u64,
    user_branch_ablated: bool,
}

impl<'a> EventEmbedder<'a> {
    pub fn new(
        text_model: &'a DocEmbeddingModel,
        user_model: &'a DocEmbeddingModel,
        infer_seed: u64,
    ) -> Self {
        EventEmbedder {
            text_model,
            user_model,
            user_histories: HashMap::new(),
            infer_seed,
            user_branch_ablated: false,
        }
    }

    /// Registers engagement documents (typically built over the prediction
    /// corpus) consulted for users the trained model does not know.
    pub fn with_user_histories(mut self, docs: Vec<UserDocument>) -> Self {
        for doc in docs {
            self.user_histories.insert(doc.user_id, doc.tokens);
        }
        self
    }

    /// Ablation switch: every user embedding becomes the all-ones padding
    /// vector, so the user branch carries no user information. Used to
    /// measure the user branch's contribution against the text branch alone.
    pub fn with_user_branch_ablated(mut self) -> Self {
        self.user_branch_ablated = true;
        self
    }

    /// Embedding for a post: the trained document vector when the post was a
    /// training document, otherwise inferred from its tokens.
    pub fn post_vector(&self, post: &Post) -> Vec<f64> {
        if let Some(v) = self.text_model.doc_vector(&post.post_id) {
            return v.to_vec();
        }
        let tokens = tokenize(&post.text);
        infer_vector(
            self.text_model,
            &tokens,
            self.text_model.config.infer_epochs,
            fork_seed(self.infer_seed, &post.post_id),
        )
        .vector
    }

    /// Embedding for a user: the trained vector when known, otherwise
    /// inferred from the user's observable engagement history. Users with no
    /// in-vocabulary history fall back to the all-ones vector.
    pub fn user_vector(&self, user_id: &str) -> Vec<f64> {
        if self.user_branch_ablated {
            return vec![1.0; self.user_model.d_v()];
        }
        if let Some(v) = self.user_model.doc_vector(user_id) {
            return v.to_vec();
        }
        let empty = Vec::new();
        let tokens = self.user_histories.get(user_id).unwrap_or(&empty);
        infer_vector(
            self.user_model,
            tokens,
            self.user_model.config.infer_epochs,
            fork_seed(self.infer_seed, user_id),
        )
        .vector
    }

    /// Builds both branch feature matrices for an event. The text branch
    /// averages post embeddings per partition; the user branch averages the
    /// distinct users' embeddings per partition, so its m_k is the distinct
    /// user count.
    pub fn event_features(
        &self,
        event: &Event,
        max_hours: usize,
    ) -> Result<(SequenceFeatures, SequenceFeatures), ModelError> {
        let d_v = self.text_model.d_v();
        if self.user_model.d_v() != d_v {
            return Err(ModelError::EmbeddingDimMismatch {
                embed: self.user_model.d_v(),
                expected: d_v,
            });
        }
        let partitioned = partition_event(event, max_hours);

        let mut text_groups = Vec::with_capacity(partitioned.n_hours());
        let mut user_groups = Vec::with_capacity(partitioned.n_hours());
        for partition in &partitioned.partitions {
            let post_vectors: Vec<Vec<f64>> = partition
                .posts
                .iter()
                .map(|p| self.post_vector(p))
                .collect();

            let mut seen = std::collections::HashSet::new();
            let mut user_vectors = Vec::new();
            for post in &partition.posts {
                if seen.insert(post.user_id.as_str()) {
                    user_vectors.push(self.user_vector(&post.user_id));
                }
            }
            text_groups.push(post_vectors);
            user_groups.push(user_vectors);
        }

        let text = build_sequence(&text_groups, d_v)?;
        let user = build_sequence(&user_groups, d_v)?;
        Ok((text, user))
    }
}

/// Outcome of classifying one event.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Classified { label: Label, p_rumour: f64 },
    /// The event had no engagement before the requested deadline.
    InsufficientEvidence,
}

/// Classifies an event, optionally restricted to engagements before a
/// deadline (hours from the event's first post). Eval mode throughout:
/// deterministic and rng-free.
pub fn predict(
    event: &Event,
    model: &DrrdModel,
    embedder: &EventEmbedder,
    deadline_hours: Option<f64>,
) -> Result<Prediction, ModelError> {
    let restricted;
    let event = match deadline_hours {
        Some(t) => match filter_by_deadline(event, t) {
            Ok(e) => {
                restricted = e;
                &restricted
            }
            Err(CorpusError::NoEngagementsBeforeDeadline { .. }) => {
                return Ok(Prediction::InsufficientEvidence)
            }
            Err(other) => return Err(other.into()),
        },
        None => event,
    };

    let (text, user) = embedder.event_features(event, model.config.max_hours)?;
    let masks = HeadMasks::identity(model);
    let trace = forward_traced(model, &text.x, &user.x, &masks)?;
    let p_rumour = trace.prob[Label::Rumour.index()];
    let label = if p_rumour >= 0.5 {
        Label::Rumour
    } else {
        Label::NonRumour
    };
    Ok(Prediction::Classified { label, p_rumour })
}

/// Per-epoch losses recorded during training. Losses are evaluated in eval
/// mode (no dropout) over the respective sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub model: DrrdModel,
    pub log: Vec<EpochStats>,
    pub stopped_early: bool,
}

fn mean_eval_loss(
    model: &DrrdModel,
    features: &[(SequenceFeatures, SequenceFeatures)],
    labels: &[Label],
) -> Result<f64, ModelError> {
    let masks = HeadMasks::identity(model);
    let mut sum = 0.0;
    for ((text, user), &label) in features.iter().zip(labels) {
        let trace = forward_traced(model, &text.x, &user.x, &masks)?;
        sum += cross_entropy(&trace.prob, label.index());
    }
    Ok(sum / features.len().max(1) as f64)
}

/// Trains the model on the given events, early-stopping on the validation
/// set when one is provided (the best-validation parameters are restored).
/// Deterministic for a fixed (events, config) pair: all randomness forks
/// from `config.seed`.
pub fn train(
    train_events: &[Event],
    val_events: &[Event],
    embedder: &EventEmbedder,
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if train_events.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    if embedder.text_model.d_v() != config.d_v {
        return Err(ModelError::EmbeddingDimMismatch {
            embed: embedder.text_model.d_v(),
            expected: config.d_v,
        });
    }

    let features: Vec<(SequenceFeatures, SequenceFeatures)> = train_events
        .iter()
        .map(|e| embedder.event_features(e, config.max_hours))
        .collect::<Result<_, _>>()?;
    let labels: Vec<Label> = train_events.iter().map(|e| e.label).collect();
    let val_features: Vec<(SequenceFeatures, SequenceFeatures)> = val_events
        .iter()
        .map(|e| embedder.event_features(e, config.max_hours))
        .collect::<Result<_, _>>()?;
    let val_labels: Vec<Label> = val_events.iter().map(|e| e.label).collect();

    let mut model = DrrdModel::init(config, fork_seed(config.seed, "model-init"));
    let mut adam = AdamState::new(
        model.value_count(),
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(fork_seed(config.seed, "batch-order"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(fork_seed(config.seed, "dropout"));

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, DrrdModel)> = None;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;
    let mut flat_params = Vec::with_capacity(model.value_count());
    let mut flat_grads = Vec::with_capacity(model.value_count());

    let mut order: Vec<usize> = (0..train_events.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            let mut batch_grads = DrrdModel::zeros(config);
            for &i in batch {
                let masks = HeadMasks::sample(&model, &mut dropout_rng)?;
                let (text, user) = &features[i];
                let (loss, grads, _, _) =
                    loss_and_grads(&model, &text.x, &user.x, labels[i], &masks)?;
                if !loss.is_finite() {
                    return Err(ModelError::NonFiniteLoss {
                        epoch,
                        event_id: train_events[i].event_id.clone(),
                    });
                }
                accumulate(&mut batch_grads, &grads);
            }
            scale(&mut batch_grads, 1.0 / batch.len() as f64);

            flat_params.clear();
            model.append_values(&mut flat_params);
            flat_grads.clear();
            batch_grads.append_values(&mut flat_grads);
            adam.step(&mut flat_params, &flat_grads)?;
            model.load_values(&flat_params);
        }

        let train_loss = mean_eval_loss(&model, &features, &labels)?;
        let val_loss = if val_features.is_empty() {
            None
        } else {
            Some(mean_eval_loss(&model, &val_features, &val_labels)?)
        };
        log.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });

        if let (Some(v), true) = (val_loss, config.patience > 0) {
            match &best {
                Some((best_v, _)) if v >= *best_v => {
                    bad_epochs += 1;
                    if bad_epochs >= config.patience {
                        stopped_early = true;
                        break;
                    }
                }
                _ => {
                    best = Some((v, model.clone()));
                    bad_epochs = 0;
                }
            }
        }
    }

    if let Some((_, best_model)) = best {
        model = best_model;
    }
    debug_assert!(model.is_finite());
    Ok(TrainOutcome {
        model,
        log,
        stopped_early,
    })
}

fn accumulate(into: &mut DrrdGrads, from: &DrrdGrads) {
    for (a, b) in into.text_layers.iter_mut().zip(&from.text_layers) {
        a.zip_apply(b, |x, y| *x += y);
    }
    for (a, b) in into.user_layers.iter_mut().zip(&from.user_layers) {
        a.zip_apply(b, |x, y| *x += y);
    }
    into.head_hidden.zip_apply(&from.head_hidden, |x, y| *x += y);
    into.head_out.zip_apply(&from.head_out, |x, y| *x += y);
}

fn scale(grads: &mut DrrdGrads, factor: f64) {
    for layer in grads.text_layers.iter_mut().chain(&mut grads.user_layers) {
        layer.for_each_value_mut(|v| *v *= factor);
    }
    grads.head_hidden.for_each_value_mut(|v| *v *= factor);
    grads.head_out.for_each_value_mut(|v| *v *= factor);
}

const MODEL_MAGIC: &[u8; 8] = b"DRRDMDL\0";
const MODEL_VERSION: u32 = 1;

impl DrrdModel {
    /// Serializes the checkpoint: magic, version, config snapshot (JSON),
    /// embedding binding hashes, then all parameters as little-endian f64 in
    /// canonical order. Save/load round-trips are bit-exact.
    pub fn write(&self, mut w: impl Write) -> Result<(), ModelError> {
        let w = &mut w;
        w.write_all(MODEL_MAGIC)?;
        write_u32(w, MODEL_VERSION)?;
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| ModelError::BadCheckpoint {
                reason: format!("config serialization failed: {e}"),
            })?;
        write_str(w, &config_json)?;
        write_str(w, &self.text_embed_hash)?;
        write_str(w, &self.user_embed_hash)?;
        let mut flat = Vec::with_capacity(self.value_count());
        self.append_values(&mut flat);
        write_u64(w, flat.len() as u64)?;
        for v in flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut file = BufWriter::new(File::create(path)?);
        self.write(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self, ModelError> {
        let r = &mut r;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(ModelError::BadCheckpoint {
                reason: "wrong magic bytes".into(),
            });
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(ModelError::BadCheckpoint {
                reason: format!("unsupported version {version}"),
            });
        }
        let config: TrainConfig =
            serde_json::from_str(&read_str(r)?).map_err(|e| ModelError::BadCheckpoint {
                reason: format!("bad config snapshot: {e}"),
            })?;
        let text_embed_hash = read_str(r)?;
        let user_embed_hash = read_str(r)?;
        let mut model = DrrdModel::zeros(&config);
        model.text_embed_hash = text_embed_hash;
        model.user_embed_hash = user_embed_hash;
        let count = read_u64(r)? as usize;
        if count != model.value_count() {
            return Err(ModelError::BadCheckpoint {
                reason: format!(
                    "parameter count {count} does not match config ({})",
                    model.value_count()
                ),
            });
        }
        let mut flat = vec![0.0f64; count];
        for v in &mut flat {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        model.load_values(&flat);
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{train_dbow, DbowConfig, Document};
    use crate::synth::{generate_corpus, SynthConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 4,
            dropout: 0.3,
            d_v: 8,
            d_f: 6,
            dense_hidden: 5,
            max_hours: 24,
            patience: 0,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn random_features(n: usize, d_v: usize, seed: u64) -> SequenceFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SequenceFeatures {
            x: Mat::from_fn(n, d_v, |_, _| rng.random_range(-1.0..1.0)),
            counts: vec![1; n],
        }
    }

    #[test]
    fn forward_outputs_a_distribution() {
        let config = tiny_config();
        let model = DrrdModel::init(&config, 1);
        let text = random_features(4, config.d_v, 10);
        let user = random_features(4, config.d_v, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = forward(&text, &user, &model, Mode::Eval, &mut rng).unwrap();
        assert!(p[0] > 0.0 && p[0] < 1.0);
        assert!(p[1] > 0.0 && p[1] < 1.0);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_model_is_maximally_uncertain() {
        let config = tiny_config();
        let model = DrrdModel::zeros(&config);
        let text = random_features(3, config.d_v, 1);
        let user = random_features(3, config.d_v, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = forward(&text, &user, &model, Mode::Eval, &mut rng).unwrap();
        assert_eq!(p, [0.5, 0.5]);
    }

    #[test]
    fn mismatched_branch_lengths_are_rejected() {
        let config = tiny_config();
        let model = DrrdModel::init(&config, 1);
        let text = random_features(4, config.d_v, 10);
        let user = random_features(3, config.d_v, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            forward(&text, &user, &model, Mode::Eval, &mut rng),
            Err(ModelError::BranchLengthMismatch { text_n: 4, user_n: 3 })
        ));
    }

    #[test]
    fn swapping_branch_inputs_changes_the_output() {
        let config = tiny_config();
        let model = DrrdModel::init(&config, 5);
        let a = random_features(4, config.d_v, 20);
        let b = random_features(4, config.d_v, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p_ab = forward(&a, &b, &model, Mode::Eval, &mut rng).unwrap();
        let p_ba = forward(&b, &a, &model, Mode::Eval, &mut rng).unwrap();
        assert!((p_ab[0] - p_ba[0]).abs() > 1e-9, "branches look symmetric");
    }

    #[test]
    fn eval_forward_ignores_the_rng() {
        let config = tiny_config();
        let model = DrrdModel::init(&config, 5);
        let text = random_features(4, config.d_v, 20);
        let user = random_features(4, config.d_v, 21);
        let mut rng_a = ChaCha8Rng::seed_from_u64(0);
        let mut rng_b = ChaCha8Rng::seed_from_u64(999);
        let pa = forward(&text, &user, &model, Mode::Eval, &mut rng_a).unwrap();
        let pb = forward(&text, &user, &model, Mode::Eval, &mut rng_b).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let config = tiny_config();
        let model = DrrdModel::init(&config, 12);
        let text = random_features(5, config.d_v, 30);
        let user = random_features(5, config.d_v, 31);
        let masks = HeadMasks::identity(&model);
        let label = Label::Rumour;

        let (_, grads, _, _) = loss_and_grads(&model, &text.x, &user.x, label, &masks).unwrap();
        let mut flat = Vec::new();
        model.append_values(&mut flat);
        let mut grad_flat = Vec::new();
        grads.append_values(&mut grad_flat);

        let mut scratch = model.clone();
        let err = crate::nn::finite_difference_check(
            |p| {
                scratch.load_values(p);
                let trace = forward_traced(&scratch, &text.x, &user.x, &masks).unwrap();
                cross_entropy(&trace.prob, label.index())
            },
            &flat,
            &grad_flat,
            1e-5,
            300,
            99,
        );
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradients_flow_to_the_inputs() {
        let config = tiny_config();
        let model = DrrdModel::init(&config, 12);
        let text = random_features(5, config.d_v, 30);
        let user = random_features(5, config.d_v, 31);
        let masks = HeadMasks::identity(&model);
        let (_, _, d_text, d_user) =
            loss_and_grads(&model, &text.x, &user.x, Label::NonRumour, &masks).unwrap();

        let eps = 1e-6;
        for &(k, c) in &[(0usize, 0usize), (2, 3), (4, 7)] {
            let mut xp = text.x.clone();
            xp[(k, c)] += eps;
            let mut xm = text.x.clone();
            xm[(k, c)] -= eps;
            let lp = {
                let t = forward_traced(&model, &xp, &user.x, &masks).unwrap();
                cross_entropy(&t.prob, 0)
            };
            let lm = {
                let t = forward_traced(&model, &xm, &user.x, &masks).unwrap();
                cross_entropy(&t.prob, 0)
            };
            let numeric = (lp - lm) / (2.0 * eps);
            assert!(
                (d_text[(k, c)] - numeric).abs() < 1e-5,
                "text input grad ({k},{c})"
            );
        }
        assert!(d_user.values().iter().any(|&v| v != 0.0));
    }

    fn build_embeds(
        events: &[Event],
        d_v: usize,
    ) -> (DocEmbeddingModel, DocEmbeddingModel) {
        let post_docs: Vec<Document> = events
            .iter()
            .flat_map(|e| e.posts.iter())
            .map(|p| Document {
                key: p.post_id.clone(),
                tokens: tokenize(&p.text),
            })
            .collect();
        let text_config = DbowConfig {
            d_v,
            epochs: 5,
            infer_epochs: 10,
            min_count: 1,
            ..DbowConfig::text_defaults()
        };
        let text_model = train_dbow(&post_docs, &text_config, 100).unwrap();

        let user_docs: Vec<Document> = crate::embed::build_user_documents(events)
            .into_iter()
            .map(Document::from)
            .collect();
        let user_config = DbowConfig {
            d_v,
            epochs: 5,
            infer_epochs: 10,
            ..DbowConfig::user_defaults()
        };
        let user_model = train_dbow(&user_docs, &user_config, 101).unwrap();
        (text_model, user_model)
    }

    #[test]
    fn overfits_two_events() {
        let synth = SynthConfig {
            n_events: 2,
            user_pool: 30,
            horizon_hours: 4,
            rumour_intensity: vec![4.0, 2.0, 1.0, 0.5],
            non_rumour_intensity: vec![2.0, 1.5, 1.0, 0.5],
            seed: 42,
            ..SynthConfig::default()
        };
        let events = generate_corpus(&synth).unwrap();
        assert_eq!(events.len(), 2);
        let (text_model, user_model) = build_embeds(&events, 8);
        let embedder = EventEmbedder::new(&text_model, &user_model, 0);

        let config = TrainConfig {
            epochs: 200,
            batch_size: 2,
            learning_rate: 5e-3,
            dropout: 0.0,
            d_v: 8,
            d_f: 6,
            dense_hidden: 5,
            max_hours: 8,
            patience: 0,
            seed: 1,
        };
        let outcome = train(&events, &[], &embedder, &config).unwrap();
        for event in &events {
            let pred = predict(event, &outcome.model, &embedder, None).unwrap();
            match pred {
                Prediction::Classified { label, p_rumour } => {
                    assert_eq!(label, event.label);
                    let p_correct = if event.label == Label::Rumour {
                        p_rumour
                    } else {
                        1.0 - p_rumour
                    };
                    assert!(p_correct > 0.95, "p_correct = {p_correct}");
                }
                other => panic!("unexpected prediction {other:?}"),
            }
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let synth = SynthConfig {
            n_events: 6,
            user_pool: 30,
            horizon_hours: 3,
            rumour_intensity: vec![3.0, 1.0, 0.5],
            non_rumour_intensity: vec![1.5, 1.0, 0.5],
            seed: 9,
            ..SynthConfig::default()
        };
        let events = generate_corpus(&synth).unwrap();
        let (text_model, user_model) = build_embeds(&events, 8);
        let embedder = EventEmbedder::new(&text_model, &user_model, 0);
        let config = TrainConfig {
            epochs: 3,
            d_v: 8,
            d_f: 6,
            dense_hidden: 5,
            max_hours: 6,
            seed: 4,
            ..tiny_config()
        };
        let a = train(&events, &[], &embedder, &config).unwrap();
        let b = train(&events, &[], &embedder, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn deadline_beyond_span_equals_no_deadline() {
        let synth = SynthConfig {
            n_events: 2,
            user_pool: 20,
            horizon_hours: 3,
            rumour_intensity: vec![3.0, 1.0, 0.5],
            non_rumour_intensity: vec![2.0, 1.0, 0.5],
            seed: 13,
            ..SynthConfig::default()
        };
        let events = generate_corpus(&synth).unwrap();
        let (text_model, user_model) = build_embeds(&events, 8);
        let embedder = EventEmbedder::new(&text_model, &user_model, 0);
        let config = TrainConfig {
            epochs: 2,
            d_v: 8,
            d_f: 6,
            dense_hidden: 5,
            max_hours: 6,
            ..tiny_config()
        };
        let outcome = train(&events, &[], &embedder, &config).unwrap();
        let a = predict(&events[0], &outcome.model, &embedder, None).unwrap();
        let b = predict(&events[0], &outcome.model, &embedder, Some(1e9)).unwrap();
        assert_eq!(a, b);
    }

    /// Two events identical up to a deadline yield identical predictions at
    /// that deadline, whatever happens later.
    #[test]
    fn deadline_prediction_ignores_later_evidence() {
        let synth = SynthConfig {
            n_events: 4,
            user_pool: 20,
            horizon_hours: 3,
            rumour_intensity: vec![3.0, 1.0, 0.5],
            non_rumour_intensity: vec![2.0, 1.0, 0.5],
            seed: 23,
            ..SynthConfig::default()
        };
        let events = generate_corpus(&synth).unwrap();
        let (text_model, user_model) = build_embeds(&events, 8);
        let embedder = EventEmbedder::new(&text_model, &user_model, 0);
        let config = TrainConfig {
            epochs: 2,
            d_v: 8,
            d_f: 6,
            dense_hidden: 5,
            max_hours: 6,
            ..tiny_config()
        };
        let outcome = train(&events, &[], &embedder, &config).unwrap();

        let base = &events[0];
        let mut extended = base.clone();
        let origin = extended.origin_s();
        extended.posts.push(Post {
            post_id: "late-post".into(),
            user_id: "late-user".into(),
            timestamp_s: origin + 10 * 3600,
            text: "entirely new evidence".into(),
        });

        let deadline = Some(2.0);
        let a = predict(base, &outcome.model, &embedder, deadline).unwrap();
        let b = predict(&extended, &outcome.model, &embedder, deadline).unwrap();
        assert_eq!(a, b);

        // without the deadline the late post does change the prediction input
        let full_a = predict(base, &outcome.model, &embedder, None).unwrap();
        let full_b = predict(&extended, &outcome.model, &embedder, None).unwrap();
        match (full_a, full_b) {
            (
                Prediction::Classified { p_rumour: pa, .. },
                Prediction::Classified { p_rumour: pb, .. },
            ) => assert_ne!(pa, pb),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unseen_users_fall_back_to_all_ones() {
        let synth = SynthConfig {
            n_events: 3,
            user_pool: 20,
            horizon_hours: 2,
            rumour_intensity: vec![3.0, 1.0],
            non_rumour_intensity: vec![2.0, 1.0],
            seed: 17,
            ..SynthConfig::default()
        };
        let events = generate_corpus(&synth).unwrap();
        let (text_model, user_model) = build_embeds(&events[..2], 8);
        let embedder = EventEmbedder::new(&text_model, &user_model, 0);
        let v = embedder.user_vector("never-seen-user");
        assert_eq!(v, vec![1.0; 8]);

        // an event full of unseen users still gets classified
        let config = TrainConfig {
            epochs: 2,
            d_v: 8,
            d_f: 6,
            dense_hidden: 5,
            max_hours: 4,
            ..tiny_config()
        };
        let outcome = train(&events[..2], &[], &embedder, &config).unwrap();
        let pred = predict(&events[2], &outcome.model, &embedder, None).unwrap();
        assert!(matches!(pred, Prediction::Classified { .. }));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let config = tiny_config();
        let mut model = DrrdModel::init(&config, 77);
        model.text_embed_hash = "abc123".into();
        model.user_embed_hash = "def456".into();

        let mut bytes = Vec::new();
        model.write(&mut bytes).unwrap();
        let loaded = DrrdModel::read(&bytes[..]).unwrap();
        assert_eq!(loaded, model);
        let mut bytes2 = Vec::new();
        loaded.write(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(matches!(
            DrrdModel::read(&b"JUNKJUNKJUNK"[..]),
            Err(ModelError::BadCheckpoint { .. })
        ));
    }
}
