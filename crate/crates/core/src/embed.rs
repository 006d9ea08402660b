//! DBOW paragraph-vector embeddings for post texts and for users'
//! event-interaction histories.
//!
//! Training follows the distributed bag-of-words scheme with negative
//! sampling: for each document d and each of its tokens w the loss
//! -log sigma(v_d . u_w) - sum_i log sigma(-v_d . u_ni) is minimized by SGD
//! over the document vector v_d and the output word vectors u. Inference for
//! an unseen document trains a fresh document vector with the word vectors
//! frozen. Everything is single-threaded and deterministic per seed.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Event;
use crate::nn::Mat;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("document corpus is empty")]
    EmptyCorpus,
    #[error("no token survived the min_count = {min_count} filter")]
    AllTokensFiltered { min_count: usize },
    #[error("non-finite training loss at epoch {epoch}; try a lower learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("bad embedding checkpoint: {reason}")]
    BadCheckpoint { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// DBOW hyperparameters. All fields are plain knobs; the two constructors
/// carry the defaults for the post-text and user-history corpora (user
/// documents are short, so min_count drops to 1 there).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbowConfig {
    pub d_v: usize,
    pub epochs: usize,
    pub infer_epochs: usize,
    pub negatives: usize,
    pub min_count: usize,
    pub noise_power: f64,
    pub lr_start: f64,
    pub lr_min: f64,
}

impl DbowConfig {
    pub fn text_defaults() -> Self {
        DbowConfig {
            d_v: 100,
            epochs: 20,
            infer_epochs: 50,
            negatives: 5,
            min_count: 2,
            noise_power: 0.75,
            lr_start: 0.025,
            lr_min: 0.0001,
        }
    }

    pub fn user_defaults() -> Self {
        DbowConfig {
            min_count: 1,
            ..DbowConfig::text_defaults()
        }
    }
}

/// Token table with frequency counts and the negative-sampling noise
/// distribution (unigram frequencies raised to `noise_power`, normalized).
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
    noise_probs: Vec<f64>,
    noise_cdf: Vec<f64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    pub fn noise_probs(&self) -> &[f64] {
        &self.noise_probs
    }

    fn sample_noise(&self, rng: &mut impl Rng) -> usize {
        let r: f64 = rng.random();
        self.noise_cdf.partition_point(|&c| c <= r).min(self.len() - 1)
    }

    fn from_counts(tokens: Vec<String>, counts: Vec<u64>, noise_power: f64) -> Self {
        let weights: Vec<f64> = counts
            .iter()
            .map(|&c| (c as f64).powf(noise_power))
            .collect();
        let total: f64 = weights.iter().sum();
        let noise_probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let noise_cdf: Vec<f64> = noise_probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            counts,
            noise_probs,
            noise_cdf,
        }
    }
}

/// Builds a vocabulary over the documents, dropping tokens with frequency
/// below `min_count`. Indices follow first-occurrence order.
pub fn build_vocab(
    documents: &[Vec<String>],
    min_count: usize,
    noise_power: f64,
) -> Result<Vocabulary, EmbedError> {
    if documents.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for doc in documents {
        for token in doc {
            *freq.entry(token).or_insert(0) += 1;
        }
    }

    let mut tokens = Vec::new();
    let mut counts = Vec::new();
    let mut seen: std::collections::HashSet<&str> = std::collections::HashSet::new();
    for doc in documents {
        for token in doc {
            if !seen.insert(token) {
                continue;
            }
            let count = freq[token.as_str()];
            if count as usize >= min_count {
                tokens.push(token.clone());
                counts.push(count);
            }
        }
    }
    if tokens.is_empty() {
        return Err(EmbedError::AllTokensFiltered { min_count });
    }
    Ok(Vocabulary::from_counts(tokens, counts, noise_power))
}

/// A keyed document: post texts are keyed by post_id, user histories by
/// user_id. The key is how trained vectors are looked up later.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub key: String,
    pub tokens: Vec<String>,
}

/// A user encoded as the sequence of event ids they engaged with, ordered
/// by their first engagement timestamp per event (one token per event).
#[derive(Clone, Debug, PartialEq)]
pub struct UserDocument {
    pub user_id: String,
    pub tokens: Vec<String>,
}

impl From<UserDocument> for Document {
    fn from(d: UserDocument) -> Document {
        Document {
            key: d.user_id,
            tokens: d.tokens,
        }
    }
}

/// Trained DBOW model: one vector per training document plus the shared
/// output word vectors, keyed for lookup.
#[derive(Clone, Debug)]
pub struct DocEmbeddingModel {
    pub config: DbowConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    doc_keys: Vec<String>,
    doc_index: HashMap<String, usize>,
    pub doc_vectors: Mat,
    pub word_output: Mat,
    /// Mean training loss per epoch; diagnostic only, not serialized.
    pub epoch_losses: Vec<f64>,
}

impl DocEmbeddingModel {
    pub fn d_v(&self) -> usize {
        self.config.d_v
    }

    pub fn num_docs(&self) -> usize {
        self.doc_keys.len()
    }

    pub fn doc_keys(&self) -> &[String] {
        &self.doc_keys
    }

    /// Trained vector for a training document, by key.
    pub fn doc_vector(&self, key: &str) -> Option<&[f64]> {
        self.doc_index.get(key).map(|&i| self.doc_vectors.row(i))
    }

    pub fn contains_doc(&self, key: &str) -> bool {
        self.doc_index.contains_key(key)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One negative-sampling SGD step for document vector `v` on target word
/// `target`. Returns the loss evaluated before the update. When `freeze_words`
/// is set only the document vector moves (the inference path).
#[allow(clippy::too_many_arguments)]
fn dbow_step(
    v: &mut [f64],
    word_output: &mut Mat,
    vocab: &Vocabulary,
    target: usize,
    negatives: usize,
    lr: f64,
    freeze_words: bool,
    rng: &mut impl Rng,
) -> f64 {
    let mut loss = 0.0;
    let mut v_grad = vec![0.0; v.len()];
    for i in 0..=negatives {
        let (word, label) = if i == 0 {
            (target, 1.0)
        } else {
            let n = vocab.sample_noise(rng);
            if n == target {
                continue;
            }
            (n, 0.0)
        };
        let u = word_output.row_mut(word);
        let f = dot(v, u);
        loss += if label > 0.5 {
            -sigmoid(f).max(f64::MIN_POSITIVE).ln()
        } else {
            -sigmoid(-f).max(f64::MIN_POSITIVE).ln()
        };
        let g = (label - sigmoid(f)) * lr;
        for (vg, &ui) in v_grad.iter_mut().zip(u.iter()) {
            *vg += g * ui;
        }
        if !freeze_words {
            for (ui, &vi) in u.iter_mut().zip(v.iter()) {
                *ui += g * vi;
            }
        }
    }
    for (vi, g) in v.iter_mut().zip(&v_grad) {
        *vi += g;
    }
    loss
}

/// Trains a DBOW model over the documents. Deterministic per seed.
pub fn train_dbow(
    documents: &[Document],
    config: &DbowConfig,
    seed: u64,
) -> Result<DocEmbeddingModel, EmbedError> {
    let token_lists: Vec<Vec<String>> = documents.iter().map(|d| d.tokens.clone()).collect();
    let vocab = build_vocab(&token_lists, config.min_count, config.noise_power)?;

    // Pre-resolve tokens to indices; documents with no in-vocabulary token
    // receive the all-ones vector at the end (the same convention as
    // out-of-vocabulary inference).
    let indexed: Vec<Vec<usize>> = documents
        .iter()
        .map(|d| {
            d.tokens
                .iter()
                .filter_map(|t| vocab.index_of(t))
                .collect()
        })
        .collect();

    let num_docs = documents.len();
    let d_v = config.d_v;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = 0.5 / d_v as f64;
    let mut doc_vectors = Mat::from_fn(num_docs, d_v, |_, _| rng.random_range(-span..span));
    let mut word_output = Mat::zeros(vocab.len(), d_v);

    let updates_per_epoch: usize = indexed.iter().map(Vec::len).sum();
    let total_updates = (config.epochs * updates_per_epoch).max(1);
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for (doc_id, tokens) in indexed.iter().enumerate() {
            for &target in tokens {
                let progress = step as f64 / total_updates as f64;
                let lr = config.lr_start - (config.lr_start - config.lr_min) * progress;
                loss_sum += dbow_step(
                    doc_vectors.row_mut(doc_id),
                    &mut word_output,
                    &vocab,
                    target,
                    config.negatives,
                    lr,
                    false,
                    &mut rng,
                );
                step += 1;
            }
        }
        let mean = if updates_per_epoch > 0 {
            loss_sum / updates_per_epoch as f64
        } else {
            0.0
        };
        if !mean.is_finite() {
            return Err(EmbedError::NonFiniteLoss { epoch });
        }
        epoch_losses.push(mean);
    }

    if !doc_vectors.is_finite() || !word_output.is_finite() {
        return Err(EmbedError::NonFiniteLoss {
            epoch: config.epochs,
        });
    }

    for (doc_id, tokens) in indexed.iter().enumerate() {
        if tokens.is_empty() {
            doc_vectors.row_mut(doc_id).fill(1.0);
        }
    }

    let doc_keys: Vec<String> = documents.iter().map(|d| d.key.clone()).collect();
    let doc_index = doc_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), i))
        .collect();

    Ok(DocEmbeddingModel {
        config: *config,
        seed,
        vocab,
        doc_keys,
        doc_index,
        doc_vectors,
        word_output,
        epoch_losses,
    })
}

/// Result of inferring a vector for an unseen document.
#[derive(Clone, Debug, PartialEq)]
pub struct InferredVector {
    pub vector: Vec<f64>,
    /// Set when no token was in the vocabulary; the vector is then all ones.
    pub out_of_vocab: bool,
}

/// Infers a vector for an unseen document by training a fresh document
/// vector with the word vectors frozen. Deterministic per seed.
pub fn infer_vector(
    model: &DocEmbeddingModel,
    tokens: &[String],
    infer_epochs: usize,
    seed: u64,
) -> InferredVector {
    let d_v = model.d_v();
    let indexed: Vec<usize> = tokens
        .iter()
        .filter_map(|t| model.vocab.index_of(t))
        .collect();
    if indexed.is_empty() {
        return InferredVector {
            vector: vec![1.0; d_v],
            out_of_vocab: true,
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = 0.5 / d_v as f64;
    let mut v: Vec<f64> = (0..d_v).map(|_| rng.random_range(-span..span)).collect();
    // The frozen word matrix is never written through; the clone keeps the
    // step routine shared between training and inference.
    let mut frozen = model.word_output.clone();

    let config = &model.config;
    let total = (infer_epochs * indexed.len()).max(1);
    let mut step = 0usize;
    for _ in 0..infer_epochs {
        for &target in &indexed {
            let progress = step as f64 / total as f64;
            let lr = config.lr_start - (config.lr_start - config.lr_min) * progress;
            dbow_step(
                &mut v,
                &mut frozen,
                &model.vocab,
                target,
                config.negatives,
                lr,
                true,
                &mut rng,
            );
            step += 1;
        }
    }

    InferredVector {
        vector: v,
        out_of_vocab: false,
    }
}

/// Builds one document per distinct user: the event ids they engaged with,
/// ordered by first engagement timestamp (ties by event id), each event
/// appearing once.
pub fn build_user_documents(events: &[Event]) -> Vec<UserDocument> {
    // user -> per-event earliest timestamp
    let mut first_seen: HashMap<&str, HashMap<&str, u64>> = HashMap::new();
    let mut user_order: Vec<&str> = Vec::new();
    for event in events {
        for post in &event.posts {
            let per_event = first_seen.entry(&post.user_id).or_insert_with(|| {
                user_order.push(&post.user_id);
                HashMap::new()
            });
            per_event
                .entry(&event.event_id)
                .and_modify(|t| *t = (*t).min(post.timestamp_s))
                .or_insert(post.timestamp_s);
        }
    }

    user_order
        .into_iter()
        .map(|user| {
            let mut entries: Vec<(&str, u64)> = first_seen[user]
                .iter()
                .map(|(&event_id, &ts)| (event_id, ts))
                .collect();
            entries.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
            UserDocument {
                user_id: user.to_string(),
                tokens: entries.into_iter().map(|(id, _)| id.to_string()).collect(),
            }
        })
        .collect()
}

/// Whitespace tokenizer: Unicode-whitespace split, lowercased, with
/// non-alphanumeric characters stripped from token edges. Callers needing a
/// different tokenizer pass their own token lists to `train_dbow`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

const EMBED_MAGIC: &[u8; 8] = b"DRRDEMB\0";
const EMBED_VERSION: u32 = 1;

mod io_util {
    use std::io::{Read, Write};

    pub fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }

    pub fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }

    pub fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }

    pub fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
        write_u32(w, s.len() as u32)?;
        w.write_all(s.as_bytes())
    }

    pub fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn read_str(r: &mut impl Read) -> std::io::Result<String> {
        let len = read_u32(r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(std::io::Error::other)
    }

    pub fn write_mat(w: &mut impl Write, m: &crate::nn::Mat) -> std::io::Result<()> {
        for &v in m.values() {
            write_f64(w, v)?;
        }
        Ok(())
    }

    pub fn read_mat(r: &mut impl Read, rows: usize, cols: usize) -> std::io::Result<crate::nn::Mat> {
        let mut m = crate::nn::Mat::zeros(rows, cols);
        for v in m.values_mut() {
            *v = read_f64(r)?;
        }
        Ok(m)
    }
}

pub(crate) use io_util::*;

impl DocEmbeddingModel {
    /// Serializes the model in the versioned binary layout described in
    /// `docs/formats.md`.
    pub fn write(&self, mut w: impl Write) -> Result<(), EmbedError> {
        let w = &mut w;
        w.write_all(EMBED_MAGIC)?;
        write_u32(w, EMBED_VERSION)?;
        write_u32(w, self.config.d_v as u32)?;
        write_u32(w, self.vocab.len() as u32)?;
        write_u32(w, self.num_docs() as u32)?;
        write_u32(w, self.config.epochs as u32)?;
        write_u32(w, self.config.infer_epochs as u32)?;
        write_u32(w, self.config.negatives as u32)?;
        write_u32(w, self.config.min_count as u32)?;
        write_f64(w, self.config.noise_power)?;
        write_f64(w, self.config.lr_start)?;
        write_f64(w, self.config.lr_min)?;
        write_u64(w, self.seed)?;
        for i in 0..self.vocab.len() {
            write_str(w, self.vocab.token(i))?;
            write_u64(w, self.vocab.count(i))?;
        }
        for key in &self.doc_keys {
            write_str(w, key)?;
        }
        write_mat(w, &self.doc_vectors)?;
        write_mat(w, &self.word_output)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        let mut file = BufWriter::new(File::create(path)?);
        self.write(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self, EmbedError> {
        let r = &mut r;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != EMBED_MAGIC {
            return Err(EmbedError::BadCheckpoint {
                reason: "wrong magic bytes".into(),
            });
        }
        let version = read_u32(r)?;
        if version != EMBED_VERSION {
            return Err(EmbedError::BadCheckpoint {
                reason: format!("unsupported version {version}"),
            });
        }
        let d_v = read_u32(r)? as usize;
        let vocab_len = read_u32(r)? as usize;
        let num_docs = read_u32(r)? as usize;
        let epochs = read_u32(r)? as usize;
        let infer_epochs = read_u32(r)? as usize;
        let negatives = read_u32(r)? as usize;
        let min_count = read_u32(r)? as usize;
        let noise_power = read_f64(r)?;
        let lr_start = read_f64(r)?;
        let lr_min = read_f64(r)?;
        let seed = read_u64(r)?;

        let mut tokens = Vec::with_capacity(vocab_len);
        let mut counts = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            tokens.push(read_str(r)?);
            counts.push(read_u64(r)?);
        }
        let vocab = Vocabulary::from_counts(tokens, counts, noise_power);

        let mut doc_keys = Vec::with_capacity(num_docs);
        for _ in 0..num_docs {
            doc_keys.push(read_str(r)?);
        }
        let doc_vectors = read_mat(r, num_docs, d_v)?;
        let word_output = read_mat(r, vocab_len, d_v)?;
        let doc_index = doc_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();

        Ok(DocEmbeddingModel {
            config: DbowConfig {
                d_v,
                epochs,
                infer_epochs,
                negatives,
                min_count,
                noise_power,
                lr_start,
                lr_min,
            },
            seed,
            vocab,
            doc_keys,
            doc_index,
            doc_vectors,
            word_output,
            epoch_losses: Vec::new(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
