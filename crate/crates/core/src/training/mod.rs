//! Model assembly and BPTT training.
//!
//! A model is embedding -> recurrent layers -> linear head. Classifiers
//! (number prediction, grammaticality) put a 2-way softmax on the final
//! hidden state; the language model puts a full-vocabulary softmax on every
//! step. Training is Adam over tape gradients with global-norm clipping.
//! Everything is deterministic per seed: the same configuration and corpus
//! reproduce checkpoints bit for bit.

mod adam;
pub mod checkpoint;

pub use adam::{adam_step, clip_global_norm, AdamHyper};

use crate::cells::{
    init_parameters_with, Activation, AlphaMode, CellKind, CellParameters, DalePlacement,
    TapedCell, TapedState,
};
use crate::corpus::{AnnotatedSentence, Number};
use crate::tape::{logit, softmax, Tape, Var};
use crate::tensor::{NumericsError, Tensor};
use crate::thread_pool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("token {0:?} is not in the model vocabulary")]
    UnknownToken(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("input is empty")]
    EmptyInput,
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    NumberPrediction,
    Grammaticality,
    LanguageModel,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::NumberPrediction => "number_prediction",
            Task::Grammaticality => "grammaticality",
            Task::LanguageModel => "language_model",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "number_prediction" => Some(Task::NumberPrediction),
            "grammaticality" => Some(Task::Grammaticality),
            "language_model" => Some(Task::LanguageModel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub task: Task,
    pub num_layers: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub vocab: Vec<String>,
    pub alpha_mode: AlphaMode,
    pub dale_placement: DalePlacement,
}

impl ModelConfig {
    /// Classifier preset: one relu layer, embedding and hidden size 50.
    pub fn classifier(cell: CellKind, task: Task, vocab: Vec<String>) -> ModelConfig {
        ModelConfig {
            cell,
            task,
            num_layers: 1,
            embedding_dim: 50,
            hidden_dim: 50,
            activation: Activation::Relu,
            dropout_rate: 0.0,
            vocab,
            alpha_mode: AlphaMode::Sigmoid,
            dale_placement: DalePlacement::Last,
        }
    }

    /// Language-model preset: two tanh layers, dropout 0.2, embedding 200,
    /// hidden 650.
    pub fn language_model(cell: CellKind, vocab: Vec<String>) -> ModelConfig {
        ModelConfig {
            cell,
            task: Task::LanguageModel,
            num_layers: 2,
            embedding_dim: 200,
            hidden_dim: 650,
            activation: Activation::Tanh,
            dropout_rate: 0.2,
            vocab,
            alpha_mode: AlphaMode::Sigmoid,
            dale_placement: DalePlacement::Last,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::LanguageModel => self.vocab.len(),
            _ => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gradient_clip_norm: Option<f64>,
    pub alpha_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            epochs: 10,
            seed: 0,
            gradient_clip_norm: Some(5.0),
            alpha_init: 0.8,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(0.0 < self.alpha_init && self.alpha_init < 1.0) {
            return Err(TrainError::BadConfig("alpha_init must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses and metrics plus the per-step decay-parameter values
/// of every layer.
#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub epoch_train_loss: Vec<f64>,
    /// Validation accuracy (classifiers) or validation perplexity (LM).
    pub epoch_metric: Vec<f64>,
    /// alpha_steps[layer][step], recorded after every optimizer step.
    pub alpha_steps: Vec<Vec<f64>>,
}

impl TrainingHistory {
    /// CSV with one row per epoch; the alpha columns report each layer's
    /// value at the end of the epoch.
    pub fn to_csv(&self) -> String {
        let layers = self.alpha_steps.len();
        let mut out = String::from("epoch,loss,metric");
        for l in 0..layers {
            out.push_str(&format!(",alpha_layer_{l}"));
        }
        out.push('\n');
        let epochs = self.epoch_train_loss.len();
        for e in 0..epochs {
            out.push_str(&format!(
                "{},{},{}",
                e + 1,
                self.epoch_train_loss[e],
                self.epoch_metric[e]
            ));
            for l in 0..layers {
                let steps = self.alpha_steps[l].len();
                let per_epoch = steps / epochs.max(1);
                let idx = ((e + 1) * per_epoch).min(steps).saturating_sub(1);
                let v = self.alpha_steps[l].get(idx).copied().unwrap_or(f64::NAN);
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Embedding, recurrent layers, and output head.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub embedding: Tensor,
    pub layers: Vec<CellParameters>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    token_index: HashMap<String, usize>,
}

fn mix_seed(seed: u64, tag: u64) -> u64 {
    // One splitmix64 round over seed xor tag.
    let mut z = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        if config.vocab.is_empty() {
            return Err(TrainError::BadConfig("vocabulary is empty".into()));
        }
        if config.num_layers == 0 {
            return Err(TrainError::BadConfig("need at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
        let vocab_len = config.vocab.len();
        let eb = 1.0 / (config.embedding_dim as f64).sqrt();
        let embedding = Tensor::matrix(
            vocab_len,
            config.embedding_dim,
            (0..vocab_len * config.embedding_dim)
                .map(|_| rng.random_range(-eb..eb))
                .collect(),
        )?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let input = if l == 0 {
                config.embedding_dim
            } else {
                config.hidden_dim
            };
            layers.push(init_parameters_with(
                config.cell,
                config.hidden_dim,
                input,
                mix_seed(seed, 100 + l as u64),
                config.activation,
                config.alpha_mode,
                config.dale_placement,
            ));
        }
        let out_dim = config.output_dim();
        let hb = 1.0 / (config.hidden_dim as f64).sqrt();
        let head_w = Tensor::matrix(
            out_dim,
            config.hidden_dim,
            (0..out_dim * config.hidden_dim)
                .map(|_| rng.random_range(-hb..hb))
                .collect(),
        )?;
        let head_b = Tensor::zeros(&[out_dim]);
        Ok(Model::from_parts(
            config, seed, embedding, layers, head_w, head_b,
        ))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        seed: u64,
        embedding: Tensor,
        layers: Vec<CellParameters>,
        head_w: Tensor,
        head_b: Tensor,
    ) -> Model {
        let token_index = config
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Model {
            config,
            seed,
            embedding,
            layers,
            head_w,
            head_b,
            token_index,
        }
    }

    pub fn token_id(&self, token: &str) -> Result<usize> {
        self.token_index
            .get(token)
            .copied()
            .ok_or_else(|| TrainError::UnknownToken(token.to_string()))
    }

    pub fn covers(&self, tokens: &[String]) -> bool {
        tokens.iter().all(|t| self.token_index.contains_key(t))
    }

    /// Set every layer's decay parameter to the given value.
    pub fn set_alpha(&mut self, alpha: f64) {
        for layer in &mut self.layers {
            if let Some(a) = &mut layer.alpha_logit {
                let raw = match layer.alpha_mode {
                    AlphaMode::Sigmoid => logit(alpha),
                    AlphaMode::Linear => alpha,
                };
                *a = Tensor::scalar(raw).expect("alpha is finite");
            }
        }
    }

    /// Current decay value of every layer that has one.
    pub fn alphas(&self) -> Vec<f64> {
        self.layers.iter().filter_map(|l| l.alpha_value()).collect()
    }

    /// Visit learnable parameters in declared (checkpoint) order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("embedding", &self.embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(w) = &layer.w {
                f(&format!("layer{i}.w"), w);
            }
            f(&format!("layer{i}.u"), &layer.u);
            f(&format!("layer{i}.b"), &layer.b);
            if let Some(a) = &layer.alpha_logit {
                f(&format!("layer{i}.alpha_logit"), a);
            }
        }
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("embedding", &mut self.embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some(w) = &mut layer.w {
                f(&format!("layer{i}.w"), w);
            }
            f(&format!("layer{i}.u"), &mut layer.u);
            f(&format!("layer{i}.b"), &mut layer.b);
            if let Some(a) = &mut layer.alpha_logit {
                f(&format!("layer{i}.alpha_logit"), a);
            }
        }
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

/// Model leaves registered on one tape, in parameter order.
struct TapedModel {
    emb: Var,
    cells: Vec<TapedCell>,
    head_w: Var,
    head_b: Var,
    /// Leaf vars aligned with `Model::visit_params` order.
    leaf_vars: Vec<Var>,
}

fn register_model(model: &Model, tape: &mut Tape) -> Result<TapedModel> {
    let emb = tape.leaf(model.embedding.clone())?;
    let mut cells = Vec::with_capacity(model.layers.len());
    let mut leaf_vars = vec![emb];
    for layer in &model.layers {
        let cell = TapedCell::register(layer, tape)?;
        if let Some(w) = cell.leaves.w {
            leaf_vars.push(w);
        }
        leaf_vars.push(cell.leaves.u);
        leaf_vars.push(cell.leaves.b);
        if let Some(a) = cell.leaves.alpha_logit {
            leaf_vars.push(a);
        }
        cells.push(cell);
    }
    let head_w = tape.leaf(model.head_w.clone())?;
    let head_b = tape.leaf(model.head_b.clone())?;
    leaf_vars.push(head_w);
    leaf_vars.push(head_b);
    Ok(TapedModel {
        emb,
        cells,
        head_w,
        head_b,
        leaf_vars,
    })
}

/// Inverted dropout: a fresh mask per position and junction, scaled by
/// 1/(1-p). Applied between embedding and layer 1, between stacked layers,
/// and between the top layer and the head; training only.
struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn off() -> Dropout {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    fn new(rate: f64, seed: u64) -> Dropout {
        if rate > 0.0 {
            Dropout {
                rate,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            }
        } else {
            Dropout::off()
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &mut self.rng {
            None => Ok(x),
            Some(rng) => {
                let n = tape.value(x).len();
                let keep = 1.0 - self.rate;
                let mask: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(tape.const_mul(x, &mask)?)
            }
        }
    }
}

/// Run the recurrent stack over the inputs; returns the top-layer hidden
/// state (after the head-side dropout junction) at every position.
fn run_stack(
    tape: &mut Tape,
    tm: &TapedModel,
    inputs: &[Var],
    dropout: &mut Dropout,
) -> Result<Vec<Var>> {
    let mut states: Vec<TapedState> = Vec::with_capacity(tm.cells.len());
    for c in &tm.cells {
        states.push(c.init_state(tape)?);
    }
    let mut tops = Vec::with_capacity(inputs.len());
    for &x0 in inputs {
        let mut x = dropout.apply(tape, x0)?;
        for (l, cell) in tm.cells.iter().enumerate() {
            states[l] = cell.step(tape, &states[l], x)?;
            x = states[l].h;
            if l + 1 < tm.cells.len() {
                x = dropout.apply(tape, x)?;
            }
        }
        let top = dropout.apply(tape, x)?;
        tops.push(top);
    }
    Ok(tops)
}

fn head_logits(tape: &mut Tape, tm: &TapedModel, h: Var) -> Result<Var> {
    let wh = tape.matvec(tm.head_w, h)?;
    Ok(tape.add(wh, tm.head_b)?)
}

/// Classifier loss for one sentence: softmax cross-entropy of the 2-way
/// head on the final hidden state.
fn classifier_loss(
    tape: &mut Tape,
    tm: &TapedModel,
    token_ids: &[usize],
    label: usize,
    dropout: &mut Dropout,
) -> Result<Var> {
    if token_ids.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let mut inputs = Vec::with_capacity(token_ids.len());
    for &id in token_ids {
        inputs.push(tape.embed_row(tm.emb, id)?);
    }
    let tops = run_stack(tape, tm, &inputs, dropout)?;
    let logits = head_logits(tape, tm, *tops.last().unwrap())?;
    Ok(tape.softmax_cross_entropy(logits, label)?)
}

/// Language-model loss for one sentence: the sum over positions of
/// next-token cross-entropy. Position 0 is predicted from a zero input
/// vector; position t > 0 from the embedding of token t-1.
fn lm_loss(
    tape: &mut Tape,
    tm: &TapedModel,
    token_ids: &[usize],
    emb_dim: usize,
    dropout: &mut Dropout,
) -> Result<(Var, Vec<Var>)> {
    if token_ids.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let mut inputs = Vec::with_capacity(token_ids.len());
    inputs.push(tape.leaf(Tensor::zeros(&[emb_dim]))?);
    for &id in &token_ids[..token_ids.len() - 1] {
        inputs.push(tape.embed_row(tm.emb, id)?);
    }
    let tops = run_stack(tape, tm, inputs.as_slice(), dropout)?;
    let mut per_token = Vec::with_capacity(token_ids.len());
    let mut total: Option<Var> = None;
    for (t, &target) in token_ids.iter().enumerate() {
        let logits = head_logits(tape, tm, tops[t])?;
        let nll = tape.softmax_cross_entropy(logits, target)?;
        per_token.push(nll);
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll)?,
        });
    }
    Ok((total.unwrap(), per_token))
}

fn label_of(task: Task, s: &AnnotatedSentence) -> usize {
    match task {
        // Index 0 = singular, 1 = plural.
        Task::NumberPrediction => match s.subject_number {
            Number::Sg => 0,
            Number::Pl => 1,
        },
        // Index 0 = ungrammatical, 1 = grammatical.
        Task::Grammaticality => usize::from(s.grammatical),
        Task::LanguageModel => unreachable!("language model has no class label"),
    }
}

fn classifier_input(task: Task, s: &AnnotatedSentence) -> &[String] {
    match task {
        // Number prediction reads the sentence truncated strictly before
        // the agreement target.
        Task::NumberPrediction => &s.tokens[..s.verb_index],
        _ => &s.tokens,
    }
}

fn ids_of(model: &Model, tokens: &[String]) -> Result<Vec<usize>> {
    tokens.iter().map(|t| model.token_id(t)).collect()
}

/// Gradients of the per-sentence loss with respect to every parameter, in
/// parameter order, plus the loss value and token count.
fn sentence_gradients(
    model: &Model,
    task: Task,
    s: &AnnotatedSentence,
    dropout_seed: u64,
) -> Result<(Vec<Tensor>, f64, usize)> {
    let mut tape = Tape::new();
    let tm = register_model(model, &mut tape)?;
    let mut dropout = Dropout::new(model.config.dropout_rate, dropout_seed);
    let (loss, tokens) = match task {
        Task::LanguageModel => {
            let ids = ids_of(model, &s.tokens)?;
            let n = ids.len();
            let (loss, _) = lm_loss(&mut tape, &tm, &ids, model.config.embedding_dim, &mut dropout)?;
            (loss, n)
        }
        _ => {
            let ids = ids_of(model, classifier_input(task, s))?;
            let label = label_of(task, s);
            (classifier_loss(&mut tape, &tm, &ids, label, &mut dropout)?, 1)
        }
    };
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = tm.leaf_vars.iter().map(|&v| grads.get(v)).collect();
    Ok((out, loss_value, tokens))
}

fn zeros_like(model: &Model) -> Vec<Tensor> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, t| out.push(Tensor::zeros(t.shape())));
    out
}

fn add_into(acc: &mut [Tensor], g: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

fn scale_grads(gs: &mut [Tensor], s: f64) {
    for g in gs {
        for v in g.data_mut() {
            *v *= s;
        }
    }
}

struct Trainer {
    hyper: AdamHyper,
    clip: Option<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Trainer {
    fn new(model: &Model, cfg: &TrainConfig) -> Trainer {
        Trainer {
            hyper: AdamHyper::with_lr(cfg.learning_rate),
            clip: cfg.gradient_clip_norm,
            m: zeros_like(model),
            v: zeros_like(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, mut grads: Vec<Tensor>) -> Result<()> {
        if let Some(clip) = self.clip {
            clip_global_norm(&mut grads, clip);
        }
        self.t += 1;
        let t = self.t;
        let hyper = self.hyper;
        let mut idx = 0;
        let mut failed = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |_, p| {
            if failed.is_none() {
                if let Err(e) = adam_step(p, &grads[idx], &mut ms[idx], &mut vs[idx], t, &hyper) {
                    failed = Some(e);
                }
            }
            idx += 1;
        });
        match failed {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

fn record_alphas(model: &Model, history: &mut TrainingHistory) {
    let alphas = model.alphas();
    if history.alpha_steps.is_empty() {
        history.alpha_steps = vec![Vec::new(); alphas.len()];
    }
    for (l, a) in alphas.into_iter().enumerate() {
        history.alpha_steps[l].push(a);
    }
}

fn class_probs(model: &Model, ids: Vec<usize>) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let mut tape = Tape::new();
    let tm = register_model(model, &mut tape)?;
    let mut dropout = Dropout::off();
    let mut inputs = Vec::with_capacity(ids.len());
    for &id in &ids {
        inputs.push(tape.embed_row(tm.emb, id)?);
    }
    let tops = run_stack(&mut tape, &tm, &inputs, &mut dropout)?;
    let logits = head_logits(&mut tape, &tm, *tops.last().unwrap())?;
    Ok(softmax(tape.value(logits).data()))
}

/// Accuracy with the tie rule (an exactly-0.5 decision is incorrect);
/// the per-epoch validation metric for classifiers.
fn classifier_accuracy(model: &Model, task: Task, corpus: &[AnnotatedSentence]) -> Result<f64> {
    if corpus.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for s in corpus {
        let probs = class_probs(model, ids_of(model, classifier_input(task, s))?)?;
        let label = label_of(task, s);
        if probs[label] > probs[1 - label] {
            correct += 1;
        }
    }
    Ok(correct as f64 / corpus.len() as f64)
}

/// Train a 2-way classifier (number prediction or grammaticality). The
/// history metric is accuracy on `valid`, or on the training set when
/// `valid` is empty.
pub fn train_classifier(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train: &[AnnotatedSentence],
    valid: &[AnnotatedSentence],
) -> Result<(Model, TrainingHistory)> {
    if model_config.task == Task::LanguageModel {
        return Err(TrainError::BadConfig(
            "train_classifier needs a classifier task".into(),
        ));
    }
    train_config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut model = Model::init(model_config.clone(), train_config.seed)?;
    model.set_alpha(train_config.alpha_init);
    let mut trainer = Trainer::new(&model, train_config);
    let mut history = TrainingHistory::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(train_config.seed, 7));
    let mut step = 0usize;

    for _epoch in 0..train_config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = order_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train_config.batch_size) {
            let mut acc = zeros_like(&model);
            let mut batch_loss = 0.0;
            for &i in batch {
                step += 1;
                let (g, loss, _) = sentence_gradients(
                    &model,
                    model_config.task,
                    &train[i],
                    mix_seed(train_config.seed, 0x0d00 + step as u64),
                )?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { step });
                }
                batch_loss += loss;
                add_into(&mut acc, &g);
            }
            scale_grads(&mut acc, 1.0 / batch.len() as f64);
            epoch_loss += batch_loss;
            trainer.step(&mut model, acc)?;
            record_alphas(&model, &mut history);
        }
        history
            .epoch_train_loss
            .push(epoch_loss / train.len() as f64);
        let metric = if valid.is_empty() {
            classifier_accuracy(&model, model_config.task, train)?
        } else {
            classifier_accuracy(&model, model_config.task, valid)?
        };
        history.epoch_metric.push(metric);
    }
    Ok((model, history))
}

/// Token-weighted validation perplexity (no dropout). Sentences are scored
/// independently in parallel and merged in corpus order.
pub fn validation_perplexity(model: &Model, corpus: &[AnnotatedSentence]) -> Result<f64> {
    if corpus.is_empty() {
        return Ok(f64::NAN);
    }
    let results: Vec<Result<(f64, usize)>> = thread_pool().install(|| {
        use rayon::prelude::*;
        corpus
            .par_iter()
            .map(|s| Ok((-lm_logprob(model, &s.tokens)?, s.tokens.len())))
            .collect()
    });
    let mut total = 0.0;
    let mut count = 0usize;
    for r in results {
        let (nll, n) = r?;
        total += nll;
        count += n;
    }
    Ok((total / count as f64).exp())
}

/// Train the word-level language model: next-token cross-entropy, batches
/// bucketed by sentence length so padding never arises, loss averaged over
/// the tokens of each batch.
pub fn train_lm(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train: &[AnnotatedSentence],
    valid: &[AnnotatedSentence],
) -> Result<(Model, TrainingHistory)> {
    if model_config.task != Task::LanguageModel {
        return Err(TrainError::BadConfig("train_lm needs the LM task".into()));
    }
    train_config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut model = Model::init(model_config.clone(), train_config.seed)?;
    model.set_alpha(train_config.alpha_init);
    let mut trainer = Trainer::new(&model, train_config);
    let mut history = TrainingHistory::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(train_config.seed, 11));
    let mut step = 0usize;

    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        buckets.entry(s.tokens.len()).or_default().push(i);
    }

    for _epoch in 0..train_config.epochs {
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for idxs in buckets.values() {
            let mut order = idxs.clone();
            for i in (1..order.len()).rev() {
                let j = order_rng.random_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(train_config.batch_size) {
                batches.push(chunk.to_vec());
            }
        }
        for i in (1..batches.len()).rev() {
            let j = order_rng.random_range(0..=i);
            batches.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in &batches {
            let batch_tokens: usize = batch.iter().map(|&i| train[i].tokens.len()).sum();
            // Fixed four-way chunking: parallel across chunks, merged in
            // chunk order, so results do not depend on the thread count.
            let base_step = step;
            let chunk_size = batch.len().div_ceil(4);
            let chunks: Vec<&[usize]> = batch.chunks(chunk_size).collect();
            let partials: Vec<Result<(Vec<Tensor>, f64)>> = thread_pool().install(|| {
                use rayon::prelude::*;
                chunks
                    .par_iter()
                    .enumerate()
                    .map(|(ci, chunk)| {
                        let mut acc = zeros_like(&model);
                        let mut loss_sum = 0.0;
                        for (k, &i) in chunk.iter().enumerate() {
                            let sent_step = base_step + ci * chunk_size + k + 1;
                            let (g, loss, _) = sentence_gradients(
                                &model,
                                Task::LanguageModel,
                                &train[i],
                                mix_seed(train_config.seed, 0x1a00 + sent_step as u64),
                            )?;
                            loss_sum += loss;
                            add_into(&mut acc, &g);
                        }
                        Ok((acc, loss_sum))
                    })
                    .collect()
            });
            step += batch.len();
            let mut acc = zeros_like(&model);
            let mut batch_loss = 0.0;
            for p in partials {
                let (g, l) = p?;
                add_into(&mut acc, &g);
                batch_loss += l;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            scale_grads(&mut acc, 1.0 / batch_tokens as f64);
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;
            trainer.step(&mut model, acc)?;
            record_alphas(&model, &mut history);
        }
        history
            .epoch_train_loss
            .push(epoch_loss / epoch_tokens as f64);
        let metric = if valid.is_empty() {
            validation_perplexity(&model, train)?
        } else {
            validation_perplexity(&model, valid)?
        };
        history.epoch_metric.push(metric);
    }
    Ok((model, history))
}

/// (p_singular, p_plural) for a sentence prefix.
pub fn classify_number(model: &Model, prefix_tokens: &[String]) -> Result<(f64, f64)> {
    if model.config.task != Task::NumberPrediction {
        return Err(TrainError::BadConfig(
            "model was not trained for number prediction".into(),
        ));
    }
    let probs = class_probs(model, ids_of(model, prefix_tokens)?)?;
    Ok((probs[0], probs[1]))
}

/// Probability that the sentence is grammatical. The decision threshold is
/// 0.5 and exact ties count as incorrect in metrics.
pub fn judge_grammaticality(model: &Model, tokens: &[String]) -> Result<f64> {
    if model.config.task != Task::Grammaticality {
        return Err(TrainError::BadConfig(
            "model was not trained for grammaticality".into(),
        ));
    }
    let probs = class_probs(model, ids_of(model, tokens)?)?;
    Ok(probs[1])
}

/// Total log probability of a token sequence under the language model
/// (evaluation mode, no dropout). Always <= 0.
pub fn lm_logprob(model: &Model, tokens: &[String]) -> Result<f64> {
    if model.config.task != Task::LanguageModel {
        return Err(TrainError::BadConfig(
            "model was not trained as a language model".into(),
        ));
    }
    let ids = ids_of(model, tokens)?;
    let mut tape = Tape::new();
    let tm = register_model(model, &mut tape)?;
    let mut dropout = Dropout::off();
    let (loss, _) = lm_loss(&mut tape, &tm, &ids, model.config.embedding_dim, &mut dropout)?;
    Ok(-tape.value(loss).item())
}

/// Per-token negative log likelihoods, same forward convention as
/// `lm_logprob`.
pub fn lm_token_nlls(model: &Model, tokens: &[String]) -> Result<Vec<f64>> {
    if model.config.task != Task::LanguageModel {
        return Err(TrainError::BadConfig(
            "model was not trained as a language model".into(),
        ));
    }
    let ids = ids_of(model, tokens)?;
    let mut tape = Tape::new();
    let tm = register_model(model, &mut tape)?;
    let mut dropout = Dropout::off();
    let (_, per_token) = lm_loss(&mut tape, &tm, &ids, model.config.embedding_dim, &mut dropout)?;
    Ok(per_token.into_iter().map(|v| tape.value(v).item()).collect())
}

/// The decay-parameter study: train the grammaticality classifier from each
/// initialization and log the per-step decay value of the first layer with
/// a trailing moving average.
#[derive(Debug, Clone)]
pub struct AlphaStudy {
    pub inits: Vec<f64>,
    pub trajectories: Vec<Vec<f64>>,
    pub moving_averages: Vec<Vec<f64>>,
}

pub fn alpha_study(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train: &[AnnotatedSentence],
    valid: &[AnnotatedSentence],
    inits: &[f64],
    ma_window: usize,
) -> Result<AlphaStudy> {
    let mut trajectories = Vec::new();
    let mut moving_averages = Vec::new();
    for &init in inits {
        let cfg = TrainConfig {
            alpha_init: init,
            ..train_config.clone()
        };
        let (_, history) = train_classifier(model_config, &cfg, train, valid)?;
        let traj = history.alpha_steps.first().cloned().unwrap_or_default();
        let window = ma_window.max(1);
        let mut ma = Vec::with_capacity(traj.len());
        let mut window_sum = 0.0;
        for (i, v) in traj.iter().enumerate() {
            window_sum += v;
            if i >= window {
                window_sum -= traj[i - window];
            }
            ma.push(window_sum / (i.min(window - 1) + 1) as f64);
        }
        trajectories.push(traj);
        moving_averages.push(ma);
    }
    Ok(AlphaStudy {
        inits: inits.to_vec(),
        trajectories,
        moving_averages,
    })
}

impl AlphaStudy {
    /// CSV: step, then a raw column and a moving-average column per init.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for init in &self.inits {
            out.push_str(&format!(",alpha_init_{init},ma_init_{init}"));
        }
        out.push('\n');
        let steps = self.trajectories.iter().map(Vec::len).max().unwrap_or(0);
        for s in 0..steps {
            out.push_str(&(s + 1).to_string());
            for (traj, ma) in self.trajectories.iter().zip(&self.moving_averages) {
                match (traj.get(s), ma.get(s)) {
                    (Some(a), Some(m)) => out.push_str(&format!(",{a},{m}")),
                    _ => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Unigram perplexity baseline computed by counting on the training corpus
/// and scored on the evaluation corpus. Tokens unseen in training make the
/// baseline infinite.
pub fn unigram_perplexity(train: &[AnnotatedSentence], eval: &[AnnotatedSentence]) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut total = 0usize;
    for s in train {
        for t in &s.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        total += s.tokens.len();
    }
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in eval {
        for t in &s.tokens {
            match counts.get(t.as_str()) {
                Some(&c) => nll -= (c as f64 / total as f64).ln(),
                None => return f64::INFINITY,
            }
            n += 1;
        }
    }
    (nll / n as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{annotate, load_grammar, Lexicon, DEFAULT_GRAMMAR, DEFAULT_LEXICON};

    fn small_classifier_setup(
        task: Task,
        n: usize,
        seed: u64,
    ) -> (ModelConfig, Vec<AnnotatedSentence>) {
        let templates = load_grammar(DEFAULT_GRAMMAR).unwrap();
        let lex = Lexicon::from_tsv(DEFAULT_LEXICON).unwrap();
        let picked: Vec<_> = templates
            .into_iter()
            .filter(|t| ["sv_simple", "sv_across_pp"].contains(&t.name.as_str()))
            .collect();
        let ratio = if task == Task::Grammaticality { 0.5 } else { 1.0 };
        let corpus = crate::corpus::generate(&picked, &lex, seed, n, ratio).unwrap();
        let vocab = crate::corpus::vocabulary(&corpus);
        let mut cfg = ModelConfig::classifier(CellKind::Drnn, task, vocab);
        cfg.embedding_dim = 16;
        cfg.hidden_dim = 16;
        (cfg, corpus)
    }

    #[test]
    fn memorization_reaches_full_training_accuracy() {
        // Capacity oracle: ten sentences, many epochs, expect exact recall.
        let (cfg, corpus) = small_classifier_setup(Task::NumberPrediction, 10, 3);
        let tc = TrainConfig {
            epochs: 200,
            seed: 5,
            ..TrainConfig::default()
        };
        let (model, history) = train_classifier(&cfg, &tc, &corpus, &[]).unwrap();
        let acc = classifier_accuracy(&model, Task::NumberPrediction, &corpus).unwrap();
        assert_eq!(acc, 1.0, "history: {:?}", history.epoch_metric);
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let (cfg, corpus) = small_classifier_setup(Task::Grammaticality, 8, 4);
        let tc = TrainConfig {
            epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let (model, _) = train_classifier(&cfg, &tc, &corpus, &[]).unwrap();
        let mut init = Model::init(cfg.clone(), 9).unwrap();
        init.set_alpha(tc.alpha_init);
        assert_eq!(checkpoint::save_model(&model), checkpoint::save_model(&init));
    }

    #[test]
    fn same_seed_gives_identical_checkpoint_bytes() {
        let (cfg, corpus) = small_classifier_setup(Task::Grammaticality, 20, 6);
        let tc = TrainConfig {
            epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, _) = train_classifier(&cfg, &tc, &corpus, &[]).unwrap();
        let (b, _) = train_classifier(&cfg, &tc, &corpus, &[]).unwrap();
        assert_eq!(checkpoint::save_model(&a), checkpoint::save_model(&b));
    }

    #[test]
    fn loss_strictly_decreases_over_first_steps_on_fixed_batch() {
        // Smoke property at lr 1e-3 on the memorization fixture.
        let (cfg, corpus) = small_classifier_setup(Task::NumberPrediction, 4, 8);
        let one = corpus[..1].to_vec();
        let tc = TrainConfig {
            epochs: 5,
            seed: 2,
            ..TrainConfig::default()
        };
        let (_, history) = train_classifier(&cfg, &tc, &one, &[]).unwrap();
        for w in history.epoch_train_loss.windows(2) {
            assert!(w[1] < w[0], "loss not decreasing: {:?}", history.epoch_train_loss);
        }
    }

    #[test]
    fn alpha_trajectory_stays_inside_unit_interval() {
        let (cfg, corpus) = small_classifier_setup(Task::Grammaticality, 24, 10);
        let tc = TrainConfig {
            epochs: 3,
            seed: 13,
            ..TrainConfig::default()
        };
        let (_, history) = train_classifier(&cfg, &tc, &corpus, &[]).unwrap();
        assert!(!history.alpha_steps.is_empty());
        for layer in &history.alpha_steps {
            assert!(!layer.is_empty());
            for a in layer {
                assert!(*a > 0.0 && *a < 1.0);
            }
        }
    }

    #[test]
    fn dale_signs_hold_after_training() {
        let (cfg, corpus) = small_classifier_setup(Task::Grammaticality, 30, 12);
        let tc = TrainConfig {
            epochs: 2,
            seed: 17,
            ..TrainConfig::default()
        };
        let (model, _) = train_classifier(&cfg, &tc, &corpus, &[]).unwrap();
        for layer in &model.layers {
            let eff = crate::cells::effective_recurrent_matrix(layer).unwrap();
            let signs = layer.dale_signs.as_ref().unwrap();
            let (rows, cols) = eff.dims2();
            for i in 0..rows {
                for j in 0..cols {
                    if signs[j] > 0.0 {
                        assert!(eff.at2(i, j) >= 0.0);
                    } else {
                        assert!(eff.at2(i, j) <= 0.0);
                    }
                }
            }
        }
    }

    fn tiny_lm(vocab: Vec<String>, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::language_model(CellKind::Drnn, vocab);
        cfg.num_layers = 2;
        cfg.embedding_dim = 12;
        cfg.hidden_dim = 16;
        cfg.dropout_rate = 0.0;
        let _ = seed;
        cfg
    }

    fn lm_corpus(n: usize, seed: u64) -> Vec<AnnotatedSentence> {
        let templates = load_grammar(DEFAULT_GRAMMAR).unwrap();
        let lex = Lexicon::from_tsv(DEFAULT_LEXICON).unwrap();
        let picked: Vec<_> = templates
            .into_iter()
            .filter(|t| ["sv_simple", "sv_across_pp", "npi_simple"].contains(&t.name.as_str()))
            .collect();
        crate::corpus::generate(&picked, &lex, seed, n, 1.0).unwrap()
    }

    #[test]
    fn lm_memorizes_a_single_repeated_sentence() {
        let corpus: Vec<_> = std::iter::repeat_n(lm_corpus(1, 21)[0].clone(), 16).collect();
        let cfg = tiny_lm(crate::corpus::vocabulary(&corpus), 0);
        let tc = TrainConfig {
            epochs: 60,
            seed: 3,
            batch_size: 4,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let (model, _) = train_lm(&cfg, &tc, &corpus, &[]).unwrap();
        let ppl = validation_perplexity(&model, &corpus[..1]).unwrap();
        assert!(ppl < 1.1, "memorization perplexity {ppl}");
    }

    #[test]
    fn lm_beats_unigram_baseline_on_small_corpus() {
        let corpus = lm_corpus(300, 33);
        let (train, valid, _) = crate::corpus::split(&corpus, 0.8, 0.2, 1).unwrap();
        let cfg = tiny_lm(crate::corpus::vocabulary(&corpus), 0);
        let tc = TrainConfig {
            epochs: 10,
            seed: 7,
            batch_size: 8,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let (model, _) = train_lm(&cfg, &tc, &train, &valid).unwrap();
        let ppl = validation_perplexity(&model, &valid).unwrap();
        let unigram = unigram_perplexity(&train, &valid);
        assert!(
            ppl < unigram,
            "model perplexity {ppl} vs unigram {unigram}"
        );
    }

    #[test]
    fn lm_training_is_deterministic_with_dropout() {
        let corpus = lm_corpus(24, 40);
        let mut cfg = tiny_lm(crate::corpus::vocabulary(&corpus), 0);
        cfg.dropout_rate = 0.2;
        let tc = TrainConfig {
            epochs: 2,
            seed: 19,
            batch_size: 6,
            ..TrainConfig::default()
        };
        let (a, ha) = train_lm(&cfg, &tc, &corpus, &[]).unwrap();
        let (b, hb) = train_lm(&cfg, &tc, &corpus, &[]).unwrap();
        assert_eq!(checkpoint::save_model(&a), checkpoint::save_model(&b));
        assert_eq!(ha.epoch_train_loss, hb.epoch_train_loss);
    }

    #[test]
    fn untrained_uniform_model_scores_minus_l_log_v() {
        // Zero weights everywhere: the softmax is uniform at every step.
        let corpus = lm_corpus(4, 50);
        let vocab = crate::corpus::vocabulary(&corpus);
        let v = vocab.len();
        let cfg = tiny_lm(vocab, 0);
        let mut model = Model::init(cfg, 1).unwrap();
        model.visit_params_mut(&mut |name, t| {
            if !name.ends_with("alpha_logit") {
                for x in t.data_mut() {
                    *x = 0.0;
                }
            }
        });
        let tokens = &corpus[0].tokens;
        let lp = lm_logprob(&model, tokens).unwrap();
        let expect = -(tokens.len() as f64) * (v as f64).ln();
        assert!((lp - expect).abs() < 1e-10, "{lp} vs {expect}");
    }

    #[test]
    fn single_token_vocabulary_has_logprob_zero() {
        let lex = Lexicon::from_tsv(DEFAULT_LEXICON).unwrap();
        let mut s = annotate(
            &["the".into(), "authors".into(), "laugh".into()],
            1,
            2,
            &lex,
        )
        .unwrap();
        s.tokens = vec!["laugh".into(), "laugh".into()];
        s.subject_index = 0;
        s.verb_index = 1;
        let cfg = tiny_lm(vec!["laugh".into()], 0);
        let model = Model::init(cfg, 2).unwrap();
        let lp = lm_logprob(&model, &s.tokens).unwrap();
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn untrained_classifier_head_is_fifty_fifty() {
        let (cfg, corpus) = small_classifier_setup(Task::NumberPrediction, 4, 60);
        let mut model = Model::init(cfg, 3).unwrap();
        // Zero the head: logits are exactly (0, 0).
        model.head_w = Tensor::zeros(&[2, model.config.hidden_dim]);
        model.head_b = Tensor::zeros(&[2]);
        let (ps, ppl) = classify_number(&model, &corpus[0].tokens[..corpus[0].verb_index]).unwrap();
        assert_eq!((ps, ppl), (0.5, 0.5));
    }

    #[test]
    fn checkpoint_round_trip_preserves_lm_scores_bit_for_bit() {
        let corpus = lm_corpus(30, 70);
        let cfg = tiny_lm(crate::corpus::vocabulary(&corpus), 0);
        let tc = TrainConfig {
            epochs: 1,
            seed: 23,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (model, _) = train_lm(&cfg, &tc, &corpus, &[]).unwrap();
        let bytes = checkpoint::save_model(&model);
        let back = checkpoint::load_model(&bytes).unwrap();
        assert_eq!(bytes, checkpoint::save_model(&back));
        for s in corpus.iter().take(5) {
            let a = lm_logprob(&model, &s.tokens).unwrap();
            let b = lm_logprob(&back, &s.tokens).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unknown_token_is_refused() {
        let (cfg, corpus) = small_classifier_setup(Task::NumberPrediction, 4, 80);
        let model = Model::init(cfg, 4).unwrap();
        let _ = corpus;
        let err = classify_number(&model, &["zebra".into()]);
        assert!(matches!(err, Err(TrainError::UnknownToken(_))));
    }

    #[test]
    fn history_csv_has_epoch_rows_and_alpha_columns() {
        let (cfg, corpus) = small_classifier_setup(Task::Grammaticality, 10, 90);
        let tc = TrainConfig {
            epochs: 2,
            seed: 29,
            ..TrainConfig::default()
        };
        let (_, history) = train_classifier(&cfg, &tc, &corpus, &[]).unwrap();
        let csv = history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,loss,metric,alpha_layer_0");
        assert_eq!(csv.lines().count(), 3);
    }
}
