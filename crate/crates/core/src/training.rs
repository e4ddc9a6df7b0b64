//! MIL-NCE loss, single-instance and classification baselines, and the SGD
//! training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{s, Array2};
use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::bags::{build_bags, AnchoredBags, BagOptions, ClipRef, ClipRole, DictRef, PairRef, SegBackMode, SynonymPolicy};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{normalize_rows, normalize_rows_backward, pooled_dictionary, ModelParams, MODEL_DIMS};
use crate::rng;
use crate::sampler::{build_batch_from, plan_epoch, training_pool, BatchOptions, DictVocab, LossMode, Minibatch};

/// Positive and negative pair indices into a flat similarity vector.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BagIndices {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

fn log_sum_exp_shifted(idx: &[usize], scaled: impl Fn(usize) -> f64, m: f64) -> f64 {
    idx.iter().map(|&i| (scaled(i) - m).exp()).sum::<f64>()
}

/// Mean over anchors of `-log(sum_P e^{s/tau} / sum_{P+N} e^{s/tau})`,
/// with the gradient with respect to every entry of `sims`.
pub fn mil_nce(bags: &[BagIndices], sims: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let w = vec![1.0 / bags.len().max(1) as f64; bags.len()];
    mil_nce_weighted(bags, sims, tau, &w)
}

/// As [`mil_nce`], but anchor `a` contributes with weight `weights[a]`.
pub fn mil_nce_weighted(bags: &[BagIndices], sims: &[f64], tau: f64, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if bags.is_empty() {
        return Err(Error::EmptyAnchors);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    if weights.len() != bags.len() {
        return Err(Error::Contract("one weight per anchor".into()));
    }
    let scaled = |i: usize| sims[i] / tau;
    let mut grad = vec![0.0; sims.len()];
    let mut total = 0.0;
    for (a, (bag, &w)) in bags.iter().zip(weights).enumerate() {
        if bag.positives.is_empty() || bag.negatives.is_empty() {
            return Err(Error::Contract(format!("anchor {a} has an empty bag")));
        }
        let m = bag
            .positives
            .iter()
            .chain(&bag.negatives)
            .map(|&i| scaled(i))
            .fold(f64::NEG_INFINITY, f64::max);
        let sp = log_sum_exp_shifted(&bag.positives, scaled, m);
        let sn = log_sum_exp_shifted(&bag.negatives, scaled, m);
        let all = sp + sn;
        total += w * (all.ln() - sp.ln());
        for &i in &bag.positives {
            let e = (scaled(i) - m).exp();
            grad[i] += w * (e / all - e / sp) / tau;
        }
        for &i in &bag.negatives {
            let e = (scaled(i) - m).exp();
            grad[i] += w * e / all / tau;
        }
    }
    Ok((total, grad))
}

/// Single-positive variant; every anchor must carry exactly one positive.
pub fn infonce(bags: &[BagIndices], sims: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    check_single_positive(bags)?;
    mil_nce(bags, sims, tau)
}

fn check_single_positive(bags: &[BagIndices]) -> Result<()> {
    match bags.iter().enumerate().find(|(_, b)| b.positives.len() != 1) {
        Some((anchor, b)) => Err(Error::NotSinglePositive {
            anchor,
            found: b.positives.len(),
        }),
        None => Ok(()),
    }
}

/// How anchors are combined into the batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AnchorWeighting {
    /// Plain mean over every emitted anchor.
    #[default]
    Equal,
    /// Each anchor family present in the batch gets the same total weight.
    PerFamily,
}

impl std::str::FromStr for AnchorWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(AnchorWeighting::Equal),
            "per-family" => Ok(AnchorWeighting::PerFamily),
            _ => Err(Error::InvalidConfig(format!("unknown anchor weighting {s:?}"))),
        }
    }
}

impl fmt::Display for AnchorWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorWeighting::Equal => "equal",
            AnchorWeighting::PerFamily => "per-family",
        })
    }
}

/// Per-anchor weights summing to one.
pub fn anchor_weights(anchors: &[AnchoredBags], weighting: AnchorWeighting) -> Vec<f64> {
    match weighting {
        AnchorWeighting::Equal => vec![1.0 / anchors.len().max(1) as f64; anchors.len()],
        AnchorWeighting::PerFamily => {
            let mut counts = BTreeMap::new();
            for a in anchors {
                *counts.entry(a.anchor.kind).or_insert(0usize) += 1;
            }
            let families = counts.len() as f64;
            anchors.iter().map(|a| 1.0 / (families * counts[&a.anchor.kind] as f64)).collect()
        }
    }
}

fn index_pairs(anchors: &[AnchoredBags], sims: &BTreeMap<PairRef, f64>) -> Result<(Vec<BagIndices>, Vec<PairRef>, Vec<f64>)> {
    let keys: Vec<PairRef> = sims.keys().copied().collect();
    let values: Vec<f64> = sims.values().copied().collect();
    let pos_of = |p: &PairRef| {
        keys.binary_search(p)
            .map_err(|_| Error::Contract(format!("no similarity for pair {p:?}")))
    };
    let bags = anchors
        .iter()
        .map(|a| {
            Ok(BagIndices {
                positives: a.positives.iter().map(pos_of).collect::<Result<_>>()?,
                negatives: a.negatives.iter().map(pos_of).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((bags, keys, values))
}

/// Pair-keyed form of [`mil_nce`].
pub fn mil_nce_loss(
    anchors: &[AnchoredBags],
    sims: &BTreeMap<PairRef, f64>,
    tau: f64,
) -> Result<(f64, BTreeMap<PairRef, f64>)> {
    let (bags, keys, values) = index_pairs(anchors, sims)?;
    let (loss, grad) = mil_nce(&bags, &values, tau)?;
    Ok((loss, keys.into_iter().zip(grad).collect()))
}

/// Pair-keyed form of [`infonce`].
pub fn infonce_loss(
    anchors: &[AnchoredBags],
    sims: &BTreeMap<PairRef, f64>,
    tau: f64,
) -> Result<(f64, BTreeMap<PairRef, f64>)> {
    let (bags, keys, values) = index_pairs(anchors, sims)?;
    let (loss, grad) = infonce(&bags, &values, tau)?;
    Ok((loss, keys.into_iter().zip(grad).collect()))
}

/// Gradients of the softmax cross-entropy head.
#[derive(Clone, Debug)]
pub struct ClassificationGrads {
    pub embeddings: Array2<f64>,
    pub classifier: Array2<f64>,
}

/// Mean softmax cross-entropy of `embeddings (n x e) . classifier (e x V)`.
pub fn classification_loss(
    embeddings: &Array2<f64>,
    labels: &[usize],
    classifier: &Array2<f64>,
) -> Result<(f64, ClassificationGrads)> {
    let n = embeddings.nrows();
    if n == 0 || labels.len() != n {
        return Err(Error::Contract("classification needs one label per embedding".into()));
    }
    let v = classifier.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
        return Err(Error::Contract(format!("label {bad} outside {v} classes")));
    }
    let logits = embeddings.dot(classifier);
    let mut d_logits = Array2::<f64>::zeros((n, v));
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        total += m + z.ln() - row[label];
        for (c, &x) in row.iter().enumerate() {
            d_logits[[r, c]] = (x - m).exp() / z / n as f64;
        }
        d_logits[[r, label]] -= 1.0 / n as f64;
    }
    let grads = ClassificationGrads {
        embeddings: d_logits.dot(&classifier.t()),
        classifier: embeddings.t().dot(&d_logits),
    };
    Ok((total / n as f64, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub class_balanced: bool,
    pub dict_vocab: DictVocab,
    pub synonym_policy: SynonymPolicy,
    pub fg_negative_for_background: bool,
    pub seg_back: SegBackMode,
    pub anchor_weighting: AnchorWeighting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::WatchReadLookup,
            tau: 0.07,
            batch_size: 128,
            epochs: 50,
            lr: 0.01,
            lr_decay_epochs: vec![40, 45],
            lr_decay_factor: 10.0,
            momentum: 0.0,
            class_balanced: true,
            dict_vocab: DictVocab::TrainingVocab,
            synonym_policy: SynonymPolicy::KeepAll,
            fg_negative_for_background: true,
            seg_back: SegBackMode::PerWord,
            anchor_weighting: AnchorWeighting::Equal,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if let Some(&d) = self.lr_decay_epochs.iter().find(|&&d| d >= self.epochs) {
            return bad(format!("decay epoch {d} is not below epochs = {}", self.epochs));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| d < epoch).count();
        self.lr / self.lr_decay_factor.powi(decays as i32)
    }

    pub fn bag_options(&self, corpus: &Corpus) -> BagOptions {
        BagOptions {
            synonym_policy: self.synonym_policy,
            fg_negative_for_background: self.fg_negative_for_background,
            seg_back: self.seg_back,
            synonyms: corpus.synonyms().to_vec(),
        }
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            mode: self.mode,
            class_balanced: self.class_balanced,
            dict_vocab: self.dict_vocab,
        }
    }

    /// `key = value` lines, one per field.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let decays: Vec<String> = self.lr_decay_epochs.iter().map(|d| d.to_string()).collect();
        [
            ("mode", self.mode.to_string()),
            ("tau", self.tau.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay_epochs", decays.join(",")),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("momentum", self.momentum.to_string()),
            ("class_balanced", self.class_balanced.to_string()),
            ("dict_vocab", self.dict_vocab.to_string()),
            ("synonym_policy", self.synonym_policy.to_string()),
            ("fg_negative_for_background", self.fg_negative_for_background.to_string()),
            ("seg_back", self.seg_back.to_string()),
            ("anchor_weighting", self.anchor_weighting.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.epoch, self.mean_loss, self.lr)
    }
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for e in log {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Steps whose batch produced no anchor.
    pub skipped_steps: usize,
}

/// Emitted at each learning-rate boundary and after the last epoch.
pub struct Checkpoint<'a> {
    pub epoch: usize,
    pub params: &'a ModelParams,
}

pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutput> {
    train_with(corpus, config, MODEL_DIMS, |_| Ok(()))
}

struct Step {
    loss: f64,
    grads: ModelParams,
    classifier_grad: Option<Array2<f64>>,
}

pub fn train_with(
    corpus: &Corpus,
    config: &TrainConfig,
    dims: [usize; 4],
    mut on_checkpoint: impl FnMut(Checkpoint) -> Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    let pool = training_pool(corpus);
    if pool.is_empty() {
        return Err(Error::Contract("no annotated training sequence".into()));
    }
    let pooled = pooled_dictionary(corpus);
    let mut params = ModelParams::init(dims, &mut rng::stream(config.seed, "init"));
    let mut classifier = (config.mode == LossMode::Classification).then(|| {
        let mut r = rng::stream(config.seed, "classifier");
        let bound = 1.0 / (dims[3] as f64).sqrt();
        Array2::from_shape_fn((dims[3], corpus.vocabulary().len()), |_| r.random_range(-bound..=bound))
    });
    let mut velocity = (config.momentum > 0.0).then(|| ModelParams::zeros(dims));
    let mut classifier_velocity = classifier.as_ref().map(|c| Array2::<f64>::zeros(c.dim()));
    let bag_opts = config.bag_options(corpus);
    let batch_opts = config.batch_options();

    let mut log = Vec::with_capacity(config.epochs);
    let mut step_index = 0u64;
    let mut skipped_steps = 0;
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        let mut epoch_rng = rng::indexed_stream(config.seed, "epoch", epoch as u64);
        let plan = plan_epoch(corpus, &pool, config.batch_size, config.class_balanced, &mut epoch_rng);
        let mut losses = Vec::with_capacity(plan.len());
        for seqs in &plan {
            let mut batch_rng = rng::indexed_stream(config.seed, "batch", step_index);
            let batch = build_batch_from(corpus, seqs, &batch_opts, &mut batch_rng)?;
            let step = match config.mode {
                LossMode::Classification => {
                    classification_step(corpus, &pooled, &params, classifier.as_ref().unwrap(), &batch)?
                }
                _ => {
                    let mut bags = build_bags(&batch, config.mode, &bag_opts).anchors;
                    if config.mode == LossMode::Infonce {
                        let mut r = rng::indexed_stream(config.seed, "infonce", step_index);
                        bags = single_positive_bags(&batch, bags, &mut r);
                    }
                    contrastive_step(corpus, &pooled, &params, &batch, &bags, config)?
                }
            };
            step_index += 1;
            let Some(step) = step else {
                skipped_steps += 1;
                continue;
            };
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step_index as usize - 1,
                    detail: format!("loss = {}, lr = {lr}, batch of {} items", step.loss, batch.items.len()),
                });
            }
            losses.push(step.loss);
            apply_update(&mut params, step.grads, velocity.as_mut(), config.momentum, lr);
            if let (Some(c), Some(g)) = (classifier.as_mut(), step.classifier_grad) {
                let v = classifier_velocity.as_mut().unwrap();
                *v = &*v * config.momentum + &g;
                c.scaled_add(-lr, v);
            }
        }
        if losses.is_empty() {
            return Err(Error::Contract(format!("epoch {epoch} had no trainable batch")));
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log.push(EpochLog { epoch, mean_loss, lr });
        if config.lr_decay_epochs.contains(&epoch) || epoch == config.epochs {
            on_checkpoint(Checkpoint {
                epoch,
                params: &params,
            })?;
        }
    }
    Ok(TrainOutput {
        params,
        log,
        skipped_steps,
    })
}

fn apply_update(params: &mut ModelParams, grads: ModelParams, velocity: Option<&mut ModelParams>, momentum: f64, lr: f64) {
    match velocity {
        Some(v) => {
            v.scale(momentum as f32);
            v.scaled_add(1.0, &grads);
            params.scaled_add(-lr as f32, v);
        }
        None => params.scaled_add(-lr as f32, &grads),
    }
}

/// Reduces Watch-Lookup anchors to one positive: per item one variant of the
/// foreground word is drawn, and dict-fore negatives keep only that variant.
pub fn single_positive_bags<R: rand::Rng + ?Sized>(
    batch: &Minibatch,
    bags: Vec<AnchoredBags>,
    rng: &mut R,
) -> Vec<AnchoredBags> {
    let chosen: Vec<Option<usize>> = batch
        .items
        .iter()
        .map(|it| it.fg_dict.choose(rng).copied())
        .collect();
    bags.into_iter()
        .filter_map(|mut a| {
            let variant = chosen[a.anchor.item]?;
            let word = batch.items[a.anchor.item].fg_word;
            let keep = |p: &PairRef| p.dict.word != word || p.dict.variant == variant;
            a.positives.retain(keep);
            if a.anchor.kind == crate::bags::AnchorKind::DictFore {
                a.negatives.retain(keep);
            }
            (a.positives.len() == 1 && !a.negatives.is_empty()).then_some(a)
        })
        .collect()
}

fn clip_features<'a>(corpus: &'a Corpus, batch: &Minibatch, clip: &ClipRef) -> &'a [f32] {
    let item = &batch.items[clip.item];
    let window = match clip.role {
        ClipRole::Fg => item.fg_window,
        ClipRole::Bg(k) => item.bg_windows[k as usize],
    };
    corpus.continuous()[item.seq].features.row(window)
}

fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f32]>, n: usize, dim: usize) -> Array2<f32> {
    let mut x = Array2::<f32>::zeros((n, dim));
    for (mut dst, src) in x.rows_mut().into_iter().zip(rows) {
        dst.as_slice_mut().unwrap().copy_from_slice(src);
    }
    x
}

fn contrastive_step(
    corpus: &Corpus,
    pooled: &[Vec<Vec<f32>>],
    params: &ModelParams,
    batch: &Minibatch,
    bags: &[AnchoredBags],
    config: &TrainConfig,
) -> Result<Option<Step>> {
    if bags.is_empty() {
        return Ok(None);
    }
    let mut clips = BTreeSet::new();
    let mut dicts = BTreeSet::new();
    for a in bags {
        for p in a.positives.iter().chain(&a.negatives) {
            clips.insert(p.clip);
            dicts.insert(p.dict);
        }
    }
    let clips: Vec<ClipRef> = clips.into_iter().collect();
    let dicts: Vec<DictRef> = dicts.into_iter().collect();
    let (nc, nd) = (clips.len(), dicts.len());

    let rows = clips
        .iter()
        .map(|c| clip_features(corpus, batch, c))
        .chain(dicts.iter().map(|d| pooled[d.word.index()][d.variant].as_slice()));
    let x = stack_rows(rows, nc + nd, params.input_dim());
    let (emb, cache) = params.forward_cached(x);
    let unit = normalize_rows(&emb);
    let uc = unit.unit.slice(s![..nc, ..]);
    let ud = unit.unit.slice(s![nc.., ..]);
    let sims32 = uc.dot(&ud.t());
    let sims: Vec<f64> = sims32.iter().map(|&v| f64::from(v)).collect();

    let index = |p: &PairRef| {
        let ci = clips.binary_search(&p.clip).unwrap();
        let di = dicts.binary_search(&p.dict).unwrap();
        ci * nd + di
    };
    let indices: Vec<BagIndices> = bags
        .iter()
        .map(|a| BagIndices {
            positives: a.positives.iter().map(index).collect(),
            negatives: a.negatives.iter().map(index).collect(),
        })
        .collect();
    if config.mode == LossMode::Infonce {
        check_single_positive(&indices)?;
    }
    let weights = anchor_weights(bags, config.anchor_weighting);
    let (loss, grad) = mil_nce_weighted(&indices, &sims, config.tau, &weights)?;
    let d_sims = Array2::from_shape_vec((nc, nd), grad.into_iter().map(|g| g as f32).collect())
        .expect("similarity grid");
    let mut d_unit = Array2::<f32>::zeros((nc + nd, params.output_dim()));
    d_unit.slice_mut(s![..nc, ..]).assign(&d_sims.dot(&ud));
    d_unit.slice_mut(s![nc.., ..]).assign(&d_sims.t().dot(&uc));
    let d_emb = normalize_rows_backward(&unit, &d_unit);
    let (grads, _) = params.backward(&cache, d_emb.view(), false);
    Ok(Some(Step {
        loss,
        grads,
        classifier_grad: None,
    }))
}

fn classification_step(
    corpus: &Corpus,
    pooled: &[Vec<Vec<f32>>],
    params: &ModelParams,
    classifier: &Array2<f64>,
    batch: &Minibatch,
) -> Result<Option<Step>> {
    let mut rows: Vec<&[f32]> = Vec::new();
    let mut labels = Vec::new();
    for (i, item) in batch.items.iter().enumerate() {
        rows.push(clip_features(corpus, batch, &ClipRef { item: i, role: ClipRole::Fg }));
        labels.push(item.fg_word.index());
    }
    for (word, variant) in batch.dictionary_videos() {
        rows.push(&pooled[word.index()][variant]);
        labels.push(word.index());
    }
    let n = rows.len();
    let x = stack_rows(rows.into_iter(), n, params.input_dim());
    let (emb, cache) = params.forward_cached(x);
    let emb64 = emb.mapv(f64::from);
    let (loss, g) = classification_loss(&emb64, &labels, classifier)?;
    let d_emb = g.embeddings.mapv(|v| v as f32);
    let (grads, _) = params.backward(&cache, d_emb.view(), false);
    Ok(Some(Step {
        loss,
        grads,
        classifier_grad: Some(g.classifier),
    }))
}

/// Similarities and loss for a batch, exposed for diagnostics and gradient
/// checks: returns pair similarities keyed by pair.
pub fn batch_similarities(
    corpus: &Corpus,
    params: &ModelParams,
    batch: &Minibatch,
    bags: &[AnchoredBags],
) -> BTreeMap<PairRef, f64> {
    let pooled = pooled_dictionary(corpus);
    let mut out = BTreeMap::new();
    for a in bags {
        for p in a.positives.iter().chain(&a.negatives) {
            out.entry(*p).or_insert_with(|| {
                let c = params.embed(clip_features(corpus, batch, &p.clip));
                let d = params.embed(&pooled[p.dict.word.index()][p.dict.variant]);
                f64::from(crate::model::cosine(c.as_slice().unwrap(), d.as_slice().unwrap()))
            });
        }
    }
    out
}
