//! Text encoder into W, the code-alignment objective and the ranking loss.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wspace_tensor::{Adam, Bound, ParamStore, Tensor, Var};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Persist};
use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::eval::attribute_accuracy;
use crate::features::AttributeClassifier;
use crate::generator::{GeneratorModel, Provenance};
use crate::latent::{unstack_codes, WCode};
use crate::nets::{BagDims, BagOfEmbeddings};
use crate::toyfaces::{tokenize, Dataset, Lexicon, Split};
use crate::util::{derive_seed, epoch_batches};

pub const UNK: &str = "<unk>";

/// Closed word list; index 0 is the unknown-word entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = words.into_iter().filter(|w| w != UNK).collect();
        Vocabulary { words: std::iter::once(UNK.to_string()).chain(set).collect() }
    }

    /// Lexicon words plus every token of the given texts.
    pub fn from_texts<'a>(lex: &Lexicon, texts: impl IntoIterator<Item = &'a String>) -> Self {
        let mut words = lex.vocabulary();
        for t in texts {
            words.extend(tokenize(t));
        }
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index(&self, word: &str) -> usize {
        self.words[1..].binary_search_by(|w| w.as_str().cmp(word)).map_or(0, |i| i + 1)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub channels: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig { layers: 8, channels: 32, embed: 64, hidden: 256 }
    }
}

/// Bag of token embeddings with an MLP head to `L×C`. Each token id carries
/// a flag for whether a negation word governs it, so "no glasses" and
/// "glasses" pool to different codes.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    vocab: Vocabulary,
    lexicon: Lexicon,
    params: ParamStore,
    bag: BagOfEmbeddings,
    pub provenance: Provenance,
    /// Fingerprint of the frozen image encoder the codes were aligned to.
    pub image_encoder_hash: Option<String>,
}

impl TextEncoder {
    pub fn init(config: &TextEncoderConfig, vocab: Vocabulary, lexicon: Lexicon, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = BagDims { vocab: 2 * vocab.len(), embed: config.embed, hidden: config.hidden, out: config.layers * config.channels };
        let bag = BagOfEmbeddings::new(&mut params, "text", &dims, &mut rng);
        TextEncoder {
            config: config.clone(),
            vocab,
            lexicon,
            params,
            bag,
            provenance: Provenance { seed, ..Default::default() },
            image_encoder_hash: None,
        }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        self.params.bind(trainable)
    }

    /// Token ids with negation flags; an empty text becomes a single unknown token.
    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        let toks = tokenize(text);
        let neg = self.lexicon.negation_scope(&toks);
        let ids: Vec<usize> = toks.iter().zip(neg).map(|(t, n)| 2 * self.vocab.index(t) + usize::from(n)).collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    /// `[n, L, C]` codes for pre-tokenized texts.
    pub fn forward(&self, p: &Bound, ids: &[Vec<usize>]) -> Var {
        self.bag.forward(p, ids).reshape(vec![ids.len(), self.config.layers, self.config.channels])
    }

    pub fn encode_batch(&self, texts: &[String]) -> Vec<WCode> {
        if texts.is_empty() {
            return Vec::new();
        }
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| self.token_ids(t)).collect();
        unstack_codes(self.forward(&self.bind(false), &ids).value())
    }

    pub fn encode_text(&self, text: &str) -> WCode {
        self.encode_batch(&[text.to_string()]).remove(0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TextExtra {
    vocabulary: Vocabulary,
    lexicon: Lexicon,
    image_encoder_hash: Option<String>,
}

impl Persist for TextEncoder {
    const KIND: &'static str = "text_encoder";

    fn to_checkpoint(&self) -> Checkpoint {
        let extra = TextExtra {
            vocabulary: self.vocab.clone(),
            lexicon: self.lexicon.clone(),
            image_encoder_hash: self.image_encoder_hash.clone(),
        };
        let meta = CheckpointMeta {
            config: serde_json::to_value(&self.config).expect("config serializes"),
            dataset_hash: self.provenance.dataset_hash.clone(),
            seed: self.provenance.seed,
            metrics: self.provenance.metrics.clone(),
            extra: serde_json::to_value(extra).expect("extra serializes"),
            ..Default::default()
        };
        Checkpoint::new(Self::KIND, meta, &self.params)
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(Self::KIND)?;
        let extra: TextExtra = serde_json::from_value(ckpt.meta.extra.clone())?;
        let mut m = TextEncoder::init(&ckpt.config()?, extra.vocabulary, extra.lexicon, ckpt.meta.seed);
        ckpt.fill(&mut m.params)?;
        m.provenance =
            Provenance { dataset_hash: ckpt.meta.dataset_hash.clone(), seed: ckpt.meta.seed, metrics: ckpt.meta.metrics.clone() };
        m.image_encoder_hash = extra.image_encoder_hash;
        Ok(m)
    }
}

fn layer_weights(p: &[f64], layers: usize) -> Result<Var> {
    if p.len() != layers {
        return Err(Error::shape([layers], [p.len()]));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("layer weights must be finite".into()));
    }
    Ok(Var::constant(Tensor::new(vec![1, layers, 1], p.to_vec())))
}

/// `‖Σᵢ pᵢ(w_v,i − w_l,i)‖²` for `[n, L, C]` batches, averaged over the batch.
/// The layer sum sits inside the norm, so differences on different layers
/// can cancel. With `per_layer_norms` it is `Σᵢ ‖pᵢ(w_v,i − w_l,i)‖²` instead.
pub fn vl_similarity_loss(w_v: &Var, w_l: &Var, p: &[f64], per_layer_norms: bool) -> Result<Var> {
    if w_v.shape() != w_l.shape() || w_v.shape().len() != 3 {
        return Err(Error::shape(format!("{:?}", w_v.shape()), w_l.shape()));
    }
    let (n, layers, c) = (w_v.shape()[0], w_v.shape()[1], w_v.shape()[2]);
    let weighted = w_v.sub(w_l).mul(&layer_weights(p, layers)?.broadcast_to(&[n, layers, c]));
    let inner = if per_layer_norms { weighted } else { weighted.sum_axis(1) };
    Ok(inner.square().sum().mul_scalar(1.0 / n as f64))
}

/// [`vl_similarity_loss`] for a single pair of codes.
pub fn vl_similarity(w_v: &WCode, w_l: &WCode, p: &[f64], per_layer_norms: bool) -> Result<f64> {
    let v = Var::constant(w_v.tensor().reshape(vec![1, w_v.num_layers(), w_v.channels()]));
    let l = Var::constant(w_l.tensor().reshape(vec![1, w_l.num_layers(), w_l.channels()]));
    Ok(vl_similarity_loss(&v, &l, p, per_layer_norms)?.item())
}

/// Row-wise cosine similarity of two `[n, ...]` batches, flattened per row.
pub fn cosine_rows(a: &Var, b: &Var) -> Var {
    let n = a.shape()[0];
    let (a, b) = (a.reshape(vec![n, a.value().numel() / n]), b.reshape(vec![n, b.value().numel() / n]));
    let dot = a.mul(&b).sum_axis(1);
    let na = a.square().sum_axis(1);
    let nb = b.square().sum_axis(1);
    dot.div(&na.mul(&nb).add_scalar(1e-24).sqrt())
}

/// Hinge over every (matched, mismatched) pair of rows:
/// mean of `max(0, margin − cos(m) + cos(n))`.
pub fn ranking_loss(w_v: &Var, w_l: &Var, matched: &[bool], margin: f64) -> Result<Var> {
    if w_v.shape() != w_l.shape() || w_v.shape()[0] != matched.len() {
        return Err(Error::shape(format!("{:?} with {} flags", w_v.shape(), matched.len()), w_l.shape()));
    }
    if margin < 0.0 {
        return Err(Error::InvalidArgument("margin must be non-negative".into()));
    }
    let pos: Vec<usize> = (0..matched.len()).filter(|&i| matched[i]).collect();
    let neg: Vec<usize> = (0..matched.len()).filter(|&i| !matched[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("ranking needs matched and mismatched pairs".into()));
    }
    let cos = cosine_rows(w_v, w_l).reshape(vec![matched.len(), 1]);
    let (a, b) = (pos.len(), neg.len());
    let cm = cos.index_select(&pos).broadcast_to(&[a, b]);
    let cn = cos.index_select(&neg).reshape(vec![1, b]).broadcast_to(&[a, b]);
    Ok(cn.sub(&cm).add_scalar(margin).relu().mean())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Per-layer weights; `None` means all ones.
    pub p: Option<Vec<f64>>,
    pub margin: f64,
    /// Sum squared norms per layer instead of the norm of the layer sum.
    pub per_layer_norms: bool,
    pub ranking_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Required held-out accuracy on mentioned attributes, if any.
    pub target_accuracy: Option<f64>,
    pub eval_samples: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            p: None,
            margin: 0.2,
            per_layer_norms: false,
            ranking_weight: 3.0,
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            target_accuracy: Some(0.8),
            eval_samples: 500,
        }
    }
}

impl AlignmentConfig {
    pub fn weights(&self, layers: usize) -> Vec<f64> {
        self.p.clone().unwrap_or_else(|| vec![1.0; layers])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextEpochLog {
    pub epoch: usize,
    pub similarity: f64,
    pub ranking: f64,
    pub heldout_accuracy: f64,
}

/// One description per held-out sample, chosen by seed.
pub fn heldout_descriptions(ds: &Dataset, n: usize, seed: u64) -> Vec<(usize, String)> {
    let mut idx = ds.indices(Split::Test);
    if idx.is_empty() {
        idx = ds.indices(Split::Train);
    }
    idx.into_iter()
        .take(n)
        .map(|i| {
            let texts = &ds.samples[i].texts;
            let j = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 21)).gen_range(0..texts.len());
            (i, texts[j].clone())
        })
        .collect()
}

/// Mentioned-attribute accuracy of `G(E_l(t))` over the given texts.
pub fn text_decode_accuracy(te: &TextEncoder, g: &GeneratorModel, oracle: &AttributeClassifier, texts: &[String]) -> Result<f64> {
    let images = g.synthesize_batch(&te.encode_batch(texts))?;
    attribute_accuracy(&images, texts, oracle)
}

/// Fit the text encoder to the frozen image encoder's codes of the paired
/// photos with the alignment objective plus the ranking loss.
pub fn train_text_encoder(
    ds: &Dataset,
    image_encoder: &ImageEncoder,
    g: &GeneratorModel,
    oracle: &AttributeClassifier,
    cfg: &AlignmentConfig,
) -> Result<(TextEncoder, Vec<TextEpochLog>)> {
    let (layers, channels) = (g.layers(), g.channels());
    let p = cfg.weights(layers);
    layer_weights(&p, layers)?;
    let enc_hash = image_encoder.fingerprint();
    let train = ds.indices(Split::Train);
    let targets = image_encoder.encode_batch(&ds.images(&train))?;
    let lex = Lexicon::default();
    let vocab = Vocabulary::from_texts(&lex, train.iter().flat_map(|&i| &ds.samples[i].texts));
    let tcfg = TextEncoderConfig { layers, channels, ..Default::default() };
    let mut te = TextEncoder::init(&tcfg, vocab, lex, cfg.seed);
    let held: Vec<String> = heldout_descriptions(ds, cfg.eval_samples, cfg.seed).into_iter().map(|(_, t)| t).collect();
    let mut opt = Adam::new(cfg.lr);
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut log = TextEpochLog { epoch, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 22));
        for batch in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let b = batch.len();
            let ids: Vec<Vec<usize>> = batch
                .iter()
                .map(|&k| {
                    let texts = &ds.samples[train[k]].texts;
                    te.token_ids(&texts[rng.gen_range(0..texts.len())])
                })
                .collect();
            let codes: Vec<WCode> = batch.iter().map(|&k| targets[k].clone()).collect();
            let w_v = Var::constant(crate::latent::stack_codes(&codes));
            let pb = te.bind(true);
            let w_l = te.forward(&pb, &ids);
            let sim = vl_similarity_loss(&w_v, &w_l, &p, cfg.per_layer_norms)?;
            let mut loss = sim.clone();
            if b >= 2 && cfg.ranking_weight > 0.0 {
                let next: Vec<usize> = (0..b).map(|i| (i + 1) % b).collect();
                let v = Var::concat(&[w_v.clone(), w_v.clone(), w_v.index_select(&next)], 0);
                let l = Var::concat(&[w_l.clone(), w_l.index_select(&next), w_l.clone()], 0);
                let flags: Vec<bool> = (0..3 * b).map(|i| i < b).collect();
                let rank = ranking_loss(&v, &l, &flags, cfg.margin)?;
                log.ranking += rank.item() * b as f64 / train.len() as f64;
                loss = loss.add(&rank.mul_scalar(cfg.ranking_weight));
            }
            if !loss.item().is_finite() {
                return Err(Error::NonFinite { iteration: epoch });
            }
            log.similarity += sim.item() * b as f64 / train.len() as f64;
            let grads = pb.grads(&loss);
            opt.step(te.params.values_mut(), &grads);
        }
        log.heldout_accuracy = text_decode_accuracy(&te, g, oracle, &held)?;
        log::info!(
            "text encoder epoch {epoch}: similarity {:.4} ranking {:.4} heldout accuracy {:.3}",
            log.similarity,
            log.ranking,
            log.heldout_accuracy
        );
        logs.push(log);
    }
    if image_encoder.fingerprint() != enc_hash {
        return Err(Error::FrozenModelChanged("image encoder".into()));
    }
    let acc = logs.last().map_or(0.0, |l| l.heldout_accuracy);
    te.provenance.dataset_hash = Some(ds.hash());
    te.provenance.metrics.insert("heldout_accuracy".into(), acc);
    te.image_encoder_hash = Some(enc_hash);
    if let Some(limit) = cfg.target_accuracy {
        if acc < limit {
            return Err(Error::NonConvergence {
                what: "text encoder".into(),
                metric: "heldout mentioned-attribute accuracy".into(),
                value: acc,
                limit,
            });
        }
    }
    Ok((te, logs))
}
