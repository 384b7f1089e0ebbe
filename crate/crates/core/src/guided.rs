//! Image-text similarity models and the similarity loss built on them.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wspace_tensor::{Adam, Bound, Linear, ParamStore, Tensor, Var};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Persist};
use crate::error::{Error, Result};
use crate::features::AttributeClassifier;
use crate::generator::Provenance;
use crate::nets::{flatten_batch, BagDims, BagOfEmbeddings, ConvStack};
use crate::text_align::Vocabulary;
use crate::toyfaces::{parse_text, tokenize, Dataset, Lexicon, Slot, Split};
use crate::util::{derive_seed, epoch_batches};

/// A differentiable image-text consistency score in `[0, 1]`.
pub trait SimilarityModel: Send + Sync {
    /// `"oracle"` or `"learned"`.
    fn kind(&self) -> &'static str;

    /// Scores for a batch `[n, R, R, 3]` against one text, shape `[n]`.
    fn score_var(&self, images: &Var, text: &str) -> Var;

    fn score(&self, image: &Tensor, text: &str) -> f64 {
        let x = Var::constant(Tensor::stack(std::slice::from_ref(image)));
        self.score_var(&x, text).item()
    }
}

/// `1 − S(x, t)`, averaged over the batch.
pub fn clip_loss(images: &Var, text: &str, s: &dyn SimilarityModel) -> Var {
    s.score_var(images, text).mean().rsub_scalar(1.0)
}

/// Default softmax temperature of the oracle score.
pub const ORACLE_TEMPERATURE: f64 = 4.0;

/// Mean classifier probability of each value the text asks for, with logits
/// divided by a temperature. Texts that mention nothing score 1.
pub struct OracleSimilarity {
    classifier: Arc<AttributeClassifier>,
    temperature: f64,
}

impl OracleSimilarity {
    pub fn new(classifier: Arc<AttributeClassifier>) -> Self {
        OracleSimilarity { classifier, temperature: ORACLE_TEMPERATURE }
    }

    pub fn with_temperature(classifier: Arc<AttributeClassifier>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("oracle temperature must be positive, got {temperature}")));
        }
        Ok(OracleSimilarity { classifier, temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl SimilarityModel for OracleSimilarity {
    fn kind(&self) -> &'static str {
        "oracle"
    }

    fn score_var(&self, images: &Var, text: &str) -> Var {
        let n = images.shape()[0];
        let q = parse_text(text);
        if q.is_empty() {
            return Var::constant(Tensor::ones(vec![n]));
        }
        let p = self.classifier.bind(false);
        let out = self.classifier.forward(&p, images);
        let heads: BTreeMap<Slot, usize> = Slot::DISCRETE.iter().enumerate().map(|(h, &s)| (s, h)).collect();
        let mut total: Option<Var> = None;
        for (slot, v) in q.iter() {
            let logits = &out.logits[heads[&slot]];
            let k = logits.shape()[1];
            let mut pick = vec![0.0; k];
            pick[v] = 1.0;
            let prob = logits.mul_scalar(1.0 / self.temperature).softmax().matmul(&Var::constant(Tensor::new(vec![k, 1], pick))).reshape(vec![n]);
            total = Some(match total {
                Some(t) => t.add(&prob),
                None => prob,
            });
        }
        total.expect("non-empty query").mul_scalar(1.0 / q.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualEncoderConfig {
    pub resolution: usize,
    pub widths: Vec<usize>,
    pub embed: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        DualEncoderConfig { resolution: 32, widths: vec![16, 32, 64], embed: 64, hidden: 128, dim: 64 }
    }
}

/// Image tower and text tower into a shared space; the score is the cosine
/// of the two embeddings mapped affinely from `[−1, 1]` to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct LearnedSimilarity {
    config: DualEncoderConfig,
    vocab: Vocabulary,
    lexicon: Lexicon,
    params: ParamStore,
    stack: ConvStack,
    img_fc: Linear,
    text: BagOfEmbeddings,
    pub provenance: Provenance,
}

impl LearnedSimilarity {
    pub fn init(config: &DualEncoderConfig, vocab: Vocabulary, lexicon: Lexicon, seed: u64) -> Result<Self> {
        crate::toyfaces::check_resolution(config.resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stack = ConvStack::new(&mut params, "sim.img", 3, &config.widths, &mut rng);
        let img_fc = Linear::new(&mut params, "sim.img.fc", stack.out_dim(config.resolution), config.dim, &mut rng);
        let dims = BagDims { vocab: 2 * vocab.len(), embed: config.embed, hidden: config.hidden, out: config.dim };
        let text = BagOfEmbeddings::new(&mut params, "sim.text", &dims, &mut rng);
        Ok(LearnedSimilarity {
            config: config.clone(),
            vocab,
            lexicon,
            params,
            stack,
            img_fc,
            text,
            provenance: Provenance { seed, ..Default::default() },
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    fn token_ids(&self, text: &str) -> Vec<usize> {
        let toks = tokenize(text);
        let neg = self.lexicon.negation_scope(&toks);
        let ids: Vec<usize> = toks.iter().zip(neg).map(|(t, n)| 2 * self.vocab.index(t) + usize::from(n)).collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    fn unit_rows(x: &Var) -> Var {
        let n = x.sq_norm_rows().add_scalar(1e-12).sqrt();
        x.div(&n.broadcast_to(x.shape()))
    }

    /// Unit-norm image embeddings `[n, D]`.
    pub fn embed_images(&self, p: &Bound, images: &Var) -> Var {
        Self::unit_rows(&self.img_fc.forward(p, &flatten_batch(&self.stack.forward(p, images))))
    }

    /// Unit-norm text embeddings `[n, D]`.
    pub fn embed_texts(&self, p: &Bound, texts: &[&str]) -> Var {
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| self.token_ids(t)).collect();
        Self::unit_rows(&self.text.forward(p, &ids))
    }

    /// `[n_img, n_text]` cosine matrix.
    pub fn cosine_matrix(&self, images: &Tensor, texts: &[&str]) -> Tensor {
        let p = self.params.bind(false);
        let a = self.embed_images(&p, &Var::constant(images.clone()));
        let b = self.embed_texts(&p, texts);
        a.matmul_t(&b, false, true).value().clone()
    }
}

trait RowNorm {
    fn sq_norm_rows(&self) -> Var;
}

impl RowNorm for Var {
    /// `[n, d]` → `[n, 1]` squared row norms.
    fn sq_norm_rows(&self) -> Var {
        self.square().sum_axis_keep(1)
    }
}

impl SimilarityModel for LearnedSimilarity {
    fn kind(&self) -> &'static str {
        "learned"
    }

    fn score_var(&self, images: &Var, text: &str) -> Var {
        let n = images.shape()[0];
        let p = self.params.bind(false);
        let a = self.embed_images(&p, images);
        let b = self.embed_texts(&p, &[text]);
        let cos = a.matmul_t(&b, false, true).reshape(vec![n]);
        cos.add_scalar(1.0).mul_scalar(0.5)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SimilarityExtra {
    vocabulary: Vocabulary,
    lexicon: Lexicon,
}

impl Persist for LearnedSimilarity {
    const KIND: &'static str = "similarity";

    fn to_checkpoint(&self) -> Checkpoint {
        let extra = SimilarityExtra { vocabulary: self.vocab.clone(), lexicon: self.lexicon.clone() };
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
        let extra: SimilarityExtra = serde_json::from_value(ckpt.meta.extra.clone())?;
        let mut m = LearnedSimilarity::init(&ckpt.config()?, extra.vocabulary, extra.lexicon, ckpt.meta.seed)?;
        ckpt.fill(&mut m.params)?;
        m.provenance =
            Provenance { dataset_hash: ckpt.meta.dataset_hash.clone(), seed: ckpt.meta.seed, metrics: ckpt.meta.metrics.clone() };
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Required held-out top-1 text retrieval over `retrieval_candidates`, if any.
    pub target_retrieval: Option<f64>,
    pub retrieval_candidates: usize,
}

impl Default for SimilarityTrainConfig {
    fn default() -> Self {
        SimilarityTrainConfig {
            epochs: 8,
            batch_size: 64,
            lr: 1e-3,
            temperature: 0.1,
            seed: 0,
            target_retrieval: Some(0.4),
            retrieval_candidates: 128,
        }
    }
}

/// Symmetric cross-entropy over in-batch pairs of a `[n, n]` logit matrix
/// whose diagonal holds the matched pairs.
pub fn contrastive_loss(logits: &Var) -> Var {
    let n = logits.shape()[0];
    let eye = Var::constant(Tensor::new(vec![n, n], (0..n * n).map(|i| f64::from(u8::from(i / n == i % n))).collect()));
    let rows = logits.log_softmax().mul(&eye).sum();
    let cols = logits.transpose().log_softmax().mul(&eye).sum();
    rows.add(&cols).mul_scalar(-0.5 / n as f64)
}

/// Held-out top-1 text retrieval: for each image, is its own description the
/// best-scoring among `candidates` texts (itself plus the next ones).
pub fn retrieval_accuracy(model: &LearnedSimilarity, ds: &Dataset, candidates: usize, seed: u64) -> f64 {
    let mut idx = ds.indices(Split::Test);
    if idx.is_empty() {
        idx = ds.indices(Split::Train);
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in idx.chunks(candidates) {
        if chunk.len() < 2 {
            continue;
        }
        let texts: Vec<&str> = chunk
            .iter()
            .map(|&i| {
                let t = &ds.samples[i].texts;
                t[ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 31)).gen_range(0..t.len())].as_str()
            })
            .collect();
        let m = model.cosine_matrix(&ds.images(chunk), &texts);
        let k = chunk.len();
        for r in 0..k {
            let row = &m.data()[r * k..(r + 1) * k];
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            hits += usize::from(best == r);
            total += 1;
        }
    }
    hits as f64 / total.max(1) as f64
}

/// Contrastive training of the dual encoder on (photo, description) pairs.
pub fn train_learned_similarity(ds: &Dataset, cfg: &SimilarityTrainConfig) -> Result<LearnedSimilarity> {
    let train = ds.indices(Split::Train);
    let lex = Lexicon::default();
    let vocab = Vocabulary::from_texts(&lex, train.iter().flat_map(|&i| &ds.samples[i].texts));
    let dcfg = DualEncoderConfig { resolution: ds.resolution(), ..Default::default() };
    let mut model = LearnedSimilarity::init(&dcfg, vocab, lex, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut acc = 0.0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 32));
        for batch in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            if batch.len() < 2 {
                continue;
            }
            let idx: Vec<usize> = batch.iter().map(|&b| train[b]).collect();
            let texts: Vec<&str> = idx
                .iter()
                .map(|&i| {
                    let t = &ds.samples[i].texts;
                    t[rng.gen_range(0..t.len())].as_str()
                })
                .collect();
            let p = model.params.bind(true);
            let a = model.embed_images(&p, &Var::constant(ds.images(&idx)));
            let b = model.embed_texts(&p, &texts);
            let logits = a.matmul_t(&b, false, true).mul_scalar(1.0 / cfg.temperature);
            let loss = contrastive_loss(&logits);
            if !loss.item().is_finite() {
                return Err(Error::NonFinite { iteration: epoch });
            }
            let grads = p.grads(&loss);
            opt.step(model.params.values_mut(), &grads);
        }
        acc = retrieval_accuracy(&model, ds, cfg.retrieval_candidates, cfg.seed);
        log::info!("similarity epoch {epoch}: heldout top-1 retrieval {acc:.3}");
    }
    model.provenance.dataset_hash = Some(ds.hash());
    model.provenance.metrics.insert("retrieval_top1".into(), acc);
    if let Some(limit) = cfg.target_retrieval {
        if acc < limit {
            return Err(Error::NonConvergence { what: "learned similarity".into(), metric: "top-1 retrieval".into(), value: acc, limit });
        }
    }
    Ok(model)
}

/// What a similarity factory may draw on.
pub struct SimilarityContext {
    pub oracle: Option<Arc<AttributeClassifier>>,
    pub oracle_temperature: f64,
}

impl SimilarityContext {
    pub fn new(oracle: Option<Arc<AttributeClassifier>>) -> Self {
        SimilarityContext { oracle, oracle_temperature: ORACLE_TEMPERATURE }
    }
}

type SimilarityFactory = Box<dyn Fn(&str, &SimilarityContext) -> Result<Arc<dyn SimilarityModel>> + Send + Sync>;

/// Similarity models by name: `"oracle"` or `"learned:<checkpoint path>"`.
pub struct SimilarityRegistry {
    factories: BTreeMap<String, SimilarityFactory>,
}

impl Default for SimilarityRegistry {
    fn default() -> Self {
        let mut r = SimilarityRegistry { factories: BTreeMap::new() };
        r.register("oracle", |_, ctx| {
            let cls = ctx.oracle.clone().ok_or_else(|| Error::MissingModel("oracle classifier".into()))?;
            Ok(Arc::new(OracleSimilarity::with_temperature(cls, ctx.oracle_temperature)?))
        });
        r.register("learned", |arg, _| {
            if arg.is_empty() {
                return Err(Error::Config("learned similarity needs a checkpoint path: learned:<path>".into()));
            }
            Ok(Arc::new(LearnedSimilarity::load(Path::new(arg))?))
        });
        r
    }
}

impl SimilarityRegistry {
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&str, &SimilarityContext) -> Result<Arc<dyn SimilarityModel>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// Resolve `name` or `name:argument`.
    pub fn resolve(&self, spec: &str, ctx: &SimilarityContext) -> Result<Arc<dyn SimilarityModel>> {
        let (name, arg) = spec.split_once(':').unwrap_or((spec, ""));
        let f = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!("unknown similarity model {name:?} (known: {})", self.names().collect::<Vec<_>>().join(", ")))
        })?;
        f(arg, ctx)
    }
}
