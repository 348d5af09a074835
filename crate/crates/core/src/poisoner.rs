//! Gradient matching poisoning and XOR poison masks.
//!
//! The perturbation `P` of a clean image is optimized to minimise
//! `λ1·L_match + λ2·L_class + λ3·L_norm`, where `L_match` is the negated sum of
//! per-layer cosine similarities between the target gradient `g_t` and the
//! poison gradient `g_p`, `L_class` is the cross-entropy of `P` against the
//! target label and `L_norm = Σ_l |g_p^l|²`. After every step `P` is clamped to
//! the ε-ball around the clean image and to `[0, 1]`.
//!
//! Both `L_match` and `L_norm` depend on `P` only through `g_p = ∇_θ L(P)`, so
//! their pixel gradient is `∇_P (v · g_p)` with `v = ∂(λ1 L_match + λ3 L_norm)/∂g_p`
//! held fixed. The classifier computes that mixed derivative exactly with a
//! dual-number pass.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{image_to_tensor, sgd_step_in_place, GradientSet, Model};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::semantics::{BitVector, ImageDatabase, ImageId, ImageRecord, SemanticTag, IMAGE_BITS, IMAGE_BYTES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerTrain {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// SGD steps on clean batches plus the poison after the loop.
    pub final_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    /// L∞ budget in normalized channel units.
    pub epsilon: f64,
    pub lambda_match: f64,
    pub lambda_class: f64,
    pub lambda_norm: f64,
    pub n_iter: usize,
    pub step_size: f64,
    /// Interleave victim training steps (literal pseudocode); `None` keeps
    /// the victim frozen.
    pub inner_train: Option<InnerTrain>,
    pub seed: u64,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        PoisonConfig {
            epsilon: 16.0 / 255.0,
            lambda_match: 1.0,
            lambda_class: 1.0,
            lambda_norm: 0.01,
            n_iter: 500,
            step_size: 0.01,
            inner_train: None,
            seed: 0,
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_match, self.lambda_class, self.lambda_norm];
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if self.n_iter == 0 {
            return Err(Error::InvalidConfig("n_iter must be at least 1".into()));
        }
        if !(self.step_size >= 0.0) {
            return Err(Error::InvalidConfig("step_size must be non-negative".into()));
        }
        if lambdas.iter().any(|&l| !(l >= 0.0)) || lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::InvalidConfig("loss weights must be >= 0 and not all zero".into()));
        }
        Ok(())
    }

    /// Short content hash of the configuration, recorded in caches and reports.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Budget in whole 8-bit levels.
    pub fn epsilon_levels(&self) -> u8 {
        (self.epsilon * 255.0).round().min(255.0) as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub matching: f64,
    pub class: f64,
    pub norm: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonResult {
    pub poisoned: ImageRecord,
    pub poisoned_continuous: Vec<f64>,
    pub loss_trace: Vec<LossTerms>,
    pub success: bool,
}

/// `-Σ_l cos(g_t^l, g_p^l)`; layers where either gradient is zero contribute 0.
pub fn loss_match(g_t: &GradientSet, g_p: &GradientSet) -> f64 {
    -(0..g_t.num_layers())
        .map(|l| {
            let denom = (g_t.layer_norm_sq(l) * g_p.layer_norm_sq(l)).sqrt();
            if denom == 0.0 {
                0.0
            } else {
                g_t.layer_dot(g_p, l) / denom
            }
        })
        .sum::<f64>()
}

/// `∂L_match/∂g_p`, zero on zero-norm layers.
pub fn loss_match_grad(g_t: &GradientSet, g_p: &GradientSet) -> GradientSet {
    let mut out = g_p.clone();
    for l in 0..g_t.num_layers() {
        let nt = g_t.layer_norm_sq(l).sqrt();
        let np2 = g_p.layer_norm_sq(l);
        let np = np2.sqrt();
        let layer = &mut out.layers[l];
        if nt == 0.0 || np == 0.0 {
            layer.weights.iter_mut().for_each(|v| *v = 0.0);
            layer.bias.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let dot = g_t.layer_dot(g_p, l);
        let t = &g_t.layers[l];
        let p = &g_p.layers[l];
        let a = -1.0 / (nt * np);
        let b = dot / (nt * np * np2);
        for ((o, tv), pv) in layer.weights.iter_mut().zip(&t.weights).zip(&p.weights) {
            *o = a * tv + b * pv;
        }
        for ((o, tv), pv) in layer.bias.iter_mut().zip(&t.bias).zip(&p.bias) {
            *o = a * tv + b * pv;
        }
    }
    out
}

/// `Σ_l |g_p^l|²`.
pub fn loss_norm(g_p: &GradientSet) -> f64 {
    (0..g_p.num_layers()).map(|l| g_p.layer_norm_sq(l)).sum()
}

pub fn loss_total(matching: f64, class: f64, norm: f64, cfg: &PoisonConfig) -> f64 {
    cfg.lambda_match * matching + cfg.lambda_class * class + cfg.lambda_norm * norm
}

/// Clamps to `[clean − ε, clean + ε] ∩ [0, 1]` componentwise.
pub fn clip_to_budget(candidate: &[f64], clean: &[f64], epsilon: f64) -> Vec<f64> {
    candidate
        .iter()
        .zip(clean)
        .map(|(&c, &o)| c.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0))
        .collect()
}

/// `round(v·255)` with halves rounded up, clamped to `[0, 255]`.
pub fn quantize(continuous: &[f64], tag: SemanticTag) -> Result<ImageRecord> {
    let pixels = continuous
        .iter()
        .map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    ImageRecord::new(pixels, tag)
}

pub fn dequantize(image: &ImageRecord) -> Vec<f64> {
    image_to_tensor(image)
}

/// Runs the attack against a frozen victim. Returns [`Error::InvalidConfig`]
/// if `cfg.inner_train` is set; use [`gma_poison_with_training`] for that mode.
pub fn gma_poison(model: &Model, original: &ImageRecord, target: SemanticTag, cfg: &PoisonConfig) -> Result<PoisonResult> {
    if cfg.inner_train.is_some() {
        return Err(Error::InvalidConfig("inner_train needs a clean pool; use gma_poison_with_training".into()));
    }
    cfg.validate()?;
    let mut victim = model.clone();
    run_attack(&mut victim, original, target, cfg, None)
}

/// Literal loop with interleaved victim updates on a private model copy.
/// Returns the poison and the updated victim.
pub fn gma_poison_with_training(
    model: &Model,
    original: &ImageRecord,
    target: SemanticTag,
    cfg: &PoisonConfig,
    clean_pool: &[ImageRecord],
) -> Result<(PoisonResult, Model)> {
    cfg.validate()?;
    if clean_pool.is_empty() {
        return Err(Error::InvalidConfig("empty clean pool".into()));
    }
    let mut victim = model.clone();
    let result = run_attack(&mut victim, original, target, cfg, Some(clean_pool))?;
    Ok((result, victim))
}

fn batch_step(model: &mut Model, batch: &[(Vec<f64>, SemanticTag)], lr: f64) -> Result<()> {
    let mut g = GradientSet::zeros_like(model);
    for (x, y) in batch {
        g.add_scaled(&model.loss_and_grads(x, *y).1, 1.0 / batch.len() as f64);
    }
    sgd_step_in_place(model, &g, lr)
}

fn run_attack(
    model: &mut Model,
    original: &ImageRecord,
    target: SemanticTag,
    cfg: &PoisonConfig,
    clean_pool: Option<&[ImageRecord]>,
) -> Result<PoisonResult> {
    let clean = image_to_tensor(original);
    let mut p = clean.clone();
    let mut rng = crate::seed::rng(cfg.seed, &[crate::seed::stream::POISON]);
    let mut g_t = model.loss_and_grads(&clean, target).1;
    let mut trace = Vec::with_capacity(cfg.n_iter);

    for iteration in 0..cfg.n_iter {
        if let (Some(pool), Some(inner)) = (clean_pool, &cfg.inner_train) {
            let batch: Vec<_> = pool
                .choose_multiple(&mut rng, inner.batch_size.max(1))
                .map(|img| (image_to_tensor(img), img.tag))
                .collect();
            batch_step(model, &batch, inner.learning_rate)?;
            g_t = model.loss_and_grads(&clean, target).1;
        }

        let (class, g_p) = model.loss_and_grads(&p, target);
        let matching = loss_match(&g_t, &g_p);
        let norm = loss_norm(&g_p);
        let total = loss_total(matching, class, norm, cfg);
        if !total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        trace.push(LossTerms {
            matching,
            class,
            norm,
            total,
        });

        let mut tangent = loss_match_grad(&g_t, &g_p);
        tangent.scale(cfg.lambda_match);
        tangent.add_scaled(&g_p, 2.0 * cfg.lambda_norm);
        let (d_class, d_grad_terms) = model.input_gradient_with_tangent(&p, target, &tangent);
        let stepped: Vec<f64> = p
            .iter()
            .zip(d_class.iter().zip(&d_grad_terms))
            .map(|(&x, (&dc, &dm))| x - cfg.step_size * (cfg.lambda_class * dc + dm))
            .collect();
        if stepped.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration });
        }
        p = clip_to_budget(&stepped, &clean, cfg.epsilon);
    }

    if let (Some(pool), Some(inner)) = (clean_pool, &cfg.inner_train) {
        for _ in 0..inner.final_steps {
            let mut batch: Vec<_> = pool
                .choose_multiple(&mut rng, inner.batch_size.max(1))
                .map(|img| (image_to_tensor(img), img.tag))
                .collect();
            batch.push((p.clone(), target));
            batch.shuffle(&mut rng);
            batch_step(model, &batch, inner.learning_rate)?;
        }
    }

    let poisoned = quantize(&p, target)?;
    let success = model.classify(&poisoned) == target;
    Ok(PoisonResult {
        poisoned,
        poisoned_continuous: p,
        loss_trace: trace,
        success,
    })
}

/// Bitwise XOR of the two serializations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoisonMask {
    pub bits: BitVector,
}

pub fn compute_mask(original_bits: &BitVector, poisoned_bits: &BitVector) -> Result<PoisonMask> {
    Ok(PoisonMask {
        bits: original_bits.xor(poisoned_bits)?,
    })
}

pub fn apply_mask(bits: &BitVector, mask: &PoisonMask) -> Result<BitVector> {
    bits.xor(&mask.bits)
}

/// One pre-poisoned image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonEntry {
    pub original: ImageId,
    pub target: SemanticTag,
    pub poisoned: ImageRecord,
    pub epsilon: f64,
    pub config_hash: String,
    pub success: bool,
    /// Final `L_total`.
    pub final_loss: f64,
}

/// Offline store of poisoned images, looked up by (original tag, target tag).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonCache {
    pub format: String,
    pub provenance: String,
    pub config: PoisonConfig,
    pub entries: Vec<PoisonEntry>,
}

const CACHE_FORMAT: &str = "deceptive-vis-poison-cache/1";

impl PoisonCache {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache: PoisonCache = serde_json::from_str(&text)?;
        if cache.format != CACHE_FORMAT {
            return Err(Error::Serde(format!("unsupported cache format {}", cache.format)));
        }
        Ok(cache)
    }

    pub fn success_rate(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().filter(|e| e.success).count() as f64 / self.entries.len() as f64
    }

    /// Entries indexed by (original tag, target tag).
    pub fn index(&self) -> BTreeMap<(SemanticTag, SemanticTag), Vec<usize>> {
        let mut map: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            map.entry((e.original.tag, e.target)).or_default().push(i);
        }
        map
    }
}

/// `per_pair` distinct originals for every ordered (source, target) tag pair
/// with source ≠ target, drawn without replacement from each source bucket.
pub fn plan_pairs(db: &ImageDatabase, per_pair: usize, seed: u64) -> Vec<(ImageId, SemanticTag)> {
    let mut plan = Vec::new();
    for source in SemanticTag::ALL {
        let n = db.bucket(source).len();
        let mut rng = crate::seed::rng(seed, &[crate::seed::label("plan"), source.index() as u64]);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut it = idx.into_iter().cycle();
        for target in SemanticTag::ALL {
            if target == source {
                continue;
            }
            for _ in 0..per_pair.min(n.max(1)) {
                if let Some(index) = it.next() {
                    plan.push((ImageId { tag: source, index }, target));
                }
            }
        }
    }
    plan
}

/// Poisons every planned pair (in parallel) against a frozen victim.
pub fn build_poison_cache(
    model: &Model,
    db: &ImageDatabase,
    plan: &[(ImageId, SemanticTag)],
    cfg: &PoisonConfig,
    exec: Execution,
) -> Result<PoisonCache> {
    cfg.validate()?;
    let hash = cfg.hash();
    let entries = exec.map_slice(plan, |&(id, target)| -> Result<PoisonEntry> {
        let original = db
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown image {id:?}")))?;
        let r = gma_poison(model, original, target, cfg)?;
        Ok(PoisonEntry {
            original: id,
            target,
            final_loss: r.loss_trace.last().map_or(f64::NAN, |t| t.total),
            poisoned: r.poisoned,
            epsilon: cfg.epsilon,
            config_hash: hash.clone(),
            success: r.success,
        })
    });
    Ok(PoisonCache {
        format: CACHE_FORMAT.into(),
        provenance: db.provenance().to_string(),
        config: cfg.clone(),
        entries: entries.into_iter().collect::<Result<_>>()?,
    })
}

/// Sanity bound used by tests and callers: every poisoned channel within the
/// budget of the original.
pub fn within_budget(original: &ImageRecord, poisoned: &ImageRecord, cfg: &PoisonConfig) -> bool {
    original.max_abs_diff(poisoned) <= cfg.epsilon_levels()
}

const _: () = assert!(IMAGE_BITS == IMAGE_BYTES * 8);
