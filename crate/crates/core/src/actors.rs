//! Alice's transmission schemes and the three receivers.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Model;
use crate::error::{Error, Result};
use crate::harness::SceneConfig;
use crate::phy::{
    bpsk_modulate, direct_receive, draw_channel, scramble, sic_receive, superpose, transmit, transmit_single,
    LinkBudget, ReceivedFrame, Scrambler, TxFrame,
};
use crate::poisoner::{apply_mask, compute_mask, gma_poison, PoisonCache, PoisonConfig, PoisonMask};
use crate::seed::stream;
use crate::semantics::{
    bits_to_image, choose_falsified, encode_visual, image_to_bits, BitVector, ImageDatabase, ImageRecord,
    MappingTable, Message, SemanticTag,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Venena,
    NveFullPower,
    NveFixedPower,
    NvePlsBaseline,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::Venena,
        SchemeKind::NveFullPower,
        SchemeKind::NveFixedPower,
        SchemeKind::NvePlsBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Venena => "venena",
            SchemeKind::NveFullPower => "nve-full-power",
            SchemeKind::NveFixedPower => "nve-fixed-power",
            SchemeKind::NvePlsBaseline => "nve-pls-baseline",
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub kind: SchemeKind,
    pub alpha: f64,
    /// Total power in watts; `None` uses the scene's budget.
    pub power_override: Option<f64>,
}

impl Scheme {
    pub fn venena(alpha: f64) -> Result<Self> {
        let s = Scheme {
            kind: SchemeKind::Venena,
            alpha,
            power_override: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn nve_full_power() -> Self {
        Scheme {
            kind: SchemeKind::NveFullPower,
            alpha: 1.0,
            power_override: None,
        }
    }

    pub fn nve_fixed_power(watts: f64) -> Result<Self> {
        let s = Scheme {
            kind: SchemeKind::NveFixedPower,
            alpha: 1.0,
            power_override: Some(watts),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn nve_pls_baseline(watts: f64) -> Result<Self> {
        let s = Scheme {
            kind: SchemeKind::NvePlsBaseline,
            alpha: 1.0,
            power_override: Some(watts),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn is_deceptive(&self) -> bool {
        self.kind == SchemeKind::Venena
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.power_override {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidConfig(format!("power override {p} must be positive")));
            }
        }
        match self.kind {
            SchemeKind::Venena if !(self.alpha > 0.0 && self.alpha < 1.0) => Err(Error::DegenerateAlpha),
            SchemeKind::Venena => Ok(()),
            _ if self.alpha != 1.0 => Err(Error::InvalidConfig(format!("{} requires alpha = 1", self.kind))),
            _ => Ok(()),
        }
    }

    /// Link budget this scheme transmits with in `scene`.
    pub fn budget(&self, scene: &SceneConfig) -> Result<LinkBudget> {
        self.validate()?;
        scene.budget(self.alpha, self.power_override.unwrap_or(scene.total_power))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnowledgeLevel {
    /// Knows everything Bob knows, including the superposition layout.
    Full,
    /// Knows the visual code and mapping table only.
    Partial,
}

/// Where Alice gets poisoned images from.
#[derive(Debug, Clone)]
pub enum PoisonSource {
    Cache {
        cache: PoisonCache,
        /// (original tag, target tag) → usable entries, successful ones only
        /// when any exist.
        index: BTreeMap<(SemanticTag, SemanticTag), Vec<usize>>,
    },
    Online(PoisonConfig),
}

/// Read-only state shared by all trials.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub db: ImageDatabase,
    pub table: MappingTable,
    pub model: Model,
    pub poison: PoisonSource,
}

impl Pipeline {
    pub fn with_cache(db: ImageDatabase, table: MappingTable, model: Model, cache: PoisonCache) -> Result<Self> {
        if cache.provenance != db.provenance() {
            return Err(Error::InvalidConfig(format!(
                "poison cache built for {:?}, database is {:?}",
                cache.provenance,
                db.provenance()
            )));
        }
        let mut index: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (i, e) in cache.entries.iter().enumerate() {
            if db.get(e.original).is_none() {
                return Err(Error::InvalidConfig(format!("cache entry {i} references a missing image")));
            }
            index.entry((e.original.tag, e.target)).or_default().push(i);
        }
        for ids in index.values_mut() {
            if ids.iter().any(|&i| cache.entries[i].success) {
                ids.retain(|&i| cache.entries[i].success);
            }
        }
        Ok(Pipeline {
            db,
            table,
            model,
            poison: PoisonSource::Cache { cache, index },
        })
    }

    pub fn online(db: ImageDatabase, table: MappingTable, model: Model, cfg: PoisonConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            db,
            table,
            model,
            poison: PoisonSource::Online(cfg),
        })
    }

    fn classify_message(&self, image: &ImageRecord) -> Message {
        self.table.tag_to_message(self.model.classify(image))
    }
}

/// Everything Alice put on the air for one message.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub frame: TxFrame,
    pub budget: LinkBudget,
    pub true_message: Message,
    pub falsified_message: Option<Message>,
    /// Image carried by the strong stream.
    pub original: ImageRecord,
    pub poisoned: Option<ImageRecord>,
    pub mask: Option<PoisonMask>,
    pub poison_success: Option<bool>,
    pub poisoning_time: Duration,
}

pub fn alice_transmit<R: Rng + ?Sized>(
    m: Message,
    scheme: &Scheme,
    scene: &SceneConfig,
    ctx: &Pipeline,
    rng: &mut R,
) -> Result<Transmission> {
    let budget = scheme.budget(scene)?;
    if !scheme.is_deceptive() {
        let (_, image) = encode_visual(m, &ctx.db, &ctx.table, rng)?;
        let bits = scramble(&image_to_bits(image), Scrambler::Strong);
        let frame = transmit_single(&bpsk_modulate(&bits), &budget);
        return Ok(Transmission {
            frame,
            budget,
            true_message: m,
            falsified_message: None,
            original: image.clone(),
            poisoned: None,
            mask: None,
            poison_success: None,
            poisoning_time: Duration::ZERO,
        });
    }

    let falsified = choose_falsified(m, rng);
    let source = ctx.table.message_to_tag(falsified);
    let target = ctx.table.message_to_tag(m);
    let started = Instant::now();
    let (original, poisoned, success) = match &ctx.poison {
        PoisonSource::Cache { cache, index } => {
            let ids = index
                .get(&(source, target))
                .filter(|ids| !ids.is_empty())
                .ok_or_else(|| Error::InvalidConfig(format!("no cached poison for {source} -> {target}")))?;
            let entry = &cache.entries[*ids.choose(rng).expect("non-empty")];
            let original = ctx.db.get(entry.original).expect("checked on construction").clone();
            (original, entry.poisoned.clone(), entry.success)
        }
        PoisonSource::Online(cfg) => {
            let (_, original) = encode_visual(falsified, &ctx.db, &ctx.table, rng)?;
            let r = gma_poison(&ctx.model, original, target, cfg)?;
            (original.clone(), r.poisoned, r.success)
        }
    };
    let poisoning_time = started.elapsed();

    let original_bits = image_to_bits(&original);
    let mask = compute_mask(&original_bits, &image_to_bits(&poisoned))?;
    let frame = superpose(
        &bpsk_modulate(&scramble(&original_bits, Scrambler::Strong)),
        &bpsk_modulate(&scramble(&mask.bits, Scrambler::Weak)),
        &budget,
    )?;
    Ok(Transmission {
        frame,
        budget,
        true_message: m,
        falsified_message: Some(falsified),
        original,
        poisoned: Some(poisoned),
        mask: Some(mask),
        poison_success: Some(success),
        poisoning_time,
    })
}

/// Image recovered by a receiver, plus the decoded mask when one was sought.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: ImageRecord,
    pub mask: Option<BitVector>,
}

/// Receiver front end. A receiver aware of the superposition (Bob, or Eve with
/// full knowledge) runs SIC and applies the decoded mask; anyone else takes
/// hard decisions on the whole frame.
pub fn reconstruct(y: &ReceivedFrame, scheme: &Scheme, budget: &LinkBudget, level: KnowledgeLevel) -> Result<Reconstruction> {
    // The tag field is a placeholder: a receiver only learns the tag by
    // classifying.
    let placeholder = SemanticTag::Airplane;
    if scheme.is_deceptive() && level == KnowledgeLevel::Full {
        let (strong, weak) = sic_receive(y, budget)?;
        let (strong, weak) = (scramble(&strong, Scrambler::Strong), scramble(&weak, Scrambler::Weak));
        let bits = apply_mask(&strong, &PoisonMask { bits: weak.clone() })?;
        return Ok(Reconstruction {
            image: bits_to_image(&bits, placeholder)?,
            mask: Some(weak),
        });
    }
    Ok(Reconstruction {
        image: bits_to_image(&scramble(&direct_receive(y), Scrambler::Strong), placeholder)?,
        mask: None,
    })
}

fn perceive(y: &ReceivedFrame, scheme: &Scheme, budget: &LinkBudget, level: KnowledgeLevel, ctx: &Pipeline) -> Result<Message> {
    Ok(ctx.classify_message(&reconstruct(y, scheme, budget, level)?.image))
}

pub fn bob_perceive(y: &ReceivedFrame, scheme: &Scheme, budget: &LinkBudget, ctx: &Pipeline) -> Result<Message> {
    perceive(y, scheme, budget, KnowledgeLevel::Full, ctx)
}

pub fn eve_perceive(
    y: &ReceivedFrame,
    level: KnowledgeLevel,
    scheme: &Scheme,
    budget: &LinkBudget,
    ctx: &Pipeline,
) -> Result<Message> {
    perceive(y, scheme, budget, level, ctx)
}

/// Addresses the random streams of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSeed {
    pub master: u64,
    pub trial: u64,
}

impl TrialSeed {
    fn rng(&self, purpose: u64) -> crate::seed::Rng {
        crate::seed::rng(self.master, &[purpose, self.trial])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub true_message: Message,
    /// `None` for schemes without deception content.
    pub falsified_message: Option<Message>,
    pub perceived_bob: Message,
    pub perceived_eve_full: Message,
    pub perceived_eve_partial: Message,
    pub bob_gain: f64,
    pub eve_gain: f64,
    pub poison_success: Option<bool>,
    /// Bit errors in the decoded mask.
    pub bob_mask_errors: Option<usize>,
    pub eve_mask_errors: Option<usize>,
}

/// Wall time spent per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub poisoning: Duration,
    pub phy: Duration,
    pub classification: Duration,
}

impl std::ops::AddAssign for StageTimes {
    fn add_assign(&mut self, o: Self) {
        self.poisoning += o.poisoning;
        self.phy += o.phy;
        self.classification += o.classification;
    }
}

pub fn run_trial(m: Option<Message>, scheme: &Scheme, scene: &SceneConfig, ctx: &Pipeline, seed: TrialSeed) -> Result<TrialRecord> {
    run_trial_timed(m, scheme, scene, ctx, seed).map(|(r, _)| r)
}

/// One transmission observed by Bob and by Eve over independently drawn
/// channels. Every stream is keyed by `seed` alone, so trials that share a
/// seed across schemes or mixing ratios see the same message, fading and
/// noise.
pub fn run_trial_timed(
    m: Option<Message>,
    scheme: &Scheme,
    scene: &SceneConfig,
    ctx: &Pipeline,
    seed: TrialSeed,
) -> Result<(TrialRecord, StageTimes)> {
    let m = match m {
        Some(m) => m,
        None => Message::random(&mut seed.rng(stream::MESSAGE)),
    };
    let tx = alice_transmit(m, scheme, scene, ctx, &mut seed.rng(stream::IMAGE))?;

    let phy_start = Instant::now();
    let n = tx.frame.len();
    let h_bob = draw_channel(&scene.bob_channel(), n, &mut seed.rng(stream::CHANNEL_BOB));
    let h_eve = draw_channel(&scene.eve_channel(), n, &mut seed.rng(stream::CHANNEL_EVE));
    let y_bob = transmit(&tx.frame, &h_bob, &tx.budget, &mut seed.rng(stream::NOISE_BOB));
    let y_eve = transmit(&tx.frame, &h_eve, &tx.budget, &mut seed.rng(stream::NOISE_EVE));
    let bob = reconstruct(&y_bob, scheme, &tx.budget, KnowledgeLevel::Full)?;
    let eve_full = reconstruct(&y_eve, scheme, &tx.budget, KnowledgeLevel::Full)?;
    let eve_partial = reconstruct(&y_eve, scheme, &tx.budget, KnowledgeLevel::Partial)?;
    let phy = phy_start.elapsed();

    let cls_start = Instant::now();
    let perceived_bob = ctx.classify_message(&bob.image);
    let perceived_eve_full = ctx.classify_message(&eve_full.image);
    let perceived_eve_partial = ctx.classify_message(&eve_partial.image);
    let classification = cls_start.elapsed();

    let mask_errors = |r: &Reconstruction| match (&r.mask, &tx.mask) {
        (Some(decoded), Some(sent)) => Some(decoded.hamming(&sent.bits)),
        _ => None,
    };
    let record = TrialRecord {
        trial: seed.trial,
        true_message: m,
        falsified_message: tx.falsified_message,
        perceived_bob,
        perceived_eve_full,
        perceived_eve_partial,
        bob_gain: h_bob.power_gain(),
        eve_gain: h_eve.power_gain(),
        poison_success: tx.poison_success,
        bob_mask_errors: mask_errors(&bob),
        eve_mask_errors: mask_errors(&eve_full),
    };
    let times = StageTimes {
        poisoning: tx.poisoning_time,
        phy,
        classification,
    };
    Ok((record, times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{desk_architecture, init_model};
    use crate::phy::Fading;
    use crate::poisoner::{build_poison_cache, plan_pairs};
    use crate::semantics::generate_synthetic_dataset;

    fn noiseless_scene() -> SceneConfig {
        SceneConfig {
            label: "noiseless".into(),
            noise_psd_dbw_per_hz: f64::NEG_INFINITY,
            fading: Fading::Static,
            bob_mean_gain_db: 0.0,
            eve_mean_gain_db: 0.0,
            ..SceneConfig::preset(1).unwrap()
        }
    }

    fn cached_pipeline() -> Pipeline {
        let db = generate_synthetic_dataset(2, 7).unwrap();
        let model = init_model(&desk_architecture(), 1).unwrap();
        let cfg = PoisonConfig {
            n_iter: 2,
            ..PoisonConfig::default()
        };
        let plan = plan_pairs(&db, 1, 3);
        let cache = build_poison_cache(&model, &db, &plan, &cfg, crate::exec::Execution::Parallel).unwrap();
        Pipeline::with_cache(db, MappingTable::standard(), model, cache).unwrap()
    }

    fn m(v: u8) -> Message {
        Message::new(v).unwrap()
    }

    #[test]
    fn scheme_invariants() {
        assert!(Scheme::venena(0.75).is_ok());
        assert!(matches!(Scheme::venena(1.0), Err(Error::DegenerateAlpha)));
        assert!(matches!(Scheme::venena(0.0), Err(Error::DegenerateAlpha)));
        assert_eq!(Scheme::nve_full_power().alpha, 1.0);
        assert!(Scheme::nve_fixed_power(0.0).is_err());
        let bad = Scheme {
            alpha: 0.5,
            ..Scheme::nve_full_power()
        };
        assert!(bad.validate().is_err());
        let scene = SceneConfig::preset(1).unwrap();
        let b = Scheme::nve_fixed_power(0.075).unwrap().budget(&scene).unwrap();
        assert_eq!((b.total_power, b.alpha), (0.075, 1.0));
        assert_eq!(Scheme::nve_full_power().budget(&scene).unwrap().total_power, 0.1);
    }

    #[test]
    fn venena_transmission_is_mask_consistent() {
        let ctx = cached_pipeline();
        let scene = SceneConfig::preset(1).unwrap();
        let mut rng = crate::seed::rng(1, &[]);
        let tx = alice_transmit(m(2), &Scheme::venena(0.75).unwrap(), &scene, &ctx, &mut rng).unwrap();
        let falsified = tx.falsified_message.unwrap();
        assert_ne!(falsified, m(2));
        assert_eq!(tx.original.tag, ctx.table.message_to_tag(falsified));
        let poisoned = tx.poisoned.as_ref().unwrap();
        assert_eq!(poisoned.tag, SemanticTag::Bird);
        let rebuilt = apply_mask(&image_to_bits(&tx.original), tx.mask.as_ref().unwrap()).unwrap();
        assert_eq!(rebuilt, image_to_bits(poisoned));
        assert_eq!(tx.frame.len(), crate::semantics::IMAGE_BITS);
    }

    #[test]
    fn nve_sends_the_true_tag_alone() {
        let ctx = cached_pipeline();
        let scene = SceneConfig::preset(1).unwrap();
        let mut rng = crate::seed::rng(2, &[]);
        let tx = alice_transmit(m(2), &Scheme::nve_full_power(), &scene, &ctx, &mut rng).unwrap();
        assert_eq!(tx.original.tag, SemanticTag::Bird);
        assert!(tx.mask.is_none() && tx.falsified_message.is_none());
        let amp = 0.1f64.sqrt();
        let sent: Vec<f64> = bpsk_modulate(&scramble(&image_to_bits(&tx.original), Scrambler::Strong))
            .0
            .iter()
            .map(|s| s * amp)
            .collect();
        assert_eq!(tx.frame.0, sent);
        assert!(tx.frame.0.iter().all(|s| (s.abs() - amp).abs() < 1e-12));
    }

    #[test]
    fn transmitted_power_matches_budget() {
        let ctx = cached_pipeline();
        let scene = SceneConfig::preset(1).unwrap();
        for scheme in [Scheme::venena(0.75).unwrap(), Scheme::venena(0.9).unwrap(), Scheme::nve_full_power()] {
            let mut total = 0.0;
            let n = 200;
            for t in 0..n {
                let mut rng = crate::seed::rng(3, &[t]);
                let tx = alice_transmit(Message::random(&mut rng), &scheme, &scene, &ctx, &mut rng).unwrap();
                total += tx.frame.mean_power();
            }
            let mean = total / n as f64;
            assert!((mean / 0.1 - 1.0).abs() < 0.01, "{:?}: {mean}", scheme.kind);
        }
    }

    #[test]
    fn noiseless_receivers() {
        let ctx = cached_pipeline();
        let scene = noiseless_scene();
        let scheme = Scheme::venena(0.75).unwrap();
        for t in 0..20 {
            let seed = TrialSeed { master: 11, trial: t };
            let (rec, _) = run_trial_timed(None, &scheme, &scene, &ctx, seed).unwrap();
            let tx = alice_transmit(rec.true_message, &scheme, &scene, &ctx, &mut seed.rng(stream::IMAGE)).unwrap();
            let poisoned = tx.poisoned.unwrap();
            // Bob and full Eve perceive exactly what the poisoned image classifies as.
            let expect = ctx.classify_message(&poisoned);
            assert_eq!(rec.perceived_bob, expect);
            assert_eq!(rec.perceived_eve_full, expect);
            assert_eq!(rec.perceived_eve_partial, ctx.classify_message(&tx.original));
            assert_eq!((rec.bob_mask_errors, rec.eve_mask_errors), (Some(0), Some(0)));
            if rec.poison_success == Some(true) {
                assert_eq!(rec.perceived_bob, rec.true_message);
            }
            if ctx.model.classify(&tx.original) == tx.original.tag {
                assert_eq!(rec.perceived_eve_partial, rec.falsified_message.unwrap());
            }
        }
        let nve = Scheme::nve_full_power();
        for t in 0..10 {
            let seed = TrialSeed { master: 12, trial: t };
            let rec = run_trial(Some(m(4)), &nve, &scene, &ctx, seed).unwrap();
            let tx = alice_transmit(m(4), &nve, &scene, &ctx, &mut seed.rng(stream::IMAGE)).unwrap();
            let expect = ctx.classify_message(&tx.original);
            assert_eq!((rec.perceived_bob, rec.perceived_eve_full, rec.perceived_eve_partial), (expect, expect, expect));
            assert_eq!(rec.falsified_message, None);
        }
    }

    #[test]
    fn trials_are_deterministic() {
        let ctx = cached_pipeline();
        let scene = SceneConfig::preset(1).unwrap();
        let scheme = Scheme::venena(0.75).unwrap();
        let seed = TrialSeed { master: 5, trial: 9 };
        let a = run_trial(None, &scheme, &scene, &ctx, seed).unwrap();
        assert_eq!(a, run_trial(None, &scheme, &scene, &ctx, seed).unwrap());
        let b = run_trial(None, &scheme, &scene, &ctx, TrialSeed { trial: 10, ..seed }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn bob_decodes_mask_better_than_eve() {
        let ctx = cached_pipeline();
        let scene = SceneConfig::preset(1).unwrap();
        let scheme = Scheme::venena(0.75).unwrap();
        let (mut bob, mut eve) = (0usize, 0usize);
        for t in 0..300 {
            let r = run_trial(None, &scheme, &scene, &ctx, TrialSeed { master: 21, trial: t }).unwrap();
            bob += r.bob_mask_errors.unwrap();
            eve += r.eve_mask_errors.unwrap();
        }
        assert!(bob < eve, "bob {bob} eve {eve}");
    }

    #[test]
    fn missing_cache_pair_is_reported() {
        let db = generate_synthetic_dataset(1, 7).unwrap();
        let model = init_model(&desk_architecture(), 1).unwrap();
        let cfg = PoisonConfig {
            n_iter: 1,
            ..PoisonConfig::default()
        };
        let plan = plan_pairs(&db, 1, 3);
        let cache = build_poison_cache(&model, &db, &plan[..1], &cfg, crate::exec::Execution::Sequential).unwrap();
        let ctx = Pipeline::with_cache(db.clone(), MappingTable::standard(), model.clone(), cache.clone()).unwrap();
        let scene = SceneConfig::preset(1).unwrap();
        let scheme = Scheme::venena(0.75).unwrap();
        let any_fail = (0..30).any(|t| {
            let mut rng = crate::seed::rng(t, &[]);
            alice_transmit(m(5), &scheme, &scene, &ctx, &mut rng).is_err()
        });
        assert!(any_fail);
        let other = generate_synthetic_dataset(1, 8).unwrap();
        assert!(Pipeline::with_cache(other, MappingTable::standard(), model, cache).is_err());
    }
}
