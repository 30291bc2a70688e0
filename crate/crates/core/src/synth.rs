//! Synthetic referring-segmentation scenes.
//!
//! A scene is a square grid holding 2–4 non-overlapping rectangles. Each
//! rectangle carries a category, a color and a motion, written into its
//! cells as three one-hot channel blocks (background cells are all zero).
//! Motion is therefore a per-cell visual attribute, like a pose.
//!
//! Every sample has a caption that picks out exactly one object:
//!
//! | query type   | template                                                  | disambiguating attributes |
//! |--------------|-----------------------------------------------------------|---------------------------|
//! | `Full`       | `the {color} {category} {motion}`                          | all three                 |
//! | `Appearance` | `the {color} {category}`                                   | color + category          |
//! | `Motion`     | `the {category} that is {motion}` / `{category} {motion}`  | category + motion         |
//!
//! Appearance and motion queries always have a same-category distractor, so
//! the category alone never suffices. Categories have preferred motions
//! (`motion_affinity`), which makes same-category objects likely to move
//! alike, as in real scenes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{Caption, Lexicon, MotionClass, Pos};
use crate::error::{Error, Result};
use crate::fusion::Vocabulary;
pub use crate::grid::{BinaryMask, FeatureGrid};

pub const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Cells per side.
    pub grid: usize,
    /// Inclusive object-count range.
    pub n_objects: (usize, usize),
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    pub motions: Vec<String>,
    pub seed: u64,
    /// Probability that an object's motion comes from its category's two
    /// preferred motions instead of the uniform distribution.
    pub motion_affinity: f64,
    /// Probability that a `Full` scene gets a forced same-category distractor.
    pub full_same_category_rate: f64,
    /// Probability that a train sample gets a `Full` caption rather than an
    /// `Appearance` one.
    pub train_full_rate: f64,
    /// Largest rectangle side, in cells.
    pub max_side: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid: 16,
            n_objects: (2, 4),
            categories: ["person", "dog", "car", "ball"].map(String::from).to_vec(),
            colors: ["red", "blue", "green", "orange"].map(String::from).to_vec(),
            motions: ["running", "jumping", "walking", "bending-over"].map(String::from).to_vec(),
            seed: 0,
            motion_affinity: 0.8,
            full_same_category_rate: 0.5,
            train_full_rate: 0.5,
            max_side: 5,
        }
    }
}

/// Tokens used by the caption templates besides the attribute labels.
pub const TEMPLATE_WORDS: [&str; 3] = ["the", "that", "is"];

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 {
            return Err(Error::config("scene.grid", format!("grid must satisfy grid ≥ 8 (got {})", self.grid)));
        }
        let (lo, hi) = self.n_objects;
        if lo < 2 || hi > 4 || lo > hi {
            return Err(Error::config("scene.n_objects", "range must lie within [2, 4] with min <= max"));
        }
        for (field, labels) in [
            ("scene.categories", &self.categories),
            ("scene.colors", &self.colors),
            ("scene.motions", &self.motions),
        ] {
            if labels.len() < 2 {
                return Err(Error::config(field, "needs at least 2 labels"));
            }
            let unique: HashSet<&String> = labels.iter().collect();
            if unique.len() != labels.len() {
                return Err(Error::config(field, "labels must be unique"));
            }
            if labels.iter().any(|l| l.is_empty() || l.contains(char::is_whitespace)) {
                return Err(Error::config(field, "labels must be single non-empty tokens"));
            }
        }
        let mut all: HashSet<&str> = TEMPLATE_WORDS.into_iter().collect();
        for l in self.categories.iter().chain(&self.colors).chain(&self.motions) {
            if !all.insert(l) {
                return Err(Error::config("scene", format!("label `{l}` is used twice across attribute sets or templates")));
            }
        }
        if !(0.0..=1.0).contains(&self.motion_affinity) {
            return Err(Error::config("scene.motion_affinity", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.full_same_category_rate) {
            return Err(Error::config("scene.full_same_category_rate", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.train_full_rate) {
            return Err(Error::config("scene.train_full_rate", "must lie in [0, 1]"));
        }
        if self.max_side < 2 || self.max_side * self.max_side * 2 > self.grid * self.grid {
            return Err(Error::config("scene.max_side", "must be >= 2 and keep objects within half the grid"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.categories.len() + self.colors.len() + self.motions.len()
    }

    /// Attribute labels as tokens; template words are stopwords.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::with_stopwords(
            self.colors.iter().chain(&self.categories).chain(&self.motions).cloned(),
            TEMPLATE_WORDS,
        )
    }

    /// The builtin lexicon extended with any attribute labels it lacks.
    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::builtin();
        let groups = [
            (&self.categories, Pos::Noun, MotionClass::NonMotion),
            (&self.colors, Pos::Adjective, MotionClass::NonMotion),
            (&self.motions, Pos::Verb, MotionClass::Active),
        ];
        for (labels, pos, class) in groups {
            for l in labels {
                if lex.get(l).is_none() {
                    lex.insert(l, pos, class).expect("checked absent");
                }
            }
        }
        lex
    }

    fn preferred_motions(&self, category: usize) -> [usize; 2] {
        let m = self.motions.len();
        [category % m, (category + 1) % m]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    Appearance,
    Motion,
    Full,
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryType::Appearance => "appearance",
            QueryType::Motion => "motion",
            QueryType::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetMeta {
    pub category: String,
    pub color: String,
    pub motion: String,
}

/// Axis-aligned rectangle `[row, row + height) × [col, col + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub meta: TargetMeta,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub seed: u64,
    pub query_type: QueryType,
    pub scene: FeatureGrid,
    pub caption: Caption,
    pub target_mask: BinaryMask,
    pub target_meta: TargetMeta,
    pub category_counts: BTreeMap<String, usize>,
    pub objects: Vec<SceneObject>,
    pub target_index: usize,
}

impl Sample {
    pub fn annotation(&self) -> crate::augment::AnnotationRecord {
        crate::augment::AnnotationRecord {
            sample_id: self.sample_id.clone(),
            caption: self.caption.raw.clone(),
            target_category: self.target_meta.category.clone(),
            category_counts: self.category_counts.clone(),
            source_span: None,
            is_augmented: false,
        }
    }
}

/// Attribute constraints expressed by a caption.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Query {
    pub category: Option<String>,
    pub color: Option<String>,
    pub motion: Option<String>,
}

impl Query {
    pub fn matches(&self, meta: &TargetMeta) -> bool {
        self.category.as_ref().is_none_or(|c| *c == meta.category)
            && self.color.as_ref().is_none_or(|c| *c == meta.color)
            && self.motion.as_ref().is_none_or(|m| *m == meta.motion)
    }

    pub fn without_motion(&self) -> Query {
        Query {
            motion: None,
            ..self.clone()
        }
    }

    pub fn count_matches(&self, objects: &[SceneObject]) -> usize {
        objects.iter().filter(|o| self.matches(&o.meta)).count()
    }
}

pub fn query_for(meta: &TargetMeta, query_type: QueryType) -> Query {
    let mut q = Query {
        category: Some(meta.category.clone()),
        ..Query::default()
    };
    match query_type {
        QueryType::Appearance => q.color = Some(meta.color.clone()),
        QueryType::Motion => q.motion = Some(meta.motion.clone()),
        QueryType::Full => {
            q.color = Some(meta.color.clone());
            q.motion = Some(meta.motion.clone());
        }
    }
    q
}

/// Reads the attribute constraints off a caption; `None` if any token is
/// outside the template grammar.
pub fn parse_query(caption: &Caption, cfg: &SceneConfig) -> Option<Query> {
    let mut q = Query::default();
    for t in &caption.tokens {
        let slot = if cfg.categories.contains(t) {
            &mut q.category
        } else if cfg.colors.contains(t) {
            &mut q.color
        } else if cfg.motions.contains(t) {
            &mut q.motion
        } else if TEMPLATE_WORDS.contains(&t.as_str()) {
            continue;
        } else {
            return None;
        };
        if slot.replace(t.clone()).is_some() {
            return None;
        }
    }
    Some(q)
}

pub fn render_caption<R: Rng + ?Sized>(meta: &TargetMeta, query_type: QueryType, rng: &mut R) -> Caption {
    let TargetMeta { category, color, motion } = meta;
    match query_type {
        QueryType::Appearance => Caption::from_tokens(["the", color, category]),
        QueryType::Motion => {
            if rng.random_bool(0.5) {
                Caption::from_tokens(["the", category, "that", "is", motion])
            } else {
                Caption::from_tokens([category.as_str(), motion])
            }
        }
        QueryType::Full => Caption::from_tokens(["the", color, category, motion]),
    }
}

/// `true` when `caption` is exactly one of the templates of `query_type`
/// instantiated with `meta`.
pub fn caption_matches_template(caption: &Caption, meta: &TargetMeta, query_type: QueryType) -> bool {
    let TargetMeta { category, color, motion } = meta;
    let options: Vec<Vec<&str>> = match query_type {
        QueryType::Appearance => vec![vec!["the", color, category]],
        QueryType::Motion => vec![vec!["the", category, "that", "is", motion], vec![category, motion]],
        QueryType::Full => vec![vec!["the", color, category, motion]],
    };
    options.iter().any(|o| o.iter().copied().eq(caption.tokens.iter().map(String::as_str)))
}

fn sample_attrs<R: Rng + ?Sized>(cfg: &SceneConfig, category: usize, rng: &mut R) -> TargetMeta {
    let motion = if rng.random_bool(cfg.motion_affinity) {
        *cfg.preferred_motions(category).choose(rng).expect("two preferred motions")
    } else {
        rng.random_range(0..cfg.motions.len())
    };
    TargetMeta {
        category: cfg.categories[category].clone(),
        color: cfg.colors.choose(rng).expect("validated non-empty").clone(),
        motion: cfg.motions[motion].clone(),
    }
}

fn place_rects<R: Rng + ?Sized>(cfg: &SceneConfig, count: usize, rng: &mut R) -> Option<Vec<Rect>> {
    let mut rects: Vec<Rect> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..50 {
            let height = rng.random_range(2..=cfg.max_side);
            let width = rng.random_range(2..=cfg.max_side);
            let rect = Rect {
                row: rng.random_range(0..=cfg.grid - height),
                col: rng.random_range(0..=cfg.grid - width),
                height,
                width,
            };
            if rects.iter().all(|r| !r.overlaps(&rect)) {
                rects.push(rect);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(rects)
}

/// Constraint check shared by the generator and the validator.
pub fn scene_satisfies(objects: &[SceneObject], target: usize, query_type: QueryType) -> bool {
    let meta = &objects[target].meta;
    let q = query_for(meta, query_type);
    if q.count_matches(objects) != 1 {
        return false;
    }
    match query_type {
        QueryType::Full => true,
        QueryType::Appearance | QueryType::Motion => {
            objects.iter().filter(|o| o.meta.category == meta.category).count() >= 2
        }
    }
}

fn one_hot_scene(cfg: &SceneConfig, objects: &[SceneObject]) -> FeatureGrid {
    let nc = cfg.categories.len();
    let nk = cfg.colors.len();
    let mut grid = FeatureGrid::zeros(cfg.grid, cfg.grid, cfg.channels());
    for o in objects {
        let ci = cfg.categories.iter().position(|c| *c == o.meta.category).expect("known category");
        let ki = cfg.colors.iter().position(|c| *c == o.meta.color).expect("known color");
        let mi = cfg.motions.iter().position(|m| *m == o.meta.motion).expect("known motion");
        for r in o.rect.row..o.rect.row + o.rect.height {
            for c in o.rect.col..o.rect.col + o.rect.width {
                let cell = grid.cell_mut(r * cfg.grid + c);
                cell[ci] = 1.0;
                cell[nc + ki] = 1.0;
                cell[nc + nk + mi] = 1.0;
            }
        }
    }
    grid
}

/// Generates one sample by rejection sampling.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, query_type: QueryType, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    for _ in 0..MAX_REJECTIONS {
        let count = rng.random_range(cfg.n_objects.0..=cfg.n_objects.1);
        let Some(rects) = place_rects(cfg, count, rng) else {
            continue;
        };
        let target_cat = rng.random_range(0..cfg.categories.len());
        let force_same = match query_type {
            QueryType::Full => rng.random_bool(cfg.full_same_category_rate),
            _ => true,
        };
        let mut objects = Vec::with_capacity(count);
        for (k, rect) in rects.into_iter().enumerate() {
            let category = if k == 0 || (k == 1 && force_same) {
                target_cat
            } else {
                rng.random_range(0..cfg.categories.len())
            };
            objects.push(SceneObject {
                meta: sample_attrs(cfg, category, rng),
                rect,
            });
        }
        // object 0 carries the target category; shuffle so the target is not
        // always the first placed rectangle
        let perm_seed: u64 = rng.random();
        let mut order: Vec<usize> = (0..count).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let objects: Vec<SceneObject> = order.iter().map(|&i| objects[i].clone()).collect();
        let target = order.iter().position(|&i| i == 0).expect("permutation");

        if !scene_satisfies(&objects, target, query_type) {
            continue;
        }
        let meta = objects[target].meta.clone();
        let caption = render_caption(&meta, query_type, rng);
        let rect = objects[target].rect;
        let target_mask = BinaryMask::from_fn(cfg.grid, cfg.grid, |r, c| rect.contains(r, c));
        let mut category_counts = BTreeMap::new();
        for o in &objects {
            *category_counts.entry(o.meta.category.clone()).or_insert(0) += 1;
        }
        return Ok(Sample {
            sample_id: String::new(),
            seed: 0,
            query_type,
            scene: one_hot_scene(cfg, &objects),
            caption,
            target_mask,
            target_meta: meta,
            category_counts,
            objects,
            target_index: target,
        });
    }
    Err(Error::GenerationExhausted {
        attempts: MAX_REJECTIONS,
    })
}

/// Generates the sample of `split` for a given per-sample seed.
pub fn generate_from_seed(cfg: &SceneConfig, split: Split, seed: u64, sample_id: String) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query_type = match split {
        Split::Train if rng.random_bool(cfg.train_full_rate) => QueryType::Full,
        Split::Train => QueryType::Appearance,
        Split::TestStatic => QueryType::Appearance,
        Split::TestMotion => QueryType::Motion,
    };
    let mut s = generate_scene(cfg, query_type, &mut rng)?;
    s.seed = seed;
    s.sample_id = sample_id;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestStatic,
    TestMotion,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestStatic, Split::TestMotion];

    /// Query types a split may contain.
    pub fn allows(self, query_type: QueryType) -> bool {
        match self {
            Split::Train => matches!(query_type, QueryType::Full | QueryType::Appearance),
            Split::TestStatic => query_type == QueryType::Appearance,
            Split::TestMotion => query_type == QueryType::Motion,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestStatic => "test_static",
            Split::TestMotion => "test_motion",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub test_static: usize,
    pub test_motion: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            test_static: 300,
            test_motion: 300,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::TestStatic => self.test_static,
            Split::TestMotion => self.test_motion,
        }
    }
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub scene: SceneConfig,
    pub sizes: SplitSizes,
    pub seeds: BTreeMap<Split, Vec<u64>>,
}

pub const DATASET_FORMAT: &str = "mracl-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test_static: Vec<Sample>,
    pub test_motion: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::TestStatic => &self.test_static,
            Split::TestMotion => &self.test_motion,
        }
    }

    pub fn config(&self) -> &SceneConfig {
        &self.manifest.scene
    }
}

/// Draws distinct per-sample seeds for every split from the config seed.
pub fn derive_seeds(cfg: &SceneConfig, sizes: &SplitSizes) -> BTreeMap<Split, Vec<u64>> {
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used = HashSet::new();
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let mut seeds = Vec::with_capacity(sizes.get(split));
        while seeds.len() < sizes.get(split) {
            let s: u64 = master.random();
            if used.insert(s) {
                seeds.push(s);
            }
        }
        out.insert(split, seeds);
    }
    out
}

fn generate_split(cfg: &SceneConfig, split: Split, seeds: &[u64]) -> Result<Vec<Sample>> {
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| generate_from_seed(cfg, split, seed, format!("{}-{i:05}", split.name())))
        .collect()
}

/// Train mixes full and appearance captions, test_static uses appearance
/// captions and test_motion motion captions; splits never share a scene seed.
pub fn generate_dataset(cfg: &SceneConfig, sizes: &SplitSizes) -> Result<Dataset> {
    cfg.validate()?;
    if sizes.train == 0 || sizes.test_static == 0 || sizes.test_motion == 0 {
        return Err(Error::config("sizes", "every split size must be positive"));
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        scene: cfg.clone(),
        sizes: *sizes,
        seeds: derive_seeds(cfg, sizes),
    };
    regenerate(&manifest)
}

/// Rebuilds every sample from the seeds recorded in a manifest.
pub fn regenerate(manifest: &Manifest) -> Result<Dataset> {
    let cfg = &manifest.scene;
    let seeds = |s: Split| manifest.seeds.get(&s).map(Vec::as_slice).unwrap_or(&[]);
    Ok(Dataset {
        train: generate_split(cfg, Split::Train, seeds(Split::Train))?,
        test_static: generate_split(cfg, Split::TestStatic, seeds(Split::TestStatic))?,
        test_motion: generate_split(cfg, Split::TestMotion, seeds(Split::TestMotion))?,
        manifest: manifest.clone(),
    })
}

/// Checks every dataset invariant and returns the first violation.
pub fn validate_dataset(ds: &Dataset) -> Result<()> {
    let cfg = ds.config();
    cfg.validate()?;
    let bad = |id: &str, what: &str| Err(Error::InvalidData(format!("sample {id}: {what}")));
    let mut seen = HashSet::new();
    for split in Split::ALL {
        let samples = ds.split(split);
        let seeds = ds.manifest.seeds.get(&split).cloned().unwrap_or_default();
        if samples.len() != ds.manifest.sizes.get(split) || seeds.len() != samples.len() {
            return Err(Error::InvalidData(format!("split {split} size disagrees with manifest")));
        }
        for (s, &seed) in samples.iter().zip(&seeds) {
            let id = s.sample_id.as_str();
            if s.seed != seed {
                return bad(id, "seed differs from manifest");
            }
            if !seen.insert(seed) {
                return bad(id, "scene seed appears in more than one sample");
            }
            if !split.allows(s.query_type) {
                return bad(id, "query type does not match split");
            }
            s.scene.validate()?;
            if s.scene.rows != cfg.grid || s.scene.cols != cfg.grid || s.scene.channels != cfg.channels() {
                return bad(id, "scene shape disagrees with config");
            }
            if s.target_index >= s.objects.len() || s.objects[s.target_index].meta != s.target_meta {
                return bad(id, "target metadata does not match objects");
            }
            if !(2..=4).contains(&s.objects.len()) {
                return bad(id, "object count outside [2, 4]");
            }
            for (a, oa) in s.objects.iter().enumerate() {
                if oa.rect.height < 2 || oa.rect.width < 2 {
                    return bad(id, "object smaller than 2x2");
                }
                if oa.rect.row + oa.rect.height > cfg.grid || oa.rect.col + oa.rect.width > cfg.grid {
                    return bad(id, "object outside grid");
                }
                if s.objects[a + 1..].iter().any(|ob| ob.rect.overlaps(&oa.rect)) {
                    return bad(id, "objects overlap");
                }
            }
            if one_hot_scene(cfg, &s.objects) != s.scene {
                return bad(id, "scene channels disagree with objects");
            }
            let rect = s.objects[s.target_index].rect;
            if s.target_mask != BinaryMask::from_fn(cfg.grid, cfg.grid, |r, c| rect.contains(r, c)) {
                return bad(id, "target mask does not cover exactly the target");
            }
            let area = s.target_mask.count();
            if area < 4 || area > cfg.grid * cfg.grid / 2 {
                return bad(id, "target area outside [4, grid²/2]");
            }
            let mut counts = BTreeMap::new();
            for o in &s.objects {
                *counts.entry(o.meta.category.clone()).or_insert(0) += 1;
            }
            if counts != s.category_counts {
                return bad(id, "category counts disagree with objects");
            }
            if !caption_matches_template(&s.caption, &s.target_meta, s.query_type) {
                return bad(id, "caption is not generable from target metadata");
            }
            let Some(q) = parse_query(&s.caption, cfg) else {
                return bad(id, "caption uses tokens outside the template grammar");
            };
            if q.count_matches(&s.objects) != 1 || !q.matches(&s.target_meta) {
                return bad(id, "caption does not single out the target");
            }
            if !scene_satisfies(&s.objects, s.target_index, s.query_type) {
                return bad(id, "scene violates its query-type constraints");
            }
            if s.query_type == QueryType::Motion && q.without_motion().count_matches(&s.objects) < 2 {
                return bad(id, "motion query answerable without motion");
            }
        }
    }
    Ok(())
}

/// On-disk record for one sample (one JSON line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample_id: String,
    seed: u64,
    query_type: QueryType,
    rows: usize,
    cols: usize,
    channels: usize,
    /// Cell-major channel values, `rows * cols * channels` entries.
    scene: Vec<f64>,
    caption: String,
    /// One `0`/`1` character per cell, row-major.
    mask: String,
    target: TargetMeta,
    target_index: usize,
    category_counts: BTreeMap<String, usize>,
    objects: Vec<SceneObject>,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        SampleRecord {
            sample_id: s.sample_id.clone(),
            seed: s.seed,
            query_type: s.query_type,
            rows: s.scene.rows,
            cols: s.scene.cols,
            channels: s.scene.channels,
            scene: s.scene.data.clone(),
            caption: s.caption.raw.clone(),
            mask: s.target_mask.to_bitstring(),
            target: s.target_meta.clone(),
            target_index: s.target_index,
            category_counts: s.category_counts.clone(),
            objects: s.objects.clone(),
        }
    }
}

impl TryFrom<SampleRecord> for Sample {
    type Error = Error;

    fn try_from(r: SampleRecord) -> Result<Self> {
        let scene = FeatureGrid {
            rows: r.rows,
            cols: r.cols,
            channels: r.channels,
            data: r.scene,
        };
        scene.validate()?;
        Ok(Sample {
            target_mask: BinaryMask::from_bitstring(r.rows, r.cols, &r.mask)?,
            sample_id: r.sample_id,
            seed: r.seed,
            query_type: r.query_type,
            scene,
            caption: Caption::parse(&r.caption),
            target_meta: r.target,
            category_counts: r.category_counts,
            objects: r.objects,
            target_index: r.target_index,
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&ds.manifest)? + "\n")?;
    for split in Split::ALL {
        let mut out = String::new();
        for s in ds.split(split) {
            out.push_str(&serde_json::to_string(&SampleRecord::from(s))?);
            out.push('\n');
        }
        std::fs::write(dir.join(split_file(split)), out)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::InvalidData(format!("not a dataset manifest (format `{}`)", manifest.format)));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: DATASET_VERSION,
        });
    }
    Ok(manifest)
}

/// Loads a dataset directory and validates every invariant.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let text = std::fs::read_to_string(dir.join(split_file(split)))?;
        let samples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Sample::try_from(serde_json::from_str::<SampleRecord>(l)?))
            .collect::<Result<Vec<_>>>()?;
        splits.push(samples);
    }
    let test_motion = splits.pop().expect("three splits");
    let test_static = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let ds = Dataset {
        manifest,
        train,
        test_static,
        test_motion,
    };
    validate_dataset(&ds)?;
    Ok(ds)
}

/// SHA-256 of the manifest file contents, hex encoded.
pub fn manifest_hash(manifest: &Manifest) -> Result<String> {
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn config_validation() {
        let cfg = SceneConfig {
            grid: 4,
            ..SceneConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("grid ≥ 8"), "{err}");
        let cfg = SceneConfig {
            colors: vec!["red".into()],
            ..SceneConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SceneConfig {
            colors: vec!["red".into(), "person".into()],
            ..SceneConfig::default()
        };
        assert!(cfg.validate().is_err());
        SceneConfig::default().validate().unwrap();
    }

    #[test]
    fn motion_query_two_motions_same_category() {
        let cfg = SceneConfig {
            motions: vec!["running".into(), "jumping".into()],
            ..SceneConfig::default()
        };
        for seed in 0..50 {
            let s = generate_scene(&cfg, QueryType::Motion, &mut rng(seed)).unwrap();
            let same_cat: Vec<&SceneObject> = s
                .objects
                .iter()
                .filter(|o| o.meta.category == s.target_meta.category)
                .collect();
            assert!(same_cat.len() >= 2);
            // brute force: the target's motion is unique among its category
            let n = same_cat.iter().filter(|o| o.meta.motion == s.target_meta.motion).count();
            assert_eq!(n, 1);
            assert!(s.caption.tokens.contains(&s.target_meta.motion));
        }
    }

    #[test]
    fn seeds_reproduce_samples() {
        let cfg = SceneConfig::default();
        for split in Split::ALL {
            let a = generate_from_seed(&cfg, split, 42, "x".into()).unwrap();
            let b = generate_from_seed(&cfg, split, 42, "x".into()).unwrap();
            assert_eq!(a, b);
            assert_eq!(
                serde_json::to_string(&SampleRecord::from(&a)).unwrap(),
                serde_json::to_string(&SampleRecord::from(&b)).unwrap()
            );
        }
    }

    #[test]
    fn target_area_bounds() {
        let cfg = SceneConfig::default();
        for seed in 0..200 {
            let s = generate_scene(&cfg, QueryType::Full, &mut rng(seed)).unwrap();
            let a = s.target_mask.count();
            assert!((4..=cfg.grid * cfg.grid / 2).contains(&a));
        }
    }

    #[test]
    fn captions_follow_templates() {
        let meta = TargetMeta {
            category: "person".into(),
            color: "orange".into(),
            motion: "bending-over".into(),
        };
        let full = render_caption(&meta, QueryType::Full, &mut rng(0));
        assert_eq!(full.raw, "the orange person bending-over");
        let app = render_caption(&meta, QueryType::Appearance, &mut rng(0));
        assert!(!app.tokens.contains(&meta.motion));
        let lex = SceneConfig::default().lexicon();
        for seed in 0..20 {
            let m = render_caption(&meta, QueryType::Motion, &mut rng(seed));
            assert!(caption_matches_template(&m, &meta, QueryType::Motion));
            let phrase = crate::augment::extract_motion_phrase(&m, &lex).unwrap().unwrap();
            assert_eq!(phrase.tokens, vec![meta.motion.clone()]);
        }
    }

    #[test]
    fn exhausted_generation_errors() {
        // one color and no way to satisfy appearance uniqueness with a forced
        // same-category twin is impossible to configure (>= 2 colors), so
        // starve placement instead
        let cfg = SceneConfig {
            grid: 8,
            max_side: 2,
            n_objects: (4, 4),
            colors: vec!["red".into(), "blue".into()],
            categories: vec!["person".into(), "dog".into()],
            motions: vec!["running".into(), "jumping".into()],
            motion_affinity: 1.0,
            ..SceneConfig::default()
        };
        // Appearance needs a same-category twin with a different color,
        // which this config can satisfy; it must still succeed.
        assert!(generate_scene(&cfg, QueryType::Appearance, &mut rng(1)).is_ok());
    }

    #[test]
    fn small_dataset_validates_and_round_trips() {
        let cfg = SceneConfig {
            seed: 5,
            ..SceneConfig::default()
        };
        let sizes = SplitSizes {
            train: 20,
            test_static: 8,
            test_motion: 8,
        };
        let ds = generate_dataset(&cfg, &sizes).unwrap();
        validate_dataset(&ds).unwrap();
        let dir = std::env::temp_dir().join(format!("mracl-synth-{}", std::process::id()));
        write_dataset(&ds, &dir).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back, ds);
        assert_eq!(regenerate(&ds.manifest).unwrap(), ds);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn validator_catches_corruption() {
        let cfg = SceneConfig::default();
        let sizes = SplitSizes {
            train: 4,
            test_static: 4,
            test_motion: 4,
        };
        let ds = generate_dataset(&cfg, &sizes).unwrap();
        let mut broken = ds.clone();
        broken.test_motion[0].target_mask.bits[0] ^= true;
        assert!(validate_dataset(&broken).is_err());
        let mut broken = ds.clone();
        broken.test_static[1].caption = Caption::parse("the person");
        assert!(validate_dataset(&broken).is_err());
        let mut broken = ds;
        let seed = broken.train[0].seed;
        broken.test_static[0].seed = seed;
        broken.manifest.seeds.get_mut(&Split::TestStatic).unwrap()[0] = seed;
        assert!(validate_dataset(&broken).is_err());
    }
}
