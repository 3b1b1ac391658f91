//! Dataset splits, backbone feature storage, triplet sampling and the
//! synthetic dataset generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{stream_rng, Rng};
use crate::tensor::{round_f32, Matrix};
use crate::vocab::Composition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Evaluation phase; selects the candidate pair list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Val,
    Test,
}

impl Phase {
    pub fn split(self) -> Split {
        match self {
            Phase::Val => Split::Val,
            Phase::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Seen,
    Unseen,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image_id: String,
    pub attribute: String,
    pub object: String,
    pub split: Split,
}

impl Record {
    pub fn composition(&self) -> Composition {
        Composition::new(self.attribute.clone(), self.object.clone())
    }
}

/// One entry of a phase pair file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub attribute: String,
    pub object: String,
    pub tag: Tag,
}

impl PairEntry {
    pub fn composition(&self) -> Composition {
        Composition::new(self.attribute.clone(), self.object.clone())
    }
}

/// Records plus the candidate sets of every phase.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    records: Vec<Record>,
    seen_pairs: Vec<Composition>,
    val_pairs: Vec<PairEntry>,
    test_pairs: Vec<PairEntry>,
}

impl DatasetSplit {
    /// Builds and validates a split. Missing pair lists are derived: the
    /// seen pairs plus every pair occurring in that split's records.
    pub fn new(records: Vec<Record>, val_pairs: Option<Vec<PairEntry>>, test_pairs: Option<Vec<PairEntry>>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for r in &records {
            if r.image_id.is_empty() || r.attribute.trim().is_empty() || r.object.trim().is_empty() {
                return Err(Error::Schema(format!("record {:?} has an empty field", r.image_id)));
            }
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::Schema(format!("duplicate image id {:?}", r.image_id)));
            }
        }
        let seen: BTreeSet<Composition> =
            records.iter().filter(|r| r.split == Split::Train).map(Record::composition).collect();
        let derive = |split: Split| -> Vec<PairEntry> {
            let mut all: BTreeSet<Composition> = seen.clone();
            all.extend(records.iter().filter(|r| r.split == split).map(Record::composition));
            all.into_iter()
                .map(|c| {
                    let tag = if seen.contains(&c) { Tag::Seen } else { Tag::Unseen };
                    PairEntry { attribute: c.attribute, object: c.object, tag }
                })
                .collect()
        };
        let val_pairs = val_pairs.unwrap_or_else(|| derive(Split::Val));
        let test_pairs = test_pairs.unwrap_or_else(|| derive(Split::Test));
        let out = Self { records, seen_pairs: seen.into_iter().collect(), val_pairs, test_pairs };
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let seen: BTreeSet<&Composition> = self.seen_pairs.iter().collect();
        for (name, list, split) in [("val", &self.val_pairs, Split::Val), ("test", &self.test_pairs, Split::Test)] {
            let mut listed = BTreeSet::new();
            for p in list {
                let c = p.composition();
                match (p.tag, seen.contains(&c)) {
                    (Tag::Unseen, true) => {
                        return Err(Error::Schema(format!("training images use \"{c}\", but the {name} pairs tag it unseen")))
                    }
                    (Tag::Seen, false) => {
                        return Err(Error::Schema(format!("{name} pair \"{c}\" is tagged seen but has no training images")))
                    }
                    _ => {}
                }
                if !listed.insert(c.clone()) {
                    return Err(Error::Schema(format!("{name} pairs list \"{c}\" twice")));
                }
            }
            for r in self.records.iter().filter(|r| r.split == split) {
                if !listed.contains(&r.composition()) {
                    return Err(Error::Schema(format!(
                        "{name} image {:?} is labeled \"{}\", which is not among the {name} pairs",
                        r.image_id,
                        r.composition()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &Record {
        &self.records[index]
    }

    /// Indices of the records in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Sorted seen compositions `C_s`.
    pub fn seen_pairs(&self) -> &[Composition] {
        &self.seen_pairs
    }

    pub fn phase_pairs(&self, phase: Phase) -> &[PairEntry] {
        match phase {
            Phase::Val => &self.val_pairs,
            Phase::Test => &self.test_pairs,
        }
    }

    /// Sorted attribute names over records and pair lists.
    pub fn attributes(&self) -> Vec<String> {
        self.primitive(|c| c.attribute)
    }

    /// Sorted object names over records and pair lists.
    pub fn objects(&self) -> Vec<String> {
        self.primitive(|c| c.object)
    }

    fn primitive(&self, pick: impl Fn(Composition) -> String) -> Vec<String> {
        let mut set = BTreeSet::new();
        for r in &self.records {
            set.insert(pick(r.composition()));
        }
        for p in self.val_pairs.iter().chain(&self.test_pairs) {
            set.insert(pick(p.composition()));
        }
        set.into_iter().collect()
    }
}

/// Backbone output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImageFeatures {
    /// Class-token feature, `d_v` wide.
    pub cls: Vec<f64>,
    /// `n × d_p` connector-output patch features.
    pub patches: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub num_patches: usize,
    pub cls_dim: usize,
    pub patch_dim: usize,
}

/// Image id → backbone features, all with the header's shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    header: StoreHeader,
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    items: Vec<RawImageFeatures>,
}

impl FeatureStore {
    pub fn new(header: StoreHeader) -> Self {
        Self { header, ids: Vec::new(), index: BTreeMap::new(), items: Vec::new() }
    }

    pub fn header(&self) -> StoreHeader {
        self.header
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: String, features: RawImageFeatures) -> Result<()> {
        let h = self.header;
        if features.cls.len() != h.cls_dim || features.patches.shape() != (h.num_patches, h.patch_dim) {
            return Err(Error::Shape(format!(
                "image {id:?}: cls {} / patches {:?}, store expects {} / ({}, {})",
                features.cls.len(),
                features.patches.shape(),
                h.cls_dim,
                h.num_patches,
                h.patch_dim
            )));
        }
        if !features.cls.iter().all(|x| x.is_finite()) || !features.patches.is_finite() {
            return Err(Error::NumericalDomain(format!("image {id:?} has non-finite features")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Schema(format!("duplicate image id {id:?} in feature store")));
        }
        self.index.insert(id.clone(), self.items.len());
        self.ids.push(id);
        self.items.push(features);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&RawImageFeatures> {
        self.index
            .get(id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::Schema(format!("image {id:?} is missing from the feature store")))
    }

    /// Checks that every manifest image is present.
    pub fn check_covers(&self, split: &DatasetSplit) -> Result<()> {
        let missing: Vec<&str> =
            split.records().iter().filter(|r| !self.index.contains_key(&r.image_id)).map(|r| r.image_id.as_str()).collect();
        if missing.is_empty() {
            return Ok(());
        }
        let shown: Vec<&str> = missing.iter().take(5).copied().collect();
        Err(Error::Schema(format!("{} manifest images are missing from the feature store, e.g. {shown:?}", missing.len())))
    }
}

/// Record indices of a main image and its two companions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub main: usize,
    /// Shares the main image's attribute.
    pub attr_companion: usize,
    /// Shares the main image's object.
    pub obj_companion: usize,
}

/// Companion lookup over the training records.
#[derive(Clone, Debug)]
pub struct TripletSampler {
    by_attr: BTreeMap<String, Vec<usize>>,
    by_obj: BTreeMap<String, Vec<usize>>,
}

impl TripletSampler {
    pub fn new(split: &DatasetSplit) -> Self {
        let mut by_attr: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_obj: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for i in split.indices(Split::Train) {
            let r = split.record(i);
            by_attr.entry(r.attribute.clone()).or_default().push(i);
            by_obj.entry(r.object.clone()).or_default().push(i);
        }
        Self { by_attr, by_obj }
    }

    /// Uniform over the other carriers of the primitive; the main image
    /// itself when it is the only one.
    fn pick(pool: Option<&Vec<usize>>, main: usize, rng: &mut Rng) -> usize {
        let Some(pool) = pool else { return main };
        let others = pool.len() - usize::from(pool.contains(&main));
        if others == 0 {
            return main;
        }
        let mut k = rng.random_range(0..others);
        for &i in pool {
            if i == main {
                continue;
            }
            if k == 0 {
                return i;
            }
            k -= 1;
        }
        unreachable!("k < number of other carriers")
    }

    pub fn sample(&self, split: &DatasetSplit, main: usize, rng: &mut Rng) -> Triplet {
        let r = split.record(main);
        let attr_companion = Self::pick(self.by_attr.get(&r.attribute), main, rng);
        let obj_companion = Self::pick(self.by_obj.get(&r.object), main, rng);
        Triplet { main, attr_companion, obj_companion }
    }
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub attributes: usize,
    pub objects: usize,
    pub seen_pairs: usize,
    pub unseen_pairs: usize,
    pub train_images_per_pair: usize,
    /// Images per pair in each of the val and test splits.
    pub eval_images_per_pair: usize,
    pub num_patches: usize,
    pub cls_dim: usize,
    pub patch_dim: usize,
    /// Per-coordinate Gaussian noise.
    pub noise: f64,
    pub background_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            attributes: 6,
            objects: 6,
            seen_pairs: 24,
            unseen_pairs: 12,
            train_images_per_pair: 8,
            eval_images_per_pair: 4,
            num_patches: 16,
            cls_dim: 32,
            patch_dim: 32,
            noise: 0.1,
            background_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::SyntheticSpec(m));
        if self.attributes == 0 || self.objects == 0 {
            return err("need at least one attribute and one object".into());
        }
        if self.seen_pairs + self.unseen_pairs > self.attributes * self.objects {
            return err(format!(
                "{} seen + {} unseen pairs exceed the {} available",
                self.seen_pairs,
                self.unseen_pairs,
                self.attributes * self.objects
            ));
        }
        if self.seen_pairs < self.attributes.max(self.objects) {
            return err(format!(
                "{} seen pairs cannot cover {} attributes and {} objects",
                self.seen_pairs, self.attributes, self.objects
            ));
        }
        if self.train_images_per_pair == 0 || self.num_patches == 0 || self.patch_dim == 0 {
            return err("image counts and dimensions must be positive".into());
        }
        if self.cls_dim < 2 || self.cls_dim % 2 != 0 {
            return err(format!("cls_dim must be even and at least 2, got {}", self.cls_dim));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return err(format!("background_fraction must lie in [0, 1), got {}", self.background_fraction));
        }
        Ok(())
    }

    pub fn attribute_names(&self) -> Vec<String> {
        (0..self.attributes).map(|i| format!("attr{i}")).collect()
    }

    pub fn object_names(&self) -> Vec<String> {
        (0..self.objects).map(|i| format!("obj{i}")).collect()
    }
}

/// Generated dataset plus the positions of pure-noise patch rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub split: DatasetSplit,
    pub store: FeatureStore,
    pub background: BTreeMap<String, Vec<usize>>,
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = crate::tensor::l2_norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws a dataset whose class token carries the attribute in its first half
/// and the object in its second half. Patch rows are a fixed projection of
/// either half plus noise; a fraction of rows are pure noise ("background").
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let half = spec.cls_dim / 2;
    let attrs = spec.attribute_names();
    let objs = spec.object_names();

    // Cover every primitive with a seen pair, then fill the rest at random.
    let mut a_order: Vec<usize> = (0..spec.attributes).collect();
    let mut o_order: Vec<usize> = (0..spec.objects).collect();
    a_order.shuffle(&mut rng);
    o_order.shuffle(&mut rng);
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    for i in 0..spec.attributes.max(spec.objects) {
        seen.insert((a_order[i % spec.attributes], o_order[i % spec.objects]));
    }
    let mut rest: Vec<(usize, usize)> = (0..spec.attributes)
        .flat_map(|a| (0..spec.objects).map(move |o| (a, o)))
        .filter(|p| !seen.contains(p))
        .collect();
    rest.shuffle(&mut rng);
    let fill = spec.seen_pairs - seen.len();
    seen.extend(rest.drain(..fill));
    let unseen: BTreeSet<(usize, usize)> = rest.into_iter().take(spec.unseen_pairs).collect();

    let attr_protos: Vec<Vec<f64>> = (0..spec.attributes).map(|_| unit_vector(half, &mut rng)).collect();
    let obj_protos: Vec<Vec<f64>> = (0..spec.objects).map(|_| unit_vector(half, &mut rng)).collect();
    let proj_dist = Normal::new(0.0, 1.0 / libm::sqrt(spec.patch_dim as f64)).expect("valid std");
    let projection = Matrix::from_fn(spec.cls_dim, spec.patch_dim, |_, _| proj_dist.sample(&mut rng));
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let bg_dist = Normal::new(0.0, 1.0 / libm::sqrt(spec.cls_dim as f64)).expect("valid std");
    let n_bg = libm::round(spec.num_patches as f64 * spec.background_fraction) as usize;

    let header = StoreHeader { num_patches: spec.num_patches, cls_dim: spec.cls_dim, patch_dim: spec.patch_dim };
    let mut store = FeatureStore::new(header);
    let mut records = Vec::new();
    let mut background = BTreeMap::new();
    let jitter = |x: f64, rng: &mut Rng| if spec.noise > 0.0 { x + noise.sample(rng) } else { x };

    let mut plan: Vec<(Split, (usize, usize))> = Vec::new();
    for &p in &seen {
        plan.extend(core::iter::repeat_n((Split::Train, p), spec.train_images_per_pair));
    }
    for split in [Split::Val, Split::Test] {
        for &p in seen.iter().chain(&unseen) {
            plan.extend(core::iter::repeat_n((split, p), spec.eval_images_per_pair));
        }
    }

    for (k, (split, (a, o))) in plan.into_iter().enumerate() {
        let id = format!("img{k:05}");
        let mut signal = attr_protos[a].clone();
        signal.extend_from_slice(&obj_protos[o]);
        let cls: Vec<f64> = signal.iter().map(|&x| round_f32(jitter(x, &mut rng))).collect();

        let mut positions: Vec<usize> = (0..spec.num_patches).collect();
        positions.shuffle(&mut rng);
        let mut bg: Vec<usize> = positions[..n_bg].to_vec();
        bg.sort_unstable();
        let mut patches = Matrix::zeros(spec.num_patches, spec.patch_dim);
        let mut signal_rows = 0usize;
        for row in 0..spec.num_patches {
            let source: Vec<f64> = if bg.binary_search(&row).is_ok() {
                (0..spec.cls_dim).map(|_| bg_dist.sample(&mut rng)).collect()
            } else {
                let attr_half = signal_rows % 2 == 0;
                signal_rows += 1;
                (0..spec.cls_dim)
                    .map(|j| if (j < half) == attr_half { signal[j] } else { 0.0 })
                    .collect()
            };
            let projected = Matrix::row_vector(source).matmul(&projection);
            for (dst, &x) in patches.row_mut(row).iter_mut().zip(projected.as_slice()) {
                *dst = round_f32(jitter(x, &mut rng));
            }
        }
        store.insert(id.clone(), RawImageFeatures { cls, patches })?;
        background.insert(id.clone(), bg);
        records.push(Record { image_id: id, attribute: attrs[a].clone(), object: objs[o].clone(), split });
    }

    let pairs = |tagged: &mut Vec<PairEntry>| {
        for (set, tag) in [(&seen, Tag::Seen), (&unseen, Tag::Unseen)] {
            for &(a, o) in set {
                tagged.push(PairEntry { attribute: attrs[a].clone(), object: objs[o].clone(), tag });
            }
        }
    };
    let mut val_pairs = Vec::new();
    pairs(&mut val_pairs);
    let test_pairs = val_pairs.clone();
    let split = DatasetSplit::new(records, Some(val_pairs), Some(test_pairs))?;
    Ok(SyntheticDataset { split, store, background })
}

/// Record indices of a split in a seeded random order.
pub fn shuffled(indices: &[usize], rng: &mut Rng) -> Vec<usize> {
    let mut out = indices.to_vec();
    out.shuffle(rng);
    out
}

impl core::fmt::Display for Split {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl core::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Phase::Val),
            "test" => Ok(Phase::Test),
            other => Err(Error::Config(format!("unknown phase {other:?}; expected val or test"))),
        }
    }
}

impl Tag {
    pub fn is_unseen(self) -> bool {
        self == Tag::Unseen
    }
}
