//! Synthetic relationship benchmark with a Zipf-distributed predicate
//! vocabulary and planted label ambiguity, plus JSON Lines serialization.
//!
//! Every relation samples a latent predicate class from the Zipf weights and
//! plants that class's prototype (plus Gaussian noise) in its union feature.
//! If the latent class belongs to an ambiguity group, the annotated label is
//! drawn from the whole group and the plausible set is the group:
//!
//! * synonymy and multi-view groups draw the label uniformly;
//! * hyponymy groups pick the coarse (first) member 70% of the time.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const DATASET_VERSION: u64 = 1;

/// Probability that a hyponymy relation is annotated with the coarse label.
pub const HYPONYMY_COARSE_PROB: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Synonymy,
    Hyponymy,
    Multiview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityGroup {
    pub kind: GroupKind,
    /// Class indices; for hyponymy ordered coarse to fine.
    pub members: Vec<usize>,
}

/// Number of two-member groups of each kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupSpec {
    pub synonymy: usize,
    pub hyponymy: usize,
    pub multiview: usize,
}

impl GroupSpec {
    pub fn total_groups(&self) -> usize {
        self.synonymy + self.hyponymy + self.multiview
    }
}

impl std::str::FromStr for GroupSpec {
    type Err = Error;

    /// Parses `"synonymy,hyponymy,multiview"`, e.g. `"3,2,2"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("group spec must be three counts like 3,2,2, got '{s}'"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n: Vec<usize> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Ok(Self {
            synonymy: n[0],
            hyponymy: n[1],
            multiview: n[2],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateVocabulary {
    pub classes: Vec<String>,
    /// Normalized Zipf weights; class 0 is the head.
    pub frequency_weights: Vec<f64>,
    pub groups: Vec<AmbiguityGroup>,
    /// Seed of the class prototypes planted in union features.
    pub prototype_seed: u64,
}

impl PredicateVocabulary {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn group_of(&self, class: usize) -> Option<&AmbiguityGroup> {
        self.groups.iter().find(|g| g.members.contains(&class))
    }

    /// Total sampling mass of grouped classes.
    pub fn grouped_mass(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|g| &g.members)
            .map(|&c| self.frequency_weights[c])
            .sum()
    }

    /// One prototype per class, `N(0, I_d)` from the prototype seed.
    pub fn prototypes(&self, d: usize) -> Vec<Vec<f64>> {
        let mut rng = RngState::seed(self.prototype_seed);
        (0..self.num_classes()).map(|_| rng.normals(d)).collect()
    }
}

/// Builds a Zipf vocabulary (`w_c ∝ (c + 1)^-s`) and assigns disjoint
/// ambiguity pairs to randomly chosen classes.
pub fn build_vocabulary(
    num_classes: usize,
    zipf_exponent: f64,
    groups: GroupSpec,
    rng: &mut RngState,
) -> Result<PredicateVocabulary> {
    if num_classes < 2 {
        return Err(Error::Config("need at least two predicate classes".into()));
    }
    if !(zipf_exponent > 0.0) || !zipf_exponent.is_finite() {
        return Err(Error::Config(format!("zipf exponent must be positive, got {zipf_exponent}")));
    }
    let grouped = 2 * groups.total_groups();
    if grouped > num_classes {
        return Err(Error::Config(format!(
            "{grouped} grouped classes do not fit in {num_classes} classes"
        )));
    }
    let raw: Vec<f64> = (1..=num_classes).map(|r| (r as f64).powf(-zipf_exponent)).collect();
    let total: f64 = raw.iter().sum();
    let frequency_weights = raw.iter().map(|w| w / total).collect();

    let mut order: Vec<usize> = (0..num_classes).collect();
    rng.shuffle(&mut order);
    let kinds = std::iter::repeat(GroupKind::Synonymy)
        .take(groups.synonymy)
        .chain(std::iter::repeat(GroupKind::Hyponymy).take(groups.hyponymy))
        .chain(std::iter::repeat(GroupKind::Multiview).take(groups.multiview));
    let groups = kinds
        .zip(order.chunks(2))
        .map(|(kind, pair)| {
            let mut members = pair.to_vec();
            members.sort_unstable();
            AmbiguityGroup { kind, members }
        })
        .collect();

    Ok(PredicateVocabulary {
        classes: (0..num_classes).map(|c| format!("predicate_{c:02}")).collect(),
        frequency_weights,
        groups,
        prototype_seed: rng.next_u64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    /// Sorted, non-empty.
    pub plausible: Vec<usize>,
    pub observed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub object_features: Vec<Tensor>,
    pub union_features: BTreeMap<(usize, usize), Tensor>,
    pub relations: Vec<Relation>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        let n = self.object_features.len();
        let d = self.object_features.first().map(|t| t.len());
        if self.object_features.iter().any(|t| Some(t.len()) != d || t.shape().len() != 1) {
            return Err(Error::Contract("object features differ in width".into()));
        }
        for (&(i, j), u) in &self.union_features {
            if i >= n || j >= n || i == j {
                return Err(Error::Contract(format!("union feature for invalid pair ({i}, {j})")));
            }
            if u.shape().len() != 1 {
                return Err(Error::Contract("union features must be vectors".into()));
            }
        }
        for r in &self.relations {
            if !self.union_features.contains_key(&(r.subject, r.object)) {
                return Err(Error::Contract(format!(
                    "relation ({}, {}) has no union feature",
                    r.subject, r.object
                )));
            }
            if r.plausible.is_empty() || !r.plausible.contains(&r.observed) {
                return Err(Error::Contract(format!(
                    "observed label {} not in plausible set {:?}",
                    r.observed, r.plausible
                )));
            }
        }
        Ok(())
    }

    /// FNV-1a digest over every float bit pattern and label.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for t in &self.object_features {
            t.data().iter().for_each(|v| eat(v.to_bits()));
        }
        for (&(i, j), t) in &self.union_features {
            eat(i as u64);
            eat(j as u64);
            t.data().iter().for_each(|v| eat(v.to_bits()));
        }
        for r in &self.relations {
            eat(r.subject as u64);
            eat(r.object as u64);
            r.plausible.iter().for_each(|&c| eat(c as u64));
            eat(r.observed as u64);
        }
        h
    }
}

/// Per-scene generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub n_objects: usize,
    pub relations: usize,
    pub feature_dim: usize,
    pub noise_scale: f64,
}

/// Samples one scene.
pub fn generate_scene(vocab: &PredicateVocabulary, params: &SceneParams, rng: &mut RngState) -> Result<SyntheticScene> {
    let prototypes = vocab.prototypes(params.feature_dim);
    generate_scene_with(vocab, &prototypes, params, rng)
}

fn generate_scene_with(
    vocab: &PredicateVocabulary,
    prototypes: &[Vec<f64>],
    params: &SceneParams,
    rng: &mut RngState,
) -> Result<SyntheticScene> {
    let n = params.n_objects;
    let d = params.feature_dim;
    if n < 2 {
        return Err(Error::Config("a scene needs at least two objects".into()));
    }
    if d == 0 {
        return Err(Error::Config("feature width must be positive".into()));
    }
    if params.relations > n * (n - 1) {
        return Err(Error::Config(format!(
            "{} relations do not fit among {n} objects",
            params.relations
        )));
    }
    let vec = |data: Vec<f64>| Tensor::from_parts(vec![d], data);

    let object_features = (0..n).map(|_| vec(rng.normals(d))).collect();
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    rng.shuffle(&mut pairs);
    let related = &pairs[..params.relations];

    let mut union_features = BTreeMap::new();
    let mut relations = Vec::with_capacity(related.len());
    for &(i, j) in related {
        let latent = rng.categorical(&vocab.frequency_weights);
        let (plausible, observed) = match vocab.group_of(latent) {
            None => (vec![latent], latent),
            Some(group) => {
                let observed = match group.kind {
                    GroupKind::Hyponymy => {
                        if rng.uniform() < HYPONYMY_COARSE_PROB {
                            group.members[0]
                        } else {
                            group.members[group.members.len() - 1]
                        }
                    }
                    GroupKind::Synonymy | GroupKind::Multiview => group.members[rng.below(group.members.len())],
                };
                (group.members.clone(), observed)
            }
        };
        let feat = prototypes[latent]
            .iter()
            .map(|p| p + params.noise_scale * rng.normal())
            .collect();
        union_features.insert((i, j), vec(feat));
        relations.push(Relation {
            subject: i,
            object: j,
            plausible,
            observed,
        });
    }
    // Unrelated pairs carry background features so every object has a full
    // neighborhood.
    for &(i, j) in &pairs[params.relations..] {
        union_features.insert((i, j), vec(rng.normals(d)));
    }
    Ok(SyntheticScene {
        object_features,
        union_features,
        relations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_classes: usize,
    pub zipf_exponent: f64,
    pub groups: GroupSpec,
    pub scene: SceneParams,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            zipf_exponent: 1.0,
            groups: GroupSpec {
                synonymy: 3,
                hyponymy: 2,
                multiview: 2,
            },
            scene: SceneParams {
                n_objects: 4,
                relations: 4,
                feature_dim: 32,
                noise_scale: 2.0,
            },
            train_scenes: 2000,
            val_scenes: 200,
            test_scenes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SyntheticScene>,
    pub validation: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
    pub seed: u64,
    pub config: DataConfig,
    pub vocabulary: PredicateVocabulary,
}

/// Generates every split as a pure function of `(config, seed)`.
///
/// Scene `k` of each split draws from its own stream, so splits can be
/// regenerated independently.
pub fn generate_split(config: &DataConfig, seed: u64) -> Result<DatasetSplit> {
    let vocabulary = build_vocabulary(
        config.num_classes,
        config.zipf_exponent,
        config.groups,
        &mut RngState::stream(seed, 0),
    )?;
    let prototypes = vocabulary.prototypes(config.scene.feature_dim);
    let gen = |offset: u64, count: usize| -> Result<Vec<SyntheticScene>> {
        (0..count)
            .map(|k| {
                let mut rng = RngState::stream(seed, offset + k as u64);
                generate_scene_with(&vocabulary, &prototypes, &config.scene, &mut rng)
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: gen(1 << 32, config.train_scenes)?,
        validation: gen(2 << 32, config.val_scenes)?,
        test: gen(3 << 32, config.test_scenes)?,
        seed,
        config: config.clone(),
        vocabulary,
    })
}

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u64,
    pub seed: u64,
    pub split: String,
    pub config: DataConfig,
    pub vocabulary: PredicateVocabulary,
}

#[derive(Serialize, Deserialize)]
struct UnionLine {
    i: usize,
    j: usize,
    feat: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RelationLine {
    i: usize,
    j: usize,
    plausible: Vec<usize>,
    observed: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    objects: Vec<Vec<f64>>,
    unions: Vec<UnionLine>,
    relations: Vec<RelationLine>,
}

impl From<&SyntheticScene> for SceneLine {
    fn from(s: &SyntheticScene) -> Self {
        SceneLine {
            objects: s.object_features.iter().map(|t| t.data().to_vec()).collect(),
            unions: s
                .union_features
                .iter()
                .map(|(&(i, j), t)| UnionLine {
                    i,
                    j,
                    feat: t.data().to_vec(),
                })
                .collect(),
            relations: s
                .relations
                .iter()
                .map(|r| RelationLine {
                    i: r.subject,
                    j: r.object,
                    plausible: r.plausible.clone(),
                    observed: r.observed,
                })
                .collect(),
        }
    }
}

impl TryFrom<SceneLine> for SyntheticScene {
    type Error = Error;

    fn try_from(line: SceneLine) -> Result<Self> {
        let object_features = line
            .objects
            .into_iter()
            .map(Tensor::vector)
            .collect::<Result<Vec<_>>>()?;
        let mut union_features = BTreeMap::new();
        for u in line.unions {
            if union_features.insert((u.i, u.j), Tensor::vector(u.feat)?).is_some() {
                return Err(Error::Contract(format!("duplicate union feature ({}, {})", u.i, u.j)));
            }
        }
        let relations = line
            .relations
            .into_iter()
            .map(|r| Relation {
                subject: r.i,
                object: r.j,
                plausible: r.plausible,
                observed: r.observed,
            })
            .collect();
        let scene = SyntheticScene {
            object_features,
            union_features,
            relations,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Writes a header line followed by one scene per line.
pub fn write_scenes(path: &Path, header: &DatasetHeader, scenes: &[SyntheticScene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for s in scenes {
        serde_json::to_writer(&mut w, &SceneLine::from(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenes(path: &Path) -> Result<(DatasetHeader, Vec<SyntheticScene>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };

    let (idx, first) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing header line".into() })?;
    let first = first?;
    let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| parse_err(idx, e.to_string()))?;
    let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| parse_err(idx, "header has no version".into()))?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let header: DatasetHeader = serde_json::from_value(raw).map_err(|e| parse_err(idx, e.to_string()))?;

    let mut scenes = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SceneLine = serde_json::from_str(&line).map_err(|e| parse_err(idx, e.to_string()))?;
        let scene = SyntheticScene::try_from(parsed).map_err(|e| parse_err(idx, e.to_string()))?;
        scenes.push(scene);
    }
    Ok((header, scenes))
}

pub const SPLIT_FILES: [(&str, &str); 3] = [("train", "train.jsonl"), ("val", "val.jsonl"), ("test", "test.jsonl")];

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` into `dir`.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for ((name, file), scenes) in SPLIT_FILES.iter().zip([&split.train, &split.validation, &split.test]) {
        let header = DatasetHeader {
            version: DATASET_VERSION,
            seed: split.seed,
            split: name.to_string(),
            config: split.config.clone(),
            vocabulary: split.vocabulary.clone(),
        };
        write_scenes(&dir.join(file), &header, scenes)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let mut parts = Vec::new();
    for (_, file) in SPLIT_FILES {
        parts.push(read_scenes(&dir.join(file))?);
    }
    let (header, _) = &parts[0];
    for (h, _) in &parts[1..] {
        if h.seed != header.seed || h.config != header.config || h.vocabulary != header.vocabulary {
            return Err(Error::Contract("dataset split files disagree on their header".into()));
        }
    }
    let (seed, config, vocabulary) = (header.seed, header.config.clone(), header.vocabulary.clone());
    let mut it = parts.into_iter().map(|(_, s)| s);
    Ok(DatasetSplit {
        train: it.next().unwrap_or_default(),
        validation: it.next().unwrap_or_default(),
        test: it.next().unwrap_or_default(),
        seed,
        config,
        vocabulary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DataConfig {
        DataConfig {
            train_scenes: 5,
            val_scenes: 2,
            test_scenes: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn zipf_weights_two_classes() {
        let v = build_vocabulary(2, 1.0, GroupSpec::default(), &mut RngState::seed(0)).unwrap();
        let w = &v.frequency_weights;
        assert!((w[1] / w[0] - 0.5).abs() < 1e-15);
        assert!(v.groups.is_empty());
    }

    #[test]
    fn default_vocabulary_tail_ratio() {
        let cfg = DataConfig::default();
        let v = build_vocabulary(20, 1.0, cfg.groups, &mut RngState::seed(1)).unwrap();
        assert!((v.frequency_weights[19] / v.frequency_weights[0] - 1.0 / 20.0).abs() < 1e-12);
        assert_eq!(v.groups.len(), 7);
        let mut seen = std::collections::HashSet::new();
        for g in &v.groups {
            assert_eq!(g.members.len(), 2);
            assert!(g.members[0] < g.members[1]);
            for &m in &g.members {
                assert!(seen.insert(m), "class {m} in two groups");
            }
        }
        let w = &v.frequency_weights;
        assert!(w.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn infeasible_groups_are_rejected() {
        let spec = GroupSpec {
            synonymy: 2,
            hyponymy: 1,
            multiview: 0,
        };
        assert!(build_vocabulary(5, 1.0, spec, &mut RngState::seed(0)).is_err());
        assert!(build_vocabulary(5, 0.0, GroupSpec::default(), &mut RngState::seed(0)).is_err());
    }

    #[test]
    fn group_spec_parsing() {
        let g: GroupSpec = "3,2,1".parse().unwrap();
        assert_eq!((g.synonymy, g.hyponymy, g.multiview), (3, 2, 1));
        assert!("3,2".parse::<GroupSpec>().is_err());
        assert!("a,b,c".parse::<GroupSpec>().is_err());
    }

    #[test]
    fn no_groups_means_singleton_plausible_sets() {
        let cfg = DataConfig {
            groups: GroupSpec::default(),
            ..small_config()
        };
        let split = generate_split(&cfg, 3).unwrap();
        for s in &split.train {
            for r in &s.relations {
                assert_eq!(r.plausible, vec![r.observed]);
            }
        }
    }

    #[test]
    fn scenes_satisfy_invariants_and_are_deterministic() {
        let split = generate_split(&small_config(), 4).unwrap();
        for s in split.train.iter().chain(&split.validation).chain(&split.test) {
            s.validate().unwrap();
            assert_eq!(s.union_features.len(), 4 * 3);
        }
        assert_eq!(split, generate_split(&small_config(), 4).unwrap());
        assert_ne!(split.train, generate_split(&small_config(), 5).unwrap().train);
    }

    #[test]
    fn too_few_objects_is_an_error() {
        let v = build_vocabulary(4, 1.0, GroupSpec::default(), &mut RngState::seed(0)).unwrap();
        let p = SceneParams {
            n_objects: 1,
            relations: 0,
            feature_dim: 3,
            noise_scale: 0.0,
        };
        assert!(generate_scene(&v, &p, &mut RngState::seed(0)).is_err());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_split(&small_config(), 6).unwrap();
        write_dataset(&split, dir.path()).unwrap();
        let path = dir.path().join("train.jsonl");
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"objects\": [[1.0]], \"unions\": 3}\n");
        std::fs::write(&path, text).unwrap();
        match read_scenes(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_relation_is_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let split = generate_split(&small_config(), 6).unwrap();
        let header = DatasetHeader {
            version: DATASET_VERSION,
            seed: 6,
            split: "train".into(),
            config: split.config.clone(),
            vocabulary: split.vocabulary.clone(),
        };
        write_scenes(&path, &header, &[]).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str(
            r#"{"objects":[[1.0],[2.0]],"unions":[{"i":0,"j":1,"feat":[0.5]}],"relations":[{"i":0,"j":1,"plausible":[1],"observed":2}]}"#,
        );
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_scenes(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn bumped_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, "{\"version\": 2}\n").unwrap();
        assert!(matches!(read_scenes(&path), Err(Error::Version { found: 2, expected: 1 })));
    }
}
