//! Class catalogs, task-sequence composition under the three semantic
//! settings, and offline/online stream iteration.

mod source;
mod stream;

pub use source::{
    generate_synthetic, load_image_folder, synthetic_index, DataPool, SampleRef, SourceDataset,
    Split, SplitData,
};
pub use stream::{iterate_stream, StreamBatch};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CatalogSummary, ExperimentConfig, Scenario, SemanticSetting};
use crate::error::{Error, Result};
use crate::util::seeded_rng;

/// A sample locator together with its global class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabeledRef {
    pub sample: SampleRef,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub global_id: usize,
    pub source: String,
    pub name: String,
    pub train: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub entries: Vec<ClassEntry>,
    /// Permutation of the catalog's global ids.
    pub class_order: Vec<usize>,
}

impl ClassCatalog {
    /// Catalog for one loaded dataset, with global ids starting at `id_offset`
    /// and a seeded uniform class order.
    pub fn from_source(pool: &DataPool, source: usize, id_offset: usize, seed: u64) -> Result<Self> {
        let src = pool
            .sources
            .get(source)
            .ok_or_else(|| Error::Dataset(format!("no source at index {source}")))?;
        let mut entries: Vec<ClassEntry> = src
            .class_names
            .iter()
            .enumerate()
            .map(|(c, name)| ClassEntry {
                global_id: id_offset + c,
                source: src.name.clone(),
                name: name.clone(),
                train: Vec::new(),
                test: Vec::new(),
            })
            .collect();
        for (split, data) in [(Split::Train, &src.train), (Split::Test, &src.test)] {
            for (i, &label) in data.labels.iter().enumerate() {
                let r = SampleRef { source: source as u32, split, index: i as u32 };
                let e = entries
                    .get_mut(label)
                    .ok_or_else(|| Error::Dataset(format!("label {label} out of range in {}", src.name)))?;
                match split {
                    Split::Train => e.train.push(r),
                    Split::Test => e.test.push(r),
                }
            }
        }
        let mut class_order: Vec<usize> = entries.iter().map(|e| e.global_id).collect();
        class_order.shuffle(&mut seeded_rng(seed, &[0xc1a55, source as u64]));
        let cat = Self { entries, class_order };
        cat.check()?;
        Ok(cat)
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.global_id).collect()
    }

    pub fn sources(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.source.as_str()).collect()
    }

    fn entry(&self, id: usize) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.global_id == id)
    }

    /// Unique ids, non-empty splits per class, `class_order` a bijection.
    pub fn check(&self) -> Result<()> {
        let ids: BTreeSet<usize> = self.entries.iter().map(|e| e.global_id).collect();
        if ids.len() != self.entries.len() {
            return Err(Error::Composition("duplicate global class ids in catalog".into()));
        }
        if let Some(e) = self.entries.iter().find(|e| e.train.is_empty() || e.test.is_empty()) {
            return Err(Error::Dataset(format!(
                "class `{}` of `{}` needs at least one train and one test sample",
                e.name, e.source
            )));
        }
        let order: BTreeSet<usize> = self.class_order.iter().copied().collect();
        if order != ids || self.class_order.len() != ids.len() {
            return Err(Error::Composition("class_order is not a permutation of the ids".into()));
        }
        Ok(())
    }

    /// `check` plus contiguity of ids from zero.
    pub fn check_contiguous(&self) -> Result<()> {
        self.check()?;
        let ids: BTreeSet<usize> = self.entries.iter().map(|e| e.global_id).collect();
        if ids.iter().copied().ne(0..ids.len()) {
            return Err(Error::Composition("global ids must be contiguous from 0".into()));
        }
        Ok(())
    }
}

/// Builds one catalog per pool source with disjoint, consecutive id ranges.
pub fn catalogs_for_pool(pool: &DataPool, seed: u64) -> Result<Vec<ClassCatalog>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(pool.sources.len());
    for s in 0..pool.sources.len() {
        let cat = ClassCatalog::from_source(pool, s, offset, seed)?;
        offset += cat.num_classes();
        out.push(cat);
    }
    Ok(out)
}

pub fn catalog_summary(pool: &DataPool) -> CatalogSummary {
    CatalogSummary {
        classes: pool
            .sources
            .iter()
            .map(|s| (s.name.clone(), s.num_classes()))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    Offline { epochs: usize },
    Online,
}

impl StreamMode {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        if cfg.online {
            StreamMode::Online
        } else {
            StreamMode::Offline { epochs: cfg.epochs }
        }
    }

    pub fn passes(&self) -> usize {
        match self {
            StreamMode::Online => 1,
            StreamMode::Offline { epochs } => *epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_index: usize,
    /// Label space of the task, in the order classes were assigned.
    pub class_ids: Vec<usize>,
    pub train_refs: Vec<LabeledRef>,
    pub test_refs: Vec<LabeledRef>,
}

impl TaskSpec {
    fn from_classes(task_index: usize, class_ids: Vec<usize>, catalogs: &[&ClassCatalog]) -> Result<Self> {
        let mut train_refs = Vec::new();
        let mut test_refs = Vec::new();
        for &id in &class_ids {
            let e = catalogs
                .iter()
                .find_map(|c| c.entry(id))
                .ok_or_else(|| Error::Composition(format!("class {id} not in any catalog")))?;
            train_refs.extend(e.train.iter().map(|&s| LabeledRef { sample: s, label: id }));
            test_refs.extend(e.test.iter().map(|&s| LabeledRef { sample: s, label: id }));
        }
        Ok(Self { task_index, class_ids, train_refs, test_refs })
    }

    pub fn sorted_classes(&self) -> Vec<usize> {
        let mut v = self.class_ids.clone();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
    pub scenario: Scenario,
    pub stream_mode: StreamMode,
    pub seed: u64,
}

#[derive(Serialize)]
struct TaskAudit {
    task: usize,
    classes: Vec<usize>,
}

#[derive(Serialize)]
struct SequenceAudit {
    scenario: Scenario,
    stream_mode: StreamMode,
    seed: u64,
    tasks: Vec<TaskAudit>,
}

impl TaskSequence {
    fn new(tasks: Vec<TaskSpec>, cfg: &ExperimentConfig) -> Self {
        Self {
            tasks,
            scenario: cfg.scenario,
            stream_mode: StreamMode::from_config(cfg),
            seed: cfg.seed,
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Audit JSON: task index to sorted class ids.
    pub fn to_json(&self) -> String {
        let audit = SequenceAudit {
            scenario: self.scenario,
            stream_mode: self.stream_mode,
            seed: self.seed,
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskAudit { task: t.task_index, classes: t.sorted_classes() })
                .collect(),
        };
        serde_json::to_string_pretty(&audit).expect("audit serializes")
    }

    /// SHA-256 of the audit JSON, hex encoded.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_json().as_bytes());
        h.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Global class id to owning task index.
    pub fn class_to_task(&self) -> BTreeMap<usize, usize> {
        self.tasks
            .iter()
            .flat_map(|t| t.class_ids.iter().map(move |&c| (c, t.task_index)))
            .collect()
    }

    /// Pairwise disjointness of task label spaces.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            for &c in &t.class_ids {
                if !seen.insert(c) {
                    return Err(Error::Composition(format!("class {c} appears in two tasks")));
                }
            }
        }
        Ok(())
    }
}

fn slice_tasks(order: &[usize], cfg: &ExperimentConfig, catalogs: &[&ClassCatalog]) -> Result<Vec<TaskSpec>> {
    let requested = cfg.requested_classes();
    if requested > order.len() {
        return Err(Error::PartitionOverflow { requested, available: order.len() });
    }
    let mut start = 0;
    (0..cfg.task_num)
        .map(|t| {
            let n = cfg.classes_in_task(t);
            let ids = order[start..start + n].to_vec();
            start += n;
            TaskSpec::from_classes(t, ids, catalogs)
        })
        .collect()
}

/// Single-dataset partition: seeded class order sliced into the initial and
/// incremental blocks.
pub fn partition_traditional(catalog: &ClassCatalog, cfg: &ExperimentConfig) -> Result<TaskSequence> {
    if catalog.sources().len() > 1 {
        return Err(Error::Composition(
            "traditional setting expects a single-dataset catalog".into(),
        ));
    }
    let tasks = slice_tasks(&catalog.class_order, cfg, &[catalog])?;
    Ok(TaskSequence::new(tasks, cfg))
}

/// One task per dataset, in the given dataset order.
pub fn compose_cross_domain(catalogs: &[ClassCatalog], cfg: &ExperimentConfig) -> Result<TaskSequence> {
    if catalogs.is_empty() {
        return Err(Error::Composition("cross-domain composition needs datasets".into()));
    }
    if catalogs.len() == 1 {
        log::warn!("cross-domain sequence built from a single dataset; it has one task");
    }
    let mut seen = BTreeSet::new();
    for cat in catalogs {
        for id in cat.ids() {
            if !seen.insert(id) {
                return Err(Error::Composition(format!(
                    "global class id {id} is used by more than one dataset"
                )));
            }
        }
    }
    let refs: Vec<&ClassCatalog> = catalogs.iter().collect();
    let tasks = catalogs
        .iter()
        .enumerate()
        .map(|(t, cat)| {
            let mut ids = cat.ids();
            ids.sort_unstable();
            TaskSpec::from_classes(t, ids, &refs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSequence::new(tasks, cfg))
}

/// Pools every class across datasets, shuffles by `seed`, then partitions.
/// Tasks may mix source datasets.
pub fn compose_category_randomized(
    catalogs: &[ClassCatalog],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TaskSequence> {
    let mut pool: Vec<usize> = catalogs.iter().flat_map(|c| c.ids()).collect();
    pool.sort_unstable();
    let distinct: BTreeSet<usize> = pool.iter().copied().collect();
    if distinct.len() != pool.len() {
        return Err(Error::Composition("overlapping global ids across datasets".into()));
    }
    let requested = cfg.requested_classes();
    if requested > pool.len() {
        return Err(Error::PartitionOverflow { requested, available: pool.len() });
    }
    if cfg.init_cls_num == 0 && !pool.len().is_multiple_of(cfg.task_num) {
        return Err(Error::Composition(format!(
            "{} pooled classes cannot be split into {} equal tasks",
            pool.len(),
            cfg.task_num
        )));
    }
    pool.shuffle(&mut seeded_rng(seed, &[0x7a4d]));
    let refs: Vec<&ClassCatalog> = catalogs.iter().collect();
    let tasks = slice_tasks(&pool, cfg, &refs)?;
    let mut seq = TaskSequence::new(tasks, cfg);
    seq.seed = seed;
    Ok(seq)
}

/// Dispatches on the configured semantic setting.
pub fn compose(catalogs: &[ClassCatalog], cfg: &ExperimentConfig) -> Result<TaskSequence> {
    let seq = match cfg.semantic_setting {
        SemanticSetting::Traditional => match catalogs {
            [single] => partition_traditional(single, cfg)?,
            _ => {
                return Err(Error::Composition(
                    "traditional setting partitions exactly one dataset".into(),
                ))
            }
        },
        SemanticSetting::CrossDomain => compose_cross_domain(catalogs, cfg)?,
        SemanticSetting::CategoryRandomized => compose_category_randomized(catalogs, cfg, cfg.seed)?,
    };
    seq.check_disjoint()?;
    Ok(seq)
}

/// Materializes the configured datasets: `synthetic[:k]` names are generated,
/// other names are read from `<data_root>/<name>`.
pub fn load_pool(cfg: &ExperimentConfig) -> Result<DataPool> {
    let mut sources = Vec::with_capacity(cfg.dataset_names.len());
    for name in &cfg.dataset_names {
        if synthetic_index(name).is_some() {
            sources.push(generate_synthetic(name, &cfg.synthetic)?);
        } else {
            let root = cfg.data_root.as_ref().ok_or_else(|| {
                Error::Dataset(format!("dataset `{name}` needs data_root to be set"))
            })?;
            sources.push(load_image_folder(name, &root.join(name))?);
        }
    }
    let mut pool = DataPool::new(sources);
    pool.harmonize()?;
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticConfig;

    fn pool_with(n_sources: usize, classes: usize, train: usize) -> DataPool {
        let syn = SyntheticConfig {
            num_classes: classes,
            input_shape: vec![4],
            train_per_class: train,
            test_per_class: 2,
            latent_dim: 2,
            class_sep: 1.0,
            noise: 1.0,
            data_seed: 0,
        };
        let sources = (0..n_sources)
            .map(|k| generate_synthetic(&format!("synthetic:{k}"), &syn).unwrap())
            .collect();
        DataPool::new(sources)
    }

    fn cfg(init: usize, inc: usize, tasks: usize) -> ExperimentConfig {
        ExperimentConfig {
            init_cls_num: init,
            inc_cls_num: inc,
            task_num: tasks,
            ..ExperimentConfig::default()
        }
    }

    fn assert_partition(seq: &TaskSequence, population: usize) {
        seq.check_disjoint().unwrap();
        let union: BTreeSet<usize> = seq.tasks.iter().flat_map(|t| t.class_ids.clone()).collect();
        assert_eq!(union.len(), population);
    }

    #[test]
    fn traditional_b0_10_10() {
        let pool = pool_with(1, 100, 1);
        let cat = ClassCatalog::from_source(&pool, 0, 0, 3).unwrap();
        cat.check_contiguous().unwrap();
        let seq = partition_traditional(&cat, &cfg(0, 10, 10)).unwrap();
        assert_eq!(seq.len(), 10);
        assert!(seq.tasks.iter().all(|t| t.class_ids.len() == 10));
        assert_partition(&seq, 100);
        for t in &seq.tasks {
            assert!(t.train_refs.iter().all(|r| t.class_ids.contains(&r.label)));
        }
    }

    #[test]
    fn traditional_b50_10_6_and_determinism() {
        let pool = pool_with(1, 100, 1);
        let cat = ClassCatalog::from_source(&pool, 0, 0, 11).unwrap();
        let seq = partition_traditional(&cat, &cfg(50, 10, 6)).unwrap();
        assert_eq!(seq.tasks[0].class_ids.len(), 50);
        assert!(seq.tasks[1..].iter().all(|t| t.class_ids.len() == 10));
        assert_partition(&seq, 100);
        let again = ClassCatalog::from_source(&pool, 0, 0, 11).unwrap();
        assert_eq!(partition_traditional(&again, &cfg(50, 10, 6)).unwrap(), seq);
    }

    #[test]
    fn traditional_rejects_multi_dataset_catalog() {
        let pool = pool_with(2, 3, 1);
        let mut cats = catalogs_for_pool(&pool, 0).unwrap();
        let b = cats.pop().unwrap();
        let mut merged = cats.pop().unwrap();
        merged.entries.extend(b.entries);
        merged.class_order.extend(b.class_order);
        assert!(matches!(
            partition_traditional(&merged, &cfg(0, 2, 3)),
            Err(Error::Composition(_))
        ));
    }

    #[test]
    fn cross_domain_one_task_per_dataset() {
        let pool = pool_with(5, 10, 1);
        let cats = catalogs_for_pool(&pool, 0).unwrap();
        let seq = compose_cross_domain(&cats, &cfg(0, 10, 5)).unwrap();
        assert_eq!(seq.len(), 5);
        for (i, t) in seq.tasks.iter().enumerate() {
            assert!(t.train_refs.iter().all(|r| r.sample.source == i as u32));
        }
        let single = compose_cross_domain(&cats[..1], &cfg(0, 10, 1)).unwrap();
        assert_eq!(single.len(), 1);

        let mut permuted = cats.clone();
        permuted.swap(0, 3);
        let seq_p = compose_cross_domain(&permuted, &cfg(0, 10, 5)).unwrap();
        assert_eq!(seq_p.tasks[0].class_ids, seq.tasks[3].class_ids);
        assert_eq!(seq_p.tasks[3].class_ids, seq.tasks[0].class_ids);
    }

    #[test]
    fn cross_domain_rejects_overlap() {
        let pool = pool_with(2, 4, 1);
        let a = ClassCatalog::from_source(&pool, 0, 0, 0).unwrap();
        let b = ClassCatalog::from_source(&pool, 1, 2, 0).unwrap();
        assert!(compose_cross_domain(&[a, b], &cfg(0, 4, 2)).is_err());
    }

    #[test]
    fn category_randomized_partition() {
        let pool = pool_with(5, 10, 1);
        let cats = catalogs_for_pool(&pool, 0).unwrap();
        let c = cfg(0, 10, 5);
        let seq = compose_category_randomized(&cats, &c, 42).unwrap();
        assert_partition(&seq, 50);
        assert_eq!(compose_category_randomized(&cats, &c, 42).unwrap().to_json(), seq.to_json());
        let mixed = seq.tasks.iter().any(|t| {
            t.train_refs.iter().map(|r| r.sample.source).collect::<BTreeSet<_>>().len() > 1
        });
        assert!(mixed);
        assert!(matches!(
            compose_category_randomized(&cats, &cfg(0, 11, 5), 1),
            Err(Error::PartitionOverflow { requested: 55, available: 50 })
        ));
        assert!(compose_category_randomized(&cats, &cfg(0, 7, 7), 1).is_err());
    }

    #[test]
    fn category_randomized_seed_sensitivity() {
        let pool = pool_with(5, 10, 1);
        let cats = catalogs_for_pool(&pool, 0).unwrap();
        let c = cfg(0, 10, 5);
        let differing = (0..10u64)
            .filter(|&s| {
                let a = compose_category_randomized(&cats, &c, 2 * s).unwrap();
                let b = compose_category_randomized(&cats, &c, 2 * s + 1).unwrap();
                a.tasks.iter().map(|t| t.sorted_classes()).ne(b.tasks.iter().map(|t| t.sorted_classes()))
            })
            .count();
        assert!(differing >= 1, "no seed pair changed the assignment");
        assert_eq!(differing, 10);
    }

    #[test]
    fn digest_is_stable() {
        let pool = pool_with(1, 10, 1);
        let cats = catalogs_for_pool(&pool, 5).unwrap();
        let a = compose(&cats, &cfg(0, 2, 5)).unwrap();
        let b = compose(&cats, &cfg(0, 2, 5)).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
