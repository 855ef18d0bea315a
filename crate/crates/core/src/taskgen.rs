//! Synthetic long-sequence localization tasks.
//!
//! A video is a run of contiguous segments, each carrying a fine event id. Every
//! fine id maps to a coarse (room, interaction, object) triple shared with a few
//! sibling ids. Cheap features expose only the noisy coarse triple; expensive
//! features expose the fine id. The query names the target's coarse triple and
//! fine id, so cheap features narrow the search while expensive features are
//! needed to pick the right segment among distractors.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_from, tag, Rng};
use crate::types::{ChannelLayout, EmInstance, TimeWindow};

/// Number of fine event ids that share one coarse triple.
pub const FINE_PER_TRIPLE: usize = 4;
pub const FORMAT_VERSION: u32 = 1;
/// Query layout: room, interaction, object, fine event.
pub const QUERY_LEN: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum TaskGenError {
    #[error("response too short: response_ratio * clips = {0} < 2")]
    ResponseTooShort(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset needs at least one instance")]
    EmptyDataset,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetIoError {
    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("dimension mismatch in {file}: expected {expected} values, found {actual}")]
    DimensionMismatch { file: String, expected: usize, actual: usize },
    #[error("truncated array file {file}: {bytes} bytes is not a whole number of rows")]
    Truncated { file: String, bytes: u64 },
    #[error("invalid record in {file}: {reason}")]
    InvalidRecord { file: String, reason: String },
    #[error(transparent)]
    Config(#[from] TaskGenError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskGenConfig {
    pub clips: usize,
    pub room_width: usize,
    pub interaction_width: usize,
    pub object_width: usize,
    pub expensive_width: usize,
    pub query_len: usize,
    pub fine_events: usize,
    pub rooms: usize,
    pub interactions: usize,
    pub objects: usize,
    pub response_ratio: f64,
    pub cheap_noise: f64,
    pub expensive_noise: f64,
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self {
            clips: 128,
            room_width: 8,
            interaction_width: 8,
            object_width: 8,
            expensive_width: 64,
            query_len: QUERY_LEN,
            fine_events: 64,
            rooms: 6,
            interactions: 8,
            objects: 10,
            response_ratio: 0.04,
            cheap_noise: 0.6,
            expensive_noise: 0.1,
            distractor_rate: 0.3,
            seed: 0,
        }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<(), TaskGenError> {
        let mean_len = self.response_ratio * self.clips as f64;
        if !(mean_len >= 2.0) {
            return Err(TaskGenError::ResponseTooShort(mean_len));
        }
        let bad = |m: &str| Err(TaskGenError::InvalidConfig(m.to_string()));
        if self.query_len != QUERY_LEN {
            return bad("query_len must be 4 (room, interaction, object, fine tokens)");
        }
        if self.room_width == 0 || self.interaction_width == 0 || self.object_width == 0 {
            return bad("channel widths must be positive");
        }
        if self.expensive_width == 0 {
            return bad("expensive_width must be positive");
        }
        if self.rooms == 0 || self.interactions == 0 || self.objects == 0 {
            return bad("coarse category counts must be positive");
        }
        if self.fine_events < 2 {
            return bad("fine_events must be at least 2");
        }
        if self.triple_count() > self.rooms * self.interactions * self.objects {
            return bad("more coarse triples needed than rooms*interactions*objects");
        }
        if !(self.expensive_noise >= 0.0 && self.cheap_noise >= self.expensive_noise) {
            return bad("noise levels must satisfy cheap_noise >= expensive_noise >= 0");
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("distractor_rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn channels(&self) -> ChannelLayout {
        ChannelLayout {
            rooms: self.room_width,
            interactions: self.interaction_width,
            objects: self.object_width,
        }
    }

    pub fn cheap_width(&self) -> usize {
        self.channels().total()
    }

    pub fn vocab_size(&self) -> usize {
        self.rooms + self.interactions + self.objects + self.fine_events
    }

    fn triple_count(&self) -> usize {
        (self.fine_events / FINE_PER_TRIPLE).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Coarse triple of one fine event id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub room: usize,
    pub interaction: usize,
    pub object: usize,
}

/// Seeded lookup tables fixed per dataset seed (shared by all splits).
#[derive(Clone, Debug)]
pub struct TaskTables {
    pub fine_to_triple: Vec<Triple>,
    pub room_embedding: Array2<f64>,
    pub interaction_embedding: Array2<f64>,
    pub object_embedding: Array2<f64>,
    pub fine_embedding: Array2<f64>,
}

fn gaussian_table(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

impl TaskTables {
    pub fn from_config(config: &TaskGenConfig) -> Self {
        let mut rng = rng_from(config.seed, &[tag("tables")]);
        let grid = config.rooms * config.interactions * config.objects;
        let mut cells: Vec<usize> = (0..grid).collect();
        cells.shuffle(&mut rng);
        let triples: Vec<Triple> = cells[..config.triple_count()]
            .iter()
            .map(|&c| Triple {
                room: c / (config.interactions * config.objects),
                interaction: (c / config.objects) % config.interactions,
                object: c % config.objects,
            })
            .collect();
        let mut order: Vec<usize> = (0..config.fine_events).collect();
        order.shuffle(&mut rng);
        let mut fine_to_triple = vec![triples[0]; config.fine_events];
        for (pos, &fine) in order.iter().enumerate() {
            fine_to_triple[fine] = triples[pos % triples.len()];
        }
        Self {
            fine_to_triple,
            room_embedding: gaussian_table(&mut rng, config.rooms, config.room_width),
            interaction_embedding: gaussian_table(&mut rng, config.interactions, config.interaction_width),
            object_embedding: gaussian_table(&mut rng, config.objects, config.object_width),
            fine_embedding: gaussian_table(&mut rng, config.fine_events, config.expensive_width),
        }
    }

    /// Fine ids other than `fine` sharing its coarse triple.
    pub fn siblings(&self, fine: usize) -> Vec<usize> {
        let t = self.fine_to_triple[fine];
        (0..self.fine_to_triple.len())
            .filter(|&f| f != fine && self.fine_to_triple[f] == t)
            .collect()
    }
}

/// Token ids of the query for a target fine event.
pub fn query_tokens(config: &TaskGenConfig, triple: Triple, fine: usize) -> Vec<u32> {
    let r = config.rooms;
    let ri = r + config.interactions;
    let rio = ri + config.objects;
    vec![
        triple.room as u32,
        (r + triple.interaction) as u32,
        (ri + triple.object) as u32,
        (rio + fine) as u32,
    ]
}

/// Draws one instance. The lookup tables come from `config.seed`.
pub fn generate_instance(config: &TaskGenConfig, rng: &mut Rng) -> Result<EmInstance, TaskGenError> {
    config.validate()?;
    let tables = TaskTables::from_config(config);
    Ok(generate_with_tables(config, &tables, rng, "instance".to_string()))
}

fn pick_fine(rng: &mut Rng, fine_events: usize, allowed: impl Fn(usize) -> bool) -> usize {
    // Rejection sampling; every call site leaves at least half of the ids allowed.
    loop {
        let f = rng.gen_range(0..fine_events);
        if allowed(f) {
            return f;
        }
    }
}

fn generate_with_tables(config: &TaskGenConfig, tables: &TaskTables, rng: &mut Rng, id: String) -> EmInstance {
    let clips = config.clips;
    let mean_len = config.response_ratio * clips as f64;
    let geo = Geometric::new(1.0 / mean_len).expect("mean segment length >= 2");

    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut pos = 0;
    while pos < clips {
        let len = (geo.sample(rng) as usize + 1).min(clips - pos);
        segments.push((pos, pos + len - 1));
        pos += len;
    }
    let n_seg = segments.len();

    let e = config.fine_events;
    let mut fine = Vec::with_capacity(n_seg);
    for k in 0..n_seg {
        let prev = if k > 0 { Some(fine[k - 1]) } else { None };
        fine.push(pick_fine(rng, e, |f| Some(f) != prev));
    }
    let target = rng.gen_range(0..n_seg);
    let target_fine = fine[target];
    let target_triple = tables.fine_to_triple[target_fine];
    let neighbours_ok = |fine: &[usize], k: usize, f: usize| {
        (k == 0 || fine[k - 1] != f) && (k + 1 >= fine.len() || fine[k + 1] != f)
    };

    if config.distractor_rate > 0.0 {
        for k in 0..n_seg {
            if k != target && fine[k] == target_fine {
                let snapshot = fine.clone();
                fine[k] = pick_fine(rng, e, |f| f != target_fine && neighbours_ok(&snapshot, k, f));
            }
        }
        let siblings = tables.siblings(target_fine);
        if n_seg >= 2 && !siblings.is_empty() {
            let mut relabelled = false;
            for k in 0..n_seg {
                if k != target && rng.gen::<f64>() < config.distractor_rate {
                    fine[k] = *siblings.choose(rng).expect("non-empty");
                    relabelled = true;
                }
            }
            let shares = (0..n_seg)
                .any(|k| k != target && tables.fine_to_triple[fine[k]] == target_triple);
            if !relabelled && !shares {
                let mut k = rng.gen_range(0..n_seg - 1);
                if k >= target {
                    k += 1;
                }
                fine[k] = *siblings.choose(rng).expect("non-empty");
            }
        }
    } else {
        for k in 0..n_seg {
            if k != target && tables.fine_to_triple[fine[k]] == target_triple {
                let snapshot = fine.clone();
                fine[k] = pick_fine(rng, e, |f| {
                    tables.fine_to_triple[f] != target_triple && neighbours_ok(&snapshot, k, f)
                });
            }
        }
    }

    let (d_r, d_i, d_o) = (config.room_width, config.interaction_width, config.object_width);
    let d_s = d_r + d_i + d_o;
    let mut cheap = Array2::<f32>::zeros((clips, d_s));
    let mut expensive = Array2::<f32>::zeros((clips, config.expensive_width));
    let noise = |rng: &mut Rng, sigma: f64| {
        if sigma > 0.0 {
            sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    };
    for (k, &(start, end)) in segments.iter().enumerate() {
        let t = tables.fine_to_triple[fine[k]];
        for l in start..=end {
            let mut row = cheap.row_mut(l);
            for j in 0..d_r {
                row[j] = (tables.room_embedding[[t.room, j]] + noise(rng, config.cheap_noise)) as f32;
            }
            for j in 0..d_i {
                row[d_r + j] =
                    (tables.interaction_embedding[[t.interaction, j]] + noise(rng, config.cheap_noise)) as f32;
            }
            for j in 0..d_o {
                row[d_r + d_i + j] =
                    (tables.object_embedding[[t.object, j]] + noise(rng, config.cheap_noise)) as f32;
            }
            let mut erow = expensive.row_mut(l);
            for j in 0..config.expensive_width {
                erow[j] = (tables.fine_embedding[[fine[k], j]] + noise(rng, config.expensive_noise)) as f32;
            }
        }
    }

    let (start, end) = segments[target];
    EmInstance {
        instance_id: id,
        query_tokens: query_tokens(config, target_triple, target_fine),
        cheap,
        expensive,
        channels: config.channels(),
        ground_truth: TimeWindow { start, end },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub instances: Vec<EmInstance>,
    pub config: TaskGenConfig,
    pub split: Split,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

pub fn instance_id(split: Split, index: usize) -> String {
    format!("{}-{index:06}", split.name())
}

/// `n_instances` independent draws on a seed stream specific to `split`.
pub fn generate_dataset(
    config: &TaskGenConfig,
    n_instances: usize,
    split: Split,
) -> Result<SyntheticDataset, TaskGenError> {
    config.validate()?;
    if n_instances == 0 {
        return Err(TaskGenError::EmptyDataset);
    }
    let tables = TaskTables::from_config(config);
    let split_tag = tag(&format!("split:{}", split.name()));
    let instances = (0..n_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(config.seed, &[split_tag, i as u64]);
            generate_with_tables(config, &tables, &mut rng, instance_id(split, i))
        })
        .collect();
    Ok(SyntheticDataset {
        instances,
        config: config.clone(),
        split,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    split: Split,
    n_instances: usize,
    #[serde(flatten)]
    config: TaskGenConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetIoError + '_ {
    move |source| DatasetIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DatasetIoError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn write_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<(), DatasetIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        split: dataset.split,
        n_instances: dataset.len(),
        config: dataset.config.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DatasetIoError::MalformedManifest(e.to_string()))?;
    write_bytes(&dir.join("manifest"), text.as_bytes())?;

    let mut cheap = Vec::new();
    let mut expensive = Vec::new();
    let mut queries = Vec::new();
    let mut windows = Vec::new();
    for inst in &dataset.instances {
        cheap.extend(inst.cheap.iter().flat_map(|v| v.to_le_bytes()));
        expensive.extend(inst.expensive.iter().flat_map(|v| v.to_le_bytes()));
        queries.extend(inst.query_tokens.iter().flat_map(|&t| (t as i32).to_le_bytes()));
        windows.extend((inst.ground_truth.start as i32).to_le_bytes());
        windows.extend((inst.ground_truth.end as i32).to_le_bytes());
    }
    write_bytes(&dir.join("cheap.f32"), &cheap)?;
    write_bytes(&dir.join("expensive.f32"), &expensive)?;
    write_bytes(&dir.join("queries.i32"), &queries)?;
    write_bytes(&dir.join("windows.i32"), &windows)
}

/// Reads `name` as 4-byte little-endian words, checking `rows × row_len` exactly.
fn read_words(dir: &Path, name: &str, rows: usize, row_len: usize) -> Result<Vec<[u8; 4]>, DatasetIoError> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let row_bytes = row_len * 4;
    if row_bytes == 0 || bytes.len() % row_bytes != 0 {
        return Err(DatasetIoError::Truncated {
            file: name.to_string(),
            bytes: bytes.len() as u64,
        });
    }
    let expected = rows * row_len;
    let actual = bytes.len() / 4;
    if actual != expected {
        return Err(DatasetIoError::DimensionMismatch {
            file: name.to_string(),
            expected,
            actual,
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset, DatasetIoError> {
    let manifest_path = dir.join("manifest");
    if !manifest_path.is_file() {
        return Err(DatasetIoError::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DatasetIoError::MalformedManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetIoError::UnsupportedVersion(manifest.format_version));
    }
    let config = manifest.config;
    config.validate()?;
    let n = manifest.n_instances;
    let l = config.clips;
    let d_s = config.cheap_width();
    let d_v = config.expensive_width;
    let t = config.query_len;

    let cheap = read_words(dir, "cheap.f32", n * l, d_s)?;
    let expensive = read_words(dir, "expensive.f32", n * l, d_v)?;
    let queries = read_words(dir, "queries.i32", n, t)?;
    let windows = read_words(dir, "windows.i32", n, 2)?;

    let vocab = config.vocab_size() as i32;
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let c: Vec<f32> = cheap[i * l * d_s..(i + 1) * l * d_s]
            .iter()
            .map(|b| f32::from_le_bytes(*b))
            .collect();
        let x: Vec<f32> = expensive[i * l * d_v..(i + 1) * l * d_v]
            .iter()
            .map(|b| f32::from_le_bytes(*b))
            .collect();
        let q: Vec<i32> = queries[i * t..(i + 1) * t].iter().map(|b| i32::from_le_bytes(*b)).collect();
        if q.iter().any(|&tok| tok < 0 || tok >= vocab) {
            return Err(DatasetIoError::InvalidRecord {
                file: "queries.i32".into(),
                reason: format!("token out of vocabulary in row {i}"),
            });
        }
        let s = i32::from_le_bytes(windows[2 * i]);
        let e = i32::from_le_bytes(windows[2 * i + 1]);
        let window = usize::try_from(s)
            .ok()
            .zip(usize::try_from(e).ok())
            .and_then(|(s, e)| TimeWindow::new(s, e, l).ok())
            .ok_or_else(|| DatasetIoError::InvalidRecord {
                file: "windows.i32".into(),
                reason: format!("window [{s}, {e}] invalid for {l} clips in row {i}"),
            })?;
        let inst = EmInstance::new(
            instance_id(manifest.split, i),
            q.into_iter().map(|v| v as u32).collect(),
            Array2::from_shape_vec((l, d_s), c).expect("sizes checked"),
            Array2::from_shape_vec((l, d_v), x).expect("sizes checked"),
            config.channels(),
            window,
        )
        .map_err(|e| DatasetIoError::InvalidRecord {
            file: "cheap.f32".into(),
            reason: e.to_string(),
        })?;
        instances.push(inst);
    }
    Ok(SyntheticDataset {
        instances,
        config,
        split: manifest.split,
    })
}

/// Distinct instance ids (sanity helper used by dataset checks).
pub fn unique_ids(dataset: &SyntheticDataset) -> bool {
    let ids: HashSet<&str> = dataset.instances.iter().map(|i| i.instance_id.as_str()).collect();
    ids.len() == dataset.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> TaskGenConfig {
        TaskGenConfig {
            clips: 64,
            response_ratio: 0.05,
            seed: 11,
            ..TaskGenConfig::default()
        }
    }

    #[test]
    fn seeded_determinism() {
        let cfg = small();
        let a = generate_instance(&cfg, &mut Rng::seed_from_u64(5)).unwrap();
        let b = generate_instance(&cfg, &mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_short_responses() {
        let cfg = TaskGenConfig {
            clips: 20,
            response_ratio: 0.05,
            ..TaskGenConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TaskGenError::ResponseTooShort(_))));
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("response too short"));
    }

    #[test]
    fn rejects_inverted_noise() {
        let cfg = TaskGenConfig {
            cheap_noise: 0.05,
            expensive_noise: 0.1,
            ..TaskGenConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_basics() {
        let ds = generate_dataset(&small(), 3, Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(unique_ids(&ds));
        assert!(matches!(generate_dataset(&small(), 0, Split::Train), Err(TaskGenError::EmptyDataset)));
    }

    #[test]
    fn every_fine_id_has_a_sibling() {
        let cfg = TaskGenConfig::default();
        let tables = TaskTables::from_config(&cfg);
        for f in 0..cfg.fine_events {
            assert!(!tables.siblings(f).is_empty());
        }
    }

    #[test]
    fn distractor_shares_target_triple() {
        let cfg = TaskGenConfig {
            cheap_noise: 0.0,
            expensive_noise: 0.0,
            ..small()
        };
        let ds = generate_dataset(&cfg, 50, Split::Val).unwrap();
        for inst in &ds.instances {
            let gt = inst.ground_truth;
            if gt.len() == inst.clip_count() {
                continue;
            }
            let target_row = inst.cheap.row(gt.start);
            let target_fine = inst.expensive.row(gt.start);
            assert!((0..inst.clip_count()).any(|l| !gt.contains(l) && inst.cheap.row(l) == target_row));
            // the target's fine event appears nowhere else
            assert!((0..inst.clip_count()).all(|l| gt.contains(l) || inst.expensive.row(l) != target_fine));
        }
    }
}
