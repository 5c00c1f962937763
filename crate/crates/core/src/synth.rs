//! Synthetic long-tailed HOI scenes and their rasterized feature grids.
//!
//! Each instance is a human box and an object box. A verb is a spatial
//! relation: verb `k` holds when the direction from the human center to the
//! object center falls inside angular sector `k`. Neighbouring sectors
//! overlap, so some layouts carry two verbs. Verbs never depend on the
//! object class, which is what lets verb knowledge transfer between objects.
//!
//! Instance categories in the training split follow a Zipf law over the
//! feasible (object, action) pairs; the test split cycles through every
//! category so rare ones are still evaluated.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{GroundTruthSet, GtInstance};
use crate::model::{FeatureGrid, FeatureMap};
use crate::recompose::FeasibilityTable;
use crate::tensor::Tensor;

/// Extra width of each verb sector relative to an even split of the circle.
pub const SECTOR_OVERLAP: f64 = 0.3;
/// Range of human-to-object center distances.
pub const PARTNER_DISTANCE: (f64, f64) = (0.15, 0.32);
/// Human width and height ranges `(w_lo, w_hi, h_lo, h_hi)`.
pub const HUMAN_SIZE: (f64, f64, f64, f64) = (0.12, 0.2, 0.2, 0.3);
/// Object side range.
pub const OBJECT_SIZE: (f64, f64) = (0.1, 0.18);
/// Channels before the object one-hot block.
pub const GEOMETRY_CHANNELS: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_objects: usize,
    pub num_actions: usize,
    /// Fraction of (object, action) pairs that are feasible.
    pub feasibility_density: f64,
    pub zipf_exponent: f64,
    pub train_images: usize,
    pub test_images: usize,
    pub max_instances: usize,
    pub grid: FeatureGrid,
    pub seed: u64,
    /// Categories with fewer training instances than this are rare.
    pub rare_threshold: usize,
    pub min_test_per_category: usize,
    /// Layout attempts per instance before giving up.
    pub rejection_budget: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_objects: 6,
            num_actions: 5,
            feasibility_density: 0.5,
            zipf_exponent: 1.5,
            train_images: 600,
            test_images: 120,
            max_instances: 3,
            grid: FeatureGrid {
                height: 6,
                width: 6,
                channels: 32,
            },
            seed: 0,
            rare_threshold: 10,
            min_test_per_category: 5,
            rejection_budget: 2000,
        }
    }
}

impl DatasetSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_objects == 0 || self.num_actions == 0 {
            return bad("num_objects and num_actions must be positive".into());
        }
        if !(self.feasibility_density > 0.0 && self.feasibility_density <= 1.0) {
            return bad(format!("feasibility_density {} outside (0, 1]", self.feasibility_density));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad(format!("zipf_exponent {} must be non-negative", self.zipf_exponent));
        }
        if self.max_instances == 0 {
            return bad("max_instances must be positive".into());
        }
        if GEOMETRY_CHANNELS + self.num_objects > self.grid.channels {
            return bad(format!(
                "grid has {} channels, rasterization needs {}",
                self.grid.channels,
                GEOMETRY_CHANNELS + self.num_objects
            ));
        }
        if self.grid.cells() < 2 * self.max_instances {
            return bad("grid too small for max_instances".into());
        }
        Ok(())
    }

    pub fn num_feasible_pairs(&self) -> usize {
        let total = self.num_objects * self.num_actions;
        let k = (self.feasibility_density * total as f64).round() as usize;
        k.clamp(self.num_objects.max(self.num_actions), total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Human,
    Object { class: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub kind: EntityKind,
    /// `(cx, cy, w, h)` in `(0, 1)`.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: u64,
    pub entities: Vec<Entity>,
    /// `(human entity, object entity)` of each ground-truth instance.
    pub pairs: Vec<(usize, usize)>,
    pub gt: GroundTruthSet<f64>,
}

/// Builds the feasibility table: `round(density · N_o · N_a)` pairs, with
/// every object and every action feasible somewhere.
pub fn generate_table(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<FeasibilityTable> {
    let (no, na) = (spec.num_objects, spec.num_actions);
    let mut matrix = vec![vec![false; na]; no];
    let mut objects: Vec<usize> = (0..no).collect();
    let mut actions: Vec<usize> = (0..na).collect();
    objects.shuffle(rng);
    actions.shuffle(rng);
    for i in 0..no.max(na) {
        matrix[objects[i % no]][actions[i % na]] = true;
    }
    let mut rest: Vec<(usize, usize)> = (0..no)
        .flat_map(|o| (0..na).map(move |a| (o, a)))
        .filter(|&(o, a)| !matrix[o][a])
        .collect();
    rest.shuffle(rng);
    let missing = spec.num_feasible_pairs() - no.max(na);
    for &(o, a) in rest.iter().take(missing) {
        matrix[o][a] = true;
    }
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}_{i}")).collect();
    FeasibilityTable::from_matrix(names("object", no), names("action", na), &matrix)
}

/// Direction of the object center seen from the human center, in `[0, 2π)`.
pub fn direction(human: [f64; 4], object: [f64; 4]) -> f64 {
    let a = (object[1] - human[1]).atan2(object[0] - human[0]);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

fn sector_center(k: usize, num_actions: usize) -> f64 {
    2.0 * PI * k as f64 / num_actions as f64
}

fn sector_half_width(num_actions: usize) -> f64 {
    (1.0 + SECTOR_OVERLAP) * PI / num_actions as f64
}

/// Verbs whose sector contains `angle`.
pub fn verbs_for_direction(angle: f64, num_actions: usize) -> Vec<bool> {
    let h = sector_half_width(num_actions);
    (0..num_actions)
        .map(|k| {
            let d = (angle - sector_center(k, num_actions)).rem_euclid(2.0 * PI);
            d.min(2.0 * PI - d) <= h
        })
        .collect()
}

/// Category sampler and frequency ranking shared by every scene.
#[derive(Clone, Debug)]
pub struct CategoryPrior {
    /// Zipf rank (0 = most frequent) of each category.
    pub rank: Vec<usize>,
    pub probabilities: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl CategoryPrior {
    pub fn new(num_categories: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if num_categories == 0 {
            return Err(Error::Generation("no feasible categories".into()));
        }
        let mut order: Vec<usize> = (0..num_categories).collect();
        order.shuffle(rng);
        let mut rank = vec![0; num_categories];
        for (r, &c) in order.iter().enumerate() {
            rank[c] = r;
        }
        let weights: Vec<f64> = rank.iter().map(|&r| ((r + 1) as f64).powf(-exponent)).collect();
        let z: f64 = weights.iter().sum();
        let probabilities = weights.iter().map(|w| w / z).collect();
        let sampler = WeightedIndex::new(&weights).map_err(|e| Error::Generation(e.to_string()))?;
        Ok(Self {
            rank,
            probabilities,
            sampler,
        })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        self.sampler.sample(rng)
    }
}

/// Instance count in `1..=max`, with `P(n) ∝ n⁻²`.
fn instance_count(max: usize, rng: &mut ChaCha8Rng) -> usize {
    let w: Vec<f64> = (1..=max).map(|n| 1.0 / (n * n) as f64).collect();
    WeightedIndex::new(&w).expect("positive weights").sample(rng) + 1
}

fn cell_of(b: [f64; 4], grid: FeatureGrid) -> (usize, usize) {
    let i = ((b[1] * grid.height as f64) as usize).min(grid.height - 1);
    let j = ((b[0] * grid.width as f64) as usize).min(grid.width - 1);
    (i, j)
}

fn inside(b: [f64; 4]) -> bool {
    b[0] - b[2] / 2.0 > 0.0 && b[0] + b[2] / 2.0 < 1.0 && b[1] - b[3] / 2.0 > 0.0 && b[1] + b[3] / 2.0 < 1.0
}

/// Lays out one scene whose instances realize the `targets` categories.
///
/// A layout is accepted when its verb set contains the target verb, every
/// verb is feasible for the object, and any extra verb belongs to a category
/// at least as frequent as the target. Entity centers occupy distinct grid
/// cells.
pub fn generate_scene(
    spec: &DatasetSpec,
    table: &FeasibilityTable,
    prior: &CategoryPrior,
    image_id: u64,
    targets: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    let na = spec.num_actions;
    let h = sector_half_width(na);
    let mut entities: Vec<Entity> = Vec::new();
    let mut pairs = Vec::new();
    let mut instances = Vec::new();
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for &cat in targets {
        let (object, action) = table.categories()[cat];
        let mut placed = None;
        for _ in 0..spec.rejection_budget {
            let human = [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(HUMAN_SIZE.0..HUMAN_SIZE.1),
                rng.random_range(HUMAN_SIZE.2..HUMAN_SIZE.3),
            ];
            let theta = sector_center(action, na) + rng.random_range(-h..h);
            let d = rng.random_range(PARTNER_DISTANCE.0..PARTNER_DISTANCE.1);
            let obj = [
                human[0] + d * theta.cos(),
                human[1] + d * theta.sin(),
                rng.random_range(OBJECT_SIZE.0..OBJECT_SIZE.1),
                rng.random_range(OBJECT_SIZE.0..OBJECT_SIZE.1),
            ];
            if !inside(human) || !inside(obj) {
                continue;
            }
            let (ch, co) = (cell_of(human, spec.grid), cell_of(obj, spec.grid));
            if ch == co || cells.contains(&ch) || cells.contains(&co) {
                continue;
            }
            let verbs = verbs_for_direction(direction(human, obj), na);
            if !verbs[action] {
                continue;
            }
            let acceptable = verbs.iter().enumerate().filter(|(_, &v)| v).all(|(a, _)| {
                table
                    .category(object, a)
                    .is_some_and(|c| prior.rank[c] <= prior.rank[cat])
            });
            if acceptable {
                placed = Some((human, obj, verbs, ch, co));
                break;
            }
        }
        let Some((human, obj, verbs, ch, co)) = placed else {
            return Err(Error::Generation(format!(
                "image {image_id}: no layout for category {cat} (object {object}, action {action}) \
                 after {} attempts with {} entities placed",
                spec.rejection_budget,
                entities.len()
            )));
        };
        cells.extend([ch, co]);
        pairs.push((entities.len(), entities.len() + 1));
        entities.push(Entity {
            kind: EntityKind::Human,
            bbox: human,
        });
        entities.push(Entity {
            kind: EntityKind::Object { class: object },
            bbox: obj,
        });
        instances.push(GtInstance {
            human_box: human,
            object_box: obj,
            object_class: object,
            actions: verbs,
        });
    }
    Ok(Scene {
        image_id,
        entities,
        pairs,
        gt: GroundTruthSet::new(spec.num_objects, spec.num_actions, instances)?,
    })
}

/// Feature grid of a scene. At the cell holding an entity center:
///
/// | channels | human | object |
/// |---|---|---|
/// | presence | 0 | 7 |
/// | center (x, y) in image coordinates | 1, 2 | 8, 9 |
/// | width, height | 3, 4 | 10, 11 |
/// | displacement to the partner center (x, y) | 5, 6 | 12, 13 |
///
/// Channel `14 + c` is set at the cell of an object of class `c`. Every
/// other entry is zero. Centers are absolute because attention values carry
/// no positional encoding.
pub fn rasterize(scene: &Scene, grid: FeatureGrid, num_objects: usize) -> Result<FeatureMap<f64>> {
    if GEOMETRY_CHANNELS + num_objects > grid.channels {
        return Err(Error::shape("rasterize", &[GEOMETRY_CHANNELS + num_objects], &[grid.channels]));
    }
    let c = grid.channels;
    let mut data = vec![0.0; grid.cells() * c];
    for &(hi, oi) in &scene.pairs {
        let (hb, ob) = (scene.entities[hi].bbox, scene.entities[oi].bbox);
        for (me, other, base) in [(hb, ob, 0usize), (ob, hb, 7)] {
            let (i, j) = cell_of(me, grid);
            let cell = &mut data[(i * grid.width + j) * c..(i * grid.width + j + 1) * c];
            cell[base] = 1.0;
            cell[base + 1] = me[0];
            cell[base + 2] = me[1];
            cell[base + 3] = me[2];
            cell[base + 4] = me[3];
            cell[base + 5] = other[0] - me[0];
            cell[base + 6] = other[1] - me[1];
        }
        if let EntityKind::Object { class } = scene.entities[oi].kind {
            let (i, j) = cell_of(ob, grid);
            data[(i * grid.width + j) * c + GEOMETRY_CHANNELS + class] = 1.0;
        }
    }
    FeatureMap::new(Tensor::new(vec![grid.height, grid.width, c], data)?)
}

/// Per-category instance counts and the rare / non-rare split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryCensus {
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub rare_threshold: usize,
    /// Evaluated categories (at least one test instance) with fewer than
    /// `rare_threshold` training instances.
    pub rare: Vec<usize>,
    pub non_rare: Vec<usize>,
}

/// Counts one per positive action of each instance.
pub fn count_categories(scenes: &[Scene], table: &FeasibilityTable) -> Vec<usize> {
    let mut counts = vec![0; table.num_categories()];
    for s in scenes {
        for inst in &s.gt.instances {
            for a in inst.positive_actions() {
                if let Some(c) = table.category(inst.object_class, a) {
                    counts[c] += 1;
                }
            }
        }
    }
    counts
}

impl CategoryCensus {
    pub fn new(train: &[Scene], test: &[Scene], table: &FeasibilityTable, rare_threshold: usize) -> Self {
        let train_counts = count_categories(train, table);
        let test_counts = count_categories(test, table);
        let (mut rare, mut non_rare) = (Vec::new(), Vec::new());
        for c in 0..table.num_categories() {
            if test_counts[c] == 0 {
                continue;
            }
            if train_counts[c] < rare_threshold {
                rare.push(c);
            } else {
                non_rare.push(c);
            }
        }
        Self {
            train_counts,
            test_counts,
            rare_threshold,
            rare,
            non_rare,
        }
    }

    pub fn is_rare(&self, category: usize) -> bool {
        self.rare.contains(&category)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub table: FeasibilityTable,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub census: CategoryCensus,
}

/// Independent random stream for one purpose and index.
pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const TABLE_STREAM: u64 = 1;
const PRIOR_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const TEST_STREAM: u64 = 4;

/// Generates both splits. Training instances follow the Zipf prior; test
/// instances cycle through all categories in id order so that each gets at
/// least `min_test_per_category` instances.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let table = generate_table(spec, &mut stream(spec.seed, TABLE_STREAM, 0))?;
    let prior = CategoryPrior::new(table.num_categories(), spec.zipf_exponent, &mut stream(spec.seed, PRIOR_STREAM, 0))?;

    let mut train = Vec::with_capacity(spec.train_images);
    for i in 0..spec.train_images {
        let mut rng = stream(spec.seed, TRAIN_STREAM, i as u64);
        let n = instance_count(spec.max_instances, &mut rng);
        let targets: Vec<usize> = (0..n).map(|_| prior.sample(&mut rng)).collect();
        train.push(generate_scene(spec, &table, &prior, i as u64, &targets, &mut rng)?);
    }

    let k = table.num_categories();
    let mut test_streams = Vec::with_capacity(spec.test_images);
    for i in 0..spec.test_images {
        let mut rng = stream(spec.seed, TEST_STREAM, i as u64);
        let n = instance_count(spec.max_instances, &mut rng);
        test_streams.push((rng, n));
    }
    let total: usize = test_streams.iter().map(|(_, n)| n).sum();
    if total < spec.min_test_per_category * k {
        return Err(Error::Config(format!(
            "test split has {total} instances, stratification needs {} ({} per category x {k})",
            spec.min_test_per_category * k,
            spec.min_test_per_category
        )));
    }
    let mut test = Vec::with_capacity(spec.test_images);
    let mut next = 0usize;
    for (i, (mut rng, n)) in test_streams.into_iter().enumerate() {
        let targets: Vec<usize> = (0..n).map(|j| (next + j) % k).collect();
        next += n;
        let id = (spec.train_images + i) as u64;
        test.push(generate_scene(spec, &table, &prior, id, &targets, &mut rng)?);
    }
    let census = CategoryCensus::new(&train, &test, &table, spec.rare_threshold);
    Ok(Dataset {
        spec: spec.clone(),
        table,
        train,
        test,
        census,
    })
}

pub const DATASET_FORMAT: &str = "compohoi-dataset";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    spec: DatasetSpec,
    table: String,
    train: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLine {
    split: Split,
    #[serde(flatten)]
    scene: Scene,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    Train,
    Test,
}

impl Dataset {
    /// One JSON header line, then one scene per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: 1,
            spec: self.spec.clone(),
            table: self.table.to_json(),
            train: self.train.len(),
            test: self.test.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for (split, scenes) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            for scene in scenes {
                let line = SceneLine {
                    split,
                    scene: scene.clone(),
                };
                writeln!(w, "{}", serde_json::to_string(&line)?)?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Parses a dataset file; any malformed or missing line is an error
    /// naming the line.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let parse = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| parse(1, "missing header".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
        if header.format != DATASET_FORMAT || header.version != 1 {
            return Err(parse(1, format!("unsupported format {} v{}", header.format, header.version)));
        }
        let table = FeasibilityTable::from_json(&header.table).map_err(|e| parse(1, e.to_string()))?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (k, line) in lines.enumerate() {
            let n = k + 2;
            let line = line?;
            let item: SceneLine = serde_json::from_str(&line).map_err(|e| parse(n, e.to_string()))?;
            item.scene.gt.validate().map_err(|e| parse(n, e.to_string()))?;
            match item.split {
                Split::Train => train.push(item.scene),
                Split::Test => test.push(item.scene),
            }
        }
        if train.len() != header.train || test.len() != header.test {
            let got = train.len() + test.len() + 1;
            return Err(parse(
                got + 1,
                format!(
                    "expected {} train and {} test scenes, found {} and {} (truncated file?)",
                    header.train,
                    header.test,
                    train.len(),
                    test.len()
                ),
            ));
        }
        let census = CategoryCensus::new(&train, &test, &table, header.spec.rare_threshold);
        Ok(Self {
            spec: header.spec,
            table,
            train,
            test,
            census,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }

    /// Human-readable category summary.
    pub fn census_table(&self) -> String {
        let mut s = String::from("category,object,action,train,test,rare\n");
        for (c, &(o, a)) in self.table.categories().iter().enumerate() {
            let _ = writeln!(
                s,
                "{c},{},{},{},{},{}",
                self.table.object_names()[o],
                self.table.action_names()[a],
                self.census.train_counts[c],
                self.census.test_counts[c],
                self.census.is_rare(c)
            );
        }
        s
    }
}
