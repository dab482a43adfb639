//! Synthetic grounding scenes.
//!
//! A scene hides `N_x` ground-truth objects near anchors of a fixed grid and
//! exposes only a descriptor: soft evidence over the anchors (plus a trailing
//! constant 1.0 bias entry). Easy scenes carry sharp evidence at the targets.
//! Hard scenes blur it and add look-alike distractors next to the targets, so
//! the strongest evidence is often wrong.
//!
//! Dataset files are JSON lines: a header record followed by one scene per line.
//!
//! ```text
//! {"format":"revgrpo-scenes","version":1,"env_hash":"…","descriptor_len":129}
//! {"id":0,"seed":…,"difficulty":"hard","gt":[{"bbox":[…],"point":[…]}],"descriptor":[…]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{iou, BoxN, PointN};
use crate::seed;

pub const DATASET_FORMAT: &str = "revgrpo-scenes";
pub const DATASET_VERSION: u32 = 1;

/// Fraction of a grid cell bounding the ground-truth center displacement.
pub const JITTER_CELLS: f64 = 0.25;
/// Minimum ratio of the strongest distractor's evidence to the weakest target's.
pub const DISTRACTOR_RATIO: f64 = 0.8;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Schema {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Shape of the environment. Everything that fixes the policy's parameter
/// shape lives here, and [`EnvConfig::hash`] fingerprints it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid: usize,
    pub scales: Vec<f64>,
    pub max_objects: usize,
    /// Maximum number of objects a response may contain (`M_max`).
    pub max_slots: usize,
    pub easy_temperature: f64,
    pub hard_temperature: f64,
    /// Range of hard-tier distractor weights, relative to a target's weight of 1.
    pub distractor_weight: [f64; 2],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            scales: vec![0.15, 0.3],
            max_objects: 4,
            max_slots: 6,
            easy_temperature: 0.05,
            hard_temperature: 0.2,
            distractor_weight: [1.0, 1.4],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.grid < 2 {
            v.push(format!("env.grid must be >= 2 (got {})", self.grid));
        }
        if self.scales.is_empty() {
            v.push("env.scales must not be empty".into());
        }
        for s in &self.scales {
            if !(*s > 0.0 && *s <= 1.0) {
                v.push(format!("env.scales entries must lie in (0, 1] (got {s})"));
            }
        }
        if self.max_objects < 1 {
            v.push("env.max_objects must be >= 1".into());
        }
        if self.max_slots < 1 {
            v.push("env.max_slots must be >= 1".into());
        }
        if self.grid >= 2 && !self.scales.is_empty() && self.max_objects > self.num_anchors() {
            v.push(format!(
                "env.max_objects ({}) exceeds the number of anchors ({})",
                self.max_objects,
                self.num_anchors()
            ));
        }
        for (name, t) in [
            ("easy_temperature", self.easy_temperature),
            ("hard_temperature", self.hard_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                v.push(format!("env.{name} must be positive (got {t})"));
            }
        }
        let [lo, hi] = self.distractor_weight;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            v.push(format!(
                "env.distractor_weight must satisfy 0 < min <= max (got [{lo}, {hi}])"
            ));
        }
        v
    }

    pub fn num_anchors(&self) -> usize {
        self.grid * self.grid * self.scales.len()
    }

    /// Length of the scene descriptor: one entry per anchor plus a bias.
    pub fn descriptor_len(&self) -> usize {
        self.num_anchors() + 1
    }

    /// Short fingerprint of the config, shared by datasets and checkpoints.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn grid(&self) -> Result<AnchorGrid, SceneError> {
        anchor_grid(self.grid, &self.scales)
    }
}

/// Candidate `(box, point)` actions laid out on a `g x g` grid crossed with
/// a set of box scales. Anchor `(i, j, s)` has index `(i * g + j) * S + s`,
/// where `i` runs along x and `j` along y.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    g: usize,
    scales: Vec<f64>,
    cells: Vec<(BoxN, PointN)>,
    /// Pairwise IoU between anchor boxes, row-major `K x K`.
    overlap: Vec<f64>,
}

pub fn anchor_grid(g: usize, scales: &[f64]) -> Result<AnchorGrid, SceneError> {
    if g < 2 {
        return Err(SceneError::Config(format!(
            "grid side must be >= 2, got {g}"
        )));
    }
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
        return Err(SceneError::Config(format!(
            "scales must be non-empty and in (0, 1], got {scales:?}"
        )));
    }
    let mut cells = Vec::with_capacity(g * g * scales.len());
    for i in 0..g {
        for j in 0..g {
            let cx = (i as f64 + 0.5) / g as f64;
            let cy = (j as f64 + 0.5) / g as f64;
            for &s in scales {
                let b = BoxN::centered_clamped(cx, cy, s, s);
                cells.push((b, b.center()));
            }
        }
    }
    let k = cells.len();
    let mut overlap = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            overlap[a * k + b] = iou(&cells[a].0, &cells[b].0);
        }
    }
    Ok(AnchorGrid {
        g,
        scales: scales.to_vec(),
        cells,
        overlap,
    })
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn side(&self) -> usize {
        self.g
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn anchor(&self, index: usize) -> (BoxN, PointN) {
        self.cells[index]
    }

    pub fn cells(&self) -> &[(BoxN, PointN)] {
        &self.cells
    }

    /// `(i, j, s)` coordinates of an anchor index.
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let ns = self.scales.len();
        let s = index % ns;
        let cell = index / ns;
        (cell / self.g, cell % self.g, s)
    }

    pub fn overlap(&self, a: usize, b: usize) -> f64 {
        self.overlap[a * self.cells.len() + b]
    }

    /// Anchors in the same or an 8-connected neighbouring cell, any scale.
    pub fn neighbours(&self, index: usize) -> Vec<usize> {
        let (i, j, _) = self.coords(index);
        let ns = self.scales.len();
        let mut out = Vec::new();
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < 0 || nj < 0 || ni >= self.g as i64 || nj >= self.g as i64 {
                    continue;
                }
                for s in 0..ns {
                    let idx = ((ni as usize) * self.g + nj as usize) * ns + s;
                    if idx != index {
                        out.push(idx);
                    }
                }
            }
        }
        out
    }

    /// Evidence profile of one anchor: `exp(-(1 - IoU(a, centre)) / temperature)`.
    fn soft_one_hot(&self, centre: usize, temperature: f64, weight: f64, into: &mut [f64]) {
        for (a, slot) in into.iter_mut().enumerate().take(self.cells.len()) {
            *slot += weight * (-(1.0 - self.overlap(a, centre)) / temperature).exp();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One synthetic image-question pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub id: u64,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub gt_boxes: Vec<BoxN>,
    pub gt_points: Vec<PointN>,
    /// `K` evidence entries followed by a constant 1.0.
    pub descriptor: Vec<f64>,
}

impl SceneSpec {
    pub fn num_objects(&self) -> usize {
        self.gt_boxes.len()
    }

    /// Textual stand-in for the question paired with the scene.
    pub fn question(&self) -> String {
        format!("Locate every referenced object in scene {}.", self.id)
    }
}

/// Draws one scene. Target anchors are sampled without replacement and
/// jittered by at most [`JITTER_CELLS`] of a cell to form the ground truth.
pub fn generate_scene<R: Rng + ?Sized>(
    rng: &mut R,
    difficulty: Difficulty,
    grid: &AnchorGrid,
    max_objects: usize,
    env: &EnvConfig,
) -> (Vec<usize>, SceneSpec) {
    let k = grid.len();
    let max_objects = max_objects.clamp(1, k);
    let n = rng.random_range(1..=max_objects);
    let mut targets = sample(rng, k, n).into_vec();
    targets.sort_unstable();

    let cell = 1.0 / grid.side() as f64;
    let mut gt_boxes = Vec::with_capacity(n);
    let mut gt_points = Vec::with_capacity(n);
    for &t in &targets {
        let (_, _, s) = grid.coords(t);
        let side = grid.scales()[s];
        let centre = grid.anchor(t).0.center();
        // Uniform displacement inside a disc of radius JITTER_CELLS cells.
        let r = JITTER_CELLS * cell * rng.random::<f64>().sqrt();
        let angle = std::f64::consts::TAU * rng.random::<f64>();
        let b = BoxN::centered_clamped(
            centre.x() + r * angle.cos(),
            centre.y() + r * angle.sin(),
            side,
            side,
        );
        let c = b.center();
        let px = c.x() + (rng.random::<f64>() - 0.5) * 0.25 * b.width();
        let py = c.y() + (rng.random::<f64>() - 0.5) * 0.25 * b.height();
        let p = PointN::new(px.clamp(b.x1(), b.x2()), py.clamp(b.y1(), b.y2()))
            .expect("point inside box");
        gt_boxes.push(b);
        gt_points.push(p);
    }

    let mut descriptor = vec![0.0; k + 1];
    match difficulty {
        Difficulty::Easy => {
            for &t in &targets {
                grid.soft_one_hot(t, env.easy_temperature, 1.0, &mut descriptor);
            }
        }
        Difficulty::Hard => {
            let mut pool: Vec<usize> = targets
                .iter()
                .flat_map(|&t| grid.neighbours(t))
                .filter(|a| !targets.contains(a))
                .collect();
            pool.sort_unstable();
            pool.dedup();
            let want = rng.random_range(2..=4usize).min(pool.len());
            let picks = sample(rng, pool.len(), want).into_vec();
            let mut distractors: Vec<(usize, f64)> = picks
                .into_iter()
                .map(|i| {
                    (
                        pool[i],
                        rng.random_range(env.distractor_weight[0]..=env.distractor_weight[1]),
                    )
                })
                .collect();
            distractors.sort_by_key(|d| d.0);

            let build = |distractors: &[(usize, f64)]| {
                let mut d = vec![0.0; k + 1];
                for &t in &targets {
                    grid.soft_one_hot(t, env.hard_temperature, 1.0, &mut d);
                }
                for &(a, w) in distractors {
                    grid.soft_one_hot(a, env.hard_temperature, w, &mut d);
                }
                d
            };
            descriptor = build(&distractors);
            // Raising a distractor also leaks a little mass onto its target,
            // so iterate until the ratio holds.
            while let Some(strongest) = distractors
                .iter()
                .enumerate()
                .max_by(|x, y| descriptor[x.1 .0].total_cmp(&descriptor[y.1 .0]))
                .map(|(i, _)| i)
            {
                let weakest_target = targets
                    .iter()
                    .map(|&t| descriptor[t])
                    .fold(f64::INFINITY, f64::min);
                let mass = descriptor[distractors[strongest].0];
                if mass >= DISTRACTOR_RATIO * weakest_target {
                    break;
                }
                distractors[strongest].1 += DISTRACTOR_RATIO * weakest_target - mass + 1e-9;
                descriptor = build(&distractors);
            }
        }
    }
    descriptor[k] = 1.0;

    let scene = SceneSpec {
        id: 0,
        seed: 0,
        difficulty,
        gt_boxes,
        gt_points,
        descriptor,
    };
    (targets, scene)
}

/// How a dataset's scenes are split across tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyMix {
    Easy,
    Hard,
    /// Even-indexed scenes easy, odd-indexed hard.
    Mixed,
}

impl DifficultyMix {
    pub fn tier(&self, index: u64) -> Difficulty {
        match self {
            DifficultyMix::Easy => Difficulty::Easy,
            DifficultyMix::Hard => Difficulty::Hard,
            DifficultyMix::Mixed if index % 2 == 0 => Difficulty::Easy,
            DifficultyMix::Mixed => Difficulty::Hard,
        }
    }
}

/// Scene `i` is drawn from its own stream seeded with `derive(master, [SCENE, i])`.
pub fn generate_dataset(
    master_seed: u64,
    count: usize,
    mix: DifficultyMix,
    env: &EnvConfig,
) -> Result<Vec<SceneSpec>, SceneError> {
    let problems = env.validate();
    if !problems.is_empty() {
        return Err(SceneError::Config(problems.join("; ")));
    }
    let grid = env.grid()?;
    Ok((0..count as u64)
        .map(|i| {
            let s = seed::derive(master_seed, &[seed::SCENE, i]);
            let mut rng = seed::stream(s, &[]);
            let (_, mut scene) = generate_scene(&mut rng, mix.tier(i), &grid, env.max_objects, env);
            scene.id = i;
            scene.seed = s;
            scene
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    env_hash: String,
    descriptor_len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtObject {
    bbox: BoxN,
    point: PointN,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    id: u64,
    seed: u64,
    difficulty: Difficulty,
    gt: Vec<GtObject>,
    descriptor: Vec<f64>,
}

/// Header fields of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetInfo {
    pub env_hash: String,
    pub descriptor_len: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_dataset(scenes: &[SceneSpec], env: &EnvConfig, path: &Path) -> Result<(), SceneError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        env_hash: env.hash(),
        descriptor_len: env.descriptor_len(),
    };
    let mut write_line = |v: String| writeln!(w, "{v}").map_err(io_err(path));
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for s in scenes {
        let record = SceneRecord {
            id: s.id,
            seed: s.seed,
            difficulty: s.difficulty,
            gt: s
                .gt_boxes
                .iter()
                .zip(&s.gt_points)
                .map(|(b, p)| GtObject {
                    bbox: *b,
                    point: *p,
                })
                .collect(),
            descriptor: s.descriptor.clone(),
        };
        write_line(serde_json::to_string(&record).expect("scene serializes"))?;
    }
    w.flush().map_err(io_err(path))
}

/// Loads a dataset. A zero-byte file is an empty dataset without header.
pub fn load_dataset(path: &Path) -> Result<(Option<DatasetInfo>, Vec<SceneSpec>), SceneError> {
    let file = File::open(path).map_err(io_err(path))?;
    let schema = |line: usize, msg: String| SceneError::Schema {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut info: Option<DatasetInfo> = None;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err(path))?;
        match &info {
            None => {
                let h: Header = serde_json::from_str(&line)
                    .map_err(|e| schema(lineno, format!("bad header: {e}")))?;
                if h.format != DATASET_FORMAT || h.version != DATASET_VERSION {
                    return Err(schema(
                        lineno,
                        format!(
                            "unsupported format {}/{}, expected {DATASET_FORMAT}/{DATASET_VERSION}",
                            h.format, h.version
                        ),
                    ));
                }
                info = Some(DatasetInfo {
                    env_hash: h.env_hash,
                    descriptor_len: h.descriptor_len,
                });
            }
            Some(meta) => {
                let r: SceneRecord =
                    serde_json::from_str(&line).map_err(|e| schema(lineno, e.to_string()))?;
                if r.gt.is_empty() {
                    return Err(schema(lineno, "scene has no ground-truth objects".into()));
                }
                if r.descriptor.len() != meta.descriptor_len {
                    return Err(schema(
                        lineno,
                        format!(
                            "descriptor has {} entries, header says {}",
                            r.descriptor.len(),
                            meta.descriptor_len
                        ),
                    ));
                }
                if let Some(v) = r.descriptor.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Err(schema(
                        lineno,
                        format!("descriptor entry {v} is not finite and non-negative"),
                    ));
                }
                if let Some(g) = r.gt.iter().find(|g| !g.bbox.contains(g.point)) {
                    return Err(schema(
                        lineno,
                        format!("point {:?} lies outside its box {:?}", g.point, g.bbox),
                    ));
                }
                scenes.push(SceneSpec {
                    id: r.id,
                    seed: r.seed,
                    difficulty: r.difficulty,
                    gt_boxes: r.gt.iter().map(|g| g.bbox).collect(),
                    gt_points: r.gt.iter().map(|g| g.point).collect(),
                    descriptor: r.descriptor,
                });
            }
        }
    }
    Ok((info, scenes))
}
