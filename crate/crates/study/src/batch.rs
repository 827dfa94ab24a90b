//! Trial scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StudyError};

/// Display durations of timed trials, in milliseconds.
pub const DURATIONS_MS: [u32; 7] = [125, 250, 500, 1000, 2000, 4000, 8000];

/// Condition id used for the reference images of sentinel trials.
pub const REFERENCE_CONDITION: &str = "reference";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingMode {
    Unlimited,
    Timed,
}

/// Condition id to image directory. Images are `<dir>/<layout_id>.png`;
/// relative directories resolve against `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub root: PathBuf,
    pub conditions: BTreeMap<String, PathBuf>,
}

impl ConditionSet {
    /// Reads a JSON object `{condition_id: directory}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| StudyError::io(path, e))?;
        let conditions: BTreeMap<String, PathBuf> =
            serde_json::from_str(&text).map_err(|e| StudyError::json(path, e))?;
        Ok(ConditionSet {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            conditions,
        })
    }

    pub fn image_path(&self, dir: &Path, layout_id: &str) -> PathBuf {
        self.root.join(dir).join(format!("{layout_id}.png"))
    }

    /// Layout ids shared by every condition directory, sorted.
    pub fn common_layout_ids(&self) -> Result<Vec<String>> {
        let mut common: Option<Vec<String>> = None;
        for dir in self.conditions.values() {
            let full = self.root.join(dir);
            let mut ids: Vec<String> = fs::read_dir(&full)
                .map_err(|e| StudyError::io(&full, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .collect();
            ids.sort();
            common = Some(match common {
                None => ids,
                Some(prev) => prev.into_iter().filter(|id| ids.binary_search(id).is_ok()).collect(),
            });
        }
        Ok(common.unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentinelSpec {
    /// Directory of reference photographs, relative to the condition root.
    pub reference: PathBuf,
    /// Condition known to look clearly synthetic.
    pub weak: String,
    pub count: usize,
    /// Fixed duration for sentinels; otherwise they follow the timing mode.
    #[serde(default)]
    pub display_ms: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonTrial {
    pub trial_id: String,
    pub condition_a: String,
    pub condition_b: String,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    /// Which condition is shown on the left.
    pub left: Side,
    /// `None` means unlimited viewing time.
    pub display_ms: Option<u32>,
    pub sentinel: bool,
    pub layout_id: String,
}

impl ComparisonTrial {
    pub fn left_image(&self) -> &Path {
        match self.left {
            Side::A => &self.image_a,
            Side::B => &self.image_b,
        }
    }

    pub fn right_image(&self) -> &Path {
        match self.left {
            Side::A => &self.image_b,
            Side::B => &self.image_a,
        }
    }

    /// Condition picked by a left or right choice.
    pub fn chosen_side(&self, chose_left: bool) -> Side {
        match (self.left, chose_left) {
            (Side::A, true) | (Side::B, false) => Side::A,
            _ => Side::B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyBatch {
    pub session_id: String,
    pub seed: u64,
    pub trials: Vec<ComparisonTrial>,
}

impl StudyBatch {
    pub fn trial(&self, trial_id: &str) -> Option<&ComparisonTrial> {
        self.trials.iter().find(|t| t.trial_id == trial_id)
    }

    /// SHA-256 over the serialized trials, with image paths reduced to file names.
    pub fn fingerprint(&self) -> String {
        let canonical: Vec<ComparisonTrial> = self
            .trials
            .iter()
            .map(|t| ComparisonTrial {
                image_a: t.image_a.file_name().map(PathBuf::from).unwrap_or_default(),
                image_b: t.image_b.file_name().map(PathBuf::from).unwrap_or_default(),
                ..t.clone()
            })
            .collect();
        let bytes = serde_json::to_vec(&canonical).expect("trials serialize");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| StudyError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| StudyError::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("batch serializes");
        fs::write(path, text + "\n").map_err(|e| StudyError::io(path, e))
    }
}

fn require_image(path: &Path, condition: &str, layout_id: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(StudyError::Manifest(format!(
            "condition {condition:?} has no image for layout {layout_id:?} (expected {})",
            path.display()
        )))
    }
}

/// Builds a randomized batch.
///
/// Every layout appears once per condition pair. `pairs` defaults to every
/// unordered pair of conditions, in id order. Sentinels pair a reference
/// photograph (condition A) against the weak condition (B).
pub fn make_batch(
    conditions: &ConditionSet,
    pairs: Option<&[(String, String)]>,
    layout_ids: &[String],
    sentinels: Option<&SentinelSpec>,
    timing: TimingMode,
    seed: u64,
) -> Result<StudyBatch> {
    let ids: Vec<&String> = conditions.conditions.keys().collect();
    let pairs: Vec<(String, String)> = match pairs {
        Some(p) => p.to_vec(),
        None => {
            let mut all = Vec::new();
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    all.push((ids[i].clone(), ids[j].clone()));
                }
            }
            all
        }
    };
    if pairs.is_empty() {
        return Err(StudyError::Manifest("at least two conditions are needed".into()));
    }
    if layout_ids.is_empty() {
        return Err(StudyError::Manifest("no layout ids".into()));
    }
    let dir_of = |c: &str| {
        conditions
            .conditions
            .get(c)
            .ok_or_else(|| StudyError::Manifest(format!("unknown condition {c:?}")))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_duration = |rng: &mut ChaCha8Rng| match timing {
        TimingMode::Unlimited => None,
        TimingMode::Timed => Some(*DURATIONS_MS.choose(rng).expect("nonempty")),
    };
    let mut trials = Vec::new();
    for (a, b) in &pairs {
        if a == b {
            return Err(StudyError::Manifest(format!("condition {a:?} paired with itself")));
        }
        let (dir_a, dir_b) = (dir_of(a)?, dir_of(b)?);
        for layout in layout_ids {
            let image_a = conditions.image_path(dir_a, layout);
            let image_b = conditions.image_path(dir_b, layout);
            require_image(&image_a, a, layout)?;
            require_image(&image_b, b, layout)?;
            trials.push(ComparisonTrial {
                trial_id: String::new(),
                condition_a: a.clone(),
                condition_b: b.clone(),
                image_a,
                image_b,
                left: if rng.gen_bool(0.5) { Side::A } else { Side::B },
                display_ms: draw_duration(&mut rng),
                sentinel: false,
                layout_id: layout.clone(),
            });
        }
    }
    if let Some(spec) = sentinels {
        let weak_dir = dir_of(&spec.weak)?;
        // Distinct layouts until every one has been used once.
        let mut picks = Vec::with_capacity(spec.count);
        while picks.len() < spec.count {
            let mut order = layout_ids.to_vec();
            order.shuffle(&mut rng);
            picks.extend(order);
        }
        picks.truncate(spec.count);
        for layout in picks {
            let image_a = conditions.image_path(&spec.reference, &layout);
            let image_b = conditions.image_path(weak_dir, &layout);
            require_image(&image_a, REFERENCE_CONDITION, &layout)?;
            require_image(&image_b, &spec.weak, &layout)?;
            let left = if rng.gen_bool(0.5) { Side::A } else { Side::B };
            let drawn = draw_duration(&mut rng);
            trials.push(ComparisonTrial {
                trial_id: String::new(),
                condition_a: REFERENCE_CONDITION.into(),
                condition_b: spec.weak.clone(),
                image_a,
                image_b,
                left,
                display_ms: spec.display_ms.or(drawn),
                sentinel: true,
                layout_id: layout,
            });
        }
    }
    trials.shuffle(&mut rng);
    for (i, t) in trials.iter_mut().enumerate() {
        t.trial_id = format!("t{i:04}");
    }
    Ok(StudyBatch {
        session_id: format!("batch-{seed}"),
        seed,
        trials,
    })
}
