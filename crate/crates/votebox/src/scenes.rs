//! Synthetic room scenes and the plain-text dataset formats.
//!
//! A scene is a set of 3D points plus axis-aligned ground-truth boxes
//! with class labels. The generator places box-shaped furniture on the
//! floor of a square room by rejection sampling (objects never overlap),
//! samples noisy points on every box face, and sprinkles uniform clutter.
//!
//! All randomness for scene `index` flows from a single `ChaCha8` stream
//! derived as `seed_from_u64(cfg.seed)` with stream id `index + 1`, so
//! any scene is reproducible in isolation and stream 0 stays reserved
//! for the trainer.
//!
//! File formats are line-oriented UTF-8 text and round-trip `f64` values
//! exactly (shortest-round-trip formatting on write, exact parse on
//! read).

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{intersection_volume, Box3, Detection, GeometryError};

/// Standard deviation of the Gaussian noise added to surface points, in
/// meters.
pub const NOISE_SIGMA: f64 = 0.01;

/// Placement attempts per object before generation gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Heights up to which clutter points are sprinkled, in meters.
pub const CLUTTER_HEIGHT: f64 = 2.5;

/// Lower bound on sampled points per box face, regardless of area.
pub const MIN_FACE_POINTS: usize = 8;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: invalid box: {source}")]
    Geometry {
        path: String,
        line: usize,
        source: GeometryError,
    },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("could not place object {object} of scene {scene} within {attempts} attempts")]
    Placement {
        scene: usize,
        object: usize,
        attempts: usize,
    },
    #[error("predictions reference unknown scene ids: {}", ids.join(", "))]
    UnknownScenes { ids: Vec<String> },
}

/// One room: points in meters plus ground-truth boxes with class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub points: Vec<[f64; 3]>,
    pub gt: Vec<(Box3, usize)>,
    pub num_classes: usize,
}

impl Scene {
    pub fn new(
        id: String,
        points: Vec<[f64; 3]>,
        gt: Vec<(Box3, usize)>,
        num_classes: usize,
    ) -> Result<Self, SceneError> {
        if id.is_empty() || id.chars().any(|c| c.is_whitespace()) {
            return Err(SceneError::Invalid(format!(
                "scene id {id:?} must be non-empty without whitespace"
            )));
        }
        if points.is_empty() {
            return Err(SceneError::Invalid("scene has no points".into()));
        }
        if let Some(p) = points.iter().find(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(SceneError::Invalid(format!("non-finite point {p:?}")));
        }
        if num_classes == 0 {
            return Err(SceneError::Invalid("scene declares zero classes".into()));
        }
        if let Some((_, c)) = gt.iter().find(|(_, c)| *c >= num_classes) {
            return Err(SceneError::Invalid(format!(
                "class id {c} out of range for {num_classes} classes"
            )));
        }
        Ok(Scene {
            id,
            points,
            gt,
            num_classes,
        })
    }
}

/// Size prior for one object class: a base size jittered per axis by a
/// uniform factor in `1 ± jitter`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    pub name: String,
    pub size: [f64; 3],
    pub jitter: f64,
}

/// Synthetic scene generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub priors: Vec<ClassPrior>,
    /// Surface sample density in points per square meter of box surface.
    pub surface_density: f64,
    /// Fraction of all scene points that are uniform clutter.
    pub clutter_fraction: f64,
    /// Side length of the square room, centered on the origin.
    pub room_extent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            objects_min: 2,
            objects_max: 5,
            // Desk-scale archetypes: every surface point sits within one
            // encoder radius of an edge or corner, which a ball
            // neighborhood needs to regress an unambiguous center. Larger
            // furniture-sized boxes present whole flat patches whose
            // mirror ambiguity stalls the vote loss.
            priors: vec![
                ClassPrior {
                    name: "tin".into(),
                    size: [0.3, 0.3, 0.28],
                    jitter: 0.12,
                },
                ClassPrior {
                    name: "crate".into(),
                    size: [0.45, 0.45, 0.32],
                    jitter: 0.12,
                },
                ClassPrior {
                    name: "tower".into(),
                    size: [0.26, 0.26, 0.55],
                    jitter: 0.12,
                },
                ClassPrior {
                    name: "tray".into(),
                    size: [0.5, 0.34, 0.18],
                    jitter: 0.12,
                },
            ],
            surface_density: 350.0,
            clutter_fraction: 0.03,
            room_extent: 3.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(SceneError::BadConfig(format!(
                "object count range {}..={} must be non-empty and start at 1 or more",
                self.objects_min, self.objects_max
            )));
        }
        if self.priors.is_empty() {
            return Err(SceneError::BadConfig("no class priors".into()));
        }
        for prior in &self.priors {
            if prior.name.is_empty() || prior.name.chars().any(|c| c.is_whitespace()) {
                return Err(SceneError::BadConfig(format!(
                    "class name {:?} must be non-empty without whitespace",
                    prior.name
                )));
            }
            if !prior.size.iter().all(|s| s.is_finite() && *s > 0.0) {
                return Err(SceneError::BadConfig(format!(
                    "class {} size {:?} must be positive",
                    prior.name, prior.size
                )));
            }
            if !(0.0..1.0).contains(&prior.jitter) {
                return Err(SceneError::BadConfig(format!(
                    "class {} jitter {} must lie in [0, 1)",
                    prior.name, prior.jitter
                )));
            }
        }
        if !(self.surface_density > 0.0) || !self.surface_density.is_finite() {
            return Err(SceneError::BadConfig(format!(
                "surface density {} must be positive",
                self.surface_density
            )));
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return Err(SceneError::BadConfig(format!(
                "clutter fraction {} must lie in [0, 1)",
                self.clutter_fraction
            )));
        }
        if !(self.room_extent > 0.0) || !self.room_extent.is_finite() {
            return Err(SceneError::BadConfig(format!(
                "room extent {} must be positive",
                self.room_extent
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.priors.iter().map(|p| p.name.clone()).collect()
    }
}

/// Generates scene `index` deterministically from `(cfg.seed, index)`.
pub fn synth_scene(cfg: &SynthConfig, index: usize) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("constant sigma is valid");

    let n_objects = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let mut gt: Vec<(Box3, usize)> = Vec::with_capacity(n_objects);
    for object in 0..n_objects {
        let class = rng.gen_range(0..cfg.priors.len());
        let prior = &cfg.priors[class];
        let mut size = [0.0f64; 3];
        for (axis, s) in size.iter_mut().enumerate() {
            let factor = 1.0 + rng.gen_range(-prior.jitter..=prior.jitter);
            *s = prior.size[axis] * factor;
        }
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let reach_x = (cfg.room_extent - size[0]) / 2.0;
            let reach_y = (cfg.room_extent - size[1]) / 2.0;
            if reach_x <= 0.0 || reach_y <= 0.0 {
                break; // object cannot fit in the room at all
            }
            let center = [
                rng.gen_range(-reach_x..reach_x),
                rng.gen_range(-reach_y..reach_y),
                size[2] / 2.0, // seated on the floor
            ];
            let candidate =
                Box3::new(center, size).expect("sampled sizes are positive and finite");
            if gt
                .iter()
                .all(|(b, _)| intersection_volume(&candidate, b) == 0.0)
            {
                gt.push((candidate, class));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::Placement {
                scene: index,
                object,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    let mut points: Vec<[f64; 3]> = Vec::new();
    for (bbox, _) in &gt {
        sample_surface_points(bbox, cfg.surface_density, &mut rng, &noise, &mut points);
    }
    let surface_total = points.len();
    if cfg.clutter_fraction > 0.0 {
        let want =
            (surface_total as f64 * cfg.clutter_fraction / (1.0 - cfg.clutter_fraction)) as usize;
        let half = cfg.room_extent / 2.0;
        for _ in 0..want {
            points.push([
                rng.gen_range(-half..half),
                rng.gen_range(-half..half),
                rng.gen_range(0.0..CLUTTER_HEIGHT),
            ]);
        }
    }

    Scene::new(format!("s{index:04}"), points, gt, cfg.priors.len())
}

/// Samples noisy points on all six faces of a box, area-proportional
/// with a floor of [`MIN_FACE_POINTS`] per face.
fn sample_surface_points(
    bbox: &Box3,
    density: f64,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
    out: &mut Vec<[f64; 3]>,
) {
    let lo = bbox.min();
    let hi = bbox.max();
    let size = bbox.size();
    for face in 0..6 {
        let axis = face / 2;
        let plane = if face % 2 == 0 { hi[axis] } else { lo[axis] };
        let u_axis = (axis + 1) % 3;
        let v_axis = (axis + 2) % 3;
        let area = size[u_axis] * size[v_axis];
        let count = ((area * density).ceil() as usize).max(MIN_FACE_POINTS);
        for _ in 0..count {
            let mut p = [0.0f64; 3];
            p[axis] = plane;
            p[u_axis] = rng.gen_range(lo[u_axis]..hi[u_axis]);
            p[v_axis] = rng.gen_range(lo[v_axis]..hi[v_axis]);
            for v in p.iter_mut() {
                *v += noise.sample(rng);
            }
            out.push(p);
        }
    }
}

/// Generates `count` scenes with ids `s0000`, `s0001`, ... starting at
/// `first_index`.
pub fn synth_scenes(
    cfg: &SynthConfig,
    first_index: usize,
    count: usize,
) -> Result<Vec<Scene>, SceneError> {
    (first_index..first_index + count)
        .map(|i| synth_scene(cfg, i))
        .collect()
}

fn fmt_f64(v: f64) -> String {
    // `Display` for f64 prints the shortest string that parses back to
    // the same bits, so text files round-trip exactly.
    format!("{v}")
}

/// Serializes a scene to its text form.
pub fn scene_to_string(scene: &Scene) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scene {} {} {} {}",
        scene.id,
        scene.points.len(),
        scene.gt.len(),
        scene.num_classes
    );
    for p in &scene.points {
        let _ = writeln!(out, "{} {} {}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(p[2]));
    }
    for (bbox, class) in &scene.gt {
        let c = bbox.center();
        let s = bbox.size();
        let _ = writeln!(
            out,
            "{class} {} {} {} {} {} {}",
            fmt_f64(c[0]),
            fmt_f64(c[1]),
            fmt_f64(c[2]),
            fmt_f64(s[0]),
            fmt_f64(s[1]),
            fmt_f64(s[2])
        );
    }
    out
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<(), SceneError> {
    std::fs::write(path, scene_to_string(scene))?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> SceneError {
    SceneError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, tok: &str, what: &str) -> Result<f64, SceneError> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("{what} {tok:?} is not a number")))
}

/// Parses the text form of a scene; errors carry 1-based line numbers.
pub fn parse_scene(path: &Path, text: &str) -> Result<Scene, SceneError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file, expected scene header"))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != "scene" {
        return Err(parse_err(
            path,
            1,
            format!("expected header `scene <id> <n_points> <n_boxes> <classes>`, got {header:?}"),
        ));
    }
    let id = tokens[1].to_string();
    let parse_count = |tok: &str, what: &str| -> Result<usize, SceneError> {
        tok.parse::<usize>()
            .map_err(|_| parse_err(path, 1, format!("{what} {tok:?} is not a count")))
    };
    let n_points = parse_count(tokens[2], "point count")?;
    let n_boxes = parse_count(tokens[3], "box count")?;
    let num_classes = parse_count(tokens[4], "class count")?;

    let mut points = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let (line, text) = lines.next().ok_or_else(|| {
            parse_err(
                path,
                k + 1,
                format!("file ends inside the point section ({k} of {n_points} points read)"),
            )
        })?;
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(
                path,
                line,
                format!("expected `x y z`, got {text:?}"),
            ));
        }
        points.push([
            parse_f64(path, line, toks[0], "x")?,
            parse_f64(path, line, toks[1], "y")?,
            parse_f64(path, line, toks[2], "z")?,
        ]);
    }

    let mut gt = Vec::with_capacity(n_boxes);
    for k in 0..n_boxes {
        let (line, text) = lines.next().ok_or_else(|| {
            parse_err(
                path,
                n_points + k + 1,
                format!("file ends inside the box section ({k} of {n_boxes} boxes read)"),
            )
        })?;
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.len() != 7 {
            return Err(parse_err(
                path,
                line,
                format!("expected `class cx cy cz w l h`, got {text:?}"),
            ));
        }
        let class: usize = toks[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("class id {:?} is not a count", toks[0])))?;
        if class >= num_classes {
            return Err(parse_err(
                path,
                line,
                format!("class id {class} out of range for {num_classes} classes"),
            ));
        }
        let center = [
            parse_f64(path, line, toks[1], "cx")?,
            parse_f64(path, line, toks[2], "cy")?,
            parse_f64(path, line, toks[3], "cz")?,
        ];
        let size = [
            parse_f64(path, line, toks[4], "w")?,
            parse_f64(path, line, toks[5], "l")?,
            parse_f64(path, line, toks[6], "h")?,
        ];
        let bbox = Box3::new(center, size).map_err(|source| SceneError::Geometry {
            path: path.display().to_string(),
            line,
            source,
        })?;
        gt.push((bbox, class));
    }

    if let Some((line, text)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(parse_err(
            path,
            line,
            format!("unexpected trailing content {text:?}"),
        ));
    }
    Scene::new(id, points, gt, num_classes)
}

pub fn read_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path)?;
    parse_scene(path, &text)
}

/// Writes one `<id>.scene` file per scene into `dir`.
pub fn write_scene_dir(dir: &Path, scenes: &[Scene]) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir)?;
    for scene in scenes {
        write_scene(&dir.join(format!("{}.scene", scene.id)), scene)?;
    }
    Ok(())
}

/// Reads every `*.scene` file in `dir`, sorted by file name so the
/// order is deterministic.
pub fn read_scene_dir(dir: &Path) -> Result<Vec<Scene>, SceneError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "scene"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_scene(p)).collect()
}

/// Serializes per-scene detections: one `scene_id class objectness
/// cx cy cz w l h` line per detection, scenes in id order, detections
/// by objectness descending (input order on ties).
pub fn predictions_to_string(predictions: &[(String, Vec<Detection>)]) -> String {
    let mut rows: Vec<(&str, &Detection)> = predictions
        .iter()
        .flat_map(|(id, dets)| dets.iter().map(move |d| (id.as_str(), d)))
        .collect();
    rows.sort_by(|a, b| {
        a.0.cmp(b.0).then_with(|| {
            b.1.objectness
                .partial_cmp(&a.1.objectness)
                .expect("objectness is validated finite")
        })
    });
    let mut out = String::new();
    for (id, det) in rows {
        let c = det.bbox.center();
        let s = det.bbox.size();
        let _ = writeln!(
            out,
            "{id} {} {} {} {} {} {} {} {}",
            det.class_id,
            fmt_f64(det.objectness),
            fmt_f64(c[0]),
            fmt_f64(c[1]),
            fmt_f64(c[2]),
            fmt_f64(s[0]),
            fmt_f64(s[1]),
            fmt_f64(s[2])
        );
    }
    out
}

pub fn write_predictions(
    path: &Path,
    predictions: &[(String, Vec<Detection>)],
) -> Result<(), SceneError> {
    std::fs::write(path, predictions_to_string(predictions))?;
    Ok(())
}

/// Parses a predictions file; scenes come back in id order, detections
/// in file order. An empty file is an empty prediction set.
pub fn parse_predictions(
    path: &Path,
    text: &str,
) -> Result<Vec<(String, Vec<Detection>)>, SceneError> {
    let mut by_scene: std::collections::BTreeMap<String, Vec<Detection>> = Default::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() != 9 {
            return Err(parse_err(
                path,
                line,
                format!("expected `scene_id class objectness cx cy cz w l h`, got {raw:?}"),
            ));
        }
        let class: usize = toks[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("class id {:?} is not a count", toks[1])))?;
        let objectness = parse_f64(path, line, toks[2], "objectness")?;
        let center = [
            parse_f64(path, line, toks[3], "cx")?,
            parse_f64(path, line, toks[4], "cy")?,
            parse_f64(path, line, toks[5], "cz")?,
        ];
        let size = [
            parse_f64(path, line, toks[6], "w")?,
            parse_f64(path, line, toks[7], "l")?,
            parse_f64(path, line, toks[8], "h")?,
        ];
        let bbox = Box3::new(center, size).map_err(|source| SceneError::Geometry {
            path: path.display().to_string(),
            line,
            source,
        })?;
        let det = Detection::new(bbox, class, objectness).map_err(|source| {
            SceneError::Geometry {
                path: path.display().to_string(),
                line,
                source,
            }
        })?;
        by_scene.entry(toks[0].to_string()).or_default().push(det);
    }
    Ok(by_scene.into_iter().collect())
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, Vec<Detection>)>, SceneError> {
    let text = std::fs::read_to_string(path)?;
    parse_predictions(path, &text)
}

/// Joins scenes with their predictions by scene id for evaluation.
///
/// Scenes without predictions get empty detection lists; predictions
/// whose scene id matches no scene are an error listing every offender.
pub fn pair_scenes(
    scenes: &[Scene],
    predictions: &[(String, Vec<Detection>)],
) -> Result<Vec<crate::evaluation::ScenePair>, SceneError> {
    let known: std::collections::BTreeMap<&str, usize> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let offenders: Vec<String> = predictions
        .iter()
        .filter(|(id, _)| !known.contains_key(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    if !offenders.is_empty() {
        return Err(SceneError::UnknownScenes { ids: offenders });
    }
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); scenes.len()];
    for (id, d) in predictions {
        dets[known[id.as_str()]] = d.clone();
    }
    Ok(scenes
        .iter()
        .zip(dets)
        .map(|(scene, detections)| crate::evaluation::ScenePair {
            scene_id: scene.id.clone(),
            detections,
            ground_truth: scene.gt.clone(),
        })
        .collect())
}
