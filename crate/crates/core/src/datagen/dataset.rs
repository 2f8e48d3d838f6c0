//! On-disk synthetic datasets.
//!
//! ```text
//! <root>/manifest.toml      DatasetManifest; all paths relative to <root>
//! <root>/skeleton.toml      SkeletonSpec
//! <root>/template.toml      BodyTemplate (without the skeleton)
//! <root>/bounds.toml        AnatomicalBounds derived from source-train
//! <root>/<split>/000000.ply ASCII PLY, float x y z in meters
//! <root>/<split>/000000.pose
//! ```
//!
//! A pose file has a header line, a joint count line and one line per joint:
//!
//! ```text
//! # anatda pose
//! joints 16
//! pelvis 0.0123 -0.0456 0.11
//! ...
//! ```
//!
//! Coordinates are written in shortest round-trip form, so reading a pose
//! back reproduces the generated values bit for bit. Cloud coordinates are
//! rounded to single precision at generation time, before anything else sees
//! them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_shifts, crop_box, dedup_frames, render_cloud, sample_pose, voxel_downsample};
use super::{BodyTemplate, Sample, ShiftConfig, Subject};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::model::PointCloud;
use crate::skeleton::{derive_bounds, read_toml, write_toml, AnatomicalBounds, Pose, SkeletonSpec};

/// Split names in generation order. Only the first is unshifted.
pub const SPLITS: [&str; 4] = ["source-train", "target-train", "target-val", "target-test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            source_train: 400,
            target_train: 400,
            target_val: 100,
            target_test: 100,
        }
    }
}

impl SplitCounts {
    fn as_array(&self) -> [usize; 4] {
        [self.source_train, self.target_train, self.target_val, self.target_test]
    }
}

/// Cloud synthesis and preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub points_per_bone: usize,
    pub noise: f64,
    pub voxel_edge: f64,
    pub crop_min: Vec3,
    pub crop_max: Vec3,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            points_per_bone: 120,
            noise: 0.004,
            voxel_edge: 0.02,
            crop_min: [-0.75, -1.3, 0.0],
            crop_max: [0.75, 1.3, 0.9],
        }
    }
}

/// Everything `generate_dataset` needs besides the body template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub counts: SplitCounts,
    /// Body template file; the built-in 16-joint template when absent.
    pub template: Option<PathBuf>,
    /// Skeleton file; the built-in 16-joint skeleton when absent.
    pub skeleton: Option<PathBuf>,
    pub subjects_per_split: usize,
    pub scale_range: [f64; 2],
    /// Frames of one subject closer than this (max joint displacement) are
    /// dropped and redrawn.
    pub dedup_threshold: f64,
    /// Symmetry tolerance written into the bounds file.
    pub sym_tol: f64,
    pub render: RenderConfig,
    /// Shifts applied, in order, to every target split.
    pub target_shift: Vec<ShiftConfig>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            counts: SplitCounts::default(),
            template: None,
            skeleton: None,
            subjects_per_split: 8,
            scale_range: [0.8, 1.2],
            dedup_threshold: 0.1,
            sym_tol: 0.0,
            render: RenderConfig::default(),
            target_shift: default_target_shift(),
        }
    }
}

/// A thin blanket plus bedside clutter. The headboard slab is configured but
/// empty: its points sit far above the body and dominate the max-pooled
/// context of the reference network.
pub fn default_target_shift() -> Vec<ShiftConfig> {
    vec![
        ShiftConfig::Cover {
            offset: 0.01,
            radius: 0.05,
            drape_noise: 0.005,
        },
        ShiftConfig::Environment {
            clutter_points: 120,
            clutter_min: [-0.7, -1.25, 0.0],
            clutter_max: [0.7, 1.25, 0.25],
            headboard_points: 0,
            headboard_min: [-0.7, 1.15, 0.0],
            headboard_max: [0.7, 1.25, 0.8],
        },
    ]
}

impl GenConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.counts.as_array().contains(&0) {
            return bad("every split needs at least one sample".into());
        }
        if self.subjects_per_split == 0 {
            return bad("subjects_per_split must be >= 1".into());
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("scale_range [{lo}, {hi}] is invalid"));
        }
        if !(self.dedup_threshold >= 0.0 && self.sym_tol >= 0.0) {
            return bad("dedup_threshold and sym_tol must be >= 0".into());
        }
        if self.render.points_per_bone == 0 || !(self.render.voxel_edge > 0.0) || !(self.render.noise >= 0.0) {
            return bad("render needs points_per_bone >= 1, voxel_edge > 0 and noise >= 0".into());
        }
        if (0..3).any(|k| !(self.render.crop_min[k] <= self.render.crop_max[k])) {
            return bad("crop box needs crop_min <= crop_max".into());
        }
        for s in &self.target_shift {
            s.check()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub dir: PathBuf,
    pub count: usize,
    pub shifted: bool,
}

/// Index file of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub skeleton: PathBuf,
    pub template: PathBuf,
    pub bounds: PathBuf,
    pub splits: Vec<SplitEntry>,
    pub config: GenConfig,
}

const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "anatda-dataset/1";

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let m: DatasetManifest = read_toml(&root.join(MANIFEST))?;
        if m.format != FORMAT {
            return Err(Error::Parse {
                path: root.join(MANIFEST).display().to_string(),
                msg: format!("unknown dataset format '{}'", m.format),
            });
        }
        Ok(m)
    }

    pub fn split(&self, name: &str) -> Result<&SplitEntry> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("dataset has no split '{name}'")))
    }

    pub fn spec(&self, root: &Path) -> Result<SkeletonSpec> {
        SkeletonSpec::load(&root.join(&self.skeleton))
    }

    pub fn bounds(&self, root: &Path) -> Result<AnatomicalBounds> {
        AnatomicalBounds::load(&root.join(&self.bounds))
    }
}

fn sample_name(i: usize) -> String {
    format!("{i:06}")
}

fn split_seed(seed: u64, split: usize, stream: u64) -> u64 {
    // distinct, well-mixed seeds per (split, stream)
    let mut z = seed ^ ((split as u64) << 48) ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn draw_poses(template: &BodyTemplate, cfg: &GenConfig, split: usize, count: usize) -> Result<Vec<Pose>> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, split, 0));
    let [lo, hi] = cfg.scale_range;
    let subjects: Vec<Subject> = (0..cfg.subjects_per_split)
        .map(|_| {
            let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            Subject::sample(template, scale, &mut rng)
        })
        .collect();
    let mut last: Vec<Option<Pose>> = vec![None; subjects.len()];
    let mut poses = Vec::with_capacity(count);
    for i in 0..count {
        let s = i % subjects.len();
        let pose = loop {
            let pose = sample_pose(template, &subjects[s], &mut rng)?;
            match &last[s] {
                Some(prev) if dedup_frames(&[prev.clone(), pose.clone()], cfg.dedup_threshold)?.len() < 2 => {}
                _ => break pose,
            }
        };
        last[s] = Some(pose.clone());
        poses.push(pose);
    }
    Ok(poses)
}

fn quantize(cloud: PointCloud) -> PointCloud {
    let q = |v: f64| v as f32 as f64;
    PointCloud::new(cloud.points.into_iter().map(|p| [q(p[0]), q(p[1]), q(p[2])]).collect())
}

fn render_one(
    template: &BodyTemplate,
    cfg: &GenConfig,
    split: usize,
    shifted: bool,
    i: usize,
    pose: &Pose,
) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, split, 1 + i as u64));
    let r = &cfg.render;
    let mut cloud = render_cloud(pose, template, r.points_per_bone, r.noise, &mut rng)?;
    if shifted {
        cloud = apply_shifts(&cloud, &cfg.target_shift, &mut rng)?;
    }
    cloud = crop_box(&cloud, r.crop_min, r.crop_max)?;
    cloud = voxel_downsample(&cloud, r.voxel_edge)?;
    if cloud.is_empty() {
        return Err(Error::Empty(format!("sample {i} of split {} has no points", SPLITS[split])));
    }
    Ok(quantize(cloud))
}

fn render_all(
    template: &BodyTemplate,
    cfg: &GenConfig,
    split: usize,
    shifted: bool,
    poses: &[Pose],
    threads: usize,
) -> Result<Vec<PointCloud>> {
    let threads = threads.max(1).min(poses.len().max(1));
    if threads == 1 {
        return poses
            .iter()
            .enumerate()
            .map(|(i, p)| render_one(template, cfg, split, shifted, i, p))
            .collect();
    }
    let chunk = poses.len().div_ceil(threads);
    let parts: Vec<Result<Vec<PointCloud>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = poses
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, p)| render_one(template, cfg, split, shifted, c * chunk + j, p))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("render worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(poses.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Generates all four splits under `root` and returns the manifest. Output is
/// a pure function of the config, the template and the seed; `threads` only
/// changes wall time.
pub fn generate_dataset(cfg: &GenConfig, template: &BodyTemplate, root: &Path, threads: usize) -> Result<DatasetManifest> {
    cfg.check()?;
    template.check()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut splits = Vec::new();
    let mut source_poses = Vec::new();
    for (s, (&name, &count)) in SPLITS.iter().zip(&cfg.counts.as_array()).enumerate() {
        let shifted = s > 0;
        let poses = draw_poses(template, cfg, s, count)?;
        let clouds = render_all(template, cfg, s, shifted, &poses, threads)?;
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, (pose, cloud)) in poses.iter().zip(&clouds).enumerate() {
            write_ply(&dir.join(format!("{}.ply", sample_name(i))), cloud)?;
            write_pose(&dir.join(format!("{}.pose", sample_name(i))), pose, &template.spec)?;
        }
        if s == 0 {
            source_poses = poses;
        }
        splits.push(SplitEntry {
            name: name.to_string(),
            dir: PathBuf::from(name),
            count,
            shifted,
        });
    }
    template.spec.save(&root.join("skeleton.toml"))?;
    std::fs::write(root.join("template.toml"), template.to_toml()).map_err(|e| Error::io(root, e))?;
    derive_bounds(&source_poses, &template.spec, cfg.sym_tol)?.save(&root.join("bounds.toml"))?;
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        seed: cfg.seed,
        skeleton: "skeleton.toml".into(),
        template: "template.toml".into(),
        bounds: "bounds.toml".into(),
        splits,
        config: GenConfig {
            template: None,
            skeleton: None,
            ..cfg.clone()
        },
    };
    write_toml(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads every sample of one split.
pub fn load_split(root: &Path, name: &str) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::load(root)?;
    let spec = manifest.spec(root)?;
    let entry = manifest.split(name)?;
    let dir = root.join(&entry.dir);
    (0..entry.count)
        .map(|i| {
            let cloud = read_ply(&dir.join(format!("{}.ply", sample_name(i))))?;
            let path = dir.join(format!("{}.pose", sample_name(i)));
            let pose = read_pose(&path)?;
            spec.check_pose(&pose).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
            Ok(Sample { cloud, pose })
        })
        .collect()
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut s = String::with_capacity(64 + cloud.len() * 32);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &cloud.points {
        let _ = writeln!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.display().to_string(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    if lines.next().map(|(_, l)| l) != Some("ply") {
        return Err(err(1, "missing 'ply' magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let (n, line) = lines.next().ok_or_else(|| err(0, "missing end_header"))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(err(n, "only ascii PLY is supported")),
            ["comment", ..] | [] => {}
            ["element", "vertex", c] => {
                count = Some(c.parse::<usize>().map_err(|_| err(n, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => {
                if !matches!(*ty, "float" | "float32" | "double" | "float64") {
                    return Err(err(n, "vertex properties must be floating point"));
                }
                props.push((name.to_string(), matches!(*ty, "float" | "float32")));
            }
            ["property", ..] => {}
            _ => return Err(err(n, "unrecognized header line")),
        }
    }
    let count = count.ok_or_else(|| err(0, "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|(p, _)| p == name)
            .ok_or_else(|| err(0, "missing x/y/z property"))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = lines.next().ok_or_else(|| err(0, "fewer vertices than declared"))?;
        // single-precision properties are parsed as such so values round-trip
        let vals: Vec<f64> = line
            .split_whitespace()
            .zip(&props)
            .map(|(w, (_, single))| if *single { w.parse::<f32>().map(f64::from) } else { w.parse::<f64>() })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(n, "bad number"))?;
        if vals.len() != props.len() || line.split_whitespace().count() != props.len() {
            return Err(err(n, "wrong number of values"));
        }
        points.push([vals[cx], vals[cy], vals[cz]]);
    }
    Ok(PointCloud::new(points))
}

pub fn write_pose(path: &Path, pose: &Pose, spec: &SkeletonSpec) -> Result<()> {
    spec.check_pose(pose)?;
    let mut s = String::from("# anatda pose\n");
    let _ = writeln!(s, "joints {}", pose.len());
    for (name, j) in spec.joint_names.iter().zip(&pose.joints) {
        let _ = writeln!(s, "{name} {} {} {}", j[0], j[1], j[2]);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_pose(path: &Path) -> Result<Pose> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.display().to_string(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (n, header) = lines.next().ok_or_else(|| err(0, "empty pose file"))?;
    let k: usize = header
        .strip_prefix("joints ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| err(n, "expected 'joints <count>'"))?;
    let mut joints = Vec::with_capacity(k);
    for (n, line) in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() != 4 {
            return Err(err(n, "expected '<name> <x> <y> <z>'"));
        }
        let mut j = [0.0; 3];
        for (c, w) in j.iter_mut().zip(&words[1..]) {
            *c = w.parse().map_err(|_| err(n, "bad number"))?;
        }
        joints.push(j);
    }
    if joints.len() != k {
        return Err(err(0, &format!("declared {k} joints, found {}", joints.len())));
    }
    Ok(Pose::new(joints))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> GenConfig {
        GenConfig {
            seed,
            counts: SplitCounts {
                source_train: 6,
                target_train: 4,
                target_val: 2,
                target_test: 3,
            },
            render: RenderConfig {
                points_per_bone: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn dir_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generation_is_reproducible_and_counts_match() {
        let t = BodyTemplate::default_16();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small_config(3), &t, a.path(), 1).unwrap();
        generate_dataset(&small_config(3), &t, b.path(), 3).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
        let counts: Vec<usize> = m.splits.iter().map(|s| s.count).collect();
        assert_eq!(counts, vec![6, 4, 2, 3]);
        for s in SPLITS {
            assert_eq!(load_split(a.path(), s).unwrap().len(), m.split(s).unwrap().count);
        }
    }

    #[test]
    fn bounds_file_matches_source_poses() {
        let t = BodyTemplate::default_16();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small_config(5), &t, dir.path(), 1).unwrap();
        let poses: Vec<Pose> = load_split(dir.path(), "source-train")
            .unwrap()
            .into_iter()
            .map(|s| s.pose)
            .collect();
        let want = derive_bounds(&poses, &t.spec, 0.0).unwrap();
        assert_eq!(m.bounds(dir.path()).unwrap(), want);
    }

    #[test]
    fn ply_and_pose_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![[0.1f32 as f64, -2.5, 1e-3f32 as f64], [0.0, 0.0, 0.0]]);
        let p = dir.path().join("c.ply");
        write_ply(&p, &cloud).unwrap();
        assert_eq!(read_ply(&p).unwrap(), cloud);

        let spec = SkeletonSpec::default_16();
        let pose = Pose::new((0..16).map(|i| [0.1 * i as f64, 1.0 / 3.0, -7e-17]).collect());
        let q = dir.path().join("p.pose");
        write_pose(&q, &pose, &spec).unwrap();
        assert_eq!(read_pose(&q).unwrap(), pose);

        std::fs::write(&q, "# anatda pose\njoints 2\na 0 0 0\n").unwrap();
        assert!(read_pose(&q).is_err());
        std::fs::write(&p, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(read_ply(&p).is_err());
    }
}
