//! Pose samples, JSON Lines datasets, 2D/3D normalization and a synthetic
//! lifting benchmark built from a fixed-bone-length kinematic tree viewed by
//! pinhole cameras.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::SkeletonTopology;

const H36M17_BONES: &str = include_str!("../data/h36m17_bones.json");
const H36M16_BONES: &str = include_str!("../data/h36m16_bones.json");

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// One 2D/3D training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub id: String,
    /// Normalized image coordinates.
    pub pose2d: Vec<[f64; 2]>,
    /// Root-relative millimeters.
    pub pose3d: Vec<Vec3>,
}

impl PoseSample {
    pub fn num_joints(&self) -> usize {
        self.pose2d.len()
    }

    pub fn validate(&self, root: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("sample {}: {msg}", self.id)));
        if self.pose2d.len() != self.pose3d.len() {
            return bad(format!(
                "{} 2D joints but {} 3D joints",
                self.pose2d.len(),
                self.pose3d.len()
            ));
        }
        if root >= self.pose3d.len() {
            return bad(format!("root {root} out of range"));
        }
        let finite = self
            .pose2d
            .iter()
            .flatten()
            .chain(self.pose3d.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite coordinate".into());
        }
        if self.pose3d[root].iter().any(|v| v.abs() > 1e-9) {
            return bad(format!(
                "root joint at {:?}, expected the origin",
                self.pose3d[root]
            ));
        }
        Ok(())
    }

    pub fn input_tensor(&self) -> Tensor {
        Tensor::from_fn(self.pose2d.len(), 2, |i, j| self.pose2d[i][j])
    }

    pub fn target_tensor(&self) -> Tensor {
        Tensor::from_fn(self.pose3d.len(), 3, |i, j| self.pose3d[i][j])
    }
}

/// Stacks samples into `(B·N) × 2` inputs and `(B·N) × 3` targets.
pub fn stack(samples: &[&PoseSample]) -> (Tensor, Tensor) {
    let n = samples.first().map_or(0, |s| s.num_joints());
    let rows = samples.len() * n;
    let x = Tensor::from_fn(rows, 2, |r, c| samples[r / n].pose2d[r % n][c]);
    let y = Tensor::from_fn(rows, 3, |r, c| samples[r / n].pose3d[r % n][c]);
    (x, y)
}

/// Horizontal flip: negate x in 2D and 3D, then swap each left/right pair.
pub fn flip_pose(sample: &PoseSample, flip_pairs: &[(usize, usize)]) -> PoseSample {
    let mut out = sample.clone();
    out.pose2d.iter_mut().for_each(|p| p[0] = -p[0]);
    out.pose3d.iter_mut().for_each(|p| p[0] = -p[0]);
    for &(a, b) in flip_pairs {
        out.pose2d.swap(a, b);
        out.pose3d.swap(a, b);
    }
    out
}

/// Maps pixel coordinates to `[-1, 1]` (about the image center, divided by
/// half the larger image side) and moves the 3D root to the origin.
pub fn normalize(
    id: impl Into<String>,
    pixels: &[[f64; 2]],
    camera_pose3d: &[Vec3],
    image_size: [f64; 2],
    root: usize,
) -> Result<PoseSample> {
    let [w, h] = image_size;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "image size {w}x{h} must be positive"
        )));
    }
    let half = w.max(h) / 2.0;
    let pose2d = pixels
        .iter()
        .map(|p| [(p[0] - w / 2.0) / half, (p[1] - h / 2.0) / half])
        .collect();
    let r = *camera_pose3d
        .get(root)
        .ok_or_else(|| Error::InvalidArgument(format!("root {root} out of range")))?;
    let pose3d = camera_pose3d
        .iter()
        .map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]])
        .collect();
    Ok(PoseSample {
        id: id.into(),
        pose2d,
        pose3d,
    })
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[PoseSample]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<PoseSample>> {
    let file = std::fs::File::open(path)?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: PoseSample = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", lineno + 1)))?;
        samples.push(sample);
    }
    Ok(samples)
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// `Rx(a)·Ry(b)·Rz(c)`, angles in radians.
pub fn euler_xyz(a: f64, b: f64, c: f64) -> Mat3 {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&mat_mul(&rx, &ry), &rz)
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Pinhole camera with square pixels. Camera frame: x right, y down,
/// z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub image_size: [f64; 2],
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// Camera-frame position of the world origin, millimeters.
    pub translation: Vec3,
}

impl CameraModel {
    /// Camera at `position` (world, y up) looking at `target`.
    pub fn look_at(focal: f64, image_size: [f64; 2], position: Vec3, target: Vec3) -> Result<Self> {
        let sub = |a: Vec3, b: Vec3| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let norm = |v: Vec3| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let cross = |a: Vec3, b: Vec3| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let forward = sub(target, position);
        let len = norm(forward);
        let z = forward.map(|v| v / len);
        let right = cross(z, [0.0, 1.0, 0.0]);
        let rlen = norm(right);
        if !(len > 0.0 && rlen > 1e-9) {
            return Err(Error::InvalidArgument("degenerate camera placement".into()));
        }
        let x = right.map(|v| v / rlen);
        let y = cross(z, x);
        let rotation = [x, y, z];
        let rp = mat_vec(&rotation, &position);
        let camera = Self {
            focal,
            principal_point: [image_size[0] / 2.0, image_size[1] / 2.0],
            image_size,
            rotation,
            translation: rp.map(|v| -v),
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                dev = dev.max((dot - f64::from(u8::from(i == j))).abs());
            }
        }
        if dev > 1e-9 || (det3(r) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "camera rotation is not a proper rotation".into(),
            ));
        }
        if !(self.focal > 0.0) {
            return Err(Error::InvalidArgument(
                "focal length must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        let q = mat_vec(&self.rotation, p);
        [
            q[0] + self.translation[0],
            q[1] + self.translation[1],
            q[2] + self.translation[2],
        ]
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> [f64; 2] {
        [
            self.focal * p[0] / p[2] + self.principal_point[0],
            self.focal * p[1] / p[2] + self.principal_point[1],
        ]
    }
}

/// Four cameras at the corners of a capture space, 1000×1000 images.
pub fn default_cameras() -> Vec<CameraModel> {
    let size = [1000.0, 1000.0];
    [(4500.0, 0.0), (0.0, 4500.0), (-4500.0, 0.0), (0.0, -4500.0)]
        .iter()
        .enumerate()
        .map(|(i, &(x, z))| {
            let height = 1200.0 + 150.0 * i as f64;
            CameraModel::look_at(1145.0, size, [x, height, z], [0.0, 900.0, 0.0])
                .expect("valid rig")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub child: usize,
    pub parent: usize,
    pub length_mm: f64,
    /// Rest direction in the parent frame (world frame y up, +x the
    /// subject's left).
    pub direction: Vec3,
}

/// Per-joint Euler angle limits, degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub child: usize,
    pub min_deg: Vec3,
    pub max_deg: Vec3,
}

/// Bone lengths, rest directions and joint-angle ranges of a kinematic tree.
/// Bones are listed parent before child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoneTable {
    pub bones: Vec<Bone>,
    #[serde(default)]
    pub angle_ranges: Vec<AngleRange>,
}

impl BoneTable {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Table for a built-in skeleton size (16 or 17 joints).
    pub fn builtin(num_joints: usize) -> Option<Self> {
        match num_joints {
            17 => Some(Self::from_json(H36M17_BONES).expect("bundled table")),
            16 => Some(Self::from_json(H36M16_BONES).expect("bundled table")),
            _ => None,
        }
    }

    /// Checks that the table spans the skeleton's edges in parent-first order.
    pub fn validate(&self, skeleton: &SkeletonTopology) -> Result<()> {
        let n = skeleton.num_joints();
        let mut placed = vec![false; n];
        placed[skeleton.root] = true;
        for b in &self.bones {
            if b.child >= n || b.parent >= n {
                return Err(Error::Topology(format!(
                    "bone {}→{} out of range",
                    b.parent, b.child
                )));
            }
            if !placed[b.parent] || placed[b.child] {
                return Err(Error::Topology(format!(
                    "bone {}→{} is not in parent-first order",
                    b.parent, b.child
                )));
            }
            let is_edge = skeleton
                .edges
                .iter()
                .any(|&(u, v)| (u, v) == (b.parent, b.child) || (v, u) == (b.parent, b.child));
            if !is_edge {
                return Err(Error::Topology(format!(
                    "bone {}→{} is not a skeleton edge",
                    b.parent, b.child
                )));
            }
            let len = b.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (len - 1.0).abs() > 1e-9 || !(b.length_mm > 0.0) {
                return Err(Error::Topology(format!(
                    "bone {}→{}: bad direction or length",
                    b.parent, b.child
                )));
            }
            placed[b.child] = true;
        }
        if let Some(j) = placed.iter().position(|p| !p) {
            return Err(Error::Topology(format!(
                "joint {j} is not reached by the bone table"
            )));
        }
        Ok(())
    }

    fn range(&self, child: usize) -> Option<&AngleRange> {
        self.angle_ranges.iter().find(|r| r.child == child)
    }

    /// World-frame joint positions for a root orientation and per-joint
    /// local rotations (indexed by child joint).
    pub fn pose(&self, num_joints: usize, root_rotation: &Mat3, local: &[Mat3]) -> Vec<Vec3> {
        let mut position = vec![[0.0; 3]; num_joints];
        let mut frame = vec![*root_rotation; num_joints];
        for b in &self.bones {
            let f = mat_mul(&frame[b.parent], &local[b.child]);
            let d = mat_vec(&f, &b.direction);
            let p = position[b.parent];
            position[b.child] = [0, 1, 2].map(|i| p[i] + b.length_mm * d[i]);
            frame[b.child] = f;
        }
        position
    }

    /// Random articulation within the angle ranges.
    pub fn sample_pose<R: Rng + ?Sized>(
        &self,
        num_joints: usize,
        root_rotation: &Mat3,
        rng: &mut R,
    ) -> Vec<Vec3> {
        let identity = euler_xyz(0.0, 0.0, 0.0);
        let mut local = vec![identity; num_joints];
        for b in &self.bones {
            if let Some(r) = self.range(b.child) {
                let mut angle = |k: usize| {
                    let (lo, hi) = (r.min_deg[k], r.max_deg[k]);
                    let deg = if hi > lo {
                        rng.random_range(lo..=hi)
                    } else {
                        lo
                    };
                    deg.to_radians()
                };
                let (a, bb, c) = (angle(0), angle(1), angle(2));
                local[b.child] = euler_xyz(a, bb, c);
            }
        }
        self.pose(num_joints, root_rotation, &local)
    }
}

/// A generated sample together with the quantities needed to reproduce its
/// 2D pose from its 3D pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub sample: PoseSample,
    pub pixels: Vec<[f64; 2]>,
    /// Camera-frame root position, millimeters.
    pub root_offset: Vec3,
    pub camera_index: usize,
}

const MAX_RETRIES: usize = 100;
const MIN_DEPTH_MM: f64 = 100.0;

/// Generates `count` samples: random articulations placed on the floor of
/// the capture space with random heading, viewed by a random camera.
pub fn synth_generate(
    skeleton: &SkeletonTopology,
    bones: &BoneTable,
    count: usize,
    seed: u64,
    cameras: &[CameraModel],
) -> Result<Vec<SynthSample>> {
    bones.validate(skeleton)?;
    if cameras.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one camera is required".into(),
        ));
    }
    for c in cameras {
        c.validate()?;
    }
    let n = skeleton.num_joints();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let mut attempt = 0;
        let sample = loop {
            if attempt == MAX_RETRIES {
                return Err(Error::Numerical(format!(
                    "sample {idx}: no valid view after {MAX_RETRIES} attempts"
                )));
            }
            attempt += 1;
            let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let lean = rng.random_range(-0.15..=0.15);
            let root_rotation = mat_mul(&euler_xyz(0.0, heading, 0.0), &euler_xyz(lean, 0.0, 0.0));
            let body = bones.sample_pose(n, &root_rotation, &mut rng);
            let place = [
                rng.random_range(-1000.0..=1000.0),
                950.0,
                rng.random_range(-1000.0..=1000.0),
            ];
            let camera_index = rng.random_range(0..cameras.len());
            let camera = &cameras[camera_index];
            let cam: Vec<Vec3> = body
                .iter()
                .map(|p| {
                    camera.world_to_camera(&[p[0] + place[0], p[1] + place[1], p[2] + place[2]])
                })
                .collect();
            if cam.iter().any(|p| p[2] < MIN_DEPTH_MM) {
                continue;
            }
            let pixels: Vec<[f64; 2]> = cam.iter().map(|p| camera.project(p)).collect();
            let inside = pixels.iter().all(|p| {
                (0.0..=camera.image_size[0]).contains(&p[0])
                    && (0.0..=camera.image_size[1]).contains(&p[1])
            });
            if !inside {
                continue;
            }
            let sample = normalize(
                format!("synth_{seed}_{idx:06}"),
                &pixels,
                &cam,
                camera.image_size,
                skeleton.root,
            )?;
            break SynthSample {
                sample,
                pixels,
                root_offset: cam[skeleton.root],
                camera_index,
            };
        };
        out.push(sample);
    }
    Ok(out)
}
