//! Skeletons, bone direction vectors, joint angles and the motion hierarchy.

mod angles;
mod skeleton;

pub use angles::{angle_statistics, bone_angles, AngleProfile};
pub use skeleton::{MotionHierarchy, Skeleton, TED_JOINTS};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoseError {
    #[error("bone {bone} collapses to zero length at frame {frame}")]
    ZeroLengthBone { frame: usize, bone: usize },
    #[error("bone lengths must be positive (bone {0})")]
    NonPositiveLength(usize),
    #[error("hierarchy level {level} out of range 1..={max}")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("need at least two frames of angles")]
    InsufficientData,
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Per-frame unit direction vectors, one per bone.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    frames: usize,
    bones: usize,
    data: Vec<f64>,
    pub fps: f64,
}

impl PoseSequence {
    /// Wraps flat `frames x bones x 3` data. Vectors are not re-normalised.
    pub fn new(frames: usize, bones: usize, data: Vec<f64>, fps: f64) -> Result<Self, PoseError> {
        if frames == 0 || data.len() != frames * bones * 3 {
            return Err(PoseError::ShapeMismatch(format!(
                "{} values for {} frames x {} bones",
                data.len(),
                frames,
                bones
            )));
        }
        Ok(Self { frames, bones, data, fps })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bones(&self) -> usize {
        self.bones
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bones * 3..(t + 1) * self.bones * 3]
    }

    pub fn vector(&self, t: usize, bone: usize) -> [f64; 3] {
        let i = (t * self.bones + bone) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Largest deviation of any vector's norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        self.data
            .chunks(3)
            .map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Rescales every vector to unit length (zero vectors stay zero).
    pub fn normalize(&mut self) {
        for v in self.data.chunks_mut(3) {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Converts `frames x J x 3` joint coordinates into unit bone directions.
pub fn joints_to_dirvecs(joints: &[f64], frames: usize, skeleton: &Skeleton, fps: f64) -> Result<PoseSequence, PoseError> {
    let j = skeleton.joint_count();
    if joints.len() != frames * j * 3 || frames == 0 {
        return Err(PoseError::ShapeMismatch(format!("{} coordinates for {} frames x {} joints", joints.len(), frames, j)));
    }
    let bones = skeleton.bones();
    let mut data = Vec::with_capacity(frames * bones.len() * 3);
    for t in 0..frames {
        let frame = &joints[t * j * 3..(t + 1) * j * 3];
        for (b, &(p, c)) in bones.iter().enumerate() {
            let d = [frame[c * 3] - frame[p * 3], frame[c * 3 + 1] - frame[p * 3 + 1], frame[c * 3 + 2] - frame[p * 3 + 2]];
            let n = norm3(d);
            if n < 1e-9 {
                return Err(PoseError::ZeroLengthBone { frame: t, bone: b });
            }
            data.extend(d.iter().map(|x| x / n));
        }
    }
    PoseSequence::new(frames, bones.len(), data, fps)
}

/// Rebuilds joint coordinates by walking the tree from the root.
pub fn dirvecs_to_joints(pose: &PoseSequence, bone_lengths: &[f64], root: [f64; 3], skeleton: &Skeleton) -> Result<Vec<f64>, PoseError> {
    let bones = skeleton.bones();
    if bone_lengths.len() != bones.len() || pose.bones() != bones.len() {
        return Err(PoseError::ShapeMismatch(format!(
            "{} lengths / {} pose bones for {} skeleton bones",
            bone_lengths.len(),
            pose.bones(),
            bones.len()
        )));
    }
    if let Some(b) = bone_lengths.iter().position(|l| !(*l > 0.0)) {
        return Err(PoseError::NonPositiveLength(b));
    }
    let j = skeleton.joint_count();
    let mut out = vec![0.0; pose.frames() * j * 3];
    for t in 0..pose.frames() {
        let frame = &mut out[t * j * 3..(t + 1) * j * 3];
        frame[skeleton.root() * 3..skeleton.root() * 3 + 3].copy_from_slice(&root);
        for &b in skeleton.tree_order() {
            let (p, c) = bones[b];
            let d = pose.vector(t, b);
            for k in 0..3 {
                frame[c * 3 + k] = frame[p * 3 + k] + bone_lengths[b] * d[k];
            }
        }
    }
    Ok(out)
}

/// Flattened `frames x pose_dim(level)` slice holding the bones of a level.
pub fn hierarchy_slice(pose: &PoseSequence, level: usize, hierarchy: &MotionHierarchy) -> Result<Vec<f64>, PoseError> {
    let n_bones = hierarchy.bone_count(level)?;
    if pose.bones() < n_bones {
        return Err(PoseError::ShapeMismatch(format!("pose has {} bones, level needs {}", pose.bones(), n_bones)));
    }
    let mut out = Vec::with_capacity(pose.frames() * n_bones * 3);
    for t in 0..pose.frames() {
        out.extend_from_slice(&pose.frame(t)[..n_bones * 3]);
    }
    Ok(out)
}
