use serde::{Deserialize, Serialize};

use super::PoseError;

/// Joint count of the default upper-body skeleton.
pub const TED_JOINTS: usize = 43;

/// Parent of each joint in the default skeleton (`-1` marks the spine root).
///
/// Order: spine, neck, shoulders, elbows, wrists, left-hand fingers (index,
/// middle, pinky, ring, thumb; three joints each), right-hand fingers, nose,
/// eyes, ears.
const TED_PARENTS: [i64; TED_JOINTS] = [
    -1, 0, 1, 1, 2, 3, 4, 5, //
    6, 8, 9, 6, 11, 12, 6, 14, 15, 6, 17, 18, 6, 20, 21, //
    7, 23, 24, 7, 26, 27, 7, 29, 30, 7, 32, 33, 7, 35, 36, //
    1, 38, 38, 39, 40,
];

fn ted_levels() -> Vec<Vec<usize>> {
    let mut level: Vec<usize> = vec![0, 1, 2, 3, 38, 39, 40, 41, 42];
    let mut out = vec![level.clone()];
    let additions: [Vec<usize>; 5] = [
        vec![4, 5],
        vec![6, 7],
        (0..10).map(|f| 8 + 3 * f).collect(),
        (0..10).map(|f| 9 + 3 * f).collect(),
        (0..10).map(|f| 10 + 3 * f).collect(),
    ];
    for add in additions {
        level.extend(add);
        level.sort_unstable();
        out.push(level.clone());
    }
    out
}

/// Cumulative partition of joints into levels, coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionHierarchy {
    levels: Vec<Vec<usize>>,
    bone_counts: Vec<usize>,
}

impl MotionHierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Joints of `level` (1-based).
    pub fn joints(&self, level: usize) -> Result<&[usize], PoseError> {
        self.check(level)?;
        Ok(&self.levels[level - 1])
    }

    /// Number of bones in `level`; they are the first bones of the skeleton's bone list.
    pub fn bone_count(&self, level: usize) -> Result<usize, PoseError> {
        self.check(level)?;
        Ok(self.bone_counts[level - 1])
    }

    /// Flattened direction-vector dimension for every level.
    pub fn pose_dims(&self) -> Vec<usize> {
        self.bone_counts.iter().map(|b| b * 3).collect()
    }

    pub fn pose_dim(&self, level: usize) -> Result<usize, PoseError> {
        Ok(self.bone_count(level)? * 3)
    }

    /// Collapses to a single level holding every joint.
    pub fn holistic(&self) -> Self {
        Self {
            levels: vec![self.levels.last().cloned().unwrap_or_default()],
            bone_counts: vec![self.bone_counts.last().copied().unwrap_or(0)],
        }
    }

    fn check(&self, level: usize) -> Result<(), PoseError> {
        if level == 0 || level > self.levels.len() {
            return Err(PoseError::LevelOutOfRange { level, max: self.levels.len() });
        }
        Ok(())
    }
}

/// Kinematic tree with a fixed bone order.
///
/// Bones are sorted by the first hierarchy level that contains their child
/// joint, then by child index, so every level's bones form a prefix of
/// [`Skeleton::bones`].
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    root: usize,
    bones: Vec<(usize, usize)>,
    tree_order: Vec<usize>,
    angle_pairs: Vec<(usize, usize)>,
    hierarchy: MotionHierarchy,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    joints: usize,
    parents: Vec<i64>,
    #[serde(default)]
    levels: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    angle_pairs: Option<Vec<(usize, usize)>>,
}

impl Skeleton {
    /// The 43-joint upper body with its six-level hierarchy.
    pub fn ted43() -> Self {
        Self::new(&TED_PARENTS, Some(ted_levels()), None).expect("built-in skeleton is valid")
    }

    /// Builds a skeleton from parent indices (`-1` for the root).
    ///
    /// Without `levels` the hierarchy has a single level. Without
    /// `angle_pairs` every bone is paired with its parent bone.
    pub fn new(parents: &[i64], levels: Option<Vec<Vec<usize>>>, angle_pairs: Option<Vec<(usize, usize)>>) -> Result<Self, PoseError> {
        let j = parents.len();
        let invalid = |m: String| Err(PoseError::InvalidSkeleton(m));
        if j < 2 {
            return invalid("need at least two joints".into());
        }
        let mut par = Vec::with_capacity(j);
        for (i, &p) in parents.iter().enumerate() {
            par.push(match p {
                -1 => None,
                p if p >= 0 && (p as usize) < j && p as usize != i => Some(p as usize),
                _ => return invalid(format!("joint {} has invalid parent {}", i, p)),
            });
        }
        let roots: Vec<usize> = (0..j).filter(|&i| par[i].is_none()).collect();
        if roots.len() != 1 {
            return invalid(format!("expected one root, found {}", roots.len()));
        }
        let root = roots[0];

        // Breadth-first walk; also detects cycles and disconnected joints.
        let mut children = vec![Vec::new(); j];
        for (i, p) in par.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        let mut joint_order = vec![root];
        let mut head = 0;
        while head < joint_order.len() {
            let cur = joint_order[head];
            head += 1;
            joint_order.extend(children[cur].iter().copied());
        }
        if joint_order.len() != j {
            return invalid("parent graph is not a tree".into());
        }

        let levels = levels.unwrap_or_else(|| vec![(0..j).collect()]);
        let mut joint_level = vec![usize::MAX; j];
        for (li, level) in levels.iter().enumerate() {
            if li > 0 && !levels[li - 1].iter().all(|x| level.contains(x)) {
                return invalid(format!("level {} does not contain level {}", li + 1, li));
            }
            for &x in level {
                if x >= j {
                    return invalid(format!("level {} names joint {}", li + 1, x));
                }
                if let Some(p) = par[x] {
                    if !level.contains(&p) {
                        return invalid(format!("level {} holds joint {} without its parent", li + 1, x));
                    }
                }
                joint_level[x] = joint_level[x].min(li);
            }
        }
        if levels.is_empty() || joint_level.contains(&usize::MAX) || !levels[0].contains(&root) {
            return invalid("last level must cover every joint and the first must hold the root".into());
        }

        let mut bones: Vec<(usize, usize)> = (0..j).filter_map(|c| par[c].map(|p| (p, c))).collect();
        bones.sort_by_key(|&(_, c)| (joint_level[c], c));
        let bone_of_child: Vec<Option<usize>> = {
            let mut v = vec![None; j];
            for (b, &(_, c)) in bones.iter().enumerate() {
                v[c] = Some(b);
            }
            v
        };
        let tree_order = joint_order.iter().skip(1).map(|&c| bone_of_child[c].unwrap()).collect();
        let bone_counts = (0..levels.len()).map(|li| bones.iter().filter(|&&(_, c)| joint_level[c] <= li).count()).collect();

        let angle_pairs = match angle_pairs {
            Some(pairs) => {
                for &(a, b) in &pairs {
                    if a >= bones.len() || b >= bones.len() || bones[a].1 != bones[b].0 {
                        return invalid(format!("angle pair ({}, {}) does not join two adjacent bones", a, b));
                    }
                }
                pairs
            }
            None => bones
                .iter()
                .enumerate()
                .filter_map(|(b, &(p, _))| bone_of_child[p].map(|pb| (pb, b)))
                .collect(),
        };

        Ok(Self { parents: par, root, bones, tree_order, angle_pairs, hierarchy: MotionHierarchy { levels, bone_counts } })
    }

    pub fn from_json(text: &str) -> Result<Self, PoseError> {
        let f: SkeletonFile = serde_json::from_str(text).map_err(|e| PoseError::InvalidSkeleton(e.to_string()))?;
        if f.parents.len() != f.joints {
            return Err(PoseError::InvalidSkeleton(format!("{} parents for {} joints", f.parents.len(), f.joints)));
        }
        Self::new(&f.parents, f.levels, f.angle_pairs)
    }

    pub fn to_json(&self) -> String {
        let f = SkeletonFile {
            joints: self.joint_count(),
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            levels: Some(self.hierarchy.levels.clone()),
            angle_pairs: Some(self.angle_pairs.clone()),
        };
        serde_json::to_string_pretty(&f).expect("skeleton serialises")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// `(parent, child)` joint pairs in hierarchy order.
    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    /// Bone indices ordered so that each bone follows the bone of its parent joint.
    pub fn tree_order(&self) -> &[usize] {
        &self.tree_order
    }

    /// `(upstream bone, downstream bone)` index pairs meeting at a shared joint.
    pub fn angle_pairs(&self) -> &[(usize, usize)] {
        &self.angle_pairs
    }

    pub fn hierarchy(&self) -> &MotionHierarchy {
        &self.hierarchy
    }

    /// Same joints and bones with the hierarchy collapsed to one level.
    pub fn holistic(&self) -> Self {
        Self { hierarchy: self.hierarchy.holistic(), ..self.clone() }
    }
}
