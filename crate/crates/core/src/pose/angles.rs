use super::{PoseError, PoseSequence, Skeleton};

/// Per-angle Gaussian statistics in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleProfile {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl AngleProfile {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Included angle, in degrees, between the bones of every angle pair.
/// Returns one row per frame.
pub fn bone_angles(pose: &PoseSequence, skeleton: &Skeleton) -> Vec<Vec<f64>> {
    let pairs = skeleton.angle_pairs();
    (0..pose.frames())
        .map(|t| {
            pairs
                .iter()
                .map(|&(a, b)| {
                    let (u, v) = (pose.vector(t, a), pose.vector(t, b));
                    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
                    dot.clamp(-1.0, 1.0).acos().to_degrees()
                })
                .collect()
        })
        .collect()
}

/// Mean and population variance of each angle over all frames of all clips.
pub fn angle_statistics<'a>(clips: impl IntoIterator<Item = &'a [Vec<f64>]>) -> Result<AngleProfile, PoseError> {
    let mut count = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    let mut rows: Vec<&Vec<f64>> = Vec::new();
    for clip in clips {
        for row in clip {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
            } else if row.len() != sum.len() {
                return Err(PoseError::ShapeMismatch(format!("{} angles vs {}", row.len(), sum.len())));
            }
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            rows.push(row);
            count += 1;
        }
    }
    if count < 2 {
        return Err(PoseError::InsufficientData);
    }
    let means: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut variances = vec![0.0; means.len()];
    for row in rows {
        for ((v, x), m) in variances.iter_mut().zip(row).zip(&means) {
            *v += (x - m) * (x - m);
        }
    }
    variances.iter_mut().for_each(|v| *v /= count as f64);
    Ok(AngleProfile { means, variances })
}
