use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClipRecord, DataError, FlatArray, MelConfig};
use crate::pose::{PoseSequence, Skeleton};

/// Settings for the synthetic beat-driven corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub clips: usize,
    pub frames: usize,
    pub joints: usize,
    pub speakers: usize,
    /// Beats per second.
    pub beat_rate: f64,
    pub fps: f64,
    /// Distinct burst pitches; token ids are `1..=pitch_classes`.
    pub pitch_classes: usize,
    /// Motion amplitude per speaker; cycles when shorter than `speakers`.
    pub speaker_amplitudes: Vec<f64>,
    pub mel: MelConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clips: 500,
            frames: 34,
            joints: 43,
            speakers: 4,
            beat_rate: 2.0,
            fps: 15.0,
            pitch_classes: 4,
            speaker_amplitudes: vec![1.0, 0.6, 1.4, 0.8],
            mel: MelConfig::default(),
        }
    }
}

/// A generated clip with its audio and the frames that carry a beat.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub record: ClipRecord,
    pub audio: Vec<f64>,
    pub pose: PoseSequence,
    pub beat_frames: Vec<usize>,
}

const BODY_SWING_DEG: f64 = 18.0;
const CURL_SWING_DEG: f64 = 25.0;
const BURST_SECONDS: f64 = 0.3;
const FADE_SECONDS: f64 = 0.1;

type V3 = [f64; 3];
type M3 = [[f64; 3]; 3];

fn rot(axis: V3, angle: f64) -> M3 {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

fn mat_vec(a: &M3, v: V3) -> V3 {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: V3) -> V3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

/// Unit vector perpendicular to `v` in a random direction.
fn random_perp(v: V3, rng: &mut impl Rng) -> V3 {
    loop {
        let r = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let c = cross(v, r);
        if c.iter().map(|x| x * x).sum::<f64>() > 1e-3 {
            return normalize(c);
        }
    }
}

/// Per-bone rig shared by all clips of one speaker.
struct Rig {
    rest: Vec<V3>,
    axis: Vec<V3>,
    weight: Vec<f64>,
    curl: Vec<bool>,
    parent_bone: Vec<Option<usize>>,
}

fn build_rigs(skeleton: &Skeleton, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Rig> {
    let bones = skeleton.bones();
    let nb = bones.len();
    let mut bone_of_child = vec![None; skeleton.joint_count()];
    for (b, &(_, c)) in bones.iter().enumerate() {
        bone_of_child[c] = Some(b);
    }
    let parent_bone: Vec<Option<usize>> = bones.iter().map(|&(p, _)| bone_of_child[p]).collect();
    let depth = skeleton.hierarchy().depth();
    let mut first_level = vec![depth; nb];
    for level in (1..=depth).rev() {
        let n = skeleton.hierarchy().bone_count(level).expect("level in range");
        first_level[..n].iter_mut().for_each(|l| *l = level);
    }
    let curl: Vec<bool> = first_level.iter().map(|&l| depth > 1 && l > depth / 2).collect();
    let rest_angle: Vec<f64> = (0..nb).map(|_| rng.random_range(50f64..130.0).to_radians()).collect();
    let weight: Vec<f64> = (0..nb)
        .map(|_| rng.random_range(0.4..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let base_axis_seed: Vec<u64> = (0..nb).map(|_| rng.random()).collect();

    (0..spec.speakers)
        .map(|s| {
            let twist = TAU * s as f64 / spec.speakers as f64;
            let mut rest = vec![[0.0; 3]; nb];
            let mut axis = vec![[0.0; 3]; nb];
            for &b in skeleton.tree_order() {
                match parent_bone[b] {
                    None => {
                        rest[b] = [0.0, 1.0, 0.0];
                        axis[b] = [0.0, 0.0, 1.0];
                    }
                    Some(pb) => {
                        let r = rest[pb];
                        let base = random_perp(r, &mut ChaCha8Rng::seed_from_u64(base_axis_seed[b]));
                        let a = normalize(mat_vec(&rot(r, twist), base));
                        axis[b] = a;
                        rest[b] = normalize(mat_vec(&rot(a, rest_angle[b]), r));
                    }
                }
            }
            Rig { rest, axis, weight: weight.clone(), curl: curl.clone(), parent_bone: parent_bone.clone() }
        })
        .collect()
}

/// Piecewise half-cosine interpolation through `(frame, value)` keys.
fn keyed_signal(keys: &[(f64, f64)], frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|t| {
            let t = t as f64;
            let i = keys.iter().rposition(|k| k.0 <= t).unwrap_or(0);
            if i + 1 >= keys.len() {
                return keys[i].1;
            }
            let (t0, v0) = keys[i];
            let (t1, v1) = keys[i + 1];
            if t1 <= t0 {
                return v1;
            }
            let u = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            v0 + (v1 - v0) * (1.0 - (PI * u).cos()) / 2.0
        })
        .collect()
}

/// Generates a reproducible corpus where a hidden beat train drives both the
/// audio (tone bursts) and the motion (holds of the bone rotations).
pub fn synth_corpus(spec: &SynthSpec, skeleton: &Skeleton, seed: u64) -> Result<Vec<SynthClip>, DataError> {
    let gap = spec.fps / spec.beat_rate;
    if spec.clips == 0 || spec.speakers == 0 || spec.pitch_classes == 0 {
        return Err(DataError::BadSpec("clips, speakers and pitch classes must be positive".into()));
    }
    if spec.frames < 8 {
        return Err(DataError::BadSpec(format!("{} frames is too short", spec.frames)));
    }
    if !(gap >= 4.0) || !spec.fps.is_finite() {
        return Err(DataError::BadSpec(format!("beat rate {} too high for {} fps", spec.beat_rate, spec.fps)));
    }
    if spec.joints != skeleton.joint_count() {
        return Err(DataError::BadSpec(format!("spec has {} joints, skeleton {}", spec.joints, skeleton.joint_count())));
    }
    if spec.speaker_amplitudes.is_empty() || spec.speaker_amplitudes.iter().any(|a| !(*a >= 0.0)) {
        return Err(DataError::BadSpec("speaker amplitudes must be non-negative".into()));
    }
    let sr = spec.mel.sample_rate as f64;
    let pitch = |c: usize| 300.0 * 2f64.powf(c as f64 * 0.5);
    if pitch(spec.pitch_classes - 1) >= sr / 2.0 {
        return Err(DataError::BadSpec("too many pitch classes for the sample rate".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rigs = build_rigs(skeleton, spec, &mut rng);
    let nb = skeleton.bone_count();
    let n = spec.frames;
    let (gap_lo, gap_hi) = (gap.floor() as usize, gap.ceil() as usize);
    let first_max = (gap_lo / 2 + 2).min(n - 4).max(3);
    let last_real = n - 4;
    let curl_level = |c: usize| {
        if spec.pitch_classes == 1 {
            0.0
        } else {
            -1.0 + 2.0 * c as f64 / (spec.pitch_classes - 1) as f64
        }
    };

    let mut out = Vec::with_capacity(spec.clips);
    for ci in 0..spec.clips {
        let speaker = ci % spec.speakers;
        let rig = &rigs[speaker];
        let amp = spec.speaker_amplitudes[speaker % spec.speaker_amplitudes.len()];
        let mut crng = ChaCha8Rng::seed_from_u64(rng.random());

        // Beat train, extended by virtual beats on both sides so motion never stalls.
        let k0 = crng.random_range(3..=first_max.max(3));
        let step = |r: &mut ChaCha8Rng| r.random_range(gap_lo..=gap_hi) as isize;
        let mut beats: Vec<isize> = vec![k0 as isize - step(&mut crng), k0 as isize];
        while *beats.last().unwrap() < n as isize + 1 {
            let next = beats.last().unwrap() + step(&mut crng);
            beats.push(next);
        }
        let sign0 = if crng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut body_keys = Vec::new();
        let mut curl_keys = Vec::new();
        let mut classes = Vec::new();
        for (i, &k) in beats.iter().enumerate() {
            let v = sign0 * if i % 2 == 0 { 1.0 } else { -1.0 } * crng.random_range(0.6..1.0);
            let class = crng.random_range(0..spec.pitch_classes);
            classes.push(class);
            for t in [k as f64, k as f64 + 1.0] {
                body_keys.push((t, v));
                curl_keys.push((t, curl_level(class)));
            }
        }
        let body = keyed_signal(&body_keys, n);
        let curl = keyed_signal(&curl_keys, n);

        let mut data = Vec::with_capacity(n * nb * 3);
        let mut frames_rot = vec![[[0.0; 3]; 3]; nb];
        for t in 0..n {
            for &b in skeleton.tree_order() {
                let sig = if rig.curl[b] { curl[t] * CURL_SWING_DEG } else { body[t] * BODY_SWING_DEG };
                let phi = (amp * rig.weight[b] * sig).to_radians();
                let local = rot(rig.axis[b], phi);
                frames_rot[b] = match rig.parent_bone[b] {
                    Some(pb) => mat_mul(&frames_rot[pb], &local),
                    None => local,
                };
            }
            for b in 0..nb {
                data.extend(normalize(mat_vec(&frames_rot[b], rig.rest[b])));
            }
        }
        let pose = PoseSequence::new(n, nb, data, spec.fps).expect("consistent synthetic shape");

        let total = spec.mel.clip_samples(n, spec.fps);
        let lead = spec.mel.lead();
        let mut audio: Vec<f64> = (0..total)
            .map(|i| {
                let t = i as f64 / sr;
                0.01 * (TAU * 150.0 * t).sin() + 0.005 * (TAU * 2200.0 * t).sin()
            })
            .collect();
        let mut tokens = vec![0u32; n];
        let mut beat_frames = Vec::new();
        let burst_len = (BURST_SECONDS * sr) as usize;
        for (&k, &class) in beats.iter().zip(&classes) {
            if k < 3 || k as usize > last_real {
                continue;
            }
            let k = k as usize;
            beat_frames.push(k);
            tokens[k] = 1 + class as u32;
            let start = (k as f64 / spec.fps * sr).round() as usize + lead;
            let f = pitch(class);
            for j in 0..burst_len.min(total.saturating_sub(start)) {
                let t = j as f64 / sr;
                let fade_at = BURST_SECONDS - FADE_SECONDS;
                let fade = if t > fade_at { 0.5 + 0.5 * (PI * (t - fade_at) / FADE_SECONDS).cos() } else { 1.0 };
                let env = (-t / 0.05).exp() * (t / 0.005).min(1.0) * fade;
                audio[start + j] += 0.5 * env * (TAU * f * t).sin();
            }
        }

        let record = ClipRecord {
            clip_id: format!("clip_{:05}", ci),
            fps: spec.fps,
            dirvecs: Some(FlatArray { shape: vec![n, nb, 3], data: pose.data().to_vec() }),
            joints: None,
            audio: format!("wav/clip_{:05}.wav", ci),
            tokens,
            speaker,
        };
        out.push(SynthClip { record, audio, pose, beat_frames });
    }
    Ok(out)
}
