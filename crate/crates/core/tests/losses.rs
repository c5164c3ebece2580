use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ha2g_core::losses::{
    contrastive_multilevel, gan_discriminator_loss, gan_generator_loss, huber_hierarchical, kld_loss, physical_loss, pose_angles, style_diverging,
    total_loss, LossComponents, LossError, LossWeights,
};
use ha2g_core::pose::AngleProfile;
use ha2g_core::tensor::{gradient_check, Tape, Tensor, TensorError, Var};

fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn rand_t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    t2(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn tens(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

fn huber_scalar(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta { 0.5 * x * x } else { delta * (x.abs() - 0.5 * delta) }
}

#[test]
fn huber_closed_forms() {
    for (diff, want) in [(0.5, 0.125), (3.0, 2.5), (0.0, 0.0)] {
        let mut tape = Tape::new();
        let p = tape.constant(t2(1, 1, vec![diff]));
        let t = tape.constant(t2(1, 1, vec![0.0]));
        let l = huber_hierarchical(&mut tape, &[p], &[t], 1.0).unwrap();
        assert_abs_diff_eq!(scalar(&tape, l), want, epsilon = 1e-15);
    }
}

#[test]
fn huber_averages_level_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shapes = [(4, 3), (4, 6), (4, 9)];
    let mut tape = Tape::new();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut want = 0.0;
    for &(r, c) in &shapes {
        let (a, b) = (rand_t(r, c, &mut rng).map(|v| 3.0 * v), rand_t(r, c, &mut rng));
        want += a.data().iter().zip(b.data()).map(|(x, y)| huber_scalar(x - y, 1.0)).sum::<f64>() / (r * c) as f64;
        pred.push(tape.constant(a));
        truth.push(tape.constant(b));
    }
    let l = huber_hierarchical(&mut tape, &pred, &truth, 1.0).unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), want / 3.0, epsilon = 1e-12);
    let short = huber_hierarchical(&mut tape, &pred[..2], &truth, 1.0);
    assert!(matches!(short, Err(LossError::DimMismatch(_))));
}

fn unit_rows(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn contrastive_loop(text: &[Vec<f64>], audio: &[Vec<Vec<f64>>; 3], frames: usize, batch: usize, tau: f64) -> f64 {
    let mut total = 0.0;
    for t in 0..frames {
        for b in 0..batch {
            let q = &text[t * batch + b];
            let pos = (cosine(q, &audio[2][t * batch + b]) / tau).exp();
            let mut den = 0.0;
            for level in audio {
                for k in 0..batch {
                    den += (cosine(q, &level[t * batch + k]) / tau).exp();
                }
            }
            total += -(pos / den).ln();
        }
    }
    total / (frames * batch) as f64
}

fn run_contrastive(text: &[Vec<f64>], audio: &[Vec<Vec<f64>>; 3], frames: usize, batch: usize, tau: f64) -> Result<f64, LossError> {
    let d = text[0].len();
    let flat = |rows: &[Vec<f64>]| t2(rows.len(), d, rows.concat());
    let mut tape = Tape::new();
    let tv = tape.constant(flat(text));
    let av = [tape.constant(flat(&audio[0])), tape.constant(flat(&audio[1])), tape.constant(flat(&audio[2]))];
    let l = contrastive_multilevel(&mut tape, tv, &av, frames, batch, tau)?;
    Ok(scalar(&tape, l))
}

#[test]
fn contrastive_closed_forms() {
    let e = vec![vec![1.0, 0.0, 0.0]];
    let same = [e.clone(), e.clone(), e.clone()];
    assert_abs_diff_eq!(run_contrastive(&e, &same, 1, 1, 0.07).unwrap(), 3f64.ln(), epsilon = 1e-9);
    let ortho = [vec![vec![0.0, 1.0, 0.0]], vec![vec![0.0, 0.0, 1.0]], e.clone()];
    let want = (1.0 + 2.0 * (-1.0f64 / 0.07).exp()).ln();
    let got = run_contrastive(&e, &ortho, 1, 1, 0.07).unwrap();
    assert_abs_diff_eq!(got, want, epsilon = 1e-15);
    assert!((got - 1.25e-6).abs() < 0.01e-6, "{got}");
}

#[test]
fn contrastive_matches_loop_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (frames, batch, d) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..7));
        let rows = frames * batch;
        let text = unit_rows(rows, d, &mut rng);
        let audio = [unit_rows(rows, d, &mut rng), unit_rows(rows, d, &mut rng), unit_rows(rows, d, &mut rng)];
        let tau = rng.random_range(0.05..1.0);
        let got = run_contrastive(&text, &audio, frames, batch, tau).unwrap();
        assert_abs_diff_eq!(got, contrastive_loop(&text, &audio, frames, batch, tau), epsilon = 1e-10);
        assert!(got > 0.0);
    }
}

#[test]
fn contrastive_rejects_zero_vectors() {
    let text = vec![vec![0.0, 0.0]];
    let a = vec![vec![1.0, 0.0]];
    assert_eq!(run_contrastive(&text, &[a.clone(), a.clone(), a], 1, 1, 0.1), Err(LossError::ZeroVector));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn contrastive_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = unit_rows(6, 4, &mut rng);
        let audio = [unit_rows(6, 4, &mut rng), unit_rows(6, 4, &mut rng), unit_rows(6, 4, &mut rng)];
        let base = run_contrastive(&text, &audio, 2, 3, 0.07).unwrap();
        let mut scaled = audio.clone();
        for v in scaled[1][4].iter_mut() { *v *= scale; }
        let mut text2 = text.clone();
        for v in text2[0].iter_mut() { *v *= scale; }
        prop_assert!((run_contrastive(&text2, &scaled, 2, 3, 0.07).unwrap() - base).abs() < 1e-8);
    }

    #[test]
    fn style_loss_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p1, p2) = (rand_t(6, 4, &mut rng), rand_t(6, 4, &mut rng));
        let (i1, i2) = (rand_t(2, 5, &mut rng), rand_t(2, 5, &mut rng));
        let a = style_value(&p1, &p2, &i1, &i2, 1000.0).unwrap();
        let b = style_value(&p2, &p1, &i2, &i1, 1000.0).unwrap();
        prop_assert!((a - b).abs() < 1e-14);
        prop_assert!(a <= 0.0);
    }

    #[test]
    fn physical_loss_grows_with_deviation(mu in -90.0f64..90.0, var in 0.5f64..100.0, a in 0.0f64..30.0, b in 0.0f64..30.0) {
        let profile = AngleProfile { means: vec![mu], variances: vec![var] };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        prop_assert!(physical_value(&[mu + lo], &profile) < physical_value(&[mu + hi], &profile));
        prop_assert!(physical_value(&[mu + lo], &profile) >= 0.5 * (2.0 * std::f64::consts::PI * var).ln() - 1e-12);
    }

    #[test]
    fn kld_is_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mu, lv) = (rand_t(3, 18, &mut rng).map(|v| 3.0 * v), rand_t(3, 18, &mut rng).map(|v| 4.0 * v));
        let mut tape = Tape::new();
        let (m, l) = (tape.constant(mu), tape.constant(lv));
        let k = kld_loss(&mut tape, m, l).unwrap();
        prop_assert!(scalar(&tape, k) >= 0.0);
    }
}

fn gan_values(real: f64, fake: f64) -> (f64, f64) {
    let mut tape = Tape::new();
    let r = tape.constant(t2(1, 1, vec![real]));
    let f = tape.constant(t2(1, 1, vec![fake]));
    let g = gan_generator_loss(&mut tape, f);
    let d = gan_discriminator_loss(&mut tape, r, f).unwrap();
    (scalar(&tape, g), scalar(&tape, d))
}

#[test]
fn gan_closed_forms() {
    let (g, d) = gan_values(0.5, 0.5);
    assert_abs_diff_eq!(d, 2.0 * 2f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(g, 2f64.ln(), epsilon = 1e-12);
    assert!(gan_values(0.5, 1.0 - 1e-9).0 < 1e-6);
    let (g, d) = gan_values(0.0, 1.0);
    assert!(g.is_finite() && d.is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let real: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..0.99)).collect();
    let fake: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..0.99)).collect();
    let mut tape = Tape::new();
    let r = tape.constant(t2(7, 1, real.clone()));
    let f = tape.constant(t2(7, 1, fake.clone()));
    let gl = gan_generator_loss(&mut tape, f);
    let dl = gan_discriminator_loss(&mut tape, r, f).unwrap();
    let want_g = -fake.iter().map(|p| p.ln()).sum::<f64>() / 7.0;
    let want_d = -real.iter().map(|p| p.ln()).sum::<f64>() / 7.0 - fake.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 7.0;
    assert_abs_diff_eq!(scalar(&tape, gl), want_g, epsilon = 1e-12);
    assert_abs_diff_eq!(scalar(&tape, dl), want_d, epsilon = 1e-12);
}

fn style_value(p1: &Tensor, p2: &Tensor, i1: &Tensor, i2: &Tensor, eps: f64) -> Result<f64, LossError> {
    let batch = i1.shape()[0];
    let frames = p1.shape()[0] / batch;
    let mut tape = Tape::new();
    let vars: Vec<Var> = [p1, p2, i1, i2].iter().map(|t| tape.constant((*t).clone())).collect();
    let l = style_diverging(&mut tape, vars[0], vars[1], vars[2], vars[3], frames, batch, eps, 1.0)?;
    Ok(scalar(&tape, l))
}

#[test]
fn style_loss_closed_forms() {
    let p = t2(1, 1, vec![0.3]);
    let (i1, i2) = (t2(1, 1, vec![0.0]), t2(1, 1, vec![1.0]));
    assert_eq!(style_value(&p, &p, &i1, &i2, 1000.0).unwrap(), 0.0);
    // Huber(2.5) = 2 with delta 1.
    let far = t2(1, 1, vec![2.8]);
    assert_abs_diff_eq!(style_value(&p, &far, &i1, &i2, 1000.0).unwrap(), -2.0, epsilon = 1e-12);
    let near = t2(1, 1, vec![1e-6]);
    assert_eq!(style_value(&p, &far, &i1, &near, 1000.0).unwrap(), -1000.0);
    assert!(matches!(style_value(&p, &far, &i1, &i1, 1000.0), Err(LossError::IdenticalIdentities(_))));
}

#[test]
fn style_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (frames, batch, d) = (4, 3, 5);
    let (p1, p2) = (rand_t(frames * batch, d, &mut rng).map(|v| 2.0 * v), rand_t(frames * batch, d, &mut rng));
    let (i1, i2) = (rand_t(batch, 6, &mut rng), rand_t(batch, 6, &mut rng));
    let mut want = 0.0;
    for b in 0..batch {
        let mut h = 0.0;
        for t in 0..frames {
            for j in 0..d {
                let r = (t * batch + b) * d + j;
                h += huber_scalar(p1.data()[r] - p2.data()[r], 1.0);
            }
        }
        h /= (frames * d) as f64;
        let l1: f64 = (0..6).map(|j| (i1.data()[b * 6 + j] - i2.data()[b * 6 + j]).abs()).sum();
        want += (h / l1).min(1000.0);
    }
    assert_abs_diff_eq!(style_value(&p1, &p2, &i1, &i2, 1000.0).unwrap(), -want / batch as f64, epsilon = 1e-12);
}

#[test]
fn kld_closed_forms() {
    let kld = |mu: f64, lv: f64| {
        let mut tape = Tape::new();
        let (m, l) = (tape.constant(t2(1, 1, vec![mu])), tape.constant(t2(1, 1, vec![lv])));
        let k = kld_loss(&mut tape, m, l).unwrap();
        scalar(&tape, k)
    };
    assert_eq!(kld(0.0, 0.0), 0.0);
    assert_abs_diff_eq!(kld(1.0, 0.0), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(kld(0.0, 1.0), 0.5 * (1f64.exp() - 2.0), epsilon = 1e-15);
}

fn physical_value(angles: &[f64], profile: &AngleProfile) -> f64 {
    let a = profile.len();
    let mut tape = Tape::new();
    let v = tape.constant(t2(angles.len() / a, a, angles.to_vec()));
    let l = physical_loss(&mut tape, v, profile).unwrap();
    scalar(&tape, l)
}

#[test]
fn physical_loss_closed_form() {
    let profile = AngleProfile { means: vec![37.0], variances: vec![9.01] };
    let got = physical_value(&[37.0], &profile);
    assert_abs_diff_eq!(got, 0.5 * (2.0 * std::f64::consts::PI * 9.01).ln(), epsilon = 1e-12);
    assert!((got - 2.018).abs() < 1e-3, "{got}");
}

#[test]
fn physical_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (rows, a) = (5, 4);
    let profile = AngleProfile {
        means: (0..a).map(|_| rng.random_range(0.0..180.0)).collect(),
        variances: (0..a).map(|_| rng.random_range(1.0..200.0)).collect(),
    };
    let angles: Vec<f64> = (0..rows * a).map(|_| rng.random_range(0.0..180.0)).collect();
    let mut want = 0.0;
    for r in 0..rows {
        for j in 0..a {
            let (m, v) = (profile.means[j], profile.variances[j]);
            let x = angles[r * a + j];
            want += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / (2.0 * v);
        }
    }
    assert_abs_diff_eq!(physical_value(&angles, &profile), want / rows as f64, epsilon = 1e-10);
    let bad = AngleProfile { means: vec![0.0, 0.0], variances: vec![1.0, 0.0] };
    let mut tape = Tape::new();
    let v = tape.constant(t2(1, 2, vec![1.0, 2.0]));
    assert_eq!(physical_loss(&mut tape, v, &bad).unwrap_err(), LossError::DegenerateVariance(1));
}

#[test]
fn pose_angles_by_hand() {
    // Bones 0 = +x, 1 = +y, 2 = (1,1,0)/sqrt2.
    let s = 0.5f64.sqrt();
    let pose = t2(1, 9, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, s, s, 0.0]);
    let mut tape = Tape::new();
    let p = tape.constant(pose);
    let a = pose_angles(&mut tape, p, &[(0, 1), (0, 2), (1, 1)]).unwrap();
    let v = tape.value(a).data().to_vec();
    assert_abs_diff_eq!(v[0], 90.0, epsilon = 1e-9);
    assert_abs_diff_eq!(v[1], 45.0, epsilon = 1e-9);
    assert!(v[2] < 0.1);
}

#[test]
fn total_loss_arithmetic() {
    let ones = LossComponents { gan: 1.0, huber: 1.0, physical: 1.0, style: 1.0, kld: 1.0, contrastive: 1.0 };
    assert_abs_diff_eq!(total_loss(&ones, &LossWeights::default()).unwrap(), 201.35, epsilon = 1e-12);
    let zero = LossWeights { lambda_h: 0.0, lambda_p: 0.0, lambda_s: 0.0, lambda_k: 0.0, lambda_c: 0.0, ..LossWeights::default() };
    let c = LossComponents { gan: 0.7, huber: 3.0, physical: 9.0, style: -1.0, kld: 2.0, contrastive: 4.0 };
    assert_eq!(total_loss(&c, &zero).unwrap(), 0.7);
    let doubled = LossComponents { huber: 6.0, ..c };
    let w = LossWeights::default();
    assert_abs_diff_eq!(total_loss(&doubled, &w).unwrap() - total_loss(&c, &w).unwrap(), 3.0 * w.lambda_h, epsilon = 1e-9);
    let bad = LossComponents { kld: f64::NAN, ..c };
    assert_eq!(total_loss(&bad, &w), Err(LossError::NonFinite("kld".into())));
}

#[test]
fn weights_validate() {
    assert!(LossWeights::default().validate().is_ok());
    assert!(LossWeights { tau: 0.0, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights { lambda_p: -1.0, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights { huber_delta: 0.0, ..LossWeights::default() }.validate().is_err());
}

const TOL: f64 = 1e-4;

#[test]
fn huber_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // Offsets keep every element clear of the |x| = delta kink.
    let x = rand_t(4, 5, &mut rng).map(|v| if v.abs() > 0.5 { v * 3.0 } else { v });
    let truth = rand_t(4, 5, &mut rng).map(|v| v * 0.01);
    let err = gradient_check(
        |tape, p| {
            let t = tape.constant(truth.clone());
            huber_hierarchical(tape, &[p], &[t], 1.0).map_err(tens)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn contrastive_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (frames, batch, d) = (3, 2, 4);
    let audio: Vec<Tensor> = (0..3).map(|_| rand_t(frames * batch, d, &mut rng)).collect();
    let text = rand_t(frames * batch, d, &mut rng);
    let err = gradient_check(
        |tape, t| {
            let a = [tape.constant(audio[0].clone()), tape.constant(audio[1].clone()), tape.constant(audio[2].clone())];
            contrastive_multilevel(tape, t, &a, frames, batch, 0.5).map_err(tens)
        },
        &text,
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
    let err = gradient_check(
        |tape, a2| {
            let t = tape.constant(text.clone());
            let a = [tape.constant(audio[0].clone()), tape.constant(audio[1].clone()), a2];
            contrastive_multilevel(tape, t, &a, frames, batch, 0.5).map_err(tens)
        },
        &audio[2],
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gan_gradients() {
    let probs = t2(5, 1, vec![0.1, 0.3, 0.5, 0.7, 0.9]);
    let err = gradient_check(|tape, f| Ok(gan_generator_loss(tape, f)), &probs, 1e-7).unwrap();
    assert!(err < TOL, "{err}");
    let real = t2(5, 1, vec![0.2, 0.4, 0.6, 0.8, 0.95]);
    let err = gradient_check(
        |tape, f| {
            let r = tape.constant(real.clone());
            gan_discriminator_loss(tape, r, f).map_err(tens)
        },
        &probs,
        1e-7,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn style_kld_and_physical_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let p2 = rand_t(6, 4, &mut rng);
    let p1 = rand_t(6, 4, &mut rng).map(|v| v * 0.4);
    let (i1, i2) = (rand_t(2, 3, &mut rng), rand_t(2, 3, &mut rng));
    let err = gradient_check(
        |tape, p| {
            let (b, a, c) = (tape.constant(p2.clone()), tape.constant(i1.clone()), tape.constant(i2.clone()));
            style_diverging(tape, p, b, a, c, 3, 2, 1000.0, 1.0).map_err(tens)
        },
        &p1,
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "style {err}");
    let err = gradient_check(
        |tape, id| {
            let (a, b, c) = (tape.constant(p1.clone()), tape.constant(p2.clone()), tape.constant(i2.clone()));
            style_diverging(tape, a, b, id, c, 3, 2, 1000.0, 1.0).map_err(tens)
        },
        &i1,
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "style id {err}");

    let mu = rand_t(2, 5, &mut rng);
    let lv = rand_t(2, 5, &mut rng);
    let err = gradient_check(
        |tape, m| {
            let l = tape.constant(lv.clone());
            kld_loss(tape, m, l).map_err(tens)
        },
        &mu,
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "kld mu {err}");
    let err = gradient_check(
        |tape, l| {
            let m = tape.constant(mu.clone());
            kld_loss(tape, m, l).map_err(tens)
        },
        &lv,
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "kld logvar {err}");

    let profile = AngleProfile { means: vec![60.0, 100.0], variances: vec![30.0, 90.0] };
    let pose = rand_t(3, 9, &mut rng);
    let err = gradient_check(
        |tape, p| {
            let a = pose_angles(tape, p, &[(0, 1), (1, 2)]).map_err(tens)?;
            physical_loss(tape, a, &profile).map_err(tens)
        },
        &pose,
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "physical {err}");
}
