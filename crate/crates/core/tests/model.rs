use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ha2g_core::data::{synth_corpus, SynthSpec};
use ha2g_core::model::checkpoint::{load_store, read_tensors, store_tensors, write_tensors, CheckpointError, Dtype};
use ha2g_core::model::{
    blend, AudioEncoder, Batch, Discriminator, Feedback, Generator, Identity, LevelDecoder, ModelConfig, ModelError, PreparedClip, StylePathway,
    TextEncoder,
};
use ha2g_core::nn::{Ctx, ParamStore};
use ha2g_core::pose::Skeleton;
use ha2g_core::tensor::{Tape, Tensor, Var};

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn prepared(cfg: &ModelConfig, clips: usize, seed: u64) -> Vec<PreparedClip> {
    let skel = Skeleton::ted43();
    let spec = SynthSpec { clips, frames: cfg.frames, mel: cfg.mel.clone(), ..SynthSpec::default() };
    synth_corpus(&spec, &skel, seed)
        .unwrap()
        .iter()
        .map(|c| PreparedClip::from_audio(&c.audio, &cfg.mel, &c.record.tokens, c.record.speaker, &c.pose).unwrap())
        .collect()
}

fn batch_of(cfg: &ModelConfig, clips: &[PreparedClip]) -> Batch {
    let dims = Skeleton::ted43().hierarchy().pose_dims();
    Batch::new(cfg, &dims, &clips.iter().collect::<Vec<_>>()).unwrap()
}

fn audio_feats(cfg: &ModelConfig, batch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let enc = AudioEncoder::new(&mut store, cfg, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let mel = tape.constant(rand_t(&[batch, cfg.mel.bins, cfg.mel_frames()], &mut rng));
    let f = enc.forward(&Ctx::new(&bound), &mut tape, mel).unwrap();
    f.iter().map(|&v| tape.shape(v).to_vec()).collect()
}

#[test]
fn audio_feature_shapes() {
    let cfg = ModelConfig::default();
    assert_eq!((cfg.mel.bins, cfg.mel_frames()), (128, 70));
    assert_eq!(audio_feats(&cfg, 1), vec![vec![34, 32]; 3]);
    assert_eq!(audio_feats(&cfg, 3), vec![vec![102, 32]; 3]);
    let desk = ModelConfig { frames: 16, ..ModelConfig::desk() };
    assert_eq!(desk.mel.bins, 32);
    assert_eq!(audio_feats(&desk, 2), vec![vec![32, 32]; 3]);
}

#[test]
fn audio_rejects_wrong_mel() {
    let cfg = ModelConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let enc = AudioEncoder::new(&mut store, &cfg, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let mel = tape.constant(Tensor::zeros(vec![1, cfg.mel.bins, cfg.mel_frames() + 1]));
    assert!(matches!(enc.forward(&Ctx::new(&bound), &mut tape, mel), Err(ModelError::BadMelShape { .. })));
}

fn text_out(enc: &TextEncoder, store: &ParamStore, tokens: &[usize]) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let v = enc.forward(&Ctx::new(&bound), &mut tape, tokens, 1).unwrap();
    tape.value(v).clone()
}

#[test]
fn text_encoder_shapes_and_shift_equivariance() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, &cfg, &mut rng);
    let n = 60;
    let tokens: Vec<usize> = (0..n).map(|i| if (20..40).contains(&i) { rng.random_range(1..16) } else { 0 }).collect();
    let base = text_out(&enc, &store, &tokens);
    assert_eq!(base.shape(), &[n, 32]);
    let k = 3;
    let mut shifted = vec![0; n];
    shifted[k..].copy_from_slice(&tokens[..n - k]);
    let moved = text_out(&enc, &store, &shifted);
    for t in 12..n - 12 {
        for j in 0..32 {
            assert_abs_diff_eq!(moved.data()[(t + k) * 32 + j], base.data()[t * 32 + j], epsilon = 1e-12);
        }
    }
    for n in [1, 5, 34] {
        assert_eq!(text_out(&enc, &store, &vec![0; n]).shape(), &[n, 32]);
    }
    let pad = text_out(&enc, &store, &[0; 10]);
    assert!(pad.all_finite());
    assert_eq!(pad, text_out(&enc, &store, &[0; 10]));
    assert_eq!(text_out(&enc, &store, &[99, 3]), text_out(&enc, &store, &[16, 3]));
}

fn style_setup(seed: u64) -> (ModelConfig, ParamStore, StylePathway) {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let sp = StylePathway::new(&mut store, &cfg, 6, &mut rng);
    (cfg, store, sp)
}

#[test]
fn coordinator_columns_are_distributions() {
    let (cfg, store, sp) = style_setup(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let ids = rand_t(&[5, cfg.style_dim], &mut rng).map(|v| 4.0 * v);
    let out = sp.forward(&Ctx::new(&bound), &mut tape, Identity::Raw(&ids)).unwrap();
    let c = tape.value(out.coord);
    assert_eq!(c.shape(), &[30, 3]);
    for row in c.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| *v > 0.0));
    }
    let bad = sp.forward(&Ctx::new(&bound), &mut tape, Identity::Speakers { ids: &[7], noise: None });
    assert!(matches!(bad, Err(ModelError::UnknownSpeaker(7))));
}

#[test]
fn zero_coordinator_is_uniform() {
    let (cfg, mut store, sp) = style_setup(4);
    store.get_mut(sp.coord.w).data_mut().fill(0.0);
    if let Some(b) = sp.coord.b {
        store.get_mut(b).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let zero = Tensor::zeros(vec![2, cfg.style_dim]);
    let out = sp.forward(&Ctx::new(&bound), &mut tape, Identity::Raw(&zero)).unwrap();
    assert!(tape.value(out.coord).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn speaker_identity_sampling() {
    let (cfg, store, sp) = style_setup(5);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let ctx = Ctx::new(&bound);
    let plain = sp.forward(&ctx, &mut tape, Identity::Speakers { ids: &[1, 2], noise: None }).unwrap();
    assert_eq!(tape.value(plain.f_id), tape.value(plain.mu.unwrap()));
    let eps = Tensor::full(vec![2, cfg.style_dim], 1.0);
    let noisy = sp.forward(&ctx, &mut tape, Identity::Speakers { ids: &[1, 2], noise: Some(&eps) }).unwrap();
    // logvar starts at zero, so the sample is mu + eps.
    for (a, b) in tape.value(noisy.f_id).data().iter().zip(tape.value(plain.f_id).data()) {
        assert_abs_diff_eq!(a - b, 1.0, epsilon = 1e-12);
    }
}

fn blend_value(coord: &Tensor, feats: &[Tensor; 3], h: usize, levels: usize) -> Tensor {
    let mut tape = Tape::new();
    let c = tape.constant(coord.clone());
    let f = [tape.constant(feats[0].clone()), tape.constant(feats[1].clone()), tape.constant(feats[2].clone())];
    let out = blend(&mut tape, c, &f, h, levels).unwrap();
    tape.value(out).clone()
}

fn random_coord(b: usize, levels: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::new();
    for _ in 0..b * levels {
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        data.extend(w.iter().map(|v| v / s));
    }
    Tensor::new(vec![b * levels, 3], data).unwrap()
}

#[test]
fn blend_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, b, d, levels) = (5, 3, 4, 6);
    let coord = random_coord(b, levels, &mut rng);
    let feats = [rand_t(&[n * b, d], &mut rng), rand_t(&[n * b, d], &mut rng), rand_t(&[n * b, d], &mut rng)];
    for h in 0..levels {
        let got = blend_value(&coord, &feats, h, levels);
        for t in 0..n {
            for bi in 0..b {
                for j in 0..d {
                    let r = (t * b + bi) * d + j;
                    let want: f64 = (0..3).map(|l| coord.data()[(bi * levels + h) * 3 + l] * feats[l].data()[r]).sum();
                    assert_abs_diff_eq!(got.data()[r], want, epsilon = 1e-12);
                }
            }
        }
    }
    let onehot = Tensor::new(vec![6, 3], [1.0, 0.0, 0.0].repeat(6)).unwrap();
    assert_eq!(blend_value(&onehot, &feats, 2, 6).data(), feats[0].data());
}

#[test]
fn uniform_blend_of_basis_vectors() {
    let e = |i: usize| {
        let mut v = vec![0.0; 5];
        v[i] = 1.0;
        Tensor::new(vec![1, 5], v).unwrap()
    };
    let coord = Tensor::full(vec![1, 3], 1.0 / 3.0);
    let out = blend_value(&coord, &[e(0), e(1), e(2)], 0, 1);
    for (j, v) in out.data().iter().enumerate() {
        assert_abs_diff_eq!(*v, if j < 3 { 1.0 / 3.0 } else { 0.0 }, epsilon = 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blend_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coord = random_coord(2, 3, &mut rng);
        let x: [Tensor; 3] = std::array::from_fn(|_| rand_t(&[8, 3], &mut rng));
        let y: [Tensor; 3] = std::array::from_fn(|_| rand_t(&[8, 3], &mut rng));
        let mix: [Tensor; 3] = std::array::from_fn(|l| {
            Tensor::new(vec![8, 3], x[l].data().iter().zip(y[l].data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap()
        });
        let (bx, by, bm) = (blend_value(&coord, &x, 1, 3), blend_value(&coord, &y, 1, 3), blend_value(&coord, &mix, 1, 3));
        for i in 0..bm.len() {
            prop_assert!((bm.data()[i] - alpha * bx.data()[i] - beta * by.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn coordinator_argmax_ignores_logit_offsets(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let (cfg, mut store, sp) = style_setup(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let id = rand_t(&[1, cfg.style_dim], &mut rng);
        let argmaxes = |store: &ParamStore| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let out = sp.forward(&Ctx::new(&bound), &mut tape, Identity::Raw(&id)).unwrap();
            tape.value(out.coord).data().chunks(3).map(|r| (0..3).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap()).collect::<Vec<_>>()
        };
        let before = argmaxes(&store);
        let bias = sp.coord.b.unwrap();
        for h in 0..6 {
            for l in 0..3 {
                store.get_mut(bias).data_mut()[h * 3 + l] += shift * (h as f64 + 1.0);
            }
        }
        prop_assert_eq!(before, argmaxes(&store));
    }
}

fn decoder_out(dec: &LevelDecoder, store: &ParamStore, prev: &Tensor, feat: &Tensor, n: usize, b: usize) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let (p, f) = (tape.constant(prev.clone()), tape.constant(feat.clone()));
    let v = dec.forward(&Ctx::new(&bound), &mut tape, p, f, None, n, b).unwrap();
    tape.value(v).clone()
}

#[test]
fn zero_decoder_outputs_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let dec = LevelDecoder::new(&mut store, "dec", 24, 32, 30, 16, 2, false, &mut rng);
    for id in store.trainable_ids() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let out = decoder_out(&dec, &store, &rand_t(&[20, 24], &mut rng), &rand_t(&[20, 32], &mut rng), 10, 2);
    assert_eq!(out.shape(), &[20, 30]);
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn decoder_is_bidirectional() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let dec = LevelDecoder::new(&mut store, "dec", 6, 8, 6, 12, 1, false, &mut rng);
    let (n, k) = (12, 6);
    let prev = rand_t(&[n, 6], &mut rng);
    let feat = rand_t(&[n, 8], &mut rng);
    let base = decoder_out(&dec, &store, &prev, &feat, n, 1);
    let mut bumped = feat.clone();
    bumped.data_mut()[k * 8 + 3] += 0.5;
    let out = decoder_out(&dec, &store, &prev, &bumped, n, 1);
    let moved = |t: usize| (0..6).any(|j| (out.data()[t * 6 + j] - base.data()[t * 6 + j]).abs() > 1e-12);
    assert!(moved(k - 3) && moved(k) && moved(k + 3));
}

#[test]
fn discriminator_walk_and_limits() {
    let cfg = ModelConfig::default();
    let disc = Discriminator::new(&cfg, 126, 0).unwrap();
    let walk = disc.shape_walk().unwrap();
    let want: Vec<Vec<usize>> = vec![vec![126, 34], vec![16, 32], vec![8, 30], vec![8, 28], vec![28, 64], vec![28], vec![1]];
    assert_eq!(walk, want);
    assert!(matches!(Discriminator::new(&ModelConfig { frames: 6, ..cfg.clone() }, 126, 0), Err(ModelError::TooShort(6))));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let bound = disc.store.bind(&mut tape, false);
    let pose = tape.constant(rand_t(&[34 * 3, 126], &mut rng).map(|v| 5.0 * v));
    let p = disc.forward(&Ctx::new(&bound), &mut tape, pose, 3).unwrap();
    assert_eq!(tape.shape(p), &[3, 1]);
    assert!(tape.value(p).data().iter().all(|v| *v > 0.0 && *v < 1.0));

    let mut zero = disc.clone();
    for id in zero.store.trainable_ids() {
        zero.store.get_mut(id).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let bound = zero.store.bind(&mut tape, false);
    let pose = tape.constant(rand_t(&[34, 126], &mut rng));
    let p = zero.forward(&Ctx::new(&bound), &mut tape, pose, 1).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5]);
}

fn desk_generator(seed: u64) -> (ModelConfig, Generator) {
    let cfg = ModelConfig::desk();
    let gen = Generator::new(&cfg, Skeleton::ted43().hierarchy(), seed).unwrap();
    (cfg, gen)
}

#[test]
fn generator_levels_and_unit_output() {
    let (cfg, gen) = desk_generator(1);
    assert_eq!(gen.dims, vec![24, 30, 36, 66, 96, 126]);
    let clips = prepared(&cfg, 3, 2);
    let batch = batch_of(&cfg, &clips);
    let mut tape = Tape::new();
    let bound = gen.store.bind(&mut tape, false);
    let out = gen.forward(&Ctx::new(&bound), &mut tape, &batch, Identity::Speakers { ids: &batch.speakers, noise: None }, Feedback::Off).unwrap();
    let shapes: Vec<Vec<usize>> = out.levels.iter().map(|&v| tape.shape(v).to_vec()).collect();
    assert_eq!(shapes, gen.dims.iter().map(|&d| vec![34 * 3, d]).collect::<Vec<_>>());
    for v in tape.value(out.output).data().chunks(3) {
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn generation_is_deterministic_and_batch_independent() {
    let (cfg, gen) = desk_generator(2);
    let clips = prepared(&cfg, 4, 3);
    let all = batch_of(&cfg, &clips);
    let one = batch_of(&cfg, &clips[2..3]);
    let id = |b: &Batch| b.speakers.clone();
    let a = gen.generate(&all, Identity::Speakers { ids: &id(&all), noise: None }).unwrap();
    let again = gen.generate(&all, Identity::Speakers { ids: &id(&all), noise: None }).unwrap();
    assert_eq!(a, again);
    let single = gen.generate(&one, Identity::Speakers { ids: &id(&one), noise: None }).unwrap();
    for t in 0..34 {
        let row = &a.data()[(t * 4 + 2) * 126..(t * 4 + 3) * 126];
        for (x, y) in row.iter().zip(&single.data()[t * 126..(t + 1) * 126]) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
    let raw = Tensor::full(vec![4, cfg.style_dim], 0.3);
    assert!(gen.generate(&all, Identity::Raw(&raw)).unwrap().all_finite());
}

#[test]
fn autoregressive_rollout_matches_dims() {
    let cfg = ModelConfig { frames: 10, autoregressive: true, ..ModelConfig::desk() };
    let gen = Generator::new(&cfg, Skeleton::ted43().hierarchy(), 3).unwrap();
    let clips = prepared(&cfg, 2, 4);
    let batch = batch_of(&cfg, &clips);
    let out = gen.generate(&batch, Identity::Speakers { ids: &batch.speakers, noise: None }).unwrap();
    assert_eq!(out.shape(), &[20, 126]);
    assert!(out.all_finite());
}

#[test]
fn checkpoint_round_trips() {
    let (_, gen) = desk_generator(4);
    let tensors = store_tensors(&gen.store, "gen.");
    let mut buf = Vec::new();
    write_tensors(&mut buf, &tensors, Dtype::F64).unwrap();
    let back = read_tensors(&buf[..]).unwrap();
    assert_eq!(back, tensors);

    let mut buf32 = Vec::new();
    write_tensors(&mut buf32, &tensors, Dtype::F32).unwrap();
    let back32 = read_tensors(&buf32[..]).unwrap();
    for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back32) {
        assert_eq!(n1, n2);
        let rounded: Vec<f64> = t1.data().iter().map(|v| *v as f32 as f64).collect();
        assert_eq!(t2.data(), &rounded[..]);
    }

    let (_, mut other) = desk_generator(5);
    load_store(&mut other.store, &back, "gen.").unwrap();
    for ((_, a), (_, b)) in store_tensors(&other.store, "gen.").iter().zip(&tensors) {
        assert_eq!(a, b);
    }

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_tensors(&bad[..]), Err(CheckpointError::BadMagic)));
    assert!(read_tensors(&buf[..buf.len() - 3]).is_err());
    assert!(matches!(load_store(&mut other.store, &back[1..], "gen."), Err(CheckpointError::MissingTensor(_))));
}

fn level_loss(tape: &mut Tape, gen: &Generator, batch: &Batch, ctx: &Ctx) -> Var {
    let out = gen.forward(ctx, tape, batch, Identity::Speakers { ids: &batch.speakers, noise: None }, Feedback::Off).unwrap();
    let t = tape.constant(batch.truth.last().unwrap().clone());
    let d = tape.sub(out.output, t).unwrap();
    let s = tape.square(d);
    let m = tape.mean(s);
    let sq = tape.square(out.levels[0]);
    let extra = tape.mean(sq);
    tape.add(m, extra).unwrap()
}

#[test]
fn sampled_parameter_gradients() {
    let cfg = ModelConfig { frames: 8, seed_frames: 2, hidden: 6, ..ModelConfig::desk() };
    let mut gen = Generator::new(&cfg, Skeleton::ted43().hierarchy(), 6).unwrap();
    let clips = prepared(&cfg, 2, 5);
    let batch = batch_of(&cfg, &clips);

    let mut tape = Tape::new();
    let bound = gen.store.bind(&mut tape, true);
    let loss = level_loss(&mut tape, &gen, &batch, &Ctx::new(&bound));
    let grads = tape.backward(loss).unwrap();

    let eval = |gen: &Generator| {
        let mut tape = Tape::new();
        let bound = gen.store.bind(&mut tape, false);
        let l = level_loss(&mut tape, gen, &batch, &Ctx::new(&bound));
        tape.value(l).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ids = gen.store.trainable_ids();
    let mut worst = 0.0f64;
    let eps = 1e-6;
    for &id in &ids {
        let g = grads.get(bound.var(id));
        for _ in 0..2 {
            let i = rng.random_range(0..g.len());
            let orig = gen.store.get(id).data()[i];
            gen.store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&gen);
            gen.store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&gen);
            gen.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((g.data()[i] - numeric).abs() / numeric.abs().max(1.0));
        }
        assert!(g.all_finite(), "{}", gen.store.name(id));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn audio_taps_are_time_aligned() {
    // A burst near the end of the mel must reach the last frame of every
    // tap and leave the first frame untouched.
    let cfg = ModelConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let enc = AudioEncoder::new(&mut store, &cfg, &mut rng).unwrap();
    let t_mel = cfg.mel_frames();
    let base = rand_t(&[1, cfg.mel.bins, t_mel], &mut rng);
    let mut bumped = base.clone();
    for b in 0..cfg.mel.bins {
        bumped.data_mut()[b * t_mel + t_mel - 4] += 3.0;
    }
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let v = tape.constant(x.clone());
        let f = enc.forward(&Ctx::new(&bound), &mut tape, v).unwrap();
        f.map(|v| tape.value(v).clone())
    };
    let (a, b) = (run(&base), run(&bumped));
    for l in 0..3 {
        let change = |t: usize| (0..32).map(|j| (a[l].data()[t * 32 + j] - b[l].data()[t * 32 + j]).abs()).sum::<f64>();
        assert!(change(33) > 0.0, "level {l}");
        assert_eq!(change(0), 0.0, "level {l}");
    }
}
