use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedcloud::encoders::{Encoder, EncoderConfig, EncoderKind, PointNetPpConfig};
use seedcloud::folding::{FoldingConfig, FoldingDecoder, SeedKind};
use seedcloud::model::{count_parameters, Model, ModelConfig};
use seedcloud::psg::{DecoderConfig, PsgConfig, PsgDecoder};
use seedcloud::Error;
use seedcloud_tensor::gradcheck::{check_params, sample_entries};
use seedcloud_tensor::{Graph, Linear, Mode, ParamStore, Tensor};

fn small_psg(sfpm: usize) -> DecoderConfig {
    DecoderConfig {
        codeword_dim: 16,
        output_points: 50,
        psg: PsgConfig {
            initial: 2,
            resolutions: vec![2, 4, 8, 16],
            channels: vec![8, 6, 4, 4],
            sfpm,
            point_widths: vec![8],
        },
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn psg_shapes_for_every_propagation_depth() {
    for k in 0..=3 {
        let cfg = small_psg(k);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let dec = PsgDecoder::new(&mut store, "d", cfg.clone(), &mut rng).unwrap();
        let theta = random_tensor(&mut rng, &[3, 16]);
        let mut g = Graph::new(&mut store, Mode::Train, 0);
        let t = g.input(theta);
        let tr = dec.trace(&mut g, t).unwrap();
        assert_eq!(tr.seeds.len(), 4);
        for ((&s, side), c) in tr.seeds.iter().zip([2usize, 4, 8, 16]).zip([8usize, 6, 4, 4]) {
            assert_eq!(g.shape(s), &[3, c, side, side]);
        }
        assert_eq!(tr.propagated.len(), k);
        for (i, &v) in tr.propagated.iter().enumerate() {
            let level = cfg.sfpm_level(i + 1) + 1;
            let side = [2usize, 4, 8, 16][level];
            assert_eq!(g.shape(v), &[3, 8, side, side]);
        }
        assert_eq!(g.shape(tr.points), &[3, 50, 3]);
    }
    assert!(matches!(
        PsgDecoder::new(&mut ParamStore::<f64>::new(), "d", small_psg(4), &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn psg_model_gradient_matches_differences() {
    let cfg = small_psg(2);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dec = PsgDecoder::new(&mut store, "d", cfg, &mut rng).unwrap();
    let theta = random_tensor(&mut rng, &[2, 16]);
    let target = random_tensor(&mut rng, &[2, 40, 3]);
    let entries = sample_entries(&store, 10, &mut rng);
    let report = check_params(&mut store, &entries, 1e-6, |store, grad| {
        let mut g = Graph::new(store, Mode::Train, 0);
        let t = g.input(theta.clone());
        let y = g.input(target.clone());
        let out = dec.forward(&mut g, t).expect("decoder pass");
        let loss = g.tape.chamfer(out, y, false)?;
        let v = g.value(loss).data()[0];
        if grad {
            g.backward(loss)?;
        }
        Ok(v)
    })
    .unwrap();
    assert!(report.passes(1e-3), "{:?}", report.worst());
}

#[test]
fn psg_output_depends_on_codeword() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dec = PsgDecoder::new(&mut store, "d", small_psg(3), &mut rng).unwrap();
    let a = random_tensor(&mut rng, &[1, 16]);
    let b = random_tensor(&mut rng, &[1, 16]);
    let run = |store: &mut ParamStore<f64>, t: &Tensor<f64>| {
        let mut g = Graph::new(store, Mode::Eval, 0);
        let v = g.input(t.clone());
        let out = dec.forward(&mut g, v).unwrap();
        g.value(out).data().to_vec()
    };
    let (ya, ya2, yb) = (run(&mut store, &a), run(&mut store, &a), run(&mut store, &b));
    assert_eq!(ya, ya2);
    assert_ne!(ya, yb);
}

fn folding(kind: SeedKind, seed_dim: usize, store: &mut ParamStore<f64>) -> FoldingDecoder {
    let cfg = FoldingConfig { seeds: kind, seed_dim, width: 16 };
    FoldingDecoder::new(store, "f", &cfg, 8, 25, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
}

#[test]
fn folding_sources_share_the_contract() {
    let theta = random_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[2, 8]);
    for (kind, dim) in [(SeedKind::FixedGrid, 2), (SeedKind::UniformRandom, 2), (SeedKind::Generated, 2), (SeedKind::Generated, 32)] {
        let mut store = ParamStore::<f64>::new();
        let dec = folding(kind, dim, &mut store);
        let mut g = Graph::new(&mut store, Mode::Train, 0);
        let t = g.input(theta.clone());
        let tr = dec.trace(&mut g, t).unwrap();
        assert_eq!(g.shape(tr.points), &[2, 25, 3]);
        assert_eq!(g.shape(tr.seeds), &[2, dim, 25]);
    }
}

#[test]
fn folding_seed_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = random_tensor(&mut rng, &[1, 8]);
    let other = random_tensor(&mut rng, &[1, 8]);
    let twice = |kind, t2: &Tensor<f64>| {
        let mut store = ParamStore::<f64>::new();
        let dec = folding(kind, 2, &mut store);
        let mut g = Graph::new(&mut store, Mode::Eval, 9);
        let a = g.input(theta.clone());
        let b = g.input(t2.clone());
        let x = dec.trace(&mut g, a).unwrap();
        let y = dec.trace(&mut g, b).unwrap();
        (
            g.value(x.seeds).data().to_vec(),
            g.value(y.seeds).data().to_vec(),
            g.value(x.points).data().to_vec(),
            g.value(y.points).data().to_vec(),
        )
    };
    let (s1, s2, p1, p2) = twice(SeedKind::FixedGrid, &theta);
    assert_eq!((&s1, &p1), (&s2, &p2));
    let (s1, s2, _, _) = twice(SeedKind::FixedGrid, &other);
    assert_eq!(s1, s2, "the lattice does not depend on the shape");
    let (s1, s2, p1, p2) = twice(SeedKind::UniformRandom, &theta);
    assert_ne!(s1, s2);
    assert_ne!(p1, p2);
    assert!(s1.iter().all(|&v| v > 0.0 && v < 1.0));
    let (s1, s2, _, _) = twice(SeedKind::Generated, &theta);
    assert_eq!(s1, s2);
    let (s1, s2, _, _) = twice(SeedKind::Generated, &other);
    assert_ne!(s1, s2);
}

#[test]
fn generated_seeds_receive_gradient() {
    let mut store = ParamStore::<f64>::new();
    let dec = folding(SeedKind::Generated, 32, &mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = random_tensor(&mut rng, &[2, 8]);
    let target = random_tensor(&mut rng, &[2, 25, 3]);
    let mut g = Graph::new(&mut store, Mode::Train, 0);
    let t = g.input(theta);
    let y = g.input(target);
    let out = dec.forward(&mut g, t).unwrap();
    let loss = g.tape.chamfer(out, y, false).unwrap();
    g.backward(loss).unwrap();
    let id = store.id_of("f.seedgen.weight").unwrap();
    let grad = store.get(id).grad.as_ref().unwrap();
    assert!(grad.data().iter().any(|&v| v != 0.0));
}

#[test]
fn generated_seeds_need_a_codeword() {
    let mut store = ParamStore::<f64>::new();
    let dec = folding(SeedKind::Generated, 2, &mut store);
    let mut g = Graph::new(&mut store, Mode::Eval, 0);
    assert!(matches!(dec.source.seeds(&mut g, 1, None), Err(Error::Usage(_))));
}

#[test]
fn parameter_counts() {
    let mut store = ParamStore::<f64>::new();
    Linear::new(&mut store, "fc", 10, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(count_parameters(&store).total, 55);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ModelConfig::default();
    let mut psg_store = ParamStore::<f32>::new();
    PsgDecoder::new(&mut psg_store, "decoder", cfg.decoder_config(), &mut rng).unwrap();
    let psg = count_parameters(&psg_store).total;
    let mut fold_store = ParamStore::<f32>::new();
    let fold = FoldingDecoder::new(&mut fold_store, "decoder", &FoldingConfig::default(), 512, 1024, &mut rng).unwrap();
    let trunk = fold.trunk_parameters(&fold_store);
    assert!(psg < 10_000_000, "{psg}");
    assert!(psg * 5 < 25 * trunk, "{psg} vs {trunk}");
    let breakdown = count_parameters(&psg_store).breakdown;
    assert_eq!(breakdown.values().sum::<usize>(), psg);
}

fn encoder_cfg(kind: EncoderKind) -> EncoderConfig {
    EncoderConfig {
        kind,
        pointnetpp: PointNetPpConfig {
            centers: vec![16, 4],
            radii: vec![0.4, 0.8],
            group_sizes: vec![8, 4],
            widths: vec![vec![8, 8], vec![16]],
        },
        ..EncoderConfig::default()
    }
}

fn encode(enc: &Encoder, store: &mut ParamStore<f64>, x: &Tensor<f64>, mode: Mode) -> Vec<f64> {
    let mut g = Graph::new(store, mode, 0);
    let v = g.input(x.clone());
    let out = enc.forward(&mut g, v).unwrap();
    assert_eq!(g.shape(out), &[x.shape()[0], 12]);
    g.value(out).data().to_vec()
}

#[test]
fn encoders_are_permutation_invariant() {
    for kind in [EncoderKind::Pointnet, EncoderKind::Pointnetpp, EncoderKind::Pcn] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new(&mut store, "e", &encoder_cfg(kind), 12, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[2, 40, 3]);
        let mut perm: Vec<usize> = (0..40).collect();
        perm.shuffle(&mut rng);
        let mut xp = x.clone();
        for b in 0..2 {
            for (i, &j) in perm.iter().enumerate() {
                for k in 0..3 {
                    xp.set(&[b, i, k], x.get(&[b, j, k]));
                }
            }
        }
        for mode in [Mode::Train, Mode::Eval] {
            let a = encode(&enc, &mut store, &x, mode);
            let b = encode(&enc, &mut store, &xp, mode);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-9, "{kind:?} {mode:?}: {u} vs {v}");
            }
        }
    }
}

#[test]
fn pointnetpp_rejects_small_clouds() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = Encoder::new(&mut store, "e", &encoder_cfg(EncoderKind::Pointnetpp), 12, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[1, 10, 3]);
    let mut g = Graph::new(&mut store, Mode::Eval, 0);
    let v = g.input(x);
    assert!(matches!(enc.forward(&mut g, v), Err(Error::Config(_))));
}

#[test]
fn model_infer_matches_batch_layout() {
    let cfg = ModelConfig {
        codeword_dim: 16,
        output_points: 20,
        psg: small_psg(1).psg,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::new(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let clouds: Vec<seedcloud::PointCloud> = (0..3)
        .map(|_| seedcloud::PointCloud::new((0..30).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()).unwrap())
        .collect();
    let refs: Vec<&seedcloud::PointCloud> = clouds.iter().collect();
    let (codes, outs) = model.infer(&refs, 0).unwrap();
    assert_eq!(codes.len(), 3);
    assert!(codes.iter().all(|c| c.len() == 16));
    assert!(outs.iter().all(|o| o.len() == 20));
    // Eval mode uses running statistics, so items do not interact.
    let (single, _) = model.infer(&refs[1..2], 0).unwrap();
    for (a, b) in single[0].iter().zip(&codes[1]) {
        assert!((a - b).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pointnet_invariant_to_random_permutations(seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&mut store, "e", &encoder_cfg(EncoderKind::Pointnet), 12, &mut rng).unwrap();
        let n = rng.random_range(2..30);
        let x = random_tensor(&mut rng, &[1, n, 3]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let xp = Tensor::from_fn(&[1, n, 3], |i| x.data()[perm[i / 3] * 3 + i % 3]);
        let a = encode(&enc, &mut store, &x, Mode::Eval);
        let b = encode(&enc, &mut store, &xp, Mode::Eval);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }
}
