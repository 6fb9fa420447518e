use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jhcodec::codec::{self, NoiseKind};
use jhcodec::ssr;
use jhcodec::train::{self, Phase, SyntheticDataset, TrainPlan, TrainReport};
use jhcodec::{Codec, CodecConfig, Graph, ParamStore, Real, Tensor};

fn short_plan() -> TrainPlan {
    TrainPlan {
        batch: 2,
        clip_len: 1024,
        warm_start_steps: 3,
        mask_start: 3,
        mask_end: 6,
        seed: 4,
        ..TrainPlan::toy(9)
    }
}

fn run(cfg: CodecConfig, plan: &TrainPlan) -> (Codec, TrainReport) {
    let phi = ssr::make_surrogate_teacher(77, &cfg).unwrap();
    let data = SyntheticDataset::new(plan.seed, plan.clip_len, cfg.sample_rate);
    let mut codec = Codec::new(cfg, plan.seed).unwrap();
    let report = train::train_codec(&mut codec, plan, &data, Some(&phi), |_| {}).unwrap();
    (codec, report)
}

#[test]
fn identical_seeds_give_bit_identical_runs() {
    let plan = short_plan();
    let (a, ra) = run(CodecConfig::toy(), &plan);
    let (b, rb) = run(CodecConfig::toy(), &plan);
    assert_eq!(a.store.checksum(), b.store.checksum());
    let rows = |r: &TrainReport| r.curve.iter().map(|s| s.csv_row()).collect::<Vec<_>>();
    assert_eq!(rows(&ra), rows(&rb));
    let (c, _) = run(CodecConfig::toy(), &TrainPlan { seed: 5, ..plan });
    assert_ne!(a.store.checksum(), c.store.checksum());
}

#[test]
fn phases_gate_the_representation_loss_and_masking() {
    let plan = short_plan();
    let (_, report) = run(CodecConfig::toy(), &plan);
    assert_eq!(report.curve.len(), 9);
    assert_eq!(report.ssrr_grad_steps, 6);
    for s in &report.curve {
        assert_eq!(s.phase, plan.phase(s.step));
        if s.phase != Phase::Masked {
            assert_eq!(s.masked_frames, 0, "step {}", s.step);
        }
    }
    assert!(report.masked_steps > 0);
    assert_eq!(report.masked_frames, report.curve.iter().map(|s| s.masked_frames).sum::<usize>());
}

#[test]
fn zero_ssrr_weight_is_the_ablation_objective() {
    let cfg = CodecConfig {
        lambda_ssrr: 0.0,
        ..CodecConfig::toy()
    };
    let (_, report) = run(cfg, &short_plan());
    assert_eq!(report.ssrr_grad_steps, 0);
    // The loss is still measured, so the two runs can be compared.
    assert!(report.curve.iter().all(|s| s.report.ssrr > 0.0));
    for s in &report.curve {
        let r = &s.report;
        let expected = 0.1 * r.mel + r.vq + 0.1 * r.commit;
        assert!((r.total - expected).abs() <= 1e-5 * expected.max(1.0));
    }
}

#[test]
fn dropout_levels_are_uniform_by_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let levels = 4;
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let k = train::sample_dropout_k(&mut rng, levels);
        assert!((1..=levels).contains(&k));
        counts[k - 1] += 1;
    }
    let e = draws as f64 / levels as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 99th percentile of chi-square with 3 degrees of freedom.
    assert!(chi2 < 11.345, "chi2 {chi2}, counts {counts:?}");
    let again: Vec<usize> = {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        (0..20).map(|_| train::sample_dropout_k(&mut r, levels)).collect()
    };
    let mut r = ChaCha8Rng::seed_from_u64(8);
    assert_eq!(again, (0..20).map(|_| train::sample_dropout_k(&mut r, levels)).collect::<Vec<_>>());
}

#[test]
fn global_norm_matches_flattened_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let a = store.add_uniform("a", &[5, 7], &mut rng);
    let b = store.add_uniform("b", &[7, 3], &mut rng);
    let c = store.add_uniform("c", &[3], &mut rng);
    let x = Tensor::matrix(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut g = Graph::with_trainable(&store);
    let xv = g.constant(x);
    let (av, bv, cv) = (g.param(&store, a), g.param(&store, b), g.param(&store, c));
    let h = g.matmul(xv, av).unwrap();
    let h = g.silu(h);
    let h = g.matmul(h, bv).unwrap();
    let h = g.add_row(h, cv).unwrap();
    let loss = g.sum_sq(h);
    let grads = g.backward(loss).unwrap();

    let flat: Vec<f64> = [a, b, c]
        .iter()
        .flat_map(|&id| grads.param(id).unwrap().data().iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect();
    let oracle = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let got = train::grad_global_norm(&grads) as f64;
    assert!((got - oracle).abs() <= 1e-6 * oracle, "{got} vs {oracle}");
}

#[test]
fn noise_branch_fires_about_one_time_in_ten() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let draws = 10_000;
    let (mut gaussian, mut tone) = (0, 0);
    for _ in 0..draws {
        let mut x = vec![0.1 as Real; 16];
        match codec::apply_input_noise(&mut x, 0.1, 16_000, &mut rng) {
            Some(NoiseKind::Gaussian { snr_db }) => {
                assert!((20.0..40.0).contains(&snr_db));
                gaussian += 1;
            }
            Some(NoiseKind::Sinusoid { freq_hz, snr_db }) => {
                assert!((50.0..7000.0).contains(&freq_hz) && (20.0..40.0).contains(&snr_db));
                tone += 1;
            }
            None => assert_eq!(x, vec![0.1; 16]),
        }
    }
    let rate = (gaussian + tone) as f64 / draws as f64;
    assert!((rate - 0.10).abs() <= 0.01, "rate {rate}");
    assert!(gaussian > 0 && tone > 0);
}

#[test]
fn sinusoid_branch_adds_a_single_spectral_peak() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1024;
    let x: Vec<Real> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut y = x.clone();
    codec::add_sinusoid(&mut y, 1234.5, 25.0, 16_000, &mut rng);
    let diff: Vec<f64> = y.iter().zip(&x).map(|(a, b)| (a - b) as f64).collect();
    // Hann-windowed DFT magnitude of the added component.
    let mag: Vec<f64> = (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in diff.iter().enumerate() {
                let w = 0.5 - 0.5 * (std::f64::consts::TAU * t as f64 / n as f64).cos();
                let ph = std::f64::consts::TAU * (k * t) as f64 / n as f64;
                re += w * v * ph.cos();
                im -= w * v * ph.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect();
    let top = mag.iter().cloned().fold(0.0, f64::max);
    let peaks = (1..mag.len() - 1)
        .filter(|&k| mag[k] > 0.05 * top && mag[k] >= mag[k - 1] && mag[k] >= mag[k + 1])
        .count();
    assert_eq!(peaks, 1);
    let argmax = mag.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
    assert!((argmax as f64 - 1234.5 * n as f64 / 16_000.0).abs() <= 1.0);
}

#[test]
fn masking_replaces_about_one_frame_in_ten() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let flags = codec::mask_flags(100_000, 0.1, &mut rng);
    let rate = flags.iter().filter(|&&m| m).count() as f64 / flags.len() as f64;
    assert!((rate - 0.10).abs() <= 0.01, "rate {rate}");
}

#[test]
fn codebook_usage_is_a_fraction_per_level() {
    let (codec, _) = run(CodecConfig::toy(), &short_plan());
    let data = SyntheticDataset::new(99, 2048, 16_000);
    let clips: Vec<_> = (0..4).map(|i| data.clip(i)).collect();
    let usage = train::codebook_usage(&codec, &clips).unwrap();
    assert_eq!(usage.len(), codec.config.num_quantizers);
    assert!(usage.iter().all(|&u| u > 0.0 && u <= 1.0));
}
