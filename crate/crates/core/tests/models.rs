//! GMVAE sampling statistics, inference properties and the AE/C-AE
//! baselines on a miniature dataset.

use bendlens::baseline::{cae_classify, train_ae, train_cae, AeConfig, AeModel, CaeSettings};
use bendlens::dataset::{gen_shapes, synthesize_measurements, MeasurementDataset, SynthesisOptions, SHAPE_CLASSES};
use bendlens::fiber::{default_grid, ChannelSelection, IlluminationMode, SpeckleEnsemble, DEFAULT_DECORRELATION_SCALE};
use bendlens::gmvae::{gumbel_softmax_sample, train_gmvae, GmvaeConfig, GmvaeModel, SamplingNoise};
use bendlens::tensor::{softmax_in_place, write_checkpoint, Mode, Rng, Tensor};
use bendlens::Error;

const SIDE: usize = 8;
const K: usize = 3;

fn dataset(per_class: usize, seed: u64) -> MeasurementDataset {
    let images = gen_shapes(per_class * K, K, SIDE, seed).unwrap();
    let grid = default_grid();
    let ens = SpeckleEnsemble::generate(
        SIDE * SIDE,
        SIDE * SIDE,
        grid,
        IlluminationMode::WavefrontShaped,
        DEFAULT_DECORRELATION_SCALE,
        seed,
    )
    .unwrap();
    let ids = ["C_10".to_string(), "C_5".to_string()];
    let names: Vec<String> = SHAPE_CLASSES[..K].iter().map(|s| s.to_string()).collect();
    let opts = SynthesisOptions {
        noise_std: 0.015,
        damping: 10.0,
        noise_seed: seed,
        embed_images: true,
        channels: ChannelSelection::Both,
    };
    synthesize_measurements(&images, &ens, &ids, &names, &opts).unwrap().0
}

fn small_gmvae(seed: u64) -> GmvaeConfig {
    GmvaeConfig {
        d: 4,
        classifier_hidden: 8,
        conv_channels: vec![2, 4, 4],
        epochs: 3,
        triplet_warmup: 1,
        batch: 16,
        seed,
        ..GmvaeConfig::default()
    }
}

fn small_ae(seed: u64) -> AeConfig {
    AeConfig {
        channels: vec![2, 2, 4],
        epochs: 2,
        batch: 16,
        seed,
        ..AeConfig::default()
    }
}

fn single_input(seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(
        &[1, 2, SIDE, SIDE],
        (0..2 * SIDE * SIDE).map(|_| rng.uniform()).collect(),
    )
    .unwrap()
}

fn replicate(t: &Tensor, n: usize) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] = n;
    Tensor::new(&shape, t.data().repeat(n)).unwrap()
}

#[test]
fn reparameterized_samples_match_mean_and_variance() {
    let model = GmvaeModel::new(small_gmvae(0), SIDE, K).unwrap();
    let d = model.config.d;
    let (chunk, chunks) = (2_000, 50);
    let input = replicate(&single_input(1), chunk);
    let mut rng = Rng::new(2);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut reference = None;
    for _ in 0..chunks {
        let noise = SamplingNoise {
            gumbel: Tensor::zeros(&[chunk, K]),
            eps: Tensor::new(&[chunk, d], (0..chunk * d).map(|_| rng.normal()).collect()).unwrap(),
            feature_dropout: None,
            classifier_dropout: None,
        };
        let enc = model.encode(&input, Mode::Eval, &noise).unwrap();
        for i in 0..chunk {
            for j in 0..d {
                let z = enc.z.row(i)[j];
                sum[j] += z;
                sum_sq[j] += z * z;
            }
        }
        reference.get_or_insert((enc.mu.row(0).to_vec(), enc.var.row(0).to_vec()));
    }
    let (mu, var) = reference.unwrap();
    let n = (chunk * chunks) as f64;
    for j in 0..d {
        let mean = sum[j] / n;
        let v = sum_sq[j] / n - mean * mean;
        let se_mean = (var[j] / n).sqrt();
        let se_var = var[j] * (2.0 / (n - 1.0)).sqrt();
        assert!(
            (mean - mu[j]).abs() <= 3.0 * se_mean,
            "dim {j}: mean {mean} vs {}",
            mu[j]
        );
        assert!((v - var[j]).abs() <= 3.0 * se_var, "dim {j}: var {v} vs {}", var[j]);
    }
}

#[test]
fn zero_noise_in_eval_gives_mean_latent() {
    let model = GmvaeModel::new(small_gmvae(3), SIDE, K).unwrap();
    let input = replicate(&single_input(4), 3);
    let enc = model.encode(&input, Mode::Eval, &model.zero_noise(3)).unwrap();
    assert_eq!(enc.z, enc.mu);

    let noise = model.draw_noise(3, false, &mut Rng::new(5));
    let a = model.encode(&input, Mode::Eval, &noise).unwrap();
    let b = model.encode(&input, Mode::Eval, &noise).unwrap();
    assert_eq!(a, b);
    for i in 0..3 {
        assert!((a.category.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cold_gumbel_samples_are_one_hot() {
    let mut rng = Rng::new(6);
    let peaked = [10.0, 0.0, 0.0, 0.0];
    let mut confident = 0;
    let mut entropy = 0.0;
    for _ in 0..100 {
        let s = gumbel_softmax_sample(&peaked, 0.01, &mut rng).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        confident += usize::from(s.iter().cloned().fold(0.0, f64::max) > 0.999);
        entropy -= s.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    assert!(confident >= 99, "{confident}/100 draws above 0.999");
    assert!(entropy / 100.0 < 0.05, "mean entropy {}", entropy / 100.0);
    assert!(gumbel_softmax_sample(&peaked, 0.0, &mut rng).is_err());
}

#[test]
fn uniform_gumbel_argmax_is_uniform() {
    let mut rng = Rng::new(7);
    let k = 4;
    let draws = 100_000;
    let mut counts = vec![0usize; k];
    for _ in 0..draws {
        let s = gumbel_softmax_sample(&[0.3; 4], 1.0, &mut rng).unwrap();
        let arg = (0..k).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        counts[arg] += 1;
    }
    let p = 1.0 / k as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "count {c}");
    }
}

#[test]
fn softmax_is_shift_invariant() {
    let mut a = vec![0.2, -1.0, 3.0];
    let mut b: Vec<f64> = a.iter().map(|v| v + 50.0).collect();
    softmax_in_place(&mut a);
    softmax_in_place(&mut b);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn gmvae_training_is_deterministic_and_inference_well_formed() {
    let data = dataset(8, 0);
    let cfg = small_gmvae(11);
    let (m1, log1) = train_gmvae(&data, K, &cfg).unwrap();
    let (m2, log2) = train_gmvae(&data, K, &cfg).unwrap();
    let bytes = |m: &GmvaeModel| {
        let mut v = Vec::new();
        write_checkpoint(&m.store, &mut v).unwrap();
        v
    };
    assert_eq!(bytes(&m1), bytes(&m2));
    assert_eq!(log1.to_csv(), log2.to_csv());
    assert!(log1
        .to_csv()
        .starts_with("epoch,loss,kl_gauss,kl_cat,recon,triplet,train_acc\n"));

    let y = &data.records[0].y;
    let (label, probs) = m1.classify(y).unwrap();
    assert!(label < K);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let x = m1.reconstruct(y).unwrap();
    assert_eq!(x.len(), SIDE * SIDE);
    assert!(x.iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(x, m1.reconstruct(y).unwrap());
    assert!(m1.classify(&y[..10]).is_err());
}

#[test]
fn ae_has_no_dense_bottleneck() {
    let ae = AeModel::new(AeConfig::default(), 16).unwrap();
    assert!(!ae.has_dense_layer());
    let kinds: Vec<&str> = ae.layers().iter().map(|l| l.spec.kind()).collect();
    assert!(!kinds.contains(&"dense"), "{kinds:?}");
    assert!(kinds.contains(&"conv2d"));
}

#[test]
fn baselines_train_in_order() {
    let data = dataset(8, 1);
    let settings = CaeSettings {
        conv_channels: vec![2, 4, 4],
        hidden: 8,
        epochs: 2,
        lr: 1e-3,
        batch: 16,
        seed: 0,
    };
    assert!(matches!(
        train_cae(None, &data, K, &settings),
        Err(Error::MissingPrerequisite(_))
    ));

    let (ae, log) = train_ae(&data, K, &small_ae(0)).unwrap();
    assert_eq!(log.epochs.len(), 2);
    let (ae2, _) = train_ae(&data, K, &small_ae(0)).unwrap();
    let y = &data.records[3].y;
    let x = ae.reconstruct(y).unwrap();
    assert_eq!(x.len(), SIDE * SIDE);
    assert!(x.iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(x, ae2.reconstruct(y).unwrap());

    let cae = train_cae(Some(&ae), &data, K, &settings).unwrap();
    let records: Vec<_> = data.records.iter().collect();
    let predicted = cae_classify(&ae, &cae, &records).unwrap();
    assert_eq!(predicted.len(), records.len());
    assert!(predicted.iter().all(|&c| c < K));
}

#[test]
fn ae_loss_falls_over_first_epochs_at_desk_scale() {
    let (side, k) = (16, 4);
    let names: Vec<String> = SHAPE_CLASSES[..k].iter().map(|s| s.to_string()).collect();
    let ids: Vec<String> = ["C_10", "C_7", "C_5", "C_3", "C_1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for seed in 0..3 {
        let images = gen_shapes(50 * k, k, side, seed).unwrap();
        let ens = SpeckleEnsemble::generate(
            side * side,
            side * side,
            default_grid(),
            IlluminationMode::WavefrontShaped,
            DEFAULT_DECORRELATION_SCALE,
            seed,
        )
        .unwrap();
        let opts = SynthesisOptions {
            noise_std: 0.015,
            damping: 10.0,
            noise_seed: seed,
            embed_images: true,
            channels: ChannelSelection::Both,
        };
        let data = synthesize_measurements(&images, &ens, &ids, &names, &opts).unwrap().0;
        let cfg = AeConfig {
            epochs: 5,
            seed,
            ..AeConfig::default()
        };
        let (_, log) = train_ae(&data, k, &cfg).unwrap();
        let smooth: Vec<f64> = log.epochs.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        assert!(
            smooth.windows(2).all(|w| w[1] <= w[0]),
            "seed {seed}: epoch losses {:?}",
            log.epochs
        );
    }
}
