use vqad::io::{generate_split, DatasetSpec, Split, SplitCounts};
use vqad::model::{checkpoint, ModelConfig};
use vqad::synth::SceneParams;
use vqad::trainer::{calibrate_am, normalizer_from_residuals, percentile, train, TrainConfig};
use vqad::ImageTile;

fn small_model() -> ModelConfig {
    ModelConfig {
        base_width: 8,
        latent_dim: 8,
        codebook_size: 16,
        downsample_factor: 4,
        seed: 4,
        ..ModelConfig::default()
    }
}

fn sea_tiles(n: usize, seed: u64) -> Vec<ImageTile> {
    let spec = DatasetSpec {
        scene: SceneParams {
            tile_side: 16,
            animal_size_range: (3, 6),
            seed,
            ..SceneParams::default()
        },
        counts: SplitCounts {
            train: n,
            val: 0,
            test: 0,
        },
        anomalous_fraction: 0.0,
    };
    generate_split(&spec, Split::Train).unwrap().into_iter().map(|g| g.tile).collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

#[test]
fn constant_tiles_are_learned() {
    let tiles = vec![ImageTile::filled(16, 16, 3, 0.5).unwrap(); 16];
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 16,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (model, log) = train(&tiles, &ModelConfig::default(), &tc).unwrap();
    assert_eq!(log.steps.len(), 200);
    let (recon, _) = model.reconstruct(&tiles[0]).unwrap();
    let mse: f64 = recon
        .planar()
        .iter()
        .map(|&v| (v as f64 - 0.5).powi(2))
        .sum::<f64>()
        / recon.planar().len() as f64;
    assert!(mse < 1e-3, "mse {mse}");
}

#[test]
fn training_makes_progress_on_sea_tiles() {
    let tiles = sea_tiles(48, 9);
    let tc = TrainConfig {
        epochs: 40,
        batch_size: 8,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (_, log) = train(&tiles, &small_model(), &tc).unwrap();
    assert_eq!(log.steps.len(), 40 * 6);
    let rec = log.reconstruction_losses();
    let k = rec.len() / 10;
    let (first, last) = (median(&rec[..k]), median(&rec[rec.len() - k..]));
    assert!(last <= first, "first {first} last {last}");
    for s in &log.steps {
        let l = s.loss;
        assert!((l.total - (l.reconstruction + l.codebook + 0.25 * l.commitment)).abs() <= 1e-9 * (1.0 + l.total));
    }
}

#[test]
fn log_length_is_epochs_times_batches() {
    let tiles = sea_tiles(11, 2);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (_, log) = train(&tiles, &small_model(), &tc).unwrap();
    assert_eq!(log.steps.len(), 3 * 3);
    let csv = log.to_csv();
    assert_eq!(csv.lines().count(), 1 + 9);
    assert_eq!(csv.lines().next(), Some("step,rec,cb,com,total"));
}

fn train_bytes(tiles: &[ImageTile], threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 5,
        seed: 17,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (model, _) = pool.install(|| train(tiles, &small_model(), &tc).unwrap());
    checkpoint::to_bytes(&model)
}

#[test]
fn reruns_are_bit_identical_across_thread_counts() {
    let tiles = sea_tiles(16, 5);
    let one = train_bytes(&tiles, 1);
    assert_eq!(one, train_bytes(&tiles, 1));
    assert_eq!(one, train_bytes(&tiles, 3));
}

#[test]
fn percentile_matches_direct_interpolation() {
    let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
    // rank 0.99 * 99 = 98.01 between 98 and 99
    assert!((percentile(&v, 99.0).unwrap() - 98.01).abs() < 1e-9);
    assert_eq!(normalizer_from_residuals(&v, 99.0).unwrap().scale, percentile(&v, 99.0).unwrap());
    assert_eq!(percentile(&v, 0.0), Some(0.0));
    assert_eq!(percentile(&v, 100.0), Some(99.0));
    let shuffled = [3.0, 1.0, 2.0];
    assert!((percentile(&shuffled, 25.0).unwrap() - 1.5).abs() < 1e-12);
}

#[test]
fn calibration_scale_is_a_residual_percentile() {
    let tiles = sea_tiles(8, 6);
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 4,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (model, _) = train(&tiles, &small_model(), &tc).unwrap();
    let norm = calibrate_am(&model, &tiles, 90.0).unwrap();
    let mut residuals = Vec::new();
    for t in &tiles {
        let q = model.quantize(&model.encode(t).unwrap()).unwrap();
        residuals.extend(q.residuals.iter().map(|&r| r as f64));
    }
    residuals.sort_by(|a, b| a.total_cmp(b));
    let pos = 0.9 * (residuals.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let want = residuals[lo] + (residuals[hi] - residuals[lo]) * (pos - lo as f64);
    assert!((norm.scale - want).abs() <= 1e-12 * (1.0 + want));
    assert_eq!(norm.percentile_q, 90.0);
}
