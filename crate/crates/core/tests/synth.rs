use proptest::prelude::*;
use vqad::detect::BoxRect;
use vqad::io::{generate_split, DatasetSpec, Split, SplitCounts};
use vqad::synth::{gen_scene, SceneParams};

fn within_three_sigma(hits: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    (hits as f64 - mean).abs() <= 3.0 * sigma
}

#[test]
fn nuisance_frequencies_follow_their_probabilities() {
    for (glare, foam, seed) in [(0.25, 0.25, 0), (0.6, 0.1, 7)] {
        let p = SceneParams {
            glare_prob: glare,
            foam_prob: foam,
            seed,
            ..SceneParams::default()
        };
        let scenes: Vec<_> = (0..1000).map(|i| gen_scene(&p, 0, i, false).unwrap()).collect();
        let g = scenes.iter().filter(|s| s.has_glare).count();
        let f = scenes.iter().filter(|s| s.has_foam).count();
        assert!(within_three_sigma(g, 1000, glare), "glare {g}/1000 vs p={glare}");
        assert!(within_three_sigma(f, 1000, foam), "foam {f}/1000 vs p={foam}");
    }
}

fn mean_intensity(tile: &vqad::ImageTile, pixels: impl Iterator<Item = (usize, usize)>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (y, x) in pixels {
        sum += tile.intensity(y, x) as f64;
        n += 1;
    }
    sum / n as f64
}

fn ring(b: &BoxRect, grow: u32, side: usize) -> Vec<(usize, usize)> {
    let x0 = b.x.saturating_sub(grow) as usize;
    let y0 = b.y.saturating_sub(grow) as usize;
    let x1 = ((b.x + b.w + grow) as usize).min(side);
    let y1 = ((b.y + b.h + grow) as usize).min(side);
    let inside = |y: usize, x: usize| {
        (b.y as usize..(b.y + b.h) as usize).contains(&y) && (b.x as usize..(b.x + b.w) as usize).contains(&x)
    };
    (y0..y1)
        .flat_map(|y| (x0..x1).map(move |x| (y, x)))
        .filter(|&(y, x)| !inside(y, x))
        .collect()
}

#[test]
fn full_blend_blobs_stand_out_from_their_surroundings() {
    // Glare and foam can wash a blob out, so full blend means no overlays.
    let p = SceneParams {
        glare_prob: 0.0,
        foam_prob: 0.0,
        ..SceneParams::default()
    };
    let mut checked = 0;
    for i in 0..300 {
        let scene = gen_scene(&p, 0, i, true).unwrap();
        for blob in scene.blobs.iter().filter(|b| b.depth == 1.0) {
            let side = p.tile_side;
            let support = (0..side)
                .flat_map(|y| (0..side).map(move |x| (y, x)))
                .filter(|&(y, x)| blob.support.get(y, x));
            let interior = mean_intensity(&scene.tile, support);
            let around = mean_intensity(&scene.tile, ring(&blob.rect, 3, side).into_iter());
            assert!(
                (interior - around).abs() >= p.animal_contrast.abs() / 2.0,
                "tile {i}: interior {interior:.3} ring {around:.3}"
            );
            checked += 1;
        }
    }
    assert!(checked > 200);
}

#[test]
fn reduced_contrast_blobs_occur() {
    let p = SceneParams::default();
    let depths: Vec<f64> = (0..200)
        .flat_map(|i| gen_scene(&p, 0, i, true).unwrap().blobs.into_iter().map(|b| b.depth))
        .collect();
    assert!(depths.iter().any(|&d| d < 1.0));
    assert!(depths.contains(&1.0));
    assert!(depths.iter().all(|&d| d > 0.0 && d <= 1.0));
}

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        scene: SceneParams {
            tile_side: 32,
            animal_size_range: (4, 8),
            seed,
            ..SceneParams::default()
        },
        counts: SplitCounts {
            train: 20,
            val: 9,
            test: 13,
        },
        anomalous_fraction: 0.5,
    }
}

#[test]
fn generated_splits_are_reproducible_and_train_is_normal_only() {
    let spec = small_spec(3);
    for split in Split::ALL {
        let a = generate_split(&spec, split).unwrap();
        let b = generate_split(&spec, split).unwrap();
        assert_eq!(a.len(), spec.counts.get(split));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tile, y.tile);
            assert_eq!(x.boxes, y.boxes);
        }
        let anomalous = a.iter().filter(|g| !g.boxes.is_empty()).count();
        assert_eq!(anomalous, spec.anomalous_count(split));
    }
    assert!(generate_split(&spec, Split::Train).unwrap().iter().all(|g| g.boxes.is_empty()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn boxes_respect_count_range_and_bounds(seed in any::<u64>(), lo in 0usize..3, extra in 0usize..2, index in 0u64..1000) {
        let p = SceneParams {
            animal_count_range: (lo, lo + extra),
            seed,
            ..SceneParams::default()
        };
        let scene = gen_scene(&p, 2, index, true).unwrap();
        prop_assert!(scene.blobs.len() <= lo + extra);
        for b in &scene.blobs {
            prop_assert!(b.rect.fits_within(p.tile_side, p.tile_side));
            let longest = b.rect.w.max(b.rect.h) as usize;
            prop_assert!(longest <= p.animal_size_range.1 + 2);
        }
        prop_assert!(scene.tile.planar().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn allocation_is_exact(n in 0usize..200, frac in 0.0f64..=1.0) {
        let spec = DatasetSpec {
            counts: SplitCounts { train: 0, val: n, test: n },
            anomalous_fraction: frac,
            ..DatasetSpec::default()
        };
        let hits = (0..n).filter(|&i| spec.is_anomalous(Split::Val, i)).count();
        prop_assert_eq!(hits, (n as f64 * frac).round() as usize);
    }
}
