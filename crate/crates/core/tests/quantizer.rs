mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vqad::model::{quantize, Codebook, LatentField};

fn codebook_from(rows: &[Vec<f32>]) -> Codebook<f32> {
    Codebook::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

fn check_field(cells: &[Vec<f32>], rows: &[Vec<f32>]) {
    let dim = rows[0].len();
    let field = LatentField::from_cells(1, cells.len(), dim, cells).unwrap();
    let q = quantize(&field, &codebook_from(rows)).unwrap();
    for (j, cell) in cells.iter().enumerate() {
        let want = exhaustive_nearest(cell, rows);
        assert_eq!(q.indices[j], want, "cell {cell:?}");
        assert_eq!(q.quantized.cell(0, j), rows[want]);
        let d: f64 = cell.iter().zip(&rows[want]).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        assert!((q.residuals[j] as f64 - d.sqrt()).abs() <= 1e-6 * (1.0 + d.sqrt()));
    }
}

#[test]
fn random_cells_match_exhaustive_scan() {
    let mut r = rng(21);
    let dim = 8;
    let rows: Vec<Vec<f32>> = (0..256).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let cells: Vec<Vec<f32>> = (0..2000).map(|_| (0..dim).map(|_| r.gen_range(-1.2..1.2)).collect()).collect();
    check_field(&cells, &rows);
}

#[test]
fn constructed_ties_go_to_the_smallest_index() {
    let mut r = rng(22);
    let dim = 4;
    let mut rows: Vec<Vec<f32>> = (0..64).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    // Mirror pairs: the origin is equidistant from v and -v.
    let v: Vec<f32> = vec![0.01, -0.02, 0.005, 0.0];
    rows[40] = v.iter().map(|x| -x).collect();
    rows[10] = v.clone();
    // Duplicate rows: later copy must never win.
    rows[50] = rows[5].clone();
    let cells = vec![vec![0.0; dim], rows[5].clone(), rows[5].iter().map(|x| x + 1e-3).collect()];
    check_field(&cells, &rows);
    let field = LatentField::from_cells(1, 1, dim, &cells[..1]).unwrap();
    assert_eq!(quantize(&field, &codebook_from(&rows)).unwrap().indices[0], 10);
    let field = LatentField::from_cells(1, 1, dim, &cells[1..2]).unwrap();
    assert_eq!(quantize(&field, &codebook_from(&rows)).unwrap().indices[0], 5);
}

#[test]
fn all_equal_codes_pick_index_zero() {
    let rows = vec![vec![0.5f32, -0.5]; 7];
    check_field(&[vec![0.1, 0.2], vec![-3.0, 4.0]], &rows);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantizer_agrees_with_oracle(
        seed in any::<u64>(),
        dim in 1usize..6,
        m in 2usize..40,
        n in 1usize..30,
        grid in prop::bool::ANY,
    ) {
        let mut r = rng(seed);
        // On a coarse grid, exact distance ties are common.
        let draw = |r: &mut rand_chacha::ChaCha8Rng| -> f32 {
            if grid { r.gen_range(-2i32..=2) as f32 * 0.5 } else { r.gen_range(-1.0..1.0) }
        };
        let rows: Vec<Vec<f32>> = (0..m).map(|_| (0..dim).map(|_| draw(&mut r)).collect()).collect();
        let cells: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| draw(&mut r)).collect()).collect();
        check_field(&cells, &rows);
    }

    #[test]
    fn quantized_rows_are_codebook_rows(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rows: Vec<Vec<f32>> = (0..16).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let cells: Vec<Vec<f32>> = (0..9).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let field = LatentField::from_cells(3, 3, 3, &cells).unwrap();
        let q = quantize(&field, &codebook_from(&rows)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(q.quantized.cell(i, j), rows[q.index(i, j)].clone());
                prop_assert!(q.residual(i, j) >= 0.0);
            }
        }
    }
}
