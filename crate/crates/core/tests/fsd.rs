mod common;

use adapter_mixer::fsd::count_conflicts;
use adapter_mixer::{fsd_matrix, fsd_pair, fsd_per_tensor, mean_fsd_rows, AdapterCheckpoint, FsdMatrix, Tensor};
use common::{brute_conflicts, negate, random_adapter};
use proptest::prelude::*;

fn single(data: &[f32]) -> AdapterCheckpoint {
    AdapterCheckpoint::from_tensors([("w", Tensor::from_vec(data.to_vec()))]).unwrap()
}

#[test]
fn pair_examples() {
    let a = single(&[1.0, -2.0, 0.0, 3.0]);
    let b = single(&[-1.0, -2.0, 5.0, 3.0]);
    assert_eq!(fsd_pair(&a, &b).unwrap(), 0.25);
    assert_eq!(fsd_pair(&a, &a).unwrap(), 0.0);
    let c = single(&[0.5, -1.0, 2.0]);
    assert_eq!(fsd_pair(&c, &negate(&c)).unwrap(), 1.0);
}

#[test]
fn tiny_products_still_conflict() {
    let counts = count_conflicts(&[1e-30, f32::MIN_POSITIVE], &[-1e-30, -1e-38]);
    assert_eq!(counts.conflicts, 2);
}

#[test]
fn per_tensor_example() {
    let a = AdapterCheckpoint::from_tensors([
        ("x", Tensor::from_vec(vec![1.0, -1.0])),
        ("y", Tensor::from_vec(vec![2.0, 2.0])),
    ])
    .unwrap();
    let b = AdapterCheckpoint::from_tensors([
        ("x", Tensor::from_vec(vec![-1.0, -1.0])),
        ("y", Tensor::from_vec(vec![2.0, -2.0])),
    ])
    .unwrap();
    let per = fsd_per_tensor(&a, &b).unwrap();
    assert_eq!(per.len(), 2);
    assert_eq!(per["x"], 0.5);
    assert_eq!(per["y"], 0.5);
    assert!(fsd_per_tensor(&a, &a).unwrap().values().all(|&v| v == 0.0));
}

#[test]
fn matrix_examples() {
    let a = single(&[1.0, -3.0, 2.0]);
    let m = fsd_matrix(std::slice::from_ref(&a), &["a".into()]).unwrap();
    assert_eq!(m.row(0), &[0.0]);
    let m = fsd_matrix(&[a.clone(), negate(&a)], &["a".into(), "n".into()]).unwrap();
    assert_eq!(m.row(0), &[0.0, 1.0]);
    assert_eq!(m.row(1), &[1.0, 0.0]);
}

#[test]
fn four_adapter_matrix_matches_oracle() {
    let mut rng = common::rng(11);
    let adapters: Vec<_> = (0..4)
        .map(|_| random_adapter(&mut rng, &common::adapter_shapes(), 0.05))
        .collect();
    let names: Vec<String> = (0..4).map(|i| format!("a{i}")).collect();
    let m = fsd_matrix(&adapters, &names).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let (c, t) = brute_conflicts(&adapters[i], &adapters[j]);
            assert_eq!(m.get(i, j), c as f64 / t as f64, "({i}, {j})");
        }
    }
}

#[test]
fn row_means() {
    let m = FsdMatrix::new(vec!["a".into(), "b".into()], vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    assert_eq!(mean_fsd_rows(&m), vec![0.5, 0.5]);
    let m = FsdMatrix::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![vec![0.0, 0.2, 0.4], vec![0.2, 0.0, 0.6], vec![0.4, 0.6, 0.0]],
    )
    .unwrap();
    let means = mean_fsd_rows(&m);
    for (got, want) in means.iter().zip([0.2, 0.8 / 3.0, 1.0 / 3.0]) {
        assert!((got - want).abs() <= 1e-9);
    }
    let zero = FsdMatrix::new(vec!["a".into(), "b".into()], vec![vec![0.0; 2]; 2]).unwrap();
    assert_eq!(mean_fsd_rows(&zero), vec![0.0, 0.0]);
}

#[test]
fn csv_round_trip() {
    let mut rng = common::rng(3);
    let adapters: Vec<_> = (0..3)
        .map(|_| random_adapter(&mut rng, &[("w", vec![50])], 0.1))
        .collect();
    let names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    let m = fsd_matrix(&adapters, &names).unwrap();
    let csv = m.to_csv().unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    assert!(text.starts_with("x,y,z\n"));
    assert!(text.lines().nth(1).unwrap().starts_with("0.000000000,"));
    let back = FsdMatrix::from_csv(&csv).unwrap();
    assert_eq!(back.labels(), m.labels());
    assert_eq!(back.to_csv().unwrap(), csv);
}

fn arb_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (1usize..200).prop_flat_map(|n| {
        let v = prop::collection::vec(-4.0f32..4.0, n);
        (v.clone(), v)
    })
}

proptest! {
    #[test]
    fn symmetric_and_self_zero((a, b) in arb_pair()) {
        let (a, b) = (single(&a), single(&b));
        prop_assert_eq!(fsd_pair(&a, &b).unwrap(), fsd_pair(&b, &a).unwrap());
        prop_assert_eq!(fsd_pair(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn positive_scaling_is_invisible((a, b) in arb_pair(), scale in prop::collection::vec(1e-3f32..1e3, 200)) {
        let scaled: Vec<f32> = a.iter().zip(&scale).map(|(x, c)| x * c).collect();
        prop_assert_eq!(
            fsd_pair(&single(&scaled), &single(&b)).unwrap(),
            fsd_pair(&single(&a), &single(&b)).unwrap()
        );
    }

    #[test]
    fn zeros_never_conflict(b in prop::collection::vec(-4.0f32..4.0, 1..100)) {
        let zeros = vec![0.0; b.len()];
        prop_assert_eq!(fsd_pair(&single(&zeros), &single(&b)).unwrap(), 0.0);
    }

    #[test]
    fn pair_is_weighted_mean_of_tensors(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let shapes = [("p", vec![3]), ("q", vec![7, 2]), ("r", vec![11])];
        let a = random_adapter(&mut rng, &shapes, 0.2);
        let b = random_adapter(&mut rng, &shapes, 0.2);
        let per = fsd_per_tensor(&a, &b).unwrap();
        let weighted: f64 = a.tensors().map(|(n, t)| per[n] * t.numel() as f64).sum::<f64>()
            / a.param_count() as f64;
        prop_assert!((weighted - fsd_pair(&a, &b).unwrap()).abs() <= 1e-12);
    }
}
