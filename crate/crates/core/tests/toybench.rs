mod common;

use std::sync::OnceLock;

use adapter_mixer::toybench::gradcheck::relative_error;
use adapter_mixer::toybench::model::HIDDEN_DIM;
use adapter_mixer::toybench::*;
use rand::seq::SliceRandom;

fn spec(separation: f64, angle: f64, seed: u64) -> DomainSpec {
    DomainSpec {
        cluster_separation: separation,
        ..DomainSpec::new("d", angle, seed)
    }
}

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Two-class linear discriminant fitted on the training split, scored on test.
fn lda_accuracy(data: &DomainDataset) -> f64 {
    let d = data.train.dim();
    let mut means = vec![vec![0.0; d]; 2];
    let mut counts = [0.0; 2];
    for (x, y) in data.train.iter() {
        counts[y] += 1.0;
        for (m, v) in means[y].iter_mut().zip(x) {
            *m += v;
        }
    }
    for (m, c) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= c);
    }
    let mut cov = vec![vec![0.0; d]; d];
    for (x, y) in data.train.iter() {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (x[i] - means[y][i]) * (x[j] - means[y][j]);
            }
        }
    }
    let n = data.train.len() as f64 - 2.0;
    cov.iter_mut().flatten().for_each(|v| *v /= n);
    let diff: Vec<f64> = means[1].iter().zip(&means[0]).map(|(a, b)| a - b).collect();
    let w = solve(cov, diff);
    let mid: Vec<f64> = means[0].iter().zip(&means[1]).map(|(a, b)| (a + b) / 2.0).collect();
    let correct = data
        .test
        .iter()
        .filter(|(x, y)| {
            let score: f64 = w.iter().zip(x.iter().zip(&mid)).map(|(w, (x, m))| w * (x - m)).sum();
            usize::from(score > 0.0) == *y
        })
        .count();
    correct as f64 / data.test.len() as f64
}

#[test]
fn well_separated_domains_are_linearly_solvable() {
    for seed in 0..5 {
        let data = make_domain(&spec(10.0, 0.4 * seed as f64, seed)).unwrap();
        let acc = lda_accuracy(&data);
        assert!(acc >= 0.99, "seed {seed}: LDA accuracy {acc}");
    }
}

#[test]
fn rotation_keeps_label_marginals() {
    let a = make_domain(&spec(4.0, 0.0, 9)).unwrap();
    let b = make_domain(&spec(4.0, std::f64::consts::FRAC_PI_2, 9)).unwrap();
    assert_ne!(a.train.input(0), b.train.input(0));
    assert_eq!(a.train.labels(), b.train.labels());
    assert_eq!(a.test.labels(), b.test.labels());
}

struct Trained {
    backbone: Backbone,
    data: DomainDataset,
    adapter: AdapterParams,
    head: Head,
}

fn trained_sep6() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = make_domain(&spec(6.0, 0.7, 21)).unwrap();
        let backbone = Backbone::init(data.spec.input_dim, 5);
        let t = train_adapter(&backbone, &data, &TrainConfig::default().with_seed(5)).unwrap();
        Trained {
            adapter: AdapterParams::from_checkpoint(&t.adapter).unwrap(),
            head: t.head,
            backbone,
            data,
        }
    })
}

#[test]
fn separation_six_trains_to_high_accuracy() {
    let t = trained_sep6();
    let acc = evaluate(&t.backbone, &t.adapter.to_checkpoint(), &t.head, &t.data.test, Attack::None).unwrap();
    assert!(acc >= 0.95, "test accuracy {acc}");
}

#[test]
fn fgsm_step_raises_loss() {
    let t = trained_sep6();
    let model = ToyModel::new(&t.backbone, &t.adapter, &t.head);
    let mut violations = 0;
    for i in 0..100 {
        let (x, y) = (t.data.test.input(i), t.data.test.label(i));
        let adv = fgsm_perturb(&model, x, y, 0.01).unwrap();
        if model.loss(&adv, y).unwrap() < model.loss(x, y).unwrap() {
            violations += 1;
        }
    }
    assert!(violations <= 2, "{violations} of 100 points lost loss under FGSM");
}

#[test]
fn fgsm_moves_each_coordinate_by_epsilon() {
    let t = trained_sep6();
    let model = ToyModel::new(&t.backbone, &t.adapter, &t.head);
    for i in 0..20 {
        let x = t.data.test.input(i);
        let y = t.data.test.label(i);
        let (_, _, grad) = model.loss_and_gradients(x, y).unwrap();
        let adv = fgsm_perturb(&model, x, y, 0.01).unwrap();
        for ((a, b), g) in adv.iter().zip(x).zip(&grad) {
            if *g == 0.0 {
                assert_eq!(a, b);
            } else {
                assert!(((a - b).abs() - 0.01).abs() < 1e-15);
            }
        }
        assert_eq!(fgsm_perturb(&model, x, y, 0.0).unwrap(), x);
    }
}

#[test]
fn fgsm_never_beats_clean_accuracy_here() {
    let t = trained_sep6();
    let ckpt = t.adapter.to_checkpoint();
    let clean = evaluate(&t.backbone, &ckpt, &t.head, &t.data.test, Attack::None).unwrap();
    let zero = evaluate(&t.backbone, &ckpt, &t.head, &t.data.test, Attack::Fgsm { epsilon: 0.0 }).unwrap();
    let attacked = evaluate(&t.backbone, &ckpt, &t.head, &t.data.test, Attack::Fgsm { epsilon: 0.01 }).unwrap();
    assert_eq!(zero, clean);
    assert!(attacked <= clean);
}

#[test]
fn zero_adapter_is_the_residual_identity() {
    let data = make_domain(&spec(3.0, 0.2, 1)).unwrap();
    let backbone = Backbone::init(16, 2);
    let head = Head::init(2, 3);
    let zeros = AdapterParams::zeros();
    let model = ToyModel::new(&backbone, &zeros, &head);
    for i in 0..10 {
        let x = data.test.input(i);
        let h = backbone.features(x).unwrap();
        let expected: Vec<f64> = (0..2)
            .map(|c| head.bias[c] + (0..HIDDEN_DIM).map(|j| head.weight[c * HIDDEN_DIM + j] * h[j]).sum::<f64>())
            .collect();
        let logits = model.forward(x).unwrap();
        for (a, b) in logits.iter().zip(&expected) {
            assert!(relative_error(*a, *b) <= 1e-12);
        }
    }
}

#[test]
fn zero_input_and_biases_give_zero_logits() {
    let mut backbone = Backbone::init(16, 4);
    backbone.bias.iter_mut().for_each(|b| *b = 0.0);
    let adapter = AdapterParams::init(4);
    let mut head = Head::init(3, 4);
    head.bias.iter_mut().for_each(|b| *b = 0.0);
    let logits = ToyModel::new(&backbone, &adapter, &head).forward(&[0.0; 16]).unwrap();
    assert!(logits.iter().all(|&l| l == 0.0));
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let data = make_domain(&spec(3.0, 0.0, 12)).unwrap();
    let mut labels = data.train.labels().to_vec();
    labels.shuffle(&mut common::rng(1));
    let split = Split::new(16, (0..data.train.len()).flat_map(|i| data.train.input(i).to_vec()).collect(), labels).unwrap();
    let backbone = Backbone::init(16, 0);
    let acc = evaluate(&backbone, &AdapterParams::init(0).to_checkpoint(), &Head::init(2, 0), &split, Attack::None).unwrap();
    // 2000 draws: four standard deviations of a fair coin is about 0.045.
    assert!((acc - 0.5).abs() <= 0.045, "accuracy {acc}");
}

#[test]
fn gradients_match_finite_differences() {
    let data = make_domain(&spec(3.0, 0.5, 30)).unwrap();
    let backbone = Backbone::init(16, 30);
    let adapter = AdapterParams::init(30);
    let head = Head::init(2, 30);
    let model = ToyModel::new(&backbone, &adapter, &head);
    for i in 0..10 {
        let err = grad_check(&model, data.test.input(i), data.test.label(i)).unwrap();
        assert!(err <= 1e-4, "point {i}: relative error {err}");
    }
}
