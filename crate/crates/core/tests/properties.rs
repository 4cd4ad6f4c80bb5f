use proptest::prelude::*;

use ubpa::checkpoint::Container;
use ubpa::data::{stratified_batches, synth_blobs, BatchPlan};
use ubpa::evidence::{bpa_from_confusion, gamma, ConfusionMatrix};
use ubpa::linalg::{cholesky, eigh, generalized_eigh, Matrix};
use ubpa::nn::{init_params, LayerSpec, NetworkSpec};

fn confusion() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (2usize..=20).prop_flat_map(|c| prop::collection::vec(prop::collection::vec(0u64..50, c), c))
}

fn symmetric(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| {
        let m = Matrix::from_vec(n, n, v).unwrap();
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                s.as_mut_slice()[i * n + j] = 0.5 * (m[(i, j)] + m[(j, i)]);
            }
        }
        s
    })
}

fn spd(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
        let g = Matrix::from_vec(n, n, v).unwrap();
        let mut b = g.matmul(&g.transpose()).unwrap();
        for i in 0..n {
            b.as_mut_slice()[i * n + i] += 0.1 * n as f64;
        }
        b
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn masses_are_a_distribution(rows in confusion()) {
        let bpa = bpa_from_confusion(&ConfusionMatrix::from_rows(&rows).unwrap());
        let sum: f64 = bpa.masses.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(bpa.masses.iter().all(|&m| m >= 0.0));
        let c = rows.len() as f64;
        prop_assert!(bpa.gamma >= 1.0 / c.sqrt() - 1e-12 && bpa.gamma <= 1.0 + 1e-12);
        prop_assert_eq!(bpa.gamma, gamma(&bpa.masses).unwrap());
    }

    #[test]
    fn masses_are_scale_invariant(rows in confusion(), k in 2u64..1000) {
        let a = bpa_from_confusion(&ConfusionMatrix::from_rows(&rows).unwrap());
        let scaled: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let b = bpa_from_confusion(&ConfusionMatrix::from_rows(&scaled).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn masses_follow_class_relabeling(rows in confusion(), seed in any::<u64>()) {
        let c = rows.len();
        let mut perm: Vec<usize> = (0..c).collect();
        ubpa::rng::SplitMix64::new(seed).shuffle(&mut perm);
        let permuted: Vec<Vec<u64>> = (0..c)
            .map(|i| (0..c).map(|j| rows[perm[i]][perm[j]]).collect())
            .collect();
        let a = bpa_from_confusion(&ConfusionMatrix::from_rows(&rows).unwrap());
        let b = bpa_from_confusion(&ConfusionMatrix::from_rows(&permuted).unwrap());
        prop_assert_eq!(a.degenerate, b.degenerate);
        for i in 0..c {
            prop_assert!((b.masses[i] - a.masses[perm[i]]).abs() <= 1e-12);
        }
    }

    #[test]
    fn eigh_reconstructs(a in (1usize..=8).prop_flat_map(symmetric)) {
        let e = eigh(&a).unwrap();
        let n = a.rows();
        for j in 0..n {
            let v = e.vector(j);
            let av = a.matvec(&v).unwrap();
            for i in 0..n {
                prop_assert!((av[i] - e.values[j] * v[i]).abs() <= 1e-9 * a.max_abs().max(1.0));
            }
        }
        let q = &e.vectors;
        let qtq = q.transpose().matmul(q).unwrap();
        prop_assert!(qtq.sub(&Matrix::identity(n)).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn cholesky_factor_reproduces_input(b in (1usize..=10).prop_flat_map(spd)) {
        let l = cholesky(&b).unwrap();
        let llt = l.matmul(&l.transpose()).unwrap();
        prop_assert!(llt.sub(&b).unwrap().max_abs() <= 1e-12 * b.max_abs().max(1.0));
    }

    #[test]
    fn generalized_vectors_are_b_orthonormal(
        (a, b) in (1usize..=8).prop_flat_map(|n| (symmetric(n), spd(n)))
    ) {
        let e = generalized_eigh(&a, &b).unwrap();
        let g = e.vectors.transpose().matmul(&b.matmul(&e.vectors).unwrap()).unwrap();
        prop_assert!(g.sub(&Matrix::identity(a.rows())).unwrap().max_abs() <= 1e-9);
    }

    #[test]
    fn update_depends_only_on_eta_times_gamma(seed in any::<u64>(), eta in 0.01f64..1.0) {
        let spec = NetworkSpec {
            input: vec![3],
            layers: vec![LayerSpec::Dense { inputs: 3, out: 2 }, LayerSpec::Relu],
        };
        let net = init_params(&spec, seed).unwrap();
        let x = Matrix::from_rows(&[[1.0, -0.5, 0.25]]).unwrap();
        let tape = net.forward(&x).unwrap();
        let grads = net.backward(&tape, &Matrix::from_rows(&[[1.0, 1.0]]).unwrap()).unwrap();
        // η₁Γ₁ = (2η)(0.25) and η₂Γ₂ = η(0.5) are the same product exactly.
        let mut a = net.clone();
        let mut b = net.clone();
        a.sgd_update(&grads, 2.0 * eta, 0.25).unwrap();
        b.sgd_update(&grads, eta, 0.5).unwrap();
        prop_assert_eq!(a.parameter_blocks(), b.parameter_blocks());
    }

    #[test]
    fn forward_leaves_parameters_alone(seed in any::<u64>()) {
        let spec = NetworkSpec {
            input: vec![1, 5, 5],
            layers: vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 2, k: 2, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 8, out: 3 },
            ],
        };
        let net = init_params(&spec, seed).unwrap();
        let copy = net.clone();
        let x = Matrix::from_vec(2, 25, (0..50).map(|i| (i as f64).sin()).collect()).unwrap();
        let first = net.predict(&x).unwrap();
        prop_assert_eq!(&net, &copy);
        prop_assert_eq!(first, net.predict(&x).unwrap());
    }

    #[test]
    fn stratified_batches_cover_each_class(seed in any::<u64>(), min in 1usize..4) {
        let (train, _) = synth_blobs(seed, 3, 40, 2, 3.0).unwrap();
        let plan = BatchPlan { epoch_seed: seed, batch_size: 12, stratified: true, min_per_class: min };
        let b = stratified_batches(&train, &plan).unwrap();
        let mut seen = vec![false; train.len()];
        for batch in &b.batches {
            prop_assert_eq!(batch.len(), 12);
            let mut counts = [0usize; 3];
            for &i in batch {
                prop_assert!(!seen[i]);
                seen[i] = true;
                counts[train.labels[i]] += 1;
            }
            prop_assert!(counts.iter().all(|&n| n >= min));
        }
        prop_assert_eq!(seen.iter().filter(|s| **s).count() + b.dropped, train.len());
    }

    #[test]
    fn container_round_trips(values in prop::collection::vec(any::<f64>(), 0..64), name in "[a-z.]{1,12}") {
        let mut c = Container::new(serde_json::json!({"note": name.clone()}));
        c.push(name.clone(), &values);
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let got = back.block(&name).unwrap();
        prop_assert_eq!(got.len(), values.len());
        for (g, v) in got.iter().zip(&values) {
            prop_assert_eq!(g.to_bits(), v.to_bits());
        }
    }
}

#[test]
fn same_seed_same_parameters_after_training() {
    use ubpa::config::{BlobsConfig, DatasetConfig, RunConfig};
    use ubpa::heads::HeadKind;
    let mut cfg = RunConfig::new(
        DatasetConfig::Blobs(BlobsConfig {
            classes: 3,
            per_class: 60,
            dim: 2,
            separation: 5.0,
            seed: None,
        }),
        vec![HeadKind::Softmax, HeadKind::Svm, HeadKind::Lda],
    );
    cfg.architecture = Some(ubpa::trainer::mlp(2, 16, 3));
    cfg.epochs = 3;
    cfg.eta = 0.003;
    cfg.batch_size = 24;
    let (train, test) = cfg.load_data(None).unwrap();
    let (a, csv_a) = ubpa::fit(&cfg, &train, &test, None).unwrap();
    let (b, csv_b) = ubpa::fit(&cfg, &train, &test, None).unwrap();
    assert_eq!(csv_a, csv_b);
    assert_eq!(a.trunks, b.trunks);
}
