//! End-to-end behaviour of the trainer and the data pipeline.

mod common;

use common::{gaussian, rng};
use rand::Rng;
use ssa_core::diagnostics::write_metrics_csv;
use ssa_core::feedback::FeedbackBundle;
use ssa_core::harness::config::RunConfig;
use ssa_core::harness::data::{
    channel_stats, load_cifar10, Dataset, Split, CIFAR_PIXELS, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
use ssa_core::learning::{factor_update, local_grad, MethodKind, TrainConfig, Trainer};
use ssa_core::model::{Activation, FactoredWeight, InputShape, Layer, LayerKind, Network, NetworkSpec, Weight};
use ssa_core::numerics::{svd_exact, Matrix};
use ssa_core::objectives::{ce_loss_and_delta, LossWeights};

fn spiral() -> Dataset {
    RunConfig::default().load_dataset().unwrap()
}

fn trainer<T: ssa_core::Scalar>(method: MethodKind, data: &Dataset, hidden: usize, seed: u64) -> Trainer<T> {
    let mut cfg = TrainConfig::new(method, 3, seed);
    cfg.batch_size = 32;
    Trainer::new(
        cfg,
        &NetworkSpec::mlp3(data.input.dim(), hidden, data.classes, method.factored()),
    )
    .unwrap()
}

fn factored(net: &Network<f64>, i: usize) -> &FactoredWeight<f64> {
    net.layers[i].weight().and_then(Weight::factored).unwrap()
}

#[test]
fn ssa_gradients_stay_tangent_during_training() {
    let data = spiral();
    let mut t = trainer::<f64>(MethodKind::Ssa, &data, 16, 1);
    let idx: Vec<usize> = (0..data.train_len()).collect();
    for chunk in idx.chunks(32).take(60) {
        let (x, y) = data.batch::<f64>(Split::Train, chunk);
        let (logits, tapes) = t.net.forward(&x).unwrap();
        let (_, delta) = ce_loss_and_delta(&logits, &y).unwrap();
        for i in t.net.parametric_indices() {
            let fb = t.feedback[i].as_ref();
            let g = local_grad(&t.net.layers[i], fb, &tapes[i], &delta).unwrap();
            let fw = factored(&t.net, i);
            let targets = fb.and_then(|f| f.targets.as_ref());
            let fg = factor_update(MethodKind::Ssa, fw, &g.w, targets, &t.config.weights, None).unwrap();
            let scale = 1.0 + fg.gu.frobenius_norm() + fg.gvt.frobenius_norm();
            // The projection is exact up to the factors' own departure from
            // orthonormality.
            let tol = 1e-8 + 2.0 * fw.ortho_drift() * scale;
            assert!(fw.u.t_matmul(&fg.gu).unwrap().frobenius_norm() <= tol, "layer {i}");
            assert!(fg.gvt.matmul_t(&fw.vt).unwrap().frobenius_norm() <= tol, "layer {i}");
        }
        t.train_step(&x, &y).unwrap();
    }
}

#[test]
fn local_methods_are_independent_of_update_order() {
    let data = spiral();
    let (x, y) = data.batch::<f32>(Split::Train, &(0..64).collect::<Vec<_>>());
    for method in [
        MethodKind::Ssa,
        MethodKind::Dfa,
        MethodKind::Usf,
        MethodKind::Bp,
        MethodKind::SvdBp,
    ] {
        let base = trainer::<f32>(method, &data, 24, 4);
        let mut results = Vec::new();
        for order in [[0, 1, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1]] {
            let mut t = base.clone();
            for _ in 0..3 {
                t.train_step_ordered(&x, &y, Some(&order), None).unwrap();
            }
            results.push(t.net);
        }
        assert!(results.windows(2).all(|w| w[0] == w[1]), "{method}");
    }
}

#[test]
fn update_order_must_cover_every_layer() {
    let data = spiral();
    let (x, y) = data.batch::<f32>(Split::Train, &[0, 1, 2]);
    let mut t = trainer::<f32>(MethodKind::Dfa, &data, 8, 0);
    assert!(t.train_step_ordered(&x, &y, Some(&[0, 1]), None).is_err());
    assert!(t.train_step_ordered(&x, &y, Some(&[0, 1, 7]), None).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = spiral();
    for method in [
        MethodKind::Ssa,
        MethodKind::Dfa,
        MethodKind::Bp,
        MethodKind::SvdBp,
        MethodKind::Brsf,
    ] {
        let mut cfg = TrainConfig::new(method, 1, 3);
        cfg.adam.lr = 0.0;
        let spec = NetworkSpec::mlp3(2, 16, 3, method.factored());
        let mut t = Trainer::<f32>::new(cfg, &spec).unwrap();
        let before = t.net.clone();
        let rec = t.train_epoch(&data).unwrap();
        assert_eq!(t.net, before, "{method}");
        assert_eq!(rec.epoch, 0);
        assert_eq!(rec.layers.len(), 3);
    }
}

#[test]
fn ssa_with_identity_factors_matches_dfa_on_the_diagonal() {
    let n = 4;
    let mut g = rng(5);
    let x = gaussian(8, n, &mut g);
    let y: Vec<usize> = (0..8).map(|_| g.random_range(0..n)).collect();
    let layer = |w: Weight<f64>| Layer {
        kind: LayerKind::Dense(w),
        activation: Activation::Identity,
        bias: Some(vec![0.0; n]),
    };
    let id = FactoredWeight::new(Matrix::identity(n), vec![1.0; n], Matrix::identity(n)).unwrap();
    let ssa_net = Network::from_layers(InputShape::Flat(n), vec![layer(Weight::Factored(id))]).unwrap();
    let dfa_net = Network::from_layers(InputShape::Flat(n), vec![layer(Weight::Full(Matrix::identity(n)))]).unwrap();

    let mut cfg = TrainConfig::new(MethodKind::Ssa, 1, 9);
    cfg.weights = LossWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        lambda_hoyer: 0.0,
    };
    let mut ssa = Trainer::with_network(cfg.clone(), ssa_net).unwrap();
    cfg.method = MethodKind::Dfa;
    let mut dfa = Trainer::with_network(cfg, dfa_net).unwrap();
    assert!(dfa.feedback[0].as_ref().unwrap().source.identity_projection);

    ssa.train_step(&x, &y).unwrap();
    dfa.train_step(&x, &y).unwrap();
    let fw = ssa.net.layers[0].weight().and_then(Weight::factored).unwrap();
    let Some(Weight::Full(w)) = dfa.net.layers[0].weight() else {
        panic!()
    };
    assert_eq!(fw.u, Matrix::identity(n));
    assert_eq!(fw.vt, Matrix::identity(n));
    for k in 0..n {
        assert!((fw.s[k] - w[(k, k)]).abs() < 1e-10, "component {k}");
    }
    let (bs, bd) = (
        ssa.net.layers[0].bias.as_ref().unwrap(),
        dfa.net.layers[0].bias.as_ref().unwrap(),
    );
    assert!(bs.iter().zip(bd).all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn bp_fits_a_linearly_separable_set() {
    let mut g = rng(6);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    while ys.len() < 500 {
        let (a, b): (f32, f32) = (g.random_range(-1.0..1.0), g.random_range(-1.0..1.0));
        if (a + b).abs() > 0.2 {
            xs.extend([a, b]);
            ys.push(usize::from(a + b > 0.0));
        }
    }
    let all = Matrix::new(500, 2, xs).unwrap();
    let data = Dataset {
        input: InputShape::Flat(2),
        classes: 2,
        train_x: all.select_rows(&(0..400).collect::<Vec<_>>()),
        train_y: ys[..400].to_vec(),
        test_x: all.select_rows(&(400..500).collect::<Vec<_>>()),
        test_y: ys[400..].to_vec(),
    };
    let mut cfg = TrainConfig::new(MethodKind::Bp, 50, 0);
    cfg.batch_size = 32;
    cfg.adam.lr = 1e-2;
    let mut t = Trainer::<f32>::new(cfg, &NetworkSpec::mlp3(2, 32, 2, false)).unwrap();
    while !t.is_finished() {
        t.train_epoch(&data).unwrap();
    }
    let acc = t.accuracy(&data, Split::Train).unwrap();
    assert!(acc >= 0.99, "training accuracy {acc}");
}

#[test]
fn feedback_is_never_modified_by_training() {
    let data = spiral();
    for method in [MethodKind::Ssa, MethodKind::Dfa] {
        let mut t = trainer::<f32>(method, &data, 16, 8);
        t.config.rank_schedule = true;
        let before: Vec<Option<FeedbackBundle<f32>>> = t.feedback.clone();
        while !t.is_finished() {
            t.train_epoch(&data).unwrap();
        }
        for (i, (a, b)) in before.iter().zip(&t.feedback).enumerate() {
            let (Some(a), Some(b)) = (a, b) else { continue };
            assert_eq!(a.b, b.b, "{method} layer {i}");
            // Rank truncation keeps retained target components bit-exactly.
            if let (Some(ta), Some(tb)) = (&a.targets, &b.targets) {
                assert_eq!(ta.select(&tb.order), *tb, "{method} layer {i}");
            }
        }
    }
}

#[test]
fn factored_forward_matches_dense_forward() {
    let mut g = rng(12);
    for (m, n, r) in [(7, 5, 5), (6, 9, 3), (16, 16, 16)] {
        let w = gaussian(m, n, &mut g);
        let svd = svd_exact(&w).unwrap().truncate(r);
        let fw = FactoredWeight::new(svd.u.clone(), svd.s.clone(), svd.vt.clone()).unwrap();
        let x = gaussian(4, n, &mut g);
        let a = fw.apply(&x).unwrap();
        let b = x.matmul_t(&fw.reconstruct()).unwrap();
        let gap = a.sub(&b).unwrap().frobenius_norm() / b.frobenius_norm();
        assert!(gap < 1e-12, "{m}x{n} r{r}: {gap}");
        let (a32, b32) = (
            fw.cast::<f32>().apply(&x.cast()).unwrap(),
            x.cast::<f32>().matmul_t(&fw.cast::<f32>().reconstruct()).unwrap(),
        );
        let gap32 = a32.sub(&b32).unwrap().frobenius_norm() / b32.frobenius_norm();
        assert!(gap32 < 1e-6, "{m}x{n} r{r} f32: {gap32}");
    }
}

#[test]
fn dfa_output_layer_sees_the_true_gradient() {
    let data = spiral();
    let mut t = trainer::<f32>(MethodKind::Dfa, &data, 16, 2);
    let rec = t.train_epoch(&data).unwrap();
    // acos near 1 turns rounding of order 1e-16 into about 1e-6 degrees.
    let out = rec.layers.iter().find(|l| l.layer == 2).unwrap();
    assert!(out.grad_alignment_deg.unwrap() < 1e-4, "{:?}", out.grad_alignment_deg);
    let mut bp = trainer::<f32>(MethodKind::Bp, &data, 16, 2);
    for l in bp.train_epoch(&data).unwrap().layers {
        assert!(
            l.grad_alignment_deg.unwrap() < 1e-4,
            "bp layer {}: {:?}",
            l.layer,
            l.grad_alignment_deg
        );
    }
}

#[test]
fn identical_runs_write_identical_metrics() {
    let data = spiral();
    let run = || {
        let mut t = trainer::<f32>(MethodKind::Ssa, &data, 16, 21);
        t.config.alignment_log_every = 7;
        let mut records = Vec::new();
        while !t.is_finished() {
            records.push(t.train_epoch(&data).unwrap());
        }
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &records).unwrap();
        (buf, t.step_log)
    };
    assert_eq!(run(), run());
}

fn fake_batch(records: usize, value: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut out = Vec::new();
    for k in 0..records {
        out.push((k % 10) as u8);
        out.extend((0..CIFAR_PIXELS).map(|p| value(k, p)));
    }
    out
}

#[test]
fn cifar_normalization_uses_training_statistics_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut train_pixels = Vec::new();
    for (f, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let bytes = fake_batch(2, |k, p| ((p * 7 + k * 13 + f * 31) % 200) as u8);
        if f < 2 {
            for rec in bytes.chunks(CIFAR_PIXELS + 1) {
                train_pixels.extend_from_slice(&rec[1..]);
            }
        }
        std::fs::write(dir.path().join(name), bytes).unwrap();
    }
    // A test set far brighter than the training set.
    std::fs::write(
        dir.path().join(CIFAR_TEST_FILE),
        fake_batch(3, |_, p| 200 + (p % 50) as u8),
    )
    .unwrap();

    let data = load_cifar10(dir.path(), Some(3)).unwrap();
    assert_eq!(data.train_len(), 3);
    assert_eq!(data.test_len(), 3);
    train_pixels.truncate(3 * CIFAR_PIXELS);
    let (mean, std) = channel_stats(&train_pixels);

    let plane = CIFAR_PIXELS / 3;
    for c in 0..3 {
        // Recompute the expected standardization independently.
        let vals: Vec<f64> = train_pixels
            .chunks(CIFAR_PIXELS)
            .flat_map(|img| img[c * plane..(c + 1) * plane].iter().map(|&p| p as f64 / 255.0))
            .collect();
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((mu - mean[c]).abs() < 1e-12 && (sd - std[c]).abs() < 1e-12);
        let train_mean: f64 = (0..3)
            .flat_map(|r| (c * plane..(c + 1) * plane).map(move |j| (r, j)))
            .map(|(r, j)| data.train_x[(r, j)] as f64)
            .sum::<f64>()
            / (3 * plane) as f64;
        assert!(train_mean.abs() < 1e-5, "channel {c}: {train_mean}");
    }
    for r in 0..3 {
        for j in [0, plane + 5, 2 * plane + 17] {
            let p = (200 + j % 50) as f64 / 255.0;
            let c = j / plane;
            let expected = (p - mean[c]) / std[c];
            assert!((data.test_x[(r, j)] as f64 - expected).abs() < 1e-5);
        }
    }
}

#[test]
fn truncated_cifar_file_reports_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = fake_batch(2, |_, _| 1);
    bytes.truncate(bytes.len() - 100);
    std::fs::write(dir.path().join(CIFAR_TRAIN_FILES[0]), bytes).unwrap();
    match load_cifar10(dir.path(), Some(1)) {
        Err(ssa_core::Error::Data { offset, .. }) => assert_eq!(offset, (CIFAR_PIXELS + 1) as u64),
        other => panic!("{other:?}"),
    }
}
