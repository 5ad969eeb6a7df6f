use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdcm_core::contrastive::{
    contrastive_loss, contrastive_loss_on_tape, contrastive_loss_with_plan, weight_plan, ContrastiveBatch,
    ContrastiveHyper, ContrastiveMode,
};
use rdcm_core::layers::{l2_normalize, softmax_rows};
use rdcm_core::tape::Tape;
use rdcm_core::Tensor;

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize, real_every: usize) -> ContrastiveBatch {
    let text = l2_normalize(&random_matrix(rng, n, d)).unwrap();
    let visual = l2_normalize(&random_matrix(rng, n, d)).unwrap();
    let descriptors = softmax_rows(&random_matrix(rng, n, c)).unwrap();
    ContrastiveBatch {
        text,
        visual,
        descriptors,
        real_mask: (0..n).map(|i| i % real_every == 0).collect(),
        text_descriptors: None,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `−(1/B) Σ_p log( exp(s_pp) / Σ_q exp(s_pq) )`.
fn info_nce(text: &Tensor, visual: &Tensor, tau: f64) -> f64 {
    let n = text.rows();
    let mut total = 0.0;
    for p in 0..n {
        let pos = dot(text.row(p), visual.row(p)) / tau;
        let denom: f64 = (0..n).map(|q| (dot(text.row(p), visual.row(q)) / tau).exp()).sum();
        total -= (pos.exp() / denom).ln();
    }
    total / n as f64
}

#[test]
fn regular_mode_is_info_nce() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(2..10);
        let batch = random_batch(&mut rng, n, 5, 4, 2);
        let hyper = ContrastiveHyper {
            beta: 0.5,
            tau: rng.random_range(0.1..1.0),
        };
        let got = contrastive_loss(&batch, &hyper, ContrastiveMode::Regular).unwrap();
        let want = info_nce(&batch.text, &batch.visual, hyper.tau);
        assert!((got.value - want).abs() <= 1e-12, "{} vs {want}", got.value);
        assert_eq!(got.anchors, n);
    }
}

#[test]
fn zero_threshold_gives_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let batch = random_batch(&mut rng, 8, 4, 3, 2);
        let hyper = ContrastiveHyper { beta: 0.0, tau: 0.5 };
        assert_eq!(
            contrastive_loss(&batch, &hyper, ContrastiveMode::Ours).unwrap().value,
            0.0
        );
    }
}

#[test]
fn negatives_at_or_above_threshold_are_excluded() {
    // Descriptor cosines: rows 0/1 identical (sim 1), 0/2 orthogonal (sim 0.5).
    let descriptors = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
    let real = [true, true, true];
    let plan = weight_plan(&real, &descriptors, None, 0.5, ContrastiveMode::Ours).unwrap();
    assert_eq!(plan.weight(0, 1), 0.0);
    assert_eq!(plan.weight(0, 2), 0.0, "sim equal to beta is excluded");
    let plan = weight_plan(&real, &descriptors, None, 0.75, ContrastiveMode::Ours).unwrap();
    assert_eq!(plan.weight(0, 1), 0.0);
    assert_eq!(plan.weight(0, 2), 0.25);

    // With only boundary negatives the loss is log1p(0) = 0 per anchor.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let text = l2_normalize(&random_matrix(&mut rng, 3, 4)).unwrap();
    let visual = l2_normalize(&random_matrix(&mut rng, 3, 4)).unwrap();
    let plan = weight_plan(&real, &descriptors, None, 0.5, ContrastiveMode::Ours).unwrap();
    assert_eq!(
        contrastive_loss_with_plan(&text, &visual, &plan, 0.5).unwrap().value,
        0.0
    );
}

#[test]
fn batch_without_real_posts_contributes_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut batch = random_batch(&mut rng, 6, 3, 3, 1);
    batch.real_mask = vec![false; 6];
    let hyper = ContrastiveHyper { beta: 0.9, tau: 0.5 };
    for mode in [ContrastiveMode::Ours, ContrastiveMode::ThresCon] {
        let l = contrastive_loss(&batch, &hyper, mode).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.no_anchors());
    }
    let plan = weight_plan(&batch.real_mask, &batch.descriptors, None, 0.9, ContrastiveMode::Ours).unwrap();
    let mut tape = Tape::new();
    let t = tape.leaf(batch.text.clone());
    let v = tape.leaf(batch.visual.clone());
    let l = contrastive_loss_on_tape(&mut tape, t, v, &plan, 0.5).unwrap();
    assert_eq!(tape.scalar(l), 0.0);
}

#[test]
fn saturated_weights_reproduce_threscon() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(&mut rng, 7, 4, 3, 2);
    let ours = weight_plan(&batch.real_mask, &batch.descriptors, None, 0.8, ContrastiveMode::Ours).unwrap();
    let thres = weight_plan(
        &batch.real_mask,
        &batch.descriptors,
        None,
        0.8,
        ContrastiveMode::ThresCon,
    )
    .unwrap();
    assert_eq!(ours.saturated(), thres);
    let a = contrastive_loss_with_plan(&batch.text, &batch.visual, &ours.saturated(), 0.5).unwrap();
    let hyper = ContrastiveHyper { beta: 0.8, tau: 0.5 };
    let b = contrastive_loss(&batch, &hyper, ContrastiveMode::ThresCon).unwrap();
    assert_eq!(a, b);
}

#[test]
fn loss_grows_with_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let batch = random_batch(&mut rng, 8, 4, 3, 2);
        let mut last = 0.0;
        for beta in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
            let l = contrastive_loss(&batch, &ContrastiveHyper { beta, tau: 0.5 }, ContrastiveMode::Ours)
                .unwrap()
                .value;
            assert!(l >= last);
            last = l;
        }
    }
}

#[test]
fn softmax_descriptors_never_weight_below_half() {
    // Non-negative descriptors have cosine ≥ 0, so β = 0.5 zeroes every weight.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = random_batch(&mut rng, 10, 4, 5, 1);
    let plan = weight_plan(&batch.real_mask, &batch.descriptors, None, 0.5, ContrastiveMode::Ours).unwrap();
    assert!(plan.weights.iter().all(|&w| w == 0.0));
}

#[test]
fn textcon_needs_and_uses_text_descriptors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut batch = random_batch(&mut rng, 6, 4, 3, 2);
    let hyper = ContrastiveHyper { beta: 0.9, tau: 0.5 };
    assert!(contrastive_loss(&batch, &hyper, ContrastiveMode::TextCon).is_err());
    batch.text_descriptors = Some(batch.descriptors.clone());
    assert_eq!(
        contrastive_loss(&batch, &hyper, ContrastiveMode::TextCon).unwrap(),
        contrastive_loss(&batch, &hyper, ContrastiveMode::Ours).unwrap()
    );
}

#[test]
fn invalid_batches_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut batch = random_batch(&mut rng, 4, 3, 3, 2);
    batch.text = random_matrix(&mut rng, 4, 3);
    let hyper = ContrastiveHyper::default();
    assert!(contrastive_loss(&batch, &hyper, ContrastiveMode::Ours).is_err());
    let mut batch = random_batch(&mut rng, 4, 3, 3, 2);
    batch.descriptors = random_matrix(&mut rng, 4, 3);
    assert!(contrastive_loss(&batch, &hyper, ContrastiveMode::Ours).is_err());
    let bad = ContrastiveHyper { beta: 1.5, tau: 0.5 };
    assert!(contrastive_loss(&random_batch(&mut rng, 4, 3, 3, 2), &bad, ContrastiveMode::Ours).is_err());
}

#[test]
fn taped_loss_matches_plain_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let raw_t = random_matrix(&mut rng, 6, 4);
    let raw_v = random_matrix(&mut rng, 6, 4);
    let desc = softmax_rows(&random_matrix(&mut rng, 6, 3)).unwrap();
    let real: Vec<bool> = (0..6).map(|i| i % 3 != 1).collect();
    let plan = weight_plan(&real, &desc, None, 0.9, ContrastiveMode::Ours).unwrap();
    let tau = 0.5;

    let eval = |t: &Tensor, v: &Tensor| {
        contrastive_loss_with_plan(&l2_normalize(t).unwrap(), &l2_normalize(v).unwrap(), &plan, tau)
            .unwrap()
            .value
    };
    let mut tape = Tape::new();
    let t = tape.leaf(raw_t.clone());
    let v = tape.leaf(raw_v.clone());
    let nt = tape.l2_normalize(t).unwrap();
    let nv = tape.l2_normalize(v).unwrap();
    let loss = contrastive_loss_on_tape(&mut tape, nt, nv, &plan, tau).unwrap();
    assert!((tape.scalar(loss) - eval(&raw_t, &raw_v)).abs() <= 1e-12);

    let grads = tape.backward(loss).unwrap();
    let h = 1e-4;
    for (var, which) in [(t, 0), (v, 1)] {
        let g = grads.wrt(var).unwrap();
        for k in 0..24 {
            let bump = |delta: f64| {
                let (mut a, mut b) = (raw_t.clone(), raw_v.clone());
                if which == 0 {
                    a.data_mut()[k] += delta;
                } else {
                    b.data_mut()[k] += delta;
                }
                eval(&a, &b)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let analytic = g.data()[k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(rel <= 1e-4, "entry {k}: {analytic} vs {numeric}");
        }
    }
}
