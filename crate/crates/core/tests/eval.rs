use std::cell::RefCell;

use piclick_core::eval::*;
use piclick_core::mask::iou;
use piclick_core::model::ProposalModel;
use piclick_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 20;

/// 10×10 square holding exactly 100 pixels.
fn gt() -> MaskGrid {
    MaskGrid::from_fn(SIDE, SIDE, |x, y| (5..15).contains(&x) && (5..15).contains(&y))
}

/// The first `m` pixels of the ground truth in row-major order: IoU = m/100.
fn partial(m: usize) -> MaskGrid {
    let g = gt();
    let mut left = m;
    MaskGrid::from_fn(SIDE, SIDE, |x, y| {
        if g.get(x, y) && left > 0 {
            left -= 1;
            true
        } else {
            false
        }
    })
}

fn to_proposals(masks: &[MaskGrid], conf: Vec<f64>, iou_pred: Vec<f64>) -> Proposals<f64> {
    let data = masks
        .iter()
        .flat_map(|m| m.bits().iter().map(|b| if *b { 5.0 } else { -5.0 }))
        .collect();
    Proposals {
        mask_logits: Tensor::new(vec![masks.len(), SIDE, SIDE], data),
        conf,
        iou_pred,
    }
}

/// Ladder per instance, chosen by the first pixel of the image; the rung is
/// picked by the number of clicks supplied.
struct Ladder {
    ladders: Vec<Vec<usize>>,
    seen: RefCell<Vec<usize>>,
}

impl ProposalModel<f64> for Ladder {
    fn propose(&self, image: &Tensor<f64>, clicks: &[Click], _prev: &Tensor<f64>) -> Result<Proposals<f64>> {
        self.seen.borrow_mut().push(clicks.len());
        let ladder = &self.ladders[image.data()[0] as usize];
        let m = ladder[(clicks.len() - 1).min(ladder.len() - 1)];
        Ok(to_proposals(&[partial(m)], vec![0.9], vec![0.9]))
    }
}

fn image(id: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![3, SIDE, SIDE]);
    t.data_mut()[0] = id as f64;
    t
}

fn ladder(ladders: Vec<Vec<usize>>) -> Ladder {
    Ladder {
        ladders,
        seen: RefCell::new(Vec::new()),
    }
}

#[test]
fn iou_examples() {
    // two 4-wide, 2-tall rectangles sharing a 2×2 block
    let a = MaskGrid::from_fn(6, 2, |x, _| x < 4);
    let b = MaskGrid::from_fn(6, 2, |x, _| x >= 2);
    assert_eq!(iou(&a, &b), 4.0 / 12.0);
    assert_eq!(iou(&a, &a), 1.0);
    let c = MaskGrid::from_fn(6, 2, |x, _| x >= 5);
    assert_eq!(iou(&a, &c), 0.0);
    assert_eq!(iou(&MaskGrid::empty(3, 3), &MaskGrid::empty(3, 3)), 1.0);
}

#[test]
fn iou_matches_set_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..200 {
        let w = rng.gen_range(1..=64);
        let h = rng.gen_range(1..=64);
        let a = MaskGrid::from_fn(w, h, |_, _| rng.gen_bool(0.3));
        let b = MaskGrid::from_fn(w, h, |_, _| rng.gen_bool(0.6));
        let sa: std::collections::HashSet<_> = a.pixels().collect();
        let sb: std::collections::HashSet<_> = b.pixels().collect();
        let inter = sa.intersection(&sb).count();
        let union = sa.union(&sb).count();
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        assert_eq!(iou(&a, &b), want);
    }
}

#[test]
fn perfect_model_needs_one_click() {
    struct Perfect;
    impl ProposalModel<f64> for Perfect {
        fn propose(&self, _: &Tensor<f64>, _: &[Click], _: &Tensor<f64>) -> Result<Proposals<f64>> {
            Ok(to_proposals(&[gt(), MaskGrid::empty(SIDE, SIDE)], vec![1.0, 0.2], vec![1.0, 0.2]))
        }
    }
    let cfg = EvalConfig::default();
    let tr = evaluate_instance(&Perfect, &image(0), &gt(), &cfg).unwrap();
    assert_eq!(tr.noc, vec![1, 1]);
    assert_eq!(tr.ious, vec![1.0]);
    let r = evaluate_dataset(&Perfect, &[EvalInstance { image: image(0), gt: gt() }], &cfg).unwrap();
    assert_eq!(r.miou_at(1), Some(1.0));
    assert_eq!(r.miou_at(5), Some(1.0));
    assert_eq!(r.noc_at(0.9), Some(1.0));
}

#[test]
fn empty_model_never_reaches_threshold() {
    struct Empty;
    impl ProposalModel<f64> for Empty {
        fn propose(&self, _: &Tensor<f64>, _: &[Click], _: &Tensor<f64>) -> Result<Proposals<f64>> {
            Ok(to_proposals(&[MaskGrid::empty(SIDE, SIDE)], vec![0.5], vec![0.5]))
        }
    }
    let cfg = EvalConfig::default();
    let tr = evaluate_instance(&Empty, &image(0), &gt(), &cfg).unwrap();
    assert_eq!(tr.noc, vec![20, 20]);
    assert_eq!(tr.ious.len(), 20);
    assert_eq!(tr.clicks.len(), 20);
    let r = summarize(&cfg, vec![tr]).unwrap();
    assert_eq!(r.noc[0].failures, 1);
}

#[test]
fn ladder_gives_hand_counted_noc() {
    let model = ladder(vec![vec![60, 80, 92, 95, 97]]);
    let cfg = EvalConfig::default();
    let tr = evaluate_instance(&model, &image(0), &gt(), &cfg).unwrap();
    assert_eq!(tr.noc, vec![3, 3]);
    assert_eq!(tr.ious, vec![0.6, 0.8, 0.92, 0.95, 0.97]);
    // the k-th forward saw exactly k clicks
    assert_eq!(*model.seen.borrow(), vec![1, 2, 3, 4, 5]);
    // first click sits at the centre of the square, positive
    assert!(tr.clicks[0].polarity.is_positive());
    assert_eq!((tr.clicks[0].x, tr.clicks[0].y), (9, 9));
}

#[test]
fn scripted_suite_aggregates_by_hand() {
    let ladders = vec![
        vec![90, 95],              // NoC@.85 1, @.90 1
        vec![50, 70, 86, 88, 91],  // 3, 5
        vec![10, 20, 30],          // never: 20, 20
        vec![85, 89, 90],          // 1, 3
        vec![0, 100],              // 2, 2
    ];
    let model = ladder(ladders);
    let data: Vec<_> = (0..5).map(|i| EvalInstance { image: image(i), gt: gt() }).collect();
    let cfg = EvalConfig {
        k_list: vec![1, 2, 5],
        ..EvalConfig::default()
    };
    let r = evaluate_dataset(&model, &data, &cfg).unwrap();
    assert_eq!(r.noc_at(0.85), Some((1 + 3 + 20 + 1 + 2) as f64 / 5.0));
    assert_eq!(r.noc_at(0.90), Some((1 + 5 + 20 + 3 + 2) as f64 / 5.0));
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(r.miou_at(1).unwrap(), (0.90 + 0.50 + 0.10 + 0.85 + 0.0) / 5.0));
    assert!(close(r.miou_at(2).unwrap(), (0.95 + 0.70 + 0.20 + 0.89 + 1.0) / 5.0));
    // after a perfect mask the IoU carries over; the third ladder saturates at 0.30
    assert!(close(r.miou_at(5).unwrap(), (0.95 + 0.91 + 0.30 + 0.90 + 1.0) / 5.0));
    assert_eq!(r.noc[0].failures, 1);
    assert_eq!(r.instances[4].ious, vec![0.0, 1.0]);
}

#[test]
fn mean_of_two_instances() {
    let model = ladder(vec![vec![100], vec![40, 60, 100]]);
    let data: Vec<_> = (0..2).map(|i| EvalInstance { image: image(i), gt: gt() }).collect();
    let r = evaluate_dataset(&model, &data, &EvalConfig::default()).unwrap();
    assert_eq!(r.noc_at(0.85), Some(2.0));
}

#[test]
fn empty_dataset_is_a_configuration_error() {
    let model = ladder(vec![vec![100]]);
    assert!(matches!(
        evaluate_dataset::<f64, _>(&model, &[], &EvalConfig::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn lower_threshold_never_needs_more_clicks() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..200 {
        let ious: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut taus: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let nocs: Vec<usize> = taus.iter().map(|t| clicks_to_reach(&ious, *t, 20)).collect();
        assert!(nocs.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn selection_modes() {
    let p = to_proposals(&[gt(), gt()], vec![0.9, 0.1], vec![0.1, 0.9]);
    assert_eq!(selection_ablation(&p, SelectionMode::ConfOnly).unwrap(), 0);
    assert_eq!(selection_ablation(&p, SelectionMode::IouOnly).unwrap(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let n = rng.gen_range(1..8);
        let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 5.0).collect();
        let iou_pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 5.0).collect();
        let masks = vec![gt(); n];
        let p = to_proposals(&masks, conf.clone(), iou_pred.clone());
        let scan = |v: &[f64]| {
            let mut best = 0;
            for i in 1..v.len() {
                if v[i] > v[best] {
                    best = i;
                }
            }
            best
        };
        let prod: Vec<f64> = conf.iter().zip(&iou_pred).map(|(a, b)| a * b).collect();
        assert_eq!(selection_ablation(&p, SelectionMode::ConfOnly).unwrap(), scan(&conf));
        assert_eq!(selection_ablation(&p, SelectionMode::IouOnly).unwrap(), scan(&iou_pred));
        assert_eq!(selection_ablation(&p, SelectionMode::Product).unwrap(), scan(&prod));
        assert_eq!(
            selection_ablation(&p, SelectionMode::Product).unwrap(),
            select_mask(&p).unwrap().0
        );
    }
}

#[test]
fn repicks_counted_when_better_proposal_is_skipped() {
    // proposal 0 is confident but poor; proposal 1 matches and says so
    struct TwoWay;
    impl ProposalModel<f64> for TwoWay {
        fn propose(&self, _: &Tensor<f64>, _: &[Click], _: &Tensor<f64>) -> Result<Proposals<f64>> {
            Ok(to_proposals(&[partial(50), partial(95)], vec![0.9, 0.6], vec![0.4, 0.95]))
        }
    }
    let cfg = |mode| EvalConfig {
        selection_mode: mode,
        max_clicks: 4,
        k_list: vec![1],
        ..EvalConfig::default()
    };
    let conf = evaluate_instance(&TwoWay, &image(0), &gt(), &cfg(SelectionMode::ConfOnly)).unwrap();
    let iou_only = evaluate_instance(&TwoWay, &image(0), &gt(), &cfg(SelectionMode::IouOnly)).unwrap();
    assert_eq!(conf.repicks, 4);
    assert_eq!(conf.selected, vec![0; 4]);
    assert_eq!(iou_only.repicks, 0);
    assert_eq!(iou_only.noc, vec![1, 1]);
}

#[test]
fn evaluation_is_deterministic() {
    let m = PiClickF32::new(ModelConfig {
        decoder_layers: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let img = Tensor::from_fn(vec![3, 64, 64], |i| ((i * 13) % 11) as f32 / 11.0);
    let g = MaskGrid::from_fn(64, 64, |x, y| (10..40).contains(&x) && (20..50).contains(&y));
    let data = vec![EvalInstance { image: img, gt: g }];
    let cfg = EvalConfig {
        max_clicks: 4,
        k_list: vec![1, 2],
        ..EvalConfig::default()
    };
    let a = evaluate_dataset(&m, &data, &cfg).unwrap();
    let b = evaluate_dataset(&m, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.instances[0].ious.len() <= 4);
}
