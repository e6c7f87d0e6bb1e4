use std::cell::RefCell;

use piclick_core::mask::Components;
use piclick_core::model::ProposalModel;
use piclick_core::simulate::*;
use piclick_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> MaskGrid {
    MaskGrid::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
}

#[test]
fn single_click_is_positive_inside() {
    let m = rect(10, 10, 2, 3, 7, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..100 {
        let c = random_clicks(&m, &[m.clone()], 1, &SimulationConfig::default(), &mut rng).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].polarity.is_positive());
        assert!(m.get(c[0].x, c[0].y));
        assert_eq!(c[0].order, 0);
    }
}

#[test]
fn full_mask_gives_only_positive_clicks() {
    let m = MaskGrid::full(6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let c = random_clicks(&m, &[m.clone()], 5, &SimulationConfig::default(), &mut rng).unwrap();
    assert_eq!(c.len(), 5);
    assert!(c.iter().all(|c| c.polarity.is_positive()));
}

#[test]
fn empty_primary_is_an_invalid_sample() {
    let m = MaskGrid::empty(4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    assert!(matches!(
        random_clicks(&m, &[], 2, &SimulationConfig::default(), &mut rng),
        Err(Error::InvalidSample(_))
    ));
}

#[test]
fn random_clicks_are_consistent_and_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cfg = SimulationConfig::default();
    for _ in 0..200 {
        let x0 = rng.gen_range(0..10);
        let y0 = rng.gen_range(0..10);
        let m = rect(16, 16, x0, y0, x0 + rng.gen_range(1..6), y0 + rng.gen_range(1..6));
        let n = rng.gen_range(1..=10);
        let clicks = random_clicks(&m, &[m.clone()], n, &cfg, &mut rng).unwrap();
        assert!(!clicks.is_empty() && clicks.len() <= n);
        for (i, c) in clicks.iter().enumerate() {
            assert_eq!(c.order, i);
            assert_eq!(m.get(c.x, c.y), c.polarity.is_positive());
            for d in &clicks[..i] {
                assert_ne!((c.x, c.y), (d.x, d.y));
            }
        }
    }
}

#[test]
fn negatives_can_come_from_other_objects() {
    let primary = rect(12, 12, 0, 0, 4, 4);
    let other = rect(12, 12, 8, 8, 12, 12);
    let cfg = SimulationConfig {
        negative_source: NegativeSource::OtherMasks,
        positive_prob: 0.0,
        ..SimulationConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let clicks = random_clicks(&primary, &[primary.clone(), other.clone()], 8, &cfg, &mut rng).unwrap();
    for c in &clicks[1..] {
        assert!(!c.polarity.is_positive());
        assert!(other.get(c.x, c.y));
    }
}

#[test]
fn first_click_is_uniform_over_the_mask() {
    // an L shape so rows and columns differ in population
    let m = MaskGrid::from_fn(8, 8, |x, y| (x < 3 && y < 7) || (y >= 5 && y < 7 && x < 7));
    let cells: Vec<usize> = (0..64).filter(|i| m.bits()[*i]).collect();
    let mut counts = vec![0usize; 64];
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let trials = 10_000;
    for _ in 0..trials {
        let c = random_clicks(&m, &[m.clone()], 1, &SimulationConfig::default(), &mut rng).unwrap();
        counts[c[0].y * 8 + c[0].x] += 1;
    }
    let expected = trials as f64 / cells.len() as f64;
    let stat: f64 = cells
        .iter()
        .map(|i| (counts[*i] as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new((cells.len() - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}");
    assert_eq!(cells.iter().map(|i| counts[*i]).sum::<usize>(), trials);
}

#[test]
fn centre_first_click_is_deterministic() {
    let m = rect(11, 11, 3, 3, 8, 8);
    let cfg = SimulationConfig {
        center_first_click: true,
        ..SimulationConfig::default()
    };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clicks = random_clicks(&m, &[m.clone()], 3, &cfg, &mut rng).unwrap();
        assert_eq!((clicks[0].x, clicks[0].y, clicks[0].order), (5, 5, 0));
        assert!(clicks[0].polarity.is_positive());
        assert_eq!(clicks.len(), 3);
        for c in &clicks[1..] {
            assert_eq!(m.get(c.x, c.y), c.polarity.is_positive());
            assert!((c.x, c.y) != (5, 5));
        }
    }
}

#[test]
fn next_click_centres_on_square() {
    let gt = rect(11, 11, 3, 3, 8, 8);
    let c = next_click(&MaskGrid::empty(11, 11), &gt, 0).unwrap();
    assert_eq!((c.x, c.y), (5, 5));
    assert!(c.polarity.is_positive());
}

#[test]
fn next_click_on_single_extra_pixel() {
    let gt = rect(9, 9, 2, 2, 6, 6);
    let mut pred = gt.clone();
    pred.set(8, 0, true);
    let c = next_click(&pred, &gt, 4).unwrap();
    assert_eq!((c.x, c.y, c.order), (8, 0, 4));
    assert!(!c.polarity.is_positive());
}

#[test]
fn next_click_prefers_larger_error() {
    let gt = rect(12, 12, 0, 0, 3, 3).or(&rect(12, 12, 8, 8, 10, 10));
    let c = next_click(&MaskGrid::empty(12, 12), &gt, 0).unwrap();
    assert!(c.x < 3 && c.y < 3);
    assert_eq!((c.x, c.y), (1, 1));
}

#[test]
fn next_click_without_errors_signals() {
    let gt = rect(5, 5, 1, 1, 3, 3);
    assert!(matches!(next_click(&gt, &gt, 0), Err(Error::NoError)));
}

/// Union-find labelling, first-pixel order.
fn brute_largest(err: &MaskGrid) -> MaskGrid {
    let (w, h) = (err.width(), err.height());
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !err.get(x, y) {
                continue;
            }
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < w && ny < h && err.get(nx, ny) {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny * w + nx);
                    let (lo, hi) = (a.min(b), a.max(b));
                    parent[hi] = lo;
                }
            }
        }
    }
    let roots: Vec<usize> = (0..w * h)
        .map(|i| if err.bits()[i] { find(&mut parent, i) } else { usize::MAX })
        .collect();
    let mut best = (usize::MAX, 0usize);
    for r in roots.iter().filter(|r| **r != usize::MAX) {
        let size = roots.iter().filter(|q| *q == r).count();
        if size > best.1 || (size == best.1 && *r < best.0) {
            best = (*r, size);
        }
    }
    MaskGrid::from_bits(w, h, roots.iter().map(|r| *r == best.0).collect())
}

fn brute_deepest(region: &MaskGrid) -> (usize, usize) {
    let (w, h) = (region.width() as i64, region.height() as i64);
    let mut best = ((0, 0), -1i64);
    for y in 0..h {
        for x in 0..w {
            if !region.get(x as usize, y as usize) {
                continue;
            }
            let mut d = i64::MAX;
            for qy in -1..=h {
                for qx in -1..=w {
                    let outside = qx < 0 || qy < 0 || qx >= w || qy >= h || !region.get(qx as usize, qy as usize);
                    if outside {
                        d = d.min((qx - x).pow(2) + (qy - y).pow(2));
                    }
                }
            }
            if d > best.1 {
                best = ((x as usize, y as usize), d);
            }
        }
    }
    best.0
}

#[test]
fn next_click_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..150 {
        let w = rng.gen_range(2..24);
        let h = rng.gen_range(2..24);
        let fill = rng.gen_range(0.2..0.8);
        let gt = MaskGrid::from_fn(w, h, |_, _| rng.gen_bool(fill));
        let pred = MaskGrid::from_fn(w, h, |_, _| rng.gen_bool(fill));
        let err = pred.xor(&gt);
        if err.is_empty() {
            continue;
        }
        let region = brute_largest(&err);
        let comps = Components::of(&err);
        assert_eq!(comps.mask_of(comps.largest().unwrap()), region);
        let c = next_click(&pred, &gt, 0).unwrap();
        assert_eq!((c.x, c.y), brute_deepest(&region));
        assert_ne!(pred.get(c.x, c.y), gt.get(c.x, c.y));
        assert_eq!(c.polarity.is_positive(), gt.get(c.x, c.y));
    }
}

/// Returns a fixed list of proposal sets, one per call, and records the calls.
struct Scripted {
    steps: Vec<Vec<MaskGrid>>,
    calls: RefCell<Vec<(Vec<Click>, Vec<f64>)>>,
}

impl ProposalModel<f64> for Scripted {
    fn propose(&self, _image: &Tensor<f64>, clicks: &[Click], prev: &Tensor<f64>) -> Result<Proposals<f64>> {
        let k = self.calls.borrow().len();
        self.calls.borrow_mut().push((clicks.to_vec(), prev.data().to_vec()));
        let masks = &self.steps[k.min(self.steps.len() - 1)];
        let (w, h) = (masks[0].width(), masks[0].height());
        let data = masks
            .iter()
            .flat_map(|m| m.bits().iter().map(|b| if *b { 4.0 } else { -4.0 }))
            .collect();
        Ok(Proposals {
            mask_logits: Tensor::new(vec![masks.len(), h, w], data),
            conf: vec![0.5; masks.len()],
            iou_pred: vec![0.5; masks.len()],
        })
    }
}

#[test]
fn scripted_trajectory_is_reproduced() {
    let gt = rect(12, 12, 2, 2, 8, 8);
    let left = rect(12, 12, 2, 2, 5, 8);
    let mut extra = gt.clone();
    extra.set(0, 0, true);
    let model = Scripted {
        steps: vec![vec![MaskGrid::empty(12, 12), left.clone()], vec![extra.clone(), MaskGrid::empty(12, 12)]],
        calls: RefCell::new(Vec::new()),
    };
    let cfg = SimulationConfig {
        n_init: (1, 1),
        n_inter: (2, 2),
        prev_mask_policy: PrevMaskPolicy::LargestIou,
        ..SimulationConfig::default()
    };
    let image = Tensor::zeros(vec![3, 12, 12]);
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let out = simulate_iteration(&model, &image, &[gt.clone()], 0, &cfg, &mut rng).unwrap();
    assert_eq!(out.clicks.len(), 3);
    assert!(out.clicks[0].polarity.is_positive() && gt.get(out.clicks[0].x, out.clicks[0].y));
    // the right half 5..8 × 2..8 is missing: its deepest lowest point is (6, 3)
    assert_eq!(out.clicks[1], Click::positive(6, 3, 1));
    assert_eq!(out.clicks[2], Click::negative(0, 0, 2));
    let calls = model.calls.borrow();
    assert!(calls[0].1.iter().all(|v| *v == 0.0));
    // second call sees the first chosen mask as probabilities
    let sig4 = 1.0 / (1.0 + (-4.0f64).exp());
    assert_eq!(calls[1].1[2 * 12 + 2], sig4);
    assert_eq!(out.prev_mask.data()[0], sig4);
    assert_eq!(out.interactions, 2);

    let model2 = Scripted {
        steps: model.steps.clone(),
        calls: RefCell::new(Vec::new()),
    };
    let again = simulate_iteration(&model2, &image, &[gt], 0, &cfg, &mut ChaCha8Rng::seed_from_u64(37)).unwrap();
    assert_eq!(again, out);
}

#[test]
fn zero_interactions_leave_prev_mask_empty() {
    let gt = rect(10, 10, 1, 1, 6, 6);
    let model = Scripted {
        steps: vec![vec![gt.clone()]],
        calls: RefCell::new(Vec::new()),
    };
    let cfg = SimulationConfig {
        n_inter: (0, 0),
        ..SimulationConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let out = simulate_iteration(&model, &Tensor::zeros(vec![3, 10, 10]), &[gt.clone()], 0, &cfg, &mut rng).unwrap();
    assert!(out.prev_mask.data().iter().all(|v| *v == 0.0));
    assert!(model.calls.borrow().is_empty());
    for c in &out.clicks {
        assert_eq!(gt.get(c.x, c.y), c.polarity.is_positive());
    }
}

#[test]
fn simulated_clicks_respect_primary_under_both_policies() {
    let gt = rect(16, 16, 3, 3, 11, 12);
    let other = rect(16, 16, 0, 0, 16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    for policy in [PrevMaskPolicy::Random, PrevMaskPolicy::LargestIou] {
        let cfg = SimulationConfig {
            prev_mask_policy: policy,
            ..SimulationConfig::default()
        };
        for _ in 0..30 {
            let steps = (0..4)
                .map(|_| (0..3).map(|_| MaskGrid::from_fn(16, 16, |_, _| rng.gen_bool(0.5))).collect())
                .collect();
            let model = Scripted {
                steps,
                calls: RefCell::new(Vec::new()),
            };
            let out = simulate_iteration(&model, &Tensor::zeros(vec![3, 16, 16]), &[gt.clone(), other.clone()], 0, &cfg, &mut rng).unwrap();
            for c in &out.clicks {
                assert_eq!(gt.get(c.x, c.y), c.polarity.is_positive());
            }
        }
    }
}
