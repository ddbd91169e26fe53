use std::collections::BTreeSet;

use mtlab::metrics::panoptic_quality;
use mtlab::model::Targets;
use mtlab::tasks::{
    gen_classification_task, gen_segmentation_task, load_dataset, sample_batch, save_dataset, ClassificationParams,
    SegmentationParams, ShapeStyle, Split, Target, TaskDataset, TaskKind,
};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn classification(k: usize, n_train: usize, n_eval: usize, seed: u64) -> TaskDataset {
    gen_classification_task(&ClassificationParams {
        id: 0,
        name: "probe".into(),
        num_classes: k,
        input_shape: [3, 16, 16],
        n_train,
        n_eval,
        difficulty: 0.0,
        seed,
    })
    .unwrap()
}

fn segmentation(kind: TaskKind, max_instances: usize, n: usize, seed: u64) -> TaskDataset {
    gen_segmentation_task(&SegmentationParams {
        id: 3,
        name: "shapes".into(),
        kind,
        image_size: 24,
        channels: 3,
        max_instances,
        num_classes: 3,
        shapes: ShapeStyle::Mixed,
        n_train: n,
        n_eval: 4,
        seed,
    })
    .unwrap()
}

/// Logistic regression on raw pixels trained by full-batch gradient descent.
#[test]
fn linear_probe_separates_two_classes() {
    let ds = classification(2, 200, 200, 42);
    let xs = |split| -> Vec<(Vec<f64>, f64)> {
        ds.split_indices(split)
            .iter()
            .map(|&i| {
                let e = &ds.examples()[i];
                let Target::Class(l) = e.target else { unreachable!() };
                (e.input.data().to_vec(), l as f64)
            })
            .collect()
    };
    let (train, eval) = (xs(Split::Train), xs(Split::Eval));
    let d = train[0].0.len();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..100 {
        let (mut gw, mut gb) = (vec![0.0; d], 0.0);
        for (x, y) in &train {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        let n = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.01 * g / n;
        }
        b -= 0.01 * gb / n;
    }
    let correct = eval
        .iter()
        .filter(|(x, y)| {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z > 0.0) == (*y == 1.0)
        })
        .count();
    let acc = correct as f64 / eval.len() as f64;
    assert!(acc >= 0.95, "linear probe accuracy {acc}");
}

#[test]
fn generation_is_reproducible_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mtld"), dir.path().join("b.mtld"));
    save_dataset(&a, &segmentation(TaskKind::InstanceSegmentation, 4, 10, 7)).unwrap();
    save_dataset(&b, &segmentation(TaskKind::InstanceSegmentation, 4, 10, 7)).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_dataset(&a).unwrap(), segmentation(TaskKind::InstanceSegmentation, 4, 10, 7));
}

#[test]
fn instances_are_separated() {
    let ds = segmentation(TaskKind::InstanceSegmentation, 5, 1000, 1);
    let mut counts = BTreeSet::new();
    for e in ds.examples() {
        let Target::Mask(m) = &e.target else { unreachable!() };
        let (h, w) = (m.height(), m.width());
        counts.insert(m.instance_ids().len());
        // Distinct instances never touch, even diagonally.
        for y in 0..h {
            for x in 0..w {
                let id = m.ids()[y * w + x];
                if id == 0 {
                    continue;
                }
                for (dy, dx) in [(0, 1), (1, 0), (1, 1), (1, -1)] {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < h as i64 && (0..w as i64).contains(&xx) {
                        let other = m.ids()[yy as usize * w + xx as usize];
                        assert!(other == 0 || other == id);
                    }
                }
            }
        }
        assert_eq!(panoptic_quality(m, m, true).unwrap().pq, if m.instance_ids().is_empty() { 0.0 } else { 1.0 });
    }
    assert!(counts.len() > 2, "instance counts {counts:?}");
}

#[test]
fn single_instance_cap() {
    let ds = segmentation(TaskKind::BinarySegmentation, 1, 200, 2);
    for e in ds.examples() {
        let Target::Mask(m) = &e.target else { unreachable!() };
        assert!(m.instance_ids().len() <= 1);
    }
}

/// Yields draws that make `uniform_index(n)` return 0, 1, …, n−1 in turn.
struct CountingRng {
    n: u128,
    next: u128,
}

impl RngCore for CountingRng {
    fn next_u32(&mut self) -> u32 {
        self.next_u64() as u32
    }

    fn next_u64(&mut self) -> u64 {
        let i = self.next % self.n;
        self.next += 1;
        (((i << 64) + self.n - 1) / self.n) as u64
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for b in dst {
            *b = self.next_u32() as u8;
        }
    }
}

#[test]
fn counting_stub_visits_every_index() {
    let ds = classification(3, 30, 9, 0);
    let pool = ds.split_indices(Split::Train);
    let mut rng = CountingRng { n: pool.len() as u128, next: 0 };
    let batch = sample_batch(&ds, Split::Train, pool.len(), &mut rng).unwrap();
    assert_eq!(batch.indices, pool);
}

#[test]
fn sampled_labels_are_valid() {
    let ds = classification(5, 40, 10, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = 0;
    while seen < 10_000 {
        let b = sample_batch(&ds, Split::Train, 100, &mut rng).unwrap();
        let Targets::Labels(l) = b.targets else { unreachable!() };
        assert!(l.iter().all(|&v| v < 5));
        assert!(b.indices.iter().all(|&i| ds.examples()[i].split == Split::Train));
        seen += l.len();
    }
    let seg = segmentation(TaskKind::InstanceSegmentation, 3, 10, 4);
    let b = sample_batch(&seg, Split::Eval, 10, &mut rng).unwrap();
    let Targets::Labels(l) = b.targets else { unreachable!() };
    assert!(l.iter().all(|&v| v <= 3));
}

#[test]
fn splits_are_disjoint() {
    let ds = classification(4, 20, 8, 9);
    let train: BTreeSet<_> = ds.split_indices(Split::Train).iter().collect();
    let eval: BTreeSet<_> = ds.split_indices(Split::Eval).iter().collect();
    assert!(train.is_disjoint(&eval));
    assert_eq!(train.len() + eval.len(), ds.examples().len());
}
