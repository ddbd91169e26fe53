use mtlab::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use mtlab::diagnostics::TraceMode;
use mtlab::model::{Group, LayerSpec, UpsampleSpec};
use mtlab::tasks::{
    gen_classification_task, gen_segmentation_task, sample_batch, ClassificationParams, SegmentationParams,
    ShapeStyle, Split, TaskDataset, TaskKind,
};
use mtlab::trainer::{
    build_model, evaluate, iteration_rng, sample_task, train, train_step, ArchSpec, MultiTaskModel, Optimizers,
    SamplerConfig, Session, TrainConfig, TrainLog,
};
use mtlab::FormatError;

/// Regularised lower incomplete gamma P(a, x) by its power series.
fn lower_gamma_p(a: f64, x: f64) -> f64 {
    let (mut term, mut sum) = (1.0 / a, 1.0 / a);
    for n in 1..500 {
        term *= x / (a + n as f64);
        sum += term;
    }
    let ln_gamma = |z: f64| {
        // Lanczos approximation, g = 7.
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let z = z - 1.0;
        let mut s = C[0];
        for (i, c) in C.iter().enumerate().skip(1) {
            s += c / (z + i as f64);
        }
        let t = z + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + s.ln()
    };
    (sum.ln() + a * x.ln() - x - ln_gamma(a)).exp()
}

fn chi2_cdf(x: f64, dof: usize) -> f64 {
    lower_gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// 0.999 quantiles of the chi-square distribution for 10 and 2 dof.
const CHI2_999_DOF10: f64 = 29.588;
const CHI2_999_DOF2: f64 = 13.816;

#[test]
fn chi_square_quantiles_are_correct() {
    assert!((chi2_cdf(CHI2_999_DOF10, 10) - 0.999).abs() < 1e-5);
    assert!((chi2_cdf(CHI2_999_DOF2, 2) - 0.999).abs() < 1e-5);
}

fn frequencies(alpha: &SamplerConfig, draws: usize, seed: u64) -> Vec<usize> {
    let mut rng = iteration_rng(seed, 0);
    let mut counts = vec![0; alpha.k()];
    for _ in 0..draws {
        counts[sample_task(alpha, &mut rng)] += 1;
    }
    counts
}

fn chi_square(counts: &[usize], alpha: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    counts.iter().zip(alpha).map(|(&c, &p)| (c as f64 - n as f64 * p).powi(2) / (n as f64 * p)).sum()
}

#[test]
fn sampler_frequencies() {
    let half = SamplerConfig::uniform(2).unwrap();
    for c in frequencies(&half, 100_000, 3) {
        let f = c as f64 / 1e5;
        assert!((0.49..=0.51).contains(&f), "{f}");
    }
    let eleven = SamplerConfig::uniform(11).unwrap();
    for c in frequencies(&eleven, 1_000_000, 4) {
        assert!((c as f64 / 1e6 - 1.0 / 11.0).abs() <= 0.005);
    }
}

#[test]
fn sampler_chi_square() {
    for (alpha, quantile) in [
        (SamplerConfig::uniform(11).unwrap(), CHI2_999_DOF10),
        (SamplerConfig::new(&[0.5, 0.3, 0.2]).unwrap(), CHI2_999_DOF2),
    ] {
        let failures = (0..20).filter(|&s| chi_square(&frequencies(&alpha, 100_000, s), alpha.alpha()) >= quantile).count();
        assert!(failures <= 1, "{failures} failures for α = {:?}", alpha.alpha());
    }
}

fn small_arch() -> ArchSpec {
    ArchSpec {
        encoder: vec![LayerSpec::conv(3, 4, 3, 1, 1), LayerSpec::relu(), LayerSpec::GlobalAvgPool],
        segmentation_head: UpsampleSpec::new(Vec::new(), 4),
    }
}

fn cls_task(id: u32, k: usize, seed: u64) -> TaskDataset {
    gen_classification_task(&ClassificationParams {
        id,
        name: format!("cls{id}"),
        num_classes: k,
        input_shape: [3, 8, 8],
        n_train: 24,
        n_eval: 12,
        difficulty: 0.0,
        seed,
    })
    .unwrap()
}

fn seg_task(id: u32, kind: TaskKind, size: usize, seed: u64) -> TaskDataset {
    gen_segmentation_task(&SegmentationParams {
        id,
        name: format!("seg{id}"),
        kind,
        image_size: size,
        channels: 3,
        max_instances: 3,
        num_classes: 2,
        shapes: ShapeStyle::Mixed,
        n_train: 16,
        n_eval: 8,
        seed,
    })
    .unwrap()
}

fn three_tasks() -> Vec<TaskDataset> {
    vec![
        cls_task(0, 3, 1),
        seg_task(1, TaskKind::BinarySegmentation, 8, 2),
        seg_task(2, TaskKind::InstanceSegmentation, 8, 3),
    ]
}

fn model_for(tasks: &[TaskDataset], seed: u64) -> MultiTaskModel {
    let specs: Vec<_> = tasks.iter().map(|t| t.spec.clone()).collect();
    build_model(&specs, &small_arch(), seed).unwrap()
}

fn group_bytes(model: &MultiTaskModel, group: Group) -> Vec<u64> {
    model.store.flatten_group(group).iter().map(|v| v.to_bits()).collect()
}

#[test]
fn decoder_isolation_and_encoder_sharing() {
    let tasks = three_tasks();
    let sampler = SamplerConfig::uniform(3).unwrap();
    let mut session = Session::new(model_for(&tasks, 0), Default::default(), 11).unwrap();
    let mut seen = [false; 3];
    for _ in 0..100 {
        let before: Vec<_> = (0..3).map(|i| group_bytes(&session.model, Group::Decoder(i))).collect();
        let enc_before = group_bytes(&session.model, Group::Encoder);
        let (rec, grad) = session.step(&tasks, &sampler, 4).unwrap();
        seen[rec.task] = true;
        for (j, b) in before.iter().enumerate() {
            let after = group_bytes(&session.model, Group::Decoder(j));
            if j == rec.task {
                assert_ne!(&after, b, "sampled decoder {j} did not move");
            } else {
                assert_eq!(&after, b, "decoder {j} changed at t = {}", rec.t);
            }
        }
        if grad.iter().any(|&g| g != 0.0) {
            assert_ne!(group_bytes(&session.model, Group::Encoder), enc_before);
        }
    }
    assert_eq!(seen, [true; 3]);
}

#[test]
fn single_batch_loss_decreases() {
    let tasks = vec![cls_task(0, 2, 5)];
    let mut model = model_for(&tasks, 1);
    let mut optim = Optimizers::new(&model, Default::default()).unwrap();
    let batch = sample_batch(&tasks[0], Split::Train, 8, &mut iteration_rng(0, 0)).unwrap();
    let mut last = f64::INFINITY;
    for step in 0..50 {
        let loss = train_step(&mut model, &mut optim, 0, &batch).unwrap().loss;
        assert!(loss < last, "step {step}: {loss} ≥ {last}");
        last = loss;
    }
}

#[test]
fn zero_iterations_keep_init() {
    let tasks = three_tasks();
    let init = model_for(&tasks, 2);
    let (log, model) = train(&tasks, init.clone(), &SamplerConfig::uniform(3).unwrap(), &TrainConfig::new(0, 0)).unwrap();
    assert!(log.records.is_empty());
    assert_eq!(model.store, init.store);
}

#[test]
fn runs_are_deterministic() {
    let tasks = three_tasks();
    let sampler = SamplerConfig::new(&[0.2, 0.5, 0.3]).unwrap();
    let mut cfg = TrainConfig::new(60, 9);
    cfg.batch_size = 3;
    let a = train(&tasks, model_for(&tasks, 4), &sampler, &cfg).unwrap();
    let b = train(&tasks, model_for(&tasks, 4), &sampler, &cfg).unwrap();
    assert_eq!(a.0.records.len(), 60);
    let bits = |l: &TrainLog| l.records.iter().map(|r| (r.t, r.task, r.loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(a.0.trace, b.0.trace);
    assert_eq!(a.1.store, b.1.store);
    assert!(a.0.records.iter().all(|r| r.task < 3));
}

#[test]
fn single_task_run() {
    let tasks = vec![cls_task(0, 3, 8)];
    let cfg = TrainConfig::new(30, 1);
    let (log, _) = train(&tasks, model_for(&tasks, 0), &SamplerConfig::uniform(1).unwrap(), &cfg).unwrap();
    assert!(log.records.iter().all(|r| r.task == 0));
}

#[test]
fn mismatched_suite_is_rejected() {
    let tasks = three_tasks();
    let model = model_for(&tasks, 0);
    let err = train(&tasks, model, &SamplerConfig::uniform(2).unwrap(), &TrainConfig::new(5, 0));
    assert!(err.is_err());
}

#[test]
fn checkpoint_resume_is_exact() {
    let tasks = three_tasks();
    let sampler = SamplerConfig::uniform(3).unwrap();
    let mut cfg = TrainConfig::new(200, 21);
    cfg.batch_size = 2;
    cfg.trace = TraceMode::Off;
    let (_, straight) = train(&tasks, model_for(&tasks, 6), &sampler, &cfg).unwrap();

    let mut first = Session::new(model_for(&tasks, 6), cfg.adam, cfg.seed).unwrap();
    let mut log = TrainLog::new(TraceMode::Off);
    first.run_until(&tasks, &sampler, cfg.batch_size, 100, &mut log, |_, _| Ok(())).unwrap();
    let bytes = encode_checkpoint(&Checkpoint::of(&first, "{}"));
    drop(first);
    let mut resumed = decode_checkpoint(&bytes).unwrap().restore(model_for(&tasks, 999)).unwrap();
    assert_eq!(resumed.next_iter, 100);
    resumed.run_until(&tasks, &sampler, cfg.batch_size, 200, &mut log, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.model.store, straight.store);
    assert_eq!(log.records.len(), 200);
}

#[test]
fn checkpoint_corruption_and_init_roundtrip() {
    let tasks = three_tasks();
    let session = Session::new(model_for(&tasks, 3), Default::default(), 5).unwrap();
    let ck = Checkpoint::of(&session, "meta");
    let bytes = encode_checkpoint(&ck);
    assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 7]), Err(FormatError::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(decode_checkpoint(&bad), Err(FormatError::Version { .. })));
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    assert!(decode_checkpoint(&flipped).is_err());
}

#[test]
fn two_task_suite_reaches_thresholds() {
    let cls = gen_classification_task(&ClassificationParams {
        id: 0,
        name: "cls".into(),
        num_classes: 3,
        input_shape: [3, 32, 32],
        n_train: 128,
        n_eval: 64,
        difficulty: 0.0,
        seed: 17,
    })
    .unwrap();
    let seg = gen_segmentation_task(&SegmentationParams {
        id: 1,
        name: "seg".into(),
        kind: TaskKind::BinarySegmentation,
        image_size: 32,
        channels: 3,
        max_instances: 4,
        num_classes: 1,
        shapes: ShapeStyle::Mixed,
        n_train: 128,
        n_eval: 64,
        seed: 18,
    })
    .unwrap();
    let tasks = vec![cls, seg];
    let specs: Vec<_> = tasks.iter().map(|t| t.spec.clone()).collect();
    let model = build_model(&specs, &ArchSpec::default(), 0).unwrap();
    let mut cfg = TrainConfig::new(2000, 0);
    cfg.trace = TraceMode::Off;
    let (_, model) = train(&tasks, model, &SamplerConfig::uniform(2).unwrap(), &cfg).unwrap();
    let acc = evaluate(&model, 0, &tasks[0]).unwrap().value;
    let pq = evaluate(&model, 1, &tasks[1]).unwrap().value;
    assert!(acc >= 0.85, "accuracy {acc}");
    assert!(pq >= 0.6, "pq {pq}");
}
