use std::collections::BTreeSet;
use std::fs;

use gkde_core::eval::{evaluate_bank, IncrementalEvaluator};
use gkde_core::network::{AdamConfig, AdamState, NetworkConfig, NetworkParams};
use gkde_core::objective::{gkde_loss_value, loss_and_gradients, LossConfig};
use gkde_core::pdf::{build_task_pdfs, AnchorConfig};
use gkde_core::kde::KernelSpec;
use gkde_core::rng::seeded;
use gkde_core::stream::{blob_centers, ingest_csv, synth_blobs, write_csv, BlobConfig, CsvOptions, TaskPartition};
use gkde_core::tensor::{sq_distance, Tensor};
use gkde_core::train::{train_stream, TrainConfig};
use gkde_core::Error;
use rand::Rng;

fn quick() -> TrainConfig {
    TrainConfig {
        embed_dim: 8,
        anchors_per_class: 100,
        hidden: vec![16],
        ..TrainConfig::default()
    }
}

#[test]
fn one_separable_task_beats_the_nearest_center_floor() {
    let blobs = BlobConfig::new(1, 3, 6, 10.0, 21);
    let stream = synth_blobs(&blobs).unwrap();
    let report = train_stream(&stream, &quick()).unwrap();
    assert_eq!(report.bank.len(), 1);

    let centers = blob_centers(3, 6, 10.0, blobs.center_spread, gkde_core::rng::derive_seed(21, 0)).unwrap();
    let test = stream.tasks()[0].test();
    let nearest = (0..test.len())
        .filter(|&i| {
            let best = (0..3)
                .min_by(|&a, &b| sq_distance(test.row(i), &centers[a]).total_cmp(&sq_distance(test.row(i), &centers[b])))
                .unwrap();
            best as u32 == test.labels()[i]
        })
        .count() as f64
        / test.len() as f64;
    let acc = report.average_accuracy().unwrap();
    assert!(acc >= 0.99, "{acc}");
    assert!(acc >= nearest - 1e-12, "{acc} < {nearest}");
    assert_eq!(report.stages[0].tp_acc, 1.0);
}

#[test]
fn matrix_shape_and_metric_bounds() {
    let stream = synth_blobs(&BlobConfig::new(5, 2, 8, 8.0, 4)).unwrap();
    let r = train_stream(&stream, &quick()).unwrap();
    assert_eq!(r.matrix.tasks(), 5);
    assert_eq!(r.matrix.rows()[4].len(), 5);
    let acc = r.average_accuracy().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(r.average_forgetting().unwrap() >= 0.0);
    for s in &r.stages {
        assert!(s.overall_acc <= s.tp_acc + 1e-12);
    }
}

#[test]
fn runs_are_deterministic() {
    let cfg = BlobConfig::new(3, 2, 5, 6.0, 9);
    let a = train_stream(&synth_blobs(&cfg).unwrap(), &quick()).unwrap();
    let b = train_stream(&synth_blobs(&cfg).unwrap(), &quick()).unwrap();
    assert_eq!(a.bank, b.bank);
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.stages, b.stages);
    let other = TrainConfig { seed: 1, ..quick() };
    assert_ne!(train_stream(&synth_blobs(&cfg).unwrap(), &other).unwrap().bank, a.bank);
}

#[test]
fn earlier_entries_stay_byte_identical() {
    let stream = synth_blobs(&BlobConfig::new(2, 2, 4, 6.0, 3)).unwrap();
    let two = train_stream(&stream, &quick()).unwrap();
    let first_only = gkde_core::stream::TaskStream::new(vec![stream.tasks()[0].clone()]).unwrap();
    let one = train_stream(&first_only, &quick()).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    one.bank.save(d1.path()).unwrap();
    two.bank.save(d2.path()).unwrap();
    let name = "task_000001.bin";
    assert_eq!(fs::read(d1.path().join(name)).unwrap(), fs::read(d2.path().join(name)).unwrap());
}

#[test]
fn each_entry_classifies_its_own_task() {
    let stream = synth_blobs(&BlobConfig::new(4, 2, 6, 3.0, 8)).unwrap();
    let r = train_stream(&stream, &quick()).unwrap();
    for (j, task) in stream.tasks().iter().enumerate() {
        let entry = &r.bank.entries()[j];
        let x = task.test().tensor().unwrap();
        let z = entry.params().embed(&x).unwrap();
        let correct = (0..x.rows())
            .filter(|&i| entry.classify(z.row(i), r.bank.clip()).unwrap().label == task.test().labels()[i])
            .count();
        assert!(correct as f64 / x.rows() as f64 >= 0.9);
    }
}

#[test]
fn incremental_evaluation_matches_the_bank() {
    let stream = synth_blobs(&BlobConfig::new(4, 2, 6, 4.0, 12)).unwrap();
    let r = train_stream(&stream, &quick()).unwrap();
    let mut ev = IncrementalEvaluator::new(&stream, r.bank.clip());
    for k in 0..r.bank.len() {
        ev.absorb(&r.bank.entries()[..=k]).unwrap();
        let prefix = r.bank.prefix(k + 1);
        for j in 0..=k {
            let x = stream.tasks()[j].test().tensor().unwrap();
            let direct: Vec<_> = prefix.predict_batch(&x).unwrap().iter().map(|p| (p.task_id, p.class_label)).collect();
            assert_eq!(ev.predictions(j).unwrap(), direct, "after task {k}, test set {j}");
        }
    }
    let (m, stages) = evaluate_bank(r.bank.entries(), r.bank.clip(), &stream).unwrap();
    assert_eq!(m, r.matrix);
    assert_eq!(stages, r.stages);
}

#[test]
fn evaluation_rejects_mismatched_banks() {
    let stream = synth_blobs(&BlobConfig::new(2, 2, 4, 6.0, 3)).unwrap();
    let other = synth_blobs(&BlobConfig::new(2, 3, 4, 6.0, 3)).unwrap();
    let r = train_stream(&other, &quick()).unwrap();
    assert!(matches!(evaluate_bank(r.bank.entries(), r.bank.clip(), &stream), Err(Error::Contract(_))));
}

#[test]
fn csv_partition_recount() {
    let stream = synth_blobs(&BlobConfig::new(5, 2, 3, 6.0, 17)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ten.csv");
    write_csv(&stream, &path).unwrap();
    let part = TaskPartition {
        tasks: vec![vec![9, 0], vec![1, 8], vec![2, 7], vec![3, 6], vec![4, 5]],
    };
    let s = ingest_csv(&path, &CsvOptions::default(), &part, 1).unwrap();

    let text = fs::read_to_string(&path).unwrap();
    let raw: Vec<u32> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let mut seen = BTreeSet::new();
    for (task, labels) in s.tasks().iter().zip(&part.tasks) {
        let mut expect = labels.clone();
        expect.sort();
        assert_eq!(task.label_set(), &expect[..]);
        for l in task.label_set() {
            assert!(seen.insert(*l));
        }
        let rows = raw.iter().filter(|l| labels.contains(l)).count();
        assert_eq!(task.train().len() + task.test().len(), rows);
    }
}

#[test]
fn one_adam_step_descends() {
    let mut rng = seeded(2);
    for trial in 0..10u64 {
        let cfg = NetworkConfig {
            hidden: vec![5],
            ..NetworkConfig::new(3, 2)
        };
        let net = NetworkParams::init(&cfg, trial).unwrap();
        let x = Tensor::matrix(8, 3, (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels: Vec<u32> = (0..8).map(|i| i % 2).collect();
        let z = net.embed(&x).unwrap();
        let pdfs = build_task_pdfs(&z, &labels, KernelSpec::new(2, 0.5).unwrap(), &AnchorConfig::new(6), trial).unwrap();
        let loss_cfg = LossConfig::default();
        let (before, grads) = loss_and_gradients(&net, &pdfs, &x, &labels, &loss_cfg).unwrap();
        let mut stepped = net.clone();
        let adam = AdamConfig {
            learning_rate: 1e-6,
            ..AdamConfig::default()
        };
        AdamState::new(adam, &net).unwrap().step(&mut stepped, &grads).unwrap();
        let after = gkde_loss_value(&pdfs, &stepped.embed(&x).unwrap(), &labels, &loss_cfg).unwrap();
        assert!(after < before, "trial {trial}: {after} >= {before}");
    }
}

#[test]
fn loss_is_replayable() {
    let cfg = NetworkConfig::new(4, 3);
    let net = NetworkParams::init(&cfg, 5).unwrap();
    let x = Tensor::matrix(6, 4, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let labels = [0, 1, 0, 1, 1, 0];
    let pdfs = build_task_pdfs(&net.embed(&x).unwrap(), &labels, KernelSpec::new(3, 0.5).unwrap(), &AnchorConfig::new(4), 1).unwrap();
    let a = loss_and_gradients(&net, &pdfs, &x, &labels, &LossConfig::default()).unwrap();
    let b = loss_and_gradients(&net, &pdfs, &x, &labels, &LossConfig::default()).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}
