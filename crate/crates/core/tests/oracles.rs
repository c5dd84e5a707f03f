//! Implementation-independent oracles for the numerical and grouping code.

use std::collections::{HashMap, HashSet};
use std::net::Ipv4Addr;

use iotprint::capture::{
    ethernet_frame, parse_pcap, split_sessions, tcp_flags, FrameSpec, MacAddr, PcapWriter, Timestamp, IPPROTO_TCP,
};
use iotprint::dataset::{label_for_experiment, split, Device, DeviceCorpus, DeviceKind, Scheme};
use iotprint::eval::{
    calibrate_from_probs, classify_with_threshold, threshold_grid, ConfusionMatrix, EvalReport, Verdict,
};
use iotprint::nn::{self, backward, forward, loss, ModelParams, Shape, TrainConfig, INPUT_WIDTH};
use iotprint::transform::{dedupe_and_filter, IdxDataset, PayloadVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_params(shape: Shape, r: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::zeros(shape);
    for x in p.w1.iter_mut().chain(p.w2.iter_mut()) {
        *x = r.random_range(-0.3..0.3);
    }
    for x in p.b1.iter_mut().chain(p.b2.iter_mut()) {
        *x = r.random_range(-0.2..0.2);
    }
    p
}

/// Scalar re-implementation of the forward pass and loss.
fn scalar_loss(p: &ModelParams, x: &Array2<f64>, targets: &[u8]) -> f64 {
    let (hidden, outputs) = (p.w1.nrows(), p.w2.nrows());
    let mut total = 0.0;
    for (b, &y) in targets.iter().enumerate() {
        let mut h = vec![0.0; hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut z = p.b1[j];
            for i in 0..INPUT_WIDTH {
                z += p.w1[[j, i]] * x[[b, i]];
            }
            *hj = if z > 0.0 { z } else { 0.0 };
        }
        let mut z = vec![0.0; outputs];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = p.b2[k];
            for (j, hj) in h.iter().enumerate() {
                *zk += p.w2[[k, j]] * hj;
            }
        }
        total += if outputs == 1 {
            let prob = 1.0 / (1.0 + (-z[0]).exp());
            if y == 1 {
                -prob.ln()
            } else {
                -(1.0 - prob).ln()
            }
        } else {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            -((z[y as usize] - m) - s.ln())
        };
    }
    total / targets.len() as f64
}

#[test]
fn analytic_gradients_match_central_differences() {
    let h = 1e-5;
    for (seed, outputs) in [(1u64, 1usize), (2, 3), (3, 3), (4, 1)] {
        let mut r = rng(seed);
        let p = random_params(Shape { hidden: 4, outputs }, &mut r);
        let x = Array2::from_shape_fn((2, INPUT_WIDTH), |_| r.random_range(0.0..1.0));
        let targets: Vec<u8> = (0..2).map(|_| r.random_range(0..outputs.max(2)) as u8).collect();
        let g = backward(&p, x.view(), &targets).unwrap();

        let mut worst: f64 = 0.0;
        let mut check = |analytic: f64, perturb: &dyn Fn(&mut ModelParams, f64)| {
            let mut plus = p.clone();
            perturb(&mut plus, h);
            let mut minus = p.clone();
            perturb(&mut minus, -h);
            let numeric = (scalar_loss(&plus, &x, &targets) - scalar_loss(&minus, &x, &targets)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        };
        for j in 0..4 {
            for i in 0..INPUT_WIDTH {
                check(g.w1[[j, i]], &|q, d| q.w1[[j, i]] += d);
            }
            check(g.b1[j], &|q, d| q.b1[j] += d);
        }
        for k in 0..outputs {
            for j in 0..4 {
                check(g.w2[[k, j]], &|q, d| q.w2[[k, j]] += d);
            }
            check(g.b2[k], &|q, d| q.b2[k] += d);
        }
        assert!(worst < 1e-4, "outputs={outputs}: worst relative error {worst:e}");
    }
}

#[test]
fn vectorised_loss_matches_scalar_loop() {
    let mut r = rng(9);
    for outputs in [1, 5] {
        let p = random_params(Shape { hidden: 6, outputs }, &mut r);
        let x = Array2::from_shape_fn((7, INPUT_WIDTH), |_| r.random_range(0.0..1.0));
        let t: Vec<u8> = (0..7).map(|_| r.random_range(0..outputs.max(2)) as u8).collect();
        let fwd = forward(&p, x.view()).unwrap();
        assert!((loss(fwd.output.view(), &t) - scalar_loss(&p, &x, &t)).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_are_normalised() {
    let mut r = rng(10);
    let p = random_params(Shape { hidden: 16, outputs: 10 }, &mut r);
    for _ in 0..1000 {
        let rows = r.random_range(1..5);
        let x = Array2::from_shape_fn((rows, INPUT_WIDTH), |_| r.random_range(0.0..1.0));
        let out = forward(&p, x.view()).unwrap().output;
        for row in out.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn batch_prediction_is_row_wise() {
    let mut r = rng(12);
    let p = random_params(Shape { hidden: 8, outputs: 8 }, &mut r);
    let images: Vec<PayloadVector> = (0..5)
        .map(|_| PayloadVector::from_slice(&(0..784).map(|_| r.random()).collect::<Vec<u8>>()).unwrap())
        .collect();
    let batch = nn::predict_batch(&p, &images);
    for (i, img) in images.iter().enumerate() {
        let single = nn::predict(&p, img);
        assert_eq!(single.len(), 8);
        for (a, b) in single.iter().zip(batch.row(i)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

/// Groups packets by comparing each one against every earlier packet.
fn pairwise_groups(packets: &[(Ipv4Addr, u16, Ipv4Addr, u16)]) -> Vec<Vec<usize>> {
    let mut rep = vec![usize::MAX; packets.len()];
    for i in 0..packets.len() {
        let (a, ap, b, bp) = packets[i];
        for j in 0..i {
            let (c, cp, d, dp) = packets[j];
            let same = (a, ap, b, bp) == (c, cp, d, dp) || (a, ap, b, bp) == (d, dp, c, cp);
            if same {
                rep[i] = rep[j];
                break;
            }
        }
        if rep[i] == usize::MAX {
            rep[i] = i;
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for (i, &r) in rep.iter().enumerate() {
        let s = *slot.entry(r).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[s].push(i);
    }
    groups
}

#[test]
fn session_split_matches_pairwise_oracle() {
    for seed in 0..50u64 {
        let mut r = rng(100 + seed);
        let conns: Vec<(Ipv4Addr, u16, Ipv4Addr, u16)> = (0..10)
            .map(|_| {
                (
                    Ipv4Addr::new(10, 0, 0, r.random_range(1..4)),
                    r.random_range(1000..1004),
                    Ipv4Addr::new(10, 0, 0, r.random_range(1..4)),
                    r.random_range(1000..1004),
                )
            })
            .collect();
        let mut tuples = Vec::new();
        let mut w = PcapWriter::new(Vec::new()).unwrap();
        for i in 0..200 {
            let (a, ap, b, bp) = conns[r.random_range(0..conns.len())];
            let t = if r.random_bool(0.5) { (a, ap, b, bp) } else { (b, bp, a, ap) };
            tuples.push(t);
            let payload: Vec<u8> = (0..r.random_range(0..20)).map(|_| r.random()).collect();
            let frame = ethernet_frame(&FrameSpec {
                src_mac: MacAddr([2, 0, 0, 0, 0, t.0.octets()[3]]),
                dst_mac: MacAddr([2, 0, 0, 0, 0, t.2.octets()[3]]),
                src_ip: t.0,
                dst_ip: t.2,
                src_port: t.1,
                dst_port: t.3,
                protocol: IPPROTO_TCP,
                tcp_flags: tcp_flags::ACK,
                seq: i,
                ack: 0,
                payload: &payload,
            });
            w.write_frame(Timestamp { secs: i as u64, nanos: 0 }, &frame).unwrap();
        }
        let capture = parse_pcap(&w.into_inner()[..]).unwrap();
        assert_eq!(capture.packets.len(), 200);
        let sessions = split_sessions(capture.packets);
        let got: Vec<Vec<usize>> = sessions
            .values()
            .map(|s| s.packets.iter().map(|p| p.capture_index as usize).collect())
            .collect();
        assert_eq!(got, pairwise_groups(&tuples), "seed {seed}");
        for s in sessions.values() {
            let first = &s.packets[0];
            assert_eq!(s.initiator_mac, first.src_mac);
            assert!(s.packets.iter().all(|p| p.session_key() == s.key));
        }
    }
}

#[test]
fn dedupe_matches_hash_set_oracle() {
    let mut r = rng(77);
    let mut payloads: Vec<Vec<u8>> = (0..900)
        .map(|i| {
            let mut p: Vec<u8> = (0..r.random_range(1..64)).map(|_| r.random()).collect();
            p.extend_from_slice(&(i as u32).to_le_bytes());
            p
        })
        .collect();
    for _ in 0..100 {
        let src = payloads[r.random_range(0..900)].clone();
        let at = r.random_range(0..=payloads.len());
        payloads.insert(at, src);
    }
    let mut seen = HashSet::new();
    let oracle: Vec<Vec<u8>> = payloads.iter().filter(|p| seen.insert((*p).clone())).cloned().collect();
    let got = dedupe_and_filter(payloads);
    assert_eq!(got.len(), 900);
    assert_eq!(got, oracle);
}

fn random_confusion(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u64>> {
    (0..n)
        .map(|_| (0..n).map(|_| if r.random_bool(0.2) { 0 } else { r.random_range(0..50) }).collect())
        .collect()
}

#[test]
fn metrics_match_direct_formulas() {
    let mut r = rng(5);
    for trial in 0..200 {
        let n = r.random_range(2..7);
        let rows = random_confusion(&mut r, n);
        let report = EvalReport::from_confusion((0..n).map(|i| i.to_string()).collect(), ConfusionMatrix::from_rows(&rows));
        let total: u64 = rows.iter().flatten().sum();
        let mut wp = 0.0;
        let mut wr = 0.0;
        let mut wf = 0.0;
        for c in 0..n {
            let tp = rows[c][c] as f64;
            let actual: u64 = rows[c].iter().sum();
            let predicted: u64 = rows.iter().map(|row| row[c]).sum();
            let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let rc = if actual == 0 { 0.0 } else { tp / actual as f64 };
            let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
            let m = &report.per_class[c];
            assert!((m.precision - p).abs() < 1e-12, "trial {trial}");
            assert!((m.recall - rc).abs() < 1e-12);
            assert!((m.f1 - f).abs() < 1e-12);
            assert_eq!(m.support, actual);
            wp += p * actual as f64;
            wr += rc * actual as f64;
            wf += f * actual as f64;
        }
        if total > 0 {
            let trace: u64 = (0..n).map(|c| rows[c][c]).sum();
            assert!((report.accuracy - trace as f64 / total as f64).abs() < 1e-12);
            assert!((report.weighted_avg.precision - wp / total as f64).abs() < 1e-12);
            assert!((report.weighted_avg.recall - wr / total as f64).abs() < 1e-12);
            assert!((report.weighted_avg.f1 - wf / total as f64).abs() < 1e-12);
        }
    }
}

fn random_probs(r: &mut ChaCha8Rng, width: usize, peak: f64) -> Vec<f64> {
    let mut raw: Vec<f64> = (0..width).map(|_| r.random_range(0.0..1.0)).collect();
    let k = r.random_range(0..width);
    raw[k] += peak * r.random_range(0.0..1.0) * width as f64;
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

type Pool = (Vec<(Vec<f64>, u8)>, Vec<Vec<f64>>);

fn random_pool(r: &mut ChaCha8Rng) -> Pool {
    let width = r.random_range(2..9);
    let known = (0..r.random_range(0..60))
        .map(|_| (random_probs(r, width, 3.0), r.random_range(0..width) as u8))
        .collect();
    let unknown = (0..r.random_range(1..40)).map(|_| random_probs(r, width, 0.5)).collect();
    (known, unknown)
}

/// Accuracy at each grid threshold via sorted max-scores and binary search.
fn sorted_score_accuracy(known: &[(Vec<f64>, u8)], unknown: &[Vec<f64>], t: f64) -> f64 {
    let max = |p: &Vec<f64>| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let argmax = |p: &Vec<f64>| {
        let m = max(p);
        p.iter().position(|&v| v == m).unwrap()
    };
    let mut good_known: Vec<f64> = known.iter().filter(|(p, y)| argmax(p) == *y as usize).map(|(p, _)| max(p)).collect();
    let mut unk: Vec<f64> = unknown.iter().map(max).collect();
    good_known.sort_by(f64::total_cmp);
    unk.sort_by(f64::total_cmp);
    // known correct iff score > t; unknown correct iff score <= t
    let known_ok = good_known.len() - good_known.partition_point(|&s| s <= t);
    let unknown_ok = unk.partition_point(|&s| s <= t);
    (known_ok + unknown_ok) as f64 / (known.len() + unknown.len()) as f64
}

#[test]
fn calibration_matches_sorted_score_oracle() {
    let grid = threshold_grid(100);
    let mut r = rng(21);
    for _ in 0..100 {
        let (known, unknown) = random_pool(&mut r);
        let got = calibrate_from_probs(&known, &unknown, &grid).unwrap();
        let mut best = (f64::NAN, -1.0);
        for &t in &grid {
            let acc = sorted_score_accuracy(&known, &unknown, t);
            if acc > best.1 {
                best = (t, acc);
            }
        }
        assert_eq!(got.threshold, best.0);
        assert!((got.achieved_validation_accuracy - best.1).abs() < 1e-12);
        for &t in &grid {
            assert!(got.achieved_validation_accuracy >= sorted_score_accuracy(&known, &unknown, t));
        }

        // Exhaustive optimum over every distinct score (and 0): the grid can
        // only match or trail it.
        let mut candidates: Vec<f64> = known
            .iter()
            .map(|(p, _)| p.clone())
            .chain(unknown.iter().cloned())
            .map(|p| p.iter().cloned().fold(0.0, f64::max))
            .collect();
        candidates.push(0.0);
        let exhaustive = candidates
            .iter()
            .map(|&t| sorted_score_accuracy(&known, &unknown, t))
            .fold(0.0, f64::max);
        assert!(exhaustive >= got.achieved_validation_accuracy - 1e-12);
    }
}

#[test]
fn grid_finds_exhaustive_optimum_when_scores_sit_between_grid_points() {
    let grid = threshold_grid(100);
    let mut r = rng(22);
    for _ in 0..100 {
        let width = 4;
        let snap = |v: f64| ((v * 100.0).floor() + 0.5) / 100.0;
        let mk = |r: &mut ChaCha8Rng, score: f64| {
            let k = r.random_range(0..width);
            let rest = (1.0 - score) / (width - 1) as f64;
            let mut p = vec![rest; width];
            p[k] = score;
            (p, k as u8)
        };
        let known: Vec<(Vec<f64>, u8)> = (0..30).map(|_| { let s = snap(r.random_range(0.3..0.99)); mk(&mut r, s) }).collect();
        let unknown: Vec<Vec<f64>> = (0..20).map(|_| { let s = snap(r.random_range(0.26..0.9)); mk(&mut r, s).0 }).collect();
        let got = calibrate_from_probs(&known, &unknown, &grid).unwrap();
        let mut scores: Vec<f64> = known.iter().map(|(p, _)| p.clone()).chain(unknown.iter().cloned())
            .map(|p| p.iter().cloned().fold(0.0, f64::max)).collect();
        scores.push(0.0);
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        let exhaustive = scores.iter().map(|&t| sorted_score_accuracy(&known, &unknown, t)).fold(0.0, f64::max);
        assert!((got.achieved_validation_accuracy - exhaustive).abs() < 1e-12);
    }
}

#[test]
fn unknown_set_grows_with_threshold() {
    let mut r = rng(23);
    let pool: Vec<Vec<f64>> = (0..300).map(|_| random_probs(&mut r, 8, 2.0)).collect();
    let mut previous: HashSet<usize> = HashSet::new();
    for t in threshold_grid(100) {
        let unknown: HashSet<usize> = pool
            .iter()
            .enumerate()
            .filter(|(_, p)| classify_with_threshold(p, t) == Verdict::Unknown)
            .map(|(i, _)| i)
            .collect();
        assert!(unknown.is_superset(&previous), "threshold {t}");
        previous = unknown;
    }
    assert_eq!(previous.len(), pool.len());
}

#[test]
fn order_preserving_perturbation_keeps_labels() {
    let mut r = rng(24);
    for _ in 0..500 {
        let p = random_probs(&mut r, 6, 1.0);
        let c = r.random_range(0.0..3.0);
        // strictly increasing on [0, 1], so the ordering is unchanged
        let q: Vec<f64> = p.iter().map(|v| v + c * v * v).collect();
        let s: f64 = q.iter().sum();
        let q: Vec<f64> = q.iter().map(|v| v / s).collect();
        assert_eq!(nn::argmax(&p), nn::argmax(&q));
    }
}

fn separable(n_per_class: usize, seed: u64) -> IdxDataset {
    let mut r = rng(seed);
    let mut ds = IdxDataset::new(vec!["low".into(), "high".into()]);
    for i in 0..2 * n_per_class {
        let class = (i % 2) as u8;
        let bytes: Vec<u8> = (0..784)
            .map(|j| {
                if j < 64 {
                    if class == 0 { r.random_range(0..100) } else { r.random_range(156..=255) }
                } else {
                    r.random()
                }
            })
            .collect();
        ds.push(PayloadVector::from_slice(&bytes).unwrap(), class);
    }
    ds
}

#[test]
fn separable_patterns_learned_within_five_epochs() {
    let train = separable(300, 1);
    let validation = separable(100, 2);
    let cfg = TrainConfig { epochs: 5, seed: 3, ..TrainConfig::default() };
    let (_, history) = nn::train_with(&train, &validation, 1, &cfg, |_| {}).unwrap();
    assert_eq!(history.epochs.len(), 5);
    let best = history.epochs.iter().map(|e| e.validation_accuracy).fold(0.0, f64::max);
    assert!(best >= 0.99, "{history:?}");
}

#[test]
fn memorises_small_random_set() {
    let mut r = rng(31);
    let mut ds = IdxDataset::new((0..10).map(|i| i.to_string()).collect());
    for _ in 0..100 {
        let bytes: Vec<u8> = (0..784).map(|_| r.random()).collect();
        ds.push(PayloadVector::from_slice(&bytes).unwrap(), r.random_range(0..10));
    }
    let cfg = TrainConfig { epochs: 200, seed: 4, ..TrainConfig::default() };
    let (params, history) = nn::train_with(&ds, &ds, 10, &cfg, |_| {}).unwrap();
    let first_below = history.epochs.iter().position(|e| e.validation_loss < 0.01);
    assert!(first_below.is_some(), "final loss {}", history.epochs.last().unwrap().validation_loss);
    assert!(nn::score(&params, &ds).0 < 0.01);
}

#[test]
fn training_is_deterministic() {
    let train = separable(60, 5);
    let validation = separable(20, 6);
    let cfg = TrainConfig { epochs: 3, hidden: 32, seed: 8, ..TrainConfig::default() };
    let a = nn::train_with(&train, &validation, 1, &cfg, |_| {}).unwrap();
    let b = nn::train_with(&train, &validation, 1, &cfg, |_| {}).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let c = nn::train_with(&train, &validation, 1, &TrainConfig { seed: 9, ..cfg }, |_| {}).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn retraining_reproduces_selected_epoch() {
    let train = separable(40, 7);
    let validation = separable(15, 8);
    let cfg = TrainConfig { epochs: 4, hidden: 16, seed: 2, ..TrainConfig::default() };
    let corpus_free = iotprint::SplitDataset {
        spec: iotprint::ExperimentSpec {
            scheme: Scheme::IotVsNonIot,
            output_width: 1,
            label_names: train.label_names.clone(),
        },
        seed: 0,
        train: train.clone(),
        validation: validation.clone(),
        test: validation.clone(),
        unknown_validation: vec![],
        unknown_test: vec![],
    };
    let outcome = nn::train_select_retrain(&corpus_free, &cfg, |_, _| {}).unwrap();
    assert_eq!(outcome.retrain.epochs.len(), outcome.best_epoch);
    assert_eq!(&outcome.retrain.epochs[..], &outcome.search.epochs[..outcome.best_epoch]);
    let (direct, _) = nn::train_with(&train, &validation, 1, &TrainConfig { epochs: outcome.best_epoch, ..cfg }, |_| {}).unwrap();
    assert_eq!(outcome.params, direct);
}

#[test]
fn empty_training_set_is_an_error() {
    let empty = IdxDataset::new(vec!["a".into(), "b".into()]);
    assert!(matches!(
        nn::train_with(&empty, &empty, 1, &TrainConfig::default(), |_| {}),
        Err(nn::NnError::EmptyTrainingSet)
    ));
}

#[test]
fn same_seed_same_labeled_split() {
    let mut r = rng(40);
    let corpus = DeviceCorpus {
        devices: (0..4)
            .map(|d| Device {
                name: format!("d{d}"),
                kind: if d == 0 { DeviceKind::NonIot } else { DeviceKind::Iot },
                sessions: (0..50 + 10 * d)
                    .map(|_| PayloadVector::from_slice(&(0..784).map(|_| r.random()).collect::<Vec<u8>>()).unwrap())
                    .collect(),
            })
            .collect(),
    };
    for scheme in [
        Scheme::IotVsNonIot,
        Scheme::OneVsRestIot { target: "d2".into() },
        Scheme::OneVsAll { target: "d2".into() },
        Scheme::Multiclass,
        Scheme::UnknownDetection { excluded: "d1".into() },
    ] {
        let a = label_for_experiment(&split(&corpus, 5), &scheme).unwrap();
        let b = label_for_experiment(&split(&corpus, 5), &scheme).unwrap();
        assert_eq!(a, b);
        for ds in [&a.train, &a.validation, &a.test] {
            assert!(ds.labels.iter().all(|&l| (l as usize) < a.spec.label_names.len()));
        }
    }
}

/// Reads the MNIST t10k files when `IOTPRINT_MNIST_DIR` points at them.
#[test]
#[ignore = "needs IOTPRINT_MNIST_DIR"]
fn reads_mnist_t10k() {
    let dir = std::path::PathBuf::from(std::env::var("IOTPRINT_MNIST_DIR").expect("IOTPRINT_MNIST_DIR"));
    let images = iotprint::transform::read_idx_images(&dir.join("t10k-images-idx3-ubyte")).unwrap();
    let labels = iotprint::transform::read_idx_labels(&dir.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!(images.len(), 10_000);
    assert_eq!(labels.len(), 10_000);
    assert!(labels.iter().all(|&l| l < 10));
}
