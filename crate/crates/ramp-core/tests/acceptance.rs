//! Acceptance suite. One test per criterion; each prints a PASS line once
//! its assertions hold. Oracles here are written independently of the
//! library paths they check.

use std::path::PathBuf;
use std::time::Instant;

use ramp_core::dataio::{self, DomainShift, LabeledSample, SampleSet, SyntheticConfig};
use ramp_core::decoder::{
    confidence_features, stage1_loss, train_stage1, BinScheme, Decoder, Stage1Config,
};
use ramp_core::fusion::{
    aggregate_retrieved, fuse_scores, fused_example_gradients, fused_example_loss, predict,
    predict_np, train_stage2, write_predictions, FusingNets, FusionExample, Stage2Config,
};
use ramp_core::metrics::{self, evaluate, PredictedScore};
use ramp_core::nn::{mse_loss, softmax, Activation, DenseLayer, GradientSet, MlpModel, Tape};
use ramp_core::retrieval::{retrieval_profile, vanilla_knn_score};
use ramp_core::{Datastore, Error, NeighborHit, Rng};

fn pass(n: usize, name: &str) {
    println!("acceptance {n:02} {name}: PASS");
}

fn random_store(rng: &mut Rng, n: usize, dim: usize) -> Datastore {
    let mut samples: Vec<LabeledSample> = (0..n)
        .map(|i| LabeledSample {
            id: format!("u{i}"),
            system_id: format!("s{}", i % 7),
            embedding: (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            score: rng.uniform(1.0, 5.0),
        })
        .collect();
    // Duplicate some embeddings so distance ties get exercised.
    if n > 1 && rng.next_f64() < 0.5 {
        for _ in 0..(n / 10).max(1) {
            let from = rng.below(n);
            let to = rng.below(n);
            let emb = samples[from].embedding.clone();
            samples[to].embedding = emb;
        }
    }
    Datastore::build(&SampleSet::new(samples).unwrap()).unwrap()
}

/// Independent search oracle: its own distance loop, full table, repeated
/// argmin with the lowest-index tie rule.
fn oracle_search(store: &Datastore, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let n = store.len();
    let mut table = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0f64;
        for (q, kv) in query.iter().zip(store.key(i)) {
            let d = q - *kv as f64;
            acc += d * d;
        }
        table.push(acc.sqrt());
    }
    let mut taken = vec![false; n];
    let mut out = Vec::new();
    for _ in 0..k.min(n) {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if table[i] < table[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push((b, table[b]));
    }
    out
}

#[test]
fn acceptance_01_knn_search_matches_brute_force() {
    let start = Instant::now();
    let mut rng = Rng::seed_from_u64(0xACCE_0001);
    for _ in 0..100 {
        let n = 1 + rng.below(1000);
        let dim = 1 + rng.below(64);
        let store = random_store(&mut rng, n, dim);
        for _ in 0..100 {
            let query: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.2, 1.2)).collect();
            let k = 1 + rng.below(n + 4);
            let got = store.search(&query, k).unwrap();
            let want = oracle_search(&store, &query, k);
            assert_eq!(got.len(), want.len());
            for (hit, (idx, dist)) in got.iter().zip(&want) {
                assert_eq!(hit.index, *idx);
                assert_eq!(hit.distance.to_bits(), dist.to_bits());
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}");
    pass(
        1,
        "knn search matches brute-force scan (100 stores x 100 queries)",
    );
}

fn perturbed(model: &MlpModel, layer: usize, is_bias: bool, idx: usize, by: f64) -> MlpModel {
    let mut layers: Vec<DenseLayer> = model.layers().to_vec();
    let l = &layers[layer];
    let mut w = l.weights().to_vec();
    let mut b = l.bias().to_vec();
    if is_bias {
        b[idx] += by;
    } else {
        w[idx] += by;
    }
    layers[layer] = DenseLayer::from_parts(l.in_dim(), l.out_dim(), l.activation(), w, b).unwrap();
    MlpModel::new(layers).unwrap()
}

fn grads_close(analytic: f64, fd: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff < 1e-8 || diff / analytic.abs().max(fd.abs()) < 1e-4
}

/// Checks every parameter of `model` against central differences of `loss`.
fn check_model_grads(
    model: &MlpModel,
    grads: &GradientSet,
    loss: &dyn Fn(&MlpModel) -> f64,
    label: &str,
) {
    let h = 1e-5;
    for (li, lg) in grads.layers().iter().enumerate() {
        for (is_bias, count) in [(false, lg.weights.len()), (true, lg.bias.len())] {
            for idx in 0..count {
                let fp = loss(&perturbed(model, li, is_bias, idx, h));
                let fm = loss(&perturbed(model, li, is_bias, idx, -h));
                let fd = (fp - fm) / (2.0 * h);
                let analytic = if is_bias {
                    lg.bias[idx]
                } else {
                    lg.weights[idx]
                };
                assert!(
                    grads_close(analytic, fd),
                    "{label}: layer {li} bias={is_bias} idx {idx}: {analytic} vs fd {fd}"
                );
            }
        }
    }
}

fn random_fusion_example(rng: &mut Rng, k: usize, bins: &BinScheme) -> FusionExample {
    loop {
        let mut distances: Vec<f64> = (0..k).map(|_| rng.uniform(0.0, 3.0)).collect();
        distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let retrieved_scores: Vec<f64> = (0..k).map(|_| rng.uniform(1.0, 5.0)).collect();
        let logits: Vec<f64> = (0..bins.n_bins).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let confidences = softmax(&logits).unwrap();
        let mut top = confidences.clone();
        top.sort_by(|a, b| b.partial_cmp(a).unwrap());
        top.resize(8, 0.0);
        let s_p = rng.uniform(0.5, 5.5);
        let ex = FusionExample {
            distances,
            retrieved_scores,
            top_confidences: top,
            c_regressed: confidences[bins.bin_of_clamped(s_p)],
            confidences,
            s_p,
            target: rng.uniform(1.0, 5.0),
        };
        // Reject draws whose retrieved score sits on a bin edge: the lookup
        // is piecewise constant there and finite differences would straddle
        // the step.
        let nets_probe: Vec<f64> = vec![1.0 / k as f64; k];
        let s_r: f64 = nets_probe
            .iter()
            .zip(&ex.retrieved_scores)
            .map(|(p, s)| p * s)
            .sum();
        let frac = ((s_r - bins.score_min) / bins.bin_width).fract();
        if frac.min(1.0 - frac) * bins.bin_width > 5e-3 {
            return ex;
        }
    }
}

#[test]
fn acceptance_02_gradients_match_central_differences() {
    let start = Instant::now();
    let mut rng = Rng::seed_from_u64(0xACCE_0002);

    // 20 multi-task decoder graphs.
    for round in 0..20 {
        let bins = BinScheme::default();
        let in_dim = 2 + rng.below(5);
        let hidden = 3 + rng.below(6);
        let alpha = [0.0, 0.5, 1.0, 2.0][rng.below(4)];
        let decoder = Decoder::init(in_dim, hidden, bins, &mut rng).unwrap();
        let x: Vec<f64> = (0..in_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let target = rng.uniform(1.0, 5.0);
        let bin = bins.bin_of(target).unwrap();

        let mut tape = Tape::new();
        let mt = tape.register(&decoder.trunk);
        let mr = tape.register(&decoder.reg_head);
        let mc = tape.register(&decoder.cls_head);
        let xi = tape.constant(x.clone());
        let hid = tape.model_forward(mt, xi).unwrap();
        let score = tape.model_forward(mr, hid).unwrap();
        let logits = tape.model_forward(mc, hid).unwrap();
        let probs = tape.softmax(logits).unwrap();
        let l_reg = tape.squared_error(score, target).unwrap();
        let l_cls = tape.neg_log_prob(probs, bin).unwrap();
        let l_cls = tape.scale(l_cls, alpha);
        let loss = tape.add(l_reg, l_cls).unwrap();
        tape.backward(loss).unwrap();

        let eager = |d: &Decoder| -> f64 {
            stage1_loss(&d.forward(&x).unwrap(), target, &d.bins, alpha).unwrap()
        };
        let with_trunk = |m: &MlpModel| Decoder {
            trunk: m.clone(),
            reg_head: decoder.reg_head.clone(),
            cls_head: decoder.cls_head.clone(),
            bins,
        };
        let with_reg = |m: &MlpModel| Decoder {
            trunk: decoder.trunk.clone(),
            reg_head: m.clone(),
            cls_head: decoder.cls_head.clone(),
            bins,
        };
        let with_cls = |m: &MlpModel| Decoder {
            trunk: decoder.trunk.clone(),
            reg_head: decoder.reg_head.clone(),
            cls_head: m.clone(),
            bins,
        };
        let label = format!("decoder graph {round}");
        check_model_grads(
            &decoder.trunk,
            &tape.gradients(mt),
            &|m| eager(&with_trunk(m)),
            &label,
        );
        check_model_grads(
            &decoder.reg_head,
            &tape.gradients(mr),
            &|m| eager(&with_reg(m)),
            &label,
        );
        check_model_grads(
            &decoder.cls_head,
            &tape.gradients(mc),
            &|m| eager(&with_cls(m)),
            &label,
        );
    }

    // 20 full fused-loss graphs: scope weighting, aggregation, confidence
    // lookup, path weighting, and fusion.
    for round in 0..20 {
        let bins = BinScheme::default();
        let k = 2 + rng.below(8);
        let hidden = 3 + rng.below(6);
        let nets = FusingNets::init(k, hidden, &mut rng).unwrap();
        let ex = random_fusion_example(&mut rng, k, &bins);

        let (gk, gl) = fused_example_gradients(&nets, &ex, &bins).unwrap();
        let label = format!("fused graph {round}");
        let loss_k = |m: &MlpModel| -> f64 {
            let candidate = FusingNets {
                k,
                k_net: m.clone(),
                lambda_net: nets.lambda_net.clone(),
            };
            fused_example_loss(&candidate, &ex, &bins).unwrap()
        };
        let loss_l = |m: &MlpModel| -> f64 {
            let candidate = FusingNets {
                k,
                k_net: nets.k_net.clone(),
                lambda_net: m.clone(),
            };
            fused_example_loss(&candidate, &ex, &bins).unwrap()
        };
        check_model_grads(&nets.k_net, &gk, &loss_k, &label);
        check_model_grads(&nets.lambda_net, &gl, &loss_l, &label);
    }

    // 10 plain regression graphs.
    for round in 0..10 {
        let in_dim = 1 + rng.below(4);
        let hidden = 2 + rng.below(5);
        let model = MlpModel::new(vec![
            DenseLayer::glorot(in_dim, hidden, Activation::Relu, &mut rng).unwrap(),
            DenseLayer::glorot(hidden, 1, Activation::Identity, &mut rng).unwrap(),
        ])
        .unwrap();
        let x: Vec<f64> = (0..in_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let target = rng.uniform(-2.0, 2.0);

        let mut tape = Tape::new();
        let m = tape.register(&model);
        let xi = tape.constant(x.clone());
        let y = tape.model_forward(m, xi).unwrap();
        let loss = tape.squared_error(y, target).unwrap();
        tape.backward(loss).unwrap();

        let eager = |m: &MlpModel| mse_loss(m.forward(&x).unwrap()[0], target);
        check_model_grads(
            &model,
            &tape.gradients(m),
            &eager,
            &format!("regression graph {round}"),
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    pass(
        2,
        "analytic gradients match central differences on 50 graphs",
    );
}

#[test]
fn acceptance_03_probability_contracts() {
    let mut rng = Rng::seed_from_u64(0xACCE_0003);
    let mut nets = FusingNets::init(6, 8, &mut rng).unwrap();
    for i in 0..10_000 {
        if i % 500 == 0 {
            nets = FusingNets::init(6, 8, &mut rng).unwrap();
        }
        let z: Vec<f64> = (0..1 + rng.below(12))
            .map(|_| rng.uniform(-40.0, 40.0))
            .collect();
        let p = softmax(&z).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut pairs: Vec<(f64, f64)> = (0..3 + rng.below(6))
            .map(|_| (rng.uniform(0.0, 4.0), rng.uniform(1.0, 5.0)))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let hits: Vec<NeighborHit> = pairs
            .iter()
            .enumerate()
            .map(|(index, &(distance, value))| NeighborHit {
                index,
                distance,
                value,
            })
            .collect();
        let profile = retrieval_profile(&hits, nets.k).unwrap();
        let scope = nets.scope_weights(profile.distances()).unwrap();
        assert!((scope.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let s_r = aggregate_retrieved(&scope, &profile).unwrap();
        let top: Vec<f64> = {
            let logits: Vec<f64> = (0..16).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let mut c = softmax(&logits).unwrap();
            c.sort_by(|a, b| b.partial_cmp(a).unwrap());
            c.truncate(8);
            c
        };
        let (w_p, w_r) = nets
            .path_weights(profile.distances(), &top, rng.next_f64(), rng.next_f64())
            .unwrap();
        assert!((w_p + w_r - 1.0).abs() < 1e-9);

        let s_p = rng.uniform(0.0, 6.0);
        let s = fuse_scores(w_p, w_r, s_p, s_r);
        assert!(s >= s_p.min(s_r) - 1e-12 && s <= s_p.max(s_r) + 1e-12);
    }
    pass(
        3,
        "softmax, scope, and path weights are probabilities; fusion is convex",
    );
}

#[test]
fn acceptance_04_retrieved_score_closed_forms() {
    let one = retrieval_profile(
        &[NeighborHit {
            index: 0,
            distance: 0.0,
            value: 4.5,
        }],
        1,
    )
    .unwrap();
    assert!((one.scores()[0] - 4.5).abs() < 1e-9);

    let two = retrieval_profile(
        &[
            NeighborHit {
                index: 0,
                distance: 1.0,
                value: 2.0,
            },
            NeighborHit {
                index: 1,
                distance: 3.0,
                value: 4.0,
            },
        ],
        2,
    )
    .unwrap();
    assert!((two.scores()[1] - 2.5).abs() < 1e-9);

    let uniform = retrieval_profile(
        &[
            NeighborHit {
                index: 0,
                distance: 2.0,
                value: 1.0,
            },
            NeighborHit {
                index: 1,
                distance: 2.0,
                value: 3.0,
            },
            NeighborHit {
                index: 2,
                distance: 2.0,
                value: 5.0,
            },
        ],
        3,
    )
    .unwrap();
    assert!((uniform.scores()[2] - 3.0).abs() < 1e-9);
    pass(4, "inverse-distance weighting closed forms reproduce");
}

/// Pair-enumeration oracle for tie-corrected Kendall tau.
fn ktau_pair_oracle(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len();
    let (mut con, mut dis) = (0i64, 0i64);
    let (mut tie_p, mut tie_t) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dp = pred[i] - pred[j];
            let dt = truth[i] - truth[j];
            if dp == 0.0 && dt == 0.0 {
            } else if dp == 0.0 {
                tie_p += 1;
            } else if dt == 0.0 {
                tie_t += 1;
            } else if dp * dt > 0.0 {
                con += 1;
            } else {
                dis += 1;
            }
        }
    }
    let cd = (con + dis) as f64;
    let denom = ((cd + tie_p as f64) * (cd + tie_t as f64)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (con - dis) as f64 / denom
    }
}

#[test]
fn acceptance_05_metric_oracles() {
    let mut rng = Rng::seed_from_u64(0xACCE_0005);
    for _ in 0..100 {
        let n = 2 + rng.below(499);
        let pred: Vec<f64> = (0..n).map(|_| rng.below(9) as f64 * 0.5).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.below(7) as f64 * 0.5).collect();
        let got = metrics::ktau(&pred, &truth).unwrap();
        let want = ktau_pair_oracle(&pred, &truth);
        if got.zero_variance {
            assert_eq!(want, 0.0);
        } else {
            assert_eq!(got.value, want, "n={n}");
        }
    }

    let c = metrics::lcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((c.value - 0.8).abs() < 1e-12);
    let t = metrics::ktau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((t.value - 2.0 / 3.0).abs() < 1e-12);

    let truths = SampleSet::new(
        (0..8)
            .map(|i| LabeledSample {
                id: format!("u{i}"),
                system_id: format!("s{}", i % 2),
                embedding: vec![0.0],
                score: 1.0 + 0.5 * i as f64,
            })
            .collect(),
    )
    .unwrap();
    let perfect: Vec<PredictedScore> = truths
        .samples()
        .iter()
        .map(|s| PredictedScore {
            id: s.id.clone(),
            score: s.score,
        })
        .collect();
    let report = evaluate(&perfect, &truths).unwrap();
    assert_eq!(report.utterance.mse, 0.0);
    assert_eq!(report.system.mse, 0.0);
    for v in [
        report.utterance.lcc,
        report.utterance.srcc,
        report.utterance.ktau,
        report.system.lcc,
        report.system.srcc,
        report.system.ktau,
    ] {
        assert!((v - 1.0).abs() < 1e-12);
    }
    pass(
        5,
        "kendall matches pair enumeration; fixtures and perfect report hold",
    );
}

fn synth(
    systems: usize,
    per: usize,
    noise: f64,
    shift: Option<DomainShift>,
    seed: u64,
) -> SampleSet {
    dataio::gen_synthetic(&SyntheticConfig {
        dim: 16,
        n_systems: systems,
        utterances_per_system: per,
        noise_sigma: noise,
        domain_shift: shift,
        seed,
    })
    .unwrap()
}

fn trend_stage1(seed: u64) -> Stage1Config {
    Stage1Config {
        alpha: 1.0,
        hidden_dim: 64,
        learning_rate: 1e-3,
        max_epochs: 120,
        patience: 12,
        batch_size: 4,
        grad_accum: 4,
        seed,
    }
}

fn trend_stage2(k: usize, seed: u64) -> Stage2Config {
    Stage2Config {
        k,
        hidden_dim: 32,
        learning_rate: 5e-3,
        max_epochs: 100,
        patience: 12,
        batch_size: 4,
        grad_accum: 4,
        seed,
    }
}

fn test_mse<F: Fn(&LabeledSample) -> f64>(set: &SampleSet, f: F) -> f64 {
    set.samples()
        .iter()
        .map(|s| mse_loss(f(s), s.score))
        .sum::<f64>()
        / set.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64
}

#[test]
fn acceptance_06_fused_pipeline_is_more_stable_across_k_than_vanilla_knn() {
    let start = Instant::now();
    // 2800 samples split 2000 / 400 / 400 with one fixed seed throughout.
    let data = synth(140, 20, 0.25, None, 0x6001);
    let (train, dev, test) = dataio::split(&data, (0.7145, 0.1430, 0.1425), 0x6002).unwrap();
    assert_eq!((train.len(), dev.len(), test.len()), (2000, 400, 400));

    let bins = BinScheme::default();
    let (decoder, s1) = train_stage1(&train, &dev, bins, &trend_stage1(0x6003)).unwrap();
    eprintln!(
        "stage 1: {} epochs, dev loss {:.4}",
        s1.epochs_run, s1.best_dev_loss
    );
    let store = Datastore::build(&train).unwrap();

    let ks = [5usize, 10, 15, 30, 60];
    let mut fused = Vec::new();
    let mut vanilla = Vec::new();
    for &k in &ks {
        let (nets, s2) =
            train_stage2(&train, &dev, &decoder, &store, &trend_stage2(k, 0x6004)).unwrap();
        let mse_fused = test_mse(&test, |s| {
            predict(&decoder, &nets, &store, &s.id, &s.system_id, &s.embedding)
                .unwrap()
                .score
        });
        let mse_vanilla = test_mse(&test, |s| {
            vanilla_knn_score(&store, &s.embedding, k).unwrap()
        });
        eprintln!(
            "K={k}: fused mse {mse_fused:.5} ({} epochs), vanilla mse {mse_vanilla:.5}",
            s2.epochs_run
        );
        fused.push(mse_fused);
        vanilla.push(mse_vanilla);
    }

    let var_fused = population_variance(&fused);
    let var_vanilla = population_variance(&vanilla);
    eprintln!("variance across K: fused {var_fused:.3e}, vanilla {var_vanilla:.3e}");
    assert!(
        var_fused < var_vanilla,
        "fused variance {var_fused:.3e} must be below vanilla {var_vanilla:.3e}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600, "took {elapsed:?}");
    pass(
        6,
        "fused pipeline varies less across K than vanilla fixed-k retrieval",
    );
}

#[test]
fn acceptance_07_datastore_swap_recovers_shifted_domain() {
    let start = Instant::now();
    let domain_a = synth(100, 20, 0.25, None, 0x7001);
    let (train_a, dev_a, _) = dataio::split(&domain_a, (0.8, 0.1, 0.1), 0x7002).unwrap();

    let shift = DomainShift {
        embedding_offset: vec![1.2; 16],
        score_offset: -0.8,
    };
    let domain_b = synth(60, 20, 0.25, Some(shift), 0x7003);
    let (store_b_samples, _, test_b) = dataio::split(&domain_b, (0.5, 0.25, 0.25), 0x7004).unwrap();

    let bins = BinScheme::default();
    let (decoder, _) = train_stage1(&train_a, &dev_a, bins, &trend_stage1(0x7005)).unwrap();
    let store_a = Datastore::build(&train_a).unwrap();
    let (nets, _) = train_stage2(
        &train_a,
        &dev_a,
        &decoder,
        &store_a,
        &trend_stage2(8, 0x7006),
    )
    .unwrap();

    let store_b = Datastore::build(&store_b_samples).unwrap();

    let mse_ramp_a = test_mse(&test_b, |s| {
        predict(&decoder, &nets, &store_a, &s.id, &s.system_id, &s.embedding)
            .unwrap()
            .score
    });
    let mse_ramp_b = test_mse(&test_b, |s| {
        predict(&decoder, &nets, &store_b, &s.id, &s.system_id, &s.embedding)
            .unwrap()
            .score
    });
    let mse_np_b = test_mse(&test_b, |s| {
        predict_np(&nets, &store_b, &s.id, &s.system_id, &s.embedding)
            .unwrap()
            .score
    });
    eprintln!(
        "shifted-domain mse: source store {mse_ramp_a:.4}, swapped store {mse_ramp_b:.4}, \
         non-parametric {mse_np_b:.4}"
    );
    assert!(
        mse_ramp_b < mse_ramp_a,
        "swapping the datastore must help: {mse_ramp_b:.4} vs {mse_ramp_a:.4}"
    );
    assert!(
        mse_np_b <= mse_ramp_b,
        "non-parametric must be at least as good after the swap: {mse_np_b:.4} vs {mse_ramp_b:.4}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600, "took {elapsed:?}");
    pass(
        7,
        "swapped datastore beats source datastore; np variant at least matches",
    );
}

#[test]
fn acceptance_08_parametric_weight_tracks_data_density() {
    let data = synth(140, 20, 0.15, None, 0x8001);
    let (train, dev, test) = dataio::split(&data, (0.7145, 0.1430, 0.1425), 0x8002).unwrap();
    let bins = BinScheme::default();
    // A capable decoder that still has to share capacity across systems, and
    // a gently trained fusing stage, so the weight map reflects the data
    // rather than the initialization.
    let cfg1 = Stage1Config {
        alpha: 1.0,
        hidden_dim: 128,
        learning_rate: 2e-3,
        max_epochs: 400,
        patience: 25,
        batch_size: 4,
        grad_accum: 4,
        seed: 0x8003,
    };
    let (decoder, _) = train_stage1(&train, &dev, bins, &cfg1).unwrap();
    let store = Datastore::build(&train).unwrap();
    let cfg2 = Stage2Config {
        k: 30,
        hidden_dim: 32,
        learning_rate: 1e-3,
        max_epochs: 400,
        patience: 60,
        batch_size: 4,
        grad_accum: 2,
        seed: 0x8004,
    };
    let (nets, _) = train_stage2(&train, &dev, &decoder, &store, &cfg2).unwrap();

    let mut train_counts = vec![0usize; bins.n_bins];
    for s in train.samples() {
        train_counts[bins.bin_of(s.score).unwrap()] += 1;
    }
    let mut w_p_by_bin: Vec<Vec<f64>> = vec![Vec::new(); bins.n_bins];
    for s in test.samples() {
        let pred = predict(&decoder, &nets, &store, &s.id, &s.system_id, &s.embedding).unwrap();
        w_p_by_bin[bins.bin_of(s.score).unwrap()].push(pred.parts.w_p);
    }

    // Bins that actually hold test instances, ordered by training density.
    let mut candidates: Vec<usize> = (0..bins.n_bins)
        .filter(|&b| !w_p_by_bin[b].is_empty())
        .collect();
    candidates.sort_by_key(|&b| train_counts[b]);
    let tail_bins: Vec<usize> = candidates.iter().take(2).copied().collect();
    let head_bins: Vec<usize> = candidates.iter().rev().take(4).copied().collect();

    let mean_wp = |bin_ids: &[usize]| -> f64 {
        let values: Vec<f64> = bin_ids
            .iter()
            .flat_map(|&b| w_p_by_bin[b].iter().copied())
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    };
    let head = mean_wp(&head_bins);
    let tail = mean_wp(&tail_bins);
    eprintln!(
        "mean parametric weight: head bins {head:.4} (train counts {:?}), \
         tail bins {tail:.4} (train counts {:?})",
        head_bins
            .iter()
            .map(|&b| train_counts[b])
            .collect::<Vec<_>>(),
        tail_bins
            .iter()
            .map(|&b| train_counts[b])
            .collect::<Vec<_>>(),
    );
    assert!(
        head > tail,
        "parametric weight should be larger on dense score regions: head {head:.4} vs tail {tail:.4}"
    );
    pass(
        8,
        "learned parametric weight is higher on dense score regions than the tail",
    );
}

fn run_once(dir: &std::path::Path) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    let data = synth(20, 10, 0.1, None, 0x9001);
    let (train, dev, test) = dataio::split(&data, (0.7, 0.15, 0.15), 0x9002).unwrap();
    let bins = BinScheme::default();
    let cfg1 = Stage1Config {
        hidden_dim: 16,
        learning_rate: 1e-3,
        max_epochs: 15,
        patience: 5,
        seed: 0x9003,
        ..Default::default()
    };
    let (decoder, _) = train_stage1(&train, &dev, bins, &cfg1).unwrap();
    let store = Datastore::build(&train).unwrap();
    let cfg2 = Stage2Config {
        k: 6,
        hidden_dim: 8,
        learning_rate: 1e-3,
        max_epochs: 15,
        patience: 5,
        seed: 0x9004,
        ..Default::default()
    };
    let (nets, _) = train_stage2(&train, &dev, &decoder, &store, &cfg2).unwrap();

    let decoder_path = dir.join("decoder.json");
    let fusing_path = dir.join("fusing.json");
    let store_path = dir.join("train.rds");
    let preds_path = dir.join("preds.ndjson");
    let report_path = dir.join("report.json");

    std::fs::write(&decoder_path, decoder.to_json()).unwrap();
    std::fs::write(&fusing_path, nets.to_json()).unwrap();
    store.save(&store_path).unwrap();

    let preds: Vec<_> = test
        .samples()
        .iter()
        .map(|s| predict(&decoder, &nets, &store, &s.id, &s.system_id, &s.embedding).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_predictions(&mut buf, &preds).unwrap();
    std::fs::write(&preds_path, buf).unwrap();

    let scored: Vec<PredictedScore> = preds.iter().map(PredictedScore::from).collect();
    let report = evaluate(&scored, &test).unwrap();
    std::fs::write(&report_path, report.to_json()).unwrap();

    vec![
        decoder_path,
        fusing_path,
        store_path,
        preds_path,
        report_path,
    ]
}

#[test]
fn acceptance_09_end_to_end_runs_are_byte_identical() {
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-repro");
    let first = run_once(&base.join("run1"));
    let second = run_once(&base.join("run2"));
    for (a, b) in first.iter().zip(&second) {
        let ba = std::fs::read(a).unwrap();
        let bb = std::fs::read(b).unwrap();
        assert_eq!(
            ba,
            bb,
            "artifacts differ: {} vs {}",
            a.display(),
            b.display()
        );
    }
    pass(
        9,
        "identical seeds give byte-identical checkpoints, stores, predictions, reports",
    );
}

#[test]
fn acceptance_10_persistence_round_trips_and_distinct_corruption_errors() {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-persist");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = Rng::seed_from_u64(0xACCE_0010);

    let set = SampleSet::new(
        (0..40)
            .map(|i| LabeledSample {
                id: format!("u{i}"),
                system_id: format!("s{}", i % 5),
                embedding: (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                score: rng.uniform(1.0, 5.0),
            })
            .collect(),
    )
    .unwrap();
    let store = Datastore::build(&set).unwrap();
    let store_path = dir.join("store.rds");
    store.save(&store_path).unwrap();
    let loaded = Datastore::load(&store_path).unwrap();
    assert_eq!(loaded, store);
    for i in 0..store.len() {
        assert_eq!(loaded.value(i).to_bits(), store.value(i).to_bits());
        assert_eq!(loaded.key(i), store.key(i));
        assert_eq!(loaded.id(i), store.id(i));
    }
    let resaved = dir.join("store2.rds");
    loaded.save(&resaved).unwrap();
    assert_eq!(
        std::fs::read(&store_path).unwrap(),
        std::fs::read(&resaved).unwrap()
    );

    let decoder = Decoder::init(6, 10, BinScheme::default(), &mut rng).unwrap();
    let decoder_restored = Decoder::from_json(&decoder.to_json()).unwrap();
    for (a, b) in decoder
        .trunk
        .layers()
        .iter()
        .chain(decoder.reg_head.layers())
        .chain(decoder.cls_head.layers())
        .zip(
            decoder_restored
                .trunk
                .layers()
                .iter()
                .chain(decoder_restored.reg_head.layers())
                .chain(decoder_restored.cls_head.layers()),
        )
    {
        assert_eq!(
            a.weights().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.weights().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            a.bias().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.bias().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    let nets = FusingNets::init(5, 7, &mut rng).unwrap();
    assert_eq!(
        FusingNets::from_json(&nets.to_json()).unwrap().to_json(),
        nets.to_json()
    );

    let mut corrupted = std::fs::read(&store_path).unwrap();
    corrupted[0] = b'Z';
    let bad_magic_path = dir.join("bad-magic.rds");
    std::fs::write(&bad_magic_path, &corrupted).unwrap();
    let magic_err = Datastore::load(&bad_magic_path).unwrap_err();
    assert!(matches!(magic_err, Error::NotADatastore));
    assert_eq!(magic_err.to_string(), "not a RAMP datastore");

    let mut truncated = std::fs::read(&store_path).unwrap();
    truncated.truncate(truncated.len() / 2);
    let truncated_path = dir.join("truncated.rds");
    std::fs::write(&truncated_path, &truncated).unwrap();
    let trunc_err = Datastore::load(&truncated_path).unwrap_err();
    assert!(matches!(trunc_err, Error::TruncatedDatastore));
    assert_ne!(trunc_err.to_string(), magic_err.to_string());

    pass(
        10,
        "save/load round-trips value-exact; corruption errors are distinct",
    );
}

/// Confidence features are part of the fused pipeline surface; exercise the
/// lookup against the library path once at acceptance level too.
#[test]
fn acceptance_confidence_lookup_feeds_the_fusing_input() {
    let mut rng = Rng::seed_from_u64(0xACCE_0011);
    let bins = BinScheme::default();
    let decoder = Decoder::init(4, 8, bins, &mut rng).unwrap();
    let out = decoder.forward(&[0.3, -0.2, 0.9, 0.1]).unwrap();
    let (top, c_r, c_p) = confidence_features(&out, 2.6, out.score, &bins);
    assert_eq!(top.len(), 8);
    assert_eq!(c_r, out.confidences[bins.bin_of_clamped(2.6)]);
    assert_eq!(c_p, out.confidences[bins.bin_of_clamped(out.score)]);
}
