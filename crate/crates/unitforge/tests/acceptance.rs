//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (visible with `cargo test --test acceptance -- --nocapture`).
//! Every expected value is either computed by an independent oracle inside
//! this file or pinned from a closed form.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unitforge::backbone::{output_length, param_count, Backbone, BackboneConfig, ContextConfig, EncoderConfig};
use unitforge::commands::run_study;
use unitforge::config::PresetConfig;
use unitforge::corpus::{dedup_runs, validate_alignment, FeatureSeq, FrameLabels, RunLengthSeq};
use unitforge::evalsynth::Pipeline;
use unitforge::numkit::{grad_check, NumkitError, Tensor};
use unitforge::objective::{
    masked_nll, masked_nll_graph, sample_mask, unit_distribution, unit_distribution_graph,
    HeadVars, MaskSet, MaskSpec, PredictorHead,
};
use unitforge::uasr::{
    aux_ssl_loss_graph, frame_phoneme_labels, generator_forward, gradient_penalty_pair_graph,
    one_hot, phoneme_diversity_graph, segment_smoothness_graph, train_uasr, DiscVars,
    Discriminator, UasrConfig, UnpairedText,
};
use unitforge::units::{
    build_lt_vocab, grow_tying_tree, kmeans_fit, label_pp, singleton_questions, split_gain,
    train_bpe, ContextSide, GaussStats, Question, TriphoneKey, TyingConfig,
};

fn pass(n: usize, name: &str) {
    println!("acceptance {n:02} ({name}): PASS");
}

// ---------------------------------------------------------------------------
// 1. Gradient suite: every differentiable operation passes central
//    finite-difference checks with max relative error <= 1e-4 on >= 20
//    random instances each.
// ---------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-6;
const GRAD_INSTANCES: usize = 20;

#[test]
fn acceptance_01_gradient_suite() {
    // Unit-distribution head (cosine similarity + temperature softmax).
    for i in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let (t, d, e, c) = (
            rng.random_range(2..5usize),
            rng.random_range(2..5usize),
            rng.random_range(2..5usize),
            rng.random_range(2..6usize),
        );
        let h = Tensor::randn(vec![t, d], 1.0, &mut rng);
        let w = Tensor::randn(vec![d, e], 0.7, &mut rng);
        let emb = Tensor::randn(vec![c, e], 0.7, &mut rng);
        let weights = Tensor::randn(vec![t, c], 1.0, &mut rng);
        let report = grad_check(
            |g, ids| {
                let hv = HeadVars {
                    projection: ids[1],
                    embeddings: ids[2],
                    temperature: 0.1,
                };
                let dist = unit_distribution_graph(g, ids[0], &hv)?;
                let wleaf = g.leaf(weights.clone());
                let prod = g.mul(dist, wleaf)?;
                g.sum_all(prod)
            },
            &[h, w, emb],
            GRAD_H,
            GRAD_TOL,
        )
        .unwrap();
        assert!(report.pass, "softmax head instance {i}: {}", report.max_rel_err);
    }

    // Masked NLL.
    for i in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + i as u64);
        let (t, d, e, c) = (
            rng.random_range(2..6usize),
            rng.random_range(2..5usize),
            rng.random_range(2..5usize),
            rng.random_range(2..6usize),
        );
        let h = Tensor::randn(vec![t, d], 1.0, &mut rng);
        let w = Tensor::randn(vec![d, e], 0.7, &mut rng);
        let emb = Tensor::randn(vec![c, e], 0.7, &mut rng);
        let ids: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
        let z = FrameLabels::new("u", ids, c).unwrap();
        let flags: Vec<bool> = (0..t).map(|_| rng.random::<f64>() < 0.6).collect();
        let m = MaskSet::from_flags(flags);
        let report = grad_check(
            |g, ids| {
                let hv = HeadVars {
                    projection: ids[1],
                    embeddings: ids[2],
                    temperature: 0.1,
                };
                masked_nll_graph(g, ids[0], &z, &m, &hv)
                    .map_err(|e| NumkitError::InvalidArgument(e.to_string()))
            },
            &[h, w, emb],
            GRAD_H,
            GRAD_TOL,
        )
        .unwrap();
        assert!(report.pass, "masked_nll instance {i}: {}", report.max_rel_err);
    }

    // Gradient penalty with respect to discriminator weights (second-order).
    for i in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + i as u64);
        let c = rng.random_range(3..6usize);
        let t = rng.random_range(3..6usize);
        let cfg = UasrConfig {
            inventory_size: c,
            feature_dim: 2,
            hidden_dim: 4,
            disc_hidden: 4,
            disc_kernel: 2,
            aux_clusters: 2,
            ..UasrConfig::desk(2)
        };
        let d = Discriminator::init(&cfg, &mut rng);
        let real_ids: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
        let real = one_hot(&real_ids, c).unwrap();
        let fake =
            unitforge::numkit::softmax_rows(&Tensor::randn(vec![t, c], 0.5, &mut rng), 1.0)
                .unwrap();
        let alpha = rng.random::<f64>();
        let params = [d.w1.clone(), d.b1.clone(), d.w2.clone(), d.b2.clone()];
        let report = grad_check(
            |g, ids| {
                let vars = DiscVars {
                    w1: ids[0],
                    b1: ids[1],
                    w2: ids[2],
                    b2: ids[3],
                };
                gradient_penalty_pair_graph(g, &vars, &real, &fake, alpha)
                    .map_err(|e| NumkitError::InvalidArgument(e.to_string()))
            },
            &params,
            GRAD_H,
            GRAD_TOL,
        )
        .unwrap();
        assert!(report.pass, "gradient penalty instance {i}: {}", report.max_rel_err);
    }

    // Segment smoothness and phoneme diversity, composed through softmax so
    // the gradients flow back into raw logits.
    for i in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + i as u64);
        let (t, c) = (rng.random_range(2..6usize), rng.random_range(2..5usize));
        let logits = Tensor::randn(vec![t, c], 1.0, &mut rng);
        let report = grad_check(
            |g, ids| {
                let probs = g.softmax(ids[0], 1.0)?;
                segment_smoothness_graph(g, probs)
                    .map_err(|e| NumkitError::InvalidArgument(e.to_string()))
            },
            &[logits.clone()],
            GRAD_H,
            GRAD_TOL,
        )
        .unwrap();
        assert!(report.pass, "segment smoothness instance {i}: {}", report.max_rel_err);

        let logits_b = Tensor::randn(vec![t + 1, c], 1.0, &mut rng);
        let report = grad_check(
            |g, ids| {
                let pa = g.softmax(ids[0], 1.0)?;
                let pb = g.softmax(ids[1], 1.0)?;
                phoneme_diversity_graph(g, &[pa, pb])
                    .map_err(|e| NumkitError::InvalidArgument(e.to_string()))
            },
            &[logits, logits_b],
            GRAD_H,
            GRAD_TOL,
        )
        .unwrap();
        assert!(report.pass, "phoneme diversity instance {i}: {}", report.max_rel_err);
    }

    // Auxiliary self-supervised loss.
    for i in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + i as u64);
        let (t, h_dim, k) = (
            rng.random_range(2..6usize),
            rng.random_range(2..5usize),
            rng.random_range(2..5usize),
        );
        let hidden = Tensor::randn(vec![t, h_dim], 1.0, &mut rng);
        let aux_w = Tensor::randn(vec![h_dim, k], 0.7, &mut rng);
        let aux_b = Tensor::randn(vec![1, k], 0.2, &mut rng);
        let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();
        let report = grad_check(
            |g, ids| {
                aux_ssl_loss_graph(g, ids[0], ids[1], ids[2], &targets)
                    .map_err(|e| NumkitError::InvalidArgument(e.to_string()))
            },
            &[hidden, aux_w, aux_b],
            GRAD_H,
            GRAD_TOL,
        )
        .unwrap();
        assert!(report.pass, "aux ssl instance {i}: {}", report.max_rel_err);
    }

    // One transformer backbone block, including all its parameters.
    for i in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + i as u64);
        let heads = rng.random_range(1..3usize);
        let dim = heads * rng.random_range(2..4usize);
        let cfg = BackboneConfig {
            encoder: None,
            input_dim: dim,
            context: ContextConfig {
                num_layers: 1,
                model_dim: dim,
                ffn_dim: rng.random_range(3..7usize),
                num_heads: heads,
            },
            max_positions: 16,
        };
        let b = Backbone::init(cfg, 600 + i as u64).unwrap();
        let t = rng.random_range(2..5usize);
        let x = Tensor::randn(vec![t, dim], 0.5, &mut rng);
        let feats = FeatureSeq::new(x, 50.0).unwrap();
        let mask = MaskSet::none(t);
        let mut params: Vec<Tensor> = b.params().to_vec();
        params.insert(0, feats.frames().clone());
        let weights = Tensor::randn(vec![t, dim], 1.0, &mut rng);
        let report = grad_check(
            |g, ids| {
                let vars = ids[1..].to_vec();
                let frames = ids[0];
                let masked = b
                    .project_and_mask_graph(g, &vars, frames, &mask)
                    .map_err(|e| NumkitError::InvalidArgument(e.to_string()))?;
                let outs = b
                    .context_forward_graph(g, &vars, masked)
                    .map_err(|e| NumkitError::InvalidArgument(e.to_string()))?;
                let wleaf = g.leaf(weights.clone());
                let prod = g.mul(*outs.last().unwrap(), wleaf)?;
                g.sum_all(prod)
            },
            &params,
            GRAD_H,
            GRAD_TOL,
        )
        .unwrap();
        assert!(report.pass, "backbone block instance {i}: {}", report.max_rel_err);
    }

    pass(1, "gradient suite");
}

// ---------------------------------------------------------------------------
// 2. Eq. 1 / Eq. 2 oracle equivalence within 1e-10 on 100 random instances.
// ---------------------------------------------------------------------------

/// Naive reference: plain nested loops, no shared code with the library path.
fn naive_distribution(
    h: &[Vec<f64>],
    w: &[Vec<f64>],
    emb: &[Vec<f64>],
    tau: f64,
) -> Vec<Vec<f64>> {
    let (d, e) = (w.len(), w[0].len());
    let c = emb.len();
    let mut out = Vec::with_capacity(h.len());
    for row in h {
        let mut proj = vec![0.0; e];
        for (k, wk) in w.iter().enumerate() {
            for j in 0..e {
                proj[j] += row[k] * wk[j];
            }
        }
        assert_eq!(row.len(), d);
        let pn: f64 = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut logits = vec![0.0; c];
        for (ci, ec) in emb.iter().enumerate() {
            let en: f64 = ec.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = proj.iter().zip(ec).map(|(a, b)| a * b).sum();
            logits[ci] = dot / (pn * en) / tau;
        }
        let total: f64 = logits.iter().map(|l| l.exp()).sum();
        out.push(logits.iter().map(|l| l.exp() / total).collect());
    }
    out
}

#[test]
fn acceptance_02_eq1_eq2_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..100 {
        let t = rng.random_range(1..=32usize);
        let c = rng.random_range(2..=16usize);
        let d = rng.random_range(2..=8usize);
        let e = rng.random_range(2..=8usize);
        let h_rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0 + 0.1).collect())
            .collect();
        let w_rows: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..e).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let e_rows: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..e).map(|_| rng.random::<f64>() * 2.0 - 1.0 + 0.05).collect())
            .collect();
        let tau = 0.1 + rng.random::<f64>();

        let flat = |rows: &[Vec<f64>]| -> Vec<f64> { rows.iter().flatten().copied().collect() };
        let h = FeatureSeq::new(Tensor::from_vec(vec![t, d], flat(&h_rows)).unwrap(), 50.0).unwrap();
        let head = PredictorHead::new(
            Tensor::from_vec(vec![d, e], flat(&w_rows)).unwrap(),
            Tensor::from_vec(vec![c, e], flat(&e_rows)).unwrap(),
            tau,
        )
        .unwrap();

        let got = unit_distribution(&h, &head).unwrap();
        let want = naive_distribution(&h_rows, &w_rows, &e_rows, tau);
        for ti in 0..t {
            for ci in 0..c {
                let diff = (got.at2(ti, ci) - want[ti][ci]).abs();
                assert!(diff <= 1e-10, "instance {i} dist ({ti},{ci}) diff {diff}");
            }
        }

        // Eq. 2 against the brute-force per-frame cross-entropy sum.
        let ids: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
        let z = FrameLabels::new("u", ids.clone(), c).unwrap();
        let flags: Vec<bool> = (0..t).map(|_| rng.random::<f64>() < 0.5).collect();
        let m = MaskSet::from_flags(flags.clone());
        let got_nll = masked_nll(&h, &z, &m, &head).unwrap();
        let mut want_nll = 0.0;
        for ti in 0..t {
            if flags[ti] {
                want_nll -= want[ti][ids[ti]].ln();
            }
        }
        assert!(
            (got_nll - want_nll).abs() <= 1e-10,
            "instance {i} nll {got_nll} vs {want_nll}"
        );
    }
    pass(2, "eq1/eq2 oracle equivalence");
}

// ---------------------------------------------------------------------------
// 3. Mask statistics: empirical masked fraction near 1 - 0.92^10.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_mask_statistics() {
    let spec = MaskSpec {
        start_prob: 0.08,
        span_len: 10,
    };
    let t = 1000usize;
    let mut total_masked = 0usize;
    for seed in 0..1000u64 {
        total_masked += sample_mask(t, &spec, seed).num_masked();
    }
    let fraction = total_masked as f64 / (1000.0 * t as f64);
    let expected = 1.0 - 0.92f64.powi(10);
    assert!(
        (fraction - expected).abs() <= 0.02,
        "masked fraction {fraction:.4} vs {expected:.4}"
    );
    pass(3, "mask statistics");
}

// ---------------------------------------------------------------------------
// 4. Frame-rate shape: 16,000 * n samples -> 50 * n +- 1 frames.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_04_frame_rate_shape() {
    let enc = EncoderConfig::paper();
    for n in [1usize, 2, 5, 10] {
        let frames = output_length(16_000 * n, &enc).unwrap() as i64;
        let target = (50 * n) as i64;
        assert!(
            (frames - target).abs() <= 1,
            "{n}s of audio -> {frames} frames, want {target} +- 1"
        );
    }
    pass(4, "frame-rate shape");
}

// ---------------------------------------------------------------------------
// 5. Parameter count within 10% of 95M.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_param_count() {
    let count = param_count(&BackboneConfig::paper()) as f64;
    let rel = (count - 95e6).abs() / 95e6;
    assert!(rel <= 0.10, "param count {count} is {rel:.3} away from 95M");
    pass(5, "parameter count");
}

// ---------------------------------------------------------------------------
// 6. LT vocab sizes: exactly 540 with >= 500 distinct; 40 + d below that.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_06_lt_vocab() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    // A corpus with plenty of distinct triphones.
    let mut corpus = Vec::new();
    for _ in 0..60 {
        let mut ids = Vec::new();
        let mut last = usize::MAX;
        for _ in 0..300 {
            let mut p = rng.random_range(0..40usize);
            while p == last {
                p = rng.random_range(0..40);
            }
            ids.push(p);
            last = p;
        }
        corpus.push(RunLengthSeq::new("u", ids, vec![1; 300], 40).unwrap());
    }
    // Independent count of distinct non-silence-center triphones.
    let mut distinct = std::collections::BTreeSet::new();
    for runs in &corpus {
        let syms = runs.symbols();
        for i in 0..syms.len() {
            if syms[i] == 0 {
                continue;
            }
            let l = if i == 0 { 0 } else { syms[i - 1] };
            let r = if i + 1 == syms.len() { 0 } else { syms[i + 1] };
            distinct.insert((l, syms[i], r));
        }
    }
    assert!(distinct.len() >= 500, "only {} distinct triphones", distinct.len());
    let vocab = build_lt_vocab(corpus.iter(), 500, 40, 0);
    assert_eq!(vocab.vocab_size(), 540);

    // A small corpus with d < 500 distinct selects exactly 40 + d.
    let small = vec![RunLengthSeq::new("u", vec![1, 2, 3, 1, 2], vec![1; 5], 40).unwrap()];
    let mut d_small = std::collections::BTreeSet::new();
    {
        let syms = small[0].symbols();
        for i in 0..syms.len() {
            let l = if i == 0 { 0 } else { syms[i - 1] };
            let r = if i + 1 == syms.len() { 0 } else { syms[i + 1] };
            if syms[i] != 0 {
                d_small.insert((l, syms[i], r));
            }
        }
    }
    let vocab = build_lt_vocab(small.iter(), 500, 40, 0);
    assert_eq!(vocab.vocab_size(), 40 + d_small.len());
    pass(6, "lt vocab sizes");
}

// ---------------------------------------------------------------------------
// 7. Tree tying: monotone likelihood, budget respected, informative context
//    recovered at the root, growth can stop below budget.
// ---------------------------------------------------------------------------

fn stats_1d(n: f64, mean: f64, var: f64) -> GaussStats {
    GaussStats {
        n,
        sum: vec![mean * n],
        sumsq: vec![(var + mean * mean) * n],
    }
}

#[test]
fn acceptance_07_tree_tying() {
    let n_phones = 10usize;
    let informative_center = 4usize;
    let informative_left = 7usize;
    // Every triphone of every center is uniform noise except that center 4's
    // emission mean depends on whether its left context is phone 7.
    let mut stats: BTreeMap<TriphoneKey, GaussStats> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for c in 1..n_phones {
        for l in 0..n_phones {
            for r in 0..4 {
                let mean = if c == informative_center && l == informative_left {
                    8.0
                } else {
                    0.02 * rng.random::<f64>()
                };
                stats.insert(TriphoneKey::new(l, c, r), stats_1d(6.0, mean, 1.0));
            }
        }
    }
    let questions = singleton_questions(n_phones);
    let cfg = TyingConfig {
        max_leaves: 11,
        min_gain: 0.5,
        min_occupancy: 1.0,
    };
    let outcome = grow_tying_tree(&stats, &questions, n_phones, &cfg).unwrap();

    // (a) leaves within budget; (b) log-likelihood nondecreasing.
    assert!(outcome.tree.n_states <= cfg.max_leaves);
    for w in outcome.ll_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "log-likelihood decreased: {:?}", outcome.ll_trace);
    }

    // (c) the root split of the informative tree matches an exhaustive
    // search over every question on that center's members.
    let members: Vec<(TriphoneKey, GaussStats)> = stats
        .iter()
        .filter(|(k, _)| k.center == informative_center)
        .map(|(k, s)| (*k, s.clone()))
        .collect();
    let mut oracle_best: Option<(f64, &Question)> = None;
    for q in &questions {
        if let Ok(gain) = split_gain(&members, q) {
            if oracle_best.map(|(g, _)| gain > g).unwrap_or(true) {
                oracle_best = Some((gain, q));
            }
        }
    }
    let (_, oracle_q) = oracle_best.unwrap();
    assert_eq!(oracle_q.side, ContextSide::Left);
    assert!(oracle_q.phones.contains(&informative_left));
    match outcome.tree.tree_for(informative_center) {
        unitforge::units::tying::TreeNode::Split { question, .. } => {
            assert_eq!(question, oracle_q, "root split disagrees with exhaustive search");
        }
        unitforge::units::tying::TreeNode::Leaf { .. } => {
            panic!("informative center was never split")
        }
    }

    // (d) a strict gain threshold stops growth below the budget.
    let strict = TyingConfig {
        max_leaves: 200,
        min_gain: 100.0,
        min_occupancy: 1.0,
    };
    let outcome = grow_tying_tree(&stats, &questions, n_phones, &strict).unwrap();
    assert!(
        outcome.tree.n_states < strict.max_leaves,
        "expected growth to stop below budget, got {}",
        outcome.tree.n_states
    );
    pass(7, "tree tying");
}

// ---------------------------------------------------------------------------
// 8. BPE alignment on 1,000 random sequences plus merge-list equality with a
//    recount-per-step oracle.
// ---------------------------------------------------------------------------

fn oracle_bpe_merges(
    corpora: &[Vec<usize>],
    max_merges: usize,
    base: usize,
    sil: usize,
) -> Vec<(usize, usize)> {
    let mut working = corpora.to_vec();
    let mut merges = Vec::new();
    for step in 0..max_merges {
        let mut counts: std::collections::HashMap<(usize, usize), u64> =
            std::collections::HashMap::new();
        for seq in &working {
            for i in 0..seq.len().saturating_sub(1) {
                let (a, b) = (seq[i], seq[i + 1]);
                if a != sil && b != sil {
                    *counts.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
        let mut entries: Vec<_> = counts.into_iter().filter(|(_, c)| *c >= 2).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let Some(&((l, r), _)) = entries.first() else { break };
        merges.push((l, r));
        let new_id = base + step;
        for seq in &mut working {
            let mut out = Vec::new();
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }
    merges
}

#[test]
fn acceptance_08_bpe_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let base = 40usize;
    let names: Vec<String> = (0..base)
        .map(|i| if i == 0 { "sil".to_string() } else { format!("p{i}") })
        .collect();
    // Frame alignment over 1,000 random label sequences, model trained per
    // small batch of sequences.
    for chunk in 0..100 {
        let seqs: Vec<Vec<usize>> = (0..10)
            .map(|_| {
                let len = rng.random_range(1..60usize);
                (0..len).map(|_| rng.random_range(0..8usize)).collect()
            })
            .collect();
        let corpora: Vec<Vec<usize>> = seqs
            .iter()
            .map(|ids| {
                dedup_runs(&FrameLabels::new("u", ids.clone(), base).unwrap())
                    .unwrap()
                    .symbols()
                    .to_vec()
            })
            .collect();
        let model = train_bpe(&corpora, base + 12, base, 0, &names).unwrap();
        for ids in &seqs {
            let labels = FrameLabels::new("u", ids.clone(), base).unwrap();
            let out = label_pp(&labels, &model).unwrap();
            assert_eq!(out.len(), labels.len(), "chunk {chunk}: frame count changed");
            for t in 1..ids.len() {
                if ids[t] == ids[t - 1] {
                    assert_eq!(out.ids()[t], out.ids()[t - 1], "label changed inside a run");
                }
            }
        }
        // Merge list equals the recount oracle (total symbols <= 100 here).
        let small: Vec<Vec<usize>> = corpora
            .iter()
            .take(3)
            .map(|s| s.iter().take(30).copied().collect())
            .collect();
        let symbols: usize = small.iter().map(Vec::len).sum();
        assert!(symbols <= 100);
        let model = train_bpe(&small, base + 10, base, 0, &names).unwrap();
        let got: Vec<(usize, usize)> = model.merges().iter().map(|m| (m.left, m.right)).collect();
        let want = oracle_bpe_merges(&small, 10, base, 0);
        assert_eq!(got, want, "chunk {chunk}: merge lists differ");
    }
    pass(8, "bpe alignment");
}

// ---------------------------------------------------------------------------
// 9. k-means: monotone objective and exhaustive-partition optimality on 8
//    planar points for 10 seeds.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_kmeans() {
    // Objective trace monotone on random data.
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let data = Tensor::randn(vec![80, 3], 1.0, &mut rng);
        let m = kmeans_fit(data.data(), 3, 6, seed, 40, 0.0).unwrap();
        for w in m.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective increased: {:?}", m.objective_trace);
        }
    }

    // 8 planar points: exhaustive oracle over all 2-partitions.
    let pts: Vec<[f64; 2]> = vec![
        [0.0, 0.0],
        [1.0, 0.2],
        [0.3, 0.9],
        [0.8, 1.0],
        [7.0, 6.0],
        [8.0, 6.3],
        [7.4, 7.1],
        [8.2, 7.0],
    ];
    let flat: Vec<f64> = pts.iter().flat_map(|p| p.iter().copied()).collect();
    let mut best = f64::INFINITY;
    for assign in 0u32..(1 << 8) {
        let (mut sums, mut counts) = ([[0.0f64; 2]; 2], [0usize; 2]);
        for (i, p) in pts.iter().enumerate() {
            let side = ((assign >> i) & 1) as usize;
            sums[side][0] += p[0];
            sums[side][1] += p[1];
            counts[side] += 1;
        }
        if counts[0] == 0 || counts[1] == 0 {
            continue;
        }
        let mut obj = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let side = ((assign >> i) & 1) as usize;
            let mx = sums[side][0] / counts[side] as f64;
            let my = sums[side][1] / counts[side] as f64;
            obj += (p[0] - mx).powi(2) + (p[1] - my).powi(2);
        }
        if obj < best {
            best = obj;
        }
    }
    for seed in 0..10u64 {
        let m = kmeans_fit(&flat, 2, 2, seed, 50, 0.0).unwrap();
        let got = *m.objective_trace.last().unwrap();
        assert!(
            (got - best).abs() <= 1e-9,
            "seed {seed}: objective {got} vs exhaustive optimum {best}"
        );
    }
    pass(9, "k-means");
}

// ---------------------------------------------------------------------------
// 10. End-to-end target-quality ordering on the oracle corpus.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_end_to_end_target_quality() {
    let seeds = [1u64, 2, 3];
    let mut nmi_margin_hits = 0usize;
    let mut probe_hits = 0usize;
    for &seed in &seeds {
        let preset = PresetConfig::desk(seed);
        assert!(preset.synth.utterances >= 200);
        assert!(preset.synth.context_coupling > 0.0);
        let report = run_study(&preset, &[Pipeline::Mono, Pipeline::Pt, Pipeline::Pp], seed)
            .unwrap_or_else(|e| panic!("seed {seed} study failed: {e}"));
        let metric = |p: Pipeline| {
            report
                .row(p)
                .and_then(|r| r.metrics.as_ref())
                .unwrap_or_else(|| panic!("seed {seed}: pipeline {} failed", p.name()))
                .clone()
        };
        let mono = metric(Pipeline::Mono);
        let pt = metric(Pipeline::Pt);
        let pp = metric(Pipeline::Pp);
        println!(
            "seed {seed}: nmi_states mono={:.4} pt={:.4} pp={:.4}; probe mono={:.4} pt={:.4}",
            mono.nmi_states,
            pt.nmi_states,
            pp.nmi_states,
            mono.probe_accuracy.unwrap(),
            pt.probe_accuracy.unwrap()
        );
        if pt.nmi_states >= mono.nmi_states + 0.02 && pp.nmi_states >= mono.nmi_states + 0.02 {
            nmi_margin_hits += 1;
        }
        if pt.probe_accuracy.unwrap() >= mono.probe_accuracy.unwrap() {
            probe_hits += 1;
        }
    }
    assert!(
        nmi_margin_hits >= 2,
        "NMI margin held for only {nmi_margin_hits} of 3 seeds"
    );
    assert!(
        probe_hits >= 2,
        "probe ordering held for only {probe_hits} of 3 seeds"
    );
    pass(10, "end-to-end target quality ordering");
}

// ---------------------------------------------------------------------------
// 11. uasr sanity on an easy 3-phone separable corpus.
// ---------------------------------------------------------------------------

/// Greedy label-mapping oracle: each generator class votes for its modal true
/// phone; accuracy is measured after that mapping.
fn greedy_mapped_accuracy(pred: &[FrameLabels], truth: &[FrameLabels]) -> f64 {
    let mut votes: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    for (p, t) in pred.iter().zip(truth) {
        for (&a, &b) in p.ids().iter().zip(t.ids()) {
            *votes.entry(a).or_default().entry(b).or_insert(0) += 1;
        }
    }
    let mapping: BTreeMap<usize, usize> = votes
        .iter()
        .map(|(&cluster, counts)| {
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&phone, _)| phone)
                .unwrap();
            (cluster, best)
        })
        .collect();
    let mut correct = 0u64;
    let mut total = 0u64;
    for (p, t) in pred.iter().zip(truth) {
        for (&a, &b) in p.ids().iter().zip(t.ids()) {
            total += 1;
            if mapping[&a] == b {
                correct += 1;
            }
        }
    }
    correct as f64 / total as f64
}

/// Easy corpus: three well-separated phones plus silence, all drawn over a
/// 40-phone inventory so chance is 1/40.
fn easy_three_phone_corpus(
    n_utts: usize,
    seed: u64,
) -> (Vec<FeatureSeq>, Vec<FrameLabels>, UnpairedText) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8usize;
    // Far-apart means, one per phone in {1, 2, 3}; silence near zero.
    let mean = |p: usize, d: usize| match p {
        1 => {
            if d < 2 {
                4.0
            } else {
                0.0
            }
        }
        2 => {
            if (2..4).contains(&d) {
                4.0
            } else {
                0.0
            }
        }
        3 => {
            if (4..6).contains(&d) {
                4.0
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let mut feats = Vec::new();
    let mut truth = Vec::new();
    let mut text = Vec::new();
    for u in 0..n_utts {
        let n_phones = rng.random_range(6..12usize);
        let mut seq = vec![0usize];
        for _ in 0..n_phones {
            let mut p = 1 + rng.random_range(0..3usize);
            while p == *seq.last().unwrap() {
                p = 1 + rng.random_range(0..3);
            }
            seq.push(p);
        }
        seq.push(0);
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for &p in &seq {
            let dur = 2 + rng.random_range(0..3usize);
            for _ in 0..dur {
                for d in 0..dim {
                    data.push(mean(p, d) + 0.25 * rng.sample::<f64, _>(rand_distr::StandardNormal));
                }
                ids.push(p);
            }
        }
        let t = ids.len();
        feats.push(FeatureSeq::new(Tensor::from_vec(vec![t, dim], data).unwrap(), 50.0).unwrap());
        truth.push(FrameLabels::new(format!("u{u}"), ids, 40).unwrap());
        let text_seq: Vec<usize> = seq.iter().copied().filter(|&p| p != 0).collect();
        text.push(text_seq);
    }
    (feats, truth, UnpairedText::new(text, 40).unwrap())
}

#[test]
fn acceptance_11_uasr_sanity() {
    let (feats, truth, text) = easy_three_phone_corpus(60, 1100);
    let cfg = UasrConfig {
        steps: 250,
        ..UasrConfig::desk(8)
    };
    let chance = 1.0 / cfg.inventory_size as f64;
    let mut best_acc = 0.0f64;
    for seed in [10u64, 20, 30] {
        let trained = train_uasr(&feats, &text, &cfg, seed).unwrap();
        let mut pred = Vec::with_capacity(feats.len());
        for f in &feats {
            let labels = frame_phoneme_labels(&trained.generator, f).unwrap();
            // Stride-1 output length equals T exactly, for every utterance.
            assert_eq!(labels.len(), f.num_frames());
            validate_alignment(&labels, f).unwrap();
            pred.push(labels);
        }
        let acc = greedy_mapped_accuracy(&pred, &truth);
        println!("uasr seed {seed}: mapped accuracy {acc:.4}");
        best_acc = best_acc.max(acc);
        // The stride override must not have touched the weights: a second
        // strided pass reproduces the training-stride logits.
        let strided = generator_forward(&trained.generator, &feats[0], None).unwrap();
        let strided2 = generator_forward(&trained.generator, &feats[0], None).unwrap();
        assert_eq!(strided, strided2);
    }
    assert!(
        best_acc >= 5.0 * chance,
        "best mapped accuracy {best_acc:.4} below 5x chance {:.4}",
        5.0 * chance
    );
    pass(11, "uasr sanity");
}

// ---------------------------------------------------------------------------
// 12. Determinism: identical config + seed => byte-identical artifacts.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_12_determinism() {
    use unitforge::commands::{cmd_eval, cmd_gen_units, cmd_pretrain, cmd_synth, cmd_train_uasr};
    use unitforge::config::RunConfig;

    let tiny = |dir: &std::path::Path| -> RunConfig {
        let mut cfg = RunConfig::default_config(dir.join("corpus"), dir.join("out"), 1212);
        let preset = cfg.presets.get_mut("desk").unwrap();
        preset.synth.inventory_size = 10;
        preset.synth.feature_dim = 6;
        preset.synth.utterances = 12;
        preset.synth.min_phones = 8;
        preset.synth.max_phones = 12;
        preset.text_sequences = 30;
        preset.uasr.inventory_size = 10;
        preset.uasr.feature_dim = 6;
        preset.uasr.steps = 20;
        preset.uasr.batch_size = 4;
        preset.uasr.aux_clusters = 6;
        preset.lt_top_k = 24;
        preset.tying = TyingConfig {
            max_leaves: 16,
            min_gain: 1.0,
            min_occupancy: 3.0,
        };
        preset.bpe_vocab = 16;
        preset.pc_clusters = 8;
        preset.backbone = BackboneConfig {
            encoder: None,
            input_dim: 6,
            context: ContextConfig {
                num_layers: 1,
                model_dim: 16,
                ffn_dim: 32,
                num_heads: 2,
            },
            max_positions: 256,
        };
        preset.pretrain.steps = 10;
        preset.pretrain.schedule = unitforge::numkit::ScheduleConfig::pretrain(1e-3, 10);
        cfg
    };

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let c1 = tiny(d1.path());
    let c2 = tiny(d2.path());
    for c in [&c1, &c2] {
        cmd_synth(c).unwrap();
        cmd_train_uasr(c).unwrap();
        cmd_gen_units(c, Pipeline::Mono).unwrap();
        cmd_gen_units(c, Pipeline::Pt).unwrap();
        cmd_pretrain(c, Pipeline::Mono).unwrap();
        cmd_eval(c).unwrap();
    }
    let read = |c: &RunConfig, rel: &str| std::fs::read(c.paths.out_dir.join(rel)).unwrap();
    for rel in [
        "units/mono.units",
        "units/pt.units",
        "uasr/manifest.json",
        "uasr/loss_log.json",
        "checkpoints/mono/backbone/manifest.json",
        "checkpoints/mono/head/manifest.json",
        "report.json",
    ] {
        assert_eq!(read(&c1, rel), read(&c2, rel), "artifact `{rel}` differs between runs");
    }
    // Corpus artifacts written by synth are byte-identical too.
    for rel in ["truth_phones.units", "truth_states.units", "text.txt", "manifest.json"] {
        let a = std::fs::read(c1.paths.corpus_dir.join(rel)).unwrap();
        let b = std::fs::read(c2.paths.corpus_dir.join(rel)).unwrap();
        assert_eq!(a, b, "corpus artifact `{rel}` differs between runs");
    }
    pass(12, "determinism");
}
