use mops_core::backbone::{decode_backbone, encode_backbone, forward_prompted};
use mops_core::compression::{prune_structured, quantize_int8, sparsity};
use mops_core::corpus::{generate_corpus, CorpusConfig};
use mops_core::federated::{fedavg, partition_skewed, skewed_sizes, Aggregation};
use mops_core::mop::{forward_mop, gate, GateMode, GateSpan, GatingParams, MopOptions};
use mops_core::numerics::{masked_softmax_rows, Mask, Matrix};
use mops_core::trainer::TrainableState;
use mops_core::{Backbone, ModelConfig};
use proptest::prelude::*;

fn tiny(experts: usize, per_expert: usize, injection_layer: usize, norm: bool) -> ModelConfig {
    ModelConfig {
        experts,
        prompts_per_expert: per_expert,
        injection_layer,
        residual: norm,
        norm,
        ..ModelConfig::literal_tiny()
    }
}

fn tokens_strategy(vocab: usize, max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..vocab, 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_lies_on_the_simplex(
        x in prop::collection::vec(-50.0f64..50.0, 6),
        seed in 0u64..1000,
        shift in -3.0f64..3.0,
    ) {
        let config = ModelConfig::literal_tiny();
        let mut params = GatingParams::init(&config, seed).unwrap();
        for v in params.output.as_mut_slice() {
            *v += shift;
        }
        let g = gate(&params, &x).unwrap();
        prop_assert_eq!(g.len(), config.total_prompts());
        prop_assert!(g.as_slice().iter().all(|v| *v >= 0.0));
        prop_assert!((g.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn masked_rows_are_distributions(n in 1usize..8, k in 0usize..5, scale in 0.1f64..30.0, seed in 0u64..500) {
        let size = n + k;
        let logits = Matrix::from_fn(size, size, |i, j| {
            scale * (((i * 31 + j * 17) as u64 ^ seed) % 97) as f64 / 97.0 - scale / 2.0
        });
        let mask = Mask::extended(n, k);
        let a = masked_softmax_rows(&logits, &mask).unwrap();
        for i in 0..size {
            let row = a.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, v) in row.iter().enumerate() {
                if !mask.allows(i, j) {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
        // Prompt keys are open to every query; tokens never look ahead.
        for i in 0..size {
            for j in 0..size {
                let expected = j < k || (i >= k && j <= i);
                prop_assert_eq!(mask.allows(i, j), expected);
            }
        }
    }

    #[test]
    fn all_ones_gate_matches_ungated(
        tokens in tokens_strategy(12, 8),
        experts in 1usize..4,
        per_expert in 1usize..3,
        layer in 1usize..=3,
        norm in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let config = tiny(experts, per_expert, layer, norm);
        let b = Backbone::init(&config, seed).unwrap();
        let s = TrainableState::init(&config, seed + 1).unwrap();
        let run = |mode| {
            forward_mop(&b, &b.input_prompts, &s.injected, &s.gating, &tokens, MopOptions { mode, span: GateSpan::All })
                .unwrap()
        };
        let ones = run(GateMode::AllOnes);
        let plain = run(GateMode::Ungated);
        prop_assert_eq!(ones.logits().as_slice(), plain.logits().as_slice());
        prop_assert_eq!(ones.logits().shape(), (config.vocab_size, tokens.len()));
    }

    #[test]
    fn no_experts_reduces_to_prompted_forward(tokens in tokens_strategy(12, 8), layer in 1usize..=3, seed in 0u64..1000) {
        let mut config = tiny(0, 0, layer, true);
        config.keep_first_layer_prompts = true;
        let b = Backbone::init(&config, seed).unwrap();
        let s = TrainableState::init(&config, seed).unwrap();
        let gated = forward_mop(&b, &b.input_prompts, &s.injected, &s.gating, &tokens, MopOptions::default()).unwrap();
        let plain = forward_prompted(&b, &b.input_prompts, &tokens).unwrap();
        prop_assert_eq!(gated.logits().as_slice(), plain.logits().as_slice());
    }

    #[test]
    fn fedavg_stays_inside_the_client_range(
        weights in prop::collection::vec(0.05f64..1.0, 1..6),
        seed in 0u64..1000,
    ) {
        let config = ModelConfig::literal_tiny();
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let states: Vec<TrainableState> =
            (0..weights.len()).map(|i| TrainableState::init(&config, seed * 16 + i as u64).unwrap()).collect();
        let server = TrainableState::init(&config, seed + 99).unwrap();
        let avg = fedavg(&server, &states, &weights, Aggregation::PromptsAndGate).unwrap();
        for (i, v) in avg.injected.prompts.as_slice().iter().enumerate() {
            let lo = states.iter().map(|s| s.injected.prompts.as_slice()[i]).fold(f64::INFINITY, f64::min);
            let hi = states.iter().map(|s| s.injected.prompts.as_slice()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
        let prompts_only = fedavg(&server, &states, &weights, Aggregation::PromptsOnly).unwrap();
        prop_assert_eq!(&prompts_only.gating, &server.gating);
        prop_assert_eq!(&prompts_only.injected.prompts, &avg.injected.prompts);
    }

    #[test]
    fn skewed_sizes_cover_the_task(total in 20usize..2000, n in 2usize..30, skew in 1.0f64..20.0) {
        prop_assume!(total >= n);
        let sizes = skewed_sizes(total, n, skew);
        prop_assert_eq!(sizes.len(), n);
        prop_assert_eq!(sizes.iter().sum::<usize>(), total);
        prop_assert!(sizes[..n - 1].iter().all(|s| *s <= sizes[n - 1]));
    }

    #[test]
    fn partitions_are_a_disjoint_cover(clients in 1usize..12, skew in 1.0f64..16.0, seed in 0u64..200) {
        let mut cc = CorpusConfig::toy_four();
        cc.samples_per_task = 40;
        let train = generate_corpus(&cc, seed).unwrap().train_owned();
        let parts = partition_skewed(&train, clients, skew, seed).unwrap();
        let mut dealt: Vec<_> = parts.iter().flat_map(|p| p.samples.iter().map(|s| (s.task, s.tokens.clone()))).collect();
        let mut all: Vec<_> = train.iter().map(|s| (s.task, s.tokens.clone())).collect();
        dealt.sort();
        all.sort();
        prop_assert_eq!(dealt, all);
        for p in &parts {
            prop_assert_eq!(p.task_counts.iter().map(|(_, c)| c).sum::<usize>(), p.sample_count());
        }
    }

    #[test]
    fn structured_pruning_then_int8_keeps_the_pattern(seed in 0u64..500, nm in prop::sample::select(vec![(2usize, 4usize), (4, 8), (1, 2)])) {
        let config = ModelConfig::literal_tiny();
        let b = Backbone::init(&config, seed).unwrap();
        let pruned = prune_structured(&b, nm.0, nm.1).unwrap();
        let q = quantize_int8(&pruned).unwrap();
        prop_assert_eq!(&quantize_int8(&q).unwrap(), &q);
        // Quantising never resurrects pruned weights.
        prop_assert!(sparsity(&q) >= sparsity(&pruned));
    }

    #[test]
    fn backbone_bytes_round_trip(seed in 0u64..1000, norm in any::<bool>()) {
        let config = tiny(2, 2, 2, norm);
        let b = Backbone::init(&config, seed).unwrap();
        let back = decode_backbone(&encode_backbone(&b).unwrap()).unwrap();
        prop_assert_eq!(back.bit_pattern(), b.bit_pattern());
        prop_assert_eq!(back.config, b.config);
    }
}
