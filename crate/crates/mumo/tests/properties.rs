use mumo::checkpoint::{decode, encode};
use mumo::config::RunConfig;
use mumo::corpus::{parse_jsonl, prepare_samples, BUNDLED_CORPUS};
use mumo::vocab;
use mumo_core::model::{ParamStore, SampleBuilder};
use mumo_core::partition::CutRuleSet;
use mumo_core::tensor::Tensor;
use mumo_core::tokenizer::{TokenizerKind, Vocab};
use mumo_core::unigraph::GraphConfig;
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
            .prop_map(move |data| Tensor::from_vec(shape.clone(), data))
    })
}

fn store() -> impl Strategy<Value = ParamStore<f32>> {
    prop::collection::vec(("[a-z][a-z0-9._]{0,12}", tensor()), 0..6).prop_map(|entries| {
        let mut seen = std::collections::BTreeSet::new();
        ParamStore::from_entries(entries.into_iter().filter(|(n, _)| seen.insert(n.clone())).collect())
    })
}

fn bits(p: &ParamStore<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    p.entries()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_identical(p in store()) {
        let bytes = encode(&p);
        let back: ParamStore<f32> = decode(&bytes).unwrap();
        // Compared bitwise so NaN payloads count too.
        prop_assert_eq!(bits(&back), bits(&p));
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(p in store(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&p);
        let n = cut.index(bytes.len());
        prop_assert!(decode::<f32>(&bytes[..n]).is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected(key in "[a-z_]{1,12}", section in 0usize..4) {
        let known: [&[&str]; 4] = [
            &["model", "graph", "data", "pretrain", "finetune", "seed", "precision", "tokenizer", "out_dir", "debug_dumps"],
            &["d", "n_layers", "n_heads", "fusion_start", "mpnn_iters", "ffn_mult", "vocab_size", "max_len",
              "rbf_bins", "abf_bins", "use_graph", "use_geometry", "injection", "pooling", "structure_keys",
              "attn_dropout", "task"],
            &["lr", "warmup", "steps", "batch_size", "clip", "checkpoint_every"],
            &["corpus", "labelled", "vocab", "valid_fraction", "workers", "queue_capacity"],
        ];
        prop_assume!(!known[section].contains(&key.as_str()));
        let text = match section {
            0 => format!(r#"{{"{key}": 1}}"#),
            1 => format!(r#"{{"model": {{"{key}": 1}}}}"#),
            2 => format!(r#"{{"pretrain": {{"{key}": 1}}}}"#),
            _ => format!(r#"{{"data": {{"{key}": 1}}}}"#),
        };
        prop_assert!(RunConfig::from_json(&text).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn queue_preserves_input_order(workers in 1usize..5, capacity in 1usize..8, take in 1usize..30) {
        let records = parse_jsonl(BUNDLED_CORPUS, "bundled").unwrap();
        let records = &records[..take];
        let vocab = Vocab::build(records.iter().map(|r| r.smiles.as_str()), TokenizerKind::Substructure).unwrap();
        let rules = CutRuleSet::default();
        let b = SampleBuilder {
            vocab: &vocab,
            tokenizer: TokenizerKind::Substructure,
            max_len: 128,
            graph: GraphConfig::default(),
            rules: &rules,
        };
        let serial = prepare_samples(records, &b, 1, 1).unwrap();
        let parallel = prepare_samples(records, &b, workers, capacity).unwrap();
        prop_assert_eq!(serial, parallel);
    }
}

#[test]
fn vocab_file_round_trip_keeps_ids() {
    let records = parse_jsonl(BUNDLED_CORPUS, "bundled").unwrap();
    let v = Vocab::build(records.iter().map(|r| r.smiles.as_str()), TokenizerKind::Substructure).unwrap();
    let text = vocab::to_json(&v, TokenizerKind::Substructure);
    let (back, kind) = vocab::from_json(&text).unwrap();
    assert_eq!(kind, TokenizerKind::Substructure);
    assert_eq!(back.to_map(), v.to_map());
    assert_eq!(vocab::to_json(&back, kind), text);
}
