use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use instrec_core::templates::{RetrievalConfig, TemplateLibrary, TemplateSpec};
use instrec_core::trie::{build_trie, mask_logits, InstructionLibrary};
use instrec_core::types::{Instruction, ReasoningTrace};
use instrec_core::{build_vocabulary, HashedBagOfWords, TokenId, Tokenizer};

const WORDS: &[&str] = &["save", "phone", "number", "open", "map", "call", "send", "book", "hotel", "room", "set", "alarm"];

fn library() -> impl Strategy<Value = InstructionLibrary> {
    prop::collection::btree_set(prop::collection::vec(prop::sample::select(WORDS), 1..5), 1..20).prop_map(|set| {
        let ins = set
            .into_iter()
            .enumerate()
            .map(|(i, w)| Instruction::new(format!("i{i:02}"), w.join(" ")))
            .collect();
        InstructionLibrary::new(ins).unwrap()
    })
}

fn logits_table() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, WORDS.len() + 3), 6)
}

proptest! {
    #[test]
    fn greedy_stays_in_library(lib in library(), table in logits_table()) {
        let vocab = build_vocabulary(WORDS).unwrap();
        let trie = build_trie(&lib, &vocab).unwrap();
        let mut scorer = |p: &[TokenId]| Ok(table[p.len()].clone());
        let d = trie.constrained_decode(&mut scorer).unwrap();
        let ins = lib.get(&d.instruction_id).unwrap();
        prop_assert_eq!(vocab.decode(&d.tokens[..d.tokens.len() - 1]).unwrap(), ins.surface.clone());
        prop_assert_eq!(*d.tokens.last().unwrap(), trie.eos());
    }

    #[test]
    fn top_k_is_distinct_sorted_and_beats_greedy(lib in library(), table in logits_table(), k in 1usize..4) {
        let vocab = build_vocabulary(WORDS).unwrap();
        let trie = build_trie(&lib, &vocab).unwrap();
        let k = k.min(lib.len());
        let mut scorer = |p: &[TokenId]| Ok(table[p.len()].clone());
        let top = trie.top_k_decode(&mut scorer, k).unwrap();
        prop_assert_eq!(top.len(), k);
        let ids: BTreeSet<_> = top.iter().map(|d| &d.instruction_id).collect();
        prop_assert_eq!(ids.len(), k);
        prop_assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
        let greedy = trie.constrained_decode(&mut scorer).unwrap();
        prop_assert!(top[0].score >= greedy.score);
    }

    #[test]
    fn valid_next_matches_library_prefixes(lib in library()) {
        let vocab = build_vocabulary(WORDS).unwrap();
        let trie = build_trie(&lib, &vocab).unwrap();
        for ins in lib.iter() {
            let toks = vocab.encode(&ins.surface).unwrap();
            for j in 0..=toks.len() {
                let expected: BTreeSet<TokenId> = lib
                    .iter()
                    .filter_map(|o| {
                        let mut t = vocab.encode(&o.surface).unwrap();
                        t.push(trie.eos());
                        (t.len() > j && t[..j] == toks[..j]).then(|| t[j])
                    })
                    .collect();
                let got: BTreeSet<TokenId> = trie.valid_next(&toks[..j]).unwrap().into_iter().collect();
                prop_assert_eq!(got, expected);
            }
        }
    }

    #[test]
    fn masking_keeps_only_valid(logits in prop::collection::vec(-5.0f64..5.0, 8), valid in prop::collection::btree_set(0u32..8, 1..8)) {
        let valid: Vec<TokenId> = valid.into_iter().collect();
        let masked = mask_logits(&logits, &valid, 8).unwrap();
        for (i, v) in masked.iter().enumerate() {
            if valid.contains(&(i as TokenId)) {
                prop_assert_eq!(*v, logits[i]);
            } else {
                prop_assert_eq!(*v, f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn lower_threshold_never_loses_a_match(words in prop::collection::vec(prop::sample::select(WORDS), 1..8), lo in 0.05f64..0.5, gap in 0.0f64..0.45) {
        let specs = vec![
            TemplateSpec { id: "a".into(), name: "save phone".into(), tags: vec![], scenarios: String::new(), steps: vec!["save number".into()] },
            TemplateSpec { id: "b".into(), name: "book hotel".into(), tags: vec![], scenarios: String::new(), steps: vec!["set alarm".into()] },
        ];
        let lib = TemplateLibrary::with_templates(Arc::new(HashedBagOfWords::default()), specs).unwrap();
        let trace = ReasoningTrace::parse(&format!("<REASONING>{}</REASONING>", words.join(" "))).unwrap();
        let at_lo = lib.retrieve("q", &trace, &RetrievalConfig::new(lo, 0.5).unwrap()).unwrap().map(|r| r.template.id().to_string());
        let at_hi = lib.retrieve("q", &trace, &RetrievalConfig::new(lo + gap, 0.5).unwrap()).unwrap().map(|r| r.template.id().to_string());
        if at_hi.is_some() {
            prop_assert_eq!(at_lo, at_hi);
        }
    }
}
