use pocketlm_core::synth::synth_vocab;
use pocketlm_core::tokenizer::StreamDecoder;
use pocketlm_core::Vocabulary;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocabulary {
    synth_vocab(600, &mut ChaCha8Rng::seed_from_u64(3))
}

proptest! {
    #[test]
    fn decode_inverts_encode(text in "\\PC{0,40}") {
        let v = vocab();
        let ids = v.encode(&text, true);
        prop_assert_eq!(ids[0], v.bos_id());
        prop_assert_eq!(v.decode(&ids).unwrap(), text);
    }

    #[test]
    fn streaming_matches_batch(text in "[a-z ]{0,10}[é中😀]{0,3}[a-z ]{0,10}") {
        let v = vocab();
        let ids = v.encode(&text, false);
        let mut d = StreamDecoder::new();
        let mut out = String::new();
        for &id in &ids {
            out.push_str(&d.push(&v, id).unwrap());
        }
        out.push_str(&d.finish());
        prop_assert_eq!(out, text);
    }

    #[test]
    fn never_longer_than_bytes(text in "[a-z ]{0,60}") {
        let v = vocab();
        prop_assert!(v.encode(&text, false).len() <= text.len());
    }
}

#[test]
fn merges_shorten_common_text() {
    let v = vocab();
    let text = "the tea is in the east hall";
    assert!(v.encode(text, false).len() < text.len());
}
