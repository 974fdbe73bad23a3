//! Checkpoint serialization hardening: bit-exact round trips and a
//! truncation fuzz that cuts the byte stream at every single offset. A
//! format that silently tolerates a prefix would let a torn write
//! masquerade as a valid encoder.

use safetext::encoder::{checkpoint, EncoderConfig, EncoderState, Pooling, Vocab};

fn tiny_encoder() -> EncoderState {
    let corpus = ["a small boat", "a quiet field", "one lewd pose"];
    let vocab = Vocab::build(&corpus, 16).unwrap();
    let config = EncoderConfig {
        max_len: 4,
        d_model: 4,
        layers: 1,
        heads: 1,
        d_ff: 8,
        pooling: Pooling::Mean,
        seed: 7,
    };
    EncoderState::init(config, vocab).unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let state = tiny_encoder();
    let bytes = checkpoint::to_bytes(&state).unwrap();
    let restored = checkpoint::from_bytes(&bytes).unwrap();
    let again = checkpoint::to_bytes(&restored).unwrap();
    assert_eq!(bytes, again, "serialize-deserialize-serialize changed bytes");
    assert_eq!(state.flat_params(), restored.flat_params());
    assert_eq!(state.config, restored.config);
    assert_eq!(state.frozen, restored.frozen);
}

#[test]
fn save_and_load_through_a_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.stxt");
    let state = tiny_encoder().frozen_copy();
    checkpoint::save(&state, &path).unwrap();
    let restored = checkpoint::load(&path).unwrap();
    assert_eq!(state.flat_params(), restored.flat_params());
    assert!(restored.frozen);
}

#[test]
fn every_truncated_prefix_is_rejected() {
    let state = tiny_encoder();
    let bytes = checkpoint::to_bytes(&state).unwrap();
    assert!(bytes.len() > 64, "fixture unexpectedly small");
    for cut in 0..bytes.len() {
        let got = checkpoint::from_bytes(&bytes[..cut]);
        assert!(
            got.is_err(),
            "prefix of {cut}/{} bytes was accepted as a valid checkpoint",
            bytes.len()
        );
    }
}

#[test]
fn trailing_garbage_is_rejected() {
    let state = tiny_encoder();
    let mut bytes = checkpoint::to_bytes(&state).unwrap();
    bytes.push(0);
    assert!(checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn corrupted_magic_is_rejected() {
    let state = tiny_encoder();
    let mut bytes = checkpoint::to_bytes(&state).unwrap();
    bytes[0] ^= 0xFF;
    assert!(checkpoint::from_bytes(&bytes).is_err());
}
