use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use permfl_core::compress::Prg;
use permfl_core::engine::EngineError;
use permfl_core::secenv::{open, seal, Envelope, SecError, SecretKey};
use permfl_core::{Algorithm, Engine, ProblemSpec, RunConfig};

#[test]
fn every_single_bit_flip_is_rejected() {
    let mut prg = Prg::new(77);
    let key = SecretKey::from_bytes([0x42; 16]);
    for case in 0..1000 {
        let len = 1 + prg.below(64) as usize;
        let payload: Vec<u8> = (0..len).map(|_| prg.next_u64() as u8).collect();
        let wire = seal(&key, prg.below(1000), prg.below(8) as u32, &payload)
            .unwrap()
            .to_bytes();
        let bit = prg.below(wire.len() as u64 * 8) as usize;
        let mut bad = wire.clone();
        bad[bit / 8] ^= 1 << (bit % 8);
        let verdict = Envelope::from_bytes(&bad).and_then(|env| open(&key, &env));
        assert!(verdict.is_err(), "case {case}: flip of bit {bit} accepted");
    }
}

#[test]
fn nonces_never_repeat() {
    let key = SecretKey::from_bytes([1; 16]);
    let mut seen = HashSet::with_capacity(100_000);
    for i in 0..100_000u64 {
        let env = seal(&key, i, 0, &[]).unwrap();
        assert!(seen.insert(env.nonce), "nonce repeated after {i} envelopes");
    }
}

#[test]
fn wrong_key_fails_authentication() {
    let env = seal(&SecretKey::from_bytes([1; 16]), 3, 1, b"abc").unwrap();
    assert_eq!(open(&SecretKey::from_bytes([2; 16]), &env), Err(SecError::AuthFailure));
}

fn engine(alg: Algorithm) -> Engine {
    let p = ProblemSpec::new(4, 12, 3, 4, 1.0).generate().unwrap();
    let mut cfg = RunConfig::new(alg, 0.3, 6);
    cfg.randk_k = 3;
    Engine::with_key(&p, cfg, Some(SecretKey::from_bytes([8; 16]))).unwrap()
}

#[test]
fn replayed_envelopes_are_rejected() {
    for alg in Algorithm::ALL.into_iter().filter(|a| a.encrypted()) {
        let mut e = engine(alg);
        let stash: Arc<Mutex<Option<Envelope>>> = Arc::default();
        let s = stash.clone();
        e.set_tamper(move |round, env| {
            let mut slot = s.lock().unwrap();
            if round == 0 && slot.is_none() {
                *slot = Some(env.clone());
            } else if round == 2 && env.header.client == 0 {
                *env = slot.clone().unwrap();
            }
        });
        match e.run() {
            Err(EngineError::Protocol(msg)) => assert!(msg.contains("replay"), "{alg}: {msg}"),
            other => panic!("{alg}: replay not rejected: {other:?}"),
        }
    }
}

#[test]
fn tampered_round_leaves_clients_untouched() {
    for alg in Algorithm::ALL.into_iter().filter(|a| a.encrypted()) {
        let mut clean = engine(alg);
        for k in 0..2 {
            clean.step(k).unwrap();
        }
        let mut e = engine(alg);
        e.set_tamper(|round, env| {
            if round == 2 {
                if let Some(b) = env.ciphertext.first_mut() {
                    *b ^= 1;
                } else {
                    env.tag[0] ^= 1;
                }
            }
        });
        for k in 0..2 {
            e.step(k).unwrap();
        }
        assert!(matches!(e.step(2), Err(EngineError::Auth { round: 2, .. })), "{alg}");
        for (a, b) in e.clients().iter().zip(clean.clients()) {
            assert!(a.x().bits_eq(b.x()), "{alg}: iterate moved after failed auth");
        }
    }
}

#[test]
fn secret_key_debug_is_redacted() {
    let key = SecretKey::from_bytes([0xAB; 16]);
    let shown = format!("{key:?}");
    assert!(!shown.to_lowercase().contains("ab"), "{shown}");
}
