// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use poshid::probe::Segment;
use poshid::toymodel::{
    alibi_slopes, forward, init_model, AttentionCaptureRequest, ChannelEdit, EditOp,
    ForwardOverrides, LayerRange, Model, ModelConfig, PositionScheme, Session, Weights,
};
use proptest::prelude::*;

use common::random_tokens;

fn row_bits(m: &poshid::numerics::Matrix, i: usize) -> Vec<u64> {
    m.row(i).iter().map(|v| v.to_bits()).collect()
}

fn schemes() -> [PositionScheme; 3] {
    [
        PositionScheme::Rope { base: 10_000.0 },
        PositionScheme::Alibi,
        PositionScheme::Nope,
    ]
}

#[test]
fn incremental_session_matches_full_forward() {
    for (k, scheme) in schemes().into_iter().enumerate() {
        let m = init_model(&ModelConfig::desk(k as u64).with_scheme(scheme)).unwrap();
        let tokens = random_tokens(40, 11 + k as u64);
        let full = forward(&m, &tokens, &ForwardOverrides::none())
            .unwrap()
            .logits;
        let mut s = Session::new(&m, ForwardOverrides::none()).unwrap();
        for (i, &t) in tokens.iter().enumerate() {
            s.push(t).unwrap();
            assert_eq!(
                row_bits(&full, i),
                s.logits_at(i)
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn captures_do_not_change_logits() {
    let m = init_model(&ModelConfig::desk(4)).unwrap();
    let tokens = random_tokens(30, 4);
    let plain = forward(&m, &tokens, &ForwardOverrides::none()).unwrap();
    let ov = ForwardOverrides {
        capture_hidden: vec![1, 4, 8],
        capture_attention: Some(AttentionCaptureRequest::full(1..=8)),
        ..Default::default()
    };
    let captured = forward(&m, &tokens, &ov).unwrap();
    assert_eq!(plain.logits, captured.logits);
    assert!(captured.hidden_dump.is_some() && captured.attention.is_some());
}

#[test]
fn future_tokens_never_leak_backwards() {
    let m = init_model(&ModelConfig::desk(5)).unwrap();
    let tokens = random_tokens(32, 5);
    let long = forward(&m, &tokens, &ForwardOverrides::none())
        .unwrap()
        .logits;
    let short = forward(&m, &tokens[..20], &ForwardOverrides::none())
        .unwrap()
        .logits;
    for i in 0..20 {
        assert_eq!(row_bits(&long, i), row_bits(&short, i));
    }
}

fn zero_model(n_heads: usize, scheme: PositionScheme) -> Model {
    let c = ModelConfig {
        n_layers: 2,
        n_heads,
        d_model: 4 * n_heads,
        d_head: 4,
        d_ff: 8,
        max_seq: 64,
        ..ModelConfig::desk(0)
    }
    .with_scheme(scheme);
    Model::from_weights(c.clone(), Weights::zeros(&c)).unwrap()
}

#[test]
fn alibi_hand_example() {
    assert_eq!(alibi_slopes(2), vec![1.0 / 16.0, 1.0 / 256.0]);
    let m = zero_model(2, PositionScheme::Alibi);
    let ov = ForwardOverrides {
        capture_attention: Some(AttentionCaptureRequest::full([1])),
        ..Default::default()
    };
    let cap = forward(&m, &[256, 1, 2, 3], &ov)
        .unwrap()
        .attention
        .unwrap();
    // With zero queries the scores are -slope * distance.
    for (h, slope) in [(0usize, 1.0f64 / 16.0), (1, 1.0 / 256.0)] {
        let w: Vec<f64> = (0..4).map(|j| (-slope * (3 - j) as f64).exp()).collect();
        let z: f64 = w.iter().sum();
        let row = cap.row(1, h, 3).unwrap();
        for j in 0..4 {
            assert!((row[j] - w[j] / z).abs() < 1e-15, "head {h} col {j}");
        }
    }
}

#[test]
fn nope_with_zero_scores_is_uniform() {
    let m = zero_model(1, PositionScheme::Nope);
    let ov = ForwardOverrides {
        capture_attention: Some(AttentionCaptureRequest::full([1, 2])),
        ..Default::default()
    };
    let cap = forward(&m, &random_tokens(12, 0), &ov)
        .unwrap()
        .attention
        .unwrap();
    for ((_, _), i, row) in cap.iter_rows() {
        for &a in row {
            assert!((a - 1.0 / (i + 1) as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn channel_edit_only_reaches_its_rows_and_later() {
    let m = init_model(&ModelConfig::desk(6)).unwrap();
    let tokens = random_tokens(24, 6);
    let base = forward(&m, &tokens, &ForwardOverrides::none())
        .unwrap()
        .logits;
    let ov = ForwardOverrides {
        channel_edits: vec![ChannelEdit {
            layers: LayerRange::new(3, 3).unwrap(),
            tokens: Segment::new(10, 12, "g").unwrap(),
            channel: 17,
            op: EditOp::Add(5.0),
        }],
        ..Default::default()
    };
    let edited = forward(&m, &tokens, &ov).unwrap().logits;
    for i in 0..10 {
        assert_eq!(row_bits(&base, i), row_bits(&edited, i));
    }
    assert_ne!(row_bits(&base, 10), row_bits(&edited, 10));
}

#[test]
fn edit_by_scale_one_is_identity() {
    let m = init_model(&ModelConfig::desk(7)).unwrap();
    let tokens = random_tokens(16, 7);
    let base = forward(&m, &tokens, &ForwardOverrides::none())
        .unwrap()
        .logits;
    let ov = ForwardOverrides {
        channel_edits: vec![ChannelEdit {
            layers: LayerRange::new(1, 8).unwrap(),
            tokens: Segment::new(0, 16, "all").unwrap(),
            channel: 5,
            op: EditOp::Scale(1.0),
        }],
        ..Default::default()
    };
    assert_eq!(forward(&m, &tokens, &ov).unwrap().logits, base);
}

#[test]
fn rope_logits_depend_on_relative_positions_only() {
    let m = init_model(&ModelConfig::desk(8)).unwrap();
    let tokens = random_tokens(20, 8);
    let base = forward(&m, &tokens, &ForwardOverrides::none())
        .unwrap()
        .logits;
    let ov = ForwardOverrides {
        position_ids: Some((0..20).map(|i| i + 500).collect()),
        ..Default::default()
    };
    let moved = forward(&m, &tokens, &ov).unwrap().logits;
    for (a, b) in base.data().iter().zip(moved.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn invalid_overrides_are_rejected() {
    let m = init_model(&ModelConfig::desk(0)).unwrap();
    let tokens = random_tokens(8, 0);
    let bad_channel = ForwardOverrides {
        channel_edits: vec![ChannelEdit {
            layers: LayerRange::new(1, 1).unwrap(),
            tokens: Segment::new(0, 2, "g").unwrap(),
            channel: 65,
            op: EditOp::Add(1.0),
        }],
        ..Default::default()
    };
    assert!(forward(&m, &tokens, &bad_channel).is_err());
    let bad_pos = ForwardOverrides {
        position_ids: Some(vec![0, 1, 5000]),
        ..Default::default()
    };
    assert!(forward(&m, &tokens, &bad_pos).is_err());
    assert!(forward(&m, &[], &ForwardOverrides::none()).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_identity() {
    let dir = tempfile::tempdir().unwrap();
    let m = init_model(&ModelConfig::desk(9).with_scheme(PositionScheme::Alibi)).unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.id(), m.id());
    assert_eq!(back.config(), m.config());
    assert_ne!(init_model(&ModelConfig::desk(10)).unwrap().id(), m.id());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attention_rows_are_causal_and_stochastic(seed in 0u64..1000, len in 2usize..24) {
        let m = init_model(&ModelConfig::desk(seed)).unwrap();
        let ov = ForwardOverrides {
            capture_attention: Some(AttentionCaptureRequest::full(1..=8)),
            ..Default::default()
        };
        let cap = forward(&m, &random_tokens(len, seed), &ov).unwrap().attention.unwrap();
        for (_, i, row) in cap.iter_rows() {
            prop_assert!(row.len() <= len);
            prop_assert!(row.iter().skip(i + 1).all(|&a| a == 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
