use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::asm::parse_disassembly;
use crate::encoder::{load_model, EncoderConfig};
use crate::tokenizer::{encode, rebase, WordPieceTrainer};

const LISTINGS: [&str; 2] = [
    "\
0x10: push rbp
0x11: mov eax, edi
0x13: cmp eax, 3
0x16: jle 0x1e
0x18: add eax, 1
0x1b: jmp 0x13
0x1e: pop rbp
0x1f: ret",
    "\
0x400: xor eax, eax
0x402: test edi, edi
0x404: je 0x40c
0x406: imul eax, edi
0x409: dec edi
0x40a: jne 0x406
0x40c: ret",
];

fn fixture() -> (Vocab, Vec<TokenSequence>) {
    let fs: Vec<_> = LISTINGS
        .iter()
        .map(|l| rebase(&parse_disassembly(l).unwrap()))
        .collect();
    let texts: Vec<String> = fs.iter().map(|f| f.body_text()).collect();
    let vocab = WordPieceTrainer::new(2 + 8 + 256 + 48, 1)
        .with_max_instructions(8)
        .train(&texts)
        .unwrap();
    let seqs = fs.iter().map(|f| encode(f, &vocab, 64)).collect();
    (vocab, seqs)
}

fn tiny(vocab: &Vocab) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        max_seq_len: 64,
        max_instructions: vocab.max_instructions(),
        hidden_dim: 16,
        layers: 1,
        heads: 2,
        ffn_dim: 32,
        mlm_head: true,
        jtp_head: true,
        init_std: 0.1,
    }
}

#[test]
fn plan_is_deterministic_per_seed() {
    let (vocab, seqs) = fixture();
    let a = plan_masking(&seqs[0], &vocab, 0.5, 0.5, 7).unwrap();
    let b = plan_masking(&seqs[0], &vocab, 0.5, 0.5, 7).unwrap();
    assert_eq!(a, b);
    let differs = (8..20).any(|s| plan_masking(&seqs[0], &vocab, 0.5, 0.5, s).unwrap() != a);
    assert!(differs);
}

#[test]
fn full_rates_select_everything() {
    let (vocab, seqs) = fixture();
    let seq = &seqs[0];
    let plan = plan_masking(seq, &vocab, 1.0, 1.0, 3).unwrap();
    let jumps: Vec<usize> = (0..seq.len()).filter(|&i| seq.jump_symbol_mask[i]).collect();
    let plain: Vec<usize> = (0..seq.len()).filter(|&i| !seq.jump_symbol_mask[i]).collect();
    assert_eq!(plan.jtp_positions, jumps);
    assert_eq!(plan.mlm_positions, plain);
    // jle 0x1e -> instruction 6, jmp 0x13 -> instruction 2.
    assert_eq!(plan.jtp_targets, vec![6, 2]);
    for (&p, &t) in plan.mlm_positions.iter().zip(&plan.mlm_targets) {
        assert_eq!(seq.token_ids[p], t);
    }

    let none = plan_masking(seq, &vocab, 0.0, 0.0, 3).unwrap();
    assert!(none.is_empty());
    assert!(matches!(
        plan_masking(seq, &vocab, 1.5, 0.0, 3),
        Err(PretrainError::InvalidRate(_))
    ));
    assert!(plan_masking(seq, &vocab, 0.1, f64::NAN, 3).is_err());
}

#[test]
fn padding_is_never_selected() {
    let (vocab, seqs) = fixture();
    let mut seq = seqs[1].clone();
    let n = seq.len();
    seq.pad_to(n + 10);
    let plan = plan_masking(&seq, &vocab, 1.0, 1.0, 0).unwrap();
    assert!(plan.mlm_positions.iter().chain(&plan.jtp_positions).all(|&p| p < n));
}

#[test]
fn replacement_mix_and_rate() {
    let (vocab, seqs) = fixture();
    let seq = &seqs[0];
    let maskable = seq.jump_symbol_mask.iter().filter(|&&j| !j).count();
    let (mut mask, mut random, mut keep, mut selected) = (0usize, 0usize, 0usize, 0usize);
    let trials = 4000;
    for s in 0..trials {
        let plan = plan_masking(seq, &vocab, 0.15, 0.15, s).unwrap();
        selected += plan.mlm_positions.len();
        for r in &plan.mlm_replacements {
            match r {
                Replacement::Mask => mask += 1,
                Replacement::Random(id) => {
                    assert!(vocab.learned_ids().contains(id));
                    random += 1
                }
                Replacement::Keep => keep += 1,
            }
        }
    }
    let rate = selected as f64 / (trials as f64 * maskable as f64);
    assert!((rate - 0.15).abs() < 0.01, "rate {rate}");
    let n = selected as f64;
    assert!((mask as f64 / n - 0.8).abs() < 0.02);
    assert!((random as f64 / n - 0.1).abs() < 0.02);
    assert!((keep as f64 / n - 0.1).abs() < 0.02);
}

#[test]
fn apply_changes_only_planned_tokens() {
    let (vocab, seqs) = fixture();
    let seq = &seqs[0];
    let plan = plan_masking(seq, &vocab, 0.6, 1.0, 11).unwrap();
    let m = plan.apply(seq);
    assert_eq!(m.instruction_index, seq.instruction_index);
    assert_eq!(m.position, seq.position);
    for i in 0..seq.len() {
        if plan.jtp_positions.contains(&i) {
            assert_eq!(m.token_ids[i], MASK_ID);
        } else if let Some(j) = plan.mlm_positions.iter().position(|&p| p == i) {
            match plan.mlm_replacements[j] {
                Replacement::Mask => assert_eq!(m.token_ids[i], MASK_ID),
                Replacement::Random(id) => assert_eq!(m.token_ids[i], id),
                Replacement::Keep => assert_eq!(m.token_ids[i], seq.token_ids[i]),
            }
        } else {
            assert_eq!(m.token_ids[i], seq.token_ids[i]);
        }
    }
}

/// `-log softmax(row)[target]`, computed directly.
fn nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

#[test]
fn loss_matches_direct_sum_of_negative_log_likelihoods() {
    let (vocab, seqs) = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = EncoderModel::<f64>::new(tiny(&vocab), &mut rng).unwrap();
    let seq = &seqs[0];
    let plan = plan_masking(seq, &vocab, 0.4, 1.0, 5).unwrap();
    assert!(!plan.mlm_positions.is_empty() && !plan.jtp_positions.is_empty());

    let mut g = Graph::new(&model.params);
    let parts = pretrain_loss(&mut g, &model.encoder, seq, &plan).unwrap();
    let h = model.encoder.hidden(&mut g, &plan.apply(seq)).unwrap();
    let ml = model.encoder.mlm_logits(&mut g, h, &plan.mlm_positions).unwrap();
    let jl = model.encoder.jtp_logits(&mut g, h, &plan.jtp_positions).unwrap();
    let mlm: f64 = plan
        .mlm_targets
        .iter()
        .enumerate()
        .map(|(r, &t)| nll(g.value(ml).row(r), t as usize))
        .sum();
    let jtp: f64 = plan
        .jtp_targets
        .iter()
        .enumerate()
        .map(|(r, &t)| nll(g.value(jl).row(r), t))
        .sum();
    let got_mlm = g.value(parts.mlm.unwrap()).item();
    let got_jtp = g.value(parts.jtp.unwrap()).item();
    assert!((got_mlm - mlm).abs() < 1e-10);
    assert!((got_jtp - jtp).abs() < 1e-10);
    assert!((g.value(parts.total).item() - (mlm + jtp)).abs() < 1e-10);
    assert!(mlm > 0.0 && jtp > 0.0);
}

#[test]
fn empty_plan_has_zero_loss_and_no_gradient() {
    let (vocab, seqs) = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = EncoderModel::<f64>::new(tiny(&vocab), &mut rng).unwrap();
    let mut g = Graph::new(&model.params);
    let parts = pretrain_loss(&mut g, &model.encoder, &seqs[0], &MaskingPlan::default()).unwrap();
    assert_eq!(g.value(parts.total).item(), 0.0);
    let grads = g.backward(parts.total).unwrap();
    assert!((0..grads.len()).all(|i| grads.get(crate::numeric::ParamId(i)).is_none()));
}

#[test]
fn unused_vocabulary_rows_get_no_embedding_gradient() {
    let (vocab, seqs) = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = EncoderModel::<f64>::new(tiny(&vocab), &mut rng).unwrap();
    let seq = &seqs[0];
    // Keep-only plans would still leave the random replacements; use a plan
    // with explicit masks so the input ids are exactly known.
    let mut plan = plan_masking(seq, &vocab, 0.3, 1.0, 9).unwrap();
    for r in &mut plan.mlm_replacements {
        *r = Replacement::Mask;
    }
    let mut g = Graph::new(&model.params);
    let parts = pretrain_loss(&mut g, &model.encoder, seq, &plan).unwrap();
    let grads = g.backward(parts.total).unwrap();
    let table = grads.get(model.encoder.token_param()).unwrap();
    let masked = plan.apply(seq);
    let used: std::collections::HashSet<usize> = masked
        .token_ids
        .iter()
        .map(|&t| t as usize)
        .chain(masked.instruction_index.iter().map(|&k| JUMP_BASE_USIZE + k as usize))
        .collect();
    let mut nonzero_used = 0;
    for row in 0..vocab.len() {
        let any = table.row(row).iter().any(|&v| v != 0.0);
        if used.contains(&row) {
            nonzero_used += any as usize;
        } else {
            assert!(!any, "row {row} ({}) has gradient", vocab.token(row as u32).unwrap());
        }
    }
    assert!(nonzero_used > 0);
}

const JUMP_BASE_USIZE: usize = crate::tokenizer::JUMP_BASE as usize;

#[test]
fn loss_decreases_when_overfitting_two_functions() {
    let (vocab, seqs) = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = EncoderModel::<f32>::new(tiny(&vocab), &mut rng).unwrap();
    let config = PretrainConfig {
        steps: 120,
        batch_size: 2,
        mlm_rate: 0.3,
        jtp_rate: 0.5,
        adam: AdamConfig {
            lr: 3e-3,
            clip_norm: Some(1.0),
            ..Default::default()
        },
        seed: 1,
        checkpoint_every: 0,
    };
    let curve = run_pretraining(&seqs, &vocab, &mut model, config, None).unwrap();
    assert_eq!(curve.len(), 120);
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let first = mean(&curve[..15]);
    let last = mean(&curve[105..]);
    assert!(last < 0.5 * first, "first {first}, last {last}");
    assert!(curve.iter().all(|r| r.total.is_finite() && r.total >= 0.0));
    for r in &curve {
        assert!((r.total - (r.mlm_loss + r.jtp_loss)).abs() < 1e-3 * r.total.max(1.0));
    }
}

#[test]
fn resume_from_checkpoint_reproduces_uninterrupted_run() {
    let (vocab, seqs) = fixture();
    let config = PretrainConfig {
        steps: 6,
        batch_size: 1,
        checkpoint_every: 3,
        seed: 42,
        ..Default::default()
    };
    let init = || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        EncoderModel::<f32>::new(tiny(&vocab), &mut rng).unwrap()
    };

    let dir = tempfile::tempdir().unwrap();
    let sink = CheckpointSink {
        dir: dir.path().to_path_buf(),
        manifest: ModelManifest::new(tiny(&vocab)),
    };
    let mut straight = init();
    let full = run_pretraining(&seqs, &vocab, &mut straight, config.clone(), Some(&sink)).unwrap();

    let (_, encoder, ck) = load_model(&sink.path_for(3), Some(&tiny(&vocab))).unwrap();
    let state = ck.optimizer.expect("optimizer state saved");
    assert_eq!(state.step, 3);
    let mut resumed = EncoderModel {
        encoder,
        params: ck.params,
    };
    let mut t = Pretrainer::resume(config, &resumed, state).unwrap();
    let tail = t.run(&mut resumed, &seqs, &vocab, None, |_| {}).unwrap();

    assert_eq!(&full[3..], &tail[..]);
    for ((_, a), (_, b)) in straight.params.iter().zip(resumed.params.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn loss_curve_csv() {
    let recs = [
        LossRecord {
            step: 1,
            mlm_loss: 2.5,
            jtp_loss: 1.0,
            total: 3.5,
        },
        LossRecord {
            step: 2,
            mlm_loss: 2.0,
            jtp_loss: 0.5,
            total: 2.5,
        },
    ];
    let mut out = Vec::new();
    write_loss_curve(&mut out, &recs).unwrap();
    assert_eq!(
        String::from_utf8(out).unwrap(),
        "step,mlm_loss,jtp_loss,total\n1,2.5,1,3.5\n2,2,0.5,2.5\n"
    );
}

#[test]
fn step_seeds_are_distinct() {
    let seeds: std::collections::HashSet<u64> = (0..1000).map(|s| step_seed(3, s)).collect();
    assert_eq!(seeds.len(), 1000);
    assert_ne!(step_seed(0, 1), step_seed(1, 0));
}
