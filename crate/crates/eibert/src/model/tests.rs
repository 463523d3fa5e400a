use super::forward::{forward, Capture};
use super::*;

pub(crate) fn student_spec() -> ModelSpec {
    ModelSpec {
        vocab_size: 2000,
        max_seq_len: 32,
        embed_dim: 64,
        hidden_dim: 64,
        intermediate_dim: 256,
        num_layers: 2,
        num_heads: 4,
        share_layers: true,
        factorized_embedding: false,
        num_classes: 4,
        seed: 7,
    }
}

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        vocab_size: 20,
        max_seq_len: 8,
        embed_dim: 16,
        hidden_dim: 16,
        intermediate_dim: 32,
        num_layers: 2,
        num_heads: 2,
        share_layers: false,
        factorized_embedding: false,
        num_classes: 3,
        seed: 11,
    }
}

#[test]
fn spec_invariants_are_enforced() {
    let mut s = student_spec();
    s.hidden_dim = 65;
    assert!(matches!(s.validate(), Err(ModelError::Spec(_))));
    let mut s = student_spec();
    s.factorized_embedding = true;
    s.embed_dim = 128;
    assert!(s.validate().is_err());
    let mut s = student_spec();
    s.embed_dim = 32; // not factorized, must equal hidden
    assert!(s.validate().is_err());
}

#[test]
fn shared_layers_make_block_count_independent_of_depth() {
    let mut s2 = student_spec();
    s2.num_layers = 2;
    let mut s4 = student_spec();
    s4.num_layers = 4;
    let m2 = build_model(&s2).unwrap();
    let m4 = build_model(&s4).unwrap();
    assert_eq!(m2.parameter_count(), m4.parameter_count());
}

#[test]
fn same_seed_builds_identical_models() {
    let spec = student_spec();
    let a = build_model(&spec).unwrap();
    let b = build_model(&spec).unwrap();
    assert_eq!(a.param_hash(), b.param_hash());
    assert_eq!(a, b);
}

#[test]
fn parameter_count_matches_closed_form() {
    // student: vocab 2000, embed==hidden 64, inter 256, shared, 4 classes
    let m = build_model(&student_spec()).unwrap();
    let h = 64u64;
    let expected = 2000 * 64     // token embedding
        + 32 * 64                // position embedding
        + 2 * 64                 // embedding layer norm
        + (4 * (h * h + h)       // q, k, v, o
            + 2 * h              // ln1
            + h * 256 + 256      // ff1
            + 256 * h + h        // ff2
            + 2 * h)             // ln2
        + (64 * 64 + 64)         // pooler
        + (64 * 4 + 4); // classifier
    assert_eq!(m.parameter_count() as u64, expected);
}

#[test]
fn storage_fp32_is_4x_param_count() {
    let m = build_model(&student_spec()).unwrap();
    let sb = storage_bytes(&m, StoragePrecision::Fp32);
    assert_eq!(sb.total, 4 * m.parameter_count() as u64);
    assert_eq!(sb.total, sb.embeddings + sb.blocks + sb.head);
}

#[test]
fn reported_scale_compression_ratio() {
    let ratio = compression_ratio(407.0, 1.91);
    assert!((ratio - 213.09).abs() < 0.01, "ratio {ratio}");
}

#[test]
fn op_count_single_matmul_sanity() {
    // one [1 x d] * [d x d] matmul is 2*d^2 ops; check the QKVO term scales that way
    let mut spec = tiny_spec();
    spec.num_layers = 1;
    let m = build_model(&spec).unwrap();
    let ops1 = count_ops(&m, 1, false);
    let d = spec.hidden_dim as u64;
    // seq 1: blocks = 4*d^2 + 2*d + 2*d*i MACs, doubled
    let expected_blocks = 2 * (4 * d * d + 2 * d + 2 * d * spec.intermediate_dim as u64);
    assert_eq!(ops1.blocks, expected_blocks);
}

#[test]
fn op_count_doubles_with_unshared_layers() {
    let mut s2 = tiny_spec();
    s2.num_layers = 2;
    let mut s4 = tiny_spec();
    s4.num_layers = 4;
    let o2 = count_ops(&build_model(&s2).unwrap(), 8, false);
    let o4 = count_ops(&build_model(&s4).unwrap(), 8, false);
    assert_eq!(o4.blocks, 2 * o2.blocks);
}

#[test]
fn op_count_matches_independent_hand_count() {
    // desk student at seq 32, counted matrix by matrix
    let m = build_model(&student_spec()).unwrap();
    let got = count_ops(&m, 32, false);
    let (s, h, i, c) = (32u64, 64u64, 256u64, 4u64);
    let per_layer = 4 * s * h * h + s * s * h + s * s * h + 2 * s * h * i;
    let hand = 2 * (2 * per_layer + h * h + h * c);
    assert_eq!(got.total, hand);
}

#[test]
fn single_token_attention_is_identity() {
    let mut spec = tiny_spec();
    spec.num_heads = 1;
    let m = build_model(&spec).unwrap();
    let trace = forward(
        &m,
        &[2],
        &[1],
        1,
        1,
        Capture { attention: true, ..Default::default() },
    )
    .unwrap();
    let attn = trace.attention.unwrap();
    assert_eq!(attn[0][0][0].data(), &[1.0]);
}

#[test]
fn attention_rows_sum_to_one_over_unmasked() {
    let m = build_model(&tiny_spec()).unwrap();
    let ids = vec![2, 5, 6, 7, 0, 0, 2, 8, 9, 0, 0, 0];
    let mask = vec![1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 0];
    let trace = forward(
        &m,
        &ids,
        &mask,
        2,
        6,
        Capture { attention: true, ..Default::default() },
    )
    .unwrap();
    for layer in trace.attention.unwrap() {
        for (i, sample) in layer.iter().enumerate() {
            for head in sample {
                for r in 0..6 {
                    let sum: f64 = (0..6)
                        .filter(|&j| mask[i * 6 + j] == 1)
                        .map(|j| head.at(r, j))
                        .sum();
                    assert!((sum - 1.0).abs() < 1e-5, "row sum {sum}");
                    for j in 0..6 {
                        if mask[i * 6 + j] == 0 {
                            assert!(head.at(r, j) < 1e-6);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn padded_position_content_never_changes_logits() {
    let m = build_model(&tiny_spec()).unwrap();
    let mask = vec![1, 1, 1, 0, 0, 0];
    let a = forward(&m, &[2, 5, 6, 0, 0, 0], &mask, 1, 6, Capture::default()).unwrap();
    let b = forward(&m, &[2, 5, 6, 9, 17, 3], &mask, 1, 6, Capture::default()).unwrap();
    for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn out_of_vocab_id_is_rejected() {
    let m = build_model(&tiny_spec()).unwrap();
    assert!(matches!(
        forward(&m, &[25], &[1], 1, 1, Capture::default()),
        Err(ModelError::Vocab { id: 25, .. })
    ));
}

#[test]
fn shared_block_mutation_changes_all_layers() {
    let spec = student_spec();
    let mut m = build_model(&spec).unwrap();
    let ids = vec![2, 10, 11, 12];
    let mask = vec![1u8; 4];
    let before = forward(&m, &ids, &mask, 1, 4, Capture::default()).unwrap();
    assert_eq!(m.blocks.len(), 1);
    for v in m.blocks[0].wq.data_mut() {
        *v += 0.05;
    }
    let after = forward(&m, &ids, &mask, 1, 4, Capture::default()).unwrap();
    let diff: f64 = before
        .logits
        .data()
        .iter()
        .zip(after.logits.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 0.0, "shared block mutation had no effect");
}

#[test]
fn integrate_head_copies_values_and_leaves_teacher_alone() {
    let mut tspec = tiny_spec();
    tspec.seed = 3;
    let teacher = build_model(&tspec).unwrap();
    let teacher_hash = teacher.param_hash();
    let mut sspec = tiny_spec();
    sspec.seed = 4;
    let mut student = build_model(&sspec).unwrap();
    integrate_head(&teacher, &mut student).unwrap();
    assert_eq!(teacher.param_hash(), teacher_hash);
    assert_eq!(student.classifier_w, teacher.classifier_w);
    assert_eq!(student.pooler_w, teacher.pooler_w);
    assert!(student.projector.is_none()); // same hidden width
}

#[test]
fn integrate_head_with_wider_teacher_creates_projector() {
    let mut tspec = tiny_spec();
    tspec.hidden_dim = 32;
    tspec.embed_dim = 32;
    let teacher = build_model(&tspec).unwrap();
    let mut student = build_model(&tiny_spec()).unwrap();
    integrate_head(&teacher, &mut student).unwrap();
    let proj = student.projector.as_ref().unwrap();
    assert_eq!(proj.weight.shape(), &[16, 32]);
    // forward must shape-check end to end
    let trace = forward(&student, &[2, 5], &[1, 1], 1, 2, Capture::default()).unwrap();
    assert_eq!(trace.logits.shape(), &[1, 3]);
    assert_eq!(trace.pooled_projected.shape(), &[1, 32]);
}

#[test]
fn integrate_head_rejects_class_mismatch() {
    let teacher = build_model(&tiny_spec()).unwrap();
    let mut sspec = tiny_spec();
    sspec.num_classes = 5;
    let mut student = build_model(&sspec).unwrap();
    assert!(matches!(
        integrate_head(&teacher, &mut student),
        Err(ModelError::Integration(_))
    ));
}

#[test]
fn seeded_logits_are_reproducible_across_runs() {
    let m = build_model(&tiny_spec()).unwrap();
    let ids = vec![2, 4, 9, 13];
    let mask = vec![1u8; 4];
    let a = forward(&m, &ids, &mask, 1, 4, Capture::default()).unwrap();
    let b = forward(&m, &ids, &mask, 1, 4, Capture::default()).unwrap();
    assert_eq!(a.logits, b.logits);
    // golden vector recorded from the first verified build
    let golden = golden_logits();
    assert_eq!(a.logits.data().len(), golden.len());
    for (g, w) in a.logits.data().iter().zip(&golden) {
        assert!((g - w).abs() < 1e-9, "logit {g} vs golden {w}");
    }
}

fn golden_logits() -> Vec<f64> {
    super::golden::TINY_SPEC_LOGITS.to_vec()
}
