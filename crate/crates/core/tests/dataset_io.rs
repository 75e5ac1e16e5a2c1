use proptest::prelude::*;
use sal_lab::avr::{ProblemInstance, TaskKind, TaskStructure};
use sal_lab::io::{decode_dataset, encode_dataset, read_dataset, write_dataset, DatasetHeader, HEADER_LEN};
use sal_lab::taskgen::{generate, GeneratorConfig};
use sal_lab::{Error, Tensor};

fn quantised(h: usize, w: usize, seed: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![h, w], |i| ((i * 31 + seed * 7) % 256) as f32 / 255.0)
}

fn instance(s: &TaskStructure, hw: (usize, usize), label: usize, rules: Option<Vec<u8>>) -> ProblemInstance<f32> {
    ProblemInstance {
        panels: (0..s.panels()).map(|j| quantised(hw.0, hw.1, j + label)).collect(),
        label,
        rules,
    }
}

#[test]
fn empty_file_is_header_only() {
    let bytes = encode_dataset(&[], &TaskStructure::rpm(), (32, 32)).unwrap();
    // magic + version + kind + r,c,context,answers + h,w + rule length + count
    assert_eq!(HEADER_LEN, 4 + 2 + 1 + 4 + 2 * 2 + 2 + 4);
    assert_eq!(bytes.len(), HEADER_LEN);
    assert_eq!(&bytes[..4], b"AVRB");
    let (header, inst) = decode_dataset(&bytes).unwrap();
    assert_eq!(header.count, 0);
    assert!(inst.is_empty());
}

#[test]
fn header_fields_are_little_endian() {
    let s = TaskStructure::o3(6).unwrap();
    let insts = vec![instance(&s, (300, 9), 2, Some(vec![0, 1, 0, 0]))];
    let b = encode_dataset(&insts, &s, (300, 9)).unwrap();
    assert_eq!(&b[4..6], &[1, 0]);
    assert_eq!(b[6], 2);
    assert_eq!(&b[7..11], &[1, 5, 0, 6]);
    assert_eq!(&b[11..13], &[44, 1]);
    assert_eq!(&b[13..15], &[9, 0]);
    assert_eq!(&b[15..17], &[4, 0]);
    assert_eq!(&b[17..21], &[1, 0, 0, 0]);
}

#[test]
fn rpm_80x80_payload_size() {
    let s = TaskStructure::rpm();
    let insts = vec![instance(&s, (80, 80), 3, Some(vec![1, 0, 0, 1, 0, 0, 0, 1]))];
    let bytes = encode_dataset(&insts, &s, (80, 80)).unwrap();
    assert_eq!(bytes.len() - HEADER_LEN, 16 * 6400 + 1 + 1);
    let (header, back) = decode_dataset(&bytes).unwrap();
    assert_eq!(header.instance_bytes(), 16 * 6400 + 2);
    assert_eq!(back[0].rules, Some(vec![1, 0, 0, 1, 0, 0, 0, 1]));
    // Bits 0, 3 and 7 packed into one byte.
    assert_eq!(*bytes.last().unwrap(), 0b1000_1001);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vap.avrb");
    let cfg = GeneratorConfig::new(TaskKind::Vap, 25, 4);
    let s = cfg.structure().unwrap();
    let insts: Vec<_> = generate(&cfg).unwrap().into_iter().map(|g| g.instance).collect();
    write_dataset(&insts, &s, (32, 32), &path).unwrap();
    let (s2, back) = read_dataset(&path).unwrap();
    assert_eq!(s2, s);
    assert_eq!(back.len(), 25);
    for (a, b) in insts.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.rules, b.rules);
        for (pa, pb) in a.panels.iter().zip(&b.panels) {
            for (&x, &y) in pa.data().iter().zip(pb.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-7);
            }
        }
    }
    // Rendered levels are multiples of 1/4 or 1, so re-encoding is stable.
    let again = encode_dataset(&back, &s, (32, 32)).unwrap();
    assert_eq!(again, std::fs::read(&path).unwrap());
}

#[test]
fn truncation_names_both_lengths() {
    let s = TaskStructure::vap();
    let bytes = encode_dataset(&[instance(&s, (8, 8), 1, None)], &s, (8, 8)).unwrap();
    let cut = &bytes[..bytes.len() - 5];
    match decode_dataset(cut) {
        Err(Error::Truncated { expected, actual }) => {
            assert_eq!(expected, bytes.len() as u64);
            assert_eq!(actual, cut.len() as u64);
        }
        other => panic!("expected truncation, got {other:?}"),
    }
    assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::Truncated { expected: 21, actual: 10 })));
    let msg = decode_dataset(cut).unwrap_err().to_string();
    assert!(msg.contains(&bytes.len().to_string()) && msg.contains(&cut.len().to_string()), "{msg}");
}

#[test]
fn corrupted_header_bytes_are_located() {
    let s = TaskStructure::rpm();
    let good = encode_dataset(&[instance(&s, (8, 8), 0, None)], &s, (8, 8)).unwrap();
    let corrupt = |at: usize, v: u8| {
        let mut b = good.clone();
        b[at] = v;
        decode_dataset(&b).unwrap_err()
    };
    assert!(matches!(corrupt(0, b'X'), Error::Format { offset: 0, .. }));
    assert!(matches!(corrupt(4, 9), Error::Format { offset: 4, .. }));
    let kind = corrupt(6, 7);
    assert!(matches!(kind, Error::Format { offset: 6, .. }));
    assert!(kind.to_string().contains("unknown task kind 7"));
    assert!(matches!(corrupt(10, 3), Error::Format { offset: 7, .. }));
    let label_at = HEADER_LEN + 16 * 64;
    assert!(matches!(corrupt(label_at, 8), Error::Format { offset, .. } if offset == label_at as u64));
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(decode_dataset(&long), Err(Error::Format { offset, .. }) if offset == good.len() as u64));
}

#[test]
fn mismatched_instances_are_rejected() {
    let s = TaskStructure::rpm();
    let ok = instance(&s, (8, 8), 0, Some(vec![1, 0, 0]));
    let wrong_size = instance(&s, (8, 9), 0, Some(vec![1, 0, 0]));
    assert!(encode_dataset(&[ok.clone(), wrong_size], &s, (8, 8)).is_err());
    let wrong_rules = instance(&s, (8, 8), 0, Some(vec![1, 0]));
    assert!(encode_dataset(&[ok.clone(), wrong_rules], &s, (8, 8)).is_err());
    let missing_rules = instance(&s, (8, 8), 0, None);
    assert!(encode_dataset(&[ok.clone(), missing_rules], &s, (8, 8)).is_err());
    assert!(encode_dataset(std::slice::from_ref(&ok), &TaskStructure::vap(), (8, 8)).is_err());
    let bad_label = instance(&s, (8, 8), 8, Some(vec![1, 0, 0]));
    assert!(encode_dataset(&[bad_label], &s, (8, 8)).is_err());
    let dir = tempfile::tempdir().unwrap();
    let unwritable = dir.path().join("missing").join("x.avrb");
    assert!(matches!(write_dataset(&[ok], &s, (8, 8), &unwritable), Err(Error::Io { .. })));
}

fn structures() -> impl Strategy<Value = TaskStructure> {
    prop_oneof![
        Just(TaskStructure::rpm()),
        Just(TaskStructure::vap()),
        (3usize..8).prop_map(|p| TaskStructure::o3(p).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn byte_level_round_trip(
        s in structures(),
        h in 1usize..6,
        w in 1usize..6,
        rule_len in 0usize..20,
        seed in any::<u64>(),
        n in 0usize..4,
    ) {
        let mut state = seed;
        let mut next = move || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 33) as usize };
        let insts: Vec<ProblemInstance<f32>> = (0..n).map(|_| ProblemInstance {
            panels: (0..s.panels()).map(|_| Tensor::from_fn(vec![h, w], |_| (next() % 256) as f32 / 255.0)).collect(),
            label: next() % s.answers,
            rules: (rule_len > 0).then(|| (0..rule_len).map(|_| (next() % 2) as u8).collect()),
        }).collect();
        let bytes = encode_dataset(&insts, &s, (h, w)).unwrap();
        let (header, back) = decode_dataset(&bytes).unwrap();
        // The rule length is taken from the instances, so an empty set declares none.
        let declared = if n == 0 { 0 } else { rule_len };
        prop_assert_eq!(header, DatasetHeader { version: 1, structure: s, height: h, width: w, rule_len: declared, count: n });
        prop_assert_eq!(bytes.len() as u64, header.file_len());
        prop_assert_eq!(&back, &insts);
        prop_assert_eq!(encode_dataset(&back, &s, (h, w)).unwrap(), bytes);
    }
}
