use proptest::prelude::*;
use sal_lab::avr::{arrange_groups, structure_registry, TaskStructure};

fn embeddings(n: usize, width: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..width).map(|j| (i * 100 + j) as f64).collect()).collect()
}

#[test]
fn rpm_groups() {
    let s = TaskStructure::rpm();
    let e = embeddings(16, 3);
    let groups = arrange_groups(&e, &s).unwrap();
    assert_eq!(groups.len(), 8);
    for (k, g) in groups.iter().enumerate() {
        assert_eq!(g.len(), 9);
        assert_eq!(&g.embeddings[..8], &e[..8]);
        assert_eq!(g.embeddings[8], e[8 + k]);
    }
}

#[test]
fn vap_groups() {
    let s = TaskStructure::vap();
    let e = embeddings(9, 2);
    let groups = arrange_groups(&e, &s).unwrap();
    assert_eq!(groups.len(), 4);
    for (k, g) in groups.iter().enumerate() {
        assert_eq!(g.len(), 6);
        assert_eq!(&g.embeddings[..5], &e[..5]);
        assert_eq!(g.embeddings[5], e[5 + k]);
    }
}

#[test]
fn o3_groups_exclude_their_index() {
    for p in 5..=7 {
        let s = TaskStructure::o3(p).unwrap();
        assert_eq!((s.rows, s.cols, s.context, s.answers), (1, p - 1, 0, p));
        let e = embeddings(p, 2);
        let groups = arrange_groups(&e, &s).unwrap();
        assert_eq!(groups.len(), p);
        for (k, g) in groups.iter().enumerate() {
            let expect: Vec<Vec<f64>> = (0..p).filter(|&j| j != k).map(|j| e[j].clone()).collect();
            assert_eq!(g.embeddings, expect);
        }
    }
}

#[test]
fn o3_p4_second_group() {
    let s = TaskStructure::o3(4).unwrap();
    let e = embeddings(4, 1);
    let groups = arrange_groups(&e, &s).unwrap();
    assert_eq!(groups[1].embeddings, vec![e[0].clone(), e[2].clone(), e[3].clone()]);
}

#[test]
fn registry_sizes() {
    let all = [
        TaskStructure::rpm(),
        TaskStructure::vap(),
        TaskStructure::o3(5).unwrap(),
        TaskStructure::o3(6).unwrap(),
        TaskStructure::o3(7).unwrap(),
    ];
    assert_eq!(structure_registry(&all).unwrap(), (6, 60));
    assert_eq!(structure_registry(&[TaskStructure::rpm()]).unwrap(), (3, 3));
    assert_eq!(
        structure_registry(&[TaskStructure::vap(), TaskStructure::o3(5).unwrap()]).unwrap(),
        (2, 12)
    );
    assert!(structure_registry(&[]).is_err());
}

#[test]
fn mismatched_inputs_rejected() {
    assert!(arrange_groups(&embeddings(8, 2), &TaskStructure::vap()).is_err());
    let mut e = embeddings(5, 2);
    e[2].pop();
    assert!(arrange_groups(&e, &TaskStructure::o3(5).unwrap()).is_err());
}

fn any_structure() -> impl Strategy<Value = TaskStructure> {
    prop_oneof![
        Just(TaskStructure::rpm()),
        Just(TaskStructure::vap()),
        (3usize..=7).prop_map(|p| TaskStructure::o3(p).unwrap()),
    ]
}

proptest! {
    #[test]
    fn grid_groups_differ_only_in_last_cell(s in any_structure(), width in 1usize..4) {
        prop_assume!(s.context > 0);
        let e = embeddings(s.panels(), width);
        let groups = arrange_groups(&e, &s).unwrap();
        for j in 0..groups.len() {
            for k in 0..groups.len() {
                if j == k { continue; }
                let diff: Vec<usize> = (0..s.group_size())
                    .filter(|&i| groups[j].embeddings[i] != groups[k].embeddings[i])
                    .collect();
                prop_assert_eq!(diff, vec![s.group_size() - 1]);
            }
        }
    }

    #[test]
    fn o3_groups_reconstruct_and_cover(p in 3usize..=7, width in 1usize..4) {
        let s = TaskStructure::o3(p).unwrap();
        let e = embeddings(p, width);
        let groups = arrange_groups(&e, &s).unwrap();
        let mut seen = vec![0usize; p];
        for (k, g) in groups.iter().enumerate() {
            let mut all = g.embeddings.clone();
            all.insert(k, e[k].clone());
            prop_assert_eq!(&all, &e);
            for emb in &g.embeddings {
                seen[e.iter().position(|x| x == emb).unwrap()] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&n| n == p - 1));
    }

    #[test]
    fn arrangement_only_selects(s in any_structure(), seed in any::<u64>()) {
        let e: Vec<Vec<f64>> = (0..s.panels())
            .map(|i| vec![(seed.wrapping_mul(i as u64 + 1) % 1000) as f64 + i as f64 * 1e-3])
            .collect();
        for g in arrange_groups(&e, &s).unwrap() {
            prop_assert_eq!(g.len(), s.group_size());
            for emb in &g.embeddings {
                prop_assert!(e.contains(emb));
            }
        }
    }
}
