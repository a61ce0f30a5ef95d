use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use voxtrain::config::LabelSpec;
use voxtrain::manifest::{stratified_kfold, LabelValue, Manifest, PatientRecord, Split};

/// Tabular-only manifest with two categorical stratification columns.
fn manifest(cells: &[(u8, u8)]) -> Manifest {
    let records = cells
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| PatientRecord {
            patient_id: format!("P{i:04}"),
            split: Split::TrainVal,
            labels: vec![LabelValue { value: f64::from(a), time: 0.0, observed: true }],
            tabular: vec![],
            volume_paths: vec![],
            cells: BTreeMap::from([("a".to_string(), a.to_string()), ("b".to_string(), b.to_string())]),
        })
        .collect();
    Manifest {
        records,
        label_specs: vec![LabelSpec::binary("a")],
        tabular_names: vec![],
        modalities: vec![],
        volume_shape: None,
        columns: vec!["PatientID".into(), "a".into(), "b".into()],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn folds_cover_exactly_and_balance_strata(
        cells in prop::collection::vec((0u8..3, 0u8..4), 10..120),
        k in 2usize..=6,
        two_vars in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let m = manifest(&cells);
        let vars: Vec<String> = if two_vars { vec!["a".into(), "b".into()] } else { vec!["a".into()] };
        let folds = stratified_kfold(&m, k, &vars, seed).unwrap();
        prop_assert_eq!(folds.len(), k);

        let all: BTreeSet<String> = m.ids().into_iter().collect();
        let mut seen = BTreeSet::new();
        for f in &folds {
            for id in &f.val {
                prop_assert!(seen.insert(id.clone()), "{} in two validation folds", id);
            }
            let train: BTreeSet<&String> = f.train.iter().collect();
            let expected: BTreeSet<&String> = all.iter().filter(|id| !f.val.contains(id)).collect();
            prop_assert_eq!(train, expected);
        }
        prop_assert_eq!(&seen, &all);

        let stratum = |id: &str| {
            let r = m.get(id).unwrap();
            vars.iter().map(|v| r.cells[v].clone()).collect::<Vec<_>>()
        };
        let mut counts: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
        for f in &folds {
            for id in &f.val {
                counts.entry(stratum(id)).or_insert_with(|| vec![0; k])[f.index] += 1;
            }
        }
        for (key, c) in counts {
            let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "stratum {:?}: {:?}", key, c);
        }
        let sizes: Vec<usize> = folds.iter().map(|f| f.val.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn same_seed_same_folds() {
    let m = manifest(&(0..40).map(|i| ((i % 3) as u8, (i % 2) as u8)).collect::<Vec<_>>());
    let vars = ["a".to_string()];
    assert_eq!(stratified_kfold(&m, 4, &vars, 9).unwrap(), stratified_kfold(&m, 4, &vars, 9).unwrap());
}
