//! Leave-one-centre-out, patient-level splitting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::{MultiCentreDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::rng;

/// Partitions patients (not samples) of the non-held-out centres into
/// train/val/test_in by `ratios`; every sample of the held-out centre lands
/// in test_out. Per-split patient counts use floor, with remainder patients
/// going to train first, then val, then test_in. The shuffle is a
/// deterministic function of (seed, held_out_centre).
pub fn split_patient_level(
    ds: &MultiCentreDataset,
    held_out_centre: u32,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSpec> {
    let (rt, rv, rte) = ratios;
    if !(rt >= 0.0 && rv >= 0.0 && rte >= 0.0) || (rt + rv + rte - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    if !ds.centres.contains(&held_out_centre) {
        return Err(Error::Config(format!(
            "held-out centre {held_out_centre} is not in the dataset (centres: {:?})",
            ds.centres
        )));
    }

    // Patients must not span centres; that would let held-out data leak.
    let mut patient_centre: BTreeMap<&str, u32> = BTreeMap::new();
    for s in &ds.samples {
        match patient_centre.get(s.patient_id.as_str()) {
            Some(&c) if c != s.centre => {
                return Err(Error::Dataset(format!(
                    "patient {} appears in centres {c} and {} — patient-level splitting \
                     assumes one centre per patient",
                    s.patient_id, s.centre
                )));
            }
            _ => {
                patient_centre.insert(&s.patient_id, s.centre);
            }
        }
    }

    // Unique in-distribution patients, in deterministic (sorted) base order.
    let mut patients: Vec<&str> = patient_centre
        .iter()
        .filter(|(_, &c)| c != held_out_centre)
        .map(|(&p, _)| p)
        .collect();
    if patients.len() < 3 {
        return Err(Error::Dataset(format!(
            "need at least 3 patients outside centre {held_out_centre}, found {}",
            patients.len()
        )));
    }

    let mut shuffle_rng =
        rng::stream(seed, &["split", &format!("heldout{held_out_centre}")]);
    patients.shuffle(&mut shuffle_rng);

    let n = patients.len();
    let mut counts = [
        (n as f64 * rt).floor() as usize,
        (n as f64 * rv).floor() as usize,
        (n as f64 * rte).floor() as usize,
    ];
    let mut remainder = n - counts.iter().sum::<usize>();
    // Remainder goes to train first, then val, then test_in; cycle if needed.
    let mut i = 0;
    while remainder > 0 {
        counts[i % 3] += 1;
        remainder -= 1;
        i += 1;
    }
    let [n_train, n_val, _n_test] = counts;

    let train_p: BTreeSet<&str> = patients[..n_train].iter().copied().collect();
    let val_p: BTreeSet<&str> = patients[n_train..n_train + n_val].iter().copied().collect();
    let test_p: BTreeSet<&str> = patients[n_train + n_val..].iter().copied().collect();

    let mut spec = SplitSpec {
        held_out_centre,
        train: Vec::new(),
        val: Vec::new(),
        test_in: Vec::new(),
        test_out: Vec::new(),
        seed,
        ratios,
    };
    for s in &ds.samples {
        if s.centre == held_out_centre {
            spec.test_out.push(s.sample_id.clone());
        } else if train_p.contains(s.patient_id.as_str()) {
            spec.train.push(s.sample_id.clone());
        } else if val_p.contains(s.patient_id.as_str()) {
            spec.val.push(s.sample_id.clone());
        } else {
            debug_assert!(test_p.contains(s.patient_id.as_str()));
            spec.test_in.push(s.sample_id.clone());
        }
    }
    for list in [&mut spec.train, &mut spec.val, &mut spec.test_in, &mut spec.test_out] {
        list.sort();
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Mask, Sample};
    use crate::nn::Fm;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    /// Builds a dataset where patient `p<i>` of centre `c` owns
    /// `samples_per_patient` samples.
    fn dataset(centre_patients: &[(u32, usize)], samples_per_patient: usize) -> MultiCentreDataset {
        let mut samples = Vec::new();
        let mut centres: Vec<u32> = centre_patients.iter().map(|&(c, _)| c).collect();
        centres.dedup();
        for &(centre, n_patients) in centre_patients {
            for p in 0..n_patients {
                for s in 0..samples_per_patient {
                    let patient_id = format!("c{centre}p{p:03}");
                    samples.push(Sample {
                        image: Fm::zeros((3, 4, 4)),
                        mask: Mask::zeros((4, 4)),
                        centre,
                        patient_id: patient_id.clone(),
                        sample_id: format!("{patient_id}s{s}"),
                    });
                }
            }
        }
        MultiCentreDataset { samples, centres, overlay_truth: None }
    }

    #[test]
    fn ten_patients_split_eight_one_one() {
        let ds = dataset(&[(1, 10), (2, 4)], 2);
        let spec = split_patient_level(&ds, 2, (0.8, 0.1, 0.1), 42).unwrap();
        let patients_of = |ids: &[String]| -> BTreeSet<String> {
            ids.iter().map(|id| ds.get(id).unwrap().patient_id.clone()).collect()
        };
        assert_eq!(patients_of(&spec.train).len(), 8);
        assert_eq!(patients_of(&spec.val).len(), 1);
        assert_eq!(patients_of(&spec.test_in).len(), 1);
        assert_eq!(spec.test_out.len(), 8, "all centre-2 samples are out-of-distribution");
    }

    /// Oracle: independently re-run the documented procedure (sorted patient
    /// list, same named rng stream, floor + remainder-to-train) and compare
    /// patient counts for a 23-patient pool.
    #[test]
    fn twenty_three_patients_follow_floor_plus_remainder_rule() {
        let ds = dataset(&[(1, 23), (2, 3)], 1);
        let spec = split_patient_level(&ds, 2, (0.8, 0.1, 0.1), 1).unwrap();

        let mut expected: Vec<String> = (0..23).map(|p| format!("c1p{p:03}")).collect();
        let mut r = crate::rng::stream(1, &["split", "heldout2"]);
        expected.shuffle(&mut r);
        // floor(23*0.8)=18, floor(2.3)=2, floor(2.3)=2, remainder 1 -> train.
        let want_train: BTreeSet<String> = expected[..19].iter().cloned().collect();
        let got_train: BTreeSet<String> =
            spec.train.iter().map(|id| ds.get(id).unwrap().patient_id.clone()).collect();
        assert_eq!(got_train, want_train);
        assert_eq!(spec.val.len(), 2);
        assert_eq!(spec.test_in.len(), 2);
    }

    #[test]
    fn patient_spanning_centres_is_rejected() {
        let mut ds = dataset(&[(1, 3), (2, 3)], 1);
        ds.samples[0].patient_id = "c2p000".into(); // now lives in both centres
        let err = split_patient_level(&ds, 2, (0.8, 0.1, 0.1), 0).unwrap_err();
        assert!(err.to_string().contains("patient"), "got: {err}");
    }

    #[test]
    fn too_few_patients_is_rejected() {
        let ds = dataset(&[(1, 2), (2, 5)], 2);
        assert!(split_patient_level(&ds, 2, (0.8, 0.1, 0.1), 0).is_err());
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let ds = dataset(&[(1, 10), (2, 3)], 1);
        assert!(split_patient_level(&ds, 2, (0.8, 0.1, 0.2), 0).is_err());
    }

    #[test]
    fn unknown_held_out_centre_is_rejected() {
        let ds = dataset(&[(1, 10), (2, 3)], 1);
        assert!(split_patient_level(&ds, 9, (0.8, 0.1, 0.1), 0).is_err());
    }

    #[test]
    fn same_seed_reproduces_split_exactly() {
        let ds = dataset(&[(1, 12), (2, 9), (3, 5)], 3);
        let a = split_patient_level(&ds, 3, (0.8, 0.1, 0.1), 99).unwrap();
        let b = split_patient_level(&ds, 3, (0.8, 0.1, 0.1), 99).unwrap();
        assert_eq!(a, b);
        let c = split_patient_level(&ds, 3, (0.8, 0.1, 0.1), 100).unwrap();
        assert_ne!(a.train, c.train, "different seed should shuffle differently");
    }

    proptest! {
        /// Disjointness, coverage, and held-out isolation for random shapes.
        #[test]
        fn split_invariants_hold(
            n1 in 3usize..20,
            n2 in 3usize..20,
            n3 in 1usize..10,
            spp in 1usize..4,
            seed in 0u64..50,
        ) {
            let ds = dataset(&[(1, n1), (2, n2), (3, n3)], spp);
            let spec = split_patient_level(&ds, 3, (0.8, 0.1, 0.1), seed).unwrap();

            let train: BTreeSet<&String> = spec.train.iter().collect();
            let val: BTreeSet<&String> = spec.val.iter().collect();
            let test_in: BTreeSet<&String> = spec.test_in.iter().collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert!(train.is_disjoint(&test_in));
            prop_assert!(val.is_disjoint(&test_in));

            // Patient-level disjointness (stronger than sample-level).
            let patient_of = |id: &String| ds.get(id).unwrap().patient_id.clone();
            let tp: BTreeSet<String> = spec.train.iter().map(patient_of).collect();
            let vp: BTreeSet<String> = spec.val.iter().map(patient_of).collect();
            let ip: BTreeSet<String> = spec.test_in.iter().map(patient_of).collect();
            prop_assert!(tp.is_disjoint(&vp) && tp.is_disjoint(&ip) && vp.is_disjoint(&ip));

            // Held-out centre never leaks into the in-distribution sets.
            for id in train.iter().chain(&val).chain(&test_in) {
                prop_assert!(ds.get(id).unwrap().centre != 3);
            }
            // Coverage: every non-held-out sample is somewhere.
            let total = spec.train.len() + spec.val.len() + spec.test_in.len();
            let expected: usize = ds.samples.iter().filter(|s| s.centre != 3).count();
            prop_assert_eq!(total, expected);
            prop_assert_eq!(spec.test_out.len(), n3 * spp);
        }
    }
}
