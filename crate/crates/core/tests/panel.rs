//! Property tests for panel ingestion and initiation bookkeeping.

use proptest::prelude::*;
use snmm::panel::{read_csv, InitiationTime, PanelDataset};

/// Random panel: `n` subjects, `nt` consecutive times, one or two treatments, up to two
/// covariates, treatments drawn from {0, 1, 2}.
fn panels() -> impl Strategy<Value = PanelDataset> {
    (1usize..6, 1usize..5, 1usize..3, 0usize..3, -5i64..2000).prop_flat_map(|(n, nt, p, q, t0)| {
        (
            prop::collection::vec(-1e6f64..1e6, n * nt),
            prop::collection::vec(0u8..3, n * nt * p),
            prop::collection::vec(-1e3f64..1e3, n * nt * q),
        )
            .prop_map(move |(y, a, z)| {
                PanelDataset::new(
                    (0..n).map(|i| format!("s{i}")).collect(),
                    (0..nt as i64).map(|t| t0 + t).collect(),
                    "y",
                    (0..p).map(|c| format!("d{c}")).collect(),
                    (0..q).map(|j| format!("x{j}")).collect(),
                    y,
                    a.into_iter().map(f64::from).collect(),
                    z,
                )
                .unwrap()
            })
    })
}

fn brute_initiation(d: &PanelDataset, i: usize) -> Option<usize> {
    (0..d.n_times()).find(|&t| d.treatment(i, t).iter().any(|v| *v != 0.0))
}

proptest! {
    #[test]
    fn csv_round_trip_is_exact(d in panels()) {
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), None).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn initiation_is_first_departure_from_baseline(d in panels()) {
        for i in 0..d.n_subjects() {
            let t = d.initiation_time(i);
            prop_assert_eq!(t.time(), brute_initiation(&d, i));
            for m in 0..d.n_times() {
                prop_assert_eq!(t.at_risk(m), brute_initiation(&d, i).is_none_or(|s| s >= m));
                prop_assert_eq!(t.is(m), brute_initiation(&d, i) == Some(m));
            }
            if let InitiationTime::At { time, value } = &t {
                prop_assert_eq!(value.as_slice(), d.treatment(i, *time));
            }
        }
    }

    #[test]
    fn staggered_adoption_matches_brute_force(d in panels()) {
        let brute = (0..d.n_subjects()).all(|i| match brute_initiation(&d, i) {
            None => true,
            Some(s) => (s..d.n_times()).all(|t| d.treatment(i, t) == d.treatment(i, s)),
        });
        prop_assert_eq!(d.is_staggered_adoption(), brute);
    }

    #[test]
    fn initiation_histogram_counts_every_subject(d in panels()) {
        let h = d.initiation_histogram();
        prop_assert_eq!(h.values().sum::<usize>(), d.n_subjects());
        for (label, count) in &h {
            let expected = (0..d.n_subjects())
                .filter(|&i| brute_initiation(&d, i).map(|t| d.time_labels()[t]) == *label)
                .count();
            prop_assert_eq!(*count, expected);
        }
    }

    #[test]
    fn history_exposes_only_the_past(d in panels(), m_raw in 0usize..5) {
        let m = m_raw % d.n_times();
        let h = d.history(0, m).lbar();
        for t in -1..=d.n_times() as i64 {
            let past = t >= 0 && (t as usize) < m;
            prop_assert_eq!(h.covariates(t).is_some(), past || t == m as i64);
            prop_assert_eq!(h.outcome(t).is_some(), past);
            prop_assert_eq!(h.treatment(t).is_some(), past);
        }
    }
}
