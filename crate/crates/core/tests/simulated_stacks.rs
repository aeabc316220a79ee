//! End-to-end behavior of the estimator on simulated stacks.

use spdc_epr::analysis::{analyze_plane, AnalysisOptions};
use spdc_epr::correlator::{intercorrelation, variance_of_difference, witness, Axis, RoiPair};
use spdc_epr::detector::{pairs_for_fluence, simulate_stack, DetectorParams, Roi};
use spdc_epr::par::with_workers;
use spdc_epr::peakfit::integrate_r;
use spdc_epr::source::{BeamCenters, Plane, SourceParams, Xy};

// 64×64 sensor with 32×32 ROIs; near-field spots overlap.
fn source() -> SourceParams {
    SourceParams {
        pump_sigma: Xy::new(7.0, 7.0),
        nf_pair_sigma: Xy::new(1.5, 2.1),
        ff_sum_sigma: Xy::new(2.2, 1.8),
        ff_marginal_sigma: Xy::new(7.0, 7.0),
        mean_pairs_per_frame: 100.0,
        unpaired_fraction: 0.0,
        near_centers: BeamCenters {
            signal: Xy::new(19.5, 31.5),
            idler: Xy::new(35.5, 31.5),
        },
        far_centers: BeamCenters {
            signal: Xy::new(15.5, 31.5),
            idler: Xy::new(47.5, 31.5),
        },
        envelope: None,
    }
}

fn detector(qe: f64) -> DetectorParams {
    DetectorParams {
        quantum_efficiency: qe,
        false_count_prob: 0.002,
        smear_prob: 0.02,
        width: 64,
        height: 64,
    }
}

fn rois(plane: Plane) -> RoiPair {
    match plane {
        Plane::NearField => RoiPair {
            roi1: Roi::new(4, 16, 32, 32),
            roi2: Roi::new(20, 16, 32, 32),
            plane,
        },
        Plane::FarField => RoiPair {
            roi1: Roi::new(0, 16, 32, 32),
            roi2: Roi::new(32, 16, 32, 32),
            plane,
        },
    }
}

fn calibrated(plane: Plane, qe: f64, unpaired: f64) -> SourceParams {
    let mut s = source();
    s.unpaired_fraction = unpaired;
    let r = rois(plane);
    s.mean_pairs_per_frame = pairs_for_fluence(&s, &detector(qe), plane, &[r.roi1, r.roi2], 0.15).unwrap();
    s
}

#[test]
fn witness_is_flat_on_simulated_data() {
    for plane in [Plane::NearField, Plane::FarField] {
        let (stack, _) = simulate_stack(&calibrated(plane, 0.9, 0.0), &detector(0.9), plane, 1500, 3).unwrap();
        let w = witness(&stack, &rois(plane)).unwrap();
        let z = w.max_abs_z();
        assert!(z < 5.0, "{plane:?}: witness max |z| = {z}");
        // the same stack shows a strong genuine peak
        let f = intercorrelation(&stack, &rois(plane)).unwrap();
        assert!(f.at(0, 0) > 20.0 * f.std_error[f.index(0, 0)]);
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let run = |workers| {
        with_workers(workers, || {
            let (stack, clipped) =
                simulate_stack(&calibrated(Plane::FarField, 0.9, 0.0), &detector(0.9), Plane::FarField, 300, 9).unwrap();
            let map = intercorrelation(&stack, &rois(Plane::FarField)).unwrap();
            let vod = variance_of_difference(&stack, &rois(Plane::FarField), 8).unwrap();
            (stack, clipped, map, vod)
        })
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.2.values), bits(&b.2.values));
    assert_eq!(bits(&a.2.std_error), bits(&b.2.std_error));
    assert_eq!(a.3.ratio.to_bits(), b.3.ratio.to_bits());
}

#[test]
fn published_rates_give_a_few_percent_correlation() {
    // overall detection efficiency 0.1 with one photon in eight unpaired
    let plane = Plane::NearField;
    let (stack, _) = simulate_stack(&calibrated(plane, 0.1, 0.125), &detector(0.1), plane, 4000, 21).unwrap();
    let opts = AnalysisOptions {
        smear_axis: Some(Axis::Y),
        ..AnalysisOptions::default()
    };
    let a = analyze_plane(&stack, &rois(plane), &opts).unwrap();
    let r = integrate_r(&a.fit).unwrap();
    assert!((0.03..0.07).contains(&r), "R_n = {r}");
}

#[test]
fn uncorrelated_source_has_no_peak() {
    let plane = Plane::FarField;
    let (stack, _) = simulate_stack(&calibrated(plane, 0.9, 1.0), &detector(0.9), plane, 1000, 5).unwrap();
    let err = analyze_plane(&stack, &rois(plane), &AnalysisOptions::default()).unwrap_err();
    assert!(err.is_no_peak(), "{err}");
    let vod = variance_of_difference(&stack, &rois(plane), 8).unwrap();
    assert!((vod.ratio - 1.0).abs() < 3.0 * vod.std_error, "{vod:?}");
}
