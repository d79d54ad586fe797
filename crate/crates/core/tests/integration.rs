use csitrack::calibration::{apply_calibration, fit};
use csitrack::io::{load_csi, save_csi};
use csitrack::simulator::{calibration_recording, random_impairments, reference_points, StaticField};
use csitrack::{
    AntennaArray, CalibrationDataset, CalibrationParams, CsiFrame, Pipeline, PipelineConfig, Room, Scene, Simulation,
    Target,
};
use num_complex::Complex64;
use tempfile::TempDir;

#[test]
fn container_round_trip_full_size() {
    let array = AntennaArray::distributed_room();
    let (na, nf) = (array.n_antennas(), array.n_subcarriers());
    let frames: Vec<CsiFrame> = (0..1000)
        .map(|k| {
            let data = (0..na * nf)
                .map(|i| Complex64::new((i % 97) as f64 * 0.01 - 0.4, (k % 13) as f64 * -0.02))
                .collect();
            CsiFrame::new(k as f64 * 0.01, 4, na, nf, data).unwrap()
        })
        .collect();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("big.csi");
    save_csi(&p, &array, 4, &frames).unwrap();
    let (back_array, back) = load_csi(&p).unwrap();
    assert_eq!(back_array.n_antennas(), na);
    assert_eq!(back.len(), 1000);
    for (a, b) in frames.iter().zip(&back) {
        assert_eq!(a.timestamp, b.timestamp);
        assert_eq!(b.ue_id, 4);
        for (x, y) in a.data().iter().zip(b.data()) {
            // stored as single precision
            assert!((x - y).norm() < 1e-6);
        }
    }
}

#[test]
fn calibration_survives_serialization() {
    let array = AntennaArray::distributed_room();
    let room = Room::default();
    let truth = random_impairments(64, 100, 2);
    let field = StaticField::generate(&array, &room, &array.tx_position(), 3, 2);
    let rps = reference_points(&room, 4, 1.0);
    let rec = calibration_recording(&array, &truth, &rps, &field.reflectors, 0.01, 2).unwrap();
    let params = fit(&CalibrationDataset::new(&array, rec.clone(), rps).unwrap()).unwrap();
    let back = CalibrationParams::from_json(&params.save_json()).unwrap();
    let a = apply_calibration(&rec[0], &params).unwrap();
    let b = apply_calibration(&rec[0], &back).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).norm() < 1e-12);
    }
}

fn run(fast_path: bool) -> Vec<(f64, Vec<[f64; 2]>)> {
    let array = AntennaArray::distributed_room();
    let target = Target::following(1, [2.0, 3.0], vec![[4.5, 3.0], [4.5, 7.0]], 1.0);
    let scene = Scene::in_room(&array, vec![target], 3, 0.01, 1).unwrap();
    let mut sim = Simulation::new(scene, array.clone(), 10, None).unwrap();
    let cfg = PipelineConfig {
        fast_path,
        grid_cell: 0.1,
        ..Default::default()
    };
    let mut p = Pipeline::new(&array, &CalibrationParams::identity(64), cfg).unwrap();
    (0..25)
        .map(|_| {
            let out = p.run_window(&sim.next_window().unwrap().0).unwrap();
            (out.tracks.timestamp, out.tracks.states.iter().map(|s| [s.x, s.y]).collect())
        })
        .collect()
}

#[test]
fn pipeline_is_deterministic() {
    for fast in [false, true] {
        assert_eq!(run(fast), run(fast));
    }
}

#[test]
fn pipeline_finds_a_walking_target() {
    let out = run(true);
    let last = &out.last().unwrap().1;
    assert!(!last.is_empty());
}
