use cfrc_core::case_io::{read_case, write_case};
use cfrc_core::crackpath::rmse_stress;
use cfrc_core::material::{simulate_case, MaterialParams};
use cfrc_core::mesh_ingest::{fit_norm_stats, mirror_augment, FloorPolicy, NormStats};
use cfrc_core::microgen::{generate_fiber_centers, parse_layout, rasterize, write_layout, LayoutConfig};
use cfrc_core::Channel;

#[test]
fn layout_to_case_directory_round_trip() {
    let layout = generate_fiber_centers(0.5, &LayoutConfig::default(), 42).unwrap();
    let layout = parse_layout(&write_layout(&layout)).unwrap();
    let seq = simulate_case(&rasterize(&layout, 32), &MaterialParams::default()).unwrap();
    assert_eq!(seq.frames.len(), 61);
    assert!(seq.uts_index > 0 && seq.uts_index < 60);

    let dir = tempfile::tempdir().unwrap();
    write_case(&seq, dir.path()).unwrap();
    let back = read_case(dir.path()).unwrap();
    assert_eq!(back.case_id, seq.case_id);
    assert_eq!(back.uts_index, seq.uts_index);
    assert_eq!(back.microstructure, seq.microstructure);
    assert_eq!(back.final_damage, seq.final_damage);
    assert_eq!(rmse_stress(&seq.frames, &back.frames).unwrap(), 0.0);
}

#[test]
fn mirror_augmentation_matches_simulating_the_mirrored_layout() {
    let layout = generate_fiber_centers(0.5, &LayoutConfig::default(), 9).unwrap();
    let params = MaterialParams::default();
    let seq = simulate_case(&rasterize(&layout, 32), &params).unwrap();
    let direct = simulate_case(&rasterize(&layout.mirrored(), 32), &params).unwrap();
    let augmented = mirror_augment(&seq);
    assert_eq!(augmented.microstructure, direct.microstructure);
    assert_eq!(augmented.uts_index, direct.uts_index);
    for (a, b) in augmented.frames.iter().zip(&direct.frames) {
        assert_eq!(a.s11, b.s11);
        assert_eq!(a.s12, b.s12);
        assert_eq!(a.sv, b.sv);
        assert_eq!(a.damage, b.damage);
    }
}

#[test]
fn norm_stats_fit_on_simulated_frames_survive_a_save_load_cycle() {
    let layout = generate_fiber_centers(0.5, &LayoutConfig::default(), 3).unwrap();
    let seq = simulate_case(&rasterize(&layout, 32), &MaterialParams::default()).unwrap();
    let stats = fit_norm_stats(&seq.frames, FloorPolicy::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("norm_stats.json");
    stats.save(&path).unwrap();
    let back = NormStats::load(&path).unwrap();
    for channel in Channel::FRAME {
        assert_eq!(back.get(channel).unwrap(), stats.get(channel).unwrap());
    }
    let frame = &seq.frames[seq.uts_index];
    let round = back.denormalize(&back.normalize(frame).unwrap()).unwrap();
    for (x, y) in round.sv.iter().zip(frame.sv.iter()) {
        assert!((x - y).abs() <= 1e-3 * y.abs().max(1.0));
    }
}
