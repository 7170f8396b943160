use wearseg::dataio::{load_gray, load_mask, ClassPalette, WearClass};
use wearseg::metrics::pixel_count_series;
use wearseg::synth::{
    generate, generate_sequence, read_sequence_manifest, write_sequence, Layout, SequenceSpec, SyntheticSpec,
};

fn adhesive_ratio(wear: f64) -> f64 {
    let mut observed = 0.0;
    let mut expected = 0.0;
    for seed in 0..100 {
        let spec = SyntheticSpec {
            wear,
            seed,
            ..Default::default()
        };
        let layout = Layout::new(&spec).unwrap();
        let area = (layout.band_rows(WearClass::SurfaceSpalling).len() * spec.width) as f64;
        expected += wear * spec.max_dot_density * area * spec.mean_dot_area();
        observed += generate(&spec).unwrap().mask.count(WearClass::AdhesiveWear) as f64;
    }
    observed / expected
}

#[test]
fn adhesive_area_matches_density_times_band_area() {
    for wear in [0.25, 0.5, 1.0] {
        let r = adhesive_ratio(wear);
        assert!((0.75..=1.25).contains(&r), "wear {wear}: observed/expected = {r}");
    }
}

fn adhesive_counts(seq: &SequenceSpec, spec: &SyntheticSpec) -> Vec<u64> {
    generate_sequence(seq, spec)
        .unwrap()
        .map(|f| f.mask.count(WearClass::AdhesiveWear))
        .collect()
}

#[test]
fn uninterrupted_wear_only_grows() {
    let seq = SequenceSpec::evenly_spaced(40, 100, 1500.0, vec![]);
    let counts = adhesive_counts(&seq, &SyntheticSpec::default());
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert!(counts.last().unwrap() > counts.first().unwrap());
}

#[test]
fn cleaning_drops_the_count() {
    let seq = SequenceSpec::evenly_spaced(40, 100, 1500.0, vec![2050]);
    let counts = adhesive_counts(&seq, &SyntheticSpec::default());
    let after = seq.strokes.iter().position(|&s| s >= 2050).unwrap();
    assert!(counts[after] < counts[after - 1], "{counts:?}");
    assert!(counts[..after].windows(2).all(|w| w[0] <= w[1]));
    assert!(counts[after..].windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn every_frame_partitions_its_pixels() {
    let spec = SyntheticSpec::default();
    let seq = SequenceSpec::evenly_spaced(10, 300, 1000.0, vec![1500]);
    for f in generate_sequence(&seq, &spec).unwrap() {
        assert_eq!(f.mask.class_counts().iter().sum::<u64>(), (spec.width * spec.height) as u64);
    }
}

#[test]
fn count_series_reproduces_ground_truth() {
    let spec = SyntheticSpec::default();
    let seq = SequenceSpec::evenly_spaced(15, 200, 1000.0, vec![1600]);
    let frames: Vec<_> = generate_sequence(&seq, &spec).unwrap().collect();
    let series = pixel_count_series(frames.iter().map(|f| (f.stroke, &f.mask)), WearClass::AdhesiveWear);
    let truth: Vec<(u64, u64)> = frames
        .iter()
        .map(|f| (f.stroke, f.mask.classes().iter().filter(|&&c| c == 5).count() as u64))
        .collect();
    assert_eq!(series, truth);
}

#[test]
fn written_sequence_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::default();
    let seq = SequenceSpec::evenly_spaced(4, 500, 1000.0, vec![]);
    let palette = ClassPalette::default();
    write_sequence(dir.path(), &seq, &spec, &palette).unwrap();
    let rows = read_sequence_manifest(&dir.path().join("sequence.csv")).unwrap();
    let frames: Vec<_> = generate_sequence(&seq, &spec).unwrap().collect();
    assert_eq!(rows.len(), frames.len());
    for ((stroke, image, mask), f) in rows.iter().zip(&frames) {
        assert_eq!(*stroke, f.stroke);
        assert_eq!(load_gray(dir.path().join(image)).unwrap(), f.image);
        assert_eq!(load_mask(dir.path().join(mask), &palette).unwrap(), f.mask);
    }
}
