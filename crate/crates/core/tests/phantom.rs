use vade_core::image::{decode_png, encode_png, BitDepth};
use vade_core::phantom::*;

#[test]
fn lesion_areas_respect_configured_bounds() {
    let spec = PhantomSpec::default();
    let [lo, hi] = spec.lesions.area_px;
    let mut mix = default_class_mix();
    mix.insert(PhantomClass::Cardiomegaly, 40);
    for s in generate_samples(&spec, &mix, 11, Split::Test).unwrap() {
        let area = s.lesion_mask.pixels().iter().filter(|&&v| v > 0.5).count();
        if s.class == PhantomClass::Healthy {
            assert_eq!(area, 0);
        } else {
            assert!((lo..=hi).contains(&area), "{} area {area}", s.class);
        }
        if !matches!(s.class, PhantomClass::Cardiomegaly | PhantomClass::Healthy) {
            for (l, g) in s.lesion_mask.pixels().iter().zip(s.lung_mask.pixels()) {
                assert!(*l <= *g);
            }
        }
    }
}

#[test]
fn opacity_differs_only_in_its_lung() {
    let spec = PhantomSpec::default();
    for seed in 0..10 {
        let kind = LesionKind::Opacity {
            side: Side::Left,
            radius: 5.0,
            intensity: 0.35,
        };
        let d = generate_sample(&spec, Some(&kind), seed).unwrap();
        let h = generate_sample(&spec, None, seed).unwrap();
        let left = Anatomy::new(&spec, seed).side_mask(Side::Left);
        for ((a, b), l) in d
            .image
            .pixels()
            .iter()
            .zip(h.image.pixels())
            .zip(left.pixels())
        {
            if a != b {
                assert!(*l > 0.5);
            }
        }
        assert_eq!(d.label_text, "small lung opacity on the left");
    }
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::default();
    let mix = [(PhantomClass::Healthy, 2), (PhantomClass::Haze, 2)]
        .into_iter()
        .collect();
    let m = generate_dataset(&spec, &mix, dir.path(), 5, Split::Test).unwrap();
    m.lint(dir.path()).unwrap();
    let loaded = m.load(dir.path()).unwrap();
    let direct = generate_samples(&spec, &mix, 5, Split::Test).unwrap();
    assert_eq!(loaded.len(), direct.len());
    for (l, d) in loaded.iter().zip(&direct) {
        assert_eq!(l.label_text, d.label_text);
        assert_eq!(l.lesion_mask, d.lesion_mask);
        let err = l
            .image
            .pixels()
            .iter()
            .zip(d.image.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err as f64 <= 1.0 / 131070.0 + 1e-9);
        let again = decode_png(&encode_png(&l.image, BitDepth::Sixteen).unwrap()).unwrap();
        assert_eq!(again, l.image);
    }
}
