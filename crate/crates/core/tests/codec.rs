use std::collections::BTreeMap;

use vade_core::codec::{train_codec, CodecConfig, CodecMode, CodecTrainConfig};
use vade_core::image::Image;
use vade_core::metrics::psnr;
use vade_core::phantom::{default_class_mix, generate_samples, PhantomClass, PhantomSpec, Split};

#[test]
fn learned_codec_reconstructs_held_out_phantoms() {
    let spec = PhantomSpec::default();
    let train: Vec<Image> = generate_samples(&spec, &default_class_mix(), 0, Split::Train)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect();
    let (codec, trace) =
        train_codec(&train, CodecConfig::learned(), &CodecTrainConfig::default()).unwrap();
    assert_eq!(codec.mode(), CodecMode::Learned);
    assert!(trace.last().unwrap() < &trace[0]);

    let mix: BTreeMap<_, _> = PhantomClass::ALL.iter().map(|&c| (c, 10)).collect();
    let held_out = generate_samples(&spec, &mix, 500, Split::Test).unwrap();
    assert_eq!(held_out.len(), 50);
    let mean_psnr = held_out
        .iter()
        .map(|s| psnr(&s.image, &codec.round_trip(&s.image).unwrap()).unwrap())
        .sum::<f64>()
        / 50.0;
    assert!(mean_psnr >= 28.0, "{mean_psnr}");

    let flat = codec.round_trip(&Image::filled(64, 64, 0.5)).unwrap();
    let worst = flat
        .pixels()
        .iter()
        .map(|v| (v - 0.5).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 0.05, "{worst}");
    assert_eq!(codec.features(&held_out[0].image).unwrap().len(), 64);
}
