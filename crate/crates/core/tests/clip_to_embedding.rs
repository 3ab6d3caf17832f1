use gram_core::audio_io::{read_feature, read_wav, write_feature, write_wav, WavEncoding, SAMPLE_RATE};
use gram_core::corpus::{localization_clip, TargetKind};
use gram_core::features::logmel;
use gram_core::model::blocks::Backbone;
use gram_core::model::embed::{embed_array, embedding_width, EmbeddingMode};
use gram_core::model::{patch_values, unpatchify, Model, ModelConfig, Strategy};

#[test]
fn wav_features_and_embeddings_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let clip = localization_clip(TargetKind::Chirp, 45.0, 2.5, 30.0, 11).unwrap();
    let wav = tmp.path().join("clip.wav");
    write_wav(&wav, &clip, WavEncoding::Float32).unwrap();
    let back = read_wav(&wav).unwrap();
    assert_eq!(back.rate_hz(), SAMPLE_RATE);
    assert_eq!(back.samples_per_channel(), clip.samples_per_channel());

    let spec = logmel(&back).unwrap();
    let (c, frames, mels) = spec.shape();
    assert_eq!((c, mels), (2, 128));
    assert!(frames > 200);
    let bsf = tmp.path().join("clip.bsf");
    write_feature(&bsf, &spec).unwrap();
    assert_eq!(read_feature(&bsf).unwrap().values(), spec.values());

    for strategy in [Strategy::PatchBased, Strategy::TimeBased] {
        let seg = spec.crop(0, 200).unwrap().to_f64();
        let cfg = ModelConfig::toy(strategy, Backbone::Transformer);
        let patches = patch_values(seg.view(), &cfg.patch).unwrap();
        assert_eq!(unpatchify(&patches, &cfg.patch), seg);

        for backbone in [Backbone::Transformer, Backbone::Mamba] {
            let model = Model::init(ModelConfig::toy(strategy, backbone), 5).unwrap();
            for mode in [EmbeddingMode::ClipLevel, EmbeddingMode::Localization] {
                let e = embed_array(&model, &spec.to_f64(), mode).unwrap();
                assert_eq!(e.len(), embedding_width(&model, mode));
                assert!(e.iter().all(|v| v.is_finite()));
                assert_eq!(e, embed_array(&model, &spec.to_f64(), mode).unwrap());
            }
        }
    }
}
