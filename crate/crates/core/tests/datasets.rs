use cvq::datasets::{
    encode_pnm, generate_corpus, load_dataset, parse_pnm, read_manifest, render_corpus, CorpusKind,
    CorpusSpec,
};
use cvq::tensor::Tensor;
use sha2::{Digest, Sha256};

fn spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        kind: CorpusKind::Mixed,
        count: 1200,
        height: 16,
        width: 16,
        channels: 3,
        classes: 10,
        seed,
    }
}

#[test]
fn corpus_generation_replays_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_corpus(&spec(4), a.path()).unwrap();
    let mb = generate_corpus(&spec(4), b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.shards.len(), 2);
    for s in &ma.shards {
        let bytes = std::fs::read(a.path().join(&s.images)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), s.images_sha256);
        assert_eq!(bytes, std::fs::read(b.path().join(&s.images)).unwrap());
        let labels = std::fs::read(a.path().join(&s.labels)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&labels)), s.labels_sha256);
    }
    assert_eq!(read_manifest(a.path()).unwrap(), ma);

    let other = generate_corpus(&spec(5), b.path()).unwrap();
    assert_ne!(other.shards[0].images_sha256, ma.shards[0].images_sha256);
}

#[test]
fn loaded_corpus_equals_rendered_corpus() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&spec(1), dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    let rendered = render_corpus(&spec(1)).unwrap();
    assert_eq!(loaded.labels, rendered.labels);
    assert_eq!(loaded.train, rendered.train);
    assert_eq!(loaded.val, rendered.val);
    assert_eq!(
        loaded.images.unwrap().pixels(),
        rendered.images.unwrap().pixels()
    );
    assert_eq!(rendered.val.len(), 120);
}

#[test]
fn ppm_ntb_ppm_round_trip() {
    let (h, w) = (5, 7);
    let pixels: Vec<f64> = (0..h * w * 3)
        .map(|i| ((i * 37) % 256) as f64 / 255.0)
        .collect();
    let ppm = encode_pnm(&pixels, h, w, 3).unwrap();
    let parsed = parse_pnm(&ppm).unwrap();
    assert_eq!(
        (parsed.height, parsed.width, parsed.channels, parsed.maxval),
        (h, w, 3, 255)
    );
    let unit: Vec<f64> = parsed
        .samples
        .iter()
        .map(|&s| s as f64 / parsed.maxval as f64)
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("image.ntb");
    Tensor::new(vec![h, w, 3], unit)
        .unwrap()
        .save(&path)
        .unwrap();
    let back = Tensor::load(&path).unwrap();
    assert_eq!(encode_pnm(back.data(), h, w, 3).unwrap(), ppm);
}
