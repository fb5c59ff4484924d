use cosavatar::image::Image;
use cosavatar::metrics::{
    evaluate_sequence, pixel_mse_consistency, temporal_embedding_consistency, text_alignment, Embedder,
    RandomProjectionEmbedder,
};
use cosavatar::scene_synth::{synth_sequence, SceneSpec};
use cosavatar::Result;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Images on axis 0, text on axis 1.
struct Orthogonal;

impl Embedder for Orthogonal {
    fn embed_image(&self, _: &Image) -> Result<Vec<f64>> {
        Ok(vec![1.0, 0.0])
    }
    fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
        Ok(vec![0.0, 1.0])
    }
}

/// Everything lands on the same vector.
struct Constant;

impl Embedder for Constant {
    fn embed_image(&self, _: &Image) -> Result<Vec<f64>> {
        Ok(vec![0.6, 0.8])
    }
    fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
        Ok(vec![0.6, 0.8])
    }
}

fn frames_strategy() -> impl Strategy<Value = Vec<Image>> {
    (2usize..6, any::<u64>()).prop_map(|(n, seed)| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Image { width: 4, height: 3, data: (0..36).map(|_| rng.random::<f64>()).collect() })
            .collect()
    })
}

#[test]
fn analytic_cases() {
    let c = Image::filled(8, 8, [0.3, 0.5, 0.7]);
    assert_eq!(pixel_mse_consistency(&[c.clone(), c.clone(), c.clone()]).unwrap(), 0.0);
    let d = Image::filled(8, 8, [0.4, 0.6, 0.8]);
    assert!((pixel_mse_consistency(&[c.clone(), d]).unwrap() - 0.01).abs() < 1e-15);
    let e = RandomProjectionEmbedder::default();
    assert!((temporal_embedding_consistency(&[c.clone(), c.clone()], &e).unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(text_alignment(&[c.clone()], "x", &Constant).unwrap(), 1.0);
    assert!(text_alignment(&[c.clone(), c.clone()], "x", &Orthogonal).unwrap().abs() < 1e-6);
    let single = text_alignment(&[c.clone()], "purple", &e).unwrap();
    let direct = cosavatar::metrics::cosine(&e.embed_image(&c).unwrap(), &e.embed_text("purple").unwrap()).unwrap();
    assert_eq!(single, direct);
    assert!(pixel_mse_consistency(&[c.clone()]).is_err());
    assert!(text_alignment(&[], "x", &e).is_err());
    assert!(pixel_mse_consistency(&[c, Image::new(4, 4)]).is_err());
}

#[test]
fn ordered_sequence_beats_shuffled() {
    let ds = synth_sequence(&SceneSpec::default()).unwrap();
    let ordered: Vec<Image> = ds.frames.iter().map(|f| f.image_gt.clone()).collect();
    let mut shuffled = ordered.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let e = RandomProjectionEmbedder::default();
    let a = evaluate_sequence(&ordered, Some("a portrait"), &e).unwrap();
    let b = evaluate_sequence(&shuffled, Some("a portrait"), &e).unwrap();
    assert!(a.tem_con >= b.tem_con, "{} vs {}", a.tem_con, b.tem_con);
    assert!(a.pixel_mse <= b.pixel_mse);
    assert_eq!(a.frames, 20);
}

proptest! {
    #[test]
    fn embeddings_are_unit_norm(frames in frames_strategy(), text in "[a-z ]{0,30}", seed in 0u64..50) {
        let e = RandomProjectionEmbedder::new(32, seed);
        for f in &frames {
            let v = e.embed_image(f).unwrap();
            prop_assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
        let t = e.embed_text(&text).unwrap();
        prop_assert!((t.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn metrics_are_bounded(frames in frames_strategy(), text in "[a-z ]{1,20}") {
        let e = RandomProjectionEmbedder::default();
        let r = evaluate_sequence(&frames, Some(&text), &e).unwrap();
        prop_assert!(r.pixel_mse >= 0.0);
        prop_assert!((-1.0..=1.0).contains(&r.tem_con));
        prop_assert!((-1.0..=1.0).contains(&r.clip_text.unwrap()));
    }

    #[test]
    fn duplicating_a_frame_never_increases_pixel_mse(frames in frames_strategy(), at in 0usize..6) {
        let base = pixel_mse_consistency(&frames).unwrap();
        let k = at % frames.len();
        let mut dup = frames.clone();
        dup.insert(k, frames[k].clone());
        prop_assert!(pixel_mse_consistency(&dup).unwrap() <= base + 1e-15);
    }

    #[test]
    fn pixel_mse_depends_on_order(frames in frames_strategy()) {
        prop_assume!(frames.len() >= 3);
        let base = pixel_mse_consistency(&frames).unwrap();
        let mut differs = false;
        for i in 0..frames.len() {
            for j in i + 1..frames.len() {
                let mut p = frames.clone();
                p.swap(i, j);
                if pixel_mse_consistency(&p).unwrap() != base {
                    differs = true;
                }
            }
        }
        prop_assert!(differs);
    }
}
