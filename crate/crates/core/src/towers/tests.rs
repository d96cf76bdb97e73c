use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{cosine_similarity, AttentionMask};

fn small() -> TowerConfig {
    TowerConfig {
        image_size: 8,
        patch_size: 4,
        token_dim: 8,
        heads: 2,
        vocab_size: 50,
        max_title_len: 6,
        k_images: 3,
        seed: 5,
        ..TowerConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, cfg: &TowerConfig) -> ImagePatchGrid {
    let n = cfg.image_size * cfg.image_size;
    ImagePatchGrid::new(cfg.image_size, cfg.patch_size, (0..n).map(|_| rng.random()).collect()).unwrap()
}

fn random_title(rng: &mut ChaCha8Rng, cfg: &TowerConfig) -> TitleTokens {
    let len = rng.random_range(1..=cfg.max_title_len);
    let ids = (0..len).map(|_| rng.random_range(2..cfg.vocab_size as u32)).collect();
    TitleTokens::new(ids, cfg.max_title_len)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn image_encoder_is_deterministic_and_normalized() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_image(&mut rng, &cfg);
    let (toks, e) = m.encode_image(&img).unwrap();
    assert_eq!((toks.rows(), toks.cols()), (cfg.num_patches(), cfg.token_dim));
    assert_eq!(m.encode_image(&img.clone()).unwrap().1, e);
    assert!((norm(&e) - 1.0).abs() < 1e-6);
    let (_, z) = m.encode_image(&ImagePatchGrid::empty(8, 4)).unwrap();
    assert!(z.iter().all(|v| v.is_finite()));
    assert!((norm(&z) - 1.0).abs() < 1e-6);
}

#[test]
fn wrong_grid_is_a_shape_error() {
    let m = TowerModel::new(small()).unwrap();
    let img = ImagePatchGrid::new(4, 2, vec![0.5; 16]).unwrap();
    assert!(matches!(m.query_embedding(&img), Err(crate::Error::Shape(_))));
}

#[test]
fn title_encoder_contracts() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let t = TitleTokens::new(vec![3, 9, 17, 4], cfg.max_title_len);
    let (seq, cls) = m.encode_title(&t).unwrap();
    assert_eq!((seq.rows(), seq.cols()), (cfg.max_title_len + 1, cfg.token_dim));
    assert_eq!(m.encode_title(&t).unwrap().1, cls);

    let permuted = TitleTokens::new(vec![17, 4, 3, 9], cfg.max_title_len);
    let (_, cls_p) = m.encode_title(&permuted).unwrap();
    assert!(max_diff(&cls, &cls_p) > 1e-6);

    let empty = TitleTokens::empty(cfg.max_title_len);
    assert_eq!(empty.mask().valid_count(), 0);
    let (_, cls_e) = m.encode_title(&empty).unwrap();
    assert!(cls_e.iter().all(|v| v.is_finite()));
    assert!(max_diff(&cls, &cls_e) > 1e-6);

    let oov = TitleTokens::new(vec![3, 50], cfg.max_title_len);
    assert!(matches!(m.encode_title(&oov), Err(crate::Error::Domain(_))));
}

#[test]
fn empty_title_cls_ignores_padding_positions() {
    // With every title position masked, CLS attends only to itself, so the
    // token table entry used for padding cannot leak in.
    let cfg = small();
    let mut m = TowerModel::new(cfg).unwrap();
    let empty = TitleTokens::empty(cfg.max_title_len);
    let (_, before) = m.encode_title(&empty).unwrap();
    let tok = m.params().find("title.tok").unwrap();
    let d = cfg.token_dim;
    for v in &mut m.params_mut().get_mut(tok).data_mut()[..d] {
        *v += 3.0;
    }
    let (_, after) = m.encode_title(&empty).unwrap();
    assert_eq!(before, after);
}

#[test]
fn towers_share_one_image_encoder() {
    let m = TowerModel::new(small()).unwrap();
    assert!(std::ptr::eq(
        m.query_tower().image_encoder(),
        m.item_tower().image_encoder()
    ));
}

#[test]
fn query_matches_pooled_item_image() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, &cfg);
    let q = m.query_tower().embed(&img).unwrap();
    let (_, pooled) = m.encode_image(&img).unwrap();
    assert!((cosine_similarity(&q, &pooled).unwrap() - 1.0).abs() < 1e-12);
    let z = m.query_embedding(&ImagePatchGrid::empty(8, 4)).unwrap();
    assert!(z.iter().all(|v| v.is_finite()));
}

#[test]
fn query_embedding_is_locally_smooth() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let img = random_image(&mut rng, &cfg);
        let mut px = img.pixels().to_vec();
        let i = rng.random_range(0..px.len());
        px[i] = if px[i] > 0.5 { px[i] - 1e-6 } else { px[i] + 1e-6 };
        let moved = ImagePatchGrid::new(8, 4, px).unwrap();
        let a = m.query_embedding(&img).unwrap();
        let b = m.query_embedding(&moved).unwrap();
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-3, "{dist}");
    }
}

fn item(rng: &mut ChaCha8Rng, cfg: &TowerConfig, n_images: usize) -> ItemInput {
    let imgs: Vec<_> = (0..n_images).map(|_| random_image(rng, cfg)).collect();
    ItemInput::new(random_title(rng, cfg), &imgs, cfg.k_images, cfg.grid(), 0).unwrap()
}

#[test]
fn item_embedding_contracts() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let it = item(&mut rng, &cfg, 2);
    let e = m.item_tower().embed(&it).unwrap();
    assert_eq!(e.len(), cfg.out_dim);
    assert!((norm(&e) - 1.0).abs() < 1e-6);
    assert_eq!(m.item_embedding(&it.clone()).unwrap(), e);

    let title_only = ItemInput::new(it.title.clone(), &[], cfg.k_images, cfg.grid(), 0).unwrap();
    let t = m.item_embedding(&title_only).unwrap();
    assert!((norm(&t) - 1.0).abs() < 1e-6);
}

#[test]
fn item_embedding_is_order_sensitive_across_slots() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let it = item(&mut rng, &cfg, 3);
    let mut swapped = it.clone();
    swapped.images.swap(0, 2);
    let a = m.item_embedding(&it).unwrap();
    let b = m.item_embedding(&swapped).unwrap();
    assert!(max_diff(&a, &b) > 1e-9);
}

#[test]
fn no_image_item_equals_fusion_without_image_tokens() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let it = item(&mut rng, &cfg, 0);
    let (tt, _) = m.encode_title(&it.title).unwrap();
    let garbage: Vec<_> = (0..cfg.k_images)
        .map(|_| m.encode_image(&random_image(&mut rng, &cfg)).unwrap().0)
        .collect();
    let direct = m
        .fuse_merge_attention(&garbage, &AttentionMask::all_invalid(cfg.k_images), &tt, &it.title.mask())
        .unwrap();
    assert_eq!(m.item_embedding(&it).unwrap(), direct);
}

#[test]
fn single_image_paths_agree() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = random_image(&mut rng, &cfg);
    let title = random_title(&mut rng, &cfg);
    let (tt, _) = m.encode_title(&title).unwrap();
    let (it, _) = m.encode_image(&img).unwrap();
    let via_tokens = m
        .fuse_merge_attention(&[it], &AttentionMask::all_valid(1), &tt, &title.mask())
        .unwrap();
    let generic = ItemInput::new(title.clone(), &[img.clone()], cfg.k_images, cfg.grid(), 0).unwrap();
    assert_eq!(generic.image_mask.valid_count(), 1);
    assert_eq!(m.item_embedding(&generic).unwrap(), via_tokens);
    assert_eq!(m.pair_embedding(&img, &title).unwrap(), via_tokens);
}

#[test]
fn dropping_masked_tokens_matches_key_masking() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 0..=cfg.k_images {
        let it = item(&mut rng, &cfg, n);
        let a = m.item_embedding(&it).unwrap();
        let b = m.fuse_masked_reference(&it).unwrap();
        assert!(max_diff(&a, &b) < 1e-12, "{n} images");
    }
}

#[test]
fn fusion_rejects_bad_token_dims() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let t = TitleTokens::new(vec![3], cfg.max_title_len);
    let (tt, _) = m.encode_title(&t).unwrap();
    let bad = crate::numcore::Tensor::zeros(vec![cfg.num_patches(), cfg.token_dim + 1]);
    let r = m.fuse_merge_attention(&[bad], &AttentionMask::all_valid(1), &tt, &t.mask());
    assert!(matches!(r, Err(crate::Error::Shape(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small();
    let m = TowerModel::new(cfg).unwrap();
    let bytes = checkpoint::to_bytes(&m);
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(checkpoint::to_bytes(&back), bytes);
    for ((_, na, a), (_, nb, b)) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(na, nb);
        let bits = |t: &crate::numcore::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&m, &path).unwrap();
    assert_eq!(checkpoint::fingerprint(&checkpoint::load(&path).unwrap()), checkpoint::fingerprint(&m));

    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn same_seed_same_weights() {
    let a = TowerModel::new(small()).unwrap();
    let b = TowerModel::new(small()).unwrap();
    assert_eq!(checkpoint::to_bytes(&a), checkpoint::to_bytes(&b));
    let c = TowerModel::new(TowerConfig { seed: 6, ..small() }).unwrap();
    assert_ne!(checkpoint::to_bytes(&a), checkpoint::to_bytes(&c));
}

#[test]
fn paper_scale_topology_builds() {
    let cfg = TowerConfig::paper_scale();
    assert_eq!((cfg.fusion_layers, cfg.out_dim), (6, 128));
    let m = TowerModel::new(TowerConfig { vocab_size: 64, ..cfg }).unwrap();
    assert!(m.params().find("fusion.block5.attn.q.w").is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padded_slot_pixels_never_reach_the_embedding(seed in 0u64..1000, n in 0usize..3) {
        let cfg = small();
        let m = TowerModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let it = item(&mut rng, &cfg, n);
        let base = m.item_embedding(&it).unwrap();
        let mut noisy = it.clone();
        for k in n..cfg.k_images {
            noisy.images[k] = random_image(&mut rng, &cfg);
        }
        let e = m.item_embedding(&noisy).unwrap();
        prop_assert!(max_diff(&base, &e) < 1e-6);
    }
}
