mod common;

use stan_core::probe::{attention_maps, channel_mean_abs, encode_pgm, min_max_normalize, upsample_nearest, write_maps};
use stan_core::tensor::Tensor;

#[test]
fn channel_mean_abs_oracle() {
    let t = Tensor::new(vec![2, 1, 2], vec![1.0, -2.0, -3.0, 4.0]).unwrap();
    assert_eq!(channel_mean_abs(&t).unwrap().data(), &[2.0, 3.0]);
    assert!(channel_mean_abs(&Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap()).is_err());
}

#[test]
fn normalisation_range_and_constant_map() {
    let t = Tensor::new(vec![2, 2], vec![2.0, 4.0, 3.0, 6.0]).unwrap();
    assert_eq!(min_max_normalize(&t).data(), &[0.0, 0.5, 0.25, 1.0]);
    let c = Tensor::new(vec![2, 2], vec![5.0; 4]).unwrap();
    assert_eq!(min_max_normalize(&c).data(), &[0.0; 4]);
}

#[test]
fn nearest_upsampling_repeats_cells() {
    let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let u = upsample_nearest(&t, 4).unwrap();
    assert_eq!(
        u.data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn pgm_header_and_pixels() {
    let t = Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap();
    let mut want = b"P5\n3 1\n255\n".to_vec();
    want.extend([0u8, 128, 255]);
    assert_eq!(encode_pgm(&t), want);
}

#[test]
fn maps_cover_the_image_in_unit_range() {
    let (model, store) = common::tiny();
    let side = model.cfg.backbone.image_size;
    let img = common::rand_tensor(&[3, side, side], 2);
    let maps = attention_maps(&model, &store, &img).unwrap();
    assert_eq!(maps.len(), 4);
    for m in &maps {
        assert_eq!(m.shape(), &[side, side]);
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let dir = tempfile::tempdir().unwrap();
    write_maps(dir.path(), &maps).unwrap();
    for i in 1..=4 {
        assert!(dir.path().join(format!("block{i}.pgm")).exists());
        assert!(dir.path().join(format!("block{i}.stan")).exists());
    }
}

#[test]
fn constant_image_gives_flat_maps() {
    let (model, mut store) = common::desk();
    let biases: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in biases {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let side = model.cfg.backbone.image_size;
    let img = Tensor::new(vec![3, side, side], vec![0.3; 3 * side * side]).unwrap();
    for m in attention_maps(&model, &store, &img).unwrap() {
        assert!(m.data().iter().all(|&v| v == m.data()[0]), "map is not spatially constant");
    }
}
