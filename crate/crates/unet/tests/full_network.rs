use cfrc_unet::{Head, Mode, UNet, UNetConfig};
use ndarray::Array4;

#[test]
fn full_size_network_maps_256_inputs_through_a_2048x1x1_bottleneck() {
    let cfg = UNetConfig::full(4, 2, Head::Linear);
    let mut net = UNet::<f32>::build(cfg.clone(), 0).unwrap();
    assert_eq!(net.trainable_count(), cfg.parameter_count());
    let x = Array4::from_shape_fn((1, 4, 256, 256), |(_, c, i, j)| ((c * 7 + i * 3 + j) % 11) as f32 / 11.0);
    let y = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(y.dim(), (1, 2, 256, 256));
    assert!(y.iter().all(|v| v.is_finite()));
    assert_eq!(net.last_bottleneck_dim(), Some((1, 2048, 1, 1)));
}

#[test]
fn reduced_network_trains_in_batches_and_stays_deterministic() {
    let cfg = UNetConfig::reduced(5, 2, Head::Linear, 3, 32);
    let mut a = UNet::<f32>::build(cfg.clone(), 3).unwrap();
    let mut b = UNet::<f32>::build(cfg, 3).unwrap();
    let x = Array4::from_shape_fn((4, 5, 32, 32), |(n, c, i, j)| ((n + c * 5 + i * j) % 9) as f32 / 9.0 - 0.5);
    for net in [&mut a, &mut b] {
        let y = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(net.last_bottleneck_dim(), Some((4, 64, 4, 4)));
        net.zero_grad();
        net.backward(&y);
    }
    assert_eq!(a.forward(&x, Mode::Eval).unwrap(), b.forward(&x, Mode::Eval).unwrap());
}
