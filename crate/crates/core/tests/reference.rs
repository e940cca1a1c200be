use mipsr_core::params::NetworkParams;
use mipsr_core::reference::{ReferenceConfig, ReferenceNet};
use mipsr_core::synthetic::texture;
use mipsr_core::tensor::{Graph, Tensor};
use mipsr_core::training::{adam_step, AdamHyper};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn recon_loss(net: &ReferenceNet, params: &mut NetworkParams<f32>, img: &Tensor<f32>, train: bool) -> f64 {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let r = g.constant(img.clone());
    let feats = net.encode(&mut g, &b, r).unwrap();
    let recon = net.reconstruct(&mut g, &b, &feats).unwrap();
    let loss = g.mse(recon, r).unwrap();
    let value = g.value(loss).item() as f64;
    if train {
        g.backward(loss).unwrap();
        params.absorb_grads(&g, &b).unwrap();
    }
    value
}

#[test]
fn reconstruction_learns_a_64px_reference() {
    let cfg = ReferenceConfig {
        levels: 2,
        channels: 16,
        loc_channels: 8,
        image_channels: 3,
    };
    let img = texture(3, 64, 64, 11).unwrap().to_tensor::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = NetworkParams::new();
    let net = ReferenceNet::init(&cfg, &mut params, &mut rng).unwrap();
    let hyper = AdamHyper { lr: 1e-3, ..AdamHyper::default() };

    let initial = recon_loss(&net, &mut params, &img, false);
    for step in 1..=300 {
        recon_loss(&net, &mut params, &img, true);
        adam_step(&mut params, &hyper, step).unwrap();
    }
    let fin = recon_loss(&net, &mut params, &img, false);
    println!("reconstruction mse {initial:.4e} -> {fin:.4e}");
    assert!(fin < 0.1 * initial, "{initial} -> {fin}");
}

#[test]
fn features_halve_per_level() {
    let cfg = ReferenceConfig {
        levels: 3,
        channels: 8,
        loc_channels: 4,
        image_channels: 1,
    };
    let img = texture(1, 64, 64, 2).unwrap().to_tensor::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = NetworkParams::new();
    let net = ReferenceNet::init(&cfg, &mut params, &mut rng).unwrap();
    let feats = net.encode_tensor(&params, &img).unwrap();
    let shapes: Vec<Vec<usize>> = feats.iter().map(|f| f.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![8, 32, 32], vec![8, 16, 16], vec![8, 8, 8]]);
}
