use mipsr_core::generator::GeneratorConfig;
use mipsr_core::image::Role;
use mipsr_core::reference::ReferenceConfig;
use mipsr_core::resampling::downsample;
use mipsr_core::synthetic::{scene, texture};
use mipsr_core::tensor::Tensor;
use mipsr_core::training::{run_optimization, RunConfig, Trainer};
use mipsr_core::{Error, ImageBuffer};

fn tiny_cfg(iterations: usize) -> RunConfig {
    RunConfig {
        iterations,
        seed: 7,
        log_every: 5,
        generator: GeneratorConfig {
            levels: 1,
            channels: 4,
            skip_channels: 2,
            noise_channels: 4,
            ..GeneratorConfig::default()
        },
        reference: ReferenceConfig {
            levels: 1,
            channels: 4,
            loc_channels: 2,
            ..ReferenceConfig::default()
        },
        ..RunConfig::default()
    }
}

/// 3x8x8 LSR and 3x32x32 reference with scale 4.
fn tiny_pair(seed: u64) -> (ImageBuffer, ImageBuffer) {
    let (gt, reference) = scene(3, 32, 32, seed).unwrap();
    let lsr = downsample(&gt.to_tensor::<f64>(), 4).unwrap();
    (ImageBuffer::from_tensor(&lsr, Role::Lsr).unwrap(), reference)
}

#[test]
fn single_iteration_gives_one_record_and_open_range_image() {
    let (lsr, reference) = tiny_pair(1);
    let out = run_optimization(&tiny_cfg(1), &lsr, &reference).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].iteration, 1);
    assert_eq!(out.sr.shape(), [3, 32, 32]);
    assert!(out.sr.values().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn log_schedule() {
    let (lsr, reference) = tiny_pair(1);
    let out = run_optimization(&tiny_cfg(12), &lsr, &reference).unwrap();
    let iters: Vec<usize> = out.log.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, vec![1, 5, 10, 12]);
    assert!(out.log.iter().all(|r| r.loss_sr.is_finite() && r.loss_ref.is_finite()));
}

#[test]
fn anchoring_holds_bitwise_for_100_steps() {
    let (lsr, reference) = tiny_pair(2);
    let mut tr = Trainer::<f32>::new(&tiny_cfg(100), &lsr.to_tensor(), &reference.to_tensor()).unwrap();
    let init = tr.noise().init().clone();
    for i in 1..=100 {
        tr.step().unwrap();
        let st = tr.noise();
        assert_eq!(st.iteration(), i);
        assert_eq!(st.init(), &init);
        let lm = st.latest().unwrap();
        let alpha = st.alpha();
        for ((c, n0), f) in st.current().data().iter().zip(init.data()).zip(lm.values.data()) {
            assert_eq!(c.to_bits(), (n0 + alpha * f).to_bits(), "iteration {i}");
        }
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let (lsr, reference) = tiny_pair(3);
    let cfg = tiny_cfg(15);
    let a = run_optimization(&cfg, &lsr, &reference).unwrap();
    let b = run_optimization(&cfg, &lsr, &reference).unwrap();
    assert_eq!(a.sr, b.sr);
    assert_eq!(a.log, b.log);
    let c = run_optimization(&RunConfig { seed: 8, ..cfg }, &lsr, &reference).unwrap();
    assert_ne!(a.sr, c.sr);
}

/// Generator parameters after `steps` iterations, flattened.
fn generator_trajectory(cfg: &RunConfig, lsr: &ImageBuffer, reference: &ImageBuffer, steps: usize) -> Vec<u32> {
    let mut tr = Trainer::<f32>::new(cfg, &lsr.to_tensor(), &reference.to_tensor()).unwrap();
    for _ in 0..steps {
        tr.step().unwrap();
    }
    tr.params()
        .iter()
        .filter(|p| p.name.starts_with("gen."))
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn reference_reaches_generator_only_through_the_latent_map() {
    let (lsr, ref_a) = tiny_pair(4);
    let ref_b = texture(3, 32, 32, 99).unwrap().with_role(Role::Reference);
    let frozen = RunConfig { alpha: 0.0, ..tiny_cfg(10) };
    assert_eq!(
        generator_trajectory(&frozen, &lsr, &ref_a, 10),
        generator_trajectory(&frozen, &lsr, &ref_b, 10)
    );
    let live = tiny_cfg(10);
    assert_ne!(
        generator_trajectory(&live, &lsr, &ref_a, 10),
        generator_trajectory(&live, &lsr, &ref_b, 10)
    );
}

#[test]
fn sr_loss_does_not_reach_the_encoder() {
    // the latent map is detached, so with lambda = 0 nothing trains the encoder
    let (lsr, reference) = tiny_pair(6);
    let cfg = RunConfig { lambda: 0.0, ..tiny_cfg(10) };
    let mut tr = Trainer::<f32>::new(&cfg, &lsr.to_tensor(), &reference.to_tensor()).unwrap();
    let encoder = |tr: &Trainer<f32>| -> Vec<u32> {
        tr.params()
            .iter()
            .filter(|p| p.name.starts_with("ref."))
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let before = encoder(&tr);
    for _ in 0..10 {
        tr.step().unwrap();
    }
    assert_eq!(encoder(&tr), before);
}

#[test]
fn rejects_bad_inputs_before_iterating() {
    let (lsr, reference) = tiny_pair(5);
    let cfg = tiny_cfg(3);
    let (small_ref, _) = reference.center_crop(28, 32).unwrap();
    assert!(run_optimization(&cfg, &lsr, &small_ref).is_err());
    let wrong_scale = RunConfig { scale: 2, ..cfg.clone() };
    assert!(run_optimization(&wrong_scale, &lsr, &reference).is_err());
    // 6x6 LSR: 24 is not a multiple of 4 * 2^2
    let deep = RunConfig {
        generator: GeneratorConfig { levels: 2, ..cfg.generator.clone() },
        reference: ReferenceConfig { levels: 2, ..cfg.reference.clone() },
        ..cfg.clone()
    };
    let (l6, _) = lsr.center_crop(6, 6).unwrap();
    let (r24, _) = reference.center_crop(24, 24).unwrap();
    assert!(matches!(
        run_optimization(&deep, &l6, &r24),
        Err(Error::NotDivisible { .. })
    ));
    let nan = Tensor::full(&[3, 8, 8], f32::NAN);
    assert!(Trainer::<f32>::new(&cfg, &nan, &reference.to_tensor()).is_err());
}

#[test]
fn grayscale_inputs_are_supported() {
    let (gt, reference) = scene(1, 32, 32, 6).unwrap();
    let lsr = ImageBuffer::from_tensor(&downsample(&gt.to_tensor::<f64>(), 4).unwrap(), Role::Lsr).unwrap();
    let out = run_optimization(&tiny_cfg(2), &lsr, &reference).unwrap();
    assert_eq!(out.sr.shape(), [1, 32, 32]);
}

#[test]
fn desk_scale_run_reduces_sr_loss_tenfold() {
    let (gt, reference) = scene(3, 128, 128, 42).unwrap();
    let lsr = ImageBuffer::from_tensor(&downsample(&gt.to_tensor::<f64>(), 4).unwrap(), Role::Lsr).unwrap();
    let cfg = RunConfig {
        iterations: 500,
        seed: 42,
        log_every: 100,
        generator: GeneratorConfig { levels: 2, channels: 16, ..GeneratorConfig::default() },
        reference: ReferenceConfig { levels: 2, channels: 16, ..ReferenceConfig::default() },
        ..RunConfig::default()
    };
    let out = run_optimization(&cfg, &lsr, &reference).unwrap();
    let (first, last) = (out.first().loss_sr, out.last().loss_sr);
    assert!(last <= 0.1 * first, "{first} -> {last}");
}
