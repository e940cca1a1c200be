//! Skip-connected encoder-decoder mapping HR-sized noise maps to an image.
//!
//! Layer table (`Ci` is the level input width: noise channels at level 0,
//! `main` afterwards; every conv has a bias, every norm a gamma and beta):
//!
//! | stage               | layer                  | shape                        |
//! |---------------------|------------------------|------------------------------|
//! | encoder, per level  | down conv 3x3 stride 2 | `main x Ci x 3 x 3`          |
//! |                     | conv 3x3               | `main x main x 3 x 3`        |
//! |                     | 2 x norm               | `main`                       |
//! | skip, per level     | conv 1x1 on level input| `skip x Ci x 1 x 1`          |
//! | decoder, per level  | conv 3x3 after concat  | `main x (main+skip) x 3 x 3` |
//! |                     | norm                   | `main`                       |
//! | head                | conv 1x1, sigmoid      | `C x main x 1 x 1`           |
//!
//! The skip branch is a bare linear 1x1 conv. Normalizing it would rescale the
//! raw input noise to unit variance and push it straight into the full
//! resolution decoder, where the downsampling loss barely constrains it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ConvBlock, NetworkParams};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub levels: usize,
    pub channels: usize,
    pub skip_channels: usize,
    pub kernel: usize,
    pub noise_channels: usize,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            levels: 4,
            channels: 64,
            skip_channels: 4,
            kernel: 3,
            noise_channels: 32,
            out_channels: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("levels", self.levels),
            ("channels", self.channels),
            ("skip_channels", self.skip_channels),
            ("noise_channels", self.noise_channels),
            ("out_channels", self.out_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("generator {name} must be >= 1")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "generator kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Spatial extents of the noise must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.levels
    }

    /// Closed-form scalar parameter count (see the module layer table).
    pub fn param_count(&self) -> usize {
        let (m, s, k) = (self.channels, self.skip_channels, self.kernel * self.kernel);
        let conv = |cin: usize, cout: usize, kk: usize| cout * cin * kk + cout;
        let norm = |c: usize| 2 * c;
        let mut total = conv(m, self.out_channels, 1);
        for level in 0..self.levels {
            let ci = if level == 0 { self.noise_channels } else { m };
            total += conv(ci, m, k) + norm(m) + conv(m, m, k) + norm(m);
            total += conv(ci, s, 1);
            total += conv(m + s, m, k) + norm(m);
        }
        total
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: ConvBlock,
    conv: ConvBlock,
    skip: Conv,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<ConvBlock>,
    head: Conv,
}

impl Generator {
    /// Registers all generator parameters in `params`, drawing from `rng`.
    pub fn init<T: Real, R: rand::Rng>(
        cfg: &GeneratorConfig,
        params: &mut NetworkParams<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (m, s, k) = (cfg.channels, cfg.skip_channels, cfg.kernel);
        let mut encoder = Vec::with_capacity(cfg.levels);
        for level in 0..cfg.levels {
            let ci = if level == 0 { cfg.noise_channels } else { m };
            let name = format!("gen.enc{level}");
            encoder.push(EncoderLevel {
                down: ConvBlock::init(params, rng, &format!("{name}.down"), ci, m, k, 2),
                conv: ConvBlock::init(params, rng, &format!("{name}.conv"), m, m, k, 1),
                skip: Conv::init(params, rng, &format!("{name}.skip"), ci, s, 1, 1),
            });
        }
        let decoder = (0..cfg.levels)
            .map(|level| {
                ConvBlock::init(params, rng, &format!("gen.dec{level}"), m + s, m, k, 1)
            })
            .collect();
        let head = Conv::init(params, rng, "gen.head", m, cfg.out_channels, 1, 1);
        Ok(Generator {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Records the forward pass; returns the `[C,tH,tW]` image node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Bound, noise: Var) -> Result<Var> {
        let (c, h, w) = g.value(noise).chw()?;
        if c != self.cfg.noise_channels {
            return Err(Error::invalid(
                "generate",
                format!("expected {} noise channels, got {c}", self.cfg.noise_channels),
            ));
        }
        let multiple = self.cfg.multiple();
        for extent in [h, w] {
            if extent % multiple != 0 {
                return Err(Error::NotDivisible {
                    op: "generate",
                    extent,
                    multiple,
                });
            }
        }
        let mut x = noise;
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for level in &self.encoder {
            skips.push(level.skip.forward(g, b, x)?);
            x = level.down.forward(g, b, x)?;
            x = level.conv.forward(g, b, x)?;
        }
        for (block, skip) in self.decoder.iter().zip(skips).rev() {
            x = g.bilinear_upsample(x, 2)?;
            x = g.concat(x, skip)?;
            x = block.forward(g, b, x)?;
        }
        let y = self.head.forward(g, b, x)?;
        Ok(g.sigmoid(y))
    }

    /// Forward pass without recording anything the caller keeps.
    pub fn generate<T: Real>(&self, params: &NetworkParams<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let n = g.constant(noise.clone());
        let y = self.forward(&mut g, &b, n)?;
        Ok(g.value(y).clone())
    }
}

/// Seeded generator initialization. Identical `cfg` and `seed` give bitwise
/// identical parameters.
pub fn init_generator<T: Real>(
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<(Generator, NetworkParams<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::new();
    let gen = Generator::init(cfg, &mut params, &mut rng)?;
    Ok((gen, params))
}
