//! Image-treatment models: a procedural sprite whose position is driven by
//! hidden confounders.
//!
//! Images are `D × D`, stored row-major. `pos_x` moves the sprite along
//! columns and `pos_y` along rows. Random draws per sample happen in a fixed
//! order: confounders, covariate noise, pixel noise (row-major), mediator
//! noise, outcome noise. Each draw is made even when its scale is zero.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnarDataset, Role};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::{stream, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpriteKind {
    /// Filled square, pixels in `{0, 1}`; the centre snaps to the pixel grid.
    #[default]
    Square,
    /// Isotropic Gaussian bump with unit peak and continuous centre.
    GaussianBlob,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpriteConfig {
    pub resolution: usize,
    pub kind: SpriteKind,
    /// Square half-width (or blob standard deviation) in pixels. `None`
    /// uses `round(D / 8)`, at least 1.
    pub half_width: Option<usize>,
    pub pixel_noise_std: f64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        SpriteConfig {
            resolution: 16,
            kind: SpriteKind::Square,
            half_width: None,
            pixel_noise_std: 0.1,
        }
    }
}

impl SpriteConfig {
    pub fn half_width(&self) -> usize {
        self.half_width
            .unwrap_or_else(|| ((self.resolution as f64 / 8.0).round() as usize).max(1))
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.resolution;
        if d < 4 {
            return Err(Error::Config(format!("sprite resolution must be >= 4, got {d}")));
        }
        if 2 * self.half_width() >= d {
            return Err(Error::Config(format!(
                "sprite half-width {} must be < D/2 = {}",
                self.half_width(),
                d as f64 / 2.0
            )));
        }
        if !(self.pixel_noise_std >= 0.0) || !self.pixel_noise_std.is_finite() {
            return Err(Error::Config("pixel_noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Free travel of the sprite centre, in pixels.
    fn span(&self) -> f64 {
        (self.resolution - 1 - 2 * self.half_width()) as f64
    }

    fn centre(&self, pos: f64) -> f64 {
        let c = self.half_width() as f64 + pos * self.span();
        match self.kind {
            SpriteKind::Square => c.round(),
            SpriteKind::GaussianBlob => c,
        }
    }

    /// The set of positions rendered identically to `pos` along one axis.
    pub fn position_cell(&self, pos: f64) -> (f64, f64) {
        match self.kind {
            SpriteKind::GaussianBlob => (pos, pos),
            SpriteKind::Square => {
                let c = self.centre(pos);
                let hw = self.half_width() as f64;
                let lo = ((c - 0.5 - hw) / self.span()).max(0.0);
                let hi = ((c + 0.5 - hw) / self.span()).min(1.0);
                (lo, hi)
            }
        }
    }
}

/// Noise-free sprite at `(pos_x, pos_y)`, each in `[0, 1]`.
pub fn render_clean(cfg: &SpriteConfig, pos_x: f64, pos_y: f64) -> Vector {
    let d = cfg.resolution;
    let (cx, cy) = (cfg.centre(pos_x.clamp(0.0, 1.0)), cfg.centre(pos_y.clamp(0.0, 1.0)));
    let hw = cfg.half_width() as f64;
    let mut img = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let (di, dj) = (i as f64 - cy, j as f64 - cx);
            img[i * d + j] = match cfg.kind {
                SpriteKind::Square => f64::from(di.abs() <= hw && dj.abs() <= hw),
                SpriteKind::GaussianBlob => (-(di * di + dj * dj) / (2.0 * hw * hw)).exp(),
            };
        }
    }
    Vector::from(img)
}

/// Sprite plus i.i.d. Gaussian pixel noise.
pub fn render_sprite(cfg: &SpriteConfig, pos_x: f64, pos_y: f64, rng: &mut Rng) -> Vector {
    let mut img = render_clean(cfg, pos_x, pos_y);
    for p in img.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *p += cfg.pixel_noise_std * z;
    }
    img
}

/// `Σ_{i,j} (i/D)(j/D) A[i, j]` with 0-based row `i` and column `j`.
pub fn h_weight(image: &[f64], resolution: usize) -> Result<f64> {
    check_dim("image pixels", resolution * resolution, image.len())?;
    let d = resolution as f64;
    let mut total = 0.0;
    for i in 0..resolution {
        let mut row = 0.0;
        for j in 0..resolution {
            row += (j as f64 / d) * image[i * resolution + j];
        }
        total += (i as f64 / d) * row;
    }
    Ok(total)
}

fn uniform_sym(rng: &mut Rng, half_range: f64) -> f64 {
    let u: f64 = rng.random();
    half_range * (2.0 * u - 1.0)
}

fn normal(rng: &mut Rng, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    std * z
}

fn image_names(d: usize) -> Vec<String> {
    (0..d * d).map(|k| format!("a{k}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackdoorSpriteConfig {
    /// `U_k ~ Unif(-r, r)`.
    pub confounder_range: f64,
    pub covariate_noise_std: f64,
    pub outcome_noise_std: f64,
    /// Coefficient of `U_1 + U_2` in the outcome.
    pub confounder_effect: f64,
}

impl Default for BackdoorSpriteConfig {
    fn default() -> Self {
        BackdoorSpriteConfig {
            confounder_range: 1.0,
            covariate_noise_std: 0.3,
            outcome_noise_std: 0.5,
            confounder_effect: 1.0,
        }
    }
}

/// Ground truth of the back-door image model: `θ_ATE(a) = h(a)² / 100`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackdoorSpriteTruth {
    pub sprite: SpriteConfig,
}

impl BackdoorSpriteTruth {
    pub fn ate(&self, image: &[f64]) -> Result<f64> {
        let h = h_weight(image, self.sprite.resolution)?;
        Ok(h * h / 100.0)
    }
}

/// `U ~ Unif(-r, r)²`, `X = U + ε`, the sprite sits at `((X + 1.5) / 3)`
/// (clamped to `[0, 1]`), and `Y = h(A)²/100 + c(U_1 + U_2) + ε_Y`.
/// Columns: `outcome:y`, `treatment:a*`, `backdoor:x1, x2`.
pub fn gen_backdoor_dsprite(
    sprite: &SpriteConfig,
    cfg: &BackdoorSpriteConfig,
    n: usize,
    seed: u64,
) -> Result<(ColumnarDataset, BackdoorSpriteTruth)> {
    sprite.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("sprite data generator"));
    }
    let mut rng = stream(seed, Stream::Data);
    let p = sprite.pixels();
    let (mut y, mut a, mut x) = (Vec::with_capacity(n), Vec::with_capacity(n * p), Vec::with_capacity(2 * n));
    for _ in 0..n {
        let u1 = uniform_sym(&mut rng, cfg.confounder_range);
        let u2 = uniform_sym(&mut rng, cfg.confounder_range);
        let x1 = u1 + normal(&mut rng, cfg.covariate_noise_std);
        let x2 = u2 + normal(&mut rng, cfg.covariate_noise_std);
        let px = ((x1 + 1.5) / 3.0).clamp(0.0, 1.0);
        let py = ((x2 + 1.5) / 3.0).clamp(0.0, 1.0);
        let img = render_sprite(sprite, px, py, &mut rng);
        let h = h_weight(&img, sprite.resolution)?;
        y.push(h * h / 100.0 + cfg.confounder_effect * (u1 + u2) + normal(&mut rng, cfg.outcome_noise_std));
        a.extend_from_slice(&img);
        x.extend_from_slice(&[x1, x2]);
    }
    let mut data = ColumnarDataset::new(n);
    data.insert(Role::Outcome, None, Matrix::from_row_major(n, 1, y)?)?;
    data.insert(Role::Treatment, Some(image_names(sprite.resolution)), Matrix::from_row_major(n, p, a)?)?;
    data.insert(
        Role::BackDoor,
        Some(vec!["x1".into(), "x2".into()]),
        Matrix::from_row_major(n, 2, x)?,
    )?;
    data.provenance = Some(format!("backdoor-dsprite seed={seed} n={n}"));
    Ok((data, BackdoorSpriteTruth { sprite: *sprite }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontdoorSpriteConfig {
    pub confounder_range: f64,
    pub mediator_noise_std: f64,
    pub outcome_noise_std: f64,
    pub confounder_effect: f64,
}

impl Default for FrontdoorSpriteConfig {
    fn default() -> Self {
        FrontdoorSpriteConfig {
            confounder_range: 1.5,
            mediator_noise_std: 0.2,
            outcome_noise_std: 0.5,
            confounder_effect: 5.0,
        }
    }
}

/// A Monte-Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Ground truth of the front-door image model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontdoorSpriteTruth {
    pub sprite: SpriteConfig,
    pub model: FrontdoorSpriteConfig,
}

impl FrontdoorSpriteTruth {
    /// `E[Y^(a)] = (h(a)² + σ_M²) / 100`, since the confounders have mean 0.
    pub fn ate(&self, image: &[f64]) -> Result<f64> {
        let h = h_weight(image, self.sprite.resolution)?;
        Ok((h * h + self.model.mediator_noise_std.powi(2)) / 100.0)
    }

    /// `E[Y^(a) | A = a′]` where `a′` is the sprite at `(pos_x, pos_y)`.
    pub fn att_mc(&self, image: &[f64], a_prime: (f64, f64), mc_samples: usize, seed: u64) -> Result<McEstimate> {
        ground_truth_att_frontdoor_mc(image, a_prime, &self.sprite, &self.model, mc_samples, seed)
    }
}

/// `U ~ Unif(-r, r)²`, the sprite sits at `(U + 1.5) / 3` (clamped to
/// `[0, 1]`), `M = h(A) + ε_M` and `Y = M²/100 + c(U_1 + U_2) + ε_Y`.
/// Columns: `outcome:y`, `treatment:a*`, `frontdoor:m`.
pub fn gen_frontdoor_dsprite(
    sprite: &SpriteConfig,
    cfg: &FrontdoorSpriteConfig,
    n: usize,
    seed: u64,
) -> Result<(ColumnarDataset, FrontdoorSpriteTruth)> {
    sprite.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("sprite data generator"));
    }
    let mut rng = stream(seed, Stream::Data);
    let p = sprite.pixels();
    let (mut y, mut a, mut m) = (Vec::with_capacity(n), Vec::with_capacity(n * p), Vec::with_capacity(n));
    for _ in 0..n {
        let u1 = uniform_sym(&mut rng, cfg.confounder_range);
        let u2 = uniform_sym(&mut rng, cfg.confounder_range);
        let px = ((u1 + 1.5) / 3.0).clamp(0.0, 1.0);
        let py = ((u2 + 1.5) / 3.0).clamp(0.0, 1.0);
        let img = render_sprite(sprite, px, py, &mut rng);
        let med = h_weight(&img, sprite.resolution)? + normal(&mut rng, cfg.mediator_noise_std);
        y.push(med * med / 100.0 + cfg.confounder_effect * (u1 + u2) + normal(&mut rng, cfg.outcome_noise_std));
        a.extend_from_slice(&img);
        m.push(med);
    }
    let mut data = ColumnarDataset::new(n);
    data.insert(Role::Outcome, None, Matrix::from_row_major(n, 1, y)?)?;
    data.insert(Role::Treatment, Some(image_names(sprite.resolution)), Matrix::from_row_major(n, p, a)?)?;
    data.insert(Role::FrontDoor, Some(vec!["m".into()]), Matrix::from_row_major(n, 1, m)?)?;
    data.provenance = Some(format!("frontdoor-dsprite seed={seed} n={n}"));
    Ok((
        data,
        FrontdoorSpriteTruth {
            sprite: *sprite,
            model: *cfg,
        },
    ))
}

/// Monte-Carlo `E[Y^(a) | A = a′]` for the front-door image model.
///
/// Given the image `a′`, each confounder is uniform over the latents that
/// render to the same sprite position (a single point for the blob),
/// mapped back through `U = 3·pos − 1.5`. Requires `mc_samples ≥ 10⁴`.
pub fn ground_truth_att_frontdoor_mc(
    image: &[f64],
    a_prime: (f64, f64),
    sprite: &SpriteConfig,
    cfg: &FrontdoorSpriteConfig,
    mc_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if mc_samples < 10_000 {
        return Err(Error::Config(format!("mc_samples must be >= 10000, got {mc_samples}")));
    }
    let h = h_weight(image, sprite.resolution)?;
    let cells = [sprite.position_cell(a_prime.0), sprite.position_cell(a_prime.1)];
    let mut rng = stream(seed, Stream::GroundTruth);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..mc_samples {
        let mut u_sum = 0.0;
        for (lo, hi) in cells {
            let t: f64 = rng.random();
            u_sum += 3.0 * (lo + t * (hi - lo)) - 1.5;
        }
        let m = h + normal(&mut rng, cfg.mediator_noise_std);
        let y = m * m / 100.0 + cfg.confounder_effect * u_sum + normal(&mut rng, cfg.outcome_noise_std);
        sum += y;
        sum_sq += y * y;
    }
    let k = mc_samples as f64;
    let mean = sum / k;
    let var = ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0);
    Ok(McEstimate {
        value: mean,
        std_error: (var / k).sqrt(),
    })
}

/// Row-major grid of latent positions, `xs × ys`.
pub fn position_grid(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect()
}

/// `k` evenly spaced points covering `[0, 1]`.
pub fn unit_linspace(k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..k).map(|i| i as f64 / (k - 1) as f64).collect(),
    }
}
