//! Procedural galaxy images.
//!
//! Every image is rendered from its own seed, derived from the run seed, the
//! class folder and the index within it, so any single file can be
//! regenerated from the manifest alone.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};

use super::dataset::{Dataset, LabeledImage};
use super::image::{normalize, Grid};
use super::pnm::encode_p5;
use super::taxonomy::{FineClass, Level};

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Tunable shape constants. Intervals are half-open `[lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub noise_sigma: f64,
    /// Minor/major axis ratio for E0, E3, E7.
    pub axis_ratio: [(f64, f64); 3],
    /// Arm pitch angle in degrees for the a, b, c tiers.
    pub pitch_degrees: [(f64, f64); 3],
    /// Bulge width as a fraction of the galaxy radius for the a, b, c tiers.
    pub bulge_fraction: [f64; 3],
    pub blob_count: (usize, usize),
    /// Galaxy radius as a fraction of the image side.
    pub radius_fraction: (f64, f64),
    pub peak_brightness: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            noise_sigma: 0.02,
            axis_ratio: [(0.90, 1.00), (0.65, 0.75), (0.28, 0.35)],
            pitch_degrees: [(8.0, 12.0), (16.0, 22.0), (28.0, 36.0)],
            bulge_fraction: [0.32, 0.22, 0.13],
            blob_count: (3, 6),
            radius_fraction: (0.22, 0.32),
            peak_brightness: (0.6, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    /// Path relative to the output root, `/`-separated.
    pub filename: String,
    pub class: String,
    pub seed: u64,
}

pub type Manifest = Vec<ManifestEntry>;

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn image_seed(run_seed: u64, class: usize, index: usize) -> u64 {
    mix(mix(mix(run_seed) ^ class as u64) ^ index as u64)
}

enum Shape {
    Elliptical { axis_ratio: f64 },
    Spiral { tier: usize, barred: bool },
    Irregular,
}

fn tier_of(fine: FineClass) -> usize {
    match fine {
        FineClass::Sa | FineClass::SBa => 0,
        FineClass::Sb | FineClass::SBb => 1,
        _ => 2,
    }
}

impl SynthParams {
    fn sample(&self, rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
        rng.random_range(lo..hi)
    }

    /// 8-bit grayscale pixels, row-major, `size x size`.
    pub fn render(&self, fine: FineClass, size: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = size as f64;
        let radius = side * self.sample(&mut rng, self.radius_fraction);
        let peak = self.sample(&mut rng, self.peak_brightness);
        let rotation = rng.random_range(0.0..TAU);
        let centre = (
            side * (0.5 + rng.random_range(-0.03..0.03)),
            side * (0.5 + rng.random_range(-0.03..0.03)),
        );
        let shape = match fine {
            FineClass::E0 | FineClass::E3 | FineClass::E7 => Shape::Elliptical {
                axis_ratio: self.sample(&mut rng, self.axis_ratio[fine.index()]),
            },
            FineClass::Irr => Shape::Irregular,
            _ => Shape::Spiral {
                tier: tier_of(fine),
                barred: fine.is_barred(),
            },
        };

        let field: Box<dyn Fn(f64, f64) -> f64> = match shape {
            Shape::Elliptical { axis_ratio } => {
                let major = 0.55 * radius;
                let minor = axis_ratio * major;
                Box::new(move |u, v| {
                    peak * (-0.5 * ((u / major).powi(2) + (v / minor).powi(2))).exp()
                })
            }
            Shape::Spiral { tier, barred } => self.spiral(&mut rng, tier, barred, radius, peak),
            Shape::Irregular => {
                let count = rng.random_range(self.blob_count.0..=self.blob_count.1);
                let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
                    .map(|_| {
                        let r = 0.8 * radius * rng.random_range(0.0f64..1.0).sqrt();
                        let a = rng.random_range(0.0..TAU);
                        let width = radius * rng.random_range(0.15..0.4);
                        let amp = peak * rng.random_range(0.4..1.0);
                        (r * a.cos(), r * a.sin(), width, amp)
                    })
                    .collect();
                Box::new(move |u, v| {
                    blobs
                        .iter()
                        .map(|&(bu, bv, w, amp)| {
                            amp * (-0.5 * ((u - bu).powi(2) + (v - bv).powi(2)) / (w * w)).exp()
                        })
                        .sum()
                })
            }
        };

        let noise = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
        let (sin, cos) = rotation.sin_cos();
        let mut out = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                let x = col as f64 + 0.5 - centre.0;
                let y = row as f64 + 0.5 - centre.1;
                let u = cos * x + sin * y;
                let v = -sin * x + cos * y;
                let value = field(u, v) + noise.sample(&mut rng);
                out.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    /// Two logarithmic arms, r = start * exp(pitch_tan * angle), around a
    /// Gaussian bulge; barred variants add a bar the arms start from.
    fn spiral(
        &self,
        rng: &mut ChaCha8Rng,
        tier: usize,
        barred: bool,
        radius: f64,
        peak: f64,
    ) -> Box<dyn Fn(f64, f64) -> f64> {
        let pitch = self.sample(rng, self.pitch_degrees[tier]).to_radians();
        let winding = pitch.tan();
        let handedness = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let bulge = radius * self.bulge_fraction[tier] * rng.random_range(0.9..1.1);
        let bar_half = radius * rng.random_range(0.45..0.6);
        let start = if barred {
            bar_half
        } else {
            (1.5 * bulge).max(0.25 * radius)
        };
        let arm_width = (0.1 * radius).max(1.0);
        let arm_amp = 0.9 * peak;
        let pitch_cos = pitch.cos();
        Box::new(move |u, v| {
            let r = (u * u + v * v).sqrt();
            let mut value = peak * (-0.5 * (r / bulge).powi(2)).exp();
            value += 0.15 * peak * (-r / (0.5 * radius)).exp();
            if barred {
                value += 0.7
                    * peak
                    * (-0.5 * ((u / (0.8 * bar_half)).powi(4) + (v / (0.1 * radius)).powi(2)))
                        .exp();
            }
            if r > 1e-9 {
                // Log-radial offset from the nearest arm; the two arms repeat
                // every half turn.
                let angle = handedness * v.atan2(u);
                let period = winding * PI;
                let offset = (r / start).ln() - winding * angle;
                let wrapped = offset - period * (offset / period).round();
                let distance = r * wrapped.abs() * pitch_cos;
                let ramp = 1.0 - (-(r / start).powi(4)).exp();
                let envelope = ramp * (-r / (0.8 * radius)).exp();
                value += arm_amp * envelope * (-0.5 * (distance / arm_width).powi(2)).exp();
            }
            value
        })
    }
}

fn fine_for(level: Level, label: usize, rng: &mut ChaCha8Rng) -> FineClass {
    let members = level.members_of(label);
    members[rng.random_range(0..members.len())]
}

struct Rendered {
    relative: String,
    class: String,
    seed: u64,
    label: usize,
    pixels: Vec<u8>,
}

fn render_all(
    params: &SynthParams,
    level: Level,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<Rendered>> {
    if per_class < 1 {
        return Err(Error::Contract("per_class must be at least 1".into()));
    }
    if image_size < 1 {
        return Err(Error::Contract("image size must be positive".into()));
    }
    let mut out = Vec::with_capacity(per_class * level.class_count());
    for (label, name) in level.class_names().into_iter().enumerate() {
        for index in 0..per_class {
            let item_seed = image_seed(seed, label, index);
            // Coarse levels pick a fine subtype from a stream separate from
            // the renderer's.
            let mut pick = ChaCha8Rng::seed_from_u64(mix(item_seed));
            let fine = fine_for(level, label, &mut pick);
            out.push(Rendered {
                relative: format!("{name}/{name}_{index:05}.pgm"),
                class: name.to_string(),
                seed: item_seed,
                label,
                pixels: params.render(fine, image_size, item_seed),
            });
        }
    }
    Ok(out)
}

/// Writes a folder-per-class tree of P5 images plus `manifest.csv` under `out`.
pub fn synth_generate(
    level: Level,
    per_class: usize,
    image_size: usize,
    seed: u64,
    out: &Path,
) -> Result<Manifest> {
    synth_generate_with(
        &SynthParams::default(),
        level,
        per_class,
        image_size,
        seed,
        out,
    )
}

pub fn synth_generate_with(
    params: &SynthParams,
    level: Level,
    per_class: usize,
    image_size: usize,
    seed: u64,
    out: &Path,
) -> Result<Manifest> {
    let rendered = render_all(params, level, per_class, image_size, seed)?;
    for name in level.class_names() {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = Vec::with_capacity(rendered.len());
    for item in rendered {
        let path: PathBuf = out.join(&item.relative);
        let bytes = encode_p5(image_size, image_size, &item.pixels)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.push(ManifestEntry {
            filename: item.relative,
            class: item.class,
            seed: item.seed,
        });
    }
    let manifest_path = out.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&manifest_path)
        .map_err(|e| Error::Decode(format!("{}: {e}", manifest_path.display())))?;
    for entry in &manifest {
        writer
            .serialize(entry)
            .map_err(|e| Error::Decode(format!("{}: {e}", manifest_path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// The dataset [`synth_generate`] followed by loading the folder would give,
/// built without touching disk. Source paths are left empty.
pub fn synth_dataset(
    level: Level,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut rendered = render_all(&SynthParams::default(), level, per_class, image_size, seed)?;
    // match the loader's lexicographic path order
    rendered.sort_by(|a, b| a.relative.cmp(&b.relative));
    let items = rendered
        .into_iter()
        .map(|item| {
            let values = item.pixels.iter().map(|&v| v as f32 / 255.0).collect();
            let grid = Grid::new(image_size, image_size, values)?;
            Ok(LabeledImage {
                pixels: normalize(&grid),
                label: item.label,
                source_path: PathBuf::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        level.class_names().iter().map(|s| s.to_string()).collect(),
        items,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_per_item() {
        let mut seen = std::collections::HashSet::new();
        for class in 0..10 {
            for index in 0..100 {
                assert!(seen.insert(image_seed(7, class, index)));
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let p = SynthParams::default();
        for fine in FineClass::ALL {
            assert_eq!(p.render(fine, 32, 11), p.render(fine, 32, 11));
        }
        assert_ne!(
            p.render(FineClass::Sb, 32, 11),
            p.render(FineClass::Sb, 32, 12)
        );
    }

    #[test]
    fn axis_ratio_bands_are_disjoint() {
        let bands = SynthParams::default().axis_ratio;
        for pair in bands.windows(2) {
            assert!(pair[1].1 < pair[0].0);
        }
    }
}
