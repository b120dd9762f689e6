//! Similarity-controlled synthetic fine-grained dataset.
//!
//! Every image is a shared background texture plus one class motif (a
//! coloured, oriented grating under a Gaussian envelope with a smaller
//! satellite blob) and pixel noise. Class motif parameters are blended toward
//! a single prototype with weight `similarity`, so `similarity → 1` makes all
//! classes, known and unknown, look alike.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use stan_tensor::Tensor;

use super::manifest::{Dataset, DatasetManifest, ManifestEntry, Openness, Sample, Split};
use super::tensor_file;
use crate::{Result, StanError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub known_classes: usize,
    pub unknown_classes: usize,
    /// Training images per known class.
    pub per_class: usize,
    #[serde(default = "default_split_size")]
    pub val_per_class: usize,
    /// Test images per class, known and unknown alike.
    #[serde(default = "default_split_size")]
    pub test_per_class: usize,
    pub image_side: usize,
    /// Inter-class similarity in `[0, 1)`.
    pub similarity: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_split_size() -> usize {
    8
}

fn default_noise() -> f64 {
    0.1
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(StanError::Config(format!("synthetic spec: {m}")));
        if self.known_classes < 2 {
            return bad("known_classes must be at least 2");
        }
        if self.per_class == 0 {
            return bad("per_class must be positive");
        }
        if self.image_side < 4 {
            return bad("image_side must be at least 4");
        }
        if !(0.0..1.0).contains(&self.similarity) {
            return bad("similarity must lie in [0, 1)");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a non-negative finite number");
        }
        if self.unknown_classes > 0 && self.test_per_class == 0 {
            return bad("unknown classes need test_per_class > 0");
        }
        Ok(())
    }
}

/// Motif parameters, each roughly in `[0, 1]` so blending is meaningful.
#[derive(Debug, Clone, Copy)]
struct Motif {
    color: [f64; 3],
    center: [f64; 2],
    radius: f64,
    angle: f64,
    freq: f64,
    satellite_offset: [f64; 2],
    satellite_color: [f64; 3],
}

impl Motif {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut u = || rng.gen::<f64>();
        Self {
            color: [u(), u(), u()],
            center: [u(), u()],
            radius: u(),
            angle: u(),
            freq: u(),
            satellite_offset: [u(), u()],
            satellite_color: [u(), u(), u()],
        }
    }

    fn blend(&self, proto: &Motif, s: f64) -> Self {
        let m = |a: f64, b: f64| (1.0 - s) * a + s * b;
        let m2 = |a: [f64; 2], b: [f64; 2]| [m(a[0], b[0]), m(a[1], b[1])];
        let m3 = |a: [f64; 3], b: [f64; 3]| [m(a[0], b[0]), m(a[1], b[1]), m(a[2], b[2])];
        Self {
            color: m3(self.color, proto.color),
            center: m2(self.center, proto.center),
            radius: m(self.radius, proto.radius),
            angle: m(self.angle, proto.angle),
            freq: m(self.freq, proto.freq),
            satellite_offset: m2(self.satellite_offset, proto.satellite_offset),
            satellite_color: m3(self.satellite_color, proto.satellite_color),
        }
    }
}

struct Background {
    /// `(channel amplitudes, kx, ky, phase)` per grating.
    gratings: Vec<([f64; 3], f64, f64, f64)>,
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let gratings = (0..3)
            .map(|_| {
                let amp = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
                let theta = rng.gen_range(0.0..PI);
                let k = rng.gen_range(0.2..0.8);
                (amp, k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Self { gratings }
    }
}

fn render(
    side: usize,
    bg: &Background,
    motif: &Motif,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let n = side as f64;
    let shift = [rng.gen_range(0.0..n), rng.gen_range(0.0..n)];
    let jitter = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
    let gain = rng.gen_range(0.8..1.2);
    let cx = (0.3 + 0.4 * motif.center[0]) * n + jitter[0];
    let cy = (0.3 + 0.4 * motif.center[1]) * n + jitter[1];
    let sigma = (0.08 + 0.12 * motif.radius) * n;
    let angle = motif.angle * PI;
    let (ca, sa) = (angle.cos(), angle.sin());
    let freq = (0.5 + 1.5 * motif.freq) / sigma;
    let sx = cx + (motif.satellite_offset[0] - 0.5) * 1.5 * sigma * 2.0;
    let sy = cy + (motif.satellite_offset[1] - 0.5) * 1.5 * sigma * 2.0;
    let s_sigma = 0.5 * sigma;
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = vec![0f32; 3 * side * side];
    for ch in 0..3 {
        let color = 2.0 * motif.color[ch] - 1.0;
        let s_color = 2.0 * motif.satellite_color[ch] - 1.0;
        for y in 0..side {
            for x in 0..side {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = 0.0;
                for (amp, kx, ky, phase) in &bg.gratings {
                    v += amp[ch] * (kx * (xf + shift[0]) + ky * (yf + shift[1]) + phase).sin();
                }
                let (dx, dy) = (xf - cx, yf - cy);
                let env = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let along = dx * ca + dy * sa;
                v += gain * color * env * (0.6 + 0.4 * (2.0 * PI * freq * along).cos());
                let (ex, ey) = (xf - sx, yf - sy);
                v += gain * s_color * (-(ex * ex + ey * ey) / (2.0 * s_sigma * s_sigma)).exp();
                if noise > 0.0 {
                    v += gauss.sample(rng);
                }
                data[(ch * side + y) * side + x] = v as f32;
            }
        }
    }
    Tensor::new(vec![3, side, side], data).expect("positive shape")
}

/// Generates the dataset in memory. Paths are the ones [`write_synthetic`]
/// uses, relative to the output directory.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = Background::sample(&mut rng);
    let proto = Motif::sample(&mut rng);
    let classes: Vec<Motif> = (0..spec.known_classes + spec.unknown_classes)
        .map(|_| Motif::sample(&mut rng).blend(&proto, spec.similarity))
        .collect();
    let mut ds = Dataset {
        name: spec.name.clone(),
        num_known_classes: spec.known_classes,
        ..Default::default()
    };
    let make = |split: &str, class: usize, i: usize, rng: &mut ChaCha8Rng| {
        let known = class < spec.known_classes;
        let tag = if known {
            format!("c{class:03}")
        } else {
            format!("u{:03}", class - spec.known_classes)
        };
        Sample {
            path: format!("images/{split}_{tag}_{i:04}.stan"),
            label: known.then_some(class),
            image: render(spec.image_side, &bg, &classes[class], spec.noise, rng),
        }
    };
    for c in 0..spec.known_classes {
        for i in 0..spec.per_class {
            ds.train.push(make("train", c, i, &mut rng));
        }
    }
    for c in 0..spec.known_classes {
        for i in 0..spec.val_per_class {
            ds.val.push(make("val", c, i, &mut rng));
        }
    }
    for c in 0..spec.known_classes + spec.unknown_classes {
        for i in 0..spec.test_per_class {
            let s = make("test", c, i, &mut rng);
            if c < spec.known_classes {
                ds.test_known.push(s);
            } else {
                ds.test_unknown.push(s);
            }
        }
    }
    Ok(ds)
}

/// Writes every image as a tensor file under `dir` plus `dir/manifest.json`.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<DatasetManifest> {
    let ds = generate_synthetic(spec)?;
    let mut entries = Vec::new();
    let groups = [
        (&ds.train, Split::Train),
        (&ds.val, Split::Val),
        (&ds.test_known, Split::Test),
        (&ds.test_unknown, Split::Test),
    ];
    for (samples, split) in groups {
        for s in samples {
            tensor_file::write_tensor(&dir.join(&s.path), &s.image)?;
            entries.push(ManifestEntry {
                path: s.path.clone(),
                label: s.label_code(),
                split,
                openness: if s.label.is_some() { Openness::Known } else { Openness::Unknown },
            });
        }
    }
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        image_shape: [3, spec.image_side, spec.image_side],
        entries,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
