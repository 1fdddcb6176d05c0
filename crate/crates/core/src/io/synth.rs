use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{config_err, Error, Result};
use crate::io::{ppm_save, KeyValues, Manifest, ManifestEntry};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

const PALETTE: [[f64; 3]; 4] = [[0.9, 0.15, 0.15], [0.15, 0.75, 0.2], [0.15, 0.3, 0.95], [0.95, 0.85, 0.1]];

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Per-class element statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTexture {
    /// Grating orientation (radians) used for each palette colour.
    pub orientation_by_color: Vec<f64>,
    pub orientation_jitter: f64,
    /// Grating frequency range, cycles per pixel.
    pub frequency: (f64, f64),
    /// Element radius range, pixels.
    pub radius: (f64, f64),
    /// Expected fraction of the image covered by elements.
    pub density: f64,
}

/// Images are a noisy grey field with disc-shaped grating patches placed
/// uniformly on the torus. Every class uses every colour and every
/// orientation equally often; classes differ only in which orientation
/// each colour carries.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTextureSpec {
    pub classes: Vec<ClassTexture>,
    pub size: usize,
    pub noise: f64,
    pub per_split: [usize; 3],
    pub seed: u64,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

impl SyntheticTextureSpec {
    /// `k` classes, each a distinct colour-to-orientation permutation.
    pub fn new(k: usize, size: usize, per_split: [usize; 3], seed: u64) -> Result<Self> {
        let perms = permutations(PALETTE.len());
        if k == 0 || k > perms.len() {
            return Err(config_err!("class count {k} must lie in 1..={}", perms.len()));
        }
        if size < 8 {
            return Err(config_err!("image size {size} below 8"));
        }
        // stride coprime with 24 spreads the chosen permutations
        let classes = (0..k)
            .map(|c| {
                let perm = &perms[(c * 7) % perms.len()];
                ClassTexture {
                    orientation_by_color: perm.iter().map(|&o| o as f64 * PI / perm.len() as f64).collect(),
                    orientation_jitter: 0.08,
                    frequency: (0.18, 0.28),
                    radius: (size as f64 / 12.0, size as f64 / 8.0),
                    density: 0.15,
                }
            })
            .collect();
        Ok(SyntheticTextureSpec { classes, size, noise: 0.04, per_split, seed })
    }

    /// Reads `classes`, `size`, `noise`, `train`, `val`, `test`, `seed`,
    /// `density`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let (mut k, mut size, mut noise, mut seed, mut density) = (8usize, 64usize, 0.04f64, 0u64, 0.15f64);
        let mut per_split = [100usize, 20, 50];
        kv.take("classes", &mut k)?;
        kv.take("size", &mut size)?;
        kv.take("noise", &mut noise)?;
        kv.take("seed", &mut seed)?;
        kv.take("density", &mut density)?;
        for (name, n) in SPLITS.iter().zip(per_split.iter_mut()) {
            kv.take(name, n)?;
        }
        kv.finish()?;
        if !(0.0..=1.0).contains(&noise) {
            return Err(config_err!("noise {noise} outside [0,1]"));
        }
        if !(density > 0.0 && density <= 4.0) {
            return Err(config_err!("density {density} outside (0,4]"));
        }
        let mut spec = Self::new(k, size, per_split, seed)?;
        spec.noise = noise;
        for c in &mut spec.classes {
            c.density = density;
        }
        Ok(spec)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn image_rng(&self, split: usize, class: usize, index: usize) -> Rng {
        Rng::stream(self.seed, ((split as u64) << 48) | ((class as u64) << 32) | index as u64)
    }

    /// One H×W×3 image in [0,1], already quantized to 8 bits.
    pub fn image<T: Scalar>(&self, split: usize, class: usize, index: usize) -> Tensor<T> {
        let mut rng = self.image_rng(split, class, index);
        let tex = &self.classes[class];
        let s = self.size;
        let mut px: Vec<f64> = (0..s * s * 3).map(|_| 0.5 + self.noise * rng.normal()).collect();
        let mean_r = 0.5 * (tex.radius.0 + tex.radius.1);
        let count = ((tex.density * (s * s) as f64 / (PI * mean_r * mean_r)).round() as usize).max(1);
        for _ in 0..count {
            let color = rng.below(PALETTE.len());
            let theta = tex.orientation_by_color[color] + tex.orientation_jitter * rng.normal();
            let freq = rng.uniform_in(tex.frequency.0, tex.frequency.1);
            let r = rng.uniform_in(tex.radius.0, tex.radius.1);
            let (cy, cx) = (rng.uniform_in(0.0, s as f64), rng.uniform_in(0.0, s as f64));
            let phase = rng.uniform_in(0.0, 2.0 * PI);
            let (ct, st) = (theta.cos(), theta.sin());
            let span = r.ceil() as isize + 1;
            for dy in -span..=span {
                for dx in -span..=span {
                    let y = (cy.floor() as isize + dy).rem_euclid(s as isize) as usize;
                    let x = (cx.floor() as isize + dx).rem_euclid(s as isize) as usize;
                    // offsets measured on the torus from the element centre
                    let oy = cy.floor() + dy as f64 + 0.5 - cy;
                    let ox = cx.floor() + dx as f64 + 0.5 - cx;
                    if oy * oy + ox * ox > r * r {
                        continue;
                    }
                    let wave = 0.5 + 0.5 * (2.0 * PI * freq * (ox * ct + oy * st) + phase).sin();
                    for (ch, &c) in PALETTE[color].iter().enumerate() {
                        px[(y * s + x) * 3 + ch] = 0.1 + 0.9 * c * wave;
                    }
                }
            }
        }
        let data = px.into_iter().map(|v| T::c((v.clamp(0.0, 1.0) * 255.0).round() / 255.0)).collect();
        Tensor::new(vec![s, s, 3], data).expect("size matches")
    }

    /// All images of one split with labels, in manifest order.
    pub fn split<T: Scalar>(&self, split: usize) -> Vec<(Tensor<T>, usize)> {
        let mut out = Vec::new();
        for i in 0..self.per_split[split] {
            for c in 0..self.num_classes() {
                out.push((self.image(split, c, i), c));
            }
        }
        out
    }
}

/// Write images under `out/<split>/` and `out/<split>.tsv` manifests.
pub fn synth_generate(spec: &SyntheticTextureSpec, out: impl AsRef<Path>) -> Result<[Manifest; 3]> {
    let out = out.as_ref();
    let mut manifests = Vec::new();
    for (si, split) in SPLITS.iter().enumerate() {
        let dir = out.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::new();
        for i in 0..spec.per_split[si] {
            for c in 0..spec.num_classes() {
                let rel = Path::new(split).join(format!("c{c:02}_{i:04}.ppm"));
                ppm_save(&spec.image::<f64>(si, c, i), out.join(&rel))?;
                entries.push(ManifestEntry { path: rel, label: c });
            }
        }
        let m = Manifest { root: out.to_path_buf(), entries };
        let path = out.join(format!("{split}.tsv"));
        fs::write(&path, m.to_text()).map_err(|e| Error::io(&path, e))?;
        manifests.push(m);
    }
    Ok(manifests.try_into().expect("three splits"))
}
