//! Seeded synthetic benchmark with controllable domain shift.
//!
//! Each domain is a [`DomainStyle`]: a colour transform plus texture and
//! lesion-shape parameters. Lesions are thresholded sums of anisotropic
//! Gaussian bumps; the background is band-limited value noise. Scanner
//! domains differ mostly in colour, organ domains mostly in texture scale
//! and lesion shape. Unseen domains draw their shift parameters from ranges
//! disjoint from the seen ones.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::save_dataset;
use crate::rng;
use crate::types::{BinaryMask, DomainLabel, ImagePatch, Sample, Task, TaskDataset};

const BG_LIGHT: [f64; 3] = [0.94, 0.82, 0.88];
const BG_DARK: [f64; 3] = [0.74, 0.52, 0.70];
const LESION: [f64; 3] = [0.36, 0.17, 0.50];
/// Field level at which summed bumps count as lesion.
const LESION_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub task: Task,
    pub seen: bool,
    /// Row-major 3x3 colour mixing matrix.
    pub color_matrix: [[f64; 3]; 3],
    pub color_offset: [f64; 3],
    /// Cycles of background texture across the shorter patch side.
    pub texture_frequency: f64,
    pub noise_level: f64,
    pub lesion_contrast: f64,
    /// Main-bump standard deviation as a fraction of the shorter side.
    pub lesion_scale: f64,
    /// Ratio of major to minor axis of each bump.
    pub lesion_elongation: f64,
}

impl DomainStyle {
    pub fn apply_color(&self, rgb: [f64; 3]) -> [f64; 3] {
        let m = &self.color_matrix;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            let v = m[r][0] * rgb[0] + m[r][1] * rgb[1] + m[r][2] * rgb[2] + self.color_offset[r];
            *o = v.clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_seen_domains: usize,
    pub n_unseen_domains: usize,
    pub samples_per_domain: usize,
    pub patch_size: (usize, usize),
    pub lesion_count_range: (usize, usize),
    /// Share of each seen domain held out as the seen-domain test set.
    pub seen_holdout_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            n_seen_domains: 3,
            n_unseen_domains: 3,
            samples_per_domain: 10,
            patch_size: (64, 64),
            lesion_count_range: (1, 3),
            seen_holdout_fraction: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen_domains == 0 {
            return Err(Error::config("n_seen_domains", "must be at least 1"));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::config("samples_per_domain", "must be at least 1"));
        }
        if self.patch_size.0 < 16 || self.patch_size.1 < 16 {
            return Err(Error::config("patch_size", "must be at least 16x16"));
        }
        let (lo, hi) = self.lesion_count_range;
        if lo == 0 || hi < lo {
            return Err(Error::config("lesion_count_range", format!("({lo}, {hi}) is not a range of positive counts")));
        }
        if !(0.0..1.0).contains(&self.seen_holdout_fraction) {
            return Err(Error::config("seen_holdout_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn holdout_per_domain(&self) -> usize {
        (self.samples_per_domain as f64 * self.seen_holdout_fraction).round() as usize
    }
}

fn task_seed(seed: u64, task: Task) -> u64 {
    rng::derive(seed, task.as_str())
}

fn domain_name(task: Task, i: usize) -> String {
    match task {
        Task::CrossOrgan => format!("organ-{i}"),
        Task::CrossScanner => format!("scanner-{i}"),
    }
}

/// `(1 - m) I + m R` with `R` a random row-stochastic matrix: a convex
/// colour mix that keeps `[0,1]^3` inside itself.
fn mixing_matrix<R: Rng>(r: &mut R, m: f64) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        let w: [f64; 3] = [r.random(), r.random(), r.random()];
        let total: f64 = w.iter().sum::<f64>().max(1e-9);
        for j in 0..3 {
            let ident = if i == j { 1.0 } else { 0.0 };
            row[j] = (1.0 - m) * ident + m * w[j] / total;
        }
    }
    out
}

fn draw<R: Rng>(r: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}

/// One style per domain: seen domains first, then unseen ones. Each style
/// depends only on `(seed, task, index)`.
pub fn make_styles(config: &GeneratorConfig, task: Task) -> Vec<DomainStyle> {
    let base = task_seed(config.seed, task);
    let total = config.n_seen_domains + config.n_unseen_domains;
    (0..total)
        .map(|i| {
            let seen = i < config.n_seen_domains;
            let mut r = rng::stream(rng::derive_index(base, "style", i));
            let pick = |seen_range, unseen_range| if seen { seen_range } else { unseen_range };
            let (mix, tex, scale, elong, contrast, noise) = match task {
                Task::CrossScanner => (
                    pick((0.05, 0.25), (0.30, 0.50)),
                    (5.5, 6.5),
                    (0.10, 0.12),
                    (1.3, 1.6),
                    (0.55, 0.75),
                    pick((0.02, 0.04), (0.04, 0.07)),
                ),
                Task::CrossOrgan => (
                    (0.0, 0.08),
                    pick((3.0, 6.0), (8.0, 14.0)),
                    pick((0.10, 0.14), (0.07, 0.10)),
                    pick((1.0, 1.5), (1.8, 2.6)),
                    (0.35, 0.55),
                    (0.03, 0.04),
                ),
            };
            let m = draw(&mut r, mix);
            let matrix = mixing_matrix(&mut r, m);
            let gain = match task {
                Task::CrossScanner => draw(&mut r, pick((0.90, 1.05), (0.80, 1.10))),
                Task::CrossOrgan => draw(&mut r, (0.97, 1.03)),
            };
            let offset_range = match task {
                Task::CrossScanner => pick((-0.04, 0.04), (-0.08, 0.08)),
                Task::CrossOrgan => (-0.02, 0.02),
            };
            let mut color_offset = [0.0; 3];
            for o in &mut color_offset {
                *o = draw(&mut r, offset_range);
            }
            let color_matrix = matrix.map(|row| row.map(|v| v * gain));
            DomainStyle {
                name: domain_name(task, i),
                task,
                seen,
                color_matrix,
                color_offset,
                texture_frequency: draw(&mut r, tex),
                noise_level: draw(&mut r, noise),
                lesion_contrast: draw(&mut r, contrast),
                lesion_scale: draw(&mut r, scale),
                lesion_elongation: draw(&mut r, elong),
            }
        })
        .collect()
}

struct Bump {
    cy: f64,
    cx: f64,
    amp: f64,
    /// Inverse covariance entries of the quadratic form.
    a: f64,
    b: f64,
    c: f64,
}

impl Bump {
    fn new(cy: f64, cx: f64, amp: f64, sigma_major: f64, sigma_minor: f64, angle: f64) -> Self {
        let (s, co) = angle.sin_cos();
        let (i1, i2) = (1.0 / (sigma_major * sigma_major), 1.0 / (sigma_minor * sigma_minor));
        Bump {
            cy,
            cx,
            amp,
            a: co * co * i1 + s * s * i2,
            b: s * co * (i1 - i2),
            c: s * s * i1 + co * co * i2,
        }
    }

    fn value(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        self.amp * (-0.5 * (self.a * dx * dx + 2.0 * self.b * dx * dy + self.c * dy * dy)).exp()
    }
}

/// Foreground of the lesions for `(style, sample_seed)`: the union over
/// lesions of the connected region around each lesion centre where its
/// bump sum reaches the lesion level.
pub fn lesion_mask(style: &DomainStyle, sample_seed: u64, size: (usize, usize), count_range: (usize, usize)) -> BinaryMask {
    let (h, w) = size;
    let mut r = rng::stream(rng::derive(sample_seed, "lesions"));
    let count = r.random_range(count_range.0..=count_range.1.max(count_range.0));
    let mut mask = vec![false; h * w];
    let short = h.min(w) as f64;
    for _ in 0..count {
        let sigma = style.lesion_scale * short * draw(&mut r, (0.85, 1.15));
        let root = style.lesion_elongation.sqrt();
        let (major, minor) = (sigma * root, sigma / root);
        let angle = draw(&mut r, (0.0, PI));
        // keep the main bump's half-level ellipse inside the patch
        let reach = (2.0 * (1.0 / LESION_LEVEL).ln()).sqrt() * major;
        let margin_y = (reach.ceil() + 1.0).min((h / 2) as f64);
        let margin_x = (reach.ceil() + 1.0).min((w / 2) as f64);
        let cy = draw(&mut r, (margin_y, h as f64 - 1.0 - margin_y)).round().clamp(0.0, h as f64 - 1.0);
        let cx = draw(&mut r, (margin_x, w as f64 - 1.0 - margin_x)).round().clamp(0.0, w as f64 - 1.0);

        let mut bumps = vec![Bump::new(cy, cx, 1.0, major, minor, angle)];
        let extra = r.random_range(1..=5);
        for _ in 0..extra {
            let dist = sigma * draw(&mut r, (0.3, 1.0));
            let dir = draw(&mut r, (0.0, 2.0 * PI));
            let scale = draw(&mut r, (0.4, 0.8));
            let amp = draw(&mut r, (0.5, 1.0));
            let a2 = angle + draw(&mut r, (-0.5, 0.5));
            bumps.push(Bump::new(
                cy + dist * dir.sin(),
                cx + dist * dir.cos(),
                amp,
                major * scale,
                minor * scale,
                a2,
            ));
        }
        let inside: Vec<bool> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                bumps.iter().map(|b| b.value(y, x)).sum::<f64>() >= LESION_LEVEL
            })
            .collect();
        let (sy, sx) = (cy as usize, cx as usize);
        let mut queue = VecDeque::from([(sy, sx)]);
        let mut visited = vec![false; h * w];
        visited[sy * w + sx] = true;
        while let Some((y, x)) = queue.pop_front() {
            mask[y * w + x] = true;
            let mut visit = |ny: usize, nx: usize| {
                let k = ny * w + nx;
                if inside[k] && !visited[k] {
                    visited[k] = true;
                    queue.push_back((ny, nx));
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
    }
    BinaryMask::from_bools(h, w, mask)
}

/// Two-octave value noise in `[0, 1]` with `frequency` cells across the
/// shorter side.
fn value_noise(seed: u64, size: (usize, usize), frequency: f64) -> Vec<f64> {
    let (h, w) = size;
    let mut r = rng::stream(seed);
    let short = h.min(w) as f64;
    let mut out = vec![0.0; h * w];
    for (octave, amp) in [(1.0, 1.0), (2.0, 0.5)] {
        let cell = (short / (frequency * octave)).max(1.0);
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| r.random::<f64>()).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..h {
            let fy = y as f64 / cell;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / cell;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let v00 = lattice[y0 * gw + x0];
                let v01 = lattice[y0 * gw + x0 + 1];
                let v10 = lattice[(y0 + 1) * gw + x0];
                let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[y * w + x] += amp * (top + (bot - top) * ty);
            }
        }
    }
    out.iter().map(|v| v / 1.5).collect()
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Renders one sample. Pixel values are quantized to multiples of 1/255 so
/// that 8-bit PNG storage is lossless.
pub fn generate_sample(
    id: &str,
    style: &DomainStyle,
    sample_seed: u64,
    size: (usize, usize),
    count_range: (usize, usize),
) -> Sample {
    let (h, w) = size;
    let plane = h * w;
    let mask = lesion_mask(style, sample_seed, size, count_range);
    let texture = value_noise(rng::derive(sample_seed, "texture"), size, style.texture_frequency);
    let detail = value_noise(rng::derive(sample_seed, "detail"), size, style.texture_frequency * 2.0);
    let mut noise_rng = rng::stream(rng::derive(sample_seed, "noise"));
    let normal = Normal::new(0.0, style.noise_level.max(0.0)).expect("finite noise level");

    let mut pixels = vec![0f32; 3 * plane];
    for i in 0..plane {
        let t = texture[i];
        let mut rgb = lerp(BG_LIGHT, BG_DARK, t);
        if mask.values[i] == 1.0 {
            let strength = style.lesion_contrast * (0.75 + 0.5 * detail[i]);
            rgb = lerp(rgb, LESION, strength.min(1.0));
        }
        let rgb = style.apply_color(rgb);
        for c in 0..3 {
            let v = (rgb[c] + normal.sample(&mut noise_rng)).clamp(0.0, 1.0);
            pixels[c * plane + i] = ((v * 255.0).round() / 255.0) as f32;
        }
    }
    Sample {
        patch: ImagePatch::new(id, h, w, pixels),
        mask,
        domain: DomainLabel {
            task: style.task,
            domain_name: style.name.clone(),
            seen: style.seen,
        },
    }
}

/// Datasets generated for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTask {
    pub train: TaskDataset,
    pub unseen_test: TaskDataset,
    pub seen_test: TaskDataset,
}

pub fn generate_task(config: &GeneratorConfig, task: Task) -> Result<GeneratedTask> {
    config.validate()?;
    let base = task_seed(config.seed, task);
    let holdout = config.holdout_per_domain();
    let (mut train, mut seen_test, mut unseen_test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, style) in make_styles(config, task).iter().enumerate() {
        let domain_seed = rng::derive_index(base, "domain", i);
        for j in 0..config.samples_per_domain {
            let id = format!("{}-{}-{j:03}", task.short().to_ascii_lowercase(), style.name);
            let seed = rng::derive_index(domain_seed, "sample", j);
            let sample = generate_sample(&id, style, seed, config.patch_size, config.lesion_count_range);
            if !style.seen {
                unseen_test.push(sample);
            } else if j < config.samples_per_domain - holdout {
                train.push(sample);
            } else {
                seen_test.push(sample);
            }
        }
    }
    Ok(GeneratedTask {
        train: TaskDataset::new(task, train, PathBuf::new())?,
        unseen_test: TaskDataset::new(task, unseen_test, PathBuf::new())?,
        seen_test: TaskDataset::new(task, seen_test, PathBuf::new())?,
    })
}

/// Manifest paths written by [`write_task`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifests {
    pub train: PathBuf,
    pub seen_test: PathBuf,
    pub unseen_test: PathBuf,
}

/// Generates a task and writes it under `root/<task>/`.
pub fn write_task(config: &GeneratorConfig, task: Task, root: impl AsRef<Path>) -> Result<TaskManifests> {
    let generated = generate_task(config, task)?;
    let dir = root.as_ref().join(task.as_str());
    Ok(TaskManifests {
        train: save_dataset(&generated.train, &dir, "train")?,
        seen_test: save_dataset(&generated.seen_test, &dir, "seen_test")?,
        unseen_test: save_dataset(&generated.unseen_test, &dir, "unseen_test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 4-connected component count by repeated flood fill.
    fn components(m: &BinaryMask) -> usize {
        let (h, w) = m.shape();
        let mut label = vec![false; h * w];
        let mut n = 0;
        for start in 0..h * w {
            if m.values[start] != 1.0 || label[start] {
                continue;
            }
            n += 1;
            let mut stack = vec![start];
            label[start] = true;
            while let Some(k) = stack.pop() {
                let (y, x) = (k / w, k % w);
                let mut nbrs = Vec::new();
                if y > 0 {
                    nbrs.push(k - w);
                }
                if y + 1 < h {
                    nbrs.push(k + w);
                }
                if x > 0 {
                    nbrs.push(k - 1);
                }
                if x + 1 < w {
                    nbrs.push(k + 1);
                }
                for nb in nbrs {
                    if m.values[nb] == 1.0 && !label[nb] {
                        label[nb] = true;
                        stack.push(nb);
                    }
                }
            }
        }
        n
    }

    fn cfg() -> GeneratorConfig {
        GeneratorConfig {
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn styles_are_deterministic_and_seed_dependent() {
        let a = make_styles(&cfg(), Task::CrossScanner);
        assert_eq!(a.len(), 6);
        assert_eq!(a, make_styles(&cfg(), Task::CrossScanner));
        assert_eq!(a.iter().filter(|s| s.seen).count(), 3);
        assert!(a[..3].iter().all(|s| s.seen));
        let b = make_styles(&GeneratorConfig { seed: 8, ..cfg() }, Task::CrossScanner);
        let differs = a.iter().zip(&b).any(|(x, y)| x.color_matrix != y.color_matrix || x.color_offset != y.color_offset);
        assert!(differs);

        let one = make_styles(
            &GeneratorConfig {
                n_seen_domains: 1,
                n_unseen_domains: 0,
                ..cfg()
            },
            Task::CrossOrgan,
        );
        assert_eq!(one.len(), 1);
        assert!(one[0].seen);
    }

    #[test]
    fn styles_stay_in_declared_ranges_and_names_are_unique() {
        for task in Task::ALL {
            let styles = make_styles(&cfg(), task);
            let names: std::collections::HashSet<_> = styles.iter().map(|s| s.name.clone()).collect();
            assert_eq!(names.len(), styles.len());
            for s in &styles {
                assert!((0.0..=0.2).contains(&s.noise_level));
                assert!((0.1..=0.9).contains(&s.lesion_contrast));
                assert!(s.texture_frequency > 0.0);
                assert!(s.color_matrix.iter().flatten().all(|v| v.is_finite()));
                for corner in 0..8 {
                    let rgb = [(corner & 1) as f64, ((corner >> 1) & 1) as f64, ((corner >> 2) & 1) as f64];
                    assert!(s.apply_color(rgb).iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn single_lesion_is_one_component() {
        for task in Task::ALL {
            for (i, style) in make_styles(&cfg(), task).iter().enumerate() {
                for seed in 0..20u64 {
                    let m = lesion_mask(style, seed * 31 + i as u64, (64, 64), (1, 1));
                    assert_eq!(components(&m), 1, "style {} seed {seed}", style.name);
                }
            }
        }
    }

    #[test]
    fn lesions_cover_at_least_one_percent() {
        for task in Task::ALL {
            for style in make_styles(&cfg(), task) {
                for seed in 0..30u64 {
                    for size in [(64, 64), (32, 48), (96, 64)] {
                        let m = lesion_mask(&style, seed, size, (1, 3));
                        let frac = m.foreground() as f64 / (size.0 * size.1) as f64;
                        assert!(frac >= 0.01, "{} seed {seed} size {size:?}: {frac}", style.name);
                    }
                }
            }
        }
    }

    #[test]
    fn sample_is_deterministic_and_mask_matches_rerender() {
        let style = &make_styles(&cfg(), Task::CrossOrgan)[4];
        let a = generate_sample("x", style, 99, (48, 64), (1, 3));
        let b = generate_sample("x", style, 99, (48, 64), (1, 3));
        assert_eq!(a, b);
        assert_eq!(a.mask, lesion_mask(style, 99, (48, 64), (1, 3)));
        assert!(crate::types::validate_sample(&a).is_empty());
        assert!(!a.domain.seen);
    }

    #[test]
    fn task_split_structure() {
        let g = generate_task(&cfg(), Task::CrossOrgan).unwrap();
        assert_eq!(g.train.len(), 24);
        assert_eq!(g.seen_test.len(), 6);
        assert_eq!(g.unseen_test.len(), 30);
        let train_domains = g.train.domains();
        let unseen_domains = g.unseen_test.domains();
        assert_eq!(train_domains.len(), 3);
        assert_eq!(unseen_domains.len(), 3);
        assert!(train_domains.is_disjoint(&unseen_domains));
        for d in &train_domains {
            let n = g.seen_test.samples.iter().filter(|s| &s.domain.domain_name == d).count();
            assert_eq!(n, 2);
        }
        let train_ids: std::collections::HashSet<_> = g.train.ids().into_iter().collect();
        assert!(g.seen_test.ids().iter().all(|id| !train_ids.contains(id)));
        assert!(g.unseen_test.samples.iter().all(|s| !s.domain.seen));
        for ds in [&g.train, &g.seen_test, &g.unseen_test] {
            assert_eq!(ds.task, Task::CrossOrgan);
        }
    }

    #[test]
    fn adding_samples_leaves_existing_ones_untouched() {
        let small = generate_task(&GeneratorConfig { samples_per_domain: 5, seen_holdout_fraction: 0.0, ..cfg() }, Task::CrossScanner).unwrap();
        let big = generate_task(&GeneratorConfig { samples_per_domain: 8, seen_holdout_fraction: 0.0, ..cfg() }, Task::CrossScanner).unwrap();
        for s in &small.train.samples {
            assert_eq!(Some(s), big.train.get(s.id()));
        }
    }

    #[test]
    fn written_task_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let config = GeneratorConfig {
            samples_per_domain: 3,
            n_unseen_domains: 1,
            patch_size: (32, 32),
            ..cfg()
        };
        let paths = write_task(&config, Task::CrossScanner, dir.path()).unwrap();
        let generated = generate_task(&config, Task::CrossScanner).unwrap();
        let back = crate::manifest::load_manifest(&paths.train).unwrap();
        assert_eq!(back.samples, generated.train.samples);
    }
}
