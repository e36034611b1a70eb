//! Procedural-image corpus and partial-view episode sampling.
//!
//! Images are synthesized, not loaded: every family shares a base pattern of
//! random 2-D sinusoids, and every image adds its own field of Gaussian
//! blobs. The blobs are spatially local, so a small crop genuinely carries
//! information about which image it came from -- the property the
//! partial-observation task needs.
//!
//! An episode draws M images ("ways") from a few families, takes V random
//! crops per image as support views plus Q more as queries, and attaches the
//! normalized crop coordinates to every view. In the partial condition the
//! support crops of an item cover at most half of the image area by
//! construction; the full condition uses the whole image as every view and
//! serves as the ablation control.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{mix, rng_from, standard_normal, uniform};

/// Whether views are partial crops or whole images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Partial,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageSpec {
    pub fn pixel_count(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A synthesized image: `pixels` is channel-major row-major, values in [0,1].
#[derive(Clone, Debug)]
pub struct ProceduralImage {
    pub pixels: Vec<f64>,
    pub spec: ImageSpec,
    pub family_id: usize,
    pub image_id: usize,
    pub seed: u64,
}

/// One crop of an image plus its placement.
#[derive(Clone, Debug)]
pub struct View {
    pub patch: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Normalized (x, y, w, h) of the crop within the source image.
    pub coords: [f64; 4],
    pub item_index: usize,
}

impl View {
    /// Flattened payload fed to encoders: patch values then coords.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.patch.clone();
        out.extend_from_slice(&self.coords);
        out
    }

    pub fn flat_width(&self) -> usize {
        self.patch.len() + 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub ways: usize,
    pub shots: Vec<usize>,
    pub condition: Condition,
    pub episode_seed: u64,
}

/// One few-shot task instance with flattened view payloads. Both the image
/// and the gridworld pipelines produce this exact shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<Vec<Vec<f64>>>,
    pub queries: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn view_width(&self) -> usize {
        self.support[0][0].len()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn total_support_views(&self) -> usize {
        self.support.iter().map(|s| s.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Image synthesis
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub families: usize,
    pub images_per_family: usize,
    pub image: ImageSpec,
    /// Sinusoids in the family-level base pattern.
    pub base_waves: usize,
    /// Gaussian blobs in the image-level detail field.
    pub detail_blobs: usize,
    pub seed: u64,
}

impl PoolConfig {
    pub fn desk(seed: u64) -> Self {
        PoolConfig {
            families: 6,
            images_per_family: 40,
            image: ImageSpec { channels: 3, height: 24, width: 24 },
            base_waves: 4,
            detail_blobs: 6,
            seed,
        }
    }
}

// Sub-stream tags for image synthesis.
const FAMILY_TAG: u64 = 0xFA;
const IMAGE_TAG: u64 = 0x1A;

/// Family-level base pattern: per channel, a sum of random 2-D sinusoids.
fn base_pattern(cfg: &PoolConfig, family_id: usize) -> Vec<f64> {
    let spec = cfg.image;
    let mut rng = rng_from(mix(mix(cfg.seed, FAMILY_TAG), family_id as u64));
    let mut out = vec![0.0; spec.pixel_count()];
    for c in 0..spec.channels {
        let waves: Vec<(f64, f64, f64, f64)> = (0..cfg.base_waves)
            .map(|_| {
                (
                    uniform(&mut rng, 0.5, 1.0),                  // amplitude
                    uniform(&mut rng, 1.0, 4.0),                  // x cycles
                    uniform(&mut rng, 1.0, 4.0),                  // y cycles
                    uniform(&mut rng, 0.0, std::f64::consts::TAU), // phase
                )
            })
            .collect();
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut v = 0.0;
                for &(a, fx, fy, ph) in &waves {
                    let arg = std::f64::consts::TAU
                        * (fx * x as f64 / spec.width as f64 + fy * y as f64 / spec.height as f64)
                        + ph;
                    v += a * arg.sin();
                }
                out[(c * spec.height + y) * spec.width + x] = v;
            }
        }
    }
    out
}

/// Image-level detail field: per channel, a sum of signed Gaussian blobs.
fn detail_field(cfg: &PoolConfig, family_id: usize, image_id: usize) -> Vec<f64> {
    let spec = cfg.image;
    let fam_seed = mix(mix(cfg.seed, FAMILY_TAG), family_id as u64);
    let mut rng = rng_from(mix(mix(fam_seed, IMAGE_TAG), image_id as u64));
    let mut out = vec![0.0; spec.pixel_count()];
    let scale = spec.height.min(spec.width) as f64;
    for c in 0..spec.channels {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..cfg.detail_blobs)
            .map(|_| {
                let amp = uniform(&mut rng, 0.8, 2.0)
                    * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                (
                    amp,
                    uniform(&mut rng, 0.0, spec.width as f64),
                    uniform(&mut rng, 0.0, spec.height as f64),
                    uniform(&mut rng, 0.06, 0.18) * scale, // blob sigma in pixels
                )
            })
            .collect();
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut v = 0.0;
                for &(a, cx, cy, sg) in &blobs {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    v += a * (-(dx * dx + dy * dy) / (2.0 * sg * sg)).exp();
                }
                out[(c * spec.height + y) * spec.width + x] += v;
            }
        }
    }
    out
}

/// Deterministic image: family base pattern plus image detail field,
/// rescaled per channel to [0, 1].
pub fn gen_image(cfg: &PoolConfig, family_id: usize, image_id: usize) -> ProceduralImage {
    let spec = cfg.image;
    let base = base_pattern(cfg, family_id);
    let detail = detail_field(cfg, family_id, image_id);
    let mut pixels: Vec<f64> = base.iter().zip(detail.iter()).map(|(b, d)| b + d).collect();
    let plane = spec.height * spec.width;
    for c in 0..spec.channels {
        let ch = &mut pixels[c * plane..(c + 1) * plane];
        let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            ch.iter_mut().for_each(|v| *v = 0.5);
        } else {
            ch.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
    ProceduralImage {
        pixels,
        spec,
        family_id,
        image_id,
        seed: cfg.seed,
    }
}

// ---------------------------------------------------------------------------
// Episode sampling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    /// Support views per item (V).
    pub support_views: usize,
    /// Query views per item (Q).
    pub query_views: usize,
    pub ways_min: usize,
    pub ways_max: usize,
    /// Families drawn per episode, uniform in [1, class_max].
    pub class_max: usize,
    pub noise_sigma: f64,
    /// Per-channel multiplicative jitter: gain in [1-j, 1+j].
    pub gain_jitter: f64,
    pub condition: Condition,
}

impl EpisodeConfig {
    /// Desk-scale partial-view task: 6x6 crops of 24x24 images, V=8 so the
    /// support budget is exactly 8*36/576 = 50% of the image area.
    pub fn desk(condition: Condition) -> Self {
        EpisodeConfig {
            crop_height: 6,
            crop_width: 6,
            support_views: 8,
            query_views: 2,
            ways_min: 3,
            ways_max: 8,
            class_max: 3,
            noise_sigma: 0.02,
            gain_jitter: 0.10,
            condition,
        }
    }

    /// Source-task geometry at the original benchmark scale (84x84 images,
    /// 14x14 crops, 18 support views, 5-25 ways from up to 5 classes).
    pub fn paper(condition: Condition) -> Self {
        EpisodeConfig {
            crop_height: 14,
            crop_width: 14,
            support_views: 18,
            query_views: 2,
            ways_min: 5,
            ways_max: 25,
            class_max: 5,
            noise_sigma: 0.02,
            gain_jitter: 0.10,
            condition,
        }
    }
}

/// Episode source: the trainer only ever asks for "episode number i".
pub trait EpisodeSampler: Sync {
    fn sample(&self, episode_index: u64) -> Result<Episode>;
    fn view_width(&self) -> usize;
}

pub struct ImageEpisodeSampler {
    pool: PoolConfig,
    cfg: EpisodeConfig,
    base_seed: u64,
}

impl ImageEpisodeSampler {
    pub fn new(pool: PoolConfig, cfg: EpisodeConfig, base_seed: u64) -> Result<Self> {
        if pool.families < 5 {
            return Err(Error::Episode("pool needs at least 5 families".into()));
        }
        if pool.images_per_family < cfg.ways_max {
            return Err(Error::Episode(
                "images_per_family must cover the maximum ways".into(),
            ));
        }
        if cfg.crop_height > pool.image.height || cfg.crop_width > pool.image.width {
            return Err(Error::Episode("crop larger than image".into()));
        }
        if cfg.ways_min < 1 || cfg.ways_min > cfg.ways_max {
            return Err(Error::Episode("invalid ways range".into()));
        }
        if cfg.class_max < 1 {
            return Err(Error::Episode("class_max must be at least 1".into()));
        }
        if cfg.condition == Condition::Partial {
            let crop_area = cfg.crop_height * cfg.crop_width;
            let image_area = pool.image.height * pool.image.width;
            if 2 * cfg.support_views * crop_area > image_area {
                return Err(Error::Episode(format!(
                    "support coverage {}x{} exceeds half the image area",
                    cfg.support_views, crop_area
                )));
            }
        }
        Ok(ImageEpisodeSampler { pool, cfg, base_seed })
    }

    pub fn pool(&self) -> &PoolConfig {
        &self.pool
    }

    pub fn episode_config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    fn crop(&self, img: &ProceduralImage, x0: usize, y0: usize) -> (Vec<f64>, [f64; 4]) {
        let spec = img.spec;
        let (ch, cw) = (self.cfg.crop_height, self.cfg.crop_width);
        let mut patch = Vec::with_capacity(spec.channels * ch * cw);
        for c in 0..spec.channels {
            for y in y0..y0 + ch {
                let row = (c * spec.height + y) * spec.width;
                patch.extend_from_slice(&img.pixels[row + x0..row + x0 + cw]);
            }
        }
        let coords = [
            x0 as f64 / spec.width as f64,
            y0 as f64 / spec.height as f64,
            cw as f64 / spec.width as f64,
            ch as f64 / spec.height as f64,
        ];
        (patch, coords)
    }

    fn whole(&self, img: &ProceduralImage) -> (Vec<f64>, [f64; 4]) {
        (img.pixels.clone(), [0.0, 0.0, 1.0, 1.0])
    }

    fn jitter(
        &self,
        patch: &mut [f64],
        channels: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) {
        let plane = patch.len() / channels;
        for c in 0..channels {
            let gain = uniform(rng, 1.0 - self.cfg.gain_jitter, 1.0 + self.cfg.gain_jitter);
            for v in &mut patch[c * plane..(c + 1) * plane] {
                *v = *v * gain + self.cfg.noise_sigma * standard_normal(rng);
            }
        }
    }
}

impl EpisodeSampler for ImageEpisodeSampler {
    fn view_width(&self) -> usize {
        match self.cfg.condition {
            Condition::Partial => {
                self.pool.image.channels * self.cfg.crop_height * self.cfg.crop_width + 4
            }
            Condition::Full => self.pool.image.pixel_count() + 4,
        }
    }

    fn sample(&self, episode_index: u64) -> Result<Episode> {
        let episode_seed = mix(self.base_seed, episode_index);
        let mut rng = rng_from(episode_seed);
        let cfg = &self.cfg;
        let spec = self.pool.image;

        let ways = rng.gen_range(cfg.ways_min..=cfg.ways_max);
        let n_classes = rng
            .gen_range(1..=cfg.class_max.min(self.pool.families))
            .min(ways);

        // Choose distinct families, then assign every item a family with
        // each chosen family taking at least one item.
        let mut fams: Vec<usize> = (0..self.pool.families).collect();
        for i in 0..n_classes {
            let j = rng.gen_range(i..fams.len());
            fams.swap(i, j);
        }
        let chosen = &fams[..n_classes];
        let mut item_family: Vec<usize> = Vec::with_capacity(ways);
        for (i, &f) in chosen.iter().enumerate().take(ways.min(n_classes)) {
            let _ = i;
            item_family.push(f);
        }
        while item_family.len() < ways {
            item_family.push(chosen[rng.gen_range(0..n_classes)]);
        }

        // Distinct image ids within each family.
        let mut used: Vec<Vec<usize>> = vec![Vec::new(); self.pool.families];
        let mut items: Vec<(usize, usize)> = Vec::with_capacity(ways);
        for &f in &item_family {
            let mut tries = 0;
            loop {
                let id = rng.gen_range(0..self.pool.images_per_family);
                if !used[f].contains(&id) {
                    used[f].push(id);
                    items.push((f, id));
                    break;
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::Episode("image pool exhausted".into()));
                }
            }
        }

        let mut support: Vec<Vec<Vec<f64>>> = Vec::with_capacity(ways);
        let mut queries: Vec<Vec<f64>> = Vec::with_capacity(ways * cfg.query_views);
        let mut targets: Vec<usize> = Vec::with_capacity(ways * cfg.query_views);
        let mut shots = Vec::with_capacity(ways);

        for (item_idx, &(f, id)) in items.iter().enumerate() {
            let img = gen_image(&self.pool, f, id);
            let mut item_views: Vec<Vec<f64>> = Vec::with_capacity(cfg.support_views);
            match cfg.condition {
                Condition::Partial => {
                    let max_x = spec.width - cfg.crop_width;
                    let max_y = spec.height - cfg.crop_height;
                    let mut placements: Vec<(usize, usize)> =
                        Vec::with_capacity(cfg.support_views);
                    for _ in 0..cfg.support_views {
                        let x0 = rng.gen_range(0..=max_x);
                        let y0 = rng.gen_range(0..=max_y);
                        placements.push((x0, y0));
                        let (mut patch, coords) = self.crop(&img, x0, y0);
                        self.jitter(&mut patch, spec.channels, &mut rng);
                        let mut flat = patch;
                        flat.extend_from_slice(&coords);
                        item_views.push(flat);
                    }
                    // Queries take placements the support never used.
                    let mut q_placements: Vec<(usize, usize)> = Vec::new();
                    for _ in 0..cfg.query_views {
                        let mut tries = 0;
                        let (x0, y0) = loop {
                            let cand = (rng.gen_range(0..=max_x), rng.gen_range(0..=max_y));
                            if !placements.contains(&cand) && !q_placements.contains(&cand) {
                                break cand;
                            }
                            tries += 1;
                            if tries > 10_000 {
                                return Err(Error::Episode(
                                    "no unused query placement available".into(),
                                ));
                            }
                        };
                        q_placements.push((x0, y0));
                        let (mut patch, coords) = self.crop(&img, x0, y0);
                        self.jitter(&mut patch, spec.channels, &mut rng);
                        let mut flat = patch;
                        flat.extend_from_slice(&coords);
                        queries.push(flat);
                        targets.push(item_idx);
                    }
                }
                Condition::Full => {
                    for _ in 0..cfg.support_views {
                        let (mut patch, coords) = self.whole(&img);
                        self.jitter(&mut patch, spec.channels, &mut rng);
                        let mut flat = patch;
                        flat.extend_from_slice(&coords);
                        item_views.push(flat);
                    }
                    for _ in 0..cfg.query_views {
                        let (mut patch, coords) = self.whole(&img);
                        self.jitter(&mut patch, spec.channels, &mut rng);
                        let mut flat = patch;
                        flat.extend_from_slice(&coords);
                        queries.push(flat);
                        targets.push(item_idx);
                    }
                }
            }
            shots.push(item_views.len());
            support.push(item_views);
        }

        Ok(Episode {
            support,
            queries,
            targets,
            meta: EpisodeMeta {
                ways,
                shots,
                condition: cfg.condition,
                episode_seed,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Episode serialization: JSON manifest + raw little-endian f64 payload
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EpisodeManifest {
    view_width: usize,
    support_lengths: Vec<usize>,
    n_queries: usize,
    targets: Vec<usize>,
    meta: EpisodeMeta,
}

/// Write `<stem>.json` and `<stem>.bin`. The payload is all support views in
/// item order followed by all queries, each view as `view_width` f64 LE.
pub fn save_episode(ep: &Episode, stem: &Path) -> Result<()> {
    let manifest = EpisodeManifest {
        view_width: ep.view_width(),
        support_lengths: ep.support.iter().map(|s| s.len()).collect(),
        n_queries: ep.queries.len(),
        targets: ep.targets.clone(),
        meta: ep.meta.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Episode(format!("manifest encode: {e}")))?;
    std::fs::write(stem.with_extension("json"), json)?;

    let mut bin = std::fs::File::create(stem.with_extension("bin"))?;
    for view in ep.support.iter().flatten().chain(ep.queries.iter()) {
        for &v in view {
            bin.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_episode(stem: &Path) -> Result<Episode> {
    let json = std::fs::read_to_string(stem.with_extension("json"))?;
    let manifest: EpisodeManifest =
        serde_json::from_str(&json).map_err(|e| Error::Episode(format!("manifest decode: {e}")))?;

    let mut bytes = Vec::new();
    std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
    let total_views: usize = manifest.support_lengths.iter().sum::<usize>() + manifest.n_queries;
    let expect = total_views * manifest.view_width * 8;
    if bytes.len() != expect {
        return Err(Error::Episode(format!(
            "payload is {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut next_view = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

    let mut support = Vec::with_capacity(manifest.support_lengths.len());
    for &len in &manifest.support_lengths {
        support.push((0..len).map(|_| next_view(manifest.view_width)).collect());
    }
    let queries = (0..manifest.n_queries)
        .map(|_| next_view(manifest.view_width))
        .collect();
    Ok(Episode {
        support,
        queries,
        targets: manifest.targets,
        meta: manifest.meta,
    })
}
