//! Procedural multi-domain benchmark: one labeled source domain and M
//! unlabeled target domains that share semantics (random rectangles and disks
//! over a background) but differ in global photometric statistics. The style
//! shift lives entirely in per-channel gain/bias/gamma/noise, which is the
//! regime feature-statistics exchange can act on.

use crate::error::{CoastError, Result};
use crate::rng::{normal, stream};
use crate::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

/// Base colors per class; bounds the number of distinguishable classes.
const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.80, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.20, 0.35, 0.80],
    [0.85, 0.80, 0.20],
    [0.75, 0.25, 0.75],
    [0.20, 0.75, 0.75],
    [0.90, 0.55, 0.15],
];

/// Geometry and texture controls for scene generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    /// Guaranteed shapes drawn for every non-background class.
    pub shapes_per_class: usize,
    /// Additional shapes of random class on top of the guaranteed ones.
    pub extra_shapes: usize,
    pub min_half_extent: usize,
    pub max_half_extent: usize,
    /// Amplitude of the per-pixel texture noise in the canonical image.
    pub texture_amplitude: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            shapes_per_class: 1,
            extra_shapes: 1,
            min_half_extent: 3,
            max_half_extent: 8,
            texture_amplitude: 0.05,
        }
    }
}

/// A labeled scene before any domain styling.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub h: usize,
    pub w: usize,
    /// Row-major class ids, each `< num_classes`.
    pub label_map: Vec<u8>,
    /// `[3, H, W]` appearance in `[0,1]`.
    pub canonical: Tensor,
    pub seed: u64,
}

/// Global photometric transform defining one domain's appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub gamma: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gain.iter().any(|&g| g <= 0.0) {
            return Err(CoastError::InvalidValue(format!(
                "domain {}: gains must be positive",
                self.domain_id
            )));
        }
        if self.gamma <= 0.0 {
            return Err(CoastError::InvalidValue(format!(
                "domain {}: gamma must be positive",
                self.domain_id
            )));
        }
        if self.noise_std < 0.0 {
            return Err(CoastError::InvalidValue(format!(
                "domain {}: noise_std must be nonnegative",
                self.domain_id
            )));
        }
        Ok(())
    }
}

/// Whether a dataset participates in training or is held out for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` image.
    pub image: Tensor,
    /// Row-major class ids; present on the source and on eval datasets.
    pub label: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub is_source: bool,
    pub role: DatasetRole,
    pub samples: Vec<Sample>,
}

/// The full benchmark: labeled source, unlabeled target training sets,
/// labeled per-target evaluation sets, and a labeled unseen domain whose spec
/// never participates in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub source: DomainDataset,
    pub targets: Vec<DomainDataset>,
    pub target_eval: Vec<DomainDataset>,
    pub unseen_eval: DomainDataset,
    pub source_spec: DomainSpec,
    pub target_specs: Vec<DomainSpec>,
    pub unseen_spec: DomainSpec,
}

/// Sizes, seeds, and domain styling for benchmark generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub num_targets: usize,
    pub source_size: usize,
    pub target_size: usize,
    pub unseen_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub scene: SceneParams,
    /// Override the built-in style presets (source, targets..., unseen).
    pub domain_specs: Option<Vec<DomainSpec>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            h: 32,
            w: 32,
            num_classes: 4,
            num_targets: 2,
            source_size: 400,
            target_size: 300,
            unseen_size: 100,
            eval_size: 64,
            seed: 17,
            scene: SceneParams::default(),
            domain_specs: None,
        }
    }
}

fn quantize(v: f64) -> Real {
    // Images are stored on disk as f32; quantizing at generation time makes
    // in-memory and re-imported datasets identical.
    (v as f32) as Real
}

/// Deterministic labeled scene: random rectangles and disks over background.
pub fn generate_scene(seed: u64, h: usize, w: usize, k: usize, params: &SceneParams) -> Result<Scene> {
    if k < 2 {
        return Err(CoastError::Config(format!("need at least 2 classes, got {k}")));
    }
    if h < 8 || w < 8 {
        return Err(CoastError::Config(format!("scene size {h}x{w} below minimum 8x8")));
    }
    if k > PALETTE.len() {
        return Err(CoastError::PaletteExceeded { requested: k, max: PALETTE.len() });
    }
    let mut rng = stream(seed, "scene");
    let mut label = vec![0u8; h * w];

    let draw_shape = |label: &mut Vec<u8>, rng: &mut rand_chacha::ChaCha8Rng, class: u8| {
        let disk = rng.gen_bool(0.5);
        let cy = rng.gen_range(0..h) as isize;
        let cx = rng.gen_range(0..w) as isize;
        if disk {
            let r = rng.gen_range(params.min_half_extent..=params.max_half_extent) as isize;
            for y in (cy - r).max(0)..(cy + r + 1).min(h as isize) {
                for x in (cx - r).max(0)..(cx + r + 1).min(w as isize) {
                    if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                        label[y as usize * w + x as usize] = class;
                    }
                }
            }
        } else {
            let hy = rng.gen_range(params.min_half_extent..=params.max_half_extent) as isize;
            let hx = rng.gen_range(params.min_half_extent..=params.max_half_extent) as isize;
            for y in (cy - hy).max(0)..(cy + hy + 1).min(h as isize) {
                for x in (cx - hx).max(0)..(cx + hx + 1).min(w as isize) {
                    label[y as usize * w + x as usize] = class;
                }
            }
        }
    };

    for class in 1..k {
        for _ in 0..params.shapes_per_class {
            draw_shape(&mut label, &mut rng, class as u8);
        }
    }
    for _ in 0..params.extra_shapes {
        let class = rng.gen_range(1..k) as u8;
        draw_shape(&mut label, &mut rng, class);
    }

    let mut canonical = vec![0.0 as Real; 3 * h * w];
    for p in 0..h * w {
        let base = PALETTE[label[p] as usize];
        for c in 0..3 {
            let noise = rng.gen_range(-1.0..1.0) * params.texture_amplitude;
            canonical[c * h * w + p] = quantize((base[c] + noise).clamp(0.0, 1.0));
        }
    }
    Ok(Scene {
        h,
        w,
        label_map: label,
        canonical: Tensor::new(vec![3, h, w], canonical)?,
        seed,
    })
}

/// Apply a domain's photometric transform:
/// `clip(gain * canonical^gamma + bias + noise, 0, 1)`. The label map is
/// untouched by construction.
pub fn render_domain(scene: &Scene, spec: &DomainSpec) -> Result<Tensor> {
    spec.validate()?;
    let hw = scene.h * scene.w;
    let mut rng = stream(spec.seed ^ scene.seed.rotate_left(17), "render");
    let mut out = vec![0.0 as Real; 3 * hw];
    for c in 0..3 {
        for p in 0..hw {
            let v = scene.canonical.values[c * hw + p] as f64;
            let noise =
                if spec.noise_std > 0.0 { normal(&mut rng) * spec.noise_std } else { 0.0 };
            let styled = spec.gain[c] * v.powf(spec.gamma) + spec.bias[c] + noise;
            out[c * hw + p] = quantize(styled.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![3, scene.h, scene.w], out)
}

/// Built-in style presets. Index 0 is the near-identity source; later indices
/// are increasingly different target appearances.
fn preset(index: usize, seed: u64) -> (([f64; 3], [f64; 3]), f64, f64) {
    const PRESETS: [([f64; 3], [f64; 3], f64); 6] = [
        ([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 1.0),
        ([1.25, 0.85, 0.70], [0.05, 0.0, -0.04], 0.85),
        ([0.70, 0.90, 1.25], [-0.04, 0.01, 0.06], 1.20),
        ([0.80, 1.20, 0.80], [0.0, 0.04, -0.03], 0.90),
        ([1.15, 1.05, 0.65], [0.03, -0.03, 0.0], 1.10),
        ([1.30, 0.80, 0.75], [0.04, 0.0, -0.02], 0.90),
    ];
    if index < PRESETS.len() {
        let (g, b, gm) = PRESETS[index];
        ((g, b), gm, if index == 0 { 0.01 } else { 0.02 })
    } else {
        let mut rng = stream(seed, &format!("preset-{index}"));
        let mut g = [0.0; 3];
        let mut b = [0.0; 3];
        for c in 0..3 {
            g[c] = rng.gen_range(0.5..1.4);
            b[c] = rng.gen_range(-0.08..0.1);
        }
        ((g, b), rng.gen_range(0.6..1.6), 0.02)
    }
}

fn default_specs(cfg: &DataConfig) -> Vec<DomainSpec> {
    let mut specs = Vec::new();
    let names: Vec<String> = std::iter::once("source".to_string())
        .chain((0..cfg.num_targets).map(|i| format!("t{i}")))
        .chain(std::iter::once("unseen".to_string()))
        .collect();
    for (i, name) in names.iter().enumerate() {
        // last preset slot is reserved for the unseen domain
        let pi = if i == names.len() - 1 { 5 } else { i };
        let ((gain, bias), gamma, noise_std) = preset(pi, cfg.seed);
        specs.push(DomainSpec {
            domain_id: name.clone(),
            gain,
            bias,
            gamma,
            noise_std,
            seed: cfg.seed.wrapping_mul(0x9e37).wrapping_add(i as u64 * 0x1000_0001),
        });
    }
    specs
}

fn build_dataset(
    cfg: &DataConfig,
    spec: &DomainSpec,
    count: usize,
    labeled: bool,
    is_source: bool,
    role: DatasetRole,
    scene_tag: &str,
) -> Result<DomainDataset> {
    let mut seed_rng = stream(cfg.seed, scene_tag);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let scene_seed: u64 = seed_rng.gen();
        let scene = generate_scene(scene_seed, cfg.h, cfg.w, cfg.num_classes, &cfg.scene)?;
        let image = render_domain(&scene, spec)?;
        samples.push(Sample {
            image,
            label: if labeled { Some(scene.label_map) } else { None },
        });
    }
    Ok(DomainDataset {
        domain_id: spec.domain_id.clone(),
        h: cfg.h,
        w: cfg.w,
        num_classes: cfg.num_classes,
        is_source,
        role,
        samples,
    })
}

/// Generate the full benchmark. Every domain draws from the same scene
/// distribution under its own seed stream; only the appearance differs.
pub fn make_benchmark(cfg: &DataConfig) -> Result<Benchmark> {
    if cfg.num_targets < 1 {
        return Err(CoastError::Config("need at least one target domain".into()));
    }
    let specs = match &cfg.domain_specs {
        Some(s) => {
            if s.len() != cfg.num_targets + 2 {
                return Err(CoastError::Config(format!(
                    "domain_specs must list source + {} targets + unseen, got {}",
                    cfg.num_targets,
                    s.len()
                )));
            }
            s.clone()
        }
        None => default_specs(cfg),
    };
    let mut seen = BTreeSet::new();
    for s in &specs {
        s.validate()?;
        if !seen.insert(s.domain_id.clone()) {
            return Err(CoastError::DuplicateDomain(s.domain_id.clone()));
        }
    }
    let source_spec = specs[0].clone();
    let target_specs: Vec<DomainSpec> = specs[1..1 + cfg.num_targets].to_vec();
    let unseen_spec = specs[1 + cfg.num_targets].clone();

    let source = build_dataset(
        cfg,
        &source_spec,
        cfg.source_size,
        true,
        true,
        DatasetRole::Train,
        "scenes-source",
    )?;
    let mut targets = Vec::new();
    let mut target_eval = Vec::new();
    for (i, spec) in target_specs.iter().enumerate() {
        targets.push(build_dataset(
            cfg,
            spec,
            cfg.target_size,
            false,
            false,
            DatasetRole::Train,
            &format!("scenes-target-{i}"),
        )?);
        target_eval.push(build_dataset(
            cfg,
            spec,
            cfg.eval_size,
            true,
            false,
            DatasetRole::Eval,
            &format!("scenes-eval-{i}"),
        )?);
    }
    let unseen_eval = build_dataset(
        cfg,
        &unseen_spec,
        cfg.unseen_size,
        true,
        false,
        DatasetRole::Eval,
        "scenes-unseen",
    )?;
    Ok(Benchmark { source, targets, target_eval, unseen_eval, source_spec, target_specs, unseen_spec })
}

// ---- on-disk format ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    image: String,
    label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestDomain {
    domain_id: String,
    kind: String,
    role: DatasetRole,
    is_source: bool,
    spec: DomainSpec,
    samples: Vec<ManifestSample>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    h: usize,
    w: usize,
    num_classes: usize,
    num_targets: usize,
    domains: Vec<ManifestDomain>,
}

fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.values.len() * 4);
    for &v in &t.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_image(path: &Path, shape: Vec<usize>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let expected: usize = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(CoastError::Dataset(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<Real> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
        .collect();
    Tensor::new(shape, values)
}

fn dataset_to_manifest(
    ds: &DomainDataset,
    spec: &DomainSpec,
    kind: &str,
    dir: &Path,
) -> Result<ManifestDomain> {
    let mut samples = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let img_name = format!("img_{}_{}_{:05}.bin", kind, ds.domain_id, i);
        write_image(&dir.join(&img_name), &s.image)?;
        let label_name = match &s.label {
            Some(l) => {
                let name = format!("lbl_{}_{}_{:05}.bin", kind, ds.domain_id, i);
                fs::write(dir.join(&name), l)?;
                Some(name)
            }
            None => None,
        };
        samples.push(ManifestSample { image: img_name, label: label_name });
    }
    Ok(ManifestDomain {
        domain_id: ds.domain_id.clone(),
        kind: kind.to_string(),
        role: ds.role,
        is_source: ds.is_source,
        spec: spec.clone(),
        samples,
    })
}

/// Write the benchmark as raw little-endian f32 images, 8-bit label files,
/// and a JSON manifest. The round trip through [`import_benchmark`] is
/// bit-exact.
pub fn export_benchmark(bench: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut domains = Vec::new();
    domains.push(dataset_to_manifest(&bench.source, &bench.source_spec, "source", dir)?);
    for (ds, spec) in bench.targets.iter().zip(&bench.target_specs) {
        domains.push(dataset_to_manifest(ds, spec, "target_train", dir)?);
    }
    for (ds, spec) in bench.target_eval.iter().zip(&bench.target_specs) {
        domains.push(dataset_to_manifest(ds, spec, "target_eval", dir)?);
    }
    domains.push(dataset_to_manifest(&bench.unseen_eval, &bench.unseen_spec, "unseen_eval", dir)?);
    let manifest = Manifest {
        format_version: 1,
        h: bench.source.h,
        w: bench.source.w,
        num_classes: bench.source.num_classes,
        num_targets: bench.targets.len(),
        domains,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn manifest_to_dataset(md: &ManifestDomain, m: &Manifest, dir: &Path) -> Result<DomainDataset> {
    let mut samples = Vec::with_capacity(md.samples.len());
    for s in &md.samples {
        let image = read_image(&dir.join(&s.image), vec![3, m.h, m.w])?;
        let label = match &s.label {
            Some(name) => {
                let bytes = fs::read(dir.join(name))?;
                if bytes.len() != m.h * m.w {
                    return Err(CoastError::Dataset(format!(
                        "{name}: expected {} label bytes, found {}",
                        m.h * m.w,
                        bytes.len()
                    )));
                }
                Some(bytes)
            }
            None => None,
        };
        samples.push(Sample { image, label });
    }
    Ok(DomainDataset {
        domain_id: md.domain_id.clone(),
        h: m.h,
        w: m.w,
        num_classes: m.num_classes,
        is_source: md.is_source,
        role: md.role,
        samples,
    })
}

/// Read a benchmark directory produced by [`export_benchmark`].
pub fn import_benchmark(dir: &Path) -> Result<Benchmark> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != 1 {
        return Err(CoastError::Dataset(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let mut source = None;
    let mut targets = Vec::new();
    let mut target_eval = Vec::new();
    let mut unseen = None;
    let mut target_specs = Vec::new();
    let mut source_spec = None;
    let mut unseen_spec = None;
    for md in &manifest.domains {
        let ds = manifest_to_dataset(md, &manifest, dir)?;
        match md.kind.as_str() {
            "source" => {
                source_spec = Some(md.spec.clone());
                source = Some(ds);
            }
            "target_train" => {
                target_specs.push(md.spec.clone());
                targets.push(ds);
            }
            "target_eval" => target_eval.push(ds),
            "unseen_eval" => {
                unseen_spec = Some(md.spec.clone());
                unseen = Some(ds);
            }
            other => {
                return Err(CoastError::Dataset(format!("unknown dataset kind `{other}`")));
            }
        }
    }
    Ok(Benchmark {
        source: source.ok_or_else(|| CoastError::Dataset("missing source dataset".into()))?,
        targets,
        target_eval,
        unseen_eval: unseen
            .ok_or_else(|| CoastError::Dataset("missing unseen dataset".into()))?,
        source_spec: source_spec
            .ok_or_else(|| CoastError::Dataset("missing source spec".into()))?,
        target_specs,
        unseen_spec: unseen_spec
            .ok_or_else(|| CoastError::Dataset("missing unseen spec".into()))?,
    })
}

impl DomainDataset {
    /// Stack the given samples into a `[N,3,H,W]` batch, concatenating labels
    /// when every selected sample carries one.
    pub fn stack(&self, idx: &[usize]) -> Result<(Tensor, Option<Vec<u8>>)> {
        let hw = self.h * self.w;
        let mut values = Vec::with_capacity(idx.len() * 3 * hw);
        let mut labels = Vec::with_capacity(idx.len() * hw);
        let mut all_labeled = true;
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| CoastError::Dataset(format!("sample index {i} out of range")))?;
            values.extend_from_slice(&s.image.values);
            match &s.label {
                Some(l) => labels.extend_from_slice(l),
                None => all_labeled = false,
            }
        }
        let batch = Tensor::new(vec![idx.len(), 3, self.h, self.w], values)?;
        Ok((batch, if all_labeled { Some(labels) } else { None }))
    }
}

/// Per-channel mean of a `[3,H,W]` image; the feature used by the domain-shift
/// sanity checks.
pub fn channel_means(image: &Tensor) -> [f64; 3] {
    let hw = image.shape[1] * image.shape[2];
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = image.values[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).sum::<f64>()
            / hw as f64;
    }
    out
}
