//! Synthetic shape generation, dataset assembly, and point cloud IO.
//!
//! Cloud files are ASCII, one point per line `x y z [label]`, `#` comments
//! ignored. Coordinates round-trip losslessly (written with 17 significant
//! digits). Segmentation labels are cached next to each cloud, keyed by the
//! cloud file digest and the geometry settings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::config::{derive_rng, fnv1a, RunConfig};
use crate::diffcore::checkpoint::atomic_write;
use crate::diffcore::tensor::gaussian;
use crate::error::{Error, Result};
use crate::geometry::{self, PointCloud};

/// The four synthetic shape classes. Their geometric-feature signatures are
/// deliberately distinct (curved, three-plane-direction, curved+caps, pure
/// planar) so segmentation and probing are both meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Sphere,
    Box,
    Cylinder,
    PlanePair,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Sphere,
        ShapeClass::Box,
        ShapeClass::Cylinder,
        ShapeClass::PlanePair,
    ];

    pub fn id(self) -> u32 {
        match self {
            ShapeClass::Sphere => 0,
            ShapeClass::Box => 1,
            ShapeClass::Cylinder => 2,
            ShapeClass::PlanePair => 3,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::PlanePair => "plane-pair",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticShapeSpec {
    pub class: ShapeClass,
    pub n_points: usize,
    pub jitter: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl SyntheticShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 64 {
            return Err(Error::invalid("n_points must be at least 64"));
        }
        if self.jitter < 0.0 {
            return Err(Error::invalid("jitter must be non-negative"));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::invalid("scale range must be positive and ordered"));
        }
        Ok(())
    }
}

/// Surface-sample, jitter, rotate, scale, then normalize so the farthest
/// point sits on the unit sphere. Shapes are built centered at the origin
/// and never recentered, so a noise-free sphere keeps all radii exactly 1.
pub fn generate_shape(spec: &SyntheticShapeSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = derive_rng(spec.seed, "data.shape", spec.class.id() as u64, 0);
    let mut points = match spec.class {
        ShapeClass::Sphere => sample_sphere(spec.n_points, &mut rng),
        ShapeClass::Box => sample_box(spec.n_points, &mut rng),
        ShapeClass::Cylinder => sample_cylinder(spec.n_points, &mut rng),
        ShapeClass::PlanePair => sample_plane_pair(spec.n_points, &mut rng),
    };

    if spec.jitter > 0.0 {
        for p in points.iter_mut() {
            for a in p.iter_mut() {
                *a += spec.jitter * gaussian(&mut rng);
            }
        }
    }

    let rot = random_rotation(&mut rng);
    let scale = rng.gen_range(spec.scale_range.0..=spec.scale_range.1);
    for p in points.iter_mut() {
        let r = [
            rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2],
            rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2],
            rot[2][0] * p[0] + rot[2][1] * p[1] + rot[2][2] * p[2],
        ];
        *p = [r[0] * scale, r[1] * scale, r[2] * scale];
    }

    let max_norm = points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for p in points.iter_mut() {
        for a in p.iter_mut() {
            *a /= max_norm;
        }
    }
    Ok(PointCloud::new(points))
}

fn sample_sphere(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let mut v = [gaussian(rng), gaussian(rng), gaussian(rng)];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            for a in v.iter_mut() {
                *a /= norm;
            }
            v
        })
        .collect()
}

/// Index of the cuboid face to sample, weighted by face area.
pub(crate) fn box_face_index(areas: &[f64; 6], rng: &mut impl Rng) -> usize {
    let total: f64 = areas.iter().sum();
    let mut t = rng.gen_range(0.0..total);
    for (i, &a) in areas.iter().enumerate() {
        if t < a {
            return i;
        }
        t -= a;
    }
    5
}

fn sample_box(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    // Per-cloud half extents make the cuboid anisotropic.
    let h = [
        rng.gen_range(0.5..1.0),
        rng.gen_range(0.5..1.0),
        rng.gen_range(0.5..1.0),
    ];
    let areas = [
        4.0 * h[1] * h[2],
        4.0 * h[1] * h[2],
        4.0 * h[0] * h[2],
        4.0 * h[0] * h[2],
        4.0 * h[0] * h[1],
        4.0 * h[0] * h[1],
    ];
    (0..n)
        .map(|_| {
            let face = box_face_index(&areas, rng);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [0.0f64; 3];
            p[axis] = sign * h[axis];
            let others = [(axis + 1) % 3, (axis + 2) % 3];
            for &o in &others {
                p[o] = rng.gen_range(-h[o]..h[o]);
            }
            p
        })
        .collect()
}

fn sample_cylinder(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let radius = rng.gen_range(0.4..0.9);
    let half_h = 1.0;
    let lateral = std::f64::consts::TAU * radius * 2.0 * half_h;
    let cap = std::f64::consts::PI * radius * radius;
    let total = lateral + 2.0 * cap;
    (0..n)
        .map(|_| {
            let t = rng.gen_range(0.0..total);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            if t < lateral {
                let z = rng.gen_range(-half_h..half_h);
                [radius * angle.cos(), radius * angle.sin(), z]
            } else {
                let z = if t < lateral + cap { half_h } else { -half_h };
                let r = radius * rng.gen::<f64>().sqrt();
                [r * angle.cos(), r * angle.sin(), z]
            }
        })
        .collect()
}

fn sample_plane_pair(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let gap = rng.gen_range(0.6..1.2);
    (0..n)
        .map(|_| {
            let z = if rng.gen::<bool>() { gap / 2.0 } else { -gap / 2.0 };
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), z]
        })
        .collect()
}

/// Uniform random rotation from a quaternion with Gaussian components.
fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q = [gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng)];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let [w, x, y, z] = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

// ---- file IO ----

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::new();
    for (i, p) in cloud.points.iter().enumerate() {
        write!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).unwrap();
        if let Some(labels) = &cloud.labels {
            write!(out, " {}", labels[i]).unwrap();
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut has_labels: Option<bool> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(err(format!("expected 3 or 4 fields, got {}", fields.len())));
        }
        let mut coords = [0.0f64; 3];
        for (a, f) in coords.iter_mut().zip(&fields) {
            *a = f
                .parse()
                .map_err(|_| err(format!("bad coordinate `{f}`")))?;
        }
        let with_label = fields.len() == 4;
        match has_labels {
            None => has_labels = Some(with_label),
            Some(h) if h != with_label => {
                return Err(err("inconsistent label column".into()));
            }
            _ => {}
        }
        if with_label {
            let l: u32 = fields[3]
                .parse()
                .map_err(|_| err(format!("bad label `{}`", fields[3])))?;
            labels.push(l);
        }
        points.push(coords);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "file contains no points".into(),
        });
    }
    Ok(if has_labels == Some(true) {
        PointCloud::with_labels(points, labels)
    } else {
        PointCloud::new(points)
    })
}

// ---- dataset ----

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: u32,
    pub cache_path: PathBuf,
}

/// Dataset on disk plus deterministic train/val split indices.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl DatasetManifest {
    /// Line-oriented text form: `path class_id cache_path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(
                out,
                "{} {} {}",
                e.path.display(),
                e.class,
                e.cache_path.display()
            )
            .unwrap();
        }
        atomic_write(path, out.as_bytes())
    }
}

/// Generate (or reuse) the synthetic dataset under `dir`, returning the
/// manifest with a stratified deterministic split. Cloud files that already
/// exist are kept; generation is deterministic per (seed, class, index).
pub fn build_dataset(config: &RunConfig, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let per_class = config.clouds_per_class;
    let specs: Vec<(ShapeClass, usize)> = ShapeClass::ALL[..config.classes]
        .iter()
        .flat_map(|&c| (0..per_class).map(move |i| (c, i)))
        .collect();

    let entries: Vec<ManifestEntry> = specs
        .par_iter()
        .map(|&(class, index)| -> Result<ManifestEntry> {
            let stem = format!("cloud_{}_{index:04}", class.name());
            let path = dir.join(format!("{stem}.pts"));
            let cache_path = dir.join(format!("{stem}.seg"));
            if !path.exists() {
                let spec = SyntheticShapeSpec {
                    class,
                    n_points: config.points,
                    jitter: config.jitter,
                    scale_range: (0.8, 1.2),
                    seed: config
                        .seed
                        .wrapping_mul(1_000_003)
                        .wrapping_add(class.id() as u64 * 100_000 + index as u64),
                };
                let cloud = generate_shape(&spec)?;
                save_cloud(&path, &cloud)?;
            }
            Ok(ManifestEntry {
                path,
                class: class.id(),
                cache_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // Stratified split: per class, shuffle indices and hold out the tail.
    let mut train = Vec::new();
    let mut val = Vec::new();
    let val_per_class = config.val_per_class();
    for c in 0..config.classes {
        let mut idx: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.class == c as u32)
            .map(|(i, _)| i)
            .collect();
        let mut rng = derive_rng(config.seed, "data.split", c as u64, 0);
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let (v, t) = idx.split_at(val_per_class);
        val.extend_from_slice(v);
        train.extend_from_slice(t);
    }
    train.sort_unstable();
    val.sort_unstable();

    let manifest = DatasetManifest { entries, train, val };
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Load a cloud along with its cached segmentation labels, computing and
/// caching them on first touch. The cache is keyed by the cloud file digest
/// and the geometry settings; a mismatch recomputes.
pub fn load_cloud_with_segmentation(entry: &ManifestEntry, config: &RunConfig) -> Result<PointCloud> {
    let cloud = load_cloud(&entry.path)?;
    let file_digest = fnv1a(&fs::read(&entry.path)?);
    let seg_digest = config.segmentation_digest();
    let header = format!("# cache file={file_digest:016x} settings={seg_digest:016x}");

    if entry.cache_path.exists() {
        let text = fs::read_to_string(&entry.cache_path)?;
        if text.lines().next() == Some(header.as_str()) {
            let cached = load_cloud(&entry.cache_path)?;
            if cached.len() == cloud.len() && cached.labels.is_some() {
                return Ok(cached);
            }
        }
    }

    let graph = geometry::build_knn_graph(&cloud, config.knn_k.min(cloud.len() - 1))?;
    let features = geometry::compute_geometric_features(&cloud, &graph);
    let seg = geometry::potts_segmentation(&features, &graph, config.mu, config.min_segments);
    let labeled = PointCloud::with_labels(cloud.points.clone(), seg.labels);

    let mut out = String::new();
    writeln!(out, "{header}").unwrap();
    for (i, p) in labeled.points.iter().enumerate() {
        writeln!(
            out,
            "{:.16e} {:.16e} {:.16e} {}",
            p[0], p[1], p[2],
            labeled.labels.as_ref().unwrap()[i]
        )
        .unwrap();
    }
    atomic_write(&entry.cache_path, out.as_bytes())?;
    Ok(labeled)
}
