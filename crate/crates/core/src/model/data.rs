use std::fs;
use std::path::Path;

use super::{Activation, Dataset, LossKind, Model, ModelSpec, Targets};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, scaled, DenseMatrix, Rng};
use crate::param::ParamVector;

const IDX_IMAGES: u32 = 2051;
const IDX_LABELS: u32 = 2049;

/// Output of [`make_teacher_student`].
#[derive(Debug, Clone)]
pub struct TeacherStudent {
    pub dataset: Dataset,
    /// Architecture shared by teacher and student.
    pub spec: ModelSpec,
    pub teacher: ParamVector,
}

/// Regression data labelled by a random one-hidden-layer teacher network with
/// Gaussian inputs and additive Gaussian label noise.
pub fn make_teacher_student(
    seed: u64,
    in_dim: usize,
    hidden: usize,
    n_samples: usize,
    noise_std: f64,
) -> Result<TeacherStudent> {
    if n_samples == 0 || in_dim == 0 || hidden == 0 {
        return Err(Error::Config("teacher-student sizes must be positive".into()));
    }
    let spec = ModelSpec::mlp(vec![in_dim, hidden, 1], Activation::Tanh, LossKind::Mse);
    let model = Model::new(spec.clone())?;
    let rng = Rng::new(seed);
    let mut teacher = model.init_params(&mut rng.derive("teacher"));
    // nonzero biases so the teacher is not odd-symmetric
    let mut brng = rng.derive("teacher-bias");
    for shape_offset in bias_positions(&model) {
        teacher[shape_offset] = 0.5 * brng.normal();
    }
    let mut xrng = rng.derive("inputs");
    let inputs = DenseMatrix::from_fn(n_samples, in_dim, |_, _| xrng.normal());
    let clean = model.predict(&teacher, &inputs)?;
    let mut nrng = rng.derive("noise");
    let y = DenseMatrix::from_fn(n_samples, 1, |i, _| clean[(i, 0)] + noise_std * nrng.normal());
    let dataset = Dataset::new(inputs, Targets::Values(y), "teacher_student")?;
    Ok(TeacherStudent {
        dataset,
        spec,
        teacher,
    })
}

fn bias_positions(model: &Model) -> Vec<usize> {
    let layout = model.layout();
    let mut out = Vec::new();
    for (shape, start) in layout.layers.iter().zip(layout.offsets()) {
        if shape.bias {
            let b = start + shape.n_in * shape.n_out;
            out.extend(b..b + shape.n_out);
        }
    }
    out
}

/// Two interleaving half circles with Gaussian jitter, classes 0 and 1.
pub fn two_moons(seed: u64, n_samples: usize, noise: f64) -> Result<Dataset> {
    if n_samples < 2 {
        return Err(Error::Config("two_moons needs at least 2 samples".into()));
    }
    let mut rng = Rng::new(seed);
    let n_upper = n_samples / 2;
    let n_lower = n_samples - n_upper;
    let mut rows = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    let arc = |k: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            std::f64::consts::PI * k as f64 / (n - 1) as f64
        }
    };
    for k in 0..n_upper {
        let t = arc(k, n_upper);
        rows.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for k in 0..n_lower {
        let t = arc(k, n_lower);
        rows.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    for r in &mut rows {
        for x in r.iter_mut() {
            *x += noise * rng.normal();
        }
    }
    Dataset::new(
        DenseMatrix::from_rows(&rows)?,
        Targets::Classes {
            labels,
            n_classes: 2,
        },
        "two_moons",
    )
}

/// Output of [`flat_linear_regression`].
#[derive(Debug, Clone)]
pub struct FlatRegression {
    pub dataset: Dataset,
    pub spec: ModelSpec,
    /// Interpolating solution, zero on the flat coordinates.
    pub w_star: ParamVector,
}

/// Noise-free linear regression whose loss is exactly flat along the last
/// `d_flat` coordinates: the design is `[A | 0]` with `A` of size
/// `n_samples x d_active`, and the nonzero Hessian eigenvalues are spread
/// evenly over `[lo, hi]`.
pub fn flat_linear_regression(
    seed: u64,
    n_samples: usize,
    d_active: usize,
    d_flat: usize,
    (lo, hi): (f64, f64),
) -> Result<FlatRegression> {
    if n_samples == 0 || d_active == 0 {
        return Err(Error::Config("flat regression sizes must be positive".into()));
    }
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!("invalid eigenvalue range [{lo}, {hi}]")));
    }
    let rng = Rng::new(seed);
    let k = n_samples.min(d_active);
    let u = random_orthonormal(n_samples, k, &mut rng.derive("left"))?;
    let v = random_orthonormal(d_active, k, &mut rng.derive("right"))?;
    let lambdas: Vec<f64> = (0..k)
        .map(|i| {
            if k == 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (k - 1) as f64
            }
        })
        .collect();
    let sigma: Vec<f64> = lambdas.iter().map(|l| (l * n_samples as f64).sqrt()).collect();
    let d = d_active + d_flat;
    let x = DenseMatrix::from_fn(n_samples, d, |i, j| {
        if j >= d_active {
            0.0
        } else {
            (0..k).map(|m| u[m][i] * sigma[m] * v[m][j]).sum()
        }
    });
    let mut wrng = rng.derive("solution");
    let w_star: Vec<f64> = (0..d)
        .map(|j| if j < d_active { wrng.normal() } else { 0.0 })
        .collect();
    let y = x.matvec(&w_star)?;
    let dataset = Dataset::new(
        x,
        Targets::Values(DenseMatrix::from_row_major(n_samples, 1, y)?),
        "flat_linear_regression",
    )?;
    Ok(FlatRegression {
        dataset,
        spec: ModelSpec::linear_regression(d, 1),
        w_star: ParamVector::new(w_star),
    })
}

/// `k` random orthonormal vectors in `R^n` (Gram-Schmidt, applied twice).
fn random_orthonormal(n: usize, k: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = rng.normals(n);
        for _ in 0..2 {
            for b in &basis {
                axpy(-dot(&v, b), b, &mut v);
            }
        }
        let nv = norm(&v);
        if nv < 1e-8 {
            continue;
        }
        basis.push(scaled(1.0 / nv, &v));
    }
    Ok(basis)
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn format_err(kind: &'static str, path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Loads an IDX image/label pair (MNIST layout). Pixels are scaled to
/// `[0, 1]`; `limit` keeps the first samples only.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let magic = read_u32(&img, 0).ok_or_else(|| format_err("idx", images, "truncated header"))?;
    if magic != IDX_IMAGES {
        return Err(format_err("idx", images, format!("bad magic {magic}")));
    }
    let header = |i: usize| read_u32(&img, 4 * i).ok_or_else(|| format_err("idx", images, "truncated header"));
    let (n, rows, cols) = (header(1)? as usize, header(2)? as usize, header(3)? as usize);
    let lmagic = read_u32(&lab, 0).ok_or_else(|| format_err("idx", labels, "truncated header"))?;
    if lmagic != IDX_LABELS {
        return Err(format_err("idx", labels, format!("bad magic {lmagic}")));
    }
    let ln = read_u32(&lab, 4).ok_or_else(|| format_err("idx", labels, "truncated header"))? as usize;
    if ln != n {
        return Err(format_err(
            "idx",
            labels,
            format!("{ln} labels for {n} images"),
        ));
    }
    let pixels = rows * cols;
    if img.len() != 16 + n * pixels {
        return Err(format_err(
            "idx",
            images,
            format!("expected {} bytes, found {}", 16 + n * pixels, img.len()),
        ));
    }
    if lab.len() != 8 + n {
        return Err(format_err(
            "idx",
            labels,
            format!("expected {} bytes, found {}", 8 + n, lab.len()),
        ));
    }
    let keep = limit.map_or(n, |l| l.min(n));
    let data: Vec<f64> = img[16..16 + keep * pixels].iter().map(|&p| p as f64 / 255.0).collect();
    let label_vec: Vec<usize> = lab[8..8 + keep].iter().map(|&l| l as usize).collect();
    let n_classes = label_vec.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(
        DenseMatrix::from_row_major(keep, pixels, data)?,
        Targets::Classes {
            labels: label_vec,
            n_classes,
        },
        "idx",
    )
}

/// Writes an IDX image file from rows of pixel bytes.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        if im.len() != rows * cols {
            return Err(Error::dim("idx image size", rows * cols, im.len()));
        }
        out.extend_from_slice(im);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a CSV with a header row: feature columns then one target column.
/// With `classification` the target must be a non-negative integer label.
pub fn load_csv(path: &Path, classification: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err("csv", path, e.to_string()))?;
    let width = reader
        .headers()
        .map_err(|e| format_err("csv", path, e.to_string()))?
        .len();
    if width < 2 {
        return Err(format_err("csv", path, "need at least one feature and a target column"));
    }
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err("csv", path, e.to_string()))?;
        if record.len() != width {
            return Err(format_err(
                "csv",
                path,
                format!("row {} has {} fields, expected {width}", line + 1, record.len()),
            ));
        }
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                format_err("csv", path, format!("row {}: cannot parse {field:?}", line + 1))
            })?;
            if j + 1 < width {
                features.push(value);
            } else {
                targets.push(value);
            }
        }
    }
    let n = targets.len();
    let inputs = DenseMatrix::from_row_major(n, width - 1, features)?;
    let targets = if classification {
        let labels = targets
            .iter()
            .map(|&t| {
                if t >= 0.0 && t.fract() == 0.0 {
                    Ok(t as usize)
                } else {
                    Err(format_err("csv", path, format!("invalid class label {t}")))
                }
            })
            .collect::<Result<Vec<usize>>>()?;
        let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
        Targets::Classes { labels, n_classes }
    } else {
        Targets::Values(DenseMatrix::from_row_major(n, 1, targets)?)
    };
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(inputs, targets, name)
}
