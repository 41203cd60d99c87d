//! Dataset construction: IDX ingestion, the colored-digit correlation-shift
//! generator, a Gaussian spurious-feature generator, and deterministic
//! batching.
//!
//! Everything here is pure given (bytes, seed): generation draws all
//! randomness from one seeded ChaCha20 stream in sample-index order, so
//! environments are bit-identical across runs and platforms. Inputs are
//! produced directly in their training representation — flat f64 rows, image
//! data scaled to [0,1] — and labels are ±1.
//!
//! There is no network access at this level. For setups without the real
//! digit files, [`write_glyph_mnist`] synthesizes a stand-in corpus of
//! rendered digit glyphs (jittered stencil fonts) as genuine IDX files,
//! which then flow through the same parser and generators as downloaded
//! data would.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("idx: bad magic 0x{got:08x}, expected 0x00000801 (labels) or 0x00000803 (images)")]
    Magic { got: u32 },
    #[error("idx: payload holds {got} bytes, header implies {expected}")]
    Truncated { expected: usize, got: usize },
    #[error("idx: {0}")]
    Format(String),
    #[error("invalid parameter: {0}")]
    Domain(String),
    #[error("batch size {batch} exceeds dataset size {n}")]
    BatchTooLarge { batch: usize, n: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── Environment datasets ────────────────────────────────────────────────

/// One environment's worth of samples: flat inputs, ±1 labels, and the
/// generation parameters that produced them.
#[derive(Debug, Clone)]
pub struct EnvironmentDataset<E: Scalar> {
    pub env_id: String,
    /// [N × feature_dim] rows.
    pub xs: Array2<E>,
    /// ±1 labels, one per row.
    pub ys: Vec<i8>,
    /// Source digit per sample, when the generator had one.
    pub digit_labels: Option<Vec<u8>>,
    pub env_params: BTreeMap<String, f64>,
    /// "train" / "val" / "test".
    pub split: String,
}

impl<E: Scalar> EnvironmentDataset<E> {
    pub fn n(&self) -> usize {
        self.xs.nrows()
    }

    /// Gather the given rows into a contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> (Array2<E>, Vec<i8>) {
        let dim = self.xs.ncols();
        let mut xs = Array2::zeros((idx.len(), dim));
        let mut ys = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            xs.row_mut(r).assign(&self.xs.row(i));
            ys.push(self.ys[i]);
        }
        (xs, ys)
    }

    pub fn manifest(&self, seed: u64) -> DatasetManifest {
        let mut h = Fnv1a::new();
        h.update(self.env_id.as_bytes());
        for v in self.xs.iter() {
            h.update(&Scalar::to_f64(*v).to_bits().to_le_bytes());
        }
        for &y in &self.ys {
            h.update(&[y as u8]);
        }
        DatasetManifest {
            env_id: self.env_id.clone(),
            n: self.n(),
            env_params: self.env_params.clone(),
            seed,
            content_hash: format!("{:016x}", h.finish()),
        }
    }

    /// Re-express the inputs in another precision (labels are exact).
    pub fn to_precision<F: Scalar>(&self) -> EnvironmentDataset<F> {
        EnvironmentDataset {
            env_id: self.env_id.clone(),
            xs: self.xs.mapv(|v| F::from_f64(v.to_f64())),
            ys: self.ys.clone(),
            digit_labels: self.digit_labels.clone(),
            env_params: self.env_params.clone(),
            split: self.split.clone(),
        }
    }
}

/// JSON manifest describing one generated environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env_id: String,
    pub n: usize,
    pub env_params: BTreeMap<String, f64>,
    pub seed: u64,
    pub content_hash: String,
}

/// FNV-1a 64-bit, used for content hashes in manifests.
pub(crate) struct Fnv1a(pub(crate) u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Fnv1a(0xcbf29ce484222325)
    }
    pub(crate) fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

// ── IDX format ──────────────────────────────────────────────────────────

const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// A parsed IDX payload: 1-d uint8 labels or 3-d uint8 images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxArray {
    Labels(Vec<u8>),
    Images(Array3<u8>),
}

/// Parse a big-endian IDX buffer: 4-byte magic, one 4-byte size per
/// dimension, then the raw bytes, whose count must match exactly.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    let word = |off: usize| -> Result<u32, DataError> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| DataError::Format("header shorter than declared".into()))
    };
    let magic = word(0)?;
    match magic {
        IDX_MAGIC_LABELS => {
            let n = word(4)? as usize;
            let payload = &bytes[8..];
            if payload.len() != n {
                return Err(DataError::Truncated {
                    expected: n,
                    got: payload.len(),
                });
            }
            Ok(IdxArray::Labels(payload.to_vec()))
        }
        IDX_MAGIC_IMAGES => {
            let n = word(4)? as usize;
            let h = word(8)? as usize;
            let w = word(12)? as usize;
            let payload = &bytes[16..];
            if payload.len() != n * h * w {
                return Err(DataError::Truncated {
                    expected: n * h * w,
                    got: payload.len(),
                });
            }
            let arr = Array3::from_shape_vec((n, h, w), payload.to_vec())
                .expect("length checked above");
            Ok(IdxArray::Images(arr))
        }
        got => Err(DataError::Magic { got }),
    }
}

/// Serialize images to IDX bytes (inverse of [`parse_idx`]).
pub fn idx_image_bytes(images: &Array3<u8>) -> Vec<u8> {
    let (n, h, w) = images.dim();
    let mut out = Vec::with_capacity(16 + n * h * w);
    out.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    out.extend(images.iter().copied());
    out
}

/// Serialize labels to IDX bytes (inverse of [`parse_idx`]).
pub fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Read a file, transparently gunzipping when the gzip magic is present.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| DataError::Format(format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// One split of the digit corpus with its invariants enforced.
#[derive(Debug, Clone)]
pub struct RawMnist {
    pub images: Array3<u8>,
    pub labels: Vec<u8>,
}

impl RawMnist {
    pub fn new(images: Array3<u8>, labels: Vec<u8>) -> Result<Self, DataError> {
        if images.dim().0 != labels.len() {
            return Err(DataError::Format(format!(
                "{} images vs {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(DataError::Format(format!("label {bad} outside 0..=9")));
        }
        Ok(RawMnist { images, labels })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Load an images/labels file pair (optionally .gz).
    pub fn from_files(images_path: &Path, labels_path: &Path) -> Result<Self, DataError> {
        let images = match parse_idx(&read_maybe_gz(images_path)?)? {
            IdxArray::Images(a) => a,
            IdxArray::Labels(_) => {
                return Err(DataError::Format(format!(
                    "{} holds labels, expected images",
                    images_path.display()
                )))
            }
        };
        let labels = match parse_idx(&read_maybe_gz(labels_path)?)? {
            IdxArray::Labels(l) => l,
            IdxArray::Images(_) => {
                return Err(DataError::Format(format!(
                    "{} holds images, expected labels",
                    labels_path.display()
                )))
            }
        };
        RawMnist::new(images, labels)
    }

    /// Load the standard four-file layout (train/t10k), accepting .gz
    /// variants of each file.
    pub fn train_test_from_dir(dir: &Path) -> Result<(RawMnist, RawMnist), DataError> {
        let pick = |stem: &str| -> Result<std::path::PathBuf, DataError> {
            let plain = dir.join(stem);
            if plain.exists() {
                return Ok(plain);
            }
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() {
                return Ok(gz);
            }
            Err(DataError::Format(format!(
                "missing {stem}[.gz] under {}",
                dir.display()
            )))
        };
        let train = RawMnist::from_files(
            &pick("train-images-idx3-ubyte")?,
            &pick("train-labels-idx1-ubyte")?,
        )?;
        let test = RawMnist::from_files(
            &pick("t10k-images-idx3-ubyte")?,
            &pick("t10k-labels-idx1-ubyte")?,
        )?;
        Ok((train, test))
    }
}

// ── Glyph substrate ─────────────────────────────────────────────────────

/// 7×5 stencils for the ten digits, row-major, '1' = stroke.
const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// Render one 28×28 digit image: the 7×5 stencil upscaled ×3 to 21×15,
/// placed with per-sample jitter and intensity variation.
fn render_glyph(digit: u8, rng: &mut ChaCha20Rng) -> [[u8; 28]; 28] {
    let mut img = [[0u8; 28]; 28];
    let dx = rng.gen_range(-3i32..=3);
    let dy = rng.gen_range(-2i32..=2);
    let base: i32 = rng.gen_range(170..=250);
    let glyph = &GLYPHS[digit as usize];
    for (gr, row) in glyph.iter().enumerate() {
        for (gc, ch) in row.bytes().enumerate() {
            if ch != b'1' {
                continue;
            }
            for sr in 0..3i32 {
                for sc in 0..3i32 {
                    let r = 3 + gr as i32 * 3 + sr + dy;
                    let c = 6 + gc as i32 * 3 + sc + dx;
                    if (0..28).contains(&r) && (0..28).contains(&c) {
                        let wobble: i32 = rng.gen_range(-20..=5);
                        img[r as usize][c as usize] = (base + wobble).clamp(0, 255) as u8;
                    }
                }
            }
        }
    }
    img
}

/// Generate a deterministic stand-in digit corpus in memory.
pub fn glyph_mnist(n: usize, seed: u64) -> RawMnist {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Array3::<u8>::zeros((n, 28, 28));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit: u8 = rng.gen_range(0..10);
        let img = render_glyph(digit, &mut rng);
        for r in 0..28 {
            for c in 0..28 {
                images[[i, r, c]] = img[r][c];
            }
        }
        labels.push(digit);
    }
    RawMnist::new(images, labels).expect("construction satisfies invariants")
}

/// Write a glyph corpus to `dir` in the standard four-file IDX layout, so it
/// can be consumed by the exact same loading path as a downloaded corpus.
pub fn write_glyph_mnist(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let train = glyph_mnist(n_train, seed);
    let test = glyph_mnist(n_test, seed.wrapping_add(1));
    std::fs::write(
        dir.join("train-images-idx3-ubyte"),
        idx_image_bytes(&train.images),
    )?;
    std::fs::write(
        dir.join("train-labels-idx1-ubyte"),
        idx_label_bytes(&train.labels),
    )?;
    std::fs::write(
        dir.join("t10k-images-idx3-ubyte"),
        idx_image_bytes(&test.images),
    )?;
    std::fs::write(
        dir.join("t10k-labels-idx1-ubyte"),
        idx_label_bytes(&test.labels),
    )?;
    Ok(())
}

// ── Colored-digit correlation shift ─────────────────────────────────────

/// Build one environment per color-flip probability:
///
/// 1. binary label ỹ = +1 if digit < 5, else −1;
/// 2. observed label y = ỹ, sign-flipped with probability `label_noise`;
/// 3. color bit c = y, sign-flipped with probability p_e;
/// 4. the 2×28×28 output puts the [0,1]-scaled pixels in channel 0 when
///    c = +1, channel 1 when c = −1; the other channel is zero.
///
/// Samples are assigned to environments round-robin by index, and all coin
/// flips come from one seeded stream in index order, so the construction is
/// reproducible byte-for-byte.
pub fn make_cmnist(
    raw: &RawMnist,
    color_flip_probs: &[f64],
    label_noise: f64,
    seed: u64,
) -> Result<Vec<EnvironmentDataset<f64>>, DataError> {
    if color_flip_probs.is_empty() {
        return Err(DataError::Domain("need at least one environment".into()));
    }
    if let Some(&p) = color_flip_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(DataError::Domain(format!(
            "color flip probability {p} outside [0,1]"
        )));
    }
    if !(0.0..0.5).contains(&label_noise) {
        return Err(DataError::Domain(format!(
            "label noise {label_noise} outside [0, 0.5)"
        )));
    }
    let k = color_flip_probs.len();
    let n = raw.n();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    struct Draft {
        xs_rows: Vec<[f64; 2 * 28 * 28]>,
        ys: Vec<i8>,
        digits: Vec<u8>,
    }
    let mut drafts: Vec<Draft> = (0..k)
        .map(|_| Draft {
            xs_rows: Vec::with_capacity(n / k + 1),
            ys: Vec::with_capacity(n / k + 1),
            digits: Vec::with_capacity(n / k + 1),
        })
        .collect();

    for i in 0..n {
        let env = i % k;
        let digit = raw.labels[i];
        let clean: i8 = if digit < 5 { 1 } else { -1 };
        let y = if rng.gen_bool(label_noise) { -clean } else { clean };
        let color = if rng.gen_bool(color_flip_probs[env]) {
            -y
        } else {
            y
        };
        let channel = usize::from(color == -1);
        let mut row = [0.0f64; 2 * 28 * 28];
        for r in 0..28 {
            for c in 0..28 {
                row[channel * 784 + r * 28 + c] = f64::from(raw.images[[i, r, c]]) / 255.0;
            }
        }
        let d = &mut drafts[env];
        d.xs_rows.push(row);
        d.ys.push(y);
        d.digits.push(digit);
    }

    Ok(drafts
        .into_iter()
        .enumerate()
        .map(|(e, d)| {
            let rows = d.xs_rows.len();
            let mut xs = Array2::zeros((rows, 2 * 28 * 28));
            for (r, row) in d.xs_rows.iter().enumerate() {
                xs.row_mut(r).assign(&Array1::from_iter(row.iter().copied()));
            }
            let mut env_params = BTreeMap::new();
            env_params.insert("color_flip_prob".into(), color_flip_probs[e]);
            env_params.insert("label_noise".into(), label_noise);
            EnvironmentDataset {
                env_id: format!("cmnist_flip{:.2}", color_flip_probs[e]),
                xs,
                ys: d.ys,
                digit_labels: Some(d.digits),
                env_params,
                split: "train".into(),
            }
        })
        .collect())
}

// ── Gaussian spurious-feature shift ─────────────────────────────────────

/// One environment per entry of `spu_corrs`: labels are uniform ±1, the
/// invariant block is y·μ_inv + N(0, I) with ‖μ_inv‖ = `inv_margin` fixed
/// across environments, and the spurious block is s·μ_spu + N(0, I) where
/// s = y with probability (1+corr)/2 and −y otherwise. The spurious mean is
/// twice as long as the invariant one (‖μ_spu‖ = 2·inv_margin), so a
/// margin-greedy fit prefers the feature that will betray it under shift.
pub fn make_synthetic_spurious(
    n_per_env: usize,
    d_inv: usize,
    d_spu: usize,
    inv_margin: f64,
    spu_corrs: &[f64],
    seed: u64,
) -> Result<Vec<EnvironmentDataset<f64>>, DataError> {
    if d_inv == 0 {
        return Err(DataError::Domain("need at least one invariant feature".into()));
    }
    if let Some(&c) = spu_corrs.iter().find(|c| !(-1.0..=1.0).contains(*c)) {
        return Err(DataError::Domain(format!(
            "spurious correlation {c} outside [-1,1]"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha20Rng| -> f64 {
        // Box–Muller; the log argument stays strictly positive
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos()
    };
    let mu_inv = inv_margin / (d_inv as f64).sqrt();
    let mu_spu = if d_spu > 0 {
        2.0 * inv_margin / (d_spu as f64).sqrt()
    } else {
        0.0
    };
    let dim = d_inv + d_spu;
    let mut out = Vec::with_capacity(spu_corrs.len());
    for &corr in spu_corrs {
        let p_align = (1.0 + corr) / 2.0;
        let mut xs = Array2::zeros((n_per_env, dim));
        let mut ys = Vec::with_capacity(n_per_env);
        for i in 0..n_per_env {
            let y: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
            let s: i8 = if rng.gen_bool(p_align) { y } else { -y };
            for j in 0..d_inv {
                xs[[i, j]] = f64::from(y) * mu_inv + normal(&mut rng);
            }
            for j in 0..d_spu {
                xs[[i, d_inv + j]] = f64::from(s) * mu_spu + normal(&mut rng);
            }
            ys.push(y);
        }
        let mut env_params = BTreeMap::new();
        env_params.insert("spu_corr".into(), corr);
        env_params.insert("inv_margin".into(), inv_margin);
        out.push(EnvironmentDataset {
            env_id: format!("synth_corr{corr:+.2}"),
            xs,
            ys,
            digit_labels: None,
            env_params,
            split: "train".into(),
        });
    }
    Ok(out)
}

// ── Deterministic batching ──────────────────────────────────────────────

/// Seeded epoch-shuffled index batches: every epoch is a fresh Fisher–Yates
/// permutation from a seed derived as `seed + epoch·odd-constant`, the final
/// short batch is kept, and the full sequence is a pure function of
/// (n, batch_size, seed).
#[derive(Debug, Clone)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Domain("batch size must be positive".into()));
        }
        if batch_size > n {
            return Err(DataError::BatchTooLarge { batch: batch_size, n });
        }
        let mut b = Batcher {
            n,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha20Rng::seed_from_u64(
            self.seed
                .wrapping_add(self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        self.order = (0..self.n).collect();
        for i in (1..self.n).rev() {
            let j = rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    /// Indices of the next batch; rolls into a freshly shuffled epoch when
    /// the current one is exhausted.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}
