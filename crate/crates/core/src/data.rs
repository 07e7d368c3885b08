//! MNIST-style IDX files: parsing, normalization, subsampling and summary
//! statistics.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Rng, Vector};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub n: usize,
    /// `1/n Σ ‖x_i‖₂`.
    pub mean_x_l2: f64,
    /// `1/n Σ ‖x_i‖₂²`.
    pub mean_x_l2_sq: f64,
    /// `max_i ‖x_i‖_∞`.
    pub r_x: f64,
    pub d: usize,
    pub k: usize,
}

/// Samples stored one per row of `xs`, pixel values in [0, 1].
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub xs: Matrix<T>,
    pub ys: Vec<usize>,
    pub stats: DatasetStats,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(xs: Matrix<T>, ys: Vec<usize>, k: usize) -> Result<Self> {
        if xs.rows() != ys.len() {
            return Err(Error::shape("Dataset labels", xs.rows(), ys.len()));
        }
        if let Some(&bad) = ys.iter().find(|&&y| y >= k) {
            return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
        }
        let stats = stats_of(&xs, k);
        Ok(Dataset { xs, ys, stats })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn x(&self, i: usize) -> Vector<T> {
        self.xs.row_vector(i)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let xs = self.xs.select_rows(idx);
        let ys = idx.iter().map(|&i| self.ys[i]).collect();
        let stats = stats_of(&xs, self.stats.k);
        Dataset { xs, ys, stats }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.stats.k];
        for &y in &self.ys {
            h[y] += 1;
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            xs: self.xs.map_into(|v| U::lit(v.as_f64())),
            ys: self.ys.clone(),
            stats: self.stats,
        }
    }
}

fn stats_of<T: Scalar>(xs: &Matrix<T>, k: usize) -> DatasetStats {
    let n = xs.rows();
    let (mut sum_l2, mut sum_sq, mut r_x) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let sq: f64 = xs.row(i).iter().map(|v| v.as_f64() * v.as_f64()).sum();
        sum_l2 += sq.sqrt();
        sum_sq += sq;
        r_x = xs.row(i).iter().fold(r_x, |m, v| m.max(v.as_f64().abs()));
    }
    let nf = n.max(1) as f64;
    DatasetStats {
        n,
        mean_x_l2: sum_l2 / nf,
        mean_x_l2_sq: sum_sq / nf,
        r_x,
        d: xs.cols(),
        k,
    }
}

pub fn compute_stats<T: Scalar>(ds: &Dataset<T>) -> DatasetStats {
    stats_of(&ds.xs, ds.stats.k)
}

/// Reads a file, transparently gunzipping when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, 0, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, at as u64, "truncated header"))
}

/// Parses an IDX image file into `(count, rows·cols, raw bytes)`.
pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("expected image magic {IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated: header promises {need} pixel bytes, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::format(path, (16 + need) as u64, "trailing bytes after images"));
    }
    Ok((count, rows * cols, body))
}

pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("expected label magic {LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(
            path,
            (8 + body.len().min(count)) as u64,
            format!("header promises {count} labels, found {}", body.len()),
        ));
    }
    if let Some(pos) = body.iter().position(|&b| b as usize >= NUM_CLASSES) {
        return Err(Error::format(path, (8 + pos) as u64, format!("label {} out of range", body[pos])));
    }
    Ok(body)
}

/// Loads an image/label IDX pair (raw or gzip), scaling pixels by 1/255.
pub fn load_idx<T: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img_bytes = read_maybe_gz(ip)?;
    let lab_bytes = read_maybe_gz(lp)?;
    let (count, dim, pixels) = parse_idx_images(&img_bytes, ip)?;
    let labels = parse_idx_labels(&lab_bytes, lp)?;
    if labels.len() != count {
        return Err(Error::format(
            lp,
            4,
            format!("{} labels for {count} images in {ip:?}", labels.len()),
        ));
    }
    let scale = T::lit(255.0);
    let data = pixels.iter().map(|&b| T::lit(b as f64) / scale).collect();
    let xs = Matrix::from_vec(count, dim, data)?;
    Dataset::new(xs, labels.iter().map(|&b| b as usize).collect(), NUM_CLASSES)
}

/// Serializes a dataset back to raw IDX bytes `(images, labels)`, assuming
/// square images. Pixels are rounded from `x·255`.
pub fn to_idx_bytes<T: Scalar>(ds: &Dataset<T>) -> (Vec<u8>, Vec<u8>) {
    let n = ds.len();
    let d = ds.xs.cols();
    let side = (d as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == d { (side, side) } else { (1, d) };
    let mut img = Vec::with_capacity(16 + n * d);
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        ds.xs
            .as_slice()
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.ys.iter().map(|&y| y as u8));
    (img, lab)
}

/// Uniform subset without replacement: the first `n_keep` slots of a
/// Fisher–Yates pass over the indices.
pub fn subsample<T: Scalar>(ds: &Dataset<T>, n_keep: usize, rng: &mut Rng) -> Result<Dataset<T>> {
    let n = ds.len();
    if n_keep > n {
        return Err(Error::Domain(format!("cannot keep {n_keep} of {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n_keep {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(n_keep);
    Ok(ds.select(&idx))
}

/// Standard file names inside an MNIST directory; `.gz` variants are
/// preferred when present.
pub fn mnist_paths(dir: &Path, train: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    let pick = |stem: String| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    (
        pick(format!("{prefix}-images-idx3-ubyte")),
        pick(format!("{prefix}-labels-idx1-ubyte")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IMAGES_MAGIC, 2, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 254]);
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        (img, lab)
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture();
        let ip = write(dir.path(), "img", &img);
        let lp = write(dir.path(), "lab", &lab);
        let ds = load_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.ys, vec![7, 3]);
        let expect: Vec<f64> = [0u8, 255, 51, 102, 1, 2, 3, 254].iter().map(|&b| b as f64 / 255.0).collect();
        assert_eq!(ds.xs.as_slice(), expect.as_slice());
        assert_eq!(ds.stats.r_x, 1.0);
        assert_eq!(ds.stats.d, 4);
    }

    #[test]
    fn gzip_is_sniffed() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture();
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&img).unwrap();
        let ip = write(dir.path(), "img.bin", &enc.finish().unwrap());
        let lp = write(dir.path(), "lab", &lab);
        assert_eq!(load_idx::<f64>(&ip, &lp).unwrap().ys, vec![7, 3]);
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture();
        let ip = write(dir.path(), "img", &img);
        // An image file passed as labels.
        let err = load_idx::<f64>(&ip, &ip).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        let short = write(dir.path(), "short", &img[..img.len() - 1]);
        let lp = write(dir.path(), "lab", &lab);
        assert!(matches!(load_idx::<f64>(&short, &lp), Err(Error::Format { .. })));
        let mut lab3 = lab.clone();
        lab3[7] = 3;
        lab3.push(1);
        let lp3 = write(dir.path(), "lab3", &lab3);
        assert!(matches!(load_idx::<f64>(&ip, &lp3), Err(Error::Format { .. })));
        assert!(matches!(load_idx::<f64>(dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture();
        let ds = load_idx::<f64>(write(dir.path(), "i", &img), write(dir.path(), "l", &lab)).unwrap();
        let (img2, lab2) = to_idx_bytes(&ds);
        assert_eq!((img2.clone(), lab2.clone()), (img, lab));
        let back = load_idx::<f64>(write(dir.path(), "i2", &img2), write(dir.path(), "l2", &lab2)).unwrap();
        assert_eq!(back.xs, ds.xs);
    }

    #[test]
    fn stats_examples() {
        let zeros = Dataset::new(Matrix::<f64>::zeros(3, 5), vec![0, 1, 2], 10).unwrap();
        let s = zeros.stats;
        assert_eq!((s.mean_x_l2, s.mean_x_l2_sq, s.r_x, s.n, s.d, s.k), (0.0, 0.0, 0.0, 3, 5, 10));
        let mut one = Matrix::<f64>::zeros(1, 5);
        one[(0, 2)] = 1.0;
        let s = Dataset::new(one, vec![4], 10).unwrap().stats;
        assert_eq!((s.mean_x_l2, s.mean_x_l2_sq), (1.0, 1.0));
    }

    #[test]
    fn subsample_rules() {
        let xs = Matrix::from_fn(50, 2, |i, j| (i * 2 + j) as f64 / 100.0);
        let ys = (0..50).map(|i| i % 10).collect();
        let ds = Dataset::new(xs, ys, 10).unwrap();
        let a = subsample(&ds, 20, &mut Rng::new(3)).unwrap();
        let b = subsample(&ds, 20, &mut Rng::new(3)).unwrap();
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.ys, b.ys);
        let all = subsample(&ds, 50, &mut Rng::new(1)).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..50).map(|i| all.xs.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        let mut orig: Vec<Vec<u64>> = (0..50).map(|i| ds.xs.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        orig.sort();
        assert_eq!(rows, orig);
        assert!(subsample(&ds, 51, &mut Rng::new(1)).is_err());
    }
}
