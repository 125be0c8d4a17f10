//! Image classification datasets: IDX files and a synthetic generator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{format, param, Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[N, C, H, W]` with values in `[0, 1]` and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dimension(format!("images must be [N, C, H, W], got {:?}", images.dims())));
        }
        if images.dims()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.dims()[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample dims `[C, H, W]`.
    pub fn sample_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(param(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut dims = self.images.dims().to_vec();
        dims[0] = indices.len();
        Ok((Tensor::new(dims, data)?, labels))
    }

    /// First `n` samples and the remainder.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(param(format!("cannot split {} samples at {n}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let (a, la) = self.batch(&head)?;
        let (b, lb) = self.batch(&tail)?;
        Ok((Dataset::new(a, la, self.classes)?, Dataset::new(b, lb, self.classes)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format("truncated IDX header"),
        _ => Error::Io(e),
    })?;
    Ok(u32::from_be_bytes(b))
}

fn read_body<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    r.take(n as u64).read_to_end(&mut body)?;
    if body.len() != n {
        return Err(format(format!("IDX body has {} of {n} bytes", body.len())));
    }
    Ok(body)
}

/// Unsigned-byte image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images<R: Read>(r: &mut R) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format(format!("image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32(r)? as usize;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(format("IDX image file has a zero extent"));
    }
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format("IDX image extents overflow"))?;
    Ok((n, rows, cols, read_body(r, total)?))
}

pub fn read_idx_labels<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let magic = read_u32(r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format(format!("label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = read_u32(r)? as usize;
    read_body(r, n)
}

pub fn write_idx_images<W: Write>(w: &mut W, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || pixels.len() % per != 0 {
        return Err(param("pixel count is not a multiple of rows * cols"));
    }
    for v in [IDX_IMAGES_MAGIC, (pixels.len() / per) as u32, rows as u32, cols as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels<W: Write>(w: &mut W, labels: &[u8]) -> Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`. The class
/// count is one more than the largest label.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(&mut BufReader::new(File::open(images)?))?;
    let labels = read_idx_labels(&mut BufReader::new(File::open(labels)?))?;
    if labels.len() != n {
        return Err(format(format!("{n} images but {} labels", labels.len())));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels.into_iter().map(usize::from).collect(),
        classes,
    )
}

/// Writes a single-channel dataset as an IDX pair, quantizing pixels to bytes.
pub fn save_idx_dataset(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let d = ds.images.dims();
    if d[1] != 1 {
        return Err(param("IDX export needs single-channel images"));
    }
    if ds.classes > 256 {
        return Err(param("IDX labels hold at most 256 classes"));
    }
    let pixels: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut w = BufWriter::new(File::create(images)?);
    write_idx_images(&mut w, d[2], d[3], &pixels)?;
    w.flush()?;
    let lab: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    let mut w = BufWriter::new(File::create(labels)?);
    write_idx_labels(&mut w, &lab)?;
    w.flush()?;
    Ok(())
}

/// Gaussian class blobs rendered on a single-channel canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    /// Blobs making up each class prototype.
    pub blobs_per_class: usize,
    /// Standard deviation of per-sample blob displacement, in pixels.
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            samples: 2000,
            height: 28,
            width: 28,
            blobs_per_class: 3,
            jitter: 2.0,
            noise: 0.2,
            seed: 0,
        }
    }
}

struct Blob {
    y: f64,
    x: f64,
    radius: f64,
}

pub fn synthetic_blobs(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.samples == 0 || spec.height < 4 || spec.width < 4 || spec.blobs_per_class == 0 {
        return Err(param("synthetic dataset needs classes, samples, blobs and at least 4x4 images"));
    }
    if !(spec.jitter >= 0.0 && spec.noise >= 0.0) {
        return Err(param("jitter and noise must be non-negative"));
    }
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut proto_rng = seeded(derive_seed(spec.seed, 0));
    let prototypes: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|_| {
            (0..spec.blobs_per_class)
                .map(|_| Blob {
                    y: proto_rng.random_range(0.2 * h..0.8 * h),
                    x: proto_rng.random_range(0.2 * w..0.8 * w),
                    radius: proto_rng.random_range(1.5..3.5),
                })
                .collect()
        })
        .collect();
    let mut rng = seeded(derive_seed(spec.seed, 1));
    let offset = Normal::new(0.0, spec.jitter.max(f64::MIN_POSITIVE)).expect("finite jitter");
    let pixel = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let plane = spec.height * spec.width;
    let mut data = vec![0.0; spec.samples * plane];
    let mut labels = Vec::with_capacity(spec.samples);
    for s in 0..spec.samples {
        let label = rng.random_range(0..spec.classes);
        labels.push(label);
        let img = &mut data[s * plane..(s + 1) * plane];
        for b in &prototypes[label] {
            let cy = b.y + offset.sample(&mut rng);
            let cx = b.x + offset.sample(&mut rng);
            let amp = rng.random_range(0.6..1.0);
            let inv = 1.0 / (2.0 * b.radius * b.radius);
            for (i, px) in img.iter_mut().enumerate() {
                let dy = (i / spec.width) as f64 - cy;
                let dx = (i % spec.width) as f64 - cx;
                *px += amp * (-(dy * dy + dx * dx) * inv).exp();
            }
        }
        for px in img.iter_mut() {
            let noisy = *px + if spec.noise > 0.0 { pixel.sample(&mut rng) } else { 0.0 };
            *px = noisy.clamp(0.0, 1.0);
        }
    }
    Dataset::new(
        Tensor::new(vec![spec.samples, 1, spec.height, spec.width], data)?,
        labels,
        spec.classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let spec = SyntheticSpec {
            samples: 50,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let a = synthetic_blobs(&spec).unwrap();
        assert_eq!(a, synthetic_blobs(&spec).unwrap());
        assert_ne!(a, synthetic_blobs(&SyntheticSpec { seed: 4, ..spec }).unwrap());
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.sample_dims(), &[1, 28, 28]);
    }

    #[test]
    fn idx_round_trip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as u8).collect();
        write_idx_images(&mut File::create(&ip).unwrap(), 4, 5, &pixels).unwrap();
        write_idx_labels(&mut File::create(&lp).unwrap(), &[2, 0, 1]).unwrap();
        let ds = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(ds.images().dims(), &[3, 1, 4, 5]);
        assert_eq!(ds.labels(), &[2, 0, 1]);
        assert_eq!(ds.classes(), 3);
        let back: Vec<u8> = ds.images().data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);

        let (ip2, lp2) = (dir.path().join("i2"), dir.path().join("l2"));
        save_idx_dataset(&ds, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx_images(&mut File::create(&ip).unwrap(), 2, 2, &[0; 8]).unwrap();
        write_idx_labels(&mut File::create(&lp).unwrap(), &[0, 1, 1]).unwrap();
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Format(_))));
        assert!(matches!(load_idx_dataset(&lp, &ip), Err(Error::Format(_))));
        let mut truncated = Vec::new();
        write_idx_images(&mut truncated, 2, 2, &[0; 8]).unwrap();
        truncated.pop();
        assert!(read_idx_images(&mut truncated.as_slice()).is_err());
    }

    #[test]
    fn batch_and_split() {
        let ds = synthetic_blobs(&SyntheticSpec {
            samples: 10,
            height: 8,
            width: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (x, y) = ds.batch(&[3, 7]).unwrap();
        assert_eq!(x.dims(), &[2, 1, 8, 8]);
        assert_eq!(y, vec![ds.labels()[3], ds.labels()[7]]);
        assert_eq!(&x.data()[64..], &ds.images().data()[7 * 64..8 * 64]);
        let (a, b) = ds.split(6).unwrap();
        assert_eq!((a.len(), b.len()), (6, 4));
        assert!(ds.batch(&[10]).is_err());
    }
}
