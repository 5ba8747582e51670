//! MNIST IDX loader (big-endian, magics 2051/2049).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Dataset;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Load the four standard IDX files from `dir`. Pixels are scaled to
/// `[0, 1]`, features have shape `(n, 28, 28, 1)`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((train, test))
}

fn load_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let pixels = read_images(&dir.join(images))?;
    let labels = read_labels(&dir.join(labels))?;
    let (n, rows, cols, data) = pixels;
    if labels.len() != n {
        return Err(Error::DataLoad {
            file: dir.join(images).display().to_string(),
            reason: format!("{n} images but {} labels", labels.len()),
        });
    }
    Dataset::new(
        "mnist",
        Tensor::new(vec![n, rows, cols, 1], data)?,
        labels,
        10,
    )
}

fn open(path: &Path) -> Result<(BufReader<File>, String)> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::DataLoad {
        file: name.clone(),
        reason: e.to_string(),
    })?;
    Ok((BufReader::new(file), name))
}

fn read_u32_be(r: &mut impl Read, file: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::DataLoad {
        file: file.into(),
        reason: format!("truncated header: {e}"),
    })?;
    Ok(u32::from_be_bytes(buf))
}

fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (mut r, name) = open(path)?;
    let magic = read_u32_be(&mut r, &name)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::DataLoad {
            file: name,
            reason: format!("bad magic {magic}, expected {IMAGE_MAGIC} for an IDX image file"),
        });
    }
    let n = read_u32_be(&mut r, &name)? as usize;
    let rows = read_u32_be(&mut r, &name)? as usize;
    let cols = read_u32_be(&mut r, &name)? as usize;
    let mut bytes = vec![0u8; n * rows * cols];
    r.read_exact(&mut bytes).map_err(|e| Error::DataLoad {
        file: name.clone(),
        reason: format!("truncated pixel data: {e}"),
    })?;
    let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, rows, cols, data))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let (mut r, name) = open(path)?;
    let magic = read_u32_be(&mut r, &name)?;
    if magic != LABEL_MAGIC {
        return Err(Error::DataLoad {
            file: name,
            reason: format!("bad magic {magic}, expected {LABEL_MAGIC} for an IDX label file"),
        });
    }
    let n = read_u32_be(&mut r, &name)? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(|e| Error::DataLoad {
        file: name.clone(),
        reason: format!("truncated label data: {e}"),
    })?;
    if let Some(&bad) = bytes.iter().find(|&&b| b > 9) {
        return Err(Error::DataLoad {
            file: name,
            reason: format!("label {bad} outside 0..=9"),
        });
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, magic: u32, images: &[[u8; 4]]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
    }

    fn write_idx_labels(path: &Path, magic: u32, labels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn rejects_bad_magic_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = [[0u8, 128, 255, 64], [255, 0, 0, 0]];
        write_idx_images(&dir.path().join("train-images-idx3-ubyte"), 2051, &imgs);
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), 2049, &[3, 7]);
        write_idx_images(&dir.path().join("t10k-images-idx3-ubyte"), 2051, &imgs[..1]);
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), 2049, &[1]);

        let (train, test) = load_mnist(dir.path()).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 1);
        assert_eq!(train.features().shape(), &[2, 2, 2, 1]);
        // 255 -> 1.0, 128 -> 128/255
        assert_eq!(train.features().data()[2], 1.0);
        assert!((train.features().data()[1] - 128.0 / 255.0).abs() < 1e-15);

        // Corrupt the magic and expect an error naming the file.
        write_idx_images(&dir.path().join("train-images-idx3-ubyte"), 2052, &imgs);
        let err = load_mnist(dir.path()).unwrap_err().to_string();
        assert!(err.contains("train-images-idx3-ubyte"), "{err}");
        assert!(err.contains("2051"), "{err}");
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train-images-idx3-ubyte");
        let mut f = File::create(&path).unwrap();
        f.write_all(&2051u32.to_be_bytes()).unwrap();
        f.write_all(&5u32.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 100]).unwrap(); // far fewer than 5*28*28
        drop(f);
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), 2049, &[0; 5]);
        let err = load_mnist(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
