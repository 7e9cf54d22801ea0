//! MVDS dataset files.
//!
//! ```text
//! header:  "MVDS"  u32 version  u32 num_classes  u32 channels  u32 height  u32 width  u64 num_images
//! record:  u32 class_id  f32 pixels[channels·height·width]     (row-major, C×H×W)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MVDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub num_classes: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

impl DatasetHeader {
    pub fn pixels_per_image(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub class_id: u32,
    pub pixels: Vec<f32>,
}

/// An in-memory MVDS dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, samples: Vec<SampleRecord>) -> Result<Self> {
        let ds = Dataset { header, samples };
        ds.validate().map_err(Error::Contract)?;
        Ok(ds)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let h = &self.header;
        if h.num_classes == 0 || h.channels == 0 || h.height == 0 || h.width == 0 {
            return Err(format!("dataset dimensions must be positive: {h:?}"));
        }
        let ppi = h.pixels_per_image();
        for (i, s) in self.samples.iter().enumerate() {
            if s.class_id >= h.num_classes {
                return Err(format!("image {i} has class {} ≥ {}", s.class_id, h.num_classes));
            }
            if s.pixels.len() != ppi {
                return Err(format!("image {i} has {} pixels, expected {ppi}", s.pixels.len()));
            }
            if s.pixels.iter().any(|p| !p.is_finite()) {
                return Err(format!("image {i} has non-finite pixels"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes as usize
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Image `i` as an f64 `C×H×W` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let h = &self.header;
        Tensor::new(
            vec![h.channels as usize, h.height as usize, h.width as usize],
            self.samples[i].pixels.iter().map(|&p| f64::from(p)).collect(),
        )
        .expect("validated on construction")
    }

    /// Image indices grouped by class, in file order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.class_id as usize].push(i);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.samples.len() * (4 + 4 * h.pixels_per_image()));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION, h.num_classes, h.channels, h.height, h.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.class_id.to_le_bytes());
            for p in &s.pixels {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(err("file shorter than the MVDS header".into()));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(err(format!("bad magic {:?}", &bytes[..4])));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let header = DatasetHeader {
            num_classes: u32_at(8),
            channels: u32_at(12),
            height: u32_at(16),
            width: u32_at(20),
        };
        let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        let ppi = header.pixels_per_image();
        let record = 4 + 4 * ppi;
        let expected = count
            .checked_mul(record)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| err("image count overflows".into()))?;
        if bytes.len() != expected {
            return Err(err(format!(
                "expected {expected} bytes for {count} images, found {}",
                bytes.len()
            )));
        }
        let samples = bytes[HEADER_LEN..]
            .chunks_exact(record)
            .map(|rec| SampleRecord {
                class_id: u32::from_le_bytes(rec[..4].try_into().unwrap()),
                pixels: rec[4..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            })
            .collect();
        let ds = Dataset { header, samples };
        ds.validate().map_err(err)?;
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> DatasetHeader {
        DatasetHeader {
            num_classes: 3,
            channels: 2,
            height: 2,
            width: 3,
        }
    }

    proptest! {
        #[test]
        fn write_read_write_is_identical(
            records in prop::collection::vec((0u32..3, prop::collection::vec(-1e3f32..1e3, 12)), 0..10)
        ) {
            let samples = records
                .into_iter()
                .map(|(class_id, pixels)| SampleRecord { class_id, pixels })
                .collect();
            let ds = Dataset::new(header(), samples).unwrap();
            let bytes = ds.to_bytes();
            let back = Dataset::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let ds = Dataset::new(header(), vec![]).unwrap();
        let b = ds.to_bytes();
        assert_eq!(b.len(), 32);
        assert_eq!(&b[..4], b"MVDS");
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        assert_eq!(&b[24..32], &0u64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Path::new("x.mvds");
        assert!(Dataset::from_bytes(b"MVDS", p).is_err());
        let mut b = Dataset::new(header(), vec![]).unwrap().to_bytes();
        b[0] = b'N';
        assert!(matches!(Dataset::from_bytes(&b, p), Err(Error::Format { .. })));
        let bad_class = SampleRecord {
            class_id: 5,
            pixels: vec![0.0; 12],
        };
        assert!(Dataset::new(header(), vec![bad_class]).is_err());
        let nan = SampleRecord {
            class_id: 0,
            pixels: vec![f32::NAN; 12],
        };
        assert!(Dataset::new(header(), vec![nan]).is_err());
    }
}
