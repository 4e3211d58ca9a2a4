//! Binary sidecar and CSV debug form for descriptor lists.
//!
//! Binary layout (little endian): magic `GMD1`, record count `u64`, then per
//! record: keypoint `u64`, k1 `u32`, k2 `u32`, E_conc `u64`, E_conv `u64`,
//! followed by `k` weights, `3k` mean coordinates and `9k` row-major
//! covariance entries as `f64`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

use super::{Gmd, Gmm};

const MAGIC: &[u8; 4] = b"GMD1";

pub fn encode_descriptors(descriptors: &[Gmd]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(descriptors.len() as u64).to_le_bytes());
    for d in descriptors {
        out.extend_from_slice(&(d.keypoint as u64).to_le_bytes());
        out.extend_from_slice(&(d.k1 as u32).to_le_bytes());
        out.extend_from_slice(&(d.k2 as u32).to_le_bytes());
        out.extend_from_slice(&(d.e_conc as u64).to_le_bytes());
        out.extend_from_slice(&(d.e_conv as u64).to_le_bytes());
        let g = &d.mixture;
        let values = g
            .weights
            .iter()
            .copied()
            .chain(g.means.iter().flat_map(|m| m.iter().copied()))
            .chain(
                g.covariances
                    .iter()
                    .flat_map(|c| c.transpose().iter().copied().collect::<Vec<_>>()),
            );
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            what: "descriptor file",
            message: format!("truncated at byte {}", self.pos),
        })?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.take().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.take().map(f64::from_le_bytes)
    }
}

pub fn decode_descriptors(bytes: &[u8]) -> Result<Vec<Gmd>> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<4>()? != MAGIC {
        return Err(Error::Format {
            what: "descriptor file",
            message: "bad magic".into(),
        });
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let keypoint = r.u64()? as usize;
        let k1 = r.u32()? as usize;
        let k2 = r.u32()? as usize;
        let e_conc = r.u64()? as usize;
        let e_conv = r.u64()? as usize;
        let k = k1 + k2;
        let weights = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let means = (0..k)
            .map(|_| Ok(Vector3::new(r.f64()?, r.f64()?, r.f64()?)))
            .collect::<Result<Vec<_>>>()?;
        let covariances = (0..k)
            .map(|_| {
                let v = (0..9).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Matrix3::from_row_slice(&v))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Gmd {
            keypoint,
            mixture: Gmm::new(weights, means, covariances)?,
            k1,
            k2,
            e_conc,
            e_conv,
            lrf: None,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            what: "descriptor file",
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn write_descriptors(path: &Path, descriptors: &[Gmd]) -> Result<()> {
    std::fs::write(path, encode_descriptors(descriptors)).map_err(|e| Error::io(path, e))
}

pub fn read_descriptors(path: &Path) -> Result<Vec<Gmd>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_descriptors(&bytes)
}

/// One row per mixture component.
pub fn descriptors_csv(descriptors: &[Gmd]) -> String {
    let mut s = String::from(
        "keypoint,k1,k2,e_conc,e_conv,component,weight,mx,my,mz,c00,c01,c02,c10,c11,c12,c20,c21,c22\n",
    );
    for d in descriptors {
        let g = &d.mixture;
        for j in 0..g.k() {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{}",
                d.keypoint, d.k1, d.k2, d.e_conc, d.e_conv, j, g.weights[j]
            );
            for v in g.means[j].iter() {
                let _ = write!(s, ",{v}");
            }
            for v in g.covariances[j].transpose().iter() {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmd::merge_gmd;

    fn sample() -> Vec<Gmd> {
        let conv = Gmm::new(
            vec![1.0],
            vec![Vector3::new(0.1, 0.2, 0.3)],
            vec![Matrix3::new(2.0, 0.1, 0.2, 0.1, 1.0, 0.3, 0.2, 0.3, 1.5)],
        )
        .unwrap();
        let conc = Gmm::new(
            vec![0.25, 0.75],
            vec![
                Vector3::new(-1.0, 0.0, 2.0),
                Vector3::new(1.0 / 3.0, 5.0, -2.0),
            ],
            vec![Matrix3::identity(), Matrix3::identity() * 0.5],
        )
        .unwrap();
        vec![
            merge_gmd(17, Some(&conc), Some(&conv), 30, 70, None).unwrap(),
            merge_gmd(3, None, Some(&conv), 0, 25, None).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = sample();
        let bytes = encode_descriptors(&ds);
        let k_total: usize = ds.iter().map(Gmd::k).sum();
        assert_eq!(bytes.len(), 12 + ds.len() * 32 + 13 * 8 * k_total);
        assert_eq!(decode_descriptors(&bytes).unwrap(), ds);
    }

    #[test]
    fn covariances_are_row_major() {
        let ds = sample();
        let bytes = encode_descriptors(&ds[1..]);
        // header 12 + record header 32 + weight 8 + mean 24 → first covariance entry
        let at = |i: usize| f64::from_le_bytes(bytes[76 + 8 * i..84 + 8 * i].try_into().unwrap());
        assert_eq!(at(1), 0.1);
        assert_eq!(at(5), 0.3);
        assert_eq!(at(8), 1.5);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode_descriptors(&sample());
        assert!(decode_descriptors(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_descriptors(&extra).is_err());
        assert!(decode_descriptors(b"NOPE").is_err());
    }

    #[test]
    fn csv_has_one_row_per_component() {
        let csv = descriptors_csv(&sample());
        assert_eq!(csv.lines().count(), 1 + 3 + 1);
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("17,1,2,30,70,0,0.7,"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gmd.bin");
        write_descriptors(&path, &sample()).unwrap();
        assert_eq!(read_descriptors(&path).unwrap(), sample());
    }
}
