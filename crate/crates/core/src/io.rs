//! Binary containers for datasets (`FSD1`) and volumes (`FSV1`).
//!
//! Both formats are: 4 magic bytes, a little-endian `u64` byte length, that
//! many bytes of UTF-8 JSON header, then complex values as interleaved
//! little-endian `f64` pairs `(re, im)`.
//!
//! * `FSD1` header: `{M, N, mask_radius, sigma, seed, interp_mode, poses, ctfs}`
//!   followed by `N·M²` values, image-major, pixels in ascending linear index.
//!   An empty `ctfs` list means the images carry no CTF.
//! * `FSV1` header: `{M}` followed by `M³` values in volume layout order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FsldError, Result};
use crate::forward::{CtfParams, FourierVolume, ImageStack, Interp, Pose};
use crate::grid::GridSpec;

pub const DATASET_MAGIC: &[u8; 4] = b"FSD1";
pub const VOLUME_MAGIC: &[u8; 4] = b"FSV1";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "N")]
    n: usize,
    mask_radius: usize,
    sigma: f64,
    seed: u64,
    interp_mode: Interp,
    poses: Vec<Pose>,
    ctfs: Vec<CtfParams>,
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    #[serde(rename = "M")]
    m: usize,
}

fn write_container<W: Write>(mut w: W, magic: &[u8; 4], header: &[u8], values: &[Complex64]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    let mut buf = Vec::with_capacity(values.len() * 16);
    for z in values {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Splits a container into `(header bytes, payload bytes)`.
fn split_container<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(FsldError::data(format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let hend = 12usize
        .checked_add(usize::try_from(hlen).map_err(|_| FsldError::data("header length overflow"))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| FsldError::data("header length exceeds file size"))?;
    Ok((&bytes[12..hend], &bytes[hend..]))
}

fn decode_values(payload: &[u8], count: usize) -> Result<Vec<Complex64>> {
    if payload.len() != count * 16 {
        return Err(FsldError::data(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * 16
        )));
    }
    let values: Vec<Complex64> = payload
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    if !values.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(FsldError::data("payload contains non-finite values"));
    }
    Ok(values)
}

pub fn encode_dataset(stack: &ImageStack) -> Result<Vec<u8>> {
    stack.validate()?;
    let header = DatasetHeader {
        m: stack.spec.m(),
        n: stack.len(),
        mask_radius: stack.mask_radius,
        sigma: stack.sigma,
        seed: stack.seed,
        interp_mode: stack.mode,
        poses: stack.poses.clone(),
        ctfs: stack.ctfs.clone().unwrap_or_default(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| FsldError::data(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + stack.images.len() * 16);
    write_container(&mut out, DATASET_MAGIC, &json, &stack.images)?;
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ImageStack> {
    let (header, payload) = split_container(bytes, DATASET_MAGIC)?;
    let h: DatasetHeader =
        serde_json::from_slice(header).map_err(|e| FsldError::data(format!("bad dataset header: {e}")))?;
    let spec = GridSpec::new(h.m).map_err(|e| FsldError::data(e.to_string()))?;
    if h.poses.len() != h.n {
        return Err(FsldError::data(format!("header lists {} poses for N={}", h.poses.len(), h.n)));
    }
    let poses = h
        .poses
        .iter()
        .map(|p| {
            let qn = p.q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if (qn - 1.0).abs() > 1e-9 || !p.t.iter().all(|c| c.is_finite()) {
                return Err(FsldError::data(format!("pose quaternion norm {qn} is not 1")));
            }
            Ok(*p)
        })
        .collect::<Result<Vec<_>>>()?;
    let ctfs = if h.ctfs.is_empty() { None } else { Some(h.ctfs) };
    let images = decode_values(payload, h.n * spec.image_len())?;
    let stack = ImageStack {
        spec,
        mask_radius: h.mask_radius,
        mode: h.interp_mode,
        sigma: h.sigma,
        seed: h.seed,
        poses,
        ctfs,
        images,
    };
    stack.validate()?;
    Ok(stack)
}

pub fn encode_volume(v: &FourierVolume) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&VolumeHeader { m: v.spec.m() }).map_err(|e| FsldError::data(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + v.values.len() * 16);
    write_container(&mut out, VOLUME_MAGIC, &json, &v.values)?;
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<FourierVolume> {
    let (header, payload) = split_container(bytes, VOLUME_MAGIC)?;
    let h: VolumeHeader =
        serde_json::from_slice(header).map_err(|e| FsldError::data(format!("bad volume header: {e}")))?;
    let spec = GridSpec::new(h.m).map_err(|e| FsldError::data(e.to_string()))?;
    let values = decode_values(payload, spec.volume_len())?;
    Ok(FourierVolume { spec, values })
}

/// 64-bit content digest (XXH3) of a byte stream.
pub fn digest(bytes: &[u8]) -> u64 {
    xxhash_rust::xxh3::xxh3_64(bytes)
}

/// Writes a dataset container and returns its digest.
pub fn write_dataset(path: &Path, stack: &ImageStack) -> Result<u64> {
    let bytes = encode_dataset(stack)?;
    fs::write(path, &bytes)?;
    Ok(digest(&bytes))
}

pub fn read_dataset(path: &Path) -> Result<ImageStack> {
    decode_dataset(&read_all(path)?)
}

pub fn write_volume(path: &Path, v: &FourierVolume) -> Result<u64> {
    let bytes = encode_volume(v)?;
    fs::write(path, &bytes)?;
    Ok(digest(&bytes))
}

pub fn read_volume(path: &Path) -> Result<FourierVolume> {
    decode_volume(&read_all(path)?)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{phantom, sample_ctfs, sample_uniform_poses, synthesize_dataset, CtfDistribution, Projector};

    fn small_stack(with_ctf: bool) -> ImageStack {
        let spec = GridSpec::new(8).unwrap();
        let v = phantom(spec, 3, 4).unwrap();
        let proj = Projector::new(spec, 3, Interp::Trilinear).unwrap();
        let poses = sample_uniform_poses(5, 1.0, 2);
        let ctfs = with_ctf.then(|| {
            let d = CtfDistribution { defocus_min: 1.0, defocus_max: 3.0, amp_contrast: 0.1, b_factor: 0.5 };
            sample_ctfs(5, &d, 1).unwrap()
        });
        synthesize_dataset(&v, &poses, ctfs.as_deref(), 0.2, &proj, 3).unwrap()
    }

    #[test]
    fn dataset_layout() {
        let stack = small_stack(true);
        let bytes = encode_dataset(&stack).unwrap();
        assert_eq!(&bytes[..4], b"FSD1");
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header["M"], 8);
        assert_eq!(header["N"], 5);
        assert_eq!(header["interp_mode"], "tri");
        assert_eq!(header["poses"][0]["q"].as_array().unwrap().len(), 4);
        assert_eq!(header["poses"][0]["t"].as_array().unwrap().len(), 2);
        assert!(header["ctfs"][0]["defocus"].is_f64());
        assert_eq!(bytes.len(), 12 + hlen + 5 * 64 * 16);
        // Image 1, pixel 0: (re, im) little-endian f64.
        let off = 12 + hlen + 64 * 16;
        let re = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let im = f64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
        assert_eq!(Complex64::new(re, im), stack.image(1)[0]);
    }

    #[test]
    fn dataset_round_trip_exact() {
        for with_ctf in [false, true] {
            let stack = small_stack(with_ctf);
            let back = decode_dataset(&encode_dataset(&stack).unwrap()).unwrap();
            assert_eq!(back, stack);
        }
    }

    #[test]
    fn volume_round_trip_exact() {
        let v = phantom(GridSpec::new(6).unwrap(), 2, 1).unwrap();
        let bytes = encode_volume(&v).unwrap();
        assert_eq!(&bytes[..4], b"FSV1");
        assert_eq!(decode_volume(&bytes).unwrap(), v);
    }

    #[test]
    fn corrupt_containers_rejected() {
        let stack = small_stack(false);
        let bytes = encode_dataset(&stack).unwrap();
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&bad).is_err());
        assert!(decode_dataset(&bytes[..10]).is_err());
        let mut huge = bytes.clone();
        huge[4..12].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_dataset(&huge).is_err());
        assert!(decode_volume(&bytes).is_err());
    }

    #[test]
    fn digest_is_stable() {
        let a = encode_dataset(&small_stack(true)).unwrap();
        let b = encode_dataset(&small_stack(true)).unwrap();
        assert_eq!(digest(&a), digest(&b));
        assert_ne!(digest(&a), digest(&encode_dataset(&small_stack(false)).unwrap()));
    }
}
