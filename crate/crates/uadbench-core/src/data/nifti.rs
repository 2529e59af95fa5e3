//! Minimal NIfTI-1 (.nii.gz) volume IO and the on-disk dataset layout.
//!
//! Only what this benchmark needs: single-file little-endian NIfTI-1 with
//! float64 intensities and uint8 masks, stored gzip-compressed. Datasets
//! are directory trees `root/dataset_id/subject_id/{image,mask,gt}.nii.gz`.
//! The image's `descrip` field carries the normalized flag so a volume's
//! preprocessing state survives the round trip.

use super::{DataError, Volume};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;
use std::io::{Read, Write};
use std::path::Path;

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn unreadable(path: &Path, reason: impl ToString) -> DataError {
    DataError::UnreadableFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Serialize one scalar volume. Data is written in Fortran order (x fastest)
/// as the format requires.
fn encode(dims: [usize; 3], datatype: i16, descrip: &str, payload: &[u8]) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i32 = |h: &mut [u8], at: usize, v: i32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut h, 0, HEADER_LEN as i32);
    // dim[8]
    put_i16(&mut h, 40, 3);
    for (a, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * a, d as i16);
    }
    for a in 4..8 {
        put_i16(&mut h, 40 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    let bitpix: i16 = match datatype {
        DT_UINT8 => 8,
        DT_FLOAT32 => 32,
        DT_FLOAT64 => 64,
        _ => unreachable!("writer only emits supported dtypes"),
    };
    put_i16(&mut h, 72, bitpix);
    // pixdim: qfac + unit spacings.
    for a in 0..4 {
        put_f32(&mut h, 76 + 4 * a, 1.0);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    let bytes = descrip.as_bytes();
    let n = bytes.len().min(79);
    h[148..148 + n].copy_from_slice(&bytes[..n]);
    put_i16(&mut h, 254, 1); // sform_code: identity affine below
    put_f32(&mut h, 280, 1.0);
    put_f32(&mut h, 300, 1.0);
    put_f32(&mut h, 320, 1.0);
    h[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352: no extensions.

    h.extend_from_slice(payload);
    h
}

fn fortran_bytes_f64(a: &Array3<f64>) -> Vec<u8> {
    let (nx, ny, nz) = a.dim();
    let mut out = Vec::with_capacity(nx * ny * nz * 8);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.extend_from_slice(&a[[i, j, k]].to_le_bytes());
            }
        }
    }
    out
}

fn fortran_bytes_mask(a: &Array3<bool>) -> Vec<u8> {
    let (nx, ny, nz) = a.dim();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.push(a[[i, j, k]] as u8);
            }
        }
    }
    out
}

fn write_gz(path: &Path, raw: &[u8]) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|e| unreadable(path, e))?;
    let mut enc = GzEncoder::new(file, Compression::default());
    enc.write_all(raw).map_err(|e| unreadable(path, e))?;
    enc.finish().map_err(|e| unreadable(path, e))?;
    Ok(())
}

fn read_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| unreadable(path, e))?;
    let mut raw = Vec::new();
    GzDecoder::new(file)
        .read_to_end(&mut raw)
        .map_err(|e| unreadable(path, e))?;
    Ok(raw)
}

enum Scalars {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

struct Parsed {
    dims: [usize; 3],
    data: Scalars,
    normalized: bool,
}

fn decode(path: &Path, raw: &[u8]) -> Result<Parsed, DataError> {
    if raw.len() < VOX_OFFSET {
        return Err(unreadable(path, "file shorter than a NIfTI-1 header"));
    }
    let get_i32 = |at: usize| i32::from_le_bytes(raw[at..at + 4].try_into().unwrap());
    let get_i16 = |at: usize| i16::from_le_bytes(raw[at..at + 2].try_into().unwrap());
    let get_f32 = |at: usize| f32::from_le_bytes(raw[at..at + 4].try_into().unwrap());

    if get_i32(0) != HEADER_LEN as i32 {
        return Err(unreadable(path, "not little-endian NIfTI-1 (sizeof_hdr != 348)"));
    }
    if &raw[344..347] != b"n+1" {
        return Err(unreadable(path, "magic is not 'n+1' (two-file NIfTI unsupported)"));
    }
    let ndim = get_i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(unreadable(path, format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..ndim as usize {
        let d = get_i16(42 + 2 * a);
        if d < 1 {
            return Err(unreadable(path, format!("non-positive dim[{}] = {d}", a + 1)));
        }
        if a < 3 {
            dims[a] = d as usize;
        } else if d != 1 {
            return Err(unreadable(path, "volumes with a 4th dimension are unsupported"));
        }
    }
    let datatype = get_i16(70);
    let vox_offset = get_f32(108) as usize;
    if vox_offset < HEADER_LEN || vox_offset > raw.len() {
        return Err(unreadable(path, format!("bad vox_offset {vox_offset}")));
    }
    let slope = get_f32(112) as f64;
    let inter = get_f32(116) as f64;
    let scale = |x: f64| {
        if slope == 0.0 || (slope == 1.0 && inter == 0.0) {
            x
        } else {
            slope * x + inter
        }
    };
    let n: usize = dims.iter().product();
    let body = &raw[vox_offset..];
    let normalized = {
        let descrip = &raw[148..228];
        let text = String::from_utf8_lossy(descrip);
        text.contains("normalized=1")
    };
    let data = match datatype {
        DT_UINT8 => {
            if body.len() < n {
                return Err(unreadable(path, "truncated uint8 payload"));
            }
            Scalars::U8(body[..n].to_vec())
        }
        DT_FLOAT32 => {
            if body.len() < 4 * n {
                return Err(unreadable(path, "truncated float32 payload"));
            }
            Scalars::F64(
                body[..4 * n]
                    .chunks_exact(4)
                    .map(|c| scale(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
            )
        }
        DT_FLOAT64 => {
            if body.len() < 8 * n {
                return Err(unreadable(path, "truncated float64 payload"));
            }
            Scalars::F64(
                body[..8 * n]
                    .chunks_exact(8)
                    .map(|c| scale(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            )
        }
        other => {
            return Err(unreadable(
                path,
                format!("unsupported NIfTI datatype code {other}"),
            ))
        }
    };
    Ok(Parsed {
        dims,
        data,
        normalized,
    })
}

fn to_array_f64(dims: [usize; 3], values: Vec<f64>) -> Array3<f64> {
    // Incoming order is Fortran (x fastest): fill (nz, ny, nx) C-order and
    // flip the axes.
    let rev = Array3::from_shape_vec((dims[2], dims[1], dims[0]), values).unwrap();
    rev.permuted_axes([2, 1, 0]).as_standard_layout().to_owned()
}

/// Write `image.nii.gz`, `mask.nii.gz`, and (when present) `gt.nii.gz` for
/// one subject into `dir`.
pub fn write_volume(dir: &Path, v: &Volume) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| unreadable(dir, e))?;
    let descrip = format!("uadbench;normalized={}", v.normalized as u8);
    let dims = {
        let (nx, ny, nz) = v.shape();
        [nx, ny, nz]
    };
    write_gz(
        &dir.join("image.nii.gz"),
        &encode(dims, DT_FLOAT64, &descrip, &fortran_bytes_f64(&v.intensities)),
    )?;
    write_gz(
        &dir.join("mask.nii.gz"),
        &encode(dims, DT_UINT8, "uadbench;brain mask", &fortran_bytes_mask(&v.brain_mask)),
    )?;
    if let Some(gt) = &v.gt_mask {
        write_gz(
            &dir.join("gt.nii.gz"),
            &encode(dims, DT_UINT8, "uadbench;ground truth", &fortran_bytes_mask(gt)),
        )?;
    }
    Ok(())
}

/// Load one subject. `path` may be the subject directory or its
/// `image.nii.gz`; the mask is required as a sibling, ground truth is
/// optional. Subject and dataset ids are recovered from the directory
/// layout.
pub fn load_volume(path: &Path) -> Result<Volume, DataError> {
    let (dir, image_path) = if path.is_dir() {
        (path.to_path_buf(), path.join("image.nii.gz"))
    } else {
        (
            path.parent()
                .ok_or_else(|| unreadable(path, "no parent directory"))?
                .to_path_buf(),
            path.to_path_buf(),
        )
    };
    let image = decode(&image_path, &read_gz(&image_path)?)?;
    let intensities = match image.data {
        Scalars::F64(v) => to_array_f64(image.dims, v),
        Scalars::U8(v) => to_array_f64(image.dims, v.into_iter().map(f64::from).collect()),
    };

    let mask_path = dir.join("mask.nii.gz");
    let mask = decode(&mask_path, &read_gz(&mask_path)?)?;
    if mask.dims != image.dims {
        return Err(DataError::ShapeMismatch {
            path: mask_path.display().to_string(),
            expected: image.dims.to_vec(),
            found: mask.dims.to_vec(),
        });
    }
    let brain_mask = parse_mask(mask);

    let gt_path = dir.join("gt.nii.gz");
    let gt_mask = if gt_path.exists() {
        let gt = decode(&gt_path, &read_gz(&gt_path)?)?;
        if gt.dims != image.dims {
            return Err(DataError::ShapeMismatch {
                path: gt_path.display().to_string(),
                expected: image.dims.to_vec(),
                found: gt.dims.to_vec(),
            });
        }
        Some(parse_mask(gt))
    } else {
        None
    };

    let subject_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into());
    let dataset_id = dir
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into());

    Volume::new(
        intensities,
        brain_mask,
        gt_mask,
        subject_id,
        dataset_id,
        image.normalized,
    )
}

fn parse_mask(p: Parsed) -> Array3<bool> {
    match p.data {
        Scalars::U8(v) => to_array_f64(p.dims, v.into_iter().map(f64::from).collect()).mapv(|x| x > 0.5),
        Scalars::F64(v) => to_array_f64(p.dims, v).mapv(|x| x > 0.5),
    }
}

/// Materialize a whole cohort under `root/dataset_id/`, one directory per
/// subject. The given `dataset_id` wins over whatever the volumes carry.
pub fn write_dataset(root: &Path, dataset_id: &str, volumes: &[Volume]) -> Result<(), DataError> {
    for v in volumes {
        write_volume(&root.join(dataset_id).join(&v.subject_id), v)?;
    }
    Ok(())
}

/// Load every subject under `root/dataset_id/`, sorted by subject id.
pub fn load_dataset(root: &Path, dataset_id: &str) -> Result<Vec<Volume>, DataError> {
    let dir = root.join(dataset_id);
    let entries = std::fs::read_dir(&dir).map_err(|e| unreadable(&dir, e))?;
    let mut subject_dirs: Vec<_> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    subject_dirs.sort();
    subject_dirs
        .iter()
        .map(|d| load_volume(d))
        .collect::<Result<Vec<_>, _>>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantoms, LesionMode, PhantomConfig};
    use ndarray::Array3;

    fn sample_volume() -> Volume {
        let mut x = Array3::zeros((5, 4, 3));
        let mut m = Array3::from_elem((5, 4, 3), false);
        let mut g = Array3::from_elem((5, 4, 3), false);
        for ((i, j, k), v) in x.indexed_iter_mut() {
            *v = (i * 100 + j * 10 + k) as f64 / 2.0 + 0.125;
            if i > 0 && i < 4 {
                m[[i, j, k]] = true;
            }
        }
        g[[2, 2, 1]] = true;
        Volume::new(x, m, Some(g), "s007", "dset", false).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        let subject_dir = dir.path().join("dset").join("s007");
        write_volume(&subject_dir, &v).unwrap();
        let back = load_volume(&subject_dir).unwrap();
        assert_eq!(back.intensities, v.intensities);
        assert_eq!(back.brain_mask, v.brain_mask);
        assert_eq!(back.gt_mask, v.gt_mask);
        assert_eq!(back.subject_id, "s007");
        assert_eq!(back.dataset_id, "dset");
        assert!(!back.normalized);

        // Also via the explicit image path.
        let again = load_volume(&subject_dir.join("image.nii.gz")).unwrap();
        assert_eq!(again.intensities, v.intensities);
    }

    #[test]
    fn normalized_flag_survives_the_descrip_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = sample_volume();
        v.intensities.mapv_inplace(|x| x / 1000.0);
        v.normalized = true;
        write_volume(dir.path(), &v).unwrap();
        assert!(load_volume(dir.path()).unwrap().normalized);
    }

    #[test]
    fn mismatched_mask_shape_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        write_volume(dir.path(), &v).unwrap();
        // Overwrite the mask with a differently-shaped one.
        let wrong = Array3::from_elem((2, 2, 2), true);
        write_gz(
            &dir.path().join("mask.nii.gz"),
            &encode([2, 2, 2], DT_UINT8, "", &fortran_bytes_mask(&wrong)),
        )
        .unwrap();
        assert!(matches!(
            load_volume(dir.path()),
            Err(DataError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn missing_and_corrupt_files_are_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume(&dir.path().join("nope")),
            Err(DataError::UnreadableFile { .. })
        ));
        let bad = dir.path().join("image.nii.gz");
        std::fs::write(&bad, b"not gzip at all").unwrap();
        assert!(matches!(
            load_volume(dir.path()),
            Err(DataError::UnreadableFile { .. })
        ));
    }

    #[test]
    fn phantom_survives_the_tree_with_prevalence_intact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            n_subjects: 3,
            anomaly_rate: 1.0,
            lesion_intensity_mode: LesionMode::Hyper,
            seed: 21,
            volume_shape: [24, 24, 12],
        };
        let vols = generate_phantoms(&cfg).unwrap();
        write_dataset(dir.path(), "lesioned", &vols).unwrap();
        let back = load_dataset(dir.path(), "lesioned").unwrap();
        assert_eq!(back.len(), vols.len());
        for (a, b) in vols.iter().zip(&back) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.gt_voxel_count(), b.gt_voxel_count());
            assert_eq!(a.brain_voxel_count(), b.brain_voxel_count());
            assert_eq!(a.intensities, b.intensities);
        }
    }
}
