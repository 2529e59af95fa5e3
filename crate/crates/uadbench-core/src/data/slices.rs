//! Axial slice extraction, resizing, and reassembly back to volumes.

use super::{DataError, Volume};
use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};

/// Default in-plane resolution the models consume.
pub const DEFAULT_SLICE_SIZE: usize = 128;

/// A stack of square single-channel axial slices with aligned masks and
/// slice-level provenance, ready for batching.
#[derive(Clone, Debug)]
pub struct SliceBatch {
    /// (batch, height, width, 1), values in [0, 1].
    pub pixels: Array4<f64>,
    /// Brain-mask pixels, same layout.
    pub masks: Array4<bool>,
    /// Ground-truth pixels, present iff every contributing volume had one.
    pub gt: Option<Array4<bool>>,
    /// (subject_id, axial index) per slice, ascending axial index within a
    /// subject.
    pub provenance: Vec<(String, usize)>,
}

impl SliceBatch {
    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_size(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Stack several batches (e.g. one per subject) into one. All parts must
    /// share the slice size; `gt` survives only if every part carries it.
    pub fn concat(parts: &[SliceBatch]) -> SliceBatch {
        assert!(!parts.is_empty(), "cannot concat zero batches");
        let size = parts[0].slice_size();
        assert!(
            parts.iter().all(|p| p.slice_size() == size),
            "mixed slice sizes"
        );
        let views: Vec<_> = parts.iter().map(|p| p.pixels.view()).collect();
        let pixels = ndarray::concatenate(Axis(0), &views).unwrap();
        let views: Vec<_> = parts.iter().map(|p| p.masks.view()).collect();
        let masks = ndarray::concatenate(Axis(0), &views).unwrap();
        let gt = if parts.iter().all(|p| p.gt.is_some()) {
            let views: Vec<_> = parts.iter().map(|p| p.gt.as_ref().unwrap().view()).collect();
            Some(ndarray::concatenate(Axis(0), &views).unwrap())
        } else {
            None
        };
        let provenance = parts.iter().flat_map(|p| p.provenance.clone()).collect();
        SliceBatch {
            pixels,
            masks,
            gt,
            provenance,
        }
    }

    /// Select a sub-batch by slice indices (used for minibatching).
    pub fn select(&self, indices: &[usize]) -> SliceBatch {
        let pixels = self.pixels.select(Axis(0), indices);
        let masks = self.masks.select(Axis(0), indices);
        let gt = self.gt.as_ref().map(|g| g.select(Axis(0), indices));
        let provenance = indices.iter().map(|&i| self.provenance[i].clone()).collect();
        SliceBatch {
            pixels,
            masks,
            gt,
            provenance,
        }
    }
}

/// Cut a normalized volume into axial slices at the default 128×128
/// resolution, keeping only slices with at least one brain pixel.
pub fn extract_slices(v: &Volume) -> Result<SliceBatch, DataError> {
    extract_slices_sized(v, DEFAULT_SLICE_SIZE)
}

/// [`extract_slices`] with an explicit target resolution (scaled-down
/// benchmark configurations shrink this together with the network input).
pub fn extract_slices_sized(v: &Volume, size: usize) -> Result<SliceBatch, DataError> {
    assert!(size > 0, "slice size must be positive");
    if !v.normalized {
        return Err(DataError::InvalidVolume(format!(
            "extract_slices requires a normalized volume (subject {})",
            v.subject_id
        )));
    }
    let (_, _, nz) = v.shape();

    let mut planes: Vec<Array2<f64>> = Vec::new();
    let mut mask_planes: Vec<Array2<bool>> = Vec::new();
    let mut gt_planes: Vec<Array2<bool>> = Vec::new();
    let mut provenance = Vec::new();

    for z in 0..nz {
        let mask = v.brain_mask.index_axis(Axis(2), z);
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let mask_r = resize_nearest_bool(mask, size, size);
        if !mask_r.iter().any(|&m| m) {
            // Brain region so thin that nearest-neighbor downsampling missed
            // it entirely; treat like an empty slice.
            continue;
        }
        planes.push(resize_bilinear(v.intensities.index_axis(Axis(2), z), size, size));
        mask_planes.push(mask_r);
        if let Some(gt) = &v.gt_mask {
            gt_planes.push(resize_nearest_bool(gt.index_axis(Axis(2), z), size, size));
        }
        provenance.push((v.subject_id.clone(), z));
    }

    if provenance.is_empty() {
        return Err(DataError::EmptyBrain {
            subject_id: v.subject_id.clone(),
        });
    }

    let n = provenance.len();
    let mut pixels = Array4::zeros((n, size, size, 1));
    let mut masks = Array4::from_elem((n, size, size, 1), false);
    for (i, (p, m)) in planes.iter().zip(&mask_planes).enumerate() {
        pixels
            .index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(2), 0)
            .assign(p);
        masks
            .index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(2), 0)
            .assign(m);
    }
    let gt = v.gt_mask.as_ref().map(|_| {
        let mut g = Array4::from_elem((n, size, size, 1), false);
        for (i, plane) in gt_planes.iter().enumerate() {
            g.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(2), 0)
                .assign(plane);
        }
        g
    });

    Ok(SliceBatch {
        pixels,
        masks,
        gt,
        provenance,
    })
}

/// Put per-slice planes (e.g. score maps) back onto the voxel grid of one
/// subject, inverting the slice resize. Axial slices that never qualified
/// stay zero. When slices were extracted without resizing, the in-plane
/// values round-trip bit-identically.
pub fn reassemble_slices(
    planes: &Array3<f64>,
    provenance: &[(String, usize)],
    subject_id: &str,
    volume_shape: (usize, usize, usize),
) -> Array3<f64> {
    assert_eq!(
        planes.shape()[0],
        provenance.len(),
        "one provenance entry per plane"
    );
    let (nx, ny, nz) = volume_shape;
    let mut out = Array3::zeros((nx, ny, nz));
    for (i, (sid, z)) in provenance.iter().enumerate() {
        if sid != subject_id {
            continue;
        }
        assert!(*z < nz, "axial index {z} outside volume depth {nz}");
        let plane = resize_bilinear(planes.index_axis(Axis(0), i), nx, ny);
        out.index_axis_mut(Axis(2), *z).assign(&plane);
    }
    out
}

/// Bilinear resample with half-pixel-centered sampling; degenerates to an
/// exact copy when the shape is unchanged.
pub(crate) fn resize_bilinear(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let x1 = (x0 + 1).min(in_w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        src[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + src[[y0, x1]] * (1.0 - fy) * fx
            + src[[y1, x0]] * fy * (1.0 - fx)
            + src[[y1, x1]] * fy * fx
    })
}

/// Nearest-neighbor resample for boolean masks (no fractional labels).
pub(crate) fn resize_nearest_bool(
    src: ArrayView2<'_, bool>,
    out_h: usize,
    out_w: usize,
) -> Array2<bool> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let y = (((i as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(in_h - 1);
        let x = (((j as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(in_w - 1);
        src[[y, x]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn ball_volume(n: usize, nz: usize, z_lo: usize, z_hi: usize) -> Volume {
        // Brain voxels only in axial slices z_lo..=z_hi.
        let mut mask = Array3::from_elem((n, n, nz), false);
        let mut x = Array3::zeros((n, n, nz));
        for z in z_lo..=z_hi {
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    mask[[i, j, z]] = true;
                    x[[i, j, z]] = ((i + j + z) % 7) as f64 / 10.0;
                }
            }
        }
        Volume::new(x, mask, None, "s0", "d0", true).unwrap()
    }

    #[test]
    fn keeps_exactly_the_brain_carrying_slices() {
        let v = ball_volume(16, 32, 10, 20);
        let batch = extract_slices_sized(&v, 16).unwrap();
        assert_eq!(batch.len(), 11);
        let zs: Vec<usize> = batch.provenance.iter().map(|(_, z)| *z).collect();
        assert_eq!(zs, (10..=20).collect::<Vec<_>>());
        assert!(batch
            .masks
            .axis_iter(Axis(0))
            .all(|m| m.iter().any(|&b| b)));
    }

    #[test]
    fn same_size_extraction_is_bit_identical() {
        let v = ball_volume(16, 8, 2, 5);
        let batch = extract_slices_sized(&v, 16).unwrap();
        for (i, (_, z)) in batch.provenance.iter().enumerate() {
            let plane = batch.pixels.index_axis(Axis(0), i);
            for a in 0..16 {
                for b in 0..16 {
                    assert_eq!(plane[[a, b, 0]], v.intensities[[a, b, *z]]);
                }
            }
        }
    }

    #[test]
    fn all_false_mask_is_empty_brain() {
        let mut v = ball_volume(8, 4, 1, 2);
        v.brain_mask.fill(false);
        assert!(matches!(
            extract_slices_sized(&v, 8),
            Err(DataError::EmptyBrain { .. })
        ));
    }

    #[test]
    fn unnormalized_volume_is_rejected() {
        let mut v = ball_volume(8, 4, 1, 2);
        v.normalized = false;
        assert!(extract_slices_sized(&v, 8).is_err());
    }

    #[test]
    fn reassembly_without_resize_is_exact() {
        let v = ball_volume(16, 12, 3, 9);
        let batch = extract_slices_sized(&v, 16).unwrap();
        let planes = batch
            .pixels
            .index_axis(Axis(3), 0)
            .to_owned();
        let rebuilt = reassemble_slices(&planes, &batch.provenance, "s0", v.shape());
        for ((idx, &m), (&orig, &back)) in v
            .brain_mask
            .indexed_iter()
            .zip(v.intensities.iter().zip(rebuilt.iter()))
        {
            if m {
                assert_eq!(orig, back, "in-mask voxel {idx:?} altered");
            }
        }
    }

    #[test]
    fn bilinear_downsample_preserves_constant_images() {
        let src = Array2::from_elem((10, 14), 0.37);
        let out = resize_bilinear(src.view(), 7, 7);
        assert!(out.iter().all(|&x| (x - 0.37).abs() < 1e-15));
    }

    #[test]
    fn bilinear_upsample_interpolates_between_neighbors() {
        // 1x2 image [0, 1] widened to 1x4: interior samples sit at 1/4 and
        // 3/4 between the two source pixels under half-pixel centering.
        let src = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(src.view(), 1, 4);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn concat_and_select_round_trip() {
        let v1 = ball_volume(8, 6, 1, 3);
        let mut v2 = ball_volume(8, 6, 2, 4);
        v2.subject_id = "s1".into();
        let b1 = extract_slices_sized(&v1, 8).unwrap();
        let b2 = extract_slices_sized(&v2, 8).unwrap();
        let all = SliceBatch::concat(&[b1.clone(), b2]);
        assert_eq!(all.len(), 6);
        let first_three = all.select(&[0, 1, 2]);
        assert_eq!(first_three.provenance, b1.provenance);
        assert_eq!(first_three.pixels, b1.pixels);
    }

    #[test]
    fn gt_is_dropped_unless_all_parts_have_it() {
        let v1 = ball_volume(8, 6, 1, 3);
        let mut v2 = ball_volume(8, 6, 1, 3);
        v2.gt_mask = Some(Array3::from_elem((8, 8, 6), false));
        v2.subject_id = "s1".into();
        let b1 = extract_slices_sized(&v1, 8).unwrap();
        let b2 = extract_slices_sized(&v2, 8).unwrap();
        assert!(b1.gt.is_none() && b2.gt.is_some());
        assert!(SliceBatch::concat(&[b1, b2]).gt.is_none());
    }

    #[test]
    fn selected_gt_follows_slices() {
        let mut v = ball_volume(8, 6, 1, 4);
        let mut gt = Array3::from_elem((8, 8, 6), false);
        gt[[3, 3, 2]] = true;
        v.gt_mask = Some(gt);
        let b = extract_slices_sized(&v, 8).unwrap();
        let gt = b.gt.as_ref().unwrap();
        // slice index 1 corresponds to z=2.
        assert!(gt[[1, 3, 3, 0]]);
        assert_eq!(
            gt.iter().filter(|&&g| g).count(),
            1,
            "exactly one gt pixel expected"
        );
        let picked = b.select(&[1]);
        assert!(picked.gt.unwrap()[[0, 3, 3, 0]]);
        let _: &Array4<f64> = &picked.pixels;
    }
}
