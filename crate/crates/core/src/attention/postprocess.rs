//! Map post-processing: probe features, resizing, SVD components, heatmaps.

use candle_core::{DType, Tensor};
use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::site::{AttentionSite, AttnKind};
use super::store::AttentionMapRecord;
use crate::error::{Error, Result};

/// Self maps with at least this many queries are resized to this many rows and columns.
pub const SELF_PROBE_SIDE: usize = 256;

/// A 2-D scalar field in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Head-averaged map of the last guidance branch as a `[q, k]` f32 matrix.
pub fn head_mean(record: &AttentionMapRecord) -> Result<Vec<f32>> {
    let m = record.matrix.to_dtype(DType::F32)?;
    let m = match m.rank() {
        4 => {
            let b = m.dim(0)?;
            m.narrow(0, b - 1, 1)?.squeeze(0)?
        }
        3 => m,
        r => return Err(Error::Shape(format!("attention record must have rank 3 or 4, got {r}"))),
    };
    Ok(m.mean(0)?.flatten_all()?.to_vec1()?)
}

/// Length of the probe feature vector for a site. Depends only on the site geometry.
pub fn probe_feature_len(site: &AttentionSite) -> usize {
    match site.kind {
        AttnKind::Cross => site.spatial_len,
        AttnKind::SelfAttn if site.spatial_len >= SELF_PROBE_SIDE => SELF_PROBE_SIDE * SELF_PROBE_SIDE,
        AttnKind::SelfAttn => site.spatial_len * site.spatial_len,
    }
}

/// Flattened, head-averaged probe features of one record.
///
/// Cross maps yield the key column at `token_position` in spatial order.
/// Self maps yield the whole map, bilinearly resized to 256×256 when the
/// query length is at least 256.
pub fn normalize_map_for_probe(record: &AttentionMapRecord, token_position: Option<usize>) -> Result<Vec<f32>> {
    let site = &record.site;
    let q = site.spatial_len;
    let k = record.matrix.dims()[record.matrix.rank() - 1];
    let mean = head_mean(record)?;
    match (site.kind, token_position) {
        (AttnKind::Cross, Some(t)) => {
            if t >= k {
                return Err(Error::validation(format!(
                    "token_position {t} out of range for {k} context tokens"
                )));
            }
            Ok((0..q).map(|i| mean[i * k + t]).collect())
        }
        (AttnKind::Cross, None) => Err(Error::validation("cross-attention features need a token_position")),
        (AttnKind::SelfAttn, Some(_)) => Err(Error::validation("self-attention features take no token_position")),
        (AttnKind::SelfAttn, None) => {
            if q >= SELF_PROBE_SIDE {
                Ok(resize_bilinear(&mean, q, k, SELF_PROBE_SIDE, SELF_PROBE_SIDE))
            } else {
                Ok(mean)
            }
        }
    }
}

/// Bilinear resize of a row-major `h × w` grid with half-pixel centers
/// (the `align_corners = false` convention).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w, "source length must be h * w");
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let axis = |out: usize, n: usize| -> Vec<(usize, usize, f32)> {
        let scale = n as f64 / out as f64;
        (0..out)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (x.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Min-max normalization to `[0, 1]`; a constant input maps to zeros.
pub fn min_max(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > f32::EPSILON * hi.abs().max(1.0)) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// Top singular directions of a self-attention map.
#[derive(Debug, Clone)]
pub struct SvdComponents {
    pub singular_values: Vec<f64>,
    /// Unit left singular vectors, sign-fixed so each sums to a non-negative value.
    pub vectors: Vec<Vec<f64>>,
    /// `vectors` reshaped to the site grid and min-max normalized.
    pub heatmaps: Vec<Heatmap>,
}

/// Top-`k` left singular vectors of the head-averaged self map.
pub fn svd_components(record: &AttentionMapRecord, k: usize) -> Result<SvdComponents> {
    let site = &record.site;
    if site.kind != AttnKind::SelfAttn {
        return Err(Error::validation("svd_components needs a self-attention record"));
    }
    if site.grid_h != site.grid_w || site.grid_h * site.grid_w != site.spatial_len {
        return Err(Error::validation(format!(
            "site {} has a non-square {}x{} grid",
            site.key(),
            site.grid_h,
            site.grid_w
        )));
    }
    let n = site.spatial_len;
    if k == 0 || k > n {
        return Err(Error::validation(format!("k must lie in 1..={n}, got {k}")));
    }
    let mean = head_mean(record)?;
    let m = DMatrix::from_row_iterator(n, n, mean.iter().map(|&v| v as f64));
    let (singular_values, vectors) = top_left_singular(&m, k, 0x5eed);
    let heatmaps = vectors
        .iter()
        .map(|v| {
            let vals: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            Heatmap {
                height: site.grid_h,
                width: site.grid_w,
                values: min_max(&vals),
            }
        })
        .collect();
    Ok(SvdComponents {
        singular_values,
        vectors,
        heatmaps,
    })
}

/// Orthogonal iteration on `M Mᵀ` followed by a Rayleigh-Ritz rotation.
///
/// The first starting vector is constant, the rest are seeded Gaussian, so
/// degenerate spectra (such as the identity) resolve deterministically.
pub(crate) fn top_left_singular(m: &DMatrix<f64>, k: usize, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.nrows();
    let block = (k + 4).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = DMatrix::from_fn(n, block, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    u = orthonormalize(&u);
    let mt = m.transpose();
    for _ in 0..200 {
        let next = orthonormalize(&(m * (&mt * &u)));
        let delta = (next.columns(0, k) - u.columns(0, k)).abs().max();
        u = next;
        if delta < 1e-12 {
            break;
        }
    }
    let b = &mt * &u;
    let small = b.transpose() * &b;
    let off: f64 = (0..block)
        .flat_map(|i| (0..block).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| small[(i, j)].abs())
        .fold(0.0, f64::max);
    let scale = small.diagonal().abs().max().max(f64::MIN_POSITIVE);
    let (eigvals, rotated) = if off <= 1e-10 * scale {
        (small.diagonal(), u.clone())
    } else {
        let eig = SymmetricEigen::new(small);
        (eig.eigenvalues.clone(), &u * eig.eigenvectors)
    };
    let mut order: Vec<usize> = (0..block).collect();
    // Eigenvalues equal to within 1e-9 of the largest keep their column order.
    let top = eigvals.iter().fold(f64::MIN_POSITIVE, |acc, &e| acc.max(e.abs()));
    let rank_key = |j: usize| -> i64 { (eigvals[j] / top * 1e9).round() as i64 };
    order.sort_by_key(|&j| (std::cmp::Reverse(rank_key(j)), j));
    let mut values = Vec::with_capacity(k);
    let mut vectors = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        values.push(eigvals[j].max(0.0).sqrt());
        let mut v: Vec<f64> = rotated.column(j).iter().copied().collect();
        if v.iter().sum::<f64>() < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        vectors.push(v);
    }
    (values, vectors)
}

/// Modified Gram-Schmidt; columns that collapse are replaced by unit basis vectors.
fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = a.shape();
    let mut q = a.clone();
    for j in 0..k {
        for _ in 0..2 {
            for i in 0..j {
                let qi = q.column(i).clone_owned();
                let proj = qi.dot(&q.column(j));
                let mut cj = q.column_mut(j);
                cj.axpy(-proj, &qi, 1.0);
            }
        }
        let norm = q.column(j).norm();
        if norm > 1e-300 {
            q.column_mut(j).scale_mut(1.0 / norm);
        } else {
            let mut e = DVector::zeros(n);
            e[j % n] = 1.0;
            q.set_column(j, &e);
        }
    }
    q
}

/// Colors a `[0, 1]` heatmap with a dark-blue → yellow ramp, upscaled by `scale`.
pub fn heatmap_image(map: &Heatmap, scale: u32) -> RgbImage {
    let scale = scale.max(1);
    let stops: [[f32; 3]; 4] = [[13.0, 8.0, 135.0], [156.0, 23.0, 158.0], [237.0, 121.0, 83.0], [240.0, 249.0, 33.0]];
    let color = |v: f32| {
        let t = v.clamp(0.0, 1.0) * 3.0;
        let i = (t.floor() as usize).min(2);
        let f = t - i as f32;
        let c: Vec<u8> = (0..3).map(|c| (stops[i][c] * (1.0 - f) + stops[i + 1][c] * f).round() as u8).collect();
        image::Rgb([c[0], c[1], c[2]])
    };
    RgbImage::from_fn(map.width as u32 * scale, map.height as u32 * scale, |x, y| {
        let (gx, gy) = ((x / scale) as usize, (y / scale) as usize);
        color(map.values[gy * map.width + gx])
    })
}

/// Min-max normalized spatial map of one context token of a cross record.
pub fn cross_token_heatmap(record: &AttentionMapRecord, token_position: usize) -> Result<Heatmap> {
    let column = normalize_map_for_probe(record, Some(token_position))?;
    Ok(Heatmap {
        height: record.site.grid_h,
        width: record.site.grid_w,
        values: min_max(&column),
    })
}

/// Wraps a raw `[q, k]` or `[heads, q, k]` matrix as a record for `site`.
pub fn record_from_matrix(site: AttentionSite, matrix: Tensor) -> Result<AttentionMapRecord> {
    let matrix = match matrix.rank() {
        2 => matrix.unsqueeze(0)?.unsqueeze(0)?,
        3 => matrix.unsqueeze(0)?,
        4 => matrix,
        r => return Err(Error::Shape(format!("attention matrix must have rank 2 to 4, got {r}"))),
    };
    Ok(AttentionMapRecord {
        site,
        step: super::store::StepKey::Mean,
        heads: matrix.dim(1)?,
        matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::site::BlockKind;
    use candle_core::Device;

    fn self_site(side: usize) -> AttentionSite {
        AttentionSite {
            index: 1,
            block: BlockKind::Down,
            kind: AttnKind::SelfAttn,
            spatial_len: side * side,
            context_len: side * side,
            grid_h: side,
            grid_w: side,
            heads: 1,
        }
    }

    fn record(site: AttentionSite, data: Vec<f32>, q: usize, k: usize) -> AttentionMapRecord {
        record_from_matrix(site, Tensor::from_vec(data, (q, k), &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn identity_first_component_is_uniform() {
        let n = 16;
        let mut eye = vec![0f32; n * n];
        (0..n).for_each(|i| eye[i * n + i] = 1.0);
        let c = svd_components(&record(self_site(4), eye, n, n), 1).unwrap();
        let v = &c.vectors[0];
        let expected = 1.0 / (n as f64).sqrt();
        assert!(v.iter().all(|x| (x - expected).abs() < 1e-9));
        assert!(c.heatmaps[0].values.iter().all(|&x| x == c.heatmaps[0].values[0]));
        assert!((c.singular_values[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rank_one_recovers_left_factor() {
        let n = 16;
        let u: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| 0.5 + (i % 3) as f64).collect();
        let data: Vec<f32> = (0..n * n).map(|idx| (u[idx / n] * v[idx % n]) as f32).collect();
        let c = svd_components(&record(self_site(4), data, n, n), 2).unwrap();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Largest singular value of u vᵀ is |u| |v|; the rest vanish.
        assert!((c.singular_values[0] - un * vn).abs() / (un * vn) < 1e-5);
        assert!(c.singular_values[1] < 1e-3 * c.singular_values[0]);
        for (a, b) in c.vectors[0].iter().zip(&u) {
            assert!((a - b / un).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_cross_and_bad_k() {
        let mut site = self_site(2);
        let r = record(site, vec![0.25; 16], 4, 4);
        assert!(svd_components(&r, 5).is_err());
        site.kind = AttnKind::Cross;
        let r = record(site, vec![0.25; 16], 4, 4);
        assert!(svd_components(&r, 1).is_err());
        let mut site = self_site(2);
        site.grid_w = 4;
        site.grid_h = 1;
        assert!(svd_components(&record(site, vec![0.25; 16], 4, 4), 1).is_err());
    }

    #[test]
    fn cross_column_and_bounds() {
        let site = AttentionSite {
            kind: AttnKind::Cross,
            context_len: 3,
            ..self_site(2)
        };
        let data: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let r = record(site, data, 4, 3);
        assert_eq!(normalize_map_for_probe(&r, Some(2)).unwrap(), vec![2.0, 5.0, 8.0, 11.0]);
        assert!(normalize_map_for_probe(&r, Some(3)).is_err());
        assert!(normalize_map_for_probe(&r, None).is_err());
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let out = resize_bilinear(&vec![0.3; 64 * 64], 64, 64, 16, 16);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-7));
        let out = resize_bilinear(&vec![0.3; 4 * 4], 4, 4, 7, 9);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn resize_matches_half_pixel_convention() {
        // 4 → 2 picks the midpoint between source pixels 0|1 and 2|3.
        let src: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let out = resize_bilinear(&src, 4, 4, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn feature_lengths() {
        assert_eq!(probe_feature_len(&self_site(64)), 65_536);
        assert_eq!(probe_feature_len(&self_site(16)), 65_536);
        assert_eq!(probe_feature_len(&self_site(8)), 4096);
    }
}
