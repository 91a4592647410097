//! Embedding-space edit metrics.

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|&x| x as f64 / n).collect())
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na > 0.0 && nb > 0.0).then(|| dot(a, b) / (na * nb))
}

/// `100 * cos(image, text)`, clipped below at zero.
pub fn clip_score(image_emb: &[f32], text_emb: &[f32]) -> Option<f64> {
    cosine(image_emb, text_emb).map(|c| (100.0 * c).max(0.0))
}

/// Cosine between the image and text edit directions, each taken between
/// L2-normalized embeddings. `None` when either direction is zero.
pub fn clip_directional_similarity(
    src_img: &[f32],
    dst_img: &[f32],
    src_txt: &[f32],
    dst_txt: &[f32],
) -> Option<f64> {
    let delta = |a: &[f32], b: &[f32]| -> Option<Vec<f64>> {
        let (ua, ub) = (unit(a)?, unit(b)?);
        Some(ub.iter().zip(&ua).map(|(y, x)| y - x).collect())
    };
    let di = delta(src_img, dst_img)?;
    let dt = delta(src_txt, dst_txt)?;
    let ni = di.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nt = dt.iter().map(|x| x * x).sum::<f64>().sqrt();
    if ni <= 1e-12 || nt <= 1e-12 {
        return None;
    }
    Some(di.iter().zip(&dt).map(|(a, b)| a * b).sum::<f64>() / (ni * nt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_bounds() {
        assert_eq!(clip_score(&[1.0, 2.0], &[2.0, 4.0]).map(|v| v.round()), Some(100.0));
        assert_eq!(clip_score(&[1.0, 0.0], &[0.0, 3.0]), Some(0.0));
        assert_eq!(clip_score(&[1.0, 0.0], &[-1.0, 0.0]), Some(0.0));
        assert_eq!(clip_score(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn identical_images_are_undefined() {
        let a = [0.3, 0.1, -0.2];
        assert_eq!(clip_directional_similarity(&a, &a, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]), None);
    }

    #[test]
    fn matching_deltas_give_one() {
        let s = [1.0, 0.0, 0.0];
        let d = [0.0, 1.0, 0.0];
        let v = clip_directional_similarity(&s, &d, &s, &d).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }
}
