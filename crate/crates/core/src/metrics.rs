//! Binary segmentation metrics: per-image Dice / IoU / MAE, dataset
//! aggregates, and the per-signal quality ranking diagnostic.
//!
//! Thresholding at 0.5 is the only place hard decisions occur; a
//! probability of exactly 0.5 counts as background. MAE is threshold-free.

use crate::tensor::{Tensor, TensorError};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct EvalRecord {
    /// (image id, dice, iou, mae)
    pub per_image: Vec<(String, f64, f64, f64)>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_mae: f64,
}

impl EvalRecord {
    pub fn from_per_image(per_image: Vec<(String, f64, f64, f64)>) -> EvalRecord {
        let n = per_image.len().max(1) as f64;
        let (mut d, mut i, mut m) = (0.0, 0.0, 0.0);
        for (_, dice, iou, mae) in &per_image {
            d += dice;
            i += iou;
            m += mae;
        }
        EvalRecord { per_image, mean_dice: d / n, mean_iou: i / n, mean_mae: m / n }
    }
}

fn confusion(pred_prob: &Tensor, gt: &Tensor, threshold: f64) -> Result<(f64, f64, f64), TensorError> {
    if pred_prob.shape() != gt.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "metrics",
            lhs: pred_prob.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&p, &g) in pred_prob.data().iter().zip(gt.data()) {
        let pb = if p > threshold { 1.0 } else { 0.0 };
        inter += pb * g;
        psum += pb;
        gsum += g;
    }
    Ok((inter, psum, gsum))
}

/// Dice = 2|P∩G| / (|P|+|G|); both empty scores 1.
pub fn dice(pred_prob: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64, TensorError> {
    let (inter, psum, gsum) = confusion(pred_prob, gt, threshold)?;
    if psum + gsum == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (psum + gsum))
}

/// IoU = |P∩G| / |P∪G|; both empty scores 1.
pub fn iou(pred_prob: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64, TensorError> {
    let (inter, psum, gsum) = confusion(pred_prob, gt, threshold)?;
    let union = psum + gsum - inter;
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok(inter / union)
}

/// Mean absolute error on continuous probabilities, no thresholding.
pub fn mae(pred_prob: &Tensor, gt: &Tensor) -> Result<f64, TensorError> {
    if pred_prob.shape() != gt.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mae",
            lhs: pred_prob.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let s: f64 = pred_prob
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p - g).abs())
        .sum();
    Ok(s / pred_prob.numel() as f64)
}

/// Dense ranking by score descending, 1-based; ties share a rank and are
/// listed in index order.
pub fn rank_signals(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    let mut rank = 0;
    let mut prev: Option<f64> = None;
    for &idx in &order {
        if prev != Some(scores[idx]) {
            rank += 1;
            prev = Some(scores[idx]);
        }
        ranks[idx] = rank;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(bits: &[u8], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[1, 1, h, w], bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn dice_trivial_cases() {
        let g = mask_from(&[1, 1, 0, 0], 2, 2);
        let p = mask_from(&[1, 1, 0, 0], 2, 2);
        assert_eq!(dice(&p, &g, THRESHOLD).unwrap(), 1.0);
        let disjoint = mask_from(&[0, 0, 1, 1], 2, 2);
        assert_eq!(dice(&disjoint, &g, THRESHOLD).unwrap(), 0.0);
        // |P|=|G|=100, overlap 50 -> 0.5
        let mut gv = vec![0u8; 400];
        let mut pv = vec![0u8; 400];
        for i in 0..100 {
            gv[i] = 1;
        }
        for i in 50..150 {
            pv[i] = 1;
        }
        let d = dice(&mask_from(&pv, 20, 20), &mask_from(&gv, 20, 20), THRESHOLD).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn iou_trivial_and_identity() {
        let g = mask_from(&[1, 1, 0, 0], 2, 2);
        assert_eq!(iou(&g, &g, THRESHOLD).unwrap(), 1.0);
        // overlap 50 of union 150 -> 1/3
        let mut gv = vec![0u8; 400];
        let mut pv = vec![0u8; 400];
        for i in 0..100 {
            gv[i] = 1;
        }
        for i in 50..150 {
            pv[i] = 1;
        }
        let v = iou(&mask_from(&pv, 20, 20), &mask_from(&gv, 20, 20), THRESHOLD).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        // iou = dice/(2-dice) on random masks
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let pv: Vec<u8> = (0..64).map(|_| rng.gen::<bool>() as u8).collect();
            let gv: Vec<u8> = (0..64).map(|_| rng.gen::<bool>() as u8).collect();
            let p = mask_from(&pv, 8, 8);
            let g = mask_from(&gv, 8, 8);
            let d = dice(&p, &g, THRESHOLD).unwrap();
            let i = iou(&p, &g, THRESHOLD).unwrap();
            assert!((i - d / (2.0 - d)).abs() < 1e-12);
            assert!(d >= i - 1e-15);
        }
    }

    #[test]
    fn both_empty_convention() {
        let z = Tensor::zeros(&[1, 1, 4, 4]);
        assert_eq!(dice(&z, &z, THRESHOLD).unwrap(), 1.0);
        assert_eq!(iou(&z, &z, THRESHOLD).unwrap(), 1.0);
        // p == 0.5 exactly counts as background
        let half = Tensor::filled(&[1, 1, 4, 4], 0.5);
        assert_eq!(dice(&half, &z, THRESHOLD).unwrap(), 1.0);
    }

    #[test]
    fn mae_cases() {
        let g = mask_from(&[1, 0, 1, 0], 2, 2);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        let half = Tensor::filled(&[1, 1, 2, 2], 0.5);
        assert!((mae(&half, &g).unwrap() - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
        let gv: Vec<f64> = (0..16).map(|_| rng.gen::<bool>() as u8 as f64).collect();
        let want: f64 = p.iter().zip(&gv).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
        let got = mae(
            &Tensor::from_vec(&[1, 1, 4, 4], p).unwrap(),
            &Tensor::from_vec(&[1, 1, 4, 4], gv).unwrap(),
        )
        .unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn metrics_invariant_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
        let g: Vec<f64> = (0..36).map(|_| rng.gen::<bool>() as u8 as f64).collect();
        let mut perm: Vec<usize> = (0..36).collect();
        for i in (1..36).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
        let t = |v: Vec<f64>| Tensor::from_vec(&[1, 1, 6, 6], v).unwrap();
        assert!((dice(&t(p.clone()), &t(g.clone()), THRESHOLD).unwrap()
            - dice(&t(pp.clone()), &t(gp.clone()), THRESHOLD).unwrap())
        .abs() < 1e-15);
        assert!((mae(&t(p), &t(g)).unwrap() - mae(&t(pp), &t(gp)).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ranking() {
        assert_eq!(rank_signals(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4]), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(rank_signals(&[0.5; 6]), vec![1; 6]);
        // sort-based oracle on random scores
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s: Vec<f64> = (0..6).map(|_| (rng.gen::<f64>() * 10.0).round() / 10.0).collect();
            let ranks = rank_signals(&s);
            for i in 0..6 {
                // rank = 1 + number of distinct scores strictly above
                let distinct_above: std::collections::HashSet<u64> = s
                    .iter()
                    .filter(|&&x| x > s[i])
                    .map(|&x| x.to_bits())
                    .collect();
                assert_eq!(ranks[i], 1 + distinct_above.len());
            }
        }
    }

    #[test]
    fn aggregate_means() {
        let rec = EvalRecord::from_per_image(vec![
            ("a".into(), 1.0, 1.0, 0.0),
            ("b".into(), 0.5, 0.25, 0.1),
        ]);
        assert!((rec.mean_dice - 0.75).abs() < 1e-12);
        assert!((rec.mean_iou - 0.625).abs() < 1e-12);
        assert!((rec.mean_mae - 0.05).abs() < 1e-12);
    }
}
