use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::model::FeatureMap;

/// Mean absolute error over every element.
pub fn mae_loss(pred: &Image, gt: &Image) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, reference is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.data().len() as f64)
}

/// MAE between a network output and a target, with its gradient.
///
/// `mask` holds one weight per pixel; masked-out pixels (weight 0) neither
/// contribute to the loss nor receive gradient, and the mean is taken over
/// the retained elements. The gradient at an exact tie is 0.
pub fn mae_with_grad(
    pred: &FeatureMap,
    gt: &FeatureMap,
    mask: Option<&[f64]>,
) -> Result<(f64, Array2<f64>)> {
    if pred.data().dim() != gt.data().dim() || !pred.same_spatial(gt) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs reference {:?}",
            pred.data().dim(),
            gt.data().dim()
        )));
    }
    let channels = pred.channels();
    let weights: Vec<f64> = match mask {
        Some(m) if m.len() != pred.pixels() => {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} pixels",
                m.len(),
                pred.pixels()
            )))
        }
        Some(m) => m.to_vec(),
        None => vec![1.0; pred.pixels()],
    };
    let count = weights.iter().sum::<f64>() * channels as f64;
    let mut grad = Array2::zeros(pred.data().raw_dim());
    if count == 0.0 {
        return Ok((0.0, grad));
    }
    let mut sum = 0.0;
    for (p, &wt) in weights.iter().enumerate() {
        for c in 0..channels {
            let d = pred.data()[[p, c]] - gt.data()[[p, c]];
            sum += wt * d.abs();
            grad[[p, c]] = if d > 0.0 {
                wt / count
            } else if d < 0.0 {
                -wt / count
            } else {
                0.0
            };
        }
    }
    Ok((sum / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn img(v: f64) -> Image {
        Image::from_fn(8, 8, |_, _, _| v).unwrap()
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(mae_loss(&img(0.3), &img(0.3)).unwrap(), 0.0);
        assert!((mae_loss(&img(0.4), &img(0.3)).unwrap() - 0.1).abs() < 1e-15);
        let other = Image::from_fn(9, 8, |_, _, _| 0.0).unwrap();
        assert!(matches!(mae_loss(&img(0.1), &other), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_elementwise_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let mut acc = 0.0;
        for i in 0..12 {
            acc += (a[i] - b[i]).abs();
        }
        let pa = FeatureMap::from_vec(2, 2, 3, a).unwrap();
        let pb = FeatureMap::from_vec(2, 2, 3, b).unwrap();
        let (loss, grad) = mae_with_grad(&pa, &pb, None).unwrap();
        assert_eq!(loss, acc / 12.0);
        for (g, (x, y)) in grad.iter().zip(pa.data().iter().zip(pb.data())) {
            assert_eq!(*g, (x - y).signum() / 12.0);
        }
    }

    #[test]
    fn mask_excludes_pixels() {
        let a = FeatureMap::from_vec(1, 2, 1, vec![0.0, 0.0]).unwrap();
        let b = FeatureMap::from_vec(1, 2, 1, vec![0.5, 0.9]).unwrap();
        let (loss, grad) = mae_with_grad(&a, &b, Some(&[1.0, 0.0])).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grad[[1, 0]], 0.0);
        assert_eq!(grad[[0, 0]], -1.0);
        let (none, _) = mae_with_grad(&a, &b, Some(&[0.0, 0.0])).unwrap();
        assert_eq!(none, 0.0);
    }
}
