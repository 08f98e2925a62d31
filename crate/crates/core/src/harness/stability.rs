//! Consecutive-episode gradient cosine.

/// Cosine of two flattened gradients; `None` if either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (aa > 0.0 && bb > 0.0).then(|| (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean cosine over consecutive pairs of one epoch's gradients; `None` with
/// fewer than two gradients or no valid pair.
pub fn gradient_stability(epoch: &[Vec<f64>]) -> Option<f64> {
    let cos: Vec<f64> = epoch.windows(2).filter_map(|w| cosine(&w[0], &w[1])).collect();
    (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64)
}

/// Running form used by the trainer: keeps only the previous gradient.
#[derive(Clone, Debug, Default)]
pub struct StabilityTracker {
    prev: Option<Vec<f64>>,
    sum: f64,
    count: usize,
}

impl StabilityTracker {
    /// Records the next gradient; returns its cosine with the previous one.
    pub fn push(&mut self, grad: Vec<f64>) -> Option<f64> {
        let c = self.prev.as_deref().and_then(|p| cosine(p, &grad));
        if let Some(c) = c {
            self.sum += c;
            self.count += 1;
        }
        self.prev = Some(grad);
        c
    }

    /// Mean so far, then resets for the next epoch.
    pub fn finish_epoch(&mut self) -> Option<f64> {
        let mean = (self.count > 0).then(|| self.sum / self.count as f64);
        *self = StabilityTracker::default();
        mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn examples() {
        let g = vec![0.3, -1.0, 2.0];
        assert!((gradient_stability(&[g.clone(), g.clone()]).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!((gradient_stability(&[g.clone(), neg]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(gradient_stability(&[g.clone()]), None);
        assert_eq!(gradient_stability(&[g.clone(), vec![0.0; 3], g.clone()]), None);
    }

    #[test]
    fn random_gradients_are_uncorrelated() {
        let mut r = rng::stream(8, &[]);
        let grads: Vec<Vec<f64>> = (0..101)
            .map(|_| (0..10_000).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let m = gradient_stability(&grads).unwrap();
        assert!(m.abs() < 0.05, "{m}");
    }

    #[test]
    fn tracker_matches_batch_form() {
        let grads = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![-1.0, 0.5]];
        let mut t = StabilityTracker::default();
        for g in &grads {
            t.push(g.clone());
        }
        let a = t.finish_epoch().unwrap();
        assert!((a - gradient_stability(&grads).unwrap()).abs() < 1e-15);
        assert_eq!(t.finish_epoch(), None);
    }
}
