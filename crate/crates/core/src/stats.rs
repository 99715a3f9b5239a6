//! Streaming moments with deterministic merging.

/// Mean and sum of squared deviations for a vector of statistics, merged
/// with Chan's pairwise update.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, sample: &[f64]) {
        debug_assert_eq!(sample.len(), self.width());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(sample) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for i in 0..self.width() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance per coordinate (0 for fewer than two samples).
    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.width()];
        }
        let d = (self.count - 1) as f64;
        self.m2.iter().map(|s| (s / d).max(0.0)).collect()
    }

    /// Standard error of each mean.
    pub fn stderr(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.variance().into_iter().map(|v| (v / n).sqrt()).collect()
    }

    /// Merges a sequence of partial moments in order.
    pub fn merge_all<'a>(width: usize, parts: impl IntoIterator<Item = &'a Moments>) -> Moments {
        let mut total = Moments::new(width);
        for p in parts {
            total.merge(p);
        }
        total
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let mut m = Moments::new(1);
    for &x in xs {
        m.push(&[x]);
    }
    (m.mean()[0], m.stderr()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merged_equals_direct() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.3 - 7.0).collect();
        let mut direct = Moments::new(1);
        xs.iter().for_each(|x| direct.push(&[*x]));
        let parts: Vec<Moments> = xs
            .chunks(77)
            .map(|c| {
                let mut m = Moments::new(1);
                c.iter().for_each(|x| m.push(&[*x]));
                m
            })
            .collect();
        let merged = Moments::merge_all(1, &parts);
        assert_eq!(merged.count(), 1000);
        assert!((merged.mean()[0] - direct.mean()[0]).abs() < 1e-12);
        assert!((merged.variance()[0] - direct.variance()[0]).abs() < 1e-9);
        let naive_mean = xs.iter().sum::<f64>() / 1000.0;
        let naive_var = xs.iter().map(|x| (x - naive_mean).powi(2)).sum::<f64>() / 999.0;
        assert!((merged.variance()[0] - naive_var).abs() < 1e-9);
    }

    #[test]
    fn degenerate_counts() {
        let (m, se) = mean_stderr(&[3.0]);
        assert_eq!((m, se), (3.0, 0.0));
        let empty = Moments::new(2);
        assert_eq!(empty.variance(), vec![0.0, 0.0]);
    }
}
