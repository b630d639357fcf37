//! Small numeric helpers shared across modules.

/// Neumaier (improved Kahan) compensated summation.
///
/// Risk estimates and bound checks must be reproducible to 1e-9 independent
/// of how work is chunked, so every statistic that feeds a tolerance check
/// goes through this instead of a plain fold.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator of f64.
pub fn csum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Compensated mean; 0 for an empty iterator.
pub fn cmean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::new();
    let mut n = 0usize;
    for v in values {
        acc.add(v);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        acc.value() / n as f64
    }
}

/// Round through f32, the precision features carry on disk.
pub fn quantize_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// sign with sign(0) = 0; the tie-break keeps dead coordinates dead.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Median of a slice, averaging the two middle elements for even lengths.
/// Uses an in-place selection; the caller keeps its own copy if order matters.
pub fn median_in_place(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *upper;
    if n % 2 == 1 {
        Some(upper)
    } else {
        let (_, lower, _) = values.select_nth_unstable_by(mid - 1, |a, b| a.total_cmp(b));
        Some((*lower + upper) / 2.0)
    }
}
