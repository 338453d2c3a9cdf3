use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};

/// Span length of speech masking, in context frames.
pub const SPAN_LENGTH: usize = 10;
/// Span-start probability for self-supervised batches.
pub const SSL_MASK_RATE: f64 = 0.07;
/// Span-start probability for the supervised speech subtasks.
pub const SUPERVISED_MASK_RATE: f64 = 0.03;
/// Minimum fraction of text tokens masked for denoising.
pub const TEXT_MASK_RATE: f64 = 0.3;
/// Mean of the Poisson text-span length.
pub const TEXT_SPAN_MEAN: f64 = 3.0;

/// Span starts over a sequence of `len` positions. The masked set is the
/// union of `[start, start + span_length)` truncated at `len`; spans may
/// overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    len: usize,
    span_length: usize,
    starts: Vec<usize>,
}

impl MaskPlan {
    pub fn new(len: usize, span_length: usize, mut starts: Vec<usize>) -> Result<Self> {
        if span_length == 0 {
            return Err(Error::Contract("span length must be positive".into()));
        }
        if let Some(&s) = starts.iter().find(|&&s| s >= len) {
            return Err(Error::Index { index: s, extent: len });
        }
        starts.sort_unstable();
        starts.dedup();
        Ok(Self { len, span_length, starts })
    }

    pub fn empty(len: usize) -> Self {
        Self {
            len,
            span_length: SPAN_LENGTH,
            starts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// True when nothing is masked.
    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn span_length(&self) -> usize {
        self.span_length
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.len];
        for &s in &self.starts {
            let end = (s + self.span_length).min(self.len);
            flags[s..end].iter_mut().for_each(|f| *f = true);
        }
        flags
    }

    /// Masked positions in increasing order.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.flags()
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Draws a plan in which every position independently starts a span with
/// probability `p_start`.
pub fn sample_spans(len: usize, p_start: f64, span_length: usize, seed: u64) -> Result<MaskPlan> {
    sample_spans_with(&mut ChaCha8Rng::seed_from_u64(seed), len, p_start, span_length)
}

pub fn sample_spans_with(rng: &mut impl Rng, len: usize, p_start: f64, span_length: usize) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&p_start) {
        return Err(Error::Contract(format!("span-start probability {p_start} outside [0, 1]")));
    }
    let starts = (0..len).filter(|_| rng.random_bool(p_start)).collect();
    MaskPlan::new(len, span_length, starts)
}

/// Replaces contiguous spans of `y` by `mask` until at least
/// `⌈mask_rate · |y|⌉` positions are covered. Span lengths follow a Poisson
/// distribution with mean 3, redrawn when zero. The length of `y` is kept.
pub fn noise_text<T: Clone>(y: &[T], mask_rate: f64, mask: T, seed: u64) -> Result<Vec<T>> {
    let flags = text_mask_flags(y.len(), mask_rate, seed)?;
    Ok(y.iter()
        .zip(flags)
        .map(|(t, m)| if m { mask.clone() } else { t.clone() })
        .collect())
}

/// Positions selected by [`noise_text`].
pub fn text_mask_flags(len: usize, mask_rate: f64, seed: u64) -> Result<Vec<bool>> {
    if len == 0 {
        return Err(Error::Contract("cannot noise an empty sequence".into()));
    }
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::Contract(format!("mask rate {mask_rate} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poisson = Poisson::new(TEXT_SPAN_MEAN).expect("positive mean");
    let goal = (mask_rate * len as f64 - 1e-9).ceil() as usize;
    let mut flags = vec![false; len];
    let mut covered = 0;
    while covered < goal {
        let span = loop {
            let s = poisson.sample(&mut rng) as usize;
            if s > 0 {
                break s;
            }
        };
        let start = rng.random_range(0..len);
        for f in flags.iter_mut().skip(start).take(span) {
            if !*f {
                *f = true;
                covered += 1;
            }
        }
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_rate_is_empty() {
        let plan = sample_spans(50, 0.0, SPAN_LENGTH, 1).unwrap();
        assert!(plan.is_empty());
        assert!(plan.masked_positions().is_empty());
    }

    #[test]
    fn span_truncated_at_end() {
        let plan = MaskPlan::new(20, 10, vec![17]).unwrap();
        assert_eq!(plan.masked_positions(), vec![17, 18, 19]);
    }

    #[test]
    fn overlapping_spans_union() {
        let plan = MaskPlan::new(30, 10, vec![2, 5]).unwrap();
        assert_eq!(plan.masked_positions(), (2..15).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_rate_rejected() {
        assert!(sample_spans(10, 1.5, 10, 0).is_err());
        assert!(MaskPlan::new(10, 10, vec![10]).is_err());
    }

    #[test]
    fn text_noise_examples() {
        let y: Vec<u32> = (0..10).collect();
        assert_eq!(noise_text(&y, 0.0, 99, 3).unwrap(), y);
        let x = noise_text(&y, 0.3, 99, 3).unwrap();
        assert!(x.iter().filter(|&&t| t == 99).count() >= 3);
        assert_eq!(x, noise_text(&y, 0.3, 99, 3).unwrap());
        assert!(noise_text::<u32>(&[], 0.3, 99, 3).is_err());
    }

    proptest! {
        #[test]
        fn plans_are_reproducible_and_in_range(len in 1usize..300, p in 0.0f64..1.0, span in 1usize..20, seed: u64) {
            let a = sample_spans(len, p, span, seed).unwrap();
            prop_assert_eq!(&a, &sample_spans(len, p, span, seed).unwrap());
            prop_assert!(a.masked_positions().iter().all(|&i| i < len));
        }

        #[test]
        fn text_noise_reaches_rate(len in 1usize..200, rate in 0.0f64..1.0, seed: u64) {
            let flags = text_mask_flags(len, rate, seed).unwrap();
            let n = flags.iter().filter(|&&f| f).count();
            prop_assert!(n as f64 >= rate * len as f64 - 1e-9);
        }
    }
}
