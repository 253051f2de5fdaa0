//! Group-relative advantages and the clipped surrogate objective.
//!
//! The ratio is sequence-level, there is no KL penalty, and the group
//! standard deviation is the population one with no epsilon smoothing: a group
//! whose rewards are all equal gets all-zero advantages.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("reward group is empty")]
    EmptyGroup,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StdKind {
    #[default]
    Population,
    /// Bessel-corrected; a group of one is treated as degenerate.
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AdvantageSet {
    pub fn is_degenerate(&self) -> bool {
        self.std == 0.0
    }

    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }
}

pub fn advantages(rewards: &[u8]) -> Result<AdvantageSet, GrpoError> {
    advantages_with(rewards, StdKind::Population)
}

pub fn advantages_with(rewards: &[u8], kind: StdKind) -> Result<AdvantageSet, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    if let Some(bad) = rewards.iter().find(|&&r| r > 1) {
        return Err(GrpoError::InvalidInput(format!("reward {bad} is not binary")));
    }
    let values: Vec<f64> = rewards.iter().map(|&r| f64::from(r)).collect();
    Ok(normalize(&values, kind))
}

/// Same normalization for arbitrary real rewards.
pub fn normalize(rewards: &[f64], kind: StdKind) -> AdvantageSet {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Population => n,
        StdKind::Sample => n - 1.0,
    };
    let std = if denom > 0.0 { (ss / denom).sqrt() } else { 0.0 };
    let advantages = if std == 0.0 {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    AdvantageSet { advantages, mean, std }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioInput {
    /// pi_new(o|q) / pi_old(o|q), sequence level.
    pub ratio: f64,
    pub advantage: f64,
    pub epsilon: f64,
}

impl RatioInput {
    pub fn new(ratio: f64, advantage: f64, epsilon: f64) -> Result<Self, GrpoError> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(GrpoError::InvalidInput(format!("ratio {ratio} must be positive and finite")));
        }
        check_epsilon(epsilon)?;
        Ok(Self { ratio, advantage, epsilon })
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), GrpoError> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(GrpoError::InvalidInput(format!("epsilon {epsilon} must lie in (0, 1)")))
    }
}

pub fn clip(ratio: f64, epsilon: f64) -> f64 {
    ratio.clamp(1.0 - epsilon, 1.0 + epsilon)
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`
pub fn clipped_term(input: RatioInput) -> f64 {
    let RatioInput { ratio, advantage, epsilon } = input;
    (ratio * advantage).min(clip(ratio, epsilon) * advantage)
}

/// One prompt's sampled group: the policy ratios aligned index-wise with the
/// group's advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub ratios: Vec<f64>,
    pub advantages: AdvantageSet,
}

fn check_group(group: &GroupBatch, idx: usize) -> Result<(), GrpoError> {
    if group.ratios.len() != group.advantages.len() {
        return Err(GrpoError::ShapeMismatch(format!(
            "group {idx}: {} ratios vs {} advantages",
            group.ratios.len(),
            group.advantages.len()
        )));
    }
    if group.ratios.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    Ok(())
}

/// Mean over groups of `(1/G) * sum_i clipped_term(r_i, A_i)`. No KL term.
pub fn objective(groups: &[GroupBatch], epsilon: f64) -> Result<f64, GrpoError> {
    check_epsilon(epsilon)?;
    if groups.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let mut total = 0.0;
    for (idx, group) in groups.iter().enumerate() {
        check_group(group, idx)?;
        let g = group.ratios.len() as f64;
        let mut sum = 0.0;
        for (&r, &a) in group.ratios.iter().zip(&group.advantages.advantages) {
            sum += clipped_term(RatioInput::new(r, a, epsilon)?);
        }
        total += sum / g;
    }
    Ok(total / groups.len() as f64)
}

/// Analytic subgradient of [`objective`] with respect to each sample's
/// log-probability, taking `ratio = exp(logp - logp_old)`.
///
/// Where the min selects the clipped branch outside the trust region the
/// gradient is zero; elsewhere it is `A * r / (G * num_groups)`. At the kinks
/// the unclipped branch is chosen.
pub fn objective_logprob_gradient(groups: &[GroupBatch], epsilon: f64) -> Result<Vec<Vec<f64>>, GrpoError> {
    check_epsilon(epsilon)?;
    if groups.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let scale = 1.0 / groups.len() as f64;
    groups
        .iter()
        .enumerate()
        .map(|(idx, group)| {
            check_group(group, idx)?;
            let g = group.ratios.len() as f64;
            Ok(group
                .ratios
                .iter()
                .zip(&group.advantages.advantages)
                .map(|(&r, &a)| {
                    let unclipped = r * a;
                    let clipped = clip(r, epsilon) * a;
                    let clip_active = r < 1.0 - epsilon || r > 1.0 + epsilon;
                    if clipped < unclipped && clip_active {
                        0.0
                    } else {
                        a * r * scale / g
                    }
                })
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-7
    }

    #[test]
    fn two_of_eight() {
        let set = advantages(&[1, 1, 0, 0, 0, 0, 0, 0]).unwrap();
        assert!(close(set.mean, 0.25));
        assert!(close(set.std, 0.4330127));
        assert!(close(set.advantages[0], 1.7320508));
        assert!(close(set.advantages[1], 1.7320508));
        assert!(set.advantages[2..].iter().all(|&a| close(a, -0.5773503)));
    }

    #[test]
    fn degenerate_and_pair() {
        assert_eq!(advantages(&[0; 8]).unwrap().advantages, vec![0.0; 8]);
        assert_eq!(advantages(&[1; 3]).unwrap().advantages, vec![0.0; 3]);
        assert_eq!(advantages(&[1, 0]).unwrap().advantages, vec![1.0, -1.0]);
        assert_eq!(advantages(&[]), Err(GrpoError::EmptyGroup));
        assert!(advantages(&[2]).is_err());
    }

    #[test]
    fn sample_std_variant() {
        let set = advantages_with(&[1, 0], StdKind::Sample).unwrap();
        assert!(close(set.std, std::f64::consts::FRAC_1_SQRT_2));
        assert!(advantages_with(&[1], StdKind::Sample).unwrap().is_degenerate());
    }

    #[test]
    fn clipped_examples() {
        assert!(close(clipped_term(RatioInput::new(1.5, 1.0, 0.2).unwrap()), 1.2));
        assert!(close(clipped_term(RatioInput::new(1.0, -3.25, 0.1).unwrap()), -3.25));
        assert!(close(clipped_term(RatioInput::new(0.5, -1.0, 0.2).unwrap()), -0.8));
        assert!(RatioInput::new(0.0, 1.0, 0.2).is_err());
        assert!(RatioInput::new(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn objective_examples() {
        let adv = advantages(&[1, 0]).unwrap();
        let g = GroupBatch { ratios: vec![1.5, 0.5], advantages: adv };
        assert!(close(objective(&[g], 0.2).unwrap(), 0.2));

        let adv = advantages(&[1, 0, 0, 1, 1]).unwrap();
        let g = GroupBatch { ratios: vec![1.0; 5], advantages: adv };
        assert!(objective(&[g], 0.2).unwrap().abs() < 1e-12);

        let adv = advantages(&[1, 1, 1]).unwrap();
        let g = GroupBatch { ratios: vec![3.0, 0.1, 1.7], advantages: adv };
        assert_eq!(objective(&[g], 0.2).unwrap(), 0.0);
    }

    #[test]
    fn objective_shape_mismatch() {
        let g = GroupBatch { ratios: vec![1.0], advantages: advantages(&[1, 0]).unwrap() };
        assert!(matches!(objective(&[g], 0.2), Err(GrpoError::ShapeMismatch(_))));
    }
}
