use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SubjectCondition;
use crate::attention::MAX_SUBJECTS;
use crate::error::{Error, Result};

/// Subject conditions laid out in the fixed slot grid, after dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedConditions {
    /// Exactly [`MAX_SUBJECTS`] slots; `None` slots use the empty tokens.
    pub slots: Vec<Option<SubjectCondition>>,
    pub caption_dropped: bool,
    pub conditions_dropped: bool,
}

impl PaddedConditions {
    /// Every slot empty and the caption kept or dropped as requested.
    pub fn all_empty(caption_dropped: bool) -> Self {
        Self { slots: vec![None; MAX_SUBJECTS], caption_dropped, conditions_dropped: true }
    }

    pub fn present_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Pads `subjects` to the slot grid and applies caption and condition dropout.
///
/// Caption and condition drops are independent draws with probability
/// `p_drop` each; a condition drop empties all slots at once. When more than
/// [`MAX_SUBJECTS`] subjects are given, the largest boxes are kept.
pub fn pad_and_dropout(subjects: &[SubjectCondition], p_drop: f64, seed: u64) -> Result<PaddedConditions> {
    if subjects.is_empty() {
        return Err(Error::invalid("a training sample needs at least one subject"));
    }
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::invalid(format!("drop probability {p_drop} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let caption_dropped = rng.gen::<f64>() < p_drop;
    let conditions_dropped = rng.gen::<f64>() < p_drop;

    let mut slots: Vec<Option<SubjectCondition>> = vec![None; MAX_SUBJECTS];
    if !conditions_dropped {
        let mut order: Vec<usize> = (0..subjects.len()).collect();
        if subjects.len() > MAX_SUBJECTS {
            order.sort_by(|&a, &b| subjects[b].bbox.area().total_cmp(&subjects[a].bbox.area()).then(a.cmp(&b)));
            order.truncate(MAX_SUBJECTS);
            order.sort_unstable();
        }
        for (slot, &i) in order.iter().enumerate() {
            subjects[i].bbox.validate()?;
            slots[slot] = Some(subjects[i].clone());
        }
    }
    Ok(PaddedConditions { slots, caption_dropped, conditions_dropped })
}
