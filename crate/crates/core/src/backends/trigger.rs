use super::{check_segment, BackendDescriptor, BackendError, LanguageModel, SegmentRows, ANALYTIC_MAX_SEGMENT_LEN};
use crate::types::{TokenId, Vocab};

/// Synthetic long-range dependency: the target token `u` gets probability
/// `p_hi` when the trigger `t` occurs among the last `horizon` context tokens
/// and `p_lo` otherwise. The remaining mass is spread uniformly.
#[derive(Debug, Clone)]
pub struct TriggerModel {
    desc: BackendDescriptor,
    trigger: TokenId,
    target: TokenId,
    horizon: usize,
    p_hi: f64,
    p_lo: f64,
    row_hi: Vec<f64>,
    row_lo: Vec<f64>,
}

impl TriggerModel {
    pub fn new(
        vocab: Vocab,
        trigger: TokenId,
        target: TokenId,
        horizon: usize,
        p_hi: f64,
        p_lo: f64,
    ) -> Result<Self, BackendError> {
        let v = vocab.size();
        let invalid = |m: String| Err(BackendError::InvalidModel(m));
        if trigger as usize >= v || target as usize >= v {
            return invalid(format!("trigger/target ids must be below {v}"));
        }
        if trigger == target {
            return invalid("trigger and target must differ".into());
        }
        if horizon < 1 {
            return invalid("horizon must be at least 1".into());
        }
        if !(0.0 < p_lo && p_lo < p_hi && p_hi < 1.0) {
            return invalid(format!("need 0 < p_lo < p_hi < 1, got p_lo={p_lo}, p_hi={p_hi}"));
        }
        let row = |p: f64| {
            let rest = ((1.0 - p) / (v - 1) as f64).ln();
            let mut r = vec![rest; v];
            r[target as usize] = p.ln();
            r
        };
        Ok(Self {
            desc: BackendDescriptor {
                name: format!("trigger:{trigger}:{target}:{horizon}:{p_hi}:{p_lo}"),
                vocab,
                max_segment_len: ANALYTIC_MAX_SEGMENT_LEN,
            },
            trigger,
            target,
            horizon,
            p_hi,
            p_lo,
            row_hi: row(p_hi),
            row_lo: row(p_lo),
        })
    }

    pub fn trigger(&self) -> TokenId {
        self.trigger
    }

    pub fn target(&self) -> TokenId {
        self.target
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn p_hi(&self) -> f64 {
        self.p_hi
    }

    pub fn p_lo(&self) -> f64 {
        self.p_lo
    }

    /// Log-distribution when the trigger is (or is not) within the horizon.
    pub fn row(&self, triggered: bool) -> &[f64] {
        if triggered {
            &self.row_hi
        } else {
            &self.row_lo
        }
    }

    pub fn is_triggered(&self, context: &[TokenId]) -> bool {
        let from = context.len().saturating_sub(self.horizon);
        context[from..].contains(&self.trigger)
    }
}

impl LanguageModel for TriggerModel {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn evaluate_segment(&self, segment: &[TokenId]) -> Result<SegmentRows, BackendError> {
        check_segment(&self.desc, segment)?;
        let mut rows = SegmentRows::with_capacity(self.desc.vocab.size(), segment.len());
        // position of the most recent trigger seen so far
        let mut last_trigger: Option<usize> = None;
        for (i, &tok) in segment.iter().enumerate() {
            if tok == self.trigger {
                last_trigger = Some(i);
            }
            let hit = last_trigger.is_some_and(|j| i - j < self.horizon);
            rows.push(self.row(hit));
        }
        Ok(rows)
    }

    fn evaluate_last(&self, context: &[TokenId]) -> Result<Vec<f64>, BackendError> {
        check_segment(&self.desc, context)?;
        Ok(self.row(self.is_triggered(context)).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::direct_reduced_probability;

    fn vocab(n: usize) -> Vocab {
        Vocab::new((0..n).map(|i| format!("w{i}")).collect()).unwrap()
    }

    fn model(h: usize) -> TriggerModel {
        TriggerModel::new(vocab(8), 0, 1, h, 0.9, 0.1).unwrap()
    }

    #[test]
    fn trigger_at_position_two() {
        let m = model(10);
        let rows = m.evaluate_segment(&[3, 0, 4, 5, 6]).unwrap();
        assert!((rows.row(0)[1].exp() - 0.1).abs() < 1e-15);
        for i in 1..5 {
            assert!((rows.row(i)[1].exp() - 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn trigger_outside_horizon() {
        let h = 6;
        let m = model(h);
        let mut ctx = vec![0];
        ctx.extend(std::iter::repeat_n(3, h));
        assert_eq!(ctx.len(), h + 1);
        let row = direct_reduced_probability(&m, &ctx).unwrap();
        assert_eq!(row[1], 0.1f64.ln());
        // one token shorter brings the trigger back into range
        assert_eq!(direct_reduced_probability(&m, &ctx[..h]).unwrap()[1], 0.9f64.ln());
        let rows = m.evaluate_segment(&ctx).unwrap();
        assert_eq!(rows.row(h - 1)[1], 0.9f64.ln());
        assert_eq!(rows.row(h)[1], 0.1f64.ln());
    }

    #[test]
    fn rows_are_normalized_two_point() {
        let m = model(3);
        for hit in [true, false] {
            let s: f64 = m.row(hit).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(TriggerModel::new(vocab(8), 0, 0, 3, 0.9, 0.1).is_err());
        assert!(TriggerModel::new(vocab(8), 0, 1, 0, 0.9, 0.1).is_err());
        assert!(TriggerModel::new(vocab(8), 0, 1, 3, 0.1, 0.9).is_err());
        assert!(TriggerModel::new(vocab(8), 0, 9, 3, 0.9, 0.1).is_err());
        assert!(TriggerModel::new(vocab(8), 0, 1, 3, 1.0, 0.1).is_err());
    }
}
