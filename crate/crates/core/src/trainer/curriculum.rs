/// Position in the unroll-length curriculum.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Curriculum {
    pub stage: usize,
    pub epochs_in_stage: usize,
    /// Validation meta losses recorded in the current stage.
    pub history: Vec<f64>,
}

/// Moves to the next stage once the last `patience` validations failed to
/// beat the best one before them, or once the stage used `cap` meta-epochs.
/// The last stage is never left.
pub fn curriculum_advance(state: &Curriculum, stages: &[usize], patience: usize, cap: usize) -> Curriculum {
    if state.stage + 1 >= stages.len() {
        return state.clone();
    }
    let h = &state.history;
    let stalled = patience > 0 && h.len() > patience && {
        let split = h.len() - patience;
        let before = h[..split].iter().cloned().fold(f64::INFINITY, f64::min);
        let recent = h[split..].iter().cloned().fold(f64::INFINITY, f64::min);
        recent >= before
    };
    if stalled || state.epochs_in_stage >= cap {
        Curriculum {
            stage: state.stage + 1,
            epochs_in_stage: 0,
            history: Vec::new(),
        }
    } else {
        state.clone()
    }
}
