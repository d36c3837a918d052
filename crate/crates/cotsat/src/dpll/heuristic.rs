use crate::formula::{CnfFormula, Literal, PartialAssignment};

/// Choice functions for the two nondeterministic rules of the solver.
pub trait Heuristic: Sync {
    /// The decision literal. Called only when the formula is neither
    /// satisfied nor in conflict and nothing is deducible.
    fn decide(&self, f: &CnfFormula, a: &PartialAssignment) -> Literal;

    /// Which deducible literal to propagate. `candidates` is nonempty and
    /// sorted by lane.
    fn propagate(&self, f: &CnfFormula, a: &PartialAssignment, candidates: &[Literal]) -> Literal;
}

/// Smallest open variable that occurs in the formula, positive polarity;
/// propagation takes the lowest lane.
#[derive(Debug, Clone, Copy, Default)]
pub struct LowestId;

impl Heuristic for LowestId {
    fn decide(&self, f: &CnfFormula, a: &PartialAssignment) -> Literal {
        (1..=f.num_vars())
            .find(|&v| !a.is_assigned(v) && f.mentions_var(v))
            .map(|v| Literal::new(v as i32))
            .expect("decide called with no open variable in the formula")
    }

    fn propagate(&self, _f: &CnfFormula, _a: &PartialAssignment, candidates: &[Literal]) -> Literal {
        candidates[0]
    }
}

/// The compiled model's choices.
///
/// Clauses are scored by `-10` per true literal and `+1` per false literal;
/// among the top-scoring clauses every literal lane is counted. Decisions
/// take the open literal with the highest count, propagation the deducible
/// literal with the highest count, and remaining ties go to the lowest lane.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelMirror;

impl ModelMirror {
    /// Occurrence count of each lane among the top-scoring clauses.
    pub fn lane_counts(f: &CnfFormula, a: &PartialAssignment) -> Vec<usize> {
        let p = f.num_vars();
        let score = |c: &[Literal]| -> i64 {
            c.iter()
                .map(|&l| match a.lit_value(l) {
                    Some(true) => -10,
                    Some(false) => 1,
                    None => 0,
                })
                .sum()
        };
        let mut counts = vec![0usize; 2 * p];
        let Some(best) = f.clauses().iter().map(|c| score(c)).max() else {
            return counts;
        };
        for c in f.clauses().iter().filter(|c| score(c) == best) {
            for l in c {
                counts[l.lane(p)] += 1;
            }
        }
        counts
    }

    fn best(counts: &[usize], lanes: impl Iterator<Item = usize>) -> Option<usize> {
        // Strictly greater keeps the lowest lane on ties.
        lanes.fold(None, |best: Option<usize>, lane| match best {
            Some(b) if counts[lane] <= counts[b] => Some(b),
            _ => Some(lane),
        })
    }
}

impl Heuristic for ModelMirror {
    fn decide(&self, f: &CnfFormula, a: &PartialAssignment) -> Literal {
        let p = f.num_vars();
        let counts = Self::lane_counts(f, a);
        let open = (0..2 * p).filter(|&lane| !a.is_assigned(Literal::from_lane(lane, p).var()));
        let lane = Self::best(&counts, open).expect("decide called with every variable assigned");
        Literal::from_lane(lane, p)
    }

    fn propagate(&self, f: &CnfFormula, a: &PartialAssignment, candidates: &[Literal]) -> Literal {
        let p = f.num_vars();
        let counts = Self::lane_counts(f, a);
        let lane = Self::best(&counts, candidates.iter().map(|l| l.lane(p))).expect("nonempty candidates");
        Literal::from_lane(lane, p)
    }
}
