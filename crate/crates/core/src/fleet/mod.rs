//! Greenhouse fleet: edge units running local agents and a central brain
//! that hands out targets, collects telemetry and can merge Q-tables.

pub mod brain;
pub mod protocol;
pub mod unit;

pub use brain::{brain_serve, BrainConfig, BrainHandle, BrainStats};
pub use protocol::{FleetMessage, MessageKind, Payload, TelemetrySnapshot, UnitId};
pub use unit::{unit_run, UnitConfig, UnitOutcome};

use crate::error::{Error, Result};
use crate::rl::QTable;

/// Element-wise mean of the values, sum of the visit counts.
///
/// Each cell is summed in sorted order, so the result does not depend on the
/// order of `tables`; a cell where every table agrees keeps that exact value.
pub fn merge_qtables(tables: &[QTable]) -> Result<QTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::validation("nothing to merge"))?;
    if let Some(other) = tables.iter().find(|t| !t.same_shape(first)) {
        return Err(Error::ShapeMismatch(format!(
            "cannot merge {}x{:?} with {}x{:?}",
            first.num_states(),
            first.action_deltas(),
            other.num_states(),
            other.action_deltas()
        )));
    }
    let n = first.values().len();
    let k = tables.len() as f64;
    let mut cell = Vec::with_capacity(tables.len());
    let mut values = Vec::with_capacity(n);
    let mut visits = Vec::with_capacity(n);
    for i in 0..n {
        cell.clear();
        cell.extend(tables.iter().map(|t| t.values()[i]));
        if cell.iter().all(|v| v.to_bits() == cell[0].to_bits()) {
            values.push(cell[0]);
        } else {
            cell.sort_by(f64::total_cmp);
            values.push(cell.iter().sum::<f64>() / k);
        }
        visits.push(tables.iter().map(|t| t.visit_counts()[i]).sum());
    }
    QTable::from_parts(
        first.num_states(),
        first.action_deltas().to_vec(),
        values,
        visits,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::{ActionIndex, StateIndex};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DELTAS: [i32; 5] = [-32, -8, 0, 8, 32];

    fn random_table(seed: u64) -> QTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..320).map(|_| rng.random_range(-10.0..10.0)).collect();
        let visits = (0..320).map(|_| rng.random_range(0..50)).collect();
        QTable::from_parts(64, DELTAS.to_vec(), values, visits).unwrap()
    }

    #[test]
    fn mean_of_one_is_identity() {
        let t = random_table(1);
        assert_eq!(merge_qtables(std::slice::from_ref(&t)).unwrap(), t);
    }

    #[test]
    fn opposite_tables_cancel() {
        let t = random_table(2);
        let neg = QTable::from_parts(
            64,
            DELTAS.to_vec(),
            t.values().iter().map(|v| -v).collect(),
            vec![0; 320],
        )
        .unwrap();
        let m = merge_qtables(&[t, neg]).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_way_cell_mean() {
        let s = StateIndex::new(12).unwrap();
        let a = ActionIndex::new(3);
        let tables: Vec<QTable> = [0.1, 0.2, 0.6]
            .iter()
            .map(|&v| {
                let mut t = QTable::new(64, DELTAS.to_vec()).unwrap();
                t.set(s, a, v).unwrap();
                t
            })
            .collect();
        let m = merge_qtables(&tables).unwrap();
        assert!((m.get(s, a).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = QTable::new(64, DELTAS.to_vec()).unwrap();
        let b = QTable::new(64, vec![-8, 0, 8]).unwrap();
        assert!(matches!(
            merge_qtables(&[a, b]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(merge_qtables(&[]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(seeds in proptest::collection::vec(any::<u64>(), 1..6), rot in 0usize..6) {
            let tables: Vec<QTable> = seeds.iter().map(|&s| random_table(s)).collect();
            let mut rotated = tables.clone();
            rotated.rotate_left(rot % tables.len());
            rotated.reverse();
            prop_assert_eq!(merge_qtables(&tables).unwrap(), merge_qtables(&rotated).unwrap());
        }

        #[test]
        fn idempotent_values_on_copies(seed in any::<u64>(), copies in 1usize..8) {
            let t = random_table(seed);
            let m = merge_qtables(&vec![t.clone(); copies]).unwrap();
            prop_assert_eq!(m.values(), t.values());
            let summed: Vec<u64> = t.visit_counts().iter().map(|v| v * copies as u64).collect();
            prop_assert_eq!(m.visit_counts(), summed.as_slice());
        }
    }
}
