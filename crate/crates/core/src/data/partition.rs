use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::seed::derive_rng;

/// Example index → teacher index over one private split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub num_teachers: usize,
    pub assignment: Vec<usize>,
}

impl PartitionPlan {
    /// Example indices per teacher, each in ascending order.
    pub fn slices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_teachers];
        for (i, &t) in self.assignment.iter().enumerate() {
            out[t].push(i);
        }
        out
    }

    pub fn slice_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_teachers];
        for &t in &self.assignment {
            sizes[t] += 1;
        }
        sizes
    }
}

/// Deals a seeded permutation of `0..examples` round-robin, so teachers
/// with lower indices absorb the remainder.
pub fn partition(examples: usize, num_teachers: usize, seed: u64) -> Result<PartitionPlan, DataError> {
    if num_teachers == 0 || num_teachers > examples {
        return Err(DataError::TooManyTeachers {
            teachers: num_teachers,
            examples,
        });
    }
    let mut order: Vec<usize> = (0..examples).collect();
    order.shuffle(&mut derive_rng(seed, "partition", 0));
    let mut assignment = vec![0; examples];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % num_teachers;
    }
    Ok(PartitionPlan {
        num_teachers,
        assignment,
    })
}
