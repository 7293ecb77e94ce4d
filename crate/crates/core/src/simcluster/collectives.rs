//! Reference collectives over the members of one group. Reductions sum in
//! ascending member order; shards split the last dimension.

use super::tensor::LogicalTensor;
use super::SimError;

fn check_shapes(inputs: &[LogicalTensor]) -> Result<(), SimError> {
    if let Some(first) = inputs.first() {
        if let Some(bad) = inputs.iter().position(|t| t.shape() != first.shape()) {
            return Err(SimError::Shape(format!(
                "group member {bad} supplies shape {:?}, member 0 supplies {:?}",
                inputs[bad].shape(),
                first.shape()
            )));
        }
    }
    Ok(())
}

/// Member `i` receives slice `i` of the elementwise sum.
pub fn ref_reduce_scatter(inputs: &[LogicalTensor]) -> Result<Vec<LogicalTensor>, SimError> {
    check_shapes(inputs)?;
    let Some(first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let mut total = first.clone();
    for t in &inputs[1..] {
        total.add_assign(t)?;
    }
    total.split_cols(inputs.len())
}

/// Every member receives the concatenation of all shards in member order.
pub fn ref_all_gather(shards: &[LogicalTensor]) -> Result<Vec<LogicalTensor>, SimError> {
    check_shapes(shards)?;
    let full = LogicalTensor::concat_cols(shards)?;
    Ok(vec![full; shards.len()])
}

pub fn ref_all_reduce(inputs: &[LogicalTensor]) -> Result<Vec<LogicalTensor>, SimError> {
    ref_all_gather(&ref_reduce_scatter(inputs)?)
}

/// One pairwise round: member `src` sends to `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairwiseStep {
    pub round: usize,
    pub src: usize,
    pub dst: usize,
}

/// The pairwise schedule: in round `i` (1-based) member `r` sends to
/// `(r + i) mod size` and receives from `(r - i) mod size`.
pub fn pairwise_schedule(size: usize) -> Vec<PairwiseStep> {
    (1..size)
        .flat_map(|i| {
            (0..size).map(move |r| PairwiseStep {
                round: i,
                src: r,
                dst: (r + i) % size,
            })
        })
        .collect()
}

/// `buffers[i][j]` is what member `i` sends to member `j`; the result
/// `out[j][i]` is what member `j` received from member `i`. Exactly
/// `size - 1` rounds are executed; the diagonal never leaves its owner.
pub fn ref_all_to_all_pairwise(buffers: Vec<Vec<LogicalTensor>>) -> Result<Vec<Vec<LogicalTensor>>, SimError> {
    let size = buffers.len();
    if buffers.iter().any(|row| row.len() != size) {
        return Err(SimError::Shape(format!("all-to-all expects {size} buffers per member")));
    }
    let mut out: Vec<Vec<Option<LogicalTensor>>> = vec![vec![None; size]; size];
    let mut cells: Vec<Vec<Option<LogicalTensor>>> =
        buffers.into_iter().map(|row| row.into_iter().map(Some).collect()).collect();
    for r in 0..size {
        out[r][r] = cells[r][r].take();
    }
    for step in pairwise_schedule(size) {
        out[step.dst][step.src] = cells[step.src][step.dst].take();
    }
    Ok(out
        .into_iter()
        .map(|row| row.into_iter().map(|c| c.expect("every cell delivered once")).collect())
        .collect())
}
