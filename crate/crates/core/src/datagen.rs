//! Synthetic data: forward sampling, masking, replication and splitting.

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::model::CptSet;
use crate::network::Network;
use crate::rng::{pick, StreamKey};

/// Draws `num_cases` complete cases by ancestral sampling.
pub fn forward_sample(net: &Network, cpts: &CptSet, num_cases: usize, seed: StreamKey) -> DataMatrix {
    let n = net.num_vars();
    let mut triples = Vec::with_capacity(n * num_cases);
    let mut case = vec![0u16; n];
    for c in 0..num_cases {
        let key = seed.child(c as u64);
        for &v in net.topo_order() {
            let row = cpts.row(v, net.row_index(v, &case));
            case[v] = pick(row, 1.0, key.child(v as u64).uniform()) as u16;
        }
        triples.extend(case.iter().enumerate().map(|(v, &s)| (v, c, s)));
    }
    DataMatrix::from_triples(n, num_cases, triples).expect("generated entries are in range")
}

/// Removes each present entry independently with probability `hide_fraction`.
pub fn mask(data: &DataMatrix, hide_fraction: f64, seed: StreamKey) -> Result<DataMatrix> {
    if !(0.0..=1.0).contains(&hide_fraction) {
        return Err(Error::InvalidConfig(format!("hide fraction {hide_fraction} not in [0, 1]")));
    }
    let kept =
        data.entries().filter(|&(v, c, _)| seed.child(c as u64).child(v as u64).uniform() >= hide_fraction).collect();
    DataMatrix::from_triples(data.num_vars(), data.num_cases(), kept)
}

/// Tiles the cases `times` times: case `c` of copy `j` becomes case
/// `j * num_cases + c`.
pub fn replicate(data: &DataMatrix, times: usize) -> Result<DataMatrix> {
    if times == 0 {
        return Err(Error::InvalidConfig("replication factor must be at least 1".into()));
    }
    let m = data.num_cases();
    let triples = (0..times).flat_map(|j| data.entries().map(move |(v, c, s)| (v, j * m + c, s))).collect();
    DataMatrix::from_triples(data.num_vars(), m * times, triples)
}

/// Partitions the present entries: each goes to the training side with
/// probability `train_fraction`. Both sides keep the full shape.
pub fn train_test_split(data: &DataMatrix, train_fraction: f64, seed: StreamKey) -> Result<(DataMatrix, DataMatrix)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("train fraction {train_fraction} must lie strictly between 0 and 1")));
    }
    let (train, test): (Vec<_>, Vec<_>) =
        data.entries().partition(|&(v, c, _)| seed.child(c as u64).child(v as u64).uniform() < train_fraction);
    Ok((
        DataMatrix::from_triples(data.num_vars(), data.num_cases(), train)?,
        DataMatrix::from_triples(data.num_vars(), data.num_cases(), test)?,
    ))
}
