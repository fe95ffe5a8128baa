use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::voxel::{iou, VoxelGrid};

/// Size of the database the oracle may search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnnK {
    Count(usize),
    Full,
}

/// Index (into `db`) and IoU of the entry most similar to `query`, searching
/// the first `K` entries of a seeded permutation of `db` (a uniform
/// `K`-subset; subsets for growing `K` under one seed are nested). Ties go to
/// the lowest index.
pub fn onn_retrieve(
    query: &VoxelGrid,
    db: &[VoxelGrid],
    k: OnnK,
    seed: u64,
) -> Result<(usize, f64)> {
    if db.is_empty() {
        return Err(Error::Parameter("retrieval from an empty database".into()));
    }
    let mut subset: Vec<usize> = match k {
        OnnK::Full => (0..db.len()).collect(),
        OnnK::Count(k) => {
            if k == 0 || k > db.len() {
                return Err(Error::Parameter(format!(
                    "K = {k} for a database of {}",
                    db.len()
                )));
            }
            let mut order: Vec<usize> = (0..db.len()).collect();
            order.shuffle(&mut rng_for(seed, &["onn"]));
            order.truncate(k);
            order
        }
    };
    subset.sort_unstable();
    let mut best = (subset[0], -1.0);
    for i in subset {
        let s = iou(query, &db[i])?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}

/// ONN score of each query against a per-episode subset of `db`; episode `e`
/// of query `q` uses seed `(seed, q, e)`. Returns the mean over episodes per
/// query.
pub fn onn_scores(
    queries: &[&VoxelGrid],
    db: &[VoxelGrid],
    k: OnnK,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::Parameter("at least one episode is needed".into()));
    }
    queries
        .iter()
        .enumerate()
        .map(|(q, query)| {
            let mut total = 0.0;
            for e in 0..episodes {
                let s = crate::seed::derive_seed(
                    seed,
                    &["onn-episode", &q.to_string(), &e.to_string()],
                );
                total += onn_retrieve(query, db, k, s)?.1;
            }
            Ok(total / episodes as f64)
        })
        .collect()
}
