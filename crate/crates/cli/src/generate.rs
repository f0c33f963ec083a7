use anyhow::Result;
use imd_data::{gen_multi_instance_pair, gen_synthetic_pair, PairRecord, Supervision};
use serde::{Deserialize, Serialize};

use crate::config::DataSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Warp,
    MultiInstance,
}

/// `n_train` then `n_test` pairs with consecutive seeds starting at `seed`.
pub fn generate(kind: DataKind, n_train: usize, n_test: usize, seed: u64, s: &DataSettings) -> Result<Vec<PairRecord>> {
    let dims = (s.width, s.height);
    (0..n_train + n_test)
        .map(|i| {
            let pair_seed = seed + i as u64;
            let split = if i < n_train { "train" } else { "test" }.to_string();
            Ok(match kind {
                DataKind::Warp => {
                    let p = gen_synthetic_pair(pair_seed, s.texture, s.warp_magnitude, dims)?;
                    PairRecord { id: p.id, image_a: p.image_a, image_b: p.image_b, supervision: Supervision::Homography(p.h), split }
                }
                DataKind::MultiInstance => {
                    let p = gen_multi_instance_pair(pair_seed, s.instances, dims)?;
                    PairRecord {
                        id: p.id,
                        image_a: p.image_a,
                        image_b: p.image_b,
                        supervision: Supervision::Masks {
                            instances: p.instances,
                            designated: p.designated,
                            background: Some(p.background),
                            motions: Some(p.motions),
                        },
                        split,
                    }
                }
            })
        })
        .collect()
}
