//! Randomized concurrent history generation for checker-backed stress
//! runs: short bounded runs with a seeded per-thread operation mix over a
//! count-aggregate tree, recorded for offline checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::count_spec;
use crate::backbone::{Tree, TreeConfig, VariantKind};
use crate::verify::history::History;

#[derive(Clone, Debug)]
pub struct StressConfig {
    pub kind: VariantKind,
    pub threads: usize,
    pub ops_per_thread: usize,
    pub key_range: i64,
    /// Percentages; the remainder after insert+delete+contains goes to rank
    /// queries.
    pub insert_pct: u32,
    pub delete_pct: u32,
    pub contains_pct: u32,
    pub seed: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            kind: VariantKind::FastUpdate,
            threads: 3,
            ops_per_thread: 2,
            key_range: 8,
            insert_pct: 40,
            delete_pct: 30,
            contains_pct: 20,
            seed: 1,
        }
    }
}

/// Runs one bounded concurrent episode and returns its recorded history
/// (count aggregate; queries are rank probes).
pub fn run_random_history(cfg: &StressConfig) -> History {
    let tree = Tree::with_config(
        cfg.kind,
        count_spec::<i64>(),
        cfg.threads,
        TreeConfig {
            record_history: true,
            ..TreeConfig::default()
        },
    )
    .expect("stress tree");
    std::thread::scope(|s| {
        for t in 0..cfg.threads {
            let mut h = tree.register().expect("registration");
            let cfg = cfg.clone();
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t as u64 * 0x9E37));
                for _ in 0..cfg.ops_per_thread {
                    let key = rng.gen_range(0..cfg.key_range);
                    let dice = rng.gen_range(0..100u32);
                    if dice < cfg.insert_pct {
                        h.insert(key, key * 10);
                    } else if dice < cfg.insert_pct + cfg.delete_pct {
                        h.delete(key);
                    } else if dice < cfg.insert_pct + cfg.delete_pct + cfg.contains_pct {
                        h.contains(key);
                    } else {
                        let _ = h.rank(rng.gen_range(0..=cfg.key_range));
                    }
                }
            });
        }
    });
    History::new(tree.drain_history())
}
