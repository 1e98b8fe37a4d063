//! Library half of the command-line front end: workload configuration and
//! the bench runner, the checker-backed stress loop, and the op-script
//! interpreter behind one-shot queries.

pub mod script;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aggtree::verify::audit::{audit_tree, AuditReport};
use aggtree::verify::checker::{check_linearizable, Budget, Verdict};
use aggtree::verify::history::History;
use aggtree::verify::stress::{run_random_history, StressConfig};
use aggtree::verify::OpCounters;
use aggtree::{aggregate, QueryError, RangeSpec, ThreadHandle, Tree, TreeConfig, VariantKind};

/// Operation mix in percent; must sum to 100.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mix {
    pub insert: u32,
    pub delete: u32,
    pub contains: u32,
    pub query: u32,
}

impl Mix {
    pub fn parse(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(format!("mix {s:?} is not of the form i:d:c:q"));
        }
        let nums: Vec<u32> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| format!("bad mix component {p:?}")))
            .collect::<Result<_, _>>()?;
        let mix = Mix {
            insert: nums[0],
            delete: nums[1],
            contains: nums[2],
            query: nums[3],
        };
        if mix.insert + mix.delete + mix.contains + mix.query != 100 {
            return Err(format!("mix {s:?} does not sum to 100"));
        }
        Ok(mix)
    }
}

/// Named query kind issued by the bench worker with randomized arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    Rank,
    Select,
    AggLess,
    Range,
    Avg,
    Var,
    Median,
}

impl QueryKind {
    pub fn parse(s: &str) -> Result<Self, String> {
        Ok(match s {
            "rank" => QueryKind::Rank,
            "select" => QueryKind::Select,
            "aggless" => QueryKind::AggLess,
            "range" => QueryKind::Range,
            "avg" => QueryKind::Avg,
            "var" => QueryKind::Var,
            "median" => QueryKind::Median,
            other => return Err(format!("unknown query kind {other:?}")),
        })
    }
}

#[derive(Clone, Debug)]
pub struct WorkloadConfig {
    pub variant: VariantKind,
    pub threads: usize,
    /// Key-space size; keys are drawn from `0..keys` and half are prefilled.
    pub keys: i64,
    /// Total operation count across all threads.
    pub ops: u64,
    pub mix: Mix,
    pub query: QueryKind,
    pub agg: String,
    pub seed: u64,
    pub path_record: bool,
    pub tid_in_lock: bool,
    pub backoff: bool,
    /// Zero the wall-clock-derived CSV columns for reproducible output.
    pub no_timing: bool,
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.threads == 0 {
            return Err("threads must be >= 1".into());
        }
        if self.keys < 1 {
            return Err("key range must be >= 1".into());
        }
        aggregate::by_name::<i64>(&self.agg).map_err(|e| e.to_string())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpClass {
    Insert,
    Delete,
    Contains,
    Query,
}

impl OpClass {
    pub fn name(&self) -> &'static str {
        match self {
            OpClass::Insert => "insert",
            OpClass::Delete => "delete",
            OpClass::Contains => "contains",
            OpClass::Query => "query",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub variant: VariantKind,
    pub threads: usize,
    pub opkind: OpClass,
    pub count: u64,
    pub ops_per_sec: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub chain_steps_avg: f64,
    pub registry_scans_avg: f64,
}

pub const CSV_HEADER: &str =
    "variant,threads,opkind,count,ops_per_sec,p50_us,p99_us,chain_steps_avg,registry_scans_avg";

pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.1},{:.3},{:.3},{:.4},{:.4}\n",
            r.variant,
            r.threads,
            r.opkind.name(),
            r.count,
            r.ops_per_sec,
            r.p50_us,
            r.p99_us,
            r.chain_steps_avg,
            r.registry_scans_avg
        ));
    }
    out
}

#[derive(Default)]
struct KindStats {
    count: u64,
    latencies_ns: Vec<u64>,
    chain_steps: u64,
    registry_scans: u64,
}

impl KindStats {
    fn absorb_op(&mut self, elapsed_ns: u64, c: &OpCounters) {
        self.count += 1;
        self.latencies_ns.push(elapsed_ns);
        self.chain_steps += c.chain_steps + c.step3_chain_steps;
        self.registry_scans += c.aux_registry_scans + c.gather_scans;
    }

    fn merge(&mut self, other: KindStats) {
        self.count += other.count;
        self.latencies_ns.extend(other.latencies_ns);
        self.chain_steps += other.chain_steps;
        self.registry_scans += other.registry_scans;
    }
}

fn percentile_us(sorted_ns: &[u64], p: f64) -> f64 {
    if sorted_ns.is_empty() {
        return 0.0;
    }
    let idx = ((sorted_ns.len() as f64 - 1.0) * p).round() as usize;
    sorted_ns[idx] as f64 / 1000.0
}

pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub audit: AuditReport,
}

fn run_worker(
    handle: &mut ThreadHandle<i64>,
    cfg: &WorkloadConfig,
    tid: usize,
    ops: u64,
) -> [KindStats; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (tid as u64).wrapping_mul(0x9E3779B97F4A7C15));
    let mut stats: [KindStats; 4] = Default::default();
    for _ in 0..ops {
        let dice = rng.gen_range(0..100u32);
        let key = rng.gen_range(0..cfg.keys);
        let (class, started) = if dice < cfg.mix.insert {
            let t = Instant::now();
            handle.insert(key, key * 10);
            (OpClass::Insert, t)
        } else if dice < cfg.mix.insert + cfg.mix.delete {
            let t = Instant::now();
            handle.delete(key);
            (OpClass::Delete, t)
        } else if dice < cfg.mix.insert + cfg.mix.delete + cfg.mix.contains {
            let t = Instant::now();
            handle.contains(key);
            (OpClass::Contains, t)
        } else {
            let t = Instant::now();
            run_one_query(handle, cfg, &mut rng);
            (OpClass::Query, t)
        };
        let elapsed = started.elapsed().as_nanos() as u64;
        let idx = match class {
            OpClass::Insert => 0,
            OpClass::Delete => 1,
            OpClass::Contains => 2,
            OpClass::Query => 3,
        };
        stats[idx].absorb_op(elapsed, &handle.last_op_counters());
    }
    stats
}

fn run_one_query(handle: &mut ThreadHandle<i64>, cfg: &WorkloadConfig, rng: &mut ChaCha8Rng) {
    let k = rng.gen_range(0..=cfg.keys);
    let result: Result<(), QueryError> = match cfg.query {
        QueryKind::Rank => handle.rank(k).map(drop),
        QueryKind::Select => handle.select(rng.gen_range(0..cfg.keys)).map(drop),
        QueryKind::AggLess => handle.agg_less_than(k).map(drop),
        QueryKind::Range | QueryKind::Avg | QueryKind::Var | QueryKind::Median => {
            let a = rng.gen_range(0..cfg.keys);
            let b = rng.gen_range(a..=cfg.keys);
            RangeSpec::new(a, b).and_then(|r| match cfg.query {
                QueryKind::Range => handle.range_aggregate(r).map(drop),
                QueryKind::Avg => handle.average_in_range(r).map(drop),
                QueryKind::Var => handle.variance_in_range(r).map(drop),
                _ => handle.median_key_in_range(r).map(drop),
            })
        }
    };
    // Out-of-range selects and empty ranges are expected under random
    // arguments; they still exercise the query path.
    let _ = result;
}

/// Runs the workload and audits the quiescent tree afterwards.
pub fn run_bench(cfg: &WorkloadConfig) -> Result<BenchOutput, String> {
    cfg.validate()?;
    let spec = aggregate::by_name::<i64>(&cfg.agg).map_err(|e| e.to_string())?;
    let tree = Tree::with_config(
        cfg.variant,
        spec,
        cfg.threads,
        TreeConfig {
            path_record: cfg.path_record,
            tid_in_lock: cfg.tid_in_lock,
            backoff: cfg.backoff,
            ..TreeConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;

    let mut handles: Vec<ThreadHandle<i64>> = (0..cfg.threads)
        .map(|_| tree.register().expect("registration"))
        .collect();

    // Prefill half the key space so lookups and deletes have targets.
    // Midpoint-first order keeps the unbalanced external tree shallow: a
    // range's midpoint goes in, then the whole left half, then the right.
    {
        fn prefill(h: &mut ThreadHandle<i64>, evens: &[i64]) {
            if evens.is_empty() {
                return;
            }
            let mid = evens.len() / 2;
            h.insert(evens[mid], evens[mid] * 10);
            prefill(h, &evens[..mid]);
            prefill(h, &evens[mid + 1..]);
        }
        let evens: Vec<i64> = (0..cfg.keys).step_by(2).collect();
        prefill(&mut handles[0], &evens);
    }

    let per_thread = cfg.ops / cfg.threads as u64;
    let remainder = cfg.ops % cfg.threads as u64;
    let wall = Instant::now();
    let mut merged: [KindStats; 4] = Default::default();
    std::thread::scope(|s| {
        let joins: Vec<_> = handles
            .into_iter()
            .enumerate()
            .map(|(tid, mut h)| {
                let cfg = cfg.clone();
                let ops = per_thread + if (tid as u64) < remainder { 1 } else { 0 };
                s.spawn(move || run_worker(&mut h, &cfg, tid, ops))
            })
            .collect();
        for j in joins {
            let stats = j.join().expect("worker");
            for (m, s) in merged.iter_mut().zip(stats) {
                m.merge(s);
            }
        }
    });
    let wall_secs = wall.elapsed().as_secs_f64().max(1e-9);

    let classes = [
        OpClass::Insert,
        OpClass::Delete,
        OpClass::Contains,
        OpClass::Query,
    ];
    let mut rows = Vec::new();
    for (class, stats) in classes.into_iter().zip(merged.iter_mut()) {
        if stats.count == 0 {
            continue;
        }
        stats.latencies_ns.sort_unstable();
        let (ops_per_sec, p50, p99) = if cfg.no_timing {
            (0.0, 0.0, 0.0)
        } else {
            (
                stats.count as f64 / wall_secs,
                percentile_us(&stats.latencies_ns, 0.50),
                percentile_us(&stats.latencies_ns, 0.99),
            )
        };
        rows.push(BenchRow {
            variant: cfg.variant,
            threads: cfg.threads,
            opkind: class,
            count: stats.count,
            ops_per_sec,
            p50_us: p50,
            p99_us: p99,
            chain_steps_avg: stats.chain_steps as f64 / stats.count as f64,
            registry_scans_avg: stats.registry_scans as f64 / stats.count as f64,
        });
    }

    let audit = audit_tree(&tree, tree.current_ts());
    Ok(BenchOutput { rows, audit })
}

#[derive(Clone, Debug)]
pub struct StressCmdConfig {
    pub variant: VariantKind,
    pub threads: usize,
    pub keys: i64,
    /// Operations per history (split across threads).
    pub ops: u64,
    pub histories: u32,
    pub seed: u64,
}

pub enum StressOutcome {
    /// All histories linearizable; counts of (checked, budget-exhausted).
    Clean { checked: u32, undecided: u32 },
    /// First failing history, its index, and the verdict.
    Failed { index: u32, history: History },
}

pub fn run_stress(cfg: &StressCmdConfig) -> Result<StressOutcome, String> {
    if cfg.threads == 0 || cfg.threads > 8 {
        return Err("stress threads must be in 1..=8".into());
    }
    let ops_per_thread = (cfg.ops as usize).div_ceil(cfg.threads).max(1);
    let mut undecided = 0;
    for i in 0..cfg.histories {
        let h = run_random_history(&StressConfig {
            kind: cfg.variant,
            threads: cfg.threads,
            ops_per_thread,
            key_range: cfg.keys.max(1),
            insert_pct: 40,
            delete_pct: 30,
            contains_pct: 15,
            seed: cfg.seed.wrapping_add(i as u64),
        });
        match check_linearizable(&h, "count", &Budget::default()).map_err(|e| e.to_string())? {
            Verdict::Linearizable(_) => {}
            Verdict::BudgetExhausted => undecided += 1,
            Verdict::NotLinearizable => {
                return Ok(StressOutcome::Failed {
                    index: i,
                    history: h,
                });
            }
        }
    }
    Ok(StressOutcome::Clean {
        checked: cfg.histories,
        undecided,
    })
}
