//! Deterministic interleaving corpus: each scenario parks one thread at a
//! chosen stage boundary, observes the documented race window from another
//! thread, asserts the documented outcome, and hands back its recorded
//! history for linearizability checking.

use aggtree::aggregate::count_spec;
use aggtree::backbone::PausePoint;
use aggtree::verify::history::{History, OpRecord};
use aggtree::verify::interleave::Interleaver;
use aggtree::{ThreadHandle, VariantKind};

pub struct ScenarioRun {
    pub name: String,
    pub history: History,
}

type Scenario = (&'static str, fn(VariantKind) -> History, &'static [VariantKind]);

const BOTH: &[VariantKind] = &[VariantKind::FastUpdate, VariantKind::FastQuery];
const FAST_UPDATE: &[VariantKind] = &[VariantKind::FastUpdate];
const FAST_QUERY: &[VariantKind] = &[VariantKind::FastQuery];

fn interleaver(kind: VariantKind) -> Interleaver<i64> {
    Interleaver::new(kind, count_spec::<i64>(), 4)
}

fn seed_keys(h: &mut ThreadHandle<i64>, keys: &[i64]) {
    for &k in keys {
        assert!(h.insert(k, k * 10));
    }
}

/// Parks `op` (run by its own thread) at `point`, runs `observe` from the
/// main thread, then releases and joins.
fn paused_op_window<R: Send + 'static>(
    il: &Interleaver<i64>,
    mut op_handle: ThreadHandle<i64>,
    point: PausePoint,
    op: impl FnOnce(&mut ThreadHandle<i64>) -> R + Send + 'static,
    observe: impl FnOnce(),
) -> R {
    let tid = op_handle.tid();
    il.sched.stop_at(tid, point);
    let worker = std::thread::spawn(move || op(&mut op_handle));
    il.sched.await_parked(tid, point);
    observe();
    il.sched.release(tid);
    worker.join().expect("paused op thread")
}

/// contains(k) observed in each window of an in-flight delete: from the
/// announcement on, the key must read as absent.
fn delete_window_vs_contains(kind: VariantKind, point: PausePoint) -> History {
    let il = interleaver(kind);
    let mut setup = il.tree.register().unwrap();
    seed_keys(&mut setup, &[3, 5]);
    let op_handle = il.tree.register().unwrap();
    let mut reader = il.tree.register().unwrap();
    let removed = paused_op_window(
        &il,
        op_handle,
        point,
        |h| h.delete(5),
        || {
            assert_eq!(reader.contains(5), None, "mid-delete window at {point:?}");
            assert_eq!(reader.contains(3), Some(30));
        },
    );
    assert_eq!(removed, Some(50));
    il.history()
}

fn delete_announced_vs_contains(kind: VariantKind) -> History {
    delete_window_vs_contains(kind, PausePoint::Announced)
}
fn delete_aggregates_vs_contains(kind: VariantKind) -> History {
    delete_window_vs_contains(kind, PausePoint::AggregatesUpdated)
}
fn delete_applied_vs_contains(kind: VariantKind) -> History {
    delete_window_vs_contains(kind, PausePoint::Applied)
}
fn delete_unannounced_vs_contains(kind: VariantKind) -> History {
    delete_window_vs_contains(kind, PausePoint::Unannounced)
}
fn delete_finalized_vs_contains(kind: VariantKind) -> History {
    delete_window_vs_contains(kind, PausePoint::Finalized)
}

/// contains(k) observed in each window of an in-flight insert: from the
/// announcement on, the key must read as present with the new value.
fn insert_window_vs_contains(kind: VariantKind, point: PausePoint) -> History {
    let il = interleaver(kind);
    let mut setup = il.tree.register().unwrap();
    seed_keys(&mut setup, &[3]);
    let op_handle = il.tree.register().unwrap();
    let mut reader = il.tree.register().unwrap();
    let ok = paused_op_window(
        &il,
        op_handle,
        point,
        |h| h.insert(7, 70),
        || {
            assert_eq!(reader.contains(7), Some(70), "mid-insert window at {point:?}");
        },
    );
    assert!(ok);
    il.history()
}

fn insert_announced_vs_contains(kind: VariantKind) -> History {
    insert_window_vs_contains(kind, PausePoint::Announced)
}
fn insert_aggregates_vs_contains(kind: VariantKind) -> History {
    insert_window_vs_contains(kind, PausePoint::AggregatesUpdated)
}
fn insert_applied_vs_contains(kind: VariantKind) -> History {
    insert_window_vs_contains(kind, PausePoint::Applied)
}

/// A query stamped after an announced-but-unapplied insert must count it.
fn insert_announced_vs_query(kind: VariantKind) -> History {
    let il = interleaver(kind);
    let mut setup = il.tree.register().unwrap();
    seed_keys(&mut setup, &[1, 9]);
    let op_handle = il.tree.register().unwrap();
    let mut querier = il.tree.register().unwrap();
    let ok = paused_op_window(
        &il,
        op_handle,
        PausePoint::Announced,
        |h| h.insert(5, 50),
        || {
            assert_eq!(querier.rank(100).unwrap(), 3, "in-flight insert counted");
            assert_eq!(querier.rank(5).unwrap(), 1);
        },
    );
    assert!(ok);
    il.history()
}

/// The unannounce-to-finalize window of a delete: the announcement is gone,
/// the structure still reaches the marked leaf, and a query stamped after
/// the delete must exclude it (the mark carries the deletion timestamp).
fn delete_unannounced_vs_query(kind: VariantKind) -> History {
    let il = interleaver(kind);
    let mut setup = il.tree.register().unwrap();
    seed_keys(&mut setup, &[3, 5]);
    let op_handle = il.tree.register().unwrap();
    let mut querier = il.tree.register().unwrap();
    let removed = paused_op_window(
        &il,
        op_handle,
        PausePoint::Unannounced,
        |h| h.delete(5),
        || {
            assert_eq!(querier.rank(100).unwrap(), 1, "zombie leaf not counted");
            assert_eq!(querier.agg_less_than(100).unwrap().as_int(), Some(1));
        },
    );
    assert_eq!(removed, Some(50));
    il.history()
}

/// A query that pinned its timestamp before an update completes must not
/// see that update.
fn query_pinned_vs_later_update(kind: VariantKind) -> History {
    let il = interleaver(kind);
    let mut setup = il.tree.register().unwrap();
    seed_keys(&mut setup, &[1]);
    let query_handle = il.tree.register().unwrap();
    let mut updater = il.tree.register().unwrap();
    let rank = paused_op_window(
        &il,
        query_handle,
        PausePoint::QueryTimestamped,
        |h| h.rank(100).unwrap(),
        || {
            assert!(updater.insert(7, 70));
        },
    );
    assert_eq!(rank, 1, "update stamped after the query's timestamp");
    il.history()
}

/// The auxiliary re-descent: a reader lands on a stale leaf, the covering
/// edge is still locked by an already-unannounced insert of another key,
/// and the re-descent from the parent's current child finds the key.
fn contains_redescends_after_insert(kind: VariantKind) -> History {
    let il = interleaver(kind);
    let mut setup = il.tree.register().unwrap();
    seed_keys(&mut setup, &[5]);
    let reader_handle = il.tree.register().unwrap();
    let inserter_handle = il.tree.register().unwrap();
    let reader_tid = reader_handle.tid();
    let inserter_tid = inserter_handle.tid();

    // Park the reader after its search landed on leaf 5 (searching 3).
    il.sched.stop_at(reader_tid, PausePoint::SearchLanded);
    let mut rh = reader_handle;
    let reader = std::thread::spawn(move || rh.contains(3));
    il.sched.await_parked(reader_tid, PausePoint::SearchLanded);

    // Run the insert of 3 up to the unannounce (lock still held, the
    // announcement already withdrawn, the node physically linked).
    il.sched.stop_at(inserter_tid, PausePoint::Unannounced);
    let mut ih = inserter_handle;
    let inserter = std::thread::spawn(move || ih.insert(3, 30));
    il.sched.await_parked(inserter_tid, PausePoint::Unannounced);

    il.sched.release(reader_tid);
    assert_eq!(
        reader.join().unwrap(),
        Some(30),
        "re-descent finds the newly linked key"
    );
    il.sched.release(inserter_tid);
    assert!(inserter.join().unwrap());
    il.history()
}

/// Slot-variant timestamp helping: a query that meets an announcement with
/// no timestamp stamps it into the future and excludes it; the operation
/// keeps the helped timestamp.
fn query_helps_stamp_announcement(kind: VariantKind) -> History {
    assert_eq!(kind, VariantKind::FastUpdate);
    let il = interleaver(kind);
    let op_handle = il.tree.register().unwrap();
    let mut querier = il.tree.register().unwrap();
    let ok = paused_op_window(
        &il,
        op_handle,
        PausePoint::AnnouncePublished,
        |h| h.insert(7, 70),
        || {
            assert_eq!(
                querier.rank(100).unwrap(),
                0,
                "unstamped announcement helped into the future"
            );
        },
    );
    assert!(ok);
    assert_eq!(querier.rank(100).unwrap(), 1, "visible at a later timestamp");
    let history = il.history();
    // The helping query ran at ts 1 and stamped the insert with the
    // incremented global, so the insert's recorded timestamp is 2.
    let insert_ts = history
        .events
        .iter()
        .find(|e| matches!(e.op, OpRecord::Insert { .. }))
        .and_then(|e| e.ts)
        .expect("insert recorded with a timestamp");
    assert_eq!(insert_ts, 2);
    history
}

/// Two inserts race on the same key: the one that loses the lock fails.
fn insert_vs_insert_same_key(kind: VariantKind) -> History {
    let il = interleaver(kind);
    let first_handle = il.tree.register().unwrap();
    let mut second = il.tree.register().unwrap();
    let tid = first_handle.tid();
    il.sched.stop_at(tid, PausePoint::Announced);
    let mut fh = first_handle;
    let first = std::thread::spawn(move || fh.insert(5, 50));
    il.sched.await_parked(tid, PausePoint::Announced);
    // The second insert spins on the held edge until the first completes.
    let second_thread = std::thread::spawn(move || second.insert(5, 51));
    il.sched.release(tid);
    assert!(first.join().unwrap());
    assert!(!second_thread.join().unwrap(), "duplicate insert fails");
    let mut check = il.tree.register().unwrap();
    assert_eq!(check.contains(5), Some(50));
    il.history()
}

/// Two deletes race on the same key: exactly one removes it.
fn delete_vs_delete_same_key(kind: VariantKind) -> History {
    let il = interleaver(kind);
    let mut setup = il.tree.register().unwrap();
    seed_keys(&mut setup, &[3, 5]);
    let first_handle = il.tree.register().unwrap();
    let mut second = il.tree.register().unwrap();
    let tid = first_handle.tid();
    il.sched.stop_at(tid, PausePoint::Announced);
    let mut fh = first_handle;
    let first = std::thread::spawn(move || fh.delete(5));
    il.sched.await_parked(tid, PausePoint::Announced);
    let second_thread = std::thread::spawn(move || second.delete(5));
    il.sched.release(tid);
    assert_eq!(first.join().unwrap(), Some(50));
    assert_eq!(second_thread.join().unwrap(), None, "second delete fails");
    il.history()
}

/// A delete racing an announced insert of its key observes the logically
/// inserted key (via the announcement), restarts, and deletes it once the
/// insert lands.
fn delete_catches_announced_insert(kind: VariantKind) -> History {
    let il = interleaver(kind);
    let insert_handle = il.tree.register().unwrap();
    let mut deleter = il.tree.register().unwrap();
    let tid = insert_handle.tid();
    il.sched.stop_at(tid, PausePoint::Announced);
    let mut ih = insert_handle;
    let inserter = std::thread::spawn(move || ih.insert(5, 50));
    il.sched.await_parked(tid, PausePoint::Announced);
    let deleter_thread = std::thread::spawn(move || deleter.delete(5));
    il.sched.release(tid);
    assert!(inserter.join().unwrap());
    assert_eq!(
        deleter_thread.join().unwrap(),
        Some(50),
        "delete eventually removes the announced insert"
    );
    let mut check = il.tree.register().unwrap();
    assert_eq!(check.contains(5), None);
    il.history()
}

/// Slot variant: two same-thread updates with no intervening query share a
/// timestamp, and a later query sees both.
fn same_thread_updates_share_timestamp(kind: VariantKind) -> History {
    assert_eq!(kind, VariantKind::FastUpdate);
    let il = interleaver(kind);
    let mut h = il.tree.register().unwrap();
    assert!(h.insert(1, 10));
    assert!(h.insert(2, 20));
    assert_eq!(h.rank(100).unwrap(), 2, "equal-timestamp versions both visible");
    let history = il.history();
    let stamps: Vec<_> = history
        .events
        .iter()
        .filter(|e| e.is_effectual())
        .map(|e| e.ts.unwrap())
        .collect();
    assert_eq!(stamps, vec![1, 1], "no query intervened");
    history
}

/// Queue variant: a later update helps a paused predecessor's aggregate
/// writes on their shared path, and queries see a consistent combined
/// state either way.
fn helping_completes_predecessor_aggregates(kind: VariantKind) -> History {
    assert_eq!(kind, VariantKind::FastQuery);
    let il = interleaver(kind);
    let mut setup = il.tree.register().unwrap();
    seed_keys(&mut setup, &[10, 20]);
    let paused_handle = il.tree.register().unwrap();
    let mut helper = il.tree.register().unwrap();
    let mut querier = il.tree.register().unwrap();
    // The paused insert of 5 locks the leaf-10 edge; the helper's insert of
    // 25 goes down the sibling edge, sharing the path above it, so the
    // helper catches those fields up on behalf of the paused operation
    // before writing its own versions.
    let ok = paused_op_window(
        &il,
        paused_handle,
        PausePoint::Announced,
        |h| h.insert(5, 50),
        || {
            assert!(helper.insert(25, 250));
            assert_eq!(querier.rank(100).unwrap(), 4, "both pending inserts counted");
        },
    );
    assert!(ok);
    assert_eq!(querier.rank(100).unwrap(), 4);
    il.history()
}

static SCENARIOS: &[Scenario] = &[
    ("delete-announced-vs-contains", delete_announced_vs_contains, BOTH),
    ("delete-aggregates-vs-contains", delete_aggregates_vs_contains, BOTH),
    ("delete-applied-vs-contains", delete_applied_vs_contains, BOTH),
    ("delete-unannounced-vs-contains", delete_unannounced_vs_contains, BOTH),
    ("delete-finalized-vs-contains", delete_finalized_vs_contains, BOTH),
    ("insert-announced-vs-contains", insert_announced_vs_contains, BOTH),
    ("insert-aggregates-vs-contains", insert_aggregates_vs_contains, BOTH),
    ("insert-applied-vs-contains", insert_applied_vs_contains, BOTH),
    ("insert-announced-vs-query", insert_announced_vs_query, BOTH),
    ("delete-unannounced-vs-query", delete_unannounced_vs_query, BOTH),
    ("query-pinned-vs-later-update", query_pinned_vs_later_update, BOTH),
    ("contains-redescends-after-insert", contains_redescends_after_insert, BOTH),
    ("insert-vs-insert-same-key", insert_vs_insert_same_key, BOTH),
    ("delete-vs-delete-same-key", delete_vs_delete_same_key, BOTH),
    ("delete-catches-announced-insert", delete_catches_announced_insert, BOTH),
    ("query-helps-stamp-announcement", query_helps_stamp_announcement, FAST_UPDATE),
    ("same-thread-updates-share-timestamp", same_thread_updates_share_timestamp, FAST_UPDATE),
    ("helping-completes-predecessor-aggregates", helping_completes_predecessor_aggregates, FAST_QUERY),
];

/// Runs the whole corpus, returning one recorded history per scenario run.
pub fn run_all() -> Vec<ScenarioRun> {
    let mut runs = Vec::new();
    for (name, f, kinds) in SCENARIOS {
        for &kind in *kinds {
            let history = f(kind);
            runs.push(ScenarioRun {
                name: format!("{name}/{kind}"),
                history,
            });
        }
    }
    runs
}
