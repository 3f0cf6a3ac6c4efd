//! Retrieval behaviour on stores large enough to take the parallel path.

use tidyhome_core::domain::Timestamp;
use tidyhome_core::gateway::HashEmbedder;
use tidyhome_core::memory::{DialogueEntry, MemoryStore, ScanMode};

fn big_store(n: usize) -> MemoryStore {
    let objects = ["plate", "jacket", "laptop", "lemon", "brush", "cup", "book", "chips"];
    let places = ["sink", "fridge", "trash can", "storage box", "food shelf"];
    let base = Timestamp::from_unix(1_741_971_900);
    let entries: Vec<DialogueEntry> = (0..n)
        .map(|i| {
            let o = objects[i % objects.len()];
            let p = places[(i / objects.len()) % places.len()];
            DialogueEntry::new(
                i as u64,
                base.plus_seconds(i as i64),
                format!("Please tidy the {o} number {}", i % 97),
                format!("Moved {o} to the {p}."),
            )
        })
        .collect();
    let store = MemoryStore::new();
    store.ingest(&entries, &HashEmbedder::new()).unwrap();
    store
}

#[test]
fn parallel_scan_matches_sequential_above_threshold() {
    let store = big_store(5000);
    let e = HashEmbedder::new();
    for query in ["Where is the jacket?", "What is in the fridge", "laptop storage box", "zebra"] {
        for k in [1, 5, 21, 4999, 5000, 6000] {
            let seq = store.retrieve_with(query, k, &e, ScanMode::Sequential).unwrap();
            let par = store.retrieve_with(query, k, &e, ScanMode::Auto).unwrap();
            assert_eq!(seq, par, "query {query:?} k={k}");
            assert_eq!(seq.k_returned, k.min(5000));
        }
    }
}

#[test]
fn duplicate_chunks_prefer_the_newer_entry() {
    let store = big_store(4096);
    let hits = store
        .retrieve("Please tidy the jacket number 1 Moved jacket to the sink.", 3, &HashEmbedder::new())
        .unwrap();
    let ids = hits.ids();
    for w in hits.hits.windows(2) {
        assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].entry.entry_id > w[1].entry.entry_id), "{ids:?}");
    }
}

#[test]
fn journal_roundtrip_preserves_retrieval() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.jsonl");
    let e = HashEmbedder::new();
    let store = MemoryStore::open(&path, "hash-ngram-256").unwrap();
    let src = big_store(300);
    store.ingest(&src.entries(), &e).unwrap();
    let reopened = MemoryStore::open(&path, "hash-ngram-256").unwrap();
    assert_eq!(reopened.len(), 300);
    assert_eq!(
        reopened.retrieve("jacket storage box", 5, &e).unwrap(),
        store.retrieve("jacket storage box", 5, &e).unwrap()
    );
    assert!(MemoryStore::open(&path, "other-model").is_err());
}
