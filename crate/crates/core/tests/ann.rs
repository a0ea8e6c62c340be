use livesketch::ann::{brute_force, PqConfig, PqIndex, SearchMode};
use livesketch::numerics::substream;
use rand_distr::{Distribution, Normal};

/// `per` points around each of `centres.len()` well-separated centres.
fn blobs(centres: usize, per: usize, d: usize, seed: u64) -> (Vec<f32>, Vec<u64>) {
    let mut rng = substream(seed, "blobs");
    let noise = Normal::new(0.0f32, 0.01).unwrap();
    let mut data = Vec::new();
    for c in 0..centres {
        for _ in 0..per {
            for j in 0..d {
                let centre = if j % centres == c { 10.0 } else { 0.0 };
                data.push(centre + noise.sample(&mut rng));
            }
        }
    }
    let ids = (0..(centres * per) as u64).map(|i| i * 7 + 3).collect();
    (data, ids)
}

fn config() -> PqConfig {
    PqConfig {
        subspaces: 4,
        centroids: 16,
        ..PqConfig::default()
    }
}

#[test]
fn nearest_cluster_agrees_with_brute_force() {
    let d = 16;
    let (data, ids) = blobs(8, 40, d, 1);
    let index = PqIndex::build(&data, &ids, d, &config()).unwrap();
    for (row, id) in data.chunks(d).zip(&ids).step_by(13) {
        let approx = index.knn(row, 1).unwrap();
        let exact = brute_force(&ids, &data, row, 1).unwrap();
        let blob = |id: u64| (id - 3) / 7 / 40;
        assert_eq!(blob(approx[0].id), blob(exact[0].id));
        assert_eq!(blob(*id), blob(exact[0].id));
    }
}

#[test]
fn added_vector_ranks_first() {
    let d = 16;
    let (data, ids) = blobs(8, 40, d, 2);
    let mut index = PqIndex::build(&data, &ids, d, &config()).unwrap();
    let mut far = vec![0.0f32; d];
    far[0] = -25.0;
    index.add(1, &far).unwrap();
    assert_eq!(index.knn(&far, 5).unwrap()[0].id, 1);
}

#[test]
fn build_is_deterministic() {
    let d = 16;
    let (data, ids) = blobs(4, 50, d, 3);
    let a = PqIndex::build(&data, &ids, d, &config()).unwrap();
    let b = PqIndex::build(&data, &ids, d, &config()).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let other = PqIndex::build(&data, &ids, d, &PqConfig { seed: 9, ..config() }).unwrap();
    assert_eq!(other.len(), a.len());
}

#[test]
fn file_roundtrip_and_errors() {
    let d = 16;
    let (data, ids) = blobs(4, 50, d, 4);
    let index = PqIndex::build(&data, &ids, d, &PqConfig { rerank: 30, ..config() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    index.save(&path).unwrap();
    let back = PqIndex::<f32>::load(&path).unwrap();
    assert_eq!(back.mode(), SearchMode::Refine(30));
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
    assert!(PqIndex::<f32>::load(&dir.path().join("missing.bin")).is_err());
    assert!(PqIndex::build(&data, &ids, 15, &config()).is_err());
    let mut dup = ids.clone();
    dup[1] = dup[0];
    assert!(PqIndex::build(&data, &dup, d, &config()).is_err());
    assert!(PqIndex::build(&data[..16 * 10], &ids[..10], d, &config()).is_err());
}
