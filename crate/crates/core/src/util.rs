use sha2::{Digest, Sha256};

/// Deterministic sub-seed for one named stream of one item.
pub fn derive_seed(seed: u64, stream: &str, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Pairwise summation; the reduction tree depends only on the length, so
/// results are bit-stable for a given input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Order-preserving map over `items` on up to `workers` scoped threads.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_stream_and_id() {
        let a = derive_seed(7, "qa", "img1");
        assert_eq!(a, derive_seed(7, "qa", "img1"));
        assert_ne!(a, derive_seed(7, "qa", "img2"));
        assert_ne!(a, derive_seed(7, "render", "img1"));
        assert_ne!(a, derive_seed(8, "qa", "img1"));
        // length prefix keeps ("ab", "c") apart from ("a", "bc")
        assert_ne!(derive_seed(1, "ab", "c"), derive_seed(1, "a", "bc"));
    }

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..103).collect();
        let one = parallel_map(&items, 1, |x| x * 3);
        for w in [2, 4, 7, 200] {
            assert_eq!(parallel_map(&items, w, |x| x * 3), one);
        }
    }
}
