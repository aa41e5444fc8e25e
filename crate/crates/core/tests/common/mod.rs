//! Independent oracles shared by the integration tests.

use std::collections::{HashMap, VecDeque};

pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Breadth-first search over all arrangements reachable by moving any
/// contiguous block anywhere; cost = moves + Levenshtein distance.
pub fn exhaustive_ter(hyp: &[u8], reference: &[u8]) -> usize {
    let mut depth: HashMap<Vec<u8>, usize> = HashMap::from([(hyp.to_vec(), 0)]);
    let mut queue = VecDeque::from([hyp.to_vec()]);
    let mut best = usize::MAX;
    while let Some(h) = queue.pop_front() {
        let d = depth[&h];
        best = best.min(d + levenshtein(&h, reference));
        if d + 1 >= best {
            continue;
        }
        let n = h.len();
        for i in 0..n {
            for j in i + 1..=n {
                let block = &h[i..j];
                let rest: Vec<u8> = h[..i].iter().chain(&h[j..]).copied().collect();
                for k in 0..=rest.len() {
                    let mut moved = rest[..k].to_vec();
                    moved.extend_from_slice(block);
                    moved.extend_from_slice(&rest[k..]);
                    if !depth.contains_key(&moved) {
                        depth.insert(moved.clone(), d + 1);
                        queue.push_back(moved);
                    }
                }
            }
        }
    }
    best
}
