//! Linear extensions of the happens-before order, projected onto committed
//! transactions plus the checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::CutGraph;

/// Outcome of placing the checkpoint in linearizations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexCheck {
    pub checked: usize,
    pub exhaustive: bool,
    /// First linearization (if any) where the checkpoint landed elsewhere:
    /// (sample number, 1-based position found).
    pub mismatch: Option<(usize, usize)>,
    /// The graph has a cycle, so no linearization exists.
    pub cyclic: bool,
}

/// Up to this many elements every linear extension is enumerated.
pub const EXHAUSTIVE_LIMIT: usize = 8;

/// Check that the checkpoint is element number `expected` (1-based) in
/// every sampled linearization of `elements` (commit nodes plus `g.cp`).
pub fn check_index(
    g: &CutGraph<'_>,
    commit_nodes: &[usize],
    expected: usize,
    samples: usize,
    seed: u64,
) -> IndexCheck {
    let mut is_elem = vec![false; g.len()];
    for &c in commit_nodes {
        is_elem[c] = true;
    }
    is_elem[g.cp] = true;
    if commit_nodes.len() < EXHAUSTIVE_LIMIT {
        exhaustive(g, commit_nodes, expected)
    } else {
        sampled(g, &is_elem, expected, samples, seed)
    }
}

fn sampled(
    g: &CutGraph<'_>,
    is_elem: &[bool],
    expected: usize,
    samples: usize,
    seed: u64,
) -> IndexCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_deg = g.in_degrees();
    let mut buf = Vec::new();
    for sample in 0..samples {
        let mut deg = base_deg.clone();
        let mut ready: Vec<usize> = (0..g.len()).filter(|&u| deg[u] == 0).collect();
        let mut placed = 0;
        let mut position = None;
        let mut visited = 0;
        while !ready.is_empty() {
            let u = ready.swap_remove(rng.random_range(0..ready.len()));
            visited += 1;
            if is_elem[u] {
                placed += 1;
                if u == g.cp {
                    position = Some(placed);
                }
            }
            g.successors(u, &mut buf);
            for &v in &buf {
                deg[v] -= 1;
                if deg[v] == 0 {
                    ready.push(v);
                }
            }
        }
        if visited < g.len() {
            return IndexCheck {
                checked: sample,
                exhaustive: false,
                mismatch: None,
                cyclic: true,
            };
        }
        let position = position.expect("cp node visited");
        if position != expected {
            return IndexCheck {
                checked: sample + 1,
                exhaustive: false,
                mismatch: Some((sample, position)),
                cyclic: false,
            };
        }
    }
    IndexCheck {
        checked: samples,
        exhaustive: false,
        mismatch: None,
        cyclic: false,
    }
}

/// Enumerate every linear extension of the order induced on the elements.
fn exhaustive(g: &CutGraph<'_>, commit_nodes: &[usize], expected: usize) -> IndexCheck {
    let mut elems: Vec<usize> = commit_nodes.to_vec();
    elems.push(g.cp);
    let k = elems.len();
    // before[i] = bitmask of elements that must precede element i.
    let mut before = vec![0u32; k];
    let mut cyclic = false;
    for (i, &e) in elems.iter().enumerate() {
        let reach = g.reach(e, true);
        if reach[e] {
            cyclic = true;
        }
        for (j, &f) in elems.iter().enumerate() {
            if i != j && reach[f] {
                before[j] |= 1 << i;
            }
        }
    }
    if cyclic {
        return IndexCheck {
            checked: 0,
            exhaustive: true,
            mismatch: None,
            cyclic: true,
        };
    }
    let cp_bit = k - 1;
    let mut checked = 0;
    let mut mismatch = None;
    let mut stack = Vec::with_capacity(k);
    extend(&before, 0, &mut stack, &mut |order: &[usize]| {
        let pos = order.iter().position(|&i| i == cp_bit).expect("cp placed") + 1;
        if pos != expected && mismatch.is_none() {
            mismatch = Some((checked, pos));
        }
        checked += 1;
    });
    IndexCheck {
        checked,
        exhaustive: true,
        mismatch,
        cyclic: false,
    }
}

fn extend(before: &[u32], used: u32, stack: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if stack.len() == before.len() {
        visit(stack);
        return;
    }
    for i in 0..before.len() {
        if used & (1 << i) == 0 && before[i] & !used == 0 {
            stack.push(i);
            extend(before, used | (1 << i), stack, visit);
            stack.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extensions_of_an_antichain_are_all_permutations() {
        let mut n = 0;
        extend(&[0, 0, 0, 0], 0, &mut Vec::new(), &mut |_| n += 1);
        assert_eq!(n, 24);
    }

    #[test]
    fn extensions_respect_a_chain() {
        // 0 < 1 < 2, 3 free: 3 can go in any of 4 slots.
        let before = [0, 0b1, 0b11, 0];
        let mut seen = Vec::new();
        extend(&before, 0, &mut Vec::new(), &mut |o| seen.push(o.to_vec()));
        assert_eq!(seen.len(), 4);
        for o in seen {
            let p = |x| o.iter().position(|&i| i == x).unwrap();
            assert!(p(0) < p(1) && p(1) < p(2));
        }
    }
}
