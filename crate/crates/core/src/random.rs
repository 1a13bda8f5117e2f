//! Seeded random instances for property tests, examples and the self-test.

use rand::Rng;

use crate::tree::{Deflator, NodeProcess, NodeSpec, TreeModel};

#[derive(Debug, Clone, Copy)]
pub struct RandomTreeSpec {
    /// Number of cells is drawn uniformly from `min_depth..=max_depth`.
    pub min_depth: usize,
    pub max_depth: usize,
    /// Children per non-leaf node are drawn from `1..=max_branching`.
    pub max_branching: usize,
    /// Clock density range.
    pub kappa_range: (f64, f64),
    /// Cell duration range.
    pub duration_range: (f64, f64),
    /// Range of the raw one-step deflator multipliers before normalization.
    pub multiplier_range: (f64, f64),
}

impl Default for RandomTreeSpec {
    fn default() -> Self {
        Self {
            min_depth: 1,
            max_depth: 3,
            max_branching: 3,
            kappa_range: (0.5, 1.5),
            duration_range: (0.5, 1.5),
            multiplier_range: (0.4, 1.8),
        }
    }
}

/// Random non-recombining tree with its deflator.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, spec: &RandomTreeSpec) -> (TreeModel, Deflator) {
    let depth = rng.random_range(spec.min_depth.max(1)..=spec.max_depth.max(spec.min_depth.max(1)));
    let durations: Vec<f64> = (0..depth)
        .map(|_| rng.random_range(spec.duration_range.0..=spec.duration_range.1))
        .collect();
    let mut specs = vec![NodeSpec {
        parent: None,
        prob: 1.0,
        kappa_dot: rng.random_range(spec.kappa_range.0..=spec.kappa_range.1),
    }];
    let mut z = vec![1.0];
    let mut frontier = vec![0usize];
    for _ in 1..depth {
        let mut next = Vec::new();
        for &u in &frontier {
            let k = rng.random_range(1..=spec.max_branching.max(1));
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let mut probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let head: f64 = probs[..k - 1].iter().sum();
            probs[k - 1] = 1.0 - head;
            let mult: Vec<f64> = (0..k)
                .map(|_| rng.random_range(spec.multiplier_range.0..=spec.multiplier_range.1))
                .collect();
            let mean: f64 = probs.iter().zip(&mult).map(|(p, a)| p * a).sum();
            for (p, a) in probs.iter().zip(&mult) {
                next.push(specs.len());
                specs.push(NodeSpec {
                    parent: Some(u),
                    prob: *p,
                    kappa_dot: rng.random_range(spec.kappa_range.0..=spec.kappa_range.1),
                });
                z.push(z[u] * a / mean);
            }
        }
        frontier = next;
    }
    let tree = TreeModel::new(durations, &specs, None).expect("generated tree is valid");
    let deflator =
        Deflator::new(&tree, NodeProcess(z)).expect("generated deflator is a martingale");
    (tree, deflator)
}

/// Independent uniform values on `[lo, hi)` at every node.
pub fn random_process<R: Rng + ?Sized>(
    rng: &mut R,
    tree: &TreeModel,
    lo: f64,
    hi: f64,
) -> NodeProcess {
    NodeProcess::from_fn(tree, |_| rng.random_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_trees_are_reproducible() {
        let spec = RandomTreeSpec {
            max_depth: 5,
            ..Default::default()
        };
        let a = random_tree(&mut ChaCha8Rng::seed_from_u64(4), &spec);
        let b = random_tree(&mut ChaCha8Rng::seed_from_u64(4), &spec);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.0.cells() <= 5);
    }
}
