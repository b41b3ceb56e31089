use proptest::prelude::*;

use pkdot::datagen::{self, SyntheticSpec, Targets, Task};
use pkdot::diffcore::{DiffGraph, Tensor2};
use pkdot::losses::{self, ClassTargets};
use pkdot::otsolver::{self, CostMatrix, Marginals, SinkhornConfig};
use pkdot::simgraph::{self, SimilarityMatrix};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor2::new(rows, cols, d).unwrap())
}

fn nonzero_rows(x: &Tensor2) -> bool {
    (0..x.rows()).all(|i| x.row(i).iter().map(|v| v * v).sum::<f64>() > 1e-6)
}

fn batch(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
    matrix(rows, cols).prop_filter("zero row", nonzero_rows)
}

/// Embedding batches with no row near zero.
fn embeddings() -> impl Strategy<Value = Tensor2> {
    (2usize..10, 1usize..6).prop_flat_map(|(b, m)| batch(b, m))
}

/// Off-diagonal row sums pairwise separated, so anchor ranking has no ties.
fn untied(x: &Tensor2) -> bool {
    let s = simgraph::cosine_similarity(x).unwrap();
    let mut sums: Vec<f64> = s.row_sums().into_data();
    sums.sort_by(f64::total_cmp);
    sums.windows(2).all(|w| w[1] - w[0] > 1e-9)
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn permute_rows(x: &Tensor2, p: &[usize]) -> Tensor2 {
    x.select_rows(p).unwrap()
}

/// Cost matrices built the way training builds them: from similarity rows.
fn cost(n: usize) -> impl Strategy<Value = CostMatrix> {
    (batch(n, 3), batch(n, 3)).prop_map(|(a, b)| {
        let t = simgraph::cosine_similarity(&a).unwrap();
        let s = simgraph::cosine_similarity(&b).unwrap();
        otsolver::ground_cost(&t, &s).unwrap()
    })
}

fn distance_to_product(plan: &Tensor2, marg: &Marginals) -> f64 {
    plan.max_abs_diff(&marg.product_coupling())
}

proptest! {
    #[test]
    fn cosine_matrix_invariants(x in embeddings(), scales in prop::collection::vec(0.01f64..100.0, 10)) {
        let s = simgraph::cosine_similarity(&x).unwrap();
        SimilarityMatrix::new(s.clone()).unwrap().check_invariants(1e-9).unwrap();
        let b = x.rows();
        for i in 0..b {
            prop_assert!((s.get(i, i) - 1.0).abs() < 1e-9);
            for j in 0..b {
                prop_assert!((s.get(i, j) - s.get(j, i)).abs() < 1e-9);
                prop_assert!(s.get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
        let scaled = Tensor2::from_fn(b, x.cols(), |i, j| x.get(i, j) * scales[i]);
        let s2 = simgraph::cosine_similarity(&scaled).unwrap();
        prop_assert!(s.max_abs_diff(&s2) < 1e-9);
    }

    #[test]
    fn anchors_follow_relabeling(
        (x, perm, k) in (3usize..10, 2usize..6)
            .prop_flat_map(|(b, m)| batch(b, m))
            .prop_filter("tied row sums", untied)
            .prop_flat_map(|x| {
            let b = x.rows();
            (Just(x), permutation(b), 1..=b)
        })
    ) {
        let s = SimilarityMatrix::new(simgraph::cosine_similarity(&x).unwrap()).unwrap();
        let px = permute_rows(&x, &perm);
        let ps = SimilarityMatrix::new(simgraph::cosine_similarity(&px).unwrap()).unwrap();
        let a = simgraph::select_anchors(&s, k).unwrap();
        let pa = simgraph::select_anchors(&ps, k).unwrap();
        prop_assert!(pa.indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(simgraph::select_anchors(&s, k).unwrap(), a.clone());
        let mut mapped: Vec<usize> = pa.indices().iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, a.indices().to_vec());
    }

    #[test]
    fn converged_plans_are_feasible(c in (2usize..9).prop_flat_map(cost), eps in prop::sample::select(vec![0.01, 0.1, 1.0, 10.0])) {
        let n = c.size();
        let marg = Marginals::uniform(n);
        let r = otsolver::sinkhorn(&c, &marg, &SinkhornConfig::with_epsilon(eps)).unwrap();
        prop_assert!(r.plan.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        if r.converged {
            let rows = r.plan.row_sums();
            let cols = r.plan.col_sums();
            for i in 0..n {
                prop_assert!((rows.get(i, 0) - marg.mu()[i]).abs() < 1e-6);
                prop_assert!((cols.get(0, i) - marg.nu()[i]).abs() < 1e-6);
            }
        }
    }

    // Entries bounded away from zero: the entropic excess is additive (at most
    // ε·ln n), so a multiplicative 5% bracket only holds for costs of order one.
    #[test]
    fn entropic_cost_brackets_exact_assignment(
        c in (2usize..7).prop_flat_map(|n| {
            prop::collection::vec(0.5f64..1.5, n * n)
                .prop_map(move |d| CostMatrix::new(Tensor2::new(n, n, d).unwrap()).unwrap())
        })
    ) {
        let r = otsolver::sinkhorn(&c, &Marginals::uniform(c.size()), &SinkhornConfig::with_epsilon(0.01)).unwrap();
        let (_, exact) = otsolver::exact_assignment(&c).unwrap();
        // an unconverged iterate misplaces at most n·violation of mass
        let n = c.size() as f64;
        let slack = if r.converged { 1e-6 } else { 1e-6 + n * r.marginal_violation * 1.5 };
        prop_assert!(r.transport_cost >= exact - slack, "{} < {} ({:?})", r.transport_cost, exact, r.marginal_violation);
        prop_assert!(r.transport_cost <= exact * 1.05 + slack, "{} > {}", r.transport_cost, exact);
    }

    #[test]
    fn plan_permutes_with_inputs((c, perm) in (2usize..8).prop_flat_map(|n| (cost(n), permutation(n)))) {
        let n = c.size();
        let cfg = SinkhornConfig::with_epsilon(0.1);
        let marg = Marginals::uniform(n);
        let r = otsolver::sinkhorn(&c, &marg, &cfg).unwrap();
        let pc = Tensor2::from_fn(n, n, |i, j| c.matrix().get(perm[i], perm[j]));
        let pr = otsolver::sinkhorn(&CostMatrix::new(pc).unwrap(), &marg, &cfg).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((pr.plan.get(i, j) - r.plan.get(perm[i], perm[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn plan_approaches_product_coupling_as_epsilon_grows(c in (2usize..9).prop_flat_map(cost)) {
        let marg = Marginals::uniform(c.size());
        let mut last = f64::INFINITY;
        for eps in [0.01, 0.1, 1.0, 10.0] {
            let r = otsolver::sinkhorn(&c, &marg, &SinkhornConfig::with_epsilon(eps)).unwrap();
            let d = distance_to_product(&r.plan, &marg);
            prop_assert!(d <= last + 1e-9, "eps {eps}: {d} > {last}");
            last = d;
        }
    }

    #[test]
    fn ccc_range_symmetry_and_permutation(
        (x, y, perm) in (2usize..20).prop_flat_map(|n| (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
            permutation(n),
        ))
    ) {
        let c = losses::ccc(&x, &y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        prop_assert!((c - losses::ccc(&y, &x).unwrap()).abs() < 1e-12);
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        prop_assert!((c - losses::ccc(&px, &py).unwrap()).abs() < 1e-12);

        let loss = |a: &[f64], b: &[f64]| {
            let mut g = DiffGraph::new();
            let pa = g.constant(Tensor2::column(a));
            let pb = g.constant(Tensor2::column(b));
            let l = losses::ccc_loss(&mut g, pa, pb).unwrap();
            g.value(l).item()
        };
        let l = loss(&x, &y);
        prop_assert!((0.0..=2.0).contains(&l));
        prop_assert!((l - loss(&px, &py)).abs() < 1e-12);
        // zero up to the 1e-12 denominator guard, which matters only for tiny variance
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        let self_loss = loss(&x, &x);
        prop_assert!(self_loss >= -1e-15 && self_loss <= 1e-12 / (2.0 * var + 1e-12) + 1e-12, "{self_loss} at var {var}");
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_falls_with_true_logit(
        logits in (1usize..6, 2usize..6).prop_flat_map(|(b, m)| (matrix(b, m), prop::collection::vec(0..m, b))),
        bump in 0.01f64..3.0,
    ) {
        let (z, labels) = logits;
        let m = z.cols();
        let ce = |z: &Tensor2| {
            let mut g = DiffGraph::new();
            let n = g.constant(z.clone());
            let t = ClassTargets::new(labels.clone(), m).unwrap();
            let l = losses::cross_entropy_loss(&mut g, n, &t).unwrap();
            g.value(l).item()
        };
        let base = ce(&z);
        prop_assert!(base >= 0.0);
        let mut raised = z.clone();
        raised.set(0, labels[0], z.get(0, labels[0]) + bump);
        prop_assert!(ce(&raised) < base);
    }

    #[test]
    fn matmul_matches_triple_loop((a, b) in (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(n, k, m)| (matrix(n, k), matrix(k, m)))) {
        let fast = a.matmul(&b).unwrap();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for l in 0..a.cols() {
                    acc += a.get(i, l) * b.get(l, j);
                }
                prop_assert!((fast.get(i, j) - acc).abs() < 1e-10);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_seeded_and_balanced(seed in 0u64..1000, n in 20usize..120, classes in 2usize..6) {
        let mut spec = SyntheticSpec::sew_classification(seed);
        spec.n_samples = n;
        spec.task = Task::Classification { num_classes: classes };
        let a = datagen::generate(&spec).unwrap();
        let b = datagen::generate(&spec).unwrap();
        prop_assert_eq!(&a.prevalent, &b.prevalent);
        prop_assert_eq!(&a.privileged, &b.privileged);
        prop_assert_eq!(&a.splits, &b.splits);
        let Targets::Classes(t) = &a.targets else { panic!("classification spec") };
        let mut counts = vec![0usize; classes];
        for &l in t.labels() {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1, "{counts:?}");
    }
}
