use dolfin::federated::{dirichlet_partition, select_participants};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_an_exact_cover_with_no_empty_client(
        labels in proptest::collection::vec(0usize..5, 20..200),
        clients in 1usize..8,
        beta in prop_oneof![Just(0.05), Just(0.5), Just(1.0), Just(1e6)],
        seed in any::<u64>(),
    ) {
        let shards = dirichlet_partition(&labels, clients, beta, seed).unwrap();
        prop_assert_eq!(shards.len(), clients);
        prop_assert!(shards.iter().all(|s| !s.is_empty()));
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_a_function_of_the_seed(seed in any::<u64>()) {
        let labels: Vec<usize> = (0..90).map(|i| i % 3).collect();
        prop_assert_eq!(
            dirichlet_partition(&labels, 4, 0.3, seed).unwrap(),
            dirichlet_partition(&labels, 4, 0.3, seed).unwrap()
        );
    }

    #[test]
    fn participants_are_distinct_sorted_and_sized(k in 1usize..20, p in 0.01f64..=1.0, seed in any::<u64>(), task in 0usize..5, round in 0usize..5) {
        let ids = select_participants(k, p, seed, task, round);
        let expected = ((p * k as f64).round() as usize).clamp(1, k);
        prop_assert_eq!(ids.len(), expected);
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ids.iter().all(|&i| i < k));
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let labels = vec![0, 0, 1, 1];
    assert!(dirichlet_partition(&labels, 2, 0.0, 1).unwrap_err().is_config());
    assert!(dirichlet_partition(&labels, 2, -1.0, 1).unwrap_err().is_config());
    assert!(dirichlet_partition(&labels, 0, 1.0, 1).unwrap_err().is_config());
    assert!(dirichlet_partition(&labels, 5, 1.0, 1).is_err());
}

#[test]
fn one_client_holds_everything_in_order() {
    let labels = vec![2, 0, 1, 2, 0];
    assert_eq!(dirichlet_partition(&labels, 1, 0.1, 9).unwrap(), vec![vec![0, 1, 2, 3, 4]]);
}
