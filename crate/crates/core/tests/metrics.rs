mod common;

use common::{brute_aupr, brute_auroc};
use corgi::metrics::{aupr, auroc, degree_bucket_eval, degree_buckets, MetricBundle};
use corgi::model::Task;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores on a coarse grid so that ties are common.
fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    loop {
        let n = rng.random_range(2..120);
        let levels = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        let pos = labels.iter().filter(|&&y| y == 1.0).count();
        if pos > 0 && pos < n {
            return (scores, labels);
        }
    }
}

#[test]
fn ranking_metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let (s, y) = random_case(&mut rng);
        let (a, b) = (auroc(&s, &y).unwrap(), brute_auroc(&s, &y));
        assert!((a - b).abs() <= 1e-9, "case {case}: auroc {a} vs {b}");
        let (a, b) = (aupr(&s, &y).unwrap(), brute_aupr(&s, &y));
        assert!((a - b).abs() <= 1e-9, "case {case}: aupr {a} vs {b}");
    }
}

#[test]
fn bucket_reports_partition_every_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let (s, y) = random_case(&mut rng);
        let degrees: Vec<usize> = s.iter().map(|_| rng.random_range(0..30)).collect();
        let cuts: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..30)).collect();
        for task in [Task::Binary, Task::Ordinal] {
            let r = degree_bucket_eval(task, &s, &y, &degrees, &degree_buckets(&cuts)).unwrap();
            assert!(r.partition_law_holds());
            assert_eq!(r.buckets[0].count, s.len());
        }
    }
}

#[test]
fn rmse_and_accuracy_by_hand() {
    let b = MetricBundle::compute(Task::Ordinal, &[1.0, 2.0, 4.0], &[1.0, 3.0, 2.0]).unwrap();
    assert!((b.primary() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    let b = MetricBundle::compute(Task::Binary, &[0.5, 0.49, 0.9, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(b.primary(), 0.5);
}
