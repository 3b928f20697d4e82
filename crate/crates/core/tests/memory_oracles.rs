use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rainbow_cl::memory::{
    herding_select, restore_buffer, snapshot_buffer, update_diversity, update_random, update_reservoir, MuaKind,
    ReplayBuffer,
};
use rainbow_cl::stream::{FeatureMatrix, Sample};
use rainbow_cl::uncertainty::UncertaintyScore;

fn gap(mean: &[f64], chosen: &[&Vec<f64>]) -> f64 {
    let k = chosen.len() as f64;
    (0..mean.len())
        .map(|d| (mean[d] - chosen.iter().map(|e| e[d]).sum::<f64>() / k).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

fn mean_of(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len() as f64;
    (0..points[0].len())
        .map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n)
        .collect()
}

#[test]
fn herding_steps_match_exhaustive_search() {
    // Each greedy step must be the best single extension of the previous
    // picks, checked against every candidate.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..300 {
        let pts = points(&mut rng, 6, 3);
        let mu = mean_of(&pts);
        let picks = herding_select(&pts, 2);
        assert_eq!(picks.len(), 2);
        assert_ne!(picks[0], picks[1]);
        let best_first = (0..6)
            .min_by(|&a, &b| gap(&mu, &[&pts[a]]).total_cmp(&gap(&mu, &[&pts[b]])))
            .unwrap();
        assert_eq!(picks[0], best_first);
        let best_second = (0..6)
            .filter(|&j| j != picks[0])
            .min_by(|&a, &b| gap(&mu, &[&pts[picks[0]], &pts[a]]).total_cmp(&gap(&mu, &[&pts[picks[0]], &pts[b]])))
            .unwrap();
        assert_eq!(picks[1], best_second);
    }
}

#[test]
fn greedy_herding_is_not_always_the_best_pair() {
    // points -1, 1, 0.1: the pair {-1, 1} averages almost exactly to the
    // mean, but greedy starts from 0.1
    let pts = vec![vec![-1.0], vec![1.0], vec![0.1]];
    let mu = mean_of(&pts);
    let picks = herding_select(&pts, 2);
    assert_eq!(picks[0], 2);
    let greedy = gap(&mu, &[&pts[picks[0]], &pts[picks[1]]]);
    let pair = gap(&mu, &[&pts[0], &pts[1]]);
    assert!(pair < greedy);
}

#[test]
fn herding_keeps_everything_when_quota_covers_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = points(&mut rng, 5, 2);
    let mut picks = herding_select(&pts, 9);
    picks.sort_unstable();
    assert_eq!(picks, vec![0, 1, 2, 3, 4]);
}

fn stream(prefix: &str, n: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let f = FeatureMatrix::new(1, 2, vec![i as f64, -(i as f64)]).unwrap();
            Sample::new(format!("{prefix}{i:04}"), f, i % classes)
        })
        .collect()
}

#[test]
fn random_inclusion_is_half_within_three_sigma() {
    let items = stream("r", 20, 2);
    let trials = 10_000u64;
    let mut counts: HashMap<String, u64> = HashMap::new();
    for t in 0..trials {
        let b = update_random(&ReplayBuffer::new(10, MuaKind::Random), &items, t);
        assert_eq!(b.len(), 10);
        for e in b.entries() {
            *counts.entry(e.sample.id.clone()).or_default() += 1;
        }
    }
    let p = 0.5;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    for s in &items {
        let freq = counts.get(&s.id).copied().unwrap_or(0) as f64 / trials as f64;
        assert!((freq - p).abs() <= 3.0 * sigma, "{}: {freq}", s.id);
    }
}

fn scores_for(samples: &[Sample], salt: u64) -> HashMap<String, UncertaintyScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    samples
        .iter()
        .map(|s| {
            let score = UncertaintyScore {
                sample_id: s.id.clone(),
                u: rng.random(),
                k: 6,
            };
            (s.id.clone(), score)
        })
        .collect()
}

#[test]
fn restored_buffers_continue_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = stream("a", 60, 3);
    let second = stream("b", 60, 6);

    // reservoir: observed count must survive the round trip
    let live = update_reservoir(&ReplayBuffer::new(25, MuaKind::Reservoir), &first, 8);
    let path = dir.path().join("reservoir.json");
    snapshot_buffer(&live, &path).unwrap();
    let restored = restore_buffer(&path).unwrap();
    assert_eq!(restored, live);
    assert_eq!(
        update_reservoir(&restored, &second, 9),
        update_reservoir(&live, &second, 9)
    );

    let live = update_random(&ReplayBuffer::new(25, MuaKind::Random), &first, 8);
    let path = dir.path().join("random.json");
    snapshot_buffer(&live, &path).unwrap();
    let restored = restore_buffer(&path).unwrap();
    assert_eq!(update_random(&restored, &second, 9), update_random(&live, &second, 9));

    // diversity: scores and quotas survive
    let s1 = scores_for(&first, 1);
    let live = update_diversity(&ReplayBuffer::new(24, MuaKind::Uncertainty), &first, &s1).unwrap();
    let path = dir.path().join("diversity.json");
    snapshot_buffer(&live, &path).unwrap();
    let restored = restore_buffer(&path).unwrap();
    assert_eq!(restored, live);
    let pool: Vec<Sample> = live.samples().cloned().chain(second.iter().cloned()).collect();
    let s2 = scores_for(&pool, 2);
    assert_eq!(
        update_diversity(&restored, &second, &s2).unwrap(),
        update_diversity(&live, &second, &s2).unwrap()
    );
}
