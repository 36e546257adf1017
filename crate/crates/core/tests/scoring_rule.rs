//! The history-minimum score and the cloud exclusion rule.

use latentwatch::ingest::{TileGrid, TileMeta};
use latentwatch::model::LatentCode;
use latentwatch::scoring::*;
use proptest::prelude::*;

fn code(mu: Vec<f32>) -> Representation {
    let n = mu.len();
    Representation::Latent(LatentCode {
        mu,
        log_var: vec![-0.5; n],
    })
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, dim)
}

fn case() -> impl Strategy<Value = (Vec<f32>, Vec<Vec<f32>>)> {
    (1usize..=8).prop_flat_map(|dim| (vector(dim), prop::collection::vec(vector(dim), 1..=6)))
}

fn kinds() -> impl Strategy<Value = DistanceKind> {
    prop::sample::select(vec![
        DistanceKind::CosineLatent,
        DistanceKind::EuclideanLatent,
        DistanceKind::KlLatent,
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn k1_is_the_most_recent_distance((now, past) in case(), kind in kinds()) {
        let current = code(now);
        let history: Vec<_> = past.into_iter().map(code).collect();
        let s = score_series(&current, &history, kind, KlForm::Directed, 1).unwrap().unwrap();
        prop_assert_eq!(s, distance(kind, KlForm::Directed, &history[0], &current).unwrap());
    }

    #[test]
    fn score_never_increases_with_k((now, past) in case(), kind in kinds()) {
        let current = code(now);
        let history: Vec<_> = past.into_iter().map(code).collect();
        let mut last = f64::INFINITY;
        for k in 1..=history.len() + 1 {
            let s = score_series(&current, &history, kind, KlForm::Directed, k).unwrap().unwrap();
            prop_assert!(s <= last);
            last = s;
        }
    }

    #[test]
    fn matches_brute_force_minimum((now, past) in case(), kind in kinds(), k in 1usize..=7) {
        let current = code(now);
        let history: Vec<_> = past.into_iter().map(code).collect();
        let mut best = f64::INFINITY;
        for (i, h) in history.iter().enumerate() {
            if i < k {
                best = best.min(distance(kind, KlForm::Directed, h, &current).unwrap());
            }
        }
        let s = score_series(&current, &history, kind, KlForm::Directed, k).unwrap().unwrap();
        prop_assert_eq!(s, best);
    }
}

#[test]
fn empty_history_has_no_score() {
    let s = score_series(&code(vec![1.0]), &[], DistanceKind::CosineLatent, KlForm::Directed, 3).unwrap();
    assert_eq!(s, None);
}

fn obs(mu: f32, cloud: f64) -> Observation {
    Observation {
        repr: code(vec![mu, 1.0]),
        meta: TileMeta {
            cloud_fraction: cloud,
            nodata_fraction: 0.0,
        },
    }
}

/// One tile; history is `[most recent, older, oldest]`.
fn single_tile(after_cloud: f64, history_clouds: [f64; 3]) -> Option<f64> {
    let grid = TileGrid {
        rows: 1,
        cols: 1,
        tile_size: 32,
    };
    let history = vec![history_clouds.iter().map(|&c| obs(0.5, c)).collect()];
    let map = assemble_change_map(
        "s_t4",
        "s",
        grid,
        &[obs(2.0, after_cloud)],
        &history,
        &ScoreConfig::default(),
    )
    .unwrap();
    map.scores[0]
}

#[test]
fn cloud_in_after_image_excludes() {
    assert_eq!(single_tile(0.01, [0.0, 0.0, 0.0]), None);
}

#[test]
fn cloud_in_most_recent_before_excludes() {
    assert_eq!(single_tile(0.0, [0.01, 0.0, 0.0]), None);
}

#[test]
fn cloud_in_older_history_does_not_exclude() {
    assert!(single_tile(0.0, [0.0, 0.3, 0.0]).is_some());
    assert!(single_tile(0.0, [0.0, 0.0, 1.0]).is_some());
}

#[test]
fn clear_tile_is_scored() {
    assert!(single_tile(0.0, [0.0, 0.0, 0.0]).is_some());
}
