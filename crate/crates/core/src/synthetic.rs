//! Small generated corpora with known structure, used by tests, benchmarks
//! and the command-line fixtures.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::{Step, SwitchSubset, Trajectory, SECONDS_PER_HOUR};
use crate::rng;

/// 2024-01-01 00:00 UTC, a Monday.
pub const EPOCH_START: i64 = 1_704_067_200;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub trajectories: Vec<Trajectory>,
    /// Users, POIs, categories, regions.
    pub counts: [usize; 4],
    pub poi_coords: Vec<(f64, f64)>,
    pub poi_category: Vec<usize>,
    pub poi_region: Vec<usize>,
    /// Intended switching regime per trajectory, where one was designed in.
    pub labels: Vec<Option<SwitchSubset>>,
}

impl Corpus {
    fn step(&self, poi: usize, timestamp: i64) -> Step {
        Step { poi, category: self.poi_category[poi], region: self.poi_region[poi], timestamp, tz_offset_min: 0 }
    }

    /// Unit vectors of the POI coordinates.
    pub fn anchor_points(&self) -> Vec<[f64; 3]> {
        self.poi_coords.iter().map(|&(lat, lon)| crate::data::unit_vector(lat, lon)).collect()
    }
}

/// POIs laid out in one small cluster per category around lower Manhattan.
fn clustered_pois(n_cat: usize, per_cat: usize, seed: u64) -> (Vec<(f64, f64)>, Vec<usize>) {
    let mut r = rng::stream(seed, rng::tags::SYNTHETIC, 0);
    let mut coords = Vec::with_capacity(n_cat * per_cat);
    let mut cats = Vec::with_capacity(n_cat * per_cat);
    for c in 0..n_cat {
        let (clat, clon) = (40.70 + 0.03 * c as f64, -74.00 + 0.02 * c as f64);
        for _ in 0..per_cat {
            coords.push((clat + r.random_range(-0.005..0.005), clon + r.random_range(-0.005..0.005)));
            cats.push(c);
        }
    }
    (coords, cats)
}

/// Three categories of ten POIs each. Every POI has `fanout` fixed
/// successors drawn from the whole POI set, so POI transitions are sparse
/// while category transitions are dense. Each user starts in a home
/// category; regions coincide with categories.
pub fn category_tree(n_users: usize, per_user: usize, len: usize, fanout: usize, seed: u64) -> Corpus {
    let (n_cat, per_cat) = (3, 10);
    let n_poi = n_cat * per_cat;
    let (poi_coords, poi_category) = clustered_pois(n_cat, per_cat, seed);
    let mut corpus = Corpus {
        trajectories: Vec::new(),
        counts: [n_users, n_poi, n_cat, n_cat],
        poi_region: poi_category.clone(),
        poi_coords,
        poi_category,
        labels: Vec::new(),
    };
    let mut r = rng::stream(seed, rng::tags::SYNTHETIC, 1);
    let successors: Vec<Vec<usize>> =
        (0..n_poi).map(|p| (0..fanout.max(1)).map(|_| (p + r.random_range(1..n_poi)) % n_poi).collect()).collect();
    for user in 0..n_users {
        let home = user % n_cat;
        for k in 0..per_user {
            let mut t = EPOCH_START + ((user * per_user + k) as i64) * 24 * SECONDS_PER_HOUR;
            let mut poi = home * per_cat + r.random_range(0..per_cat);
            let mut steps = Vec::with_capacity(len);
            for _ in 0..len {
                steps.push(corpus.step(poi, t));
                let next = &successors[poi];
                poi = next[r.random_range(0..next.len())];
                t += SECONDS_PER_HOUR;
            }
            corpus.trajectories.push(Trajectory { user, steps });
            corpus.labels.push(None);
        }
    }
    corpus
}

/// One user visiting five POIs in a fixed cycle.
pub fn loop_corpus(len: usize) -> Corpus {
    let poi_category = vec![0, 0, 1, 1, 2];
    let mut corpus = Corpus {
        trajectories: Vec::new(),
        counts: [1, 5, 3, 2],
        poi_coords: (0..5).map(|i| (40.70 + 0.01 * i as f64, -74.0 + 0.01 * i as f64)).collect(),
        poi_region: vec![0, 0, 0, 1, 1],
        poi_category,
        labels: vec![None],
    };
    let steps = (0..len).map(|i| corpus.step(i % 5, EPOCH_START + i as i64 * SECONDS_PER_HOUR)).collect();
    corpus.trajectories.push(Trajectory { user: 0, steps });
    corpus
}

/// Low- and high-switching trajectories with different optimal memory.
///
/// Low: one category, hourly check-ins, and the next POI is a fixed
/// successor of the current one, so only the latest input matters.
/// High: eight-hour gaps, and every other check-in returns to a home POI
/// seen two steps earlier while the visits in between jump across
/// categories at random, so the useful signal sits further back.
pub fn switching_corpus(n_per_regime: usize, len: usize, seed: u64) -> Corpus {
    let (n_cat, per_cat) = (4, 8);
    let (poi_coords, poi_category) = clustered_pois(n_cat, per_cat, seed);
    let n_users = 8;
    let mut corpus = Corpus {
        trajectories: Vec::new(),
        counts: [n_users, n_cat * per_cat, n_cat, n_cat],
        poi_region: poi_category.clone(),
        poi_coords,
        poi_category,
        labels: Vec::new(),
    };
    let mut r = rng::stream(seed, rng::tags::SYNTHETIC, 2);
    for k in 0..2 * n_per_regime {
        let high = k % 2 == 1;
        let user = k % n_users;
        let mut t = EPOCH_START + k as i64 * 7 * 24 * SECONDS_PER_HOUR;
        let mut steps = Vec::with_capacity(len);
        if high {
            let home = r.random_range(0..n_cat * per_cat);
            let home_cat = home / per_cat;
            for i in 0..len {
                let poi = if i % 2 == 0 {
                    home
                } else {
                    let cat = (home_cat + r.random_range(1..n_cat)) % n_cat;
                    cat * per_cat + r.random_range(0..per_cat)
                };
                steps.push(corpus.step(poi, t));
                t += 8 * SECONDS_PER_HOUR;
            }
        } else {
            let cat = r.random_range(0..n_cat);
            let mut slot = r.random_range(0..per_cat);
            for _ in 0..len {
                steps.push(corpus.step(cat * per_cat + slot, t));
                slot = (slot + 1) % per_cat;
                t += SECONDS_PER_HOUR;
            }
        }
        corpus.trajectories.push(Trajectory { user, steps });
        corpus.labels.push(Some(if high { SwitchSubset::High } else { SwitchSubset::Low }));
    }
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::switching_profile;

    #[test]
    fn switching_labels_match_profiles() {
        let c = switching_corpus(10, 12, 3);
        for (t, l) in c.trajectories.iter().zip(&c.labels) {
            assert_eq!(Some(switching_profile(t, false).unwrap().subset), *l);
            t.check_sorted().unwrap();
        }
    }

    #[test]
    fn corpora_are_consistent() {
        for c in [category_tree(6, 4, 10, 2, 1), loop_corpus(11), switching_corpus(3, 8, 2)] {
            assert_eq!(c.poi_coords.len(), c.counts[1]);
            for t in &c.trajectories {
                assert!(t.user < c.counts[0]);
                for s in &t.steps {
                    assert!(s.poi < c.counts[1] && s.category < c.counts[2] && s.region < c.counts[3]);
                }
            }
        }
        assert_eq!(category_tree(6, 4, 10, 2, 1), category_tree(6, 4, 10, 2, 1));
    }
}
