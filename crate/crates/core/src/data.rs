//! Check-in records, vocabulary indexing, region partitioning, trajectory
//! segmentation and splitting, and scene-switching profiles.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fm;
use crate::kmeans::kmeans;
use crate::rng;

pub const SECONDS_PER_HOUR: i64 = 3600;

/// One raw check-in. Timestamps are UTC seconds; `tz_offset_min` is the
/// local offset when the source provides one.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CheckIn {
    pub user: String,
    pub poi: String,
    pub category: String,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
    pub tz_offset_min: i32,
}

impl CheckIn {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !self.lat.is_finite() {
            return Err(Error::Input(alloc::format!("latitude {} out of range", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) || !self.lon.is_finite() {
            return Err(Error::Input(alloc::format!("longitude {} out of range", self.lon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PoiInfo {
    pub id: String,
    pub category: usize,
    pub region: usize,
    pub lat: f64,
    pub lon: f64,
}

/// Dense indices for users, POIs, categories and regions.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vocab {
    pub users: Vec<String>,
    pub pois: Vec<PoiInfo>,
    pub categories: Vec<String>,
    pub n_regions: usize,
}

impl Vocab {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }
    pub fn n_pois(&self) -> usize {
        self.pois.len()
    }
    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }
}

/// A check-in resolved against a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Step {
    pub poi: usize,
    pub category: usize,
    pub region: usize,
    pub timestamp: i64,
    pub tz_offset_min: i32,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub user: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Fails with the first position whose timestamp goes backwards.
    pub fn check_sorted(&self) -> Result<()> {
        for (i, w) in self.steps.windows(2).enumerate() {
            if w[1].timestamp < w[0].timestamp {
                return Err(Error::Ordering(i + 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub input_checkins: usize,
    pub kept_checkins: usize,
    pub removed_pois: usize,
    pub users: usize,
    pub pois: usize,
    pub categories: usize,
}

/// Vocabulary, `(user, step)` pairs in input order, and the filter report.
pub type Indexed = (Vocab, Vec<(usize, Step)>, FilterReport);

/// Category votes, latitude sum, longitude sum and visit count of one POI.
type PoiTally<'a> = (BTreeMap<&'a str, usize>, f64, f64, usize);

/// Drops POIs with fewer than `min_poi_checkins` visits and assigns dense
/// indices (sorted by id). Regions are left at 0; see [`partition_regions`].
pub fn filter_and_index(checkins: &[CheckIn], min_poi_checkins: usize) -> Result<Indexed> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in checkins {
        *counts.entry(c.poi.as_str()).or_default() += 1;
    }
    let kept: Vec<&CheckIn> = checkins.iter().filter(|c| counts[c.poi.as_str()] >= min_poi_checkins).collect();
    if kept.is_empty() {
        return Err(Error::Data("no check-ins survive the POI frequency filter".into()));
    }

    let mut users: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cats: BTreeMap<&str, usize> = BTreeMap::new();
    // per POI: category vote counts and coordinate sums
    let mut poi_acc: BTreeMap<&str, PoiTally> = BTreeMap::new();
    for c in &kept {
        users.insert(c.user.as_str(), 0);
        cats.insert(c.category.as_str(), 0);
        let e = poi_acc.entry(c.poi.as_str()).or_default();
        *e.0.entry(c.category.as_str()).or_default() += 1;
        e.1 += c.lat;
        e.2 += c.lon;
        e.3 += 1;
    }
    for (i, v) in users.values_mut().enumerate() {
        *v = i;
    }
    for (i, v) in cats.values_mut().enumerate() {
        *v = i;
    }
    let mut poi_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pois = Vec::with_capacity(poi_acc.len());
    for (i, (id, (votes, lat, lon, n))) in poi_acc.iter().enumerate() {
        // most frequent category; BTreeMap order breaks ties by id
        let mut best: (&str, usize) = ("", 0);
        for (cat, &cnt) in votes {
            if cnt > best.1 {
                best = (cat, cnt);
            }
        }
        poi_index.insert(id, i);
        pois.push(PoiInfo {
            id: String::from(*id),
            category: cats[best.0],
            region: 0,
            lat: lat / *n as f64,
            lon: lon / *n as f64,
        });
    }
    let steps: Vec<(usize, Step)> = kept
        .iter()
        .map(|c| {
            let p = poi_index[c.poi.as_str()];
            (
                users[c.user.as_str()],
                Step {
                    poi: p,
                    category: pois[p].category,
                    region: 0,
                    timestamp: c.timestamp,
                    tz_offset_min: c.tz_offset_min,
                },
            )
        })
        .collect();
    let report = FilterReport {
        input_checkins: checkins.len(),
        kept_checkins: kept.len(),
        removed_pois: counts.len() - pois.len(),
        users: users.len(),
        pois: pois.len(),
        categories: cats.len(),
    };
    let vocab = Vocab {
        users: users.keys().map(|s| String::from(*s)).collect(),
        pois,
        categories: cats.keys().map(|s| String::from(*s)).collect(),
        n_regions: 1,
    };
    Ok((vocab, steps, report))
}

/// Unit vector for a latitude/longitude pair in degrees.
pub fn unit_vector(lat: f64, lon: f64) -> [f64; 3] {
    let (phi, lam) = (lat.to_radians(), lon.to_radians());
    [fm::cos(phi) * fm::cos(lam), fm::cos(phi) * fm::sin(lam), fm::sin(phi)]
}

/// Region index per POI from seeded k-means on unit-sphere chords.
pub fn partition_regions(pois: &[PoiInfo], k: usize, seed: u64, max_iter: usize) -> Result<Vec<usize>> {
    let pts: Vec<Vec<f64>> = pois.iter().map(|p| unit_vector(p.lat, p.lon).to_vec()).collect();
    let mut distinct = pts.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Config(alloc::format!(
            "{} distinct POI coordinates cannot form {k} regions",
            distinct.len()
        )));
    }
    if k == 1 {
        return Ok(vec![0; pois.len()]);
    }
    let km = kmeans(&pts, k, max_iter, &mut rng::stream(seed, rng::tags::KMEANS, 0))?;
    Ok(km.assignment)
}

/// Writes region indices into the vocabulary and every step.
pub fn apply_regions(vocab: &mut Vocab, steps: &mut [(usize, Step)], regions: &[usize], k: usize) {
    for (p, &r) in vocab.pois.iter_mut().zip(regions) {
        p.region = r;
    }
    vocab.n_regions = k;
    for (_, s) in steps.iter_mut() {
        s.region = regions[s.poi];
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SegmentConfig {
    /// Gap that ends a session.
    pub gap_hours: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { gap_hours: 24.0, min_len: 3, max_len: 101 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub dropped_users: usize,
    pub dropped_segments: usize,
}

impl Splits {
    pub fn all(&self) -> impl Iterator<Item = &Trajectory> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Splits a run of length `n > max` into the fewest near-equal chunks.
fn chunk_sizes(n: usize, max: usize) -> Vec<usize> {
    let parts = n.div_ceil(max);
    let base = n / parts;
    let extra = n % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Cuts each user's time-sorted check-ins at long gaps, drops short
/// segments, chunks long ones, and splits segments 8:1:1 chronologically per
/// user.
pub fn segment_and_split(steps: &[(usize, Step)], cfg: &SegmentConfig) -> Splits {
    let mut by_user: BTreeMap<usize, Vec<Step>> = BTreeMap::new();
    for (u, s) in steps {
        by_user.entry(*u).or_default().push(*s);
    }
    let gap = (cfg.gap_hours * SECONDS_PER_HOUR as f64) as i64;
    let mut out = Splits::default();
    for (user, mut seq) in by_user {
        seq.sort_by_key(|s| s.timestamp);
        let mut segments: Vec<Vec<Step>> = Vec::new();
        let mut cur: Vec<Step> = Vec::new();
        for s in seq {
            if let Some(last) = cur.last() {
                if s.timestamp - last.timestamp > gap {
                    segments.push(core::mem::take(&mut cur));
                }
            }
            cur.push(s);
        }
        if !cur.is_empty() {
            segments.push(cur);
        }
        let mut valid: Vec<Trajectory> = Vec::new();
        for seg in segments {
            if seg.len() < cfg.min_len {
                out.dropped_segments += 1;
                continue;
            }
            if seg.len() <= cfg.max_len {
                valid.push(Trajectory { user, steps: seg });
                continue;
            }
            let mut start = 0;
            for size in chunk_sizes(seg.len(), cfg.max_len) {
                valid.push(Trajectory { user, steps: seg[start..start + size].to_vec() });
                start += size;
            }
        }
        if valid.is_empty() {
            out.dropped_users += 1;
            continue;
        }
        let (n_train, n_val, _) = split_counts(valid.len());
        for (i, t) in valid.into_iter().enumerate() {
            if i < n_train {
                out.train.push(t);
            } else if i < n_train + n_val {
                out.val.push(t);
            } else {
                out.test.push(t);
            }
        }
    }
    out
}

/// 8:1:1 with rounding; at least one training segment.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let tenth = |n: usize| (n + 5) / 10;
    let mut test = tenth(n);
    let mut val = tenth(n);
    while n > 0 && test + val >= n {
        if val >= test && val > 0 {
            val -= 1;
        } else if test > 0 {
            test -= 1;
        } else {
            break;
        }
    }
    (n - val - test, val, test)
}

/// Day of week (Monday = 0) and hour of day for a timestamp in seconds.
pub fn calendar(ts: i64) -> (usize, usize) {
    let days = ts.div_euclid(86_400);
    let secs = ts.rem_euclid(86_400);
    // 1970-01-01 was a Thursday
    let dow = (days + 3).rem_euclid(7) as usize;
    (dow, (secs / SECONDS_PER_HOUR) as usize)
}

/// Timestamp used for calendar features: UTC, or local when requested.
pub fn feature_time(step: &Step, local_time: bool) -> i64 {
    if local_time {
        step.timestamp + step.tz_offset_min as i64 * 60
    } else {
        step.timestamp
    }
}

/// Night `[0,6)`, morning `[6,12)`, afternoon `[12,18)`, evening `[18,24)`.
pub fn time_period(hour: usize) -> usize {
    hour / 6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SwitchSubset {
    Low,
    Medium,
    High,
}

impl SwitchSubset {
    pub fn from_frequency(f: f64) -> Self {
        if f < 0.15 {
            SwitchSubset::Low
        } else if f <= 0.4 {
            SwitchSubset::Medium
        } else {
            SwitchSubset::High
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SwitchSubset::Low => "low",
            SwitchSubset::Medium => "medium",
            SwitchSubset::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchProfile {
    /// Score per transition `i -> i+1`.
    pub scores: Vec<f64>,
    pub frequency: f64,
    pub subset: SwitchSubset,
}

/// Gap above which a transition counts as a time-interval switch.
pub const SWITCH_GAP_HOURS: i64 = 6;

/// Equal-weight mean of three indicators per transition: time-period
/// change, gap above six hours, category change.
pub fn switching_profile(traj: &Trajectory, local_time: bool) -> Result<SwitchProfile> {
    if traj.len() < 2 {
        return Err(Error::Input("switching profile needs at least two check-ins".into()));
    }
    let scores: Vec<f64> = traj
        .steps
        .windows(2)
        .map(|w| {
            let (_, h0) = calendar(feature_time(&w[0], local_time));
            let (_, h1) = calendar(feature_time(&w[1], local_time));
            let period = time_period(h0) != time_period(h1);
            let gap = w[1].timestamp - w[0].timestamp > SWITCH_GAP_HOURS * SECONDS_PER_HOUR;
            let cat = w[0].category != w[1].category;
            (u8::from(period) + u8::from(gap) + u8::from(cat)) as f64 / 3.0
        })
        .collect();
    let frequency = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(SwitchProfile { scores, frequency, subset: SwitchSubset::from_frequency(frequency) })
}

/// Trims the three subsets to a common size, keeping the trajectories whose
/// lengths are closest to the overall median length. Returns indices into
/// `labels` per subset (low, medium, high).
pub fn balance_subsets(lengths: &[usize], labels: &[SwitchSubset]) -> [Vec<usize>; 3] {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let median = if sorted.is_empty() { 0 } else { sorted[sorted.len() / 2] };
    let mut groups: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        groups[*l as usize].push(i);
    }
    let size = groups.iter().map(|g| g.len()).min().unwrap_or(0);
    for g in groups.iter_mut() {
        g.sort_by_key(|&i| (lengths[i].abs_diff(median), i));
        g.truncate(size);
        g.sort_unstable();
    }
    groups
}
