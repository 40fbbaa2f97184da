//! Place layout and home-anchored ping trajectories.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::TAU;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{
    campaign_id, campaign_odds_ratios, dominance_rule, draw_features, outcome_model, substream,
    tau_threshold, GroundTruth, SimConfig, SimData, UserTruth,
};
use crate::error::{Error, Result};
use crate::geo::{destination, haversine_km, EARTH_RADIUS_KM};
use crate::trajectory::{
    Assignment, Campaign, Category, CategoryRegistry, Group, LocationRecord, Place, SECONDS_PER_DAY,
};

/// Aligned radius within which nearby places are laid out.
pub(crate) const NEARBY_RADIUS_M: f64 = 1900.0;
const MIN_SPACING_M: f64 = 60.0;
const TARGET_SPACING_KM: f64 = 5.0;
const REGION_CENTER: (f64, f64) = (35.68, 139.76);
const REGION_HALF_DEG: (f64, f64) = (0.25, 0.30);
/// 2021-02-01.
const FIRST_START_DAY: i64 = 18_659;
const MAX_FIRST_VISIT_DELAY: i64 = 20;
const STAY_OFFSETS_S: [i64; 3] = [0, 330, 660];
const STAY_JITTER_KM: f64 = 0.005;
const HISTORY_SHOPS: usize = 5;

fn metres_per_degree() -> f64 {
    EARTH_RADIUS_KM * 1000.0 * std::f64::consts::PI / 180.0
}

/// Coarse hash of placed points for minimum-spacing checks.
#[derive(Default)]
struct Spacing {
    cells: HashMap<(i64, i64), Vec<(f64, f64)>>,
}

impl Spacing {
    fn key(lat: f64, lon: f64) -> (i64, i64) {
        ((lat / 0.001).floor() as i64, (lon / 0.001).floor() as i64)
    }

    fn clear(&self, lat: f64, lon: f64) -> bool {
        let (i, j) = Self::key(lat, lon);
        for di in -1..=1 {
            for dj in -1..=1 {
                if let Some(pts) = self.cells.get(&(i + di, j + dj)) {
                    if pts.iter().any(|&(a, b)| haversine_km(lat, lon, a, b) * 1000.0 < MIN_SPACING_M) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, lat: f64, lon: f64) {
        self.cells.entry(Self::key(lat, lon)).or_default().push((lat, lon));
    }
}

struct Layout {
    places: Vec<Place>,
    targets: Vec<usize>,
    /// Nearby place indices per campaign, split by the ring.
    inside: Vec<Vec<usize>>,
    outside: Vec<Vec<usize>>,
    city: Vec<usize>,
    spacing: Spacing,
}

impl Layout {
    fn nearby(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        self.inside[c].iter().chain(&self.outside[c]).copied()
    }
}

fn pick_category(rng: &mut impl Rng, registry: &CategoryRegistry) -> (Category, String) {
    let u = rng.random::<f64>();
    let cat = if u < 0.5 {
        Category::Shopping
    } else if u < 0.8 {
        Category::Food
    } else {
        Category::Service
    };
    let label = *registry.labels(cat).choose(rng).expect("registry has labels");
    (cat, label.to_string())
}

fn layout(cfg: &SimConfig, rng: &mut impl Rng) -> Result<Layout> {
    let registry = CategoryRegistry::default();
    let shopping = registry.labels(Category::Shopping);
    let mut lay = Layout {
        places: Vec::new(),
        targets: Vec::new(),
        inside: Vec::new(),
        outside: Vec::new(),
        city: Vec::new(),
        spacing: Spacing::default(),
    };
    let region = |rng: &mut dyn rand::RngCore| {
        (
            REGION_CENTER.0 + rng.random_range(-REGION_HALF_DEG.0..REGION_HALF_DEG.0),
            REGION_CENTER.1 + rng.random_range(-REGION_HALF_DEG.1..REGION_HALF_DEG.1),
        )
    };

    for c in 0..cfg.n_campaigns {
        let (lat, lon) = (0..10_000)
            .map(|_| region(rng))
            .find(|&(lat, lon)| {
                lay.targets.iter().all(|&t| {
                    haversine_km(lat, lon, lay.places[t].lat, lay.places[t].lon) >= TARGET_SPACING_KM
                })
            })
            .ok_or_else(|| Error::Config(format!("cannot place {} separated target shops", cfg.n_campaigns)))?;
        lay.spacing.insert(lat, lon);
        lay.targets.push(lay.places.len());
        lay.places.push(Place {
            place_id: format!("shop_{}", campaign_id(c)),
            lat,
            lon,
            category: Category::Shopping,
            fine_category: shopping.choose(rng).expect("labels").to_string(),
        });
    }

    let mpd = metres_per_degree();
    for c in 0..cfg.n_campaigns {
        let target = lay.places[lay.targets[c]].clone();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for k in 0..cfg.nearby_places {
            let spot = (0..1000).find_map(|_| {
                let r = NEARBY_RADIUS_M * rng.random::<f64>().sqrt();
                let theta = rng.random_range(0.0..TAU);
                let (u, v) = (r * theta.cos() / mpd, r * theta.sin() / mpd);
                let (lat, lon) = (target.lat + u, target.lon + v);
                (r >= MIN_SPACING_M && lay.spacing.clear(lat, lon)).then_some((lat, lon, r))
            });
            let Some((lat, lon, r)) = spot else {
                return Err(Error::Config("nearby places do not fit around the target".into()));
            };
            lay.spacing.insert(lat, lon);
            let (category, fine_category) = pick_category(rng, &registry);
            let idx = lay.places.len();
            lay.places.push(Place {
                place_id: format!("{}_p{:03}", campaign_id(c), k + 1),
                lat,
                lon,
                category,
                fine_category,
            });
            if r <= cfg.ring_radius_m {
                inside.push(idx);
            } else {
                outside.push(idx);
            }
        }
        lay.inside.push(inside);
        lay.outside.push(outside);
    }

    for k in 0..cfg.city_places {
        let spot = (0..1000).map(|_| region(rng)).find(|&(lat, lon)| lay.spacing.clear(lat, lon));
        let Some((lat, lon)) = spot else {
            return Err(Error::Config("city places do not fit in the region".into()));
        };
        lay.spacing.insert(lat, lon);
        lay.city.push(lay.places.len());
        lay.places.push(Place {
            place_id: format!("city_{:04}", k + 1),
            lat,
            lon,
            category: Category::Shopping,
            fine_category: shopping.choose(rng).expect("labels").to_string(),
        });
    }
    Ok(lay)
}

/// Appends one day of pings: optional night pings at home, home at 07:00, a 660 s stay at each
/// stop from 09:00 in two-hour slots, one excursion ping and home at 19:00.
///
/// The excursion point is placed so that the day's summed segment length equals `distance_km`.
/// Returns true when the stops alone already exceed it and the distance was raised.
#[allow(clippy::too_many_arguments)]
fn build_day(
    out: &mut Vec<LocationRecord>,
    user: &str,
    home: (f64, f64),
    day: i64,
    night: bool,
    stops: &[&Place],
    distance_km: f64,
    day_offset_s: i64,
    rng: &mut impl Rng,
) -> bool {
    let at = |secs: i64| day * SECONDS_PER_DAY + secs - day_offset_s;
    let mut pts: Vec<(i64, f64, f64)> = Vec::with_capacity(4 + 3 * stops.len());
    if night {
        pts.push((at(2 * 3600), home.0, home.1));
        pts.push((at(4 * 3600), home.0, home.1));
    }
    pts.push((at(7 * 3600), home.0, home.1));
    for (k, p) in stops.iter().enumerate() {
        let t0 = 9 * 3600 + 2 * 3600 * k as i64;
        for dt in STAY_OFFSETS_S {
            let (lat, lon) =
                destination(p.lat, p.lon, rng.random_range(0.0..TAU), rng.random_range(0.0..STAY_JITTER_KM));
            pts.push((at(t0 + dt), lat, lon));
        }
    }
    let fixed: f64 = pts.windows(2).map(|w| haversine_km(w[0].1, w[0].2, w[1].1, w[1].2)).sum();
    let (last_t, last_lat, last_lon) = *pts.last().expect("home ping");
    let floor = haversine_km(last_lat, last_lon, home.0, home.1);
    let mut rem = distance_km - fixed;
    let clamped = rem < floor;
    if clamped {
        rem = floor + 0.5;
    }
    // Excursion along a random bearing from home: solve dist(last, P) + |home P| = rem.
    let theta = rng.random_range(0.0..TAU);
    let reach = |r: f64| {
        let (lat, lon) = destination(home.0, home.1, theta, r);
        haversine_km(last_lat, last_lon, lat, lon) + r
    };
    let (mut lo, mut hi) = (0.0, rem);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if reach(mid) < rem {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (plat, plon) = destination(home.0, home.1, theta, 0.5 * (lo + hi));
    let t_excursion = at(15 * 3600).max(last_t + 3600);
    pts.push((t_excursion, plat, plon));
    pts.push((at(19 * 3600).max(t_excursion + 3600), home.0, home.1));
    out.extend(pts.into_iter().map(|(timestamp, lat, lon)| LocationRecord {
        user_id: user.to_string(),
        timestamp,
        lat,
        lon,
    }));
    clamped
}

struct CampaignOutput {
    records: Vec<LocationRecord>,
    assignments: Vec<Assignment>,
    users: BTreeMap<String, UserTruth>,
    clamped: usize,
}

#[allow(clippy::too_many_arguments)]
fn simulate_campaign(
    cfg: &SimConfig,
    lay: &Layout,
    c: usize,
    odds_ratio: f64,
    features: &[Vec<f64>],
    threshold: Option<(usize, f64)>,
    start_day: i64,
) -> Result<CampaignOutput> {
    let mut rng = substream(cfg.seed, 2 * c as u64 + 2);
    let cid = campaign_id(c);
    let target = &lay.places[lay.targets[c]];
    let nearby: Vec<usize> = lay.nearby(c).collect();
    let noise = Normal::new(0.0, cfg.day_sd_km).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = CampaignOutput {
        records: Vec::new(),
        assignments: Vec::new(),
        users: BTreeMap::new(),
        clamped: 0,
    };
    let [b0, b1] = cfg.base_distance_km;
    let max_delay = MAX_FIRST_VISIT_DELAY.min(cfg.campaign_days - 1);

    for (j, feats) in features.iter().enumerate() {
        let user = format!("{cid}_u{:04}", j + 1);
        let home_km = *feats.last().expect("home distance feature");
        let treated = rng.random::<f64>() < cfg.treatment_share;
        let visitor = rng.random::<f64>() >= cfg.non_visitor_share;
        let home = (0..100)
            .map(|_| destination(target.lat, target.lon, rng.random_range(0.0..TAU), home_km))
            .find(|&(lat, lon)| lay.spacing.clear(lat, lon))
            .ok_or_else(|| Error::Config("no free home location near the target".into()))?;
        let base = rng.random_range(b0..=b1);
        let first_day = start_day + rng.random_range(0..=max_delay);
        let o = outcome_model(cfg, odds_ratio, feats, threshold)?;
        let p = if treated { o.p_treated } else { o.p_control };
        let revisit = visitor && rng.random::<f64>() < p;
        let revisit_after = revisit.then(|| rng.random_range(1..=cfg.revisit_window_days));

        let shift = if treated { cfg.confounder_km } else { 0.0 };
        let effect = if treated && visitor { cfg.distance_effect_km } else { 0.0 };
        let day_km = |post: bool, rng: &mut rand_chacha::ChaCha8Rng| {
            base + shift + if post { effect } else { 0.0 } + noise.sample(rng)
        };

        // History days shop at one of the city places closest to home; their distance is not
        // analysed, so raising it to fit the stop is not counted.
        let mut city = lay.city.clone();
        city.sort_by(|&a, &b| {
            let d = |i: usize| haversine_km(home.0, home.1, lay.places[i].lat, lay.places[i].lon);
            d(a).total_cmp(&d(b))
        });
        city.truncate(HISTORY_SHOPS);
        let history_start = start_day - 14 - cfg.history_days as i64;
        for h in 0..cfg.history_days as i64 {
            let stop = &lay.places[*city.choose(&mut rng).expect("city places")];
            let d = day_km(false, &mut rng);
            build_day(&mut out.records, &user, home, history_start + h, true, &[stop], d, cfg.day_offset_s, &mut rng);
        }
        for s in -3i64..=3 {
            let mut stops: Vec<&Place> = Vec::new();
            if visitor && revisit_after == Some(s) {
                stops.push(target);
            }
            if s == 0 && visitor {
                stops.push(target);
            } else if s > 0 && visitor {
                let (own, other) = match (treated, &lay.inside[c], &lay.outside[c]) {
                    (true, i, o) => (o, i),
                    (false, i, o) => (i, o),
                };
                let side = if rng.random::<f64>() < cfg.ring_strength { own } else { other };
                let side = if side.is_empty() { &nearby } else { side };
                stops.push(&lay.places[*side.choose(&mut rng).expect("nearby places")]);
            } else {
                stops.push(&lay.places[*nearby.choose(&mut rng).expect("nearby places")]);
            }
            let d = day_km(s > 0, &mut rng);
            out.clamped += usize::from(build_day(
                &mut out.records, &user, home, first_day + s, false, &stops, d, cfg.day_offset_s, &mut rng,
            ));
        }
        if let Some(r) = revisit_after.filter(|&r| r > 3) {
            let d = day_km(true, &mut rng);
            out.clamped += usize::from(build_day(
                &mut out.records, &user, home, first_day + r, false, &[target], d, cfg.day_offset_s, &mut rng,
            ));
        }

        out.assignments.push(Assignment {
            user_id: user.clone(),
            campaign_id: cid.clone(),
            group: if treated { Group::Treatment } else { Group::Control },
        });
        out.users.insert(
            user,
            UserTruth {
                campaign_id: cid.clone(),
                treated,
                visitor,
                features: feats.clone(),
                responder: o.responder,
                p_control: o.p_control,
                p_treated: o.p_treated,
                tau: o.p_treated - o.p_control,
                revisit,
            },
        );
    }
    Ok(out)
}

/// Generates a full synthetic experiment.
///
/// The place layout comes from sub-stream 0 of the seed, user features of campaign `c` from
/// stream `2c + 1` and its trajectories from stream `2c + 2`, so campaigns are generated in
/// parallel and merged in campaign order.
pub fn generate(cfg: &SimConfig) -> Result<SimData> {
    cfg.validate()?;
    let ors = campaign_odds_ratios(cfg)?;
    let lay = layout(cfg, &mut substream(cfg.seed, 0))?;

    let features: Vec<Vec<Vec<f64>>> = (0..cfg.n_campaigns)
        .map(|c| {
            let mut rng = substream(cfg.seed, 2 * c as u64 + 1);
            (0..cfg.users_per_campaign).map(|_| draw_features(cfg, &mut rng)).collect()
        })
        .collect();
    let rows: Vec<&[f64]> = features.iter().flatten().map(Vec::as_slice).collect();
    let threshold = tau_threshold(cfg, &rows);

    let start_day = |c: usize| FIRST_START_DAY + c as i64 * cfg.campaign_stagger_days;
    let parts: Vec<CampaignOutput> = (0..cfg.n_campaigns)
        .into_par_iter()
        .map(|c| simulate_campaign(cfg, &lay, c, ors[c], &features[c], threshold, start_day(c)))
        .collect::<Result<_>>()?;

    let campaigns = (0..cfg.n_campaigns)
        .map(|c| Campaign {
            campaign_id: campaign_id(c),
            target_place_id: lay.places[lay.targets[c]].place_id.clone(),
            start: start_day(c) * SECONDS_PER_DAY - cfg.day_offset_s,
            end: (start_day(c) + cfg.campaign_days) * SECONDS_PER_DAY - cfg.day_offset_s - 1,
        })
        .collect();

    let mut records = Vec::new();
    let mut assignments = Vec::new();
    let mut users = BTreeMap::new();
    let mut clamped = 0;
    for p in parts {
        records.extend(p.records);
        assignments.extend(p.assignments);
        users.extend(p.users);
        clamped += p.clamped;
    }
    crate::trajectory::sort_and_dedup(&mut records);
    let n_demo = cfg.demographics.len();
    let demographics = users.iter().map(|(u, t)| (u.clone(), t.features[..n_demo].to_vec())).collect();

    Ok(SimData {
        records,
        places: lay.places,
        assignments,
        campaigns,
        demographic_names: cfg.demographics.clone(),
        demographics,
        truth: GroundTruth {
            seed: cfg.seed,
            beta_distance_km: cfg.distance_effect_km,
            confounder_km: cfg.confounder_km,
            ring_radius_m: cfg.ring_radius_m,
            dominance_rule: dominance_rule(cfg),
            feature_names: cfg.feature_names(),
            campaign_or: ors.iter().enumerate().map(|(c, &v)| (campaign_id(c), v)).collect(),
            tau_threshold: threshold.map(|(_, t)| t),
            clamped_days: clamped,
            users,
        },
    })
}
