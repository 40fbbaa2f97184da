//! First target-shop visits per assigned user.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::distance::local_day;
use super::types::{Assignment, Campaign, Group, VisitEvent};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstVisit {
    pub user_id: String,
    pub campaign_id: String,
    pub group: Group,
    /// Arrival of the first target-shop visit, UTC seconds.
    pub arrival: i64,
    /// Local day index of that arrival.
    pub day: i64,
}

/// Checks that every assignment names a known campaign and no user is assigned twice.
pub fn index_campaigns<'a>(
    assignments: &'a [Assignment],
    campaigns: &'a [Campaign],
) -> Result<(HashMap<&'a str, &'a Campaign>, HashMap<&'a str, &'a Assignment>)> {
    let mut by_id = HashMap::new();
    for c in campaigns {
        if by_id.insert(c.campaign_id.as_str(), c).is_some() {
            return Err(Error::invalid(format!("campaign {} listed twice", c.campaign_id)));
        }
    }
    let mut by_user = HashMap::new();
    for a in assignments {
        if !by_id.contains_key(a.campaign_id.as_str()) {
            return Err(Error::invalid(format!(
                "user {} is assigned to unknown campaign {}",
                a.user_id, a.campaign_id
            )));
        }
        if by_user.insert(a.user_id.as_str(), a).is_some() {
            return Err(Error::invalid(format!("user {} has more than one assignment", a.user_id)));
        }
    }
    Ok((by_id, by_user))
}

/// Earliest visit to each assigned user's target shop during the experiment period.
///
/// Users who never visit the target in the period are absent from the result.
pub fn first_target_visits(
    visits: &[VisitEvent],
    assignments: &[Assignment],
    campaigns: &[Campaign],
    day_offset_s: i64,
) -> Result<BTreeMap<String, FirstVisit>> {
    let (by_id, by_user) = index_campaigns(assignments, campaigns)?;
    let mut out: BTreeMap<String, FirstVisit> = BTreeMap::new();
    for v in visits {
        let Some(a) = by_user.get(v.user_id.as_str()) else { continue };
        let c = by_id[a.campaign_id.as_str()];
        if v.place_id != c.target_place_id || v.arrival < c.start || v.arrival > c.end {
            continue;
        }
        let earlier = out.get(&v.user_id).is_none_or(|f| v.arrival < f.arrival);
        if earlier {
            out.insert(
                v.user_id.clone(),
                FirstVisit {
                    user_id: v.user_id.clone(),
                    campaign_id: a.campaign_id.clone(),
                    group: a.group,
                    arrival: v.arrival,
                    day: local_day(v.arrival, day_offset_s),
                },
            );
        }
    }
    Ok(out)
}
