use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A raw location ping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub user_id: String,
    /// UTC seconds since the Unix epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
}

/// Coarse commercial category of a place.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Shopping,
    Food,
    Service,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Shopping, Category::Food, Category::Service];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Shopping => "shopping",
            Category::Food => "food",
            Category::Service => "service",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shopping" => Ok(Category::Shopping),
            "food" => Ok(Category::Food),
            "service" => Ok(Category::Service),
            other => Err(Error::invalid(format!("unknown category `{other}`"))),
        }
    }
}

/// Experimental arm.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Treatment,
    Control,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Treatment => "treatment",
            Group::Control => "control",
        }
    }

    pub fn is_treated(self) -> bool {
        self == Group::Treatment
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "treatment" | "t" | "1" => Ok(Group::Treatment),
            "control" | "c" | "0" => Ok(Group::Control),
            other => Err(Error::invalid(format!("unknown group `{other}`"))),
        }
    }
}

/// A registered commercial place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Place {
    pub place_id: String,
    pub lat: f64,
    pub lon: f64,
    pub category: Category,
    pub fine_category: String,
}

/// A user's experimental assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub user_id: String,
    pub campaign_id: String,
    pub group: Group,
}

/// One A/B-tested campaign and its target shop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Campaign {
    pub campaign_id: String,
    pub target_place_id: String,
    /// First second of the experiment period, UTC.
    pub start: i64,
    /// Last second of the experiment period, UTC (inclusive).
    pub end: i64,
}

/// A detected stay at a registered place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitEvent {
    pub user_id: String,
    pub place_id: String,
    pub arrival: i64,
    pub departure: i64,
    pub category: Category,
    pub fine_category: String,
    /// Coordinates of the visited place.
    pub lat: f64,
    pub lon: f64,
}

impl VisitEvent {
    pub fn dwell_s(&self) -> i64 {
        self.departure - self.arrival
    }
}

/// Closed registry of fine-grained place labels, each mapped to its coarse category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryRegistry {
    fine: BTreeMap<String, Category>,
}

const SHOPPING_LABELS: [&str; 96] = [
    "antiques", "appliances", "art_supplies", "baby_goods", "bags", "bakery", "bedding",
    "bicycles", "bookstore", "butcher", "cameras", "camping", "car_accessories", "carpets",
    "cellphones", "clothing_kids", "clothing_men", "clothing_women", "coffee_beans", "computers",
    "confectionery", "convenience_store", "cosmetics", "costumes", "crafts", "curtains",
    "dance_wear", "delicatessen", "department_store", "discount_store", "diy", "drugstore",
    "duty_free", "electronics", "eyewear", "fabric", "fishing", "fishmonger", "fitness_equipment",
    "florist", "frames", "furniture", "garden_center", "golf", "greengrocer", "hardware",
    "health_food", "hobby", "home_goods", "hundred_yen_store", "imported_food", "interior",
    "jewelry", "kimono", "kitchenware", "lighting", "lingerie", "liquor", "lottery", "maternity",
    "motorcycles", "music_instruments", "organic_food", "outdoor", "outlet", "party_goods", "pawn",
    "pet_supplies", "records", "religious_goods", "rice", "secondhand_clothing", "shoes",
    "ski_snowboard", "souvenirs", "sporting_goods", "sportswear", "stationery", "supermarket",
    "supplements", "surf", "swimwear", "tableware", "tailoring", "tea", "tires", "tobacco", "tofu",
    "toys", "uniforms", "variety_store", "video_games", "vintage", "wagashi", "watches",
    "wine",
];

const FOOD_LABELS: [&str; 6] = ["cafe", "fast_food", "izakaya", "ramen", "restaurant", "sushi"];
const SERVICE_LABELS: [&str; 6] = ["bank", "clinic", "gym", "laundry", "post_office", "salon"];

impl Default for CategoryRegistry {
    /// 96 shopping labels plus a handful of food and service labels.
    fn default() -> Self {
        let mut fine = BTreeMap::new();
        for l in SHOPPING_LABELS {
            fine.insert(l.to_string(), Category::Shopping);
        }
        for l in FOOD_LABELS {
            fine.insert(l.to_string(), Category::Food);
        }
        for l in SERVICE_LABELS {
            fine.insert(l.to_string(), Category::Service);
        }
        CategoryRegistry { fine }
    }
}

impl CategoryRegistry {
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Category, S)>,
        S: Into<String>,
    {
        let mut fine = BTreeMap::new();
        for (cat, label) in pairs {
            let label = label.into();
            if let Some(prev) = fine.insert(label.clone(), cat) {
                if prev != cat {
                    return Err(Error::invalid(format!(
                        "fine category `{label}` registered under both {prev} and {cat}"
                    )));
                }
            }
        }
        Ok(CategoryRegistry { fine })
    }

    pub fn category_of(&self, fine: &str) -> Option<Category> {
        self.fine.get(fine).copied()
    }

    pub fn check(&self, category: Category, fine: &str) -> Result<()> {
        match self.category_of(fine) {
            Some(c) if c == category => Ok(()),
            Some(c) => Err(Error::invalid(format!(
                "fine category `{fine}` belongs to {c}, not {category}"
            ))),
            None => Err(Error::invalid(format!("fine category `{fine}` is not registered"))),
        }
    }

    /// Fine labels of one coarse category in sorted order.
    pub fn labels(&self, category: Category) -> Vec<&str> {
        self.fine
            .iter()
            .filter(|(_, c)| **c == category)
            .map(|(l, _)| l.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }
}
