//! Location ingestion, stay detection, alignment, gridding and distance features.

mod campaign;
mod distance;
mod grid;
mod ingest;
mod types;
mod visits;

pub use campaign::{first_target_visits, index_campaigns, FirstVisit};
pub use distance::{
    daily_travel_distance, home_distance, local_day, local_time_of_day, NIGHT_END_S,
    SECONDS_PER_DAY,
};
pub use grid::{
    align_points, build_grid, dominance_labels, normalize_grid, AlignedPoint, Alignment,
    DominanceLabel, GridKey, GridMember, VisitGrid, DEFAULT_CELL_SIZE_DEG, DEFAULT_GRID_RADIUS_M,
};
pub use ingest::{
    ingest_records, ingest_records_with, parse_timestamp, read_assignments, read_campaigns, read_places,
    sort_and_dedup, Ingested, RowError, MAX_MALFORMED_FRACTION,
};
pub use types::{
    Assignment, Campaign, Category, CategoryRegistry, Group, LocationRecord, Place, VisitEvent,
};
pub use visits::{detect_visits, split_by_user, PlaceIndex, MIN_DWELL_S, VISIT_RADIUS_M};
