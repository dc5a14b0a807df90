//! Metrics, the synthetic cine phantom and the complexity checker.

mod complexity;
mod metrics;
mod phantom;

pub use complexity::{check_complexity, complexity_csv, default_grid, ComplexityConfig, ComplexityRow};
pub use metrics::{dice, hd95, report_by_region, LabelGrid, MetricsReport, MetricsRow, RegionKey};
pub use phantom::{gen_phantom, PhantomSpec};
