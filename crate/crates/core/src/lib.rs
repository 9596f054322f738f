//! Decentralized trajectory planning for aerial swarms, with a deterministic
//! multi-agent simulator.

pub mod agent;
pub mod drift;
pub mod environment;
pub mod harness;
pub mod lbfgs;
pub mod message;
pub mod netsim;
pub mod optimizer;
pub mod trajectory;

pub use environment::OccupancyGrid;
pub use message::{AgentId, TrajectoryMessage};
pub use trajectory::{BSplineTrajectory, Vec3};
