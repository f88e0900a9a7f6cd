//! Rigid point-cloud registration from putative correspondences.
//!
//! A global RANSAC scores hypotheses on the full correspondence set while a
//! local RANSAC draws them from a filtered set of line vectors (pairwise
//! difference vectors) solved with a graduated non-convexity rotation solver.
//! The two loops exchange their best transforms and iteration counts each
//! round, and the local sets are revised between rounds with a probabilistic
//! inclusion/eviction rule. The result is refined by a weighted SVD over the
//! final global inliers, each weighted by one plus the number of earlier
//! rounds in which it was a global inlier.
//!
//! ```no_run
//! use sulreg::{io, ransac};
//!
//! let source = io::load_point_cloud("source.xyz")?;
//! let target = io::load_point_cloud("target.xyz")?;
//! let corrs = io::load_correspondences("corr.txt", &source, &target)?;
//! let cfg = ransac::RansacConfig { residual_threshold: 0.01, ..Default::default() };
//! let result = ransac::run_registration(&corrs, &source, &target, &cfg)?;
//! println!("{:?}", result.transform);
//! # Ok::<(), sulreg::Error>(())
//! ```

// validation uses `!(x > 0.0)` so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod geometry;
pub mod histogram;
pub mod io;
pub mod knn;
pub mod local_sets;
pub mod metrics;
pub mod normals;
mod par;
pub mod ransac;
pub mod solver;
pub mod sus;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Correspondence, RigidTransform, Rotation, Vec3};
pub use knn::{PointCloud, SpatialIndex};
pub use par::with_workers;
pub use ransac::{run_registration, RansacConfig, RegistrationResult};
