//! Scenario-forge: a toolkit for scenario-based safety assessment of
//! automated vehicles. It extracts parametrized traffic scenarios from
//! driving logs, generates tail-biased test scenarios by sampling estimated
//! parameter distributions, runs them against a modeled vehicle under test,
//! and aggregates KPI pass/fail results into a safety report.

pub mod canonical;
pub mod db;
pub mod decompose;
pub mod density;
pub mod genscen;
pub mod ingest;
pub mod mining;
pub mod simulate;
pub mod report;
pub mod rng;
pub mod road;
pub mod scenario;
pub mod synthetic;
pub mod tags;

pub use scenario::{Activity, ActivityParams, Channel, Event, Mode, ScenarioRecord};
pub use tags::{TagQuery, TagRef, TagTree, Taxonomy};
