//! Sensors forward alerts to a master, which stores them and pushes
//! versioned rule sets back.

pub mod master;
pub mod sensor;
pub mod store;
pub mod wire;

pub use master::{Master, MasterConfig, MasterStats, PushError, PushOutcome};
pub use sensor::{apply_push, Sensor, Spool, Uplink, UplinkConfig, DEFAULT_SPOOL};
pub use store::{AlertStore, Recovery, StoreQuery};
pub use wire::{AlertRecord, Message, PushStatus, RulePush, DEFAULT_PORT, PROTO_VERSION};
