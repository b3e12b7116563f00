pub mod agents;
pub mod bench;
pub mod conversation;
pub mod gateway;
pub mod message;
pub mod metric;
pub mod model;
pub mod prompt;
pub mod sandbox;
pub mod testkit;
