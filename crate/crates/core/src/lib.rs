//! Machine-to-machine middleware gateway.
//!
//! Connected objects exchange data as elements made of `<name,type,value>`
//! triples. The gateway stores every element and administrative change in an
//! append-only event log, routes messages between objects, coordinates
//! two-phase commits, evaluates event subscriptions and serves the Open API
//! over HTTP.

pub mod admin;
pub mod broker;
pub mod codec;
pub mod env;
pub mod gateway;
pub mod group;
pub mod model;
pub mod notify;
pub mod store;
pub mod txn;

pub use gateway::{Gateway, GatewayConfig, GatewayError, Runtime};
pub use model::{ContextElement, DataElement, Element, Triple, TypeTag, Value};
