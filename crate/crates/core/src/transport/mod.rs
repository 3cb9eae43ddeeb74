//! Publish/subscribe wire protocol between pushers and collect agents.

pub mod broker;
pub mod client;
pub mod frame;
pub mod pattern;
pub mod server;

pub use broker::{Agent, RouteReport, StorageWriter};
pub use client::{query_agent, Link, LinkError, Publisher, TcpLink};
pub use frame::{decode_frame, encode_frame, Frame, ProtocolError, QuerySource};
pub use pattern::SubscriptionPattern;
