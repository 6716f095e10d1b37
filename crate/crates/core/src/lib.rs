//! Decentralised digital token architecture for public-transport fare
//! collection: blind-signature credentials, a simulated public-permissioned
//! ledger, the four protocol actors, and an open-loop load-test harness.

pub mod blindsig;
pub mod httpapi;
pub mod client;
pub mod fareservice;
pub mod gateway;
pub mod issuer;
pub mod ledger;
pub mod stack;
pub mod token;
pub mod wallet;
pub mod wire;
