pub mod clock_net;
pub mod crypto;
pub mod harness;
pub mod ideal_model;
pub mod ledger;
pub mod protocol;
pub mod te_dtc;
pub mod te_tee;
pub mod user_agent;
pub mod world;
