pub mod channel;
pub mod frame;
pub mod harness;
pub mod mac;
pub mod net;
pub mod phy;
pub mod sim;
