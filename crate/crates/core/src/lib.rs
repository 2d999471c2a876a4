pub mod aasl;
pub mod catalog;
pub mod digest;
pub mod pad;
pub mod protocol;
pub mod store;
