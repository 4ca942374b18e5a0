//! Deterministic simulator of a wireless PLC installation: field switches
//! bridged over an emulated HC05 master/slave Bluetooth link into a soft PLC
//! running instruction-list ladder logic.

pub mod bridge;
pub mod btlink;
pub mod electrical;
pub mod ladder;
pub mod netmodels;
pub mod service;
pub mod simkernel;
