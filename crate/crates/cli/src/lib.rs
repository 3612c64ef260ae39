//! Command line front end and HTTP control service for the rehab simulator.

pub mod commands;
pub mod service;
