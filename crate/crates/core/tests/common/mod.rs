#![allow(dead_code)]

pub mod objectives;
