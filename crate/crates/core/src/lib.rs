pub mod encoders;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod membank;
pub mod numgrad;
pub mod par;
pub mod pseudo;
pub mod reference;
pub mod rng;
pub mod synthdata;
pub mod trainer;
