pub mod env;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod replay;
pub mod seeding;
pub mod worldmodel;
pub mod agent;
pub mod trainer;
