pub mod diffkit;
pub mod markov;
pub mod par;
pub mod encoder;
pub mod infomax;
pub mod adaptivek;
pub mod envs;
pub mod agent;
pub mod harness;
