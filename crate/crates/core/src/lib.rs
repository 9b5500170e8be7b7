//! Road sampling, prompt tuning, model-mediated assessment and reliability
//! analysis for street-level built-environment audits.

pub mod assess;
pub mod chat;
pub mod corpus;
pub mod feedback;
pub mod fsutil;
pub mod gateway;
pub mod geo;
pub mod pipeline;
pub mod prompt;
pub mod reliability;
