pub mod clients;
pub mod corpus;
pub mod localization;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod span;
pub mod stepcap;
