pub mod augment;
pub mod config;
pub mod corpus; pub mod expansion; pub mod llm;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod prompt;
pub mod rerank; pub mod retrieval; pub mod template; pub mod text;
