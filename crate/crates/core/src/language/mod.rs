//! Vocabulary, attention LSTM, task batching, generation and scoring.

pub mod model;
pub mod vocab;

pub use model::{make_task_batch, make_task_batch_for, Generated, LangConfig, LangModel, LstmState, SeqFeatures, TaskSequence};
pub use vocab::{start_token, Vocab, END_TOKEN};
