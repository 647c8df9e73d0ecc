//! Action-aware fine-tuning of a frozen image/text dual encoder.
//!
//! A small vision-transformer adapter reads two RGBA frames of an action
//! video, averages its outputs into one action embedding and writes that
//! vector into the verb-token positions of the prompt before the frozen text
//! encoder runs. Training combines a frame/prompt contrastive loss with a
//! triplet loss that orders the pre- and post-action frames.

pub mod dataprep;
pub mod frame;
pub mod graph;
pub mod tokenizer;
pub mod checkpoint;
pub mod model;
pub mod nn;
pub mod loss;
pub mod report;
pub mod dataset;
pub mod optim;
pub mod synthetic;
pub mod config;
pub mod train;
pub mod analyze;
