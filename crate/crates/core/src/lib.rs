//! Respiratory sound classification pipeline.
//!
//! Turns a directory of lung sound recordings plus a diagnosis table into
//! labeled Mel spectrograms, corrects the heavy class imbalance (class
//! weights, SMOTE, ADASYN, or a convolutional variational autoencoder),
//! trains a small CNN and evaluates it under stratified k-fold
//! cross-validation.

pub mod balance;
pub mod cnn;
pub mod dataset;
pub mod eval;
pub mod ingest;
pub mod melspec;
pub mod tensor;
pub mod vae;
