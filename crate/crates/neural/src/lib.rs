//! Recurrent building blocks written from first principles: dense matrices,
//! LSTM and GRU cells, stacked bidirectional sequence regressors, dropout,
//! backpropagation through time and an adaptive-moment optimizer.

pub mod adam;
pub mod birnn;
pub mod cell;
pub mod dropout;
pub mod error;
pub mod matrix;

pub use adam::{clip_global_norm, Adam};
pub use birnn::{BiLayer, BiRnnShape, StackedBiRnn};
pub use cell::{gru_cell_forward, lstm_cell_forward, CellKind, CellParams, GruCellParams, LstmCellParams};
pub use dropout::{apply_dropout, Mode};
pub use error::{NeuralError, Result};
pub use matrix::Matrix;
