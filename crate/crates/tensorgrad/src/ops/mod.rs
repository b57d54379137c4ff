pub mod basic;
pub mod complex;
pub mod conv;
pub mod norm;
pub mod recurrent;
