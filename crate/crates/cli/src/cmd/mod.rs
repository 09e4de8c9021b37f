pub mod ablate;
pub mod common;
pub mod evaluate;
pub mod finetune;
pub mod prepare;
pub mod pretrain;
pub mod report;
pub mod stability;
pub mod variance;
