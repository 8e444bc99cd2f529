pub mod asm;
pub mod tokenizer;
pub mod numeric;
pub mod encoder;
pub mod pretrain;
pub mod align;
pub mod eval;
pub mod synth;
