pub use defreg as core_crate;
