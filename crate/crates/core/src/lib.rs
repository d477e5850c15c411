pub mod ids;
pub mod keystore;
pub mod kmlink;
pub mod simcore;
pub mod experiments;
