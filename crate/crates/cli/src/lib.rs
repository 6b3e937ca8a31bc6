//! Pieces of the `kestrel` command line tool that are useful on their own:
//! the configuration file reader and the instrumented demo application.

pub mod demo;
pub mod settings;
